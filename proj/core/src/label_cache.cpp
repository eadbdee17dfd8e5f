#include "cocomix/label_cache.hpp"

#include <cstring>
#include <filesystem>

#include "binary_io.hpp"
#include "cocomix/error.hpp"

namespace cocomix {

namespace {

constexpr char kMagic[4] = {'C', 'L', 'B', 'L'};

struct Header {
  LabelKey key;
  std::uint64_t positions = 0;
  Digest payload_hash{};
};

std::vector<std::uint8_t> payload(const LabelSet& labels) {
  io::Writer w;
  const std::size_t k = static_cast<std::size_t>(labels.k_attr);
  for (std::size_t p = 0; p < labels.positions(); ++p) {
    for (std::size_t i = 0; i < k; ++i) w.put<std::uint32_t>(static_cast<std::uint32_t>(labels.indices[p * k + i]));
    for (std::size_t i = 0; i < k; ++i) w.put<double>(labels.scores[p * k + i]);
  }
  return std::move(w.bytes());
}

Header read_header(io::Reader& r, const std::string& path) {
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": not a CLBL file");
  const auto version = r.get<std::uint32_t>();
  if (version != kLabelCacheVersion) {
    throw FormatError(path + ": unsupported CLBL version " + std::to_string(version));
  }
  Header h;
  h.key.n_concepts = static_cast<int>(r.get<std::uint32_t>());
  h.key.k_attr = static_cast<int>(r.get<std::uint32_t>());
  h.key.mode = static_cast<SelectMode>(r.get<std::uint32_t>());
  h.key.rank = static_cast<RankBy>(r.get<std::uint32_t>());
  h.key.teacher_hash = r.get_digest();
  h.key.sae_hash = r.get_digest();
  h.key.slice_hash = r.get_digest();
  h.positions = r.get<std::uint64_t>();
  h.payload_hash = r.get_digest();
  return h;
}

bool same_key(const LabelKey& a, const LabelKey& b) {
  return a.teacher_hash == b.teacher_hash && a.sae_hash == b.sae_hash &&
         a.slice_hash == b.slice_hash && a.mode == b.mode && a.rank == b.rank &&
         a.n_concepts == b.n_concepts && a.k_attr == b.k_attr;
}

}  // namespace

void write_label_cache(const std::string& path, const LabelKey& key, const LabelSet& labels) {
  if (labels.k_attr != key.k_attr || labels.n_concepts != key.n_concepts ||
      labels.mode != key.mode || labels.rank != key.rank) {
    throw ConfigError("write_label_cache: labels do not match their key");
  }
  const auto body = payload(labels);
  io::Writer w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
  w.put<std::uint32_t>(kLabelCacheVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(key.n_concepts));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(key.k_attr));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(key.mode));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(key.rank));
  w.put_digest(key.teacher_hash);
  w.put_digest(key.sae_hash);
  w.put_digest(key.slice_hash);
  w.put<std::uint64_t>(labels.positions());
  w.put_digest(sha256(body));
  w.put_bytes(body);
  io::write_file(path, w.bytes());
}

LabelSet read_label_cache(const std::string& path, const LabelKey& key) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes, "label cache " + path);
  const Header h = read_header(r, path);
  if (!same_key(h.key, key)) {
    throw FormatError(path + ": label cache was built for different inputs");
  }
  const std::size_t k = static_cast<std::size_t>(h.key.k_attr);
  if (r.remaining() != h.positions * k * 12) {
    throw FormatError(path + ": payload size does not match the declared positions");
  }
  if (sha256(r.rest()) != h.payload_hash) throw FormatError(path + ": payload hash mismatch");
  LabelSet out;
  out.n_concepts = h.key.n_concepts;
  out.k_attr = h.key.k_attr;
  out.mode = h.key.mode;
  out.rank = h.key.rank;
  out.indices.resize(h.positions * k);
  out.scores.resize(h.positions * k);
  for (std::size_t p = 0; p < h.positions; ++p) {
    for (std::size_t i = 0; i < k; ++i) {
      const auto idx = r.get<std::uint32_t>();
      if (idx >= static_cast<std::uint32_t>(h.key.n_concepts)) {
        throw FormatError(path + ": concept index out of range");
      }
      out.indices[p * k + i] = static_cast<std::int32_t>(idx);
    }
    for (std::size_t i = 0; i < k; ++i) out.scores[p * k + i] = r.get<double>();
  }
  return out;
}

Digest label_cache_payload_hash(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes, "label cache " + path);
  return read_header(r, path).payload_hash;
}

LabelSet cached_label_batch(const std::string& path, const TransformerModel& teacher,
                            const SaeModel& sae, const std::vector<Window>& windows,
                            int k_attr, SelectMode mode, RankBy rank, bool* hit) {
  LabelKey key;
  key.teacher_hash = teacher.content_hash();
  key.sae_hash = sae.content_hash();
  key.slice_hash = windows_hash(windows);
  key.mode = mode;
  key.rank = rank;
  key.n_concepts = sae.n_concepts();
  key.k_attr = k_attr;
  if (std::filesystem::exists(path)) {
    const auto bytes = io::read_file(path);
    io::Reader r(bytes, path);
    bool matches = false;
    try {
      matches = same_key(read_header(r, path).key, key);
    } catch (const FormatError&) {
      matches = false;
    }
    if (matches) {
      if (hit) *hit = true;
      return read_label_cache(path, key);
    }
  }
  if (hit) *hit = false;
  LabelSet labels = label_batch(teacher, sae, windows, k_attr, mode, rank);
  write_label_cache(path, key, labels);
  return labels;
}

}  // namespace cocomix
