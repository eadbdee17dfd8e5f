#include "cocomix/activation_dump.hpp"

#include <cstring>

#include "binary_io.hpp"
#include "cocomix/error.hpp"

namespace cocomix {

namespace {
constexpr char kMagic[4] = {'A', 'C', 'T', 'D'};
}

ActivationDump dump_activations(const TransformerModel& teacher,
                                const std::vector<Window>& windows, int layer) {
  if (layer != teacher.config().split_layer) {
    throw ConfigError("dump_activations: layer " + std::to_string(layer) +
                      " differs from the teacher split layer " +
                      std::to_string(teacher.config().split_layer));
  }
  if (windows.empty()) throw RangeError("dump_activations: no windows");
  ActivationDump dump;
  dump.teacher_hash = teacher.content_hash();
  dump.layer = static_cast<std::uint32_t>(layer);
  dump.data.cols = static_cast<std::size_t>(teacher.d_model());
  const std::size_t chunk = 64;
  for (std::size_t b = 0; b < windows.size(); b += chunk) {
    std::vector<std::vector<int>> batch;
    for (std::size_t i = b; i < std::min(windows.size(), b + chunk); ++i) {
      batch.push_back(windows[i].inputs());
    }
    GraphTensor h = teacher.forward_prefix(batch);
    dump.data.values.insert(dump.data.values.end(), h.values().begin(), h.values().end());
    dump.data.rows += h.rows();
  }
  return dump;
}

void write_activation_dump(const std::string& path, const ActivationDump& dump) {
  const auto& m = dump.data;
  if (m.values.size() != m.rows * m.cols) {
    throw ShapeError("activation dump: payload does not match rows x d_con");
  }
  io::Writer w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
  w.put<std::uint32_t>(ActivationDump::kVersion);
  w.put<std::uint64_t>(m.rows);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols));
  w.put_digest(dump.teacher_hash);
  w.put<std::uint32_t>(dump.layer);
  w.bytes().reserve(w.bytes().size() + m.values.size() * 4);
  for (double v : m.values) w.put<float>(static_cast<float>(v));
  io::write_file(path, w.bytes());
}

ActivationDump read_activation_dump(const std::string& path,
                                    const std::optional<Digest>& expected_teacher) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes, "activation dump " + path);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": not an ACTD file");
  const auto version = r.get<std::uint32_t>();
  if (version != ActivationDump::kVersion) {
    throw FormatError(path + ": unsupported ACTD version " + std::to_string(version));
  }
  ActivationDump dump;
  dump.data.rows = r.get<std::uint64_t>();
  dump.data.cols = r.get<std::uint32_t>();
  dump.teacher_hash = r.get_digest();
  dump.layer = r.get<std::uint32_t>();
  if (expected_teacher && *expected_teacher != dump.teacher_hash) {
    throw FormatError(path + ": teacher hash mismatch (dump " + to_hex(dump.teacher_hash) +
                      ", expected " + to_hex(*expected_teacher) + ")");
  }
  const std::size_t n = dump.data.rows * dump.data.cols;
  if (r.remaining() != n * 4) {
    throw FormatError(path + ": header declares " + std::to_string(n) +
                      " values but payload holds " + std::to_string(r.remaining() / 4));
  }
  dump.data.values.resize(n);
  for (double& v : dump.data.values) v = static_cast<double>(r.get<float>());
  return dump;
}

}  // namespace cocomix
