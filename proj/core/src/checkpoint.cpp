#include "cocomix/checkpoint.hpp"

#include <filesystem>
#include <json.hpp>

#include "binary_io.hpp"
#include "cocomix/error.hpp"

namespace cocomix {

using nlohmann::json;

bool Checkpoint::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

const TensorRecord& Checkpoint::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("checkpoint has no tensor named " + name);
}

namespace {

json parse_or_throw(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}

std::string blob_path(const std::string& prefix) { return prefix + ".bin"; }
std::string manifest_path(const std::string& prefix) { return prefix + ".json"; }

}  // namespace

void save_checkpoint(const std::string& prefix, const Checkpoint& ckpt) {
  io::Writer blob;
  json index = json::array();
  for (const auto& t : ckpt.tensors) {
    std::size_t n = 1;
    for (auto s : t.shape) n *= s;
    if (n != t.values.size()) throw ShapeError("checkpoint tensor " + t.name + ": shape/values mismatch");
    const std::size_t offset = blob.bytes().size();
    for (double v : t.values) blob.put<double>(v);
    const std::span<const std::uint8_t> bytes(blob.bytes().data() + offset, n * 8);
    index.push_back({{"name", t.name},
                     {"shape", t.shape},
                     {"offset", offset},
                     {"bytes", n * 8},
                     {"sha256", to_hex(sha256(bytes))}});
  }
  json manifest = {
      {"format", "cocomix-checkpoint"},
      {"version", Checkpoint::kVersion},
      {"kind", ckpt.kind},
      {"step", ckpt.step},
      {"config", parse_or_throw(ckpt.config_json, "checkpoint config")},
      {"extra", parse_or_throw(ckpt.extra_json, "checkpoint extra")},
      {"blob", std::filesystem::path(blob_path(prefix)).filename().string()},
      {"blob_sha256", to_hex(sha256(blob.bytes()))},
      {"tensors", index},
  };
  io::write_file(blob_path(prefix), blob.bytes());
  io::write_text(manifest_path(prefix), manifest.dump(2) + "\n");
}

bool checkpoint_exists(const std::string& prefix) {
  return std::filesystem::exists(manifest_path(prefix)) &&
         std::filesystem::exists(blob_path(prefix));
}

Checkpoint load_checkpoint(const std::string& prefix) {
  if (!std::filesystem::exists(manifest_path(prefix))) {
    throw MissingPrerequisiteError("missing checkpoint manifest " + manifest_path(prefix));
  }
  if (!std::filesystem::exists(blob_path(prefix))) {
    throw MissingPrerequisiteError("missing checkpoint blob " + blob_path(prefix));
  }
  const json m = parse_or_throw(io::read_text(manifest_path(prefix)), manifest_path(prefix));
  const auto blob = io::read_file(blob_path(prefix));
  Checkpoint ck;
  try {
    if (m.at("format") != "cocomix-checkpoint") throw FormatError(prefix + ": not a checkpoint manifest");
    if (!m.contains("version")) throw FormatError(prefix + ": manifest lacks a version");
    if (m.at("version").get<int>() != Checkpoint::kVersion) {
      throw FormatError(prefix + ": unsupported checkpoint version");
    }
    ck.kind = m.at("kind").get<std::string>();
    ck.step = m.at("step").get<std::uint64_t>();
    ck.config_json = m.at("config").dump();
    ck.extra_json = m.at("extra").dump();
    for (const auto& e : m.at("tensors")) {
      TensorRecord t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("bytes").get<std::size_t>();
      std::size_t n = 1;
      for (auto s : t.shape) n *= s;
      if (nbytes != n * 8 || offset > blob.size() || blob.size() - offset < nbytes) {
        throw FormatError(prefix + ": tensor " + t.name + " lies outside the blob");
      }
      const std::span<const std::uint8_t> bytes(blob.data() + offset, nbytes);
      if (to_hex(sha256(bytes)) != e.at("sha256").get<std::string>()) {
        throw FormatError(prefix + ": hash mismatch for tensor " + t.name);
      }
      io::Reader r(bytes, prefix);
      t.values.resize(n);
      for (double& v : t.values) v = r.get<double>();
      ck.tensors.push_back(std::move(t));
    }
    if (to_hex(sha256(blob)) != m.at("blob_sha256").get<std::string>()) {
      throw FormatError(prefix + ": blob hash mismatch");
    }
  } catch (const json::exception& e) {
    throw FormatError(prefix + ": malformed manifest: " + e.what());
  }
  return ck;
}

void append_parameters(Checkpoint& ckpt, const ParameterList& params) {
  for (const auto& p : params) {
    ckpt.tensors.push_back({p.name, p.tensor.shape(),
                            {p.tensor.values().begin(), p.tensor.values().end()}});
  }
}

void restore_parameters(const Checkpoint& ckpt, const ParameterList& params) {
  for (const auto& p : params) {
    const TensorRecord& t = ckpt.get(p.name);
    if (t.shape != p.tensor.shape()) {
      throw FormatError("checkpoint tensor " + p.name + " has a different shape");
    }
    GraphTensor dst = p.tensor;
    std::copy(t.values.begin(), t.values.end(), dst.mutable_values().begin());
  }
}

void append_optimizer(Checkpoint& ckpt, const AdamW& opt, const std::string& tag) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt.tensors.push_back({tag + ".m/" + params[i].name, params[i].tensor.shape(),
                            opt.first_moments()[i]});
    ckpt.tensors.push_back({tag + ".v/" + params[i].name, params[i].tensor.shape(),
                            opt.second_moments()[i]});
  }
  json extra = parse_or_throw(ckpt.extra_json, "checkpoint extra");
  extra[tag + ".t"] = opt.step_count();
  ckpt.extra_json = extra.dump();
}

void restore_optimizer(const Checkpoint& ckpt, AdamW& opt, const std::string& tag) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = ckpt.get(tag + ".m/" + params[i].name);
    const auto& v = ckpt.get(tag + ".v/" + params[i].name);
    if (m.values.size() != opt.first_moments()[i].size() ||
        v.values.size() != opt.second_moments()[i].size()) {
      throw FormatError("optimizer state for " + params[i].name + " has a different size");
    }
    opt.first_moments()[i] = m.values;
    opt.second_moments()[i] = v.values;
  }
  const json extra = parse_or_throw(ckpt.extra_json, "checkpoint extra");
  if (!extra.contains(tag + ".t")) throw FormatError("checkpoint lacks optimizer step " + tag + ".t");
  opt.set_step_count(extra.at(tag + ".t").get<std::uint64_t>());
}

}  // namespace cocomix
