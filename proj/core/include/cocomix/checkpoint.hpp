#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cocomix/optimizer.hpp"
#include "cocomix/params.hpp"

namespace cocomix {

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

// A checkpoint is two files: `<prefix>.json` (manifest: version, kind, step,
// config, tensor index with shapes, byte offsets and SHA-256 per tensor) and
// `<prefix>.bin` (the tensors' little-endian f64 values, concatenated in
// index order). Config and extra fields are JSON text.
struct Checkpoint {
  static constexpr int kVersion = 1;

  std::string kind;
  std::uint64_t step = 0;
  std::string config_json = "{}";
  std::string extra_json = "{}";
  std::vector<TensorRecord> tensors;

  bool has(const std::string& name) const;
  const TensorRecord& get(const std::string& name) const;
};

void save_checkpoint(const std::string& prefix, const Checkpoint& ckpt);
// Verifies the manifest version, blob size and every tensor hash.
Checkpoint load_checkpoint(const std::string& prefix);
bool checkpoint_exists(const std::string& prefix);

void append_parameters(Checkpoint& ckpt, const ParameterList& params);
// Copies stored values into `params` by name; shapes must match.
void restore_parameters(const Checkpoint& ckpt, const ParameterList& params);

// Moments are stored as "<tag>.m/<name>" and "<tag>.v/<name>" plus the step
// count in the extra field "<tag>.t".
void append_optimizer(Checkpoint& ckpt, const AdamW& opt, const std::string& tag);
void restore_optimizer(const Checkpoint& ckpt, AdamW& opt, const std::string& tag);

}  // namespace cocomix
