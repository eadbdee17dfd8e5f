#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cocomix/corpus.hpp"
#include "cocomix/hash.hpp"
#include "cocomix/sae.hpp"
#include "cocomix/transformer.hpp"

namespace cocomix {

// On disk: "ACTD", u32 version, u64 rows, u32 d_con, 32-byte teacher hash,
// u32 layer, then rows x d_con little-endian f32. Values are widened to f64
// on read.
struct ActivationDump {
  static constexpr std::uint32_t kVersion = 1;

  Digest teacher_hash{};
  std::uint32_t layer = 0;
  ActivationMatrix data;
};

// Teacher hidden states after block `layer` (must equal the teacher's split
// layer) for the inputs of every window, stacked in window order.
ActivationDump dump_activations(const TransformerModel& teacher,
                                const std::vector<Window>& windows, int layer);

void write_activation_dump(const std::string& path, const ActivationDump& dump);
// Throws FormatError on bad magic/version/size or, when `expected_teacher` is
// given, a teacher-hash mismatch.
ActivationDump read_activation_dump(const std::string& path,
                                    const std::optional<Digest>& expected_teacher = {});

}  // namespace cocomix
