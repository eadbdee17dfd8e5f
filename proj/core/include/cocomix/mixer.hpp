#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cocomix/params.hpp"
#include "cocomix/tensor.hpp"

namespace cocomix {

// Row conventions: z = h M + head_b (M is d x C); c_hat = TopK(z) W + comp_b
// (W is C x d, so the compression matrix's columns are W's rows).
class ConceptMixer {
 public:
  ConceptMixer() = default;
  ConceptMixer(int d_model, int n_concepts, int k_mix, std::uint64_t seed);

  int d_model() const { return d_model_; }
  int n_concepts() const { return n_concepts_; }
  int k_mix() const { return k_mix_; }

  GraphTensor predict(const GraphTensor& h) const;
  GraphTensor compress(const GraphTensor& z) const;

  const GraphTensor& head_w() const { return head_w_; }
  const GraphTensor& head_b() const { return head_b_; }
  const GraphTensor& comp_w() const { return comp_w_; }
  const GraphTensor& comp_b() const { return comp_b_; }

  ParameterList parameters() const;

 private:
  int d_model_ = 0, n_concepts_ = 0, k_mix_ = 0;
  GraphTensor head_w_, head_b_, comp_w_, comp_b_;
};

// Mean over rows of (1/K) sum_i CE(z_row, label_i); `labels` holds K
// entries per row of z.
GraphTensor concept_loss(const GraphTensor& z, std::span<const int> labels, std::size_t k);

// Two-layer GELU MLP predicting the teacher hidden state, followed by the
// linear map that turns its output into an insertable d-vector.
class DirectHead {
 public:
  DirectHead() = default;
  DirectHead(int d_model, int d_teacher, std::uint64_t seed);

  GraphTensor predict(const GraphTensor& h) const;   // rows x d_teacher
  GraphTensor compress(const GraphTensor& g) const;  // rows x d_model
  ParameterList parameters() const;

  GraphTensor w1, b1, w2, b2, wc, bc;
};

enum class DirectLoss { kL1, kL2, kCos };
// Per-row mean of ||target - pred||_1, ||target - pred||_2^2 or 1 - cos.
GraphTensor direct_loss(const GraphTensor& pred, const GraphTensor& target, DirectLoss kind);

// Sequence layout for the interleaved suffix input.
struct Interleaved {
  GraphTensor rows;               // (B * 2T) x d
  std::vector<int> position_ids;  // per row
  std::size_t segment_len = 0;    // 2T
  std::vector<std::size_t> token_slots;    // rows holding h_t
  std::vector<std::size_t> concept_slots;  // rows holding c_hat_t
};

// h and c_hat hold B sequences of length t packed row-wise. Positions are
// 2t / 2t+1 by default, or t for both slots with `shared_positions`.
Interleaved interleave(const GraphTensor& h, const GraphTensor& c_hat, std::size_t t,
                       bool shared_positions = false);

// Inverse of interleave for checking: splits rows back into (h, c_hat).
std::pair<GraphTensor, GraphTensor> deinterleave(const Interleaved& mixed);

GraphTensor intervene(const GraphTensor& h, const GraphTensor& c_hat);

}  // namespace cocomix
