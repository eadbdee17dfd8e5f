#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cocomix/hash.hpp"
#include "cocomix/params.hpp"
#include "cocomix/tensor.hpp"

namespace cocomix {

struct SaeConfig {
  int n_concepts = 512;  // C
  int k = 8;             // K_SAE
  double lr = 1e-3;
  int steps = 2000;
  int batch = 256;
  std::uint64_t seed = 0;
  // Only mean-centering is applied to inputs; kept as an explicit switch.
  bool center_inputs = true;

  void validate(int d_in) const;
};

// Sparse code of one row: c equals c_pre on active_indices and 0 elsewhere.
struct ConceptActivation {
  std::vector<double> c_pre;
  std::vector<double> c;
  std::vector<int> active_indices;
};

// TopK autoencoder with row-vector conventions:
//   c_pre = (h - input_mean) E^T + b_enc,  c = TopK(c_pre)
//   h_hat = c D^T + b_dec + input_mean
// `enc_t` stores E^T (d x C); `dec_t` stores D^T (C x d), so decoder
// columns are its rows.
class SaeModel {
 public:
  SaeModel() = default;
  SaeModel(int d_in, int n_concepts, int k, std::uint64_t seed);

  int d_in() const { return d_in_; }
  int n_concepts() const { return n_concepts_; }
  int k() const { return k_; }

  GraphTensor& enc_t() { return enc_t_; }
  GraphTensor& b_enc() { return b_enc_; }
  GraphTensor& dec_t() { return dec_t_; }
  GraphTensor& b_dec() { return b_dec_; }
  GraphTensor& input_mean() { return input_mean_; }
  const GraphTensor& enc_t() const { return enc_t_; }
  const GraphTensor& b_enc() const { return b_enc_; }
  const GraphTensor& dec_t() const { return dec_t_; }
  const GraphTensor& b_dec() const { return b_dec_; }
  const GraphTensor& input_mean() const { return input_mean_; }

  // Graph versions over packed rows (n x d_in / n x C).
  GraphTensor pre_activation(const GraphTensor& h) const;
  GraphTensor decode(const GraphTensor& c) const;
  // Mean over rows of ||h - decode(TopK(c_pre))||^2.
  GraphTensor loss(const GraphTensor& h) const;

  ConceptActivation encode(std::span<const double> h) const;
  std::vector<double> decode(std::span<const double> c) const;
  double sae_loss(std::span<const double> h) const;

  void normalize_decoder();
  // Trainable parameters (input_mean is a fixed statistic, not included).
  ParameterList parameters() const;
  // Every stored tensor, including input_mean, for serialization.
  ParameterList state() const;
  void set_trainable(bool on) const;
  Digest content_hash() const;
  SaeModel clone() const;

 private:
  int d_in_ = 0, n_concepts_ = 0, k_ = 0;
  GraphTensor enc_t_, b_enc_, dec_t_, b_dec_, input_mean_;
};

struct SaeTrainLog {
  std::vector<int> step;
  std::vector<double> mse;
};

// Row-major rows x d_in matrix; rows must be nonempty and finite.
struct ActivationMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

SaeModel train_sae(const ActivationMatrix& data, const SaeConfig& config,
                   SaeTrainLog* log = nullptr);

// Mean squared reconstruction error over all rows, and the fraction of
// variance unexplained relative to predicting the per-dimension mean.
struct SaeEvaluation {
  double mse = 0.0;
  double fvu = 0.0;
  std::size_t dead_concepts = 0;  // never in any row's top-K
};
SaeEvaluation evaluate_sae(const SaeModel& sae, const ActivationMatrix& data);

}  // namespace cocomix
