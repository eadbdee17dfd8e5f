#include "cocomix/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "cocomix/error.hpp"
#include "cocomix/optimizer.hpp"

namespace cocomix {

void SaeConfig::validate(int d_in) const {
  auto fail = [](const std::string& m) { throw ConfigError("sae config: " + m); };
  if (d_in < 1) fail("input width must be positive");
  if (n_concepts < 1) fail("n_concepts must be positive");
  if (k < 1 || k > n_concepts) fail("k must satisfy 1 <= k <= n_concepts");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (steps < 0 || batch < 1) fail("steps must be >= 0 and batch >= 1");
}

SaeModel::SaeModel(int d_in, int n_concepts, int k, std::uint64_t seed)
    : d_in_(d_in), n_concepts_(n_concepts), k_(k) {
  const std::size_t d = static_cast<std::size_t>(d_in);
  const std::size_t c = static_cast<std::size_t>(n_concepts);
  std::mt19937_64 rng(seed);
  dec_t_ = normal_leaf({c, d}, 1.0, rng);
  normalize_decoder();
  std::vector<double> enc(d * c);
  const auto dv = dec_t_.values();
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < d; ++j) enc[j * c + i] = dv[i * d + j];
  enc_t_ = GraphTensor::leaf({d, c}, std::move(enc), true);
  b_enc_ = constant_leaf({c}, 0.0);
  b_dec_ = constant_leaf({d}, 0.0);
  input_mean_ = constant_leaf({d}, 0.0, false);
}

GraphTensor SaeModel::pre_activation(const GraphTensor& h) const {
  if (h.cols() != static_cast<std::size_t>(d_in_)) {
    throw ShapeError("sae encode: input width " + std::to_string(h.cols()) +
                     " != " + std::to_string(d_in_));
  }
  return ops::add(ops::matmul(ops::sub(h, input_mean_), enc_t_), b_enc_);
}

GraphTensor SaeModel::decode(const GraphTensor& c) const {
  if (c.cols() != static_cast<std::size_t>(n_concepts_)) {
    throw ShapeError("sae decode: code width " + std::to_string(c.cols()) +
                     " != " + std::to_string(n_concepts_));
  }
  return ops::add(ops::add(ops::matmul(c, dec_t_), b_dec_), input_mean_);
}

GraphTensor SaeModel::loss(const GraphTensor& h) const {
  GraphTensor code = ops::topk_mask(pre_activation(h), static_cast<std::size_t>(k_));
  GraphTensor diff = ops::sub(h, decode(code));
  return ops::scale(ops::reduce_sum(ops::mul(diff, diff)),
                    1.0 / static_cast<double>(h.rows()));
}

ConceptActivation SaeModel::encode(std::span<const double> h) const {
  GraphTensor pre = pre_activation(GraphTensor::matrix(1, h.size(), {h.begin(), h.end()}));
  GraphTensor c = ops::topk_mask(pre, static_cast<std::size_t>(k_));
  ConceptActivation out;
  out.c_pre.assign(pre.values().begin(), pre.values().end());
  out.c.assign(c.values().begin(), c.values().end());
  // Kept coordinates follow the TopK tie rule; some may hold zero values.
  std::vector<int> order(out.c_pre.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return out.c_pre[a] > out.c_pre[b]; });
  out.active_indices.assign(order.begin(), order.begin() + k_);
  std::sort(out.active_indices.begin(), out.active_indices.end());
  return out;
}

std::vector<double> SaeModel::decode(std::span<const double> c) const {
  GraphTensor out = decode(GraphTensor::matrix(1, c.size(), {c.begin(), c.end()}));
  return {out.values().begin(), out.values().end()};
}

double SaeModel::sae_loss(std::span<const double> h) const {
  return loss(GraphTensor::matrix(1, h.size(), {h.begin(), h.end()})).item();
}

void SaeModel::normalize_decoder() {
  const std::size_t d = dec_t_.cols();
  auto v = dec_t_.mutable_values();
  for (std::size_t r = 0; r < dec_t_.rows(); ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += v[r * d + j] * v[r * d + j];
    const double n = std::sqrt(sq);
    if (n == 0.0) continue;
    for (std::size_t j = 0; j < d; ++j) v[r * d + j] /= n;
  }
}

ParameterList SaeModel::parameters() const {
  return {{"sae.enc_t", enc_t_}, {"sae.b_enc", b_enc_}, {"sae.dec_t", dec_t_},
          {"sae.b_dec", b_dec_}};
}

ParameterList SaeModel::state() const {
  ParameterList p = parameters();
  p.push_back({"sae.input_mean", input_mean_});
  return p;
}

void SaeModel::set_trainable(bool on) const { cocomix::set_trainable(parameters(), on); }

Digest SaeModel::content_hash() const {
  Sha256 h;
  h.update("sae/v1");
  h.update_u64(static_cast<std::uint64_t>(d_in_));
  h.update_u64(static_cast<std::uint64_t>(n_concepts_));
  h.update_u64(static_cast<std::uint64_t>(k_));
  hash_parameters(h, state());
  return h.finish();
}

SaeModel SaeModel::clone() const {
  SaeModel out;
  out.d_in_ = d_in_;
  out.n_concepts_ = n_concepts_;
  out.k_ = k_;
  out.enc_t_ = clone_leaf(enc_t_);
  out.b_enc_ = clone_leaf(b_enc_);
  out.dec_t_ = clone_leaf(dec_t_);
  out.b_dec_ = clone_leaf(b_dec_);
  out.input_mean_ = clone_leaf(input_mean_);
  return out;
}

namespace {

void check_matrix(const ActivationMatrix& data) {
  if (data.rows == 0 || data.cols == 0) throw RangeError("activation matrix is empty");
  if (data.values.size() != data.rows * data.cols) {
    throw ShapeError("activation matrix size does not match rows x cols");
  }
}

GraphTensor gather(const ActivationMatrix& data, std::span<const std::size_t> rows) {
  std::vector<double> v(rows.size() * data.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(data.values.begin() + static_cast<std::ptrdiff_t>(rows[i] * data.cols),
                data.cols, v.begin() + static_cast<std::ptrdiff_t>(i * data.cols));
  }
  return GraphTensor::matrix(rows.size(), data.cols, std::move(v));
}

}  // namespace

SaeModel train_sae(const ActivationMatrix& data, const SaeConfig& config,
                   SaeTrainLog* log) {
  check_matrix(data);
  const int d = static_cast<int>(data.cols);
  config.validate(d);
  SaeModel sae(d, config.n_concepts, config.k, config.seed);
  if (config.center_inputs) {
    auto mean = sae.input_mean().mutable_values();
    for (std::size_t r = 0; r < data.rows; ++r)
      for (std::size_t j = 0; j < data.cols; ++j) mean[j] += data.values[r * data.cols + j];
    for (double& m : mean) m /= static_cast<double>(data.rows);
  }

  AdamWConfig ac;
  ac.beta1 = 0.9;
  ac.beta2 = 0.999;
  ac.weight_decay = 0.0;
  AdamW opt(sae.parameters(), ac);
  std::mt19937_64 rng(config.seed ^ 0x5AE5AE5AE5AE5AEULL);
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch), data.rows);
  std::vector<std::size_t> order(data.rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = data.rows;
  std::vector<std::size_t> rows(batch);
  for (int step = 0; step < config.steps; ++step) {
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == data.rows) {
        for (std::size_t j = order.size(); j > 1; --j) std::swap(order[j - 1], order[rng() % j]);
        cursor = 0;
      }
      rows[i] = order[cursor++];
    }
    opt.zero_grad();
    GraphTensor loss;
    try {
      loss = sae.loss(gather(data, rows));
    } catch (const NonFiniteError& e) {
      throw DivergenceError("train_sae: step " + std::to_string(step) + ": " + e.what());
    }
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw DivergenceError("train_sae: non-finite loss at step " + std::to_string(step));
    }
    loss.backward();
    opt.step(config.lr);
    sae.normalize_decoder();
    if (log && (step % 100 == 0 || step + 1 == config.steps)) {
      log->step.push_back(step);
      log->mse.push_back(value);
    }
  }
  return sae;
}

SaeEvaluation evaluate_sae(const SaeModel& sae, const ActivationMatrix& data) {
  check_matrix(data);
  const std::size_t d = data.cols;
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < data.rows; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += data.values[r * d + j];
  for (double& m : mean) m /= static_cast<double>(data.rows);

  std::vector<bool> alive(static_cast<std::size_t>(sae.n_concepts()), false);
  double sq_err = 0.0, sq_var = 0.0;
  const std::size_t chunk = 1024;
  std::vector<std::size_t> rows;
  for (std::size_t begin = 0; begin < data.rows; begin += chunk) {
    const std::size_t end = std::min(data.rows, begin + chunk);
    rows.resize(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    GraphTensor h = gather(data, rows);
    GraphTensor pre = sae.pre_activation(h);
    GraphTensor code = ops::topk_mask(pre, static_cast<std::size_t>(sae.k()));
    GraphTensor rec = sae.decode(code);
    const auto hv = h.values(), rv = rec.values();
    for (std::size_t i = 0; i < hv.size(); ++i) {
      sq_err += (hv[i] - rv[i]) * (hv[i] - rv[i]);
      const double c = hv[i] - mean[i % d];
      sq_var += c * c;
    }
    const auto pv = pre.values();
    const std::size_t nc = pre.cols();
    std::vector<int> idx(nc);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + sae.k(), idx.end(), [&](int a, int b) {
        const double x = pv[r * nc + static_cast<std::size_t>(a)];
        const double y = pv[r * nc + static_cast<std::size_t>(b)];
        return x > y || (x == y && a < b);
      });
      for (int i = 0; i < sae.k(); ++i) alive[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = true;
    }
  }
  SaeEvaluation ev;
  ev.mse = sq_err / static_cast<double>(data.rows);
  ev.fvu = sq_var > 0.0 ? sq_err / sq_var : 0.0;
  ev.dead_concepts = static_cast<std::size_t>(std::count(alive.begin(), alive.end(), false));
  return ev;
}

}  // namespace cocomix
