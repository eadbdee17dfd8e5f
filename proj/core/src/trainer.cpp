#include "cocomix/trainer.hpp"

#include <cmath>
#include <json.hpp>
#include <numeric>
#include <random>
#include <sstream>

#include "cocomix/error.hpp"
#include "cocomix/eval.hpp"

namespace cocomix {

using nlohmann::json;

namespace {

struct MethodInfo {
  Method method;
  const char* name;
};

constexpr MethodInfo kMethods[] = {
    {Method::kNtp, "ntp"},
    {Method::kCocomix, "cocomix"},
    {Method::kKd, "kd"},
    {Method::kPause, "pause"},
    {Method::kDirectL1, "direct_l1"},
    {Method::kDirectL2, "direct_l2"},
    {Method::kDirectCos, "direct_cos"},
    {Method::kCocomixIntervene, "cocomix_intervene"},
    {Method::kCocomixActivationSelect, "cocomix_activation_select"},
    {Method::kCocomixPredOnly, "cocomix_pred_only"},
    {Method::kCocomixInsertOnly, "cocomix_insert_only"},
};

bool is_direct(Method m) {
  return m == Method::kDirectL1 || m == Method::kDirectL2 || m == Method::kDirectCos;
}

DirectLoss direct_kind(Method m) {
  if (m == Method::kDirectL1) return DirectLoss::kL1;
  if (m == Method::kDirectL2) return DirectLoss::kL2;
  return DirectLoss::kCos;
}

std::vector<int> repeated_positions(std::size_t b, std::size_t t) {
  std::vector<int> p(b * t);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<int>(i % t);
  return p;
}

GraphTensor teacher_probs(const TransformerModel& teacher,
                          const std::vector<std::vector<int>>& inputs) {
  FrozenScope frozen(teacher.parameters());
  GraphTensor p = ops::softmax(teacher.forward_full(inputs));
  return p.detach();
}

std::size_t training_window_count(const TrainConfig& cfg, const TrainData& data) {
  cfg.validate();
  if (!data.train || data.train->empty()) throw MissingPrerequisiteError("trainer: no training windows");
  return data.train->size();
}

}  // namespace

std::string method_name(Method m) {
  for (const auto& i : kMethods)
    if (i.method == m) return i.name;
  throw ConfigError("unknown method");
}

Method parse_method(const std::string& s) {
  for (const auto& i : kMethods)
    if (s == i.name) return i.method;
  std::string names;
  for (const auto& i : kMethods) names += std::string(names.empty() ? "" : "|") + i.name;
  throw ConfigError("unknown method '" + s + "' (expected " + names + ")");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> v = [] {
    std::vector<Method> out;
    for (const auto& i : kMethods) out.push_back(i.method);
    return out;
  }();
  return v;
}

bool uses_concepts(Method m) {
  return m == Method::kCocomix || m == Method::kCocomixIntervene ||
         m == Method::kCocomixActivationSelect || m == Method::kCocomixPredOnly ||
         m == Method::kCocomixInsertOnly;
}

bool uses_teacher(Method m, bool pause_kd) {
  return m == Method::kKd || is_direct(m) || (m == Method::kPause && pause_kd);
}

bool interleaves(Method m) {
  return m == Method::kCocomix || m == Method::kCocomixActivationSelect ||
         m == Method::kCocomixInsertOnly || m == Method::kPause || is_direct(m);
}

SelectMode label_mode(Method m) {
  return m == Method::kCocomixActivationSelect ? SelectMode::kActivation
                                               : SelectMode::kAttribution;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(lambda >= 0.0)) fail("lambda must be >= 0");
  if (!(lambda_kd >= 0.0)) fail("lambda_kd must be >= 0");
  if (!(lr_max > 0.0)) fail("lr_max must be positive");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) fail("warmup_frac must lie in [0, 1)");
  if (!(final_lr_frac > 0.0 && final_lr_frac <= 1.0)) fail("final_lr_frac must lie in (0, 1]");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (steps == 0) fail("steps must be >= 1");
  if (batch_tokens == 0) fail("batch_tokens must be >= 1");
  if (k_mix < 0) fail("k_mix must be >= 0");
  if (log_every == 0 || eval_every == 0) fail("log_every and eval_every must be >= 1");
}

double TrainConfig::effective_lambda() const {
  return method == Method::kCocomixInsertOnly ? 0.0 : lambda;
}

Student::Student(Method m, const ModelConfig& model_config, int n_concepts, int k_mix,
                 int d_teacher, bool shared)
    : method(m), model(model_config), shared_positions(shared) {
  const std::uint64_t seed = model_config.seed;
  if (uses_concepts(m)) {
    mixer.emplace(model_config.d_model, n_concepts, k_mix, seed ^ 0xC0C0C0C0ULL);
  }
  if (is_direct(m)) {
    if (d_teacher < 1) throw ConfigError("direct-hidden arms need the teacher width");
    direct.emplace(model_config.d_model, d_teacher, seed ^ 0xD1D1D1D1ULL);
  }
  if (m == Method::kPause) {
    std::mt19937_64 rng(seed ^ 0xBABABABAULL);
    pause = normal_leaf({1, static_cast<std::size_t>(model_config.d_model)}, 0.02, rng);
  }
}

ParameterList Student::parameters() const {
  ParameterList p = model.parameters();
  if (mixer) {
    auto q = mixer->parameters();
    p.insert(p.end(), q.begin(), q.end());
  }
  if (direct) {
    auto q = direct->parameters();
    p.insert(p.end(), q.begin(), q.end());
  }
  if (pause.defined()) p.push_back({"pause", pause});
  return p;
}

Digest Student::content_hash() const {
  Sha256 h;
  h.update("student/v1");
  h.update(method_name(method));
  h.update(model.content_hash());
  hash_parameters(h, parameters());
  return h.finish();
}

ForwardOut student_forward(const Student& s, const std::vector<std::vector<int>>& inputs,
                           const ConceptTransform* transform, bool want_token_logits) {
  if (inputs.empty()) throw RangeError("student_forward: empty batch");
  const std::size_t t = inputs[0].size();
  const std::size_t b = inputs.size();
  const TransformerModel& m = s.model;
  ForwardOut out;
  if (s.method == Method::kNtp || s.method == Method::kKd) {
    out.logits = m.forward_full(inputs);
    return out;
  }
  GraphTensor h = m.forward_prefix(inputs);
  GraphTensor c_hat;
  if (uses_concepts(s.method)) {
    out.z = s.mixer->predict(h);
    if (s.method == Method::kCocomixPredOnly) {
      out.logits = m.forward_suffix(h, repeated_positions(b, t), t);
      return out;
    }
    c_hat = s.mixer->compress(transform ? (*transform)(out.z) : out.z);
    if (s.method == Method::kCocomixIntervene) {
      out.logits = m.forward_suffix(intervene(h, c_hat), repeated_positions(b, t), t);
      return out;
    }
  } else if (s.method == Method::kPause) {
    c_hat = ops::embedding_gather(s.pause, std::vector<int>(b * t, 0));
  } else {
    out.direct_pred = s.direct->predict(h);
    c_hat = s.direct->compress(out.direct_pred);
  }
  Interleaved mixed = interleave(h, c_hat, t, s.shared_positions);
  GraphTensor normed = m.suffix_hidden(mixed.rows, mixed.position_ids, mixed.segment_len);
  out.logits = m.unembed(ops::gather_rows(normed, mixed.concept_slots));
  if (want_token_logits) out.token_logits = m.unembed(ops::gather_rows(normed, mixed.token_slots));
  return out;
}

StepLosses compute_losses(const Student& s, const TrainConfig& cfg, const LossInputs& in) {
  const bool pause_kd = s.method == Method::kPause && cfg.pause_kd;
  ForwardOut out = student_forward(s, *in.inputs, nullptr, cfg.supervise_token_slots || pause_kd);
  StepLosses l;
  l.ntp = ops::cross_entropy(out.logits, *in.targets);
  if (cfg.supervise_token_slots && out.token_logits.defined()) {
    l.ntp = ops::scale(ops::add(l.ntp, ops::cross_entropy(out.token_logits, *in.targets)), 0.5);
  }
  double coef = 0.0;
  if (uses_concepts(s.method)) {
    if (!in.labels) throw MissingPrerequisiteError("concept labels are required for " + method_name(s.method));
    l.aux = concept_loss(out.z, *in.labels, in.k_attr);
    coef = cfg.effective_lambda();
  } else if (s.method == Method::kKd || pause_kd) {
    if (!in.teacher) throw MissingPrerequisiteError("a teacher is required for " + method_name(s.method));
    if (in.teacher->config().vocab_size != s.model.config().vocab_size) {
      throw ConfigError("kd: teacher and student vocabularies differ");
    }
    // Pause KD matches the teacher at the token slots.
    l.aux = ops::kl_divergence(teacher_probs(*in.teacher, *in.inputs), pause_kd ? out.token_logits : out.logits);
    coef = cfg.lambda_kd;
  } else if (is_direct(s.method)) {
    if (!in.teacher) throw MissingPrerequisiteError("a teacher is required for " + method_name(s.method));
    GraphTensor target;
    {
      FrozenScope frozen(in.teacher->parameters());
      target = in.teacher->forward_prefix(*in.inputs).detach();
    }
    l.aux = direct_loss(out.direct_pred, target, direct_kind(s.method));
    coef = cfg.lambda;
  } else {
    l.aux = GraphTensor::scalar(0.0);
  }
  l.total = ops::add(l.ntp, ops::scale(l.aux, coef));
  return l;
}

Trainer::Trainer(Student& student, TrainConfig cfg, TrainData data)
    : student_(student),
      cfg_(std::move(cfg)),
      data_(data),
      seq_per_batch_(0),
      context_(static_cast<std::size_t>(student.model.config().context_len)),
      batches_(training_window_count(cfg_, data),
               std::max<std::size_t>(1, cfg_.batch_tokens / context_), cfg_.seed ^ 0xBA7C4ULL),
      schedule_(LrSchedule::from_fractions(cfg_.lr_max, cfg_.steps, cfg_.warmup_frac,
                                           cfg_.final_lr_frac)),
      opt_(student.parameters(),
           AdamWConfig{cfg_.beta1, cfg_.beta2, 1e-8, cfg_.weight_decay}) {
  if (cfg_.method != student.method) throw ConfigError("trainer: config method differs from student");
  if (cfg_.batch_tokens % context_ != 0) {
    throw ConfigError("batch_tokens must be a multiple of context_len");
  }
  seq_per_batch_ = cfg_.batch_tokens / context_;
  for (const auto& w : *data.train) {
    if (w.tokens.size() != context_ + 1) throw ShapeError("trainer: window length differs from context_len + 1");
  }
  if (uses_concepts(cfg_.method)) {
    if (!data.labels) throw MissingPrerequisiteError("trainer: concept labels required");
    if (data.labels->positions() != data.train->size() * context_) {
      throw ShapeError("trainer: label positions do not match the training windows");
    }
    if (data.labels->mode != label_mode(cfg_.method)) {
      throw ConfigError("trainer: " + method_name(cfg_.method) + " needs " +
                        select_mode_name(label_mode(cfg_.method)) + " labels");
    }
  }
  if (uses_teacher(cfg_.method, cfg_.pause_kd) && !data.teacher) {
    throw MissingPrerequisiteError("trainer: teacher required for " + method_name(cfg_.method));
  }
}

double Trainer::evaluate() const {
  if (!data_.heldout || data_.heldout->empty()) return std::nan("");
  if (cfg_.eval_windows == 0 || cfg_.eval_windows >= data_.heldout->size()) {
    return perplexity(student_, *data_.heldout);
  }
  std::vector<Window> subset(data_.heldout->begin(),
                             data_.heldout->begin() + static_cast<std::ptrdiff_t>(cfg_.eval_windows));
  return perplexity(student_, subset);
}

TrainResult Trainer::run(std::uint64_t stop_step) {
  const std::uint64_t end = std::min(stop_step, cfg_.steps);
  const std::size_t k_attr = data_.labels ? static_cast<std::size_t>(data_.labels->k_attr) : 0;
  const auto params = student_.parameters();
  std::vector<std::vector<int>> inputs(seq_per_batch_);
  std::vector<int> targets, labels;
  while (step_ < end) {
    const auto batch = batches_.batch(step_);
    targets.clear();
    labels.clear();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Window& w = (*data_.train)[batch[i]];
      inputs[i] = w.inputs();
      auto tg = w.targets();
      targets.insert(targets.end(), tg.begin(), tg.end());
      if (k_attr) {
        const auto span = std::span(data_.labels->indices)
                              .subspan(batch[i] * context_ * k_attr, context_ * k_attr);
        labels.insert(labels.end(), span.begin(), span.end());
      }
    }
    LossInputs in{&inputs, &targets, k_attr ? &labels : nullptr, k_attr, data_.teacher};
    StepLosses l;
    try {
      l = compute_losses(student_, cfg_, in);
    } catch (const NonFiniteError& e) {
      throw DivergenceError("step " + std::to_string(step_) + ": " + e.what());
    }
    const double total = l.total.item(), ntp = l.ntp.item(), aux = l.aux.item();
    if (!std::isfinite(total)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step_ << " (ntp=" << ntp << ", aux=" << aux << ")";
      throw DivergenceError(msg.str());
    }
    opt_.zero_grad();
    l.total.backward();
    clip_grad_norm(params, cfg_.clip_norm);
    const double lr = schedule_.lr(step_);
    opt_.step(lr);
    ++step_;

    const bool last = step_ == cfg_.steps;
    const bool eval_now = last || step_ % cfg_.eval_every == 0;
    if (eval_now || (step_ - 1) % cfg_.log_every == 0) {
      MetricsRow r;
      r.step = step_;
      r.tokens_seen = step_ * seq_per_batch_ * context_;
      r.lr = lr;
      r.ntp_loss = ntp;
      r.concept_loss = aux;
      r.total_loss = total;
      r.val_ppl = eval_now ? evaluate() : std::nan("");
      rows_.push_back(r);
    }
    if (!ckpt_prefix_.empty() && (last || (ckpt_every_ && step_ % ckpt_every_ == 0))) {
      save_checkpoint(ckpt_prefix_, checkpoint());
    }
  }
  TrainResult res;
  res.rows = rows_;
  for (auto it = rows_.rbegin(); it != rows_.rend(); ++it) {
    if (!std::isnan(it->val_ppl)) {
      res.final_val_ppl = it->val_ppl;
      break;
    }
  }
  return res;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.kind = "student";
  ck.step = step_;
  json cfg = {{"train", json::parse(train_config_json(cfg_))},
              {"model", json::parse(model_config_json(student_.model.config()))},
              {"method", method_name(student_.method)},
              {"n_concepts", student_.mixer ? student_.mixer->n_concepts() : 0},
              {"k_mix", student_.mixer ? student_.mixer->k_mix() : 0},
              {"d_teacher", student_.direct ? student_.direct->w2.cols() : 0}};
  ck.config_json = cfg.dump();
  ck.extra_json = json{{"metrics_csv", format_metrics_csv(rows_)}}.dump();
  append_parameters(ck, student_.parameters());
  append_optimizer(ck, opt_, "adamw");
  return ck;
}

void Trainer::resume(const Checkpoint& ckpt) {
  if (ckpt.kind != "student") throw FormatError("resume: checkpoint is not a student");
  const json cfg = json::parse(ckpt.config_json);
  if (cfg.at("method").get<std::string>() != method_name(student_.method)) {
    throw ConfigError("resume: checkpoint method differs");
  }
  restore_parameters(ckpt, student_.parameters());
  restore_optimizer(ckpt, opt_, "adamw");
  step_ = ckpt.step;
  rows_ = parse_metrics_csv(json::parse(ckpt.extra_json).at("metrics_csv").get<std::string>(),
                            "checkpoint metrics");
}

std::string train_config_json(const TrainConfig& c) {
  json j = {{"method", method_name(c.method)},
            {"lambda", c.lambda},
            {"lambda_kd", c.lambda_kd},
            {"lr_max", c.lr_max},
            {"warmup_frac", c.warmup_frac},
            {"final_lr_frac", c.final_lr_frac},
            {"weight_decay", c.weight_decay},
            {"betas", {c.beta1, c.beta2}},
            {"clip_norm", c.clip_norm},
            {"steps", c.steps},
            {"batch_tokens", c.batch_tokens},
            {"seed", c.seed},
            {"k_mix", c.k_mix},
            {"pause_kd", c.pause_kd},
            {"shared_positions", c.shared_positions},
            {"supervise_token_slots", c.supervise_token_slots},
            {"log_every", c.log_every},
            {"eval_every", c.eval_every},
            {"eval_windows", c.eval_windows}};
  return j.dump();
}

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known |= it.key() == k;
    if (!known) throw ConfigError(what + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    reject_unknown(j,
                   {"method", "lambda", "lambda_kd", "lr_max", "warmup_frac", "final_lr_frac",
                    "weight_decay", "betas", "clip_norm", "steps", "batch_tokens", "seed", "k_mix",
                    "pause_kd", "shared_positions", "supervise_token_slots", "log_every",
                    "eval_every", "eval_windows"},
                   "train config");
    if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
    read_opt(j, "lambda", c.lambda);
    read_opt(j, "lambda_kd", c.lambda_kd);
    read_opt(j, "lr_max", c.lr_max);
    read_opt(j, "warmup_frac", c.warmup_frac);
    read_opt(j, "final_lr_frac", c.final_lr_frac);
    read_opt(j, "weight_decay", c.weight_decay);
    if (j.contains("betas")) {
      const auto b = j.at("betas").get<std::vector<double>>();
      if (b.size() != 2) throw ConfigError("train config: betas needs two values");
      c.beta1 = b[0];
      c.beta2 = b[1];
    }
    read_opt(j, "clip_norm", c.clip_norm);
    read_opt(j, "steps", c.steps);
    read_opt(j, "batch_tokens", c.batch_tokens);
    read_opt(j, "seed", c.seed);
    read_opt(j, "k_mix", c.k_mix);
    read_opt(j, "pause_kd", c.pause_kd);
    read_opt(j, "shared_positions", c.shared_positions);
    read_opt(j, "supervise_token_slots", c.supervise_token_slots);
    read_opt(j, "log_every", c.log_every);
    read_opt(j, "eval_every", c.eval_every);
    read_opt(j, "eval_windows", c.eval_windows);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

std::string model_config_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
              {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
              {"context_len", c.context_len}, {"split_layer", c.split_layer},
              {"seed", c.seed}}
      .dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  bool split_given = false;
  try {
    const json j = json::parse(text);
    reject_unknown(j, {"vocab_size", "d_model", "n_layers", "n_heads", "context_len", "split_layer", "seed"},
                   "model config");
    read_opt(j, "vocab_size", c.vocab_size);
    read_opt(j, "d_model", c.d_model);
    read_opt(j, "n_layers", c.n_layers);
    read_opt(j, "n_heads", c.n_heads);
    read_opt(j, "context_len", c.context_len);
    split_given = j.contains("split_layer");
    read_opt(j, "split_layer", c.split_layer);
    read_opt(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (!split_given) c.split_layer = ModelConfig::default_split_layer(c.n_layers);
  return c;
}

}  // namespace cocomix
