#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cocomix/checkpoint.hpp"
#include "cocomix/concept_select.hpp"
#include "cocomix/corpus.hpp"
#include "cocomix/metrics.hpp"
#include "cocomix/mixer.hpp"
#include "cocomix/optimizer.hpp"
#include "cocomix/transformer.hpp"

namespace cocomix {

enum class Method {
  kNtp,
  kCocomix,
  kKd,
  kPause,
  kDirectL1,
  kDirectL2,
  kDirectCos,
  kCocomixIntervene,
  kCocomixActivationSelect,
  kCocomixPredOnly,
  kCocomixInsertOnly,
};

std::string method_name(Method m);
Method parse_method(const std::string& s);
const std::vector<Method>& all_methods();

bool uses_concepts(Method m);      // needs a mixer and concept labels
bool uses_teacher(Method m, bool pause_kd);
bool interleaves(Method m);        // suffix sees 2T rows
SelectMode label_mode(Method m);   // which labels the method trains on

struct TrainConfig {
  Method method = Method::kNtp;
  double lambda = 0.1;
  double lambda_kd = 0.1;
  double lr_max = 2e-3;
  double warmup_frac = 1.0 / 300.0;
  double final_lr_frac = 0.1;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double clip_norm = 1.0;
  std::uint64_t steps = 5000;
  std::uint64_t batch_tokens = 64;
  std::uint64_t seed = 0;
  int k_mix = 0;  // 0: use the SAE's K
  bool pause_kd = false;
  bool shared_positions = false;
  bool supervise_token_slots = false;
  std::uint64_t log_every = 10;
  std::uint64_t eval_every = 500;
  std::size_t eval_windows = 128;  // 0: every held-out window

  void validate() const;
  // Lambda actually applied to the auxiliary term (0 for insert-only).
  double effective_lambda() const;
};

// Student transformer plus whatever extra modules its method trains.
struct Student {
  Method method = Method::kNtp;
  TransformerModel model;
  std::optional<ConceptMixer> mixer;
  std::optional<DirectHead> direct;
  GraphTensor pause;  // 1 x d, pause arm only
  bool shared_positions = false;

  Student(Method m, const ModelConfig& model_config, int n_concepts, int k_mix,
          int d_teacher, bool shared_positions = false);

  ParameterList parameters() const;
  Digest content_hash() const;
};

// Optional rewrite of the concept logits z before TopK/compression.
using ConceptTransform = std::function<GraphTensor(const GraphTensor&)>;

struct ForwardOut {
  GraphTensor logits;       // one row per target position, (B*T) x |V|
  GraphTensor token_logits; // logits at h slots (interleaving arms only)
  GraphTensor z;            // concept logits (concept arms)
  GraphTensor direct_pred;  // g(h) (direct arms)
};

ForwardOut student_forward(const Student& s, const std::vector<std::vector<int>>& inputs,
                           const ConceptTransform* transform = nullptr,
                           bool want_token_logits = false);

struct StepLosses {
  GraphTensor total, ntp, aux;
};

struct LossInputs {
  const std::vector<std::vector<int>>* inputs = nullptr;
  const std::vector<int>* targets = nullptr;
  const std::vector<int>* labels = nullptr;  // k_attr per target position
  std::size_t k_attr = 0;
  const TransformerModel* teacher = nullptr;
};

StepLosses compute_losses(const Student& s, const TrainConfig& cfg, const LossInputs& in);

struct TrainData {
  const std::vector<Window>* train = nullptr;
  const std::vector<Window>* heldout = nullptr;
  const LabelSet* labels = nullptr;        // positions aligned with `train`
  const TransformerModel* teacher = nullptr;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  double final_val_ppl = 0.0;
};

// Runs steps [start, cfg.steps) on `student`. When `checkpoint_prefix` is
// set, a resumable checkpoint is written every `checkpoint_every` steps and
// at the end. `resume` restores parameters, optimizer moments and earlier
// metrics rows from such a checkpoint.
class Trainer {
 public:
  Trainer(Student& student, TrainConfig cfg, TrainData data);

  void resume(const Checkpoint& ckpt);
  TrainResult run(std::uint64_t stop_step = ~std::uint64_t{0});
  Checkpoint checkpoint() const;

  std::uint64_t step() const { return step_; }
  void set_checkpointing(std::string prefix, std::uint64_t every) {
    ckpt_prefix_ = std::move(prefix);
    ckpt_every_ = every;
  }

 private:
  double evaluate() const;

  Student& student_;
  TrainConfig cfg_;
  TrainData data_;
  std::size_t seq_per_batch_;
  std::size_t context_;
  BatchIter batches_;
  LrSchedule schedule_;
  AdamW opt_;
  std::uint64_t step_ = 0;
  std::vector<MetricsRow> rows_;
  std::string ckpt_prefix_;
  std::uint64_t ckpt_every_ = 0;
};

std::string train_config_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
std::string model_config_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace cocomix
