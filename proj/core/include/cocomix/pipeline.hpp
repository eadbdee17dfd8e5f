#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cocomix/corpus.hpp"
#include "cocomix/hash.hpp"
#include "cocomix/sae.hpp"
#include "cocomix/trainer.hpp"

namespace cocomix {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kManifestVersion = 1;

struct LabelSettings {
  int k_attr = 4;
  RankBy rank = RankBy::kSigned;
};

struct EvalSettings {
  std::size_t eval_windows = 0;  // 0: the whole held-out split
  std::vector<double> steer_multipliers{0.0, 2.0, 5.0, 10.0};
  std::vector<std::uint64_t> steer_seeds{0, 1, 2, 3, 4};
  std::size_t tokens_per_seed = 2000;
  std::size_t prompt_len = 4;
  std::size_t n_prompts = 16;
  double norm_threshold = 1e-2;
};

// Whole-experiment configuration. Component seeds left unset in the file are
// derived from `seed`; the resolved values are recorded in every manifest.
struct ExperimentConfig {
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  CorpusSpec corpus;
  std::size_t heldout_docs = 200;
  ModelConfig teacher;
  TrainConfig teacher_train;
  std::size_t dump_windows = 2000;  // training windows fed to the SAE
  SaeConfig sae;
  LabelSettings labels;
  ModelConfig student;
  TrainConfig train;  // shared by every arm
  std::map<std::string, std::string> arms;  // method -> JSON object of train overrides
  EvalSettings eval;
  std::uint64_t checkpoint_every = 1000;

  void validate() const;
  // Training config for one arm: `train` plus the arm's overrides.
  TrainConfig arm_config(Method m, std::uint64_t seed) const;
};

ExperimentConfig default_experiment_config();
std::string experiment_config_json(const ExperimentConfig& cfg);
// Unknown keys are ConfigErrors.
ExperimentConfig experiment_config_from_json(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);
// Applies "dotted.path=value" assignments to a config JSON document. Values
// parse as JSON when possible and as strings otherwise.
std::string apply_overrides(const std::string& config_json,
                            const std::vector<std::string>& assignments);

std::string run_name(Method m, std::uint64_t seed);

struct StageOutcome {
  std::string stage;
  bool cached = false;
  std::string manifest_path;
  std::vector<std::pair<std::string, Digest>> outputs;  // paths relative to out_dir
  std::string summary;  // one-line human summary
};

// Stages: gen-corpus, train-teacher, dump-acts, train-sae, make-labels
// {mode}, pretrain {method, seed}, eval {run}, steer {run, topic,
// concept_index, multipliers, teacher}, analyze-compression {run}, compare
// {runs, target_ppl}. Arguments are a JSON object. A stage whose manifest
// matches the current inputs and whose outputs are intact is skipped unless
// `force` is set.
StageOutcome run_stage(const ExperimentConfig& cfg, const std::string& stage,
                       const std::string& args_json = "{}", bool force = false);
const std::vector<std::string>& stage_names();

// Re-runs the stage recorded in a manifest from the manifest alone and
// throws FormatError unless every output is byte-identical to the record.
StageOutcome reproduce_stage(const std::string& manifest_path);

// Artifact loaders; a missing file is a MissingPrerequisiteError naming it.
Corpus load_corpus_artifact(const ExperimentConfig& cfg);
TransformerModel load_teacher(const ExperimentConfig& cfg);
SaeModel load_sae(const ExperimentConfig& cfg);
Student load_student(const ExperimentConfig& cfg, const std::string& run);
std::vector<MetricsRow> load_run_metrics(const ExperimentConfig& cfg, const std::string& run);

struct Splits {
  std::vector<Window> train, heldout;
};
Splits corpus_windows(const ExperimentConfig& cfg, const Corpus& corpus);

}  // namespace cocomix
