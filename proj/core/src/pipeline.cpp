#include "cocomix/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <json.hpp>

#include "binary_io.hpp"
#include "cocomix/activation_dump.hpp"
#include "cocomix/checkpoint.hpp"
#include "cocomix/error.hpp"
#include "cocomix/eval.hpp"
#include "cocomix/label_cache.hpp"
#include "cocomix/steer.hpp"

namespace cocomix {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint32_t kCorpusVersion = 1;

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; })) {
      throw ConfigError(what + ": unknown key '" + it.key() + "'");
    }
  }
}

json corpus_json(const CorpusSpec& s) {
  return {{"vocab_size", s.vocab_size},       {"n_topics", s.n_topics},
          {"topic_token_bias", s.topic_token_bias}, {"doc_len", s.doc_len},
          {"n_docs", s.n_docs},               {"markov_order", s.markov_order},
          {"seed", s.seed},                   {"shift_profile", s.shift_profile}};
}

CorpusSpec corpus_from_json(const json& j) {
  reject_unknown(j, {"vocab_size", "n_topics", "topic_token_bias", "doc_len", "n_docs",
                     "markov_order", "seed", "shift_profile"},
                 "corpus");
  CorpusSpec s;
  read_opt(j, "vocab_size", s.vocab_size);
  read_opt(j, "n_topics", s.n_topics);
  read_opt(j, "topic_token_bias", s.topic_token_bias);
  read_opt(j, "doc_len", s.doc_len);
  read_opt(j, "n_docs", s.n_docs);
  read_opt(j, "markov_order", s.markov_order);
  read_opt(j, "seed", s.seed);
  read_opt(j, "shift_profile", s.shift_profile);
  return s;
}

json sae_json(const SaeConfig& s) {
  return {{"n_concepts", s.n_concepts}, {"k", s.k},         {"lr", s.lr},
          {"steps", s.steps},           {"batch", s.batch}, {"seed", s.seed},
          {"center_inputs", s.center_inputs}};
}

SaeConfig sae_from_json(const json& j) {
  reject_unknown(j, {"n_concepts", "k", "lr", "steps", "batch", "seed", "center_inputs"}, "sae");
  SaeConfig s;
  read_opt(j, "n_concepts", s.n_concepts);
  read_opt(j, "k", s.k);
  read_opt(j, "lr", s.lr);
  read_opt(j, "steps", s.steps);
  read_opt(j, "batch", s.batch);
  read_opt(j, "seed", s.seed);
  read_opt(j, "center_inputs", s.center_inputs);
  return s;
}

std::string rank_name(RankBy r) { return r == RankBy::kSigned ? "signed" : "absolute"; }

RankBy parse_rank(const std::string& s) {
  if (s == "signed") return RankBy::kSigned;
  if (s == "absolute") return RankBy::kAbsolute;
  throw ConfigError("labels: rank must be 'signed' or 'absolute', got '" + s + "'");
}

json eval_json(const EvalSettings& e) {
  return {{"eval_windows", e.eval_windows},
          {"steer_multipliers", e.steer_multipliers},
          {"steer_seeds", e.steer_seeds},
          {"tokens_per_seed", e.tokens_per_seed},
          {"prompt_len", e.prompt_len},
          {"n_prompts", e.n_prompts},
          {"norm_threshold", e.norm_threshold}};
}

EvalSettings eval_from_json(const json& j) {
  reject_unknown(j, {"eval_windows", "steer_multipliers", "steer_seeds", "tokens_per_seed",
                     "prompt_len", "n_prompts", "norm_threshold"},
                 "eval");
  EvalSettings e;
  read_opt(j, "eval_windows", e.eval_windows);
  read_opt(j, "steer_multipliers", e.steer_multipliers);
  read_opt(j, "steer_seeds", e.steer_seeds);
  read_opt(j, "tokens_per_seed", e.tokens_per_seed);
  read_opt(j, "prompt_len", e.prompt_len);
  read_opt(j, "n_prompts", e.n_prompts);
  read_opt(j, "norm_threshold", e.norm_threshold);
  return e;
}

json config_to_json(const ExperimentConfig& c) {
  json arms = json::object();
  for (const auto& [k, v] : c.arms) arms[k] = json::parse(v);
  return {{"out_dir", c.out_dir},
          {"seed", c.seed},
          {"corpus", corpus_json(c.corpus)},
          {"heldout_docs", c.heldout_docs},
          {"teacher", json::parse(model_config_json(c.teacher))},
          {"teacher_train", json::parse(train_config_json(c.teacher_train))},
          {"dump_windows", c.dump_windows},
          {"sae", sae_json(c.sae)},
          {"labels", {{"k_attr", c.labels.k_attr}, {"rank", rank_name(c.labels.rank)}}},
          {"student", json::parse(model_config_json(c.student))},
          {"train", json::parse(train_config_json(c.train))},
          {"arms", arms},
          {"eval", eval_json(c.eval)},
          {"checkpoint_every", c.checkpoint_every}};
}

Digest file_digest(const fs::path& p) { return sha256(io::read_file(p.string())); }

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
  corpus.validate();
  teacher.validate();
  student.validate();
  auto fail = [](const std::string& m) { throw ConfigError("experiment config: " + m); };
  if (teacher.vocab_size != corpus.vocab_size || student.vocab_size != corpus.vocab_size) {
    fail("teacher and student vocab_size must equal corpus.vocab_size");
  }
  if (teacher.context_len != student.context_len) {
    fail("teacher and student context_len must match (labels are per position)");
  }
  if (heldout_docs < 1 || heldout_docs >= static_cast<std::size_t>(corpus.n_docs)) {
    fail("heldout_docs must lie in [1, corpus.n_docs)");
  }
  if (dump_windows < 1) fail("dump_windows must be positive");
  sae.validate(teacher.d_model);
  if (labels.k_attr < 1 || labels.k_attr > sae.n_concepts) {
    fail("labels.k_attr must lie in [1, sae.n_concepts]");
  }
  if (teacher_train.method != Method::kNtp) fail("teacher_train.method must be ntp");
  teacher_train.validate();
  train.validate();
  for (const auto& [name, _] : arms) arm_config(parse_method(name), train.seed);
  if (eval.prompt_len < 1 || eval.prompt_len > static_cast<std::size_t>(student.context_len)) {
    fail("eval.prompt_len must lie in [1, context_len]");
  }
  if (eval.n_prompts < 1 || eval.tokens_per_seed < 1) fail("eval.n_prompts and eval.tokens_per_seed must be positive");
  if (eval.steer_seeds.empty()) fail("eval.steer_seeds must be nonempty");
}

TrainConfig ExperimentConfig::arm_config(Method m, std::uint64_t run_seed) const {
  json j = json::parse(train_config_json(train));
  const auto it = arms.find(method_name(m));
  if (it != arms.end()) {
    const json patch = json::parse(it->second);
    if (!patch.is_object()) throw ConfigError("arms." + it->first + ": expected an object");
    for (auto p = patch.begin(); p != patch.end(); ++p) j[p.key()] = p.value();
  }
  j["method"] = method_name(m);
  j["seed"] = run_seed;
  TrainConfig tc = train_config_from_json(j.dump());
  tc.validate();
  return tc;
}

ExperimentConfig default_experiment_config() {
  return experiment_config_from_json("{}");
}

std::string experiment_config_json(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
  ExperimentConfig c;
  try {
    const json j = json::parse(text);
    reject_unknown(j, {"out_dir", "seed", "corpus", "heldout_docs", "teacher", "teacher_train",
                       "dump_windows", "sae", "labels", "student", "train", "arms", "eval",
                       "checkpoint_every"},
                   "experiment config");
    read_opt(j, "out_dir", c.out_dir);
    read_opt(j, "seed", c.seed);
    read_opt(j, "heldout_docs", c.heldout_docs);
    read_opt(j, "dump_windows", c.dump_windows);
    read_opt(j, "checkpoint_every", c.checkpoint_every);
    const json empty = json::object();
    auto section = [&](const char* key) -> const json& { return j.contains(key) ? j.at(key) : empty; };

    c.corpus = corpus_from_json(section("corpus"));
    if (!section("corpus").contains("seed")) c.corpus.seed = c.seed;

    c.teacher = model_config_from_json(section("teacher").dump());
    if (!section("teacher").contains("seed")) c.teacher.seed = c.seed + 1;

    json tt = section("teacher_train");
    if (!tt.contains("method")) tt["method"] = "ntp";
    c.teacher_train = train_config_from_json(tt.dump());
    if (!tt.contains("seed")) c.teacher_train.seed = c.seed + 2;

    c.sae = sae_from_json(section("sae"));
    if (!section("sae").contains("n_concepts")) c.sae.n_concepts = 128;
    if (!section("sae").contains("k")) c.sae.k = 8;
    if (!section("sae").contains("steps")) c.sae.steps = 3000;
    if (!section("sae").contains("seed")) c.sae.seed = c.seed + 3;

    const json& lab = section("labels");
    reject_unknown(lab, {"k_attr", "rank"}, "labels");
    read_opt(lab, "k_attr", c.labels.k_attr);
    if (lab.contains("rank")) c.labels.rank = parse_rank(lab.at("rank").get<std::string>());

    c.student = model_config_from_json(section("student").dump());
    c.train = train_config_from_json(section("train").dump());
    if (!section("train").contains("seed")) c.train.seed = c.seed;
    c.student.seed = c.train.seed;

    const json& arms = section("arms");
    if (!arms.is_object()) throw ConfigError("arms: expected an object");
    for (auto it = arms.begin(); it != arms.end(); ++it) {
      parse_method(it.key());
      c.arms[it.key()] = it.value().dump();
    }
    c.eval = eval_from_json(section("eval"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  if (!fs::exists(path)) throw MissingPrerequisiteError("config file not found: " + path);
  return experiment_config_from_json(io::read_text(path));
}

std::string apply_overrides(const std::string& config_json,
                            const std::vector<std::string>& assignments) {
  json j;
  try {
    j = json::parse(config_json);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + a + "' is not of the form key.path=value");
    }
    const std::string path = a.substr(0, eq), raw = a.substr(eq + 1);
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (key.empty()) throw ConfigError("override '" + a + "' has an empty key");
      if (!node->is_object()) throw ConfigError("override '" + a + "': '" + key + "' is not inside an object");
      if (dot == std::string::npos) {
        json value;
        try {
          value = json::parse(raw);
        } catch (const json::exception&) {
          value = raw;
        }
        (*node)[key] = value;
        break;
      }
      node = &(*node)[key];
      if (node->is_null()) *node = json::object();
      start = dot + 1;
    }
  }
  return j.dump();
}

std::string run_name(Method m, std::uint64_t seed) {
  return method_name(m) + "_s" + std::to_string(seed);
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

fs::path root_of(const ExperimentConfig& cfg) { return fs::path(cfg.out_dir); }

Digest corpus_spec_hash(const ExperimentConfig& cfg) {
  return sha256(json{{"corpus", corpus_json(cfg.corpus)}}.dump());
}

void write_corpus(const fs::path& path, const Corpus& c, const Digest& spec_hash) {
  io::Writer w;
  w.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("CRPS"), 4));
  w.put<std::uint32_t>(kCorpusVersion);
  w.put_digest(spec_hash);
  w.put_digest(c.content_hash());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.docs.size()));
  for (std::size_t i = 0; i < c.docs.size(); ++i) {
    w.put<std::int32_t>(c.topics[i]);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.docs[i].size()));
    for (int t : c.docs[i]) w.put<std::uint32_t>(static_cast<std::uint32_t>(t));
  }
  io::write_file(path.string(), w.bytes());
}

fs::path corpus_path(const ExperimentConfig& cfg) { return root_of(cfg) / "corpus" / "corpus.crps"; }
fs::path teacher_prefix(const ExperimentConfig& cfg) { return root_of(cfg) / "teacher" / "model"; }
fs::path sae_prefix(const ExperimentConfig& cfg) { return root_of(cfg) / "sae" / "model"; }
fs::path acts_path(const ExperimentConfig& cfg) { return root_of(cfg) / "acts" / "acts.actd"; }
fs::path labels_path(const ExperimentConfig& cfg, SelectMode m) {
  return root_of(cfg) / "labels" / (select_mode_name(m) + ".clbl");
}
fs::path run_dir(const ExperimentConfig& cfg, const std::string& run) {
  return run == "teacher" ? root_of(cfg) / "teacher" : root_of(cfg) / "runs" / run;
}

void require(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p)) {
    throw MissingPrerequisiteError("missing prerequisite " + p.string() + " (run " + stage + " first)");
  }
}

Checkpoint load_checkpoint_for(const fs::path& prefix, const std::string& stage) {
  require(fs::path(prefix.string() + ".json"), stage);
  require(fs::path(prefix.string() + ".bin"), stage);
  return load_checkpoint(prefix.string());
}

}  // namespace

Corpus load_corpus_artifact(const ExperimentConfig& cfg) {
  const fs::path path = corpus_path(cfg);
  require(path, "gen-corpus");
  const auto bytes = io::read_file(path.string());
  io::Reader r(bytes, path.string());
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.get<std::uint8_t>());
  if (std::string(magic, 4) != "CRPS") throw FormatError(path.string() + ": bad magic");
  if (r.get<std::uint32_t>() != kCorpusVersion) throw FormatError(path.string() + ": unsupported version");
  if (r.get_digest() != corpus_spec_hash(cfg)) {
    throw ConfigError(path.string() + " was generated from a different corpus spec; rerun gen-corpus");
  }
  const Digest content = r.get_digest();
  Corpus c;
  c.spec = cfg.corpus;
  const std::uint32_t n = r.get<std::uint32_t>();
  c.docs.resize(n);
  c.topics.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    c.topics[i] = r.get<std::int32_t>();
    const std::uint32_t len = r.get<std::uint32_t>();
    c.docs[i].resize(len);
    for (auto& t : c.docs[i]) t = static_cast<int>(r.get<std::uint32_t>());
  }
  if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes");
  if (c.content_hash() != content) throw FormatError(path.string() + ": content hash mismatch");
  return c;
}

Splits corpus_windows(const ExperimentConfig& cfg, const Corpus& corpus) {
  const CorpusSplit s = split_corpus(corpus, cfg.heldout_docs);
  return {make_windows(corpus, cfg.student.context_len, s.train_begin, s.train_end),
          make_windows(corpus, cfg.student.context_len, s.heldout_begin, s.heldout_end)};
}

TransformerModel load_teacher(const ExperimentConfig& cfg) {
  const Checkpoint ck = load_checkpoint_for(teacher_prefix(cfg), "train-teacher");
  TransformerModel m(model_config_from_json(json::parse(ck.config_json).at("model").dump()));
  restore_parameters(ck, m.parameters());
  return m;
}

SaeModel load_sae(const ExperimentConfig& cfg) {
  const Checkpoint ck = load_checkpoint_for(sae_prefix(cfg), "train-sae");
  if (ck.kind != "sae") throw FormatError(sae_prefix(cfg).string() + ": not an SAE checkpoint");
  const json j = json::parse(ck.config_json);
  SaeModel sae(j.at("d_in").get<int>(), j.at("n_concepts").get<int>(), j.at("k").get<int>(), 0);
  restore_parameters(ck, sae.state());
  return sae;
}

Student load_student(const ExperimentConfig& cfg, const std::string& run) {
  const Checkpoint ck = load_checkpoint_for(run_dir(cfg, run) / "model", "pretrain");
  if (ck.kind != "student") throw FormatError(run + ": not a student checkpoint");
  const json j = json::parse(ck.config_json);
  const TrainConfig tc = train_config_from_json(j.at("train").dump());
  Student s(parse_method(j.at("method").get<std::string>()),
            model_config_from_json(j.at("model").dump()), j.at("n_concepts").get<int>(),
            j.at("k_mix").get<int>(), j.at("d_teacher").get<int>(), tc.shared_positions);
  restore_parameters(ck, s.parameters());
  return s;
}

std::vector<MetricsRow> load_run_metrics(const ExperimentConfig& cfg, const std::string& run) {
  const fs::path p = run_dir(cfg, run) / "metrics.csv";
  require(p, "pretrain");
  return read_metrics_csv(p.string());
}

// ---------------------------------------------------------------------------
// Stages

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {
      "gen-corpus", "train-teacher", "dump-acts", "train-sae", "make-labels",
      "pretrain",   "eval",          "steer",     "analyze-compression", "compare"};
  return names;
}

namespace {

struct Plan {
  fs::path manifest;                 // relative to root
  std::vector<std::string> sections; // config sections the stage reads
  std::vector<fs::path> inputs;      // relative
  std::vector<std::string> input_stage;
  std::vector<fs::path> outputs;     // relative
};

std::uint64_t arg_u64(const json& a, const char* key, std::uint64_t fallback) {
  return a.contains(key) ? a.at(key).get<std::uint64_t>() : fallback;
}

std::string arg_str(const json& a, const char* key) {
  if (!a.contains(key)) throw ConfigError(std::string("missing stage argument '") + key + "'");
  return a.at(key).get<std::string>();
}

// Fills defaulted arguments so the manifest records every value used.
json normalize_args(const ExperimentConfig& cfg, const std::string& stage, json a) {
  if (!a.is_object()) throw ConfigError(stage + ": arguments must be an object");
  auto only = [&](std::initializer_list<const char*> keys) { reject_unknown(a, keys, stage + " arguments"); };
  if (stage == "gen-corpus" || stage == "train-teacher" || stage == "dump-acts" || stage == "train-sae") {
    only({});
  } else if (stage == "make-labels") {
    only({"mode"});
    a["mode"] = select_mode_name(parse_select_mode(a.value("mode", std::string("attribution"))));
  } else if (stage == "pretrain") {
    only({"method", "seed"});
    a["method"] = method_name(parse_method(arg_str(a, "method")));
    a["seed"] = arg_u64(a, "seed", cfg.train.seed);
  } else if (stage == "eval" || stage == "analyze-compression") {
    only({"run"});
    arg_str(a, "run");
  } else if (stage == "steer") {
    only({"run", "topic", "concept_index", "multipliers", "teacher", "after_topk"});
    arg_str(a, "run");
    if (!a.contains("topic")) a["topic"] = 0;
    if (!a.contains("concept_index")) a["concept_index"] = -1;
    if (!a.contains("multipliers")) a["multipliers"] = cfg.eval.steer_multipliers;
    if (!a.contains("teacher")) a["teacher"] = true;
    if (!a.contains("after_topk")) a["after_topk"] = false;
    const int topic = a.at("topic").get<int>();
    if (topic < 0 || topic >= cfg.corpus.n_topics) {
      throw RangeError("steer: topic " + std::to_string(topic) + " outside [0, " +
                       std::to_string(cfg.corpus.n_topics) + ")");
    }
    for (double m : a.at("multipliers").get<std::vector<double>>()) {
      if (!std::isfinite(m)) throw ConfigError("steer: multipliers must be finite");
    }
  } else if (stage == "compare") {
    only({"runs", "target_ppl"});
    if (!a.contains("runs") || a.at("runs").size() != 2) {
      throw ConfigError("compare: needs exactly two runs (baseline, candidate)");
    }
  } else {
    throw ConfigError("unknown stage '" + stage + "'");
  }
  return a;
}

std::string steer_stem(const json& a) {
  const int c = a.at("concept_index").get<int>();
  return "steer-t" + std::to_string(a.at("topic").get<int>()) + "-c" +
         (c < 0 ? std::string("auto") : std::to_string(c)) +
         (a.at("after_topk").get<bool>() ? "-post" : "");
}

void add_checkpoint(std::vector<fs::path>& v, const fs::path& prefix) {
  v.push_back(prefix.string() + ".json");
  v.push_back(prefix.string() + ".bin");
}

Plan plan_stage(const ExperimentConfig& cfg, const std::string& stage, const json& a) {
  Plan p;
  auto in = [&](const fs::path& path, const char* producer) {
    p.inputs.push_back(path);
    p.input_stage.push_back(producer);
  };
  auto in_ckpt = [&](const fs::path& prefix, const char* producer) {
    in(prefix.string() + ".json", producer);
    in(prefix.string() + ".bin", producer);
  };
  const fs::path corpus = "corpus/corpus.crps", teacher = "teacher/model", sae = "sae/model";
  if (stage == "gen-corpus") {
    p.manifest = "corpus/gen-corpus.manifest.json";
    p.sections = {"corpus"};
    p.outputs = {corpus};
  } else if (stage == "train-teacher") {
    p.manifest = "teacher/train-teacher.manifest.json";
    p.sections = {"heldout_docs", "teacher", "teacher_train"};
    in(corpus, "gen-corpus");
    add_checkpoint(p.outputs, teacher);
    p.outputs.push_back("teacher/metrics.csv");
  } else if (stage == "dump-acts") {
    p.manifest = "acts/dump-acts.manifest.json";
    p.sections = {"heldout_docs", "dump_windows"};
    in(corpus, "gen-corpus");
    in_ckpt(teacher, "train-teacher");
    p.outputs = {"acts/acts.actd"};
  } else if (stage == "train-sae") {
    p.manifest = "sae/train-sae.manifest.json";
    p.sections = {"heldout_docs", "sae"};
    in(corpus, "gen-corpus");
    in_ckpt(teacher, "train-teacher");
    in("acts/acts.actd", "dump-acts");
    add_checkpoint(p.outputs, sae);
    p.outputs.push_back("sae/log.csv");
    p.outputs.push_back("sae/eval.json");
  } else if (stage == "make-labels") {
    const std::string mode = a.at("mode").get<std::string>();
    p.manifest = "labels/make-labels-" + mode + ".manifest.json";
    p.sections = {"heldout_docs", "labels"};
    in(corpus, "gen-corpus");
    in_ckpt(teacher, "train-teacher");
    in_ckpt(sae, "train-sae");
    p.outputs = {"labels/" + mode + ".clbl"};
  } else if (stage == "pretrain") {
    const Method m = parse_method(a.at("method").get<std::string>());
    const std::string run = run_name(m, a.at("seed").get<std::uint64_t>());
    const TrainConfig tc = cfg.arm_config(m, a.at("seed").get<std::uint64_t>());
    p.manifest = "runs/" + run + "/pretrain.manifest.json";
    p.sections = {"heldout_docs", "student", "train", "arms"};
    in(corpus, "gen-corpus");
    if (uses_concepts(m) || uses_teacher(m, tc.pause_kd)) in_ckpt(teacher, "train-teacher");
    if (uses_concepts(m)) {
      p.sections.push_back("sae");
      p.sections.push_back("labels");
      in_ckpt(sae, "train-sae");
      in("labels/" + select_mode_name(label_mode(m)) + ".clbl", "make-labels");
    }
    add_checkpoint(p.outputs, "runs/" + run + "/model");
    p.outputs.push_back("runs/" + run + "/metrics.csv");
  } else if (stage == "eval" || stage == "analyze-compression" || stage == "steer") {
    const std::string run = a.at("run").get<std::string>();
    const fs::path dir = run == "teacher" ? fs::path("teacher") : fs::path("runs") / run;
    const std::string stem = stage == "steer" ? steer_stem(a) : stage;
    p.manifest = dir / (stem + ".manifest.json");
    p.sections = {"heldout_docs", "eval"};
    if (stage != "analyze-compression") in(corpus, "gen-corpus");
    if (run == "teacher") {
      if (stage != "eval") throw ConfigError(stage + ": run 'teacher' has no concept head");
      in_ckpt(teacher, "train-teacher");
    } else {
      in_ckpt(dir / "model", "pretrain");
    }
    if (stage == "eval") {
      p.outputs = {dir / "eval.json"};
    } else if (stage == "analyze-compression") {
      p.outputs = {dir / "compression.csv", dir / "compression.json"};
    } else {
      p.outputs = {dir / (stem + ".student.csv")};
      if (a.at("teacher").get<bool>()) {
        in_ckpt(teacher, "train-teacher");
        in_ckpt(sae, "train-sae");
        p.outputs.push_back(dir / (stem + ".teacher.csv"));
      }
      p.outputs.push_back(dir / (stem + ".json"));
    }
  } else if (stage == "compare") {
    const auto runs = a.at("runs").get<std::vector<std::string>>();
    p.manifest = "compare/" + runs[0] + "__" + runs[1] + ".manifest.json";
    for (const auto& r : runs) in(fs::path("runs") / r / "metrics.csv", "pretrain");
    p.outputs = {"compare/" + runs[0] + "__" + runs[1] + ".json"};
  }
  return p;
}

json seeds_json(const ExperimentConfig& cfg, const json& args) {
  json s = {{"global", cfg.seed},       {"corpus", cfg.corpus.seed},
            {"teacher_model", cfg.teacher.seed}, {"teacher_train", cfg.teacher_train.seed},
            {"sae", cfg.sae.seed},      {"train", cfg.train.seed}};
  if (args.contains("seed")) s["run"] = args.at("seed");
  if (args.contains("multipliers")) s["steer"] = cfg.eval.steer_seeds;
  return s;
}

json key_json(const std::string& stage, const json& args, const json& config, const Plan& p,
              const json& input_hashes) {
  json sections = json::object();
  for (const auto& s : p.sections) sections[s] = config.at(s);
  return {{"stage", stage}, {"args", args}, {"sections", sections}, {"inputs", input_hashes},
          {"tool_version", kToolVersion}};
}

bool cache_valid(const fs::path& root, const fs::path& manifest, const std::string& key) {
  if (!fs::exists(root / manifest)) return false;
  try {
    const json m = json::parse(io::read_text((root / manifest).string()));
    if (m.value("key", std::string()) != key) return false;
    for (auto it = m.at("outputs").begin(); it != m.at("outputs").end(); ++it) {
      const fs::path out = root / it.key();
      if (!fs::exists(out) || to_hex(file_digest(out)) != it.value().get<std::string>()) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

std::vector<Window> head(const std::vector<Window>& w, std::size_t n) {
  if (n == 0 || n >= w.size()) return w;
  return {w.begin(), w.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::string write_json(const fs::path& path, const json& j) {
  io::write_text(path.string(), j.dump(2) + "\n");
  return path.string();
}

void save_sae(const fs::path& prefix, const SaeModel& sae, const SaeConfig& cfg) {
  Checkpoint ck;
  ck.kind = "sae";
  ck.config_json = json{{"d_in", sae.d_in()}, {"n_concepts", sae.n_concepts()}, {"k", sae.k()},
                        {"sae", sae_json(cfg)}}
                       .dump();
  append_parameters(ck, sae.state());
  save_checkpoint(prefix.string(), ck);
}

LabelKey label_key(const TransformerModel& teacher, const SaeModel& sae,
                   const std::vector<Window>& windows, const ExperimentConfig& cfg, SelectMode mode) {
  LabelKey k;
  k.teacher_hash = teacher.content_hash();
  k.sae_hash = sae.content_hash();
  k.slice_hash = windows_hash(windows);
  k.mode = mode;
  k.rank = cfg.labels.rank;
  k.n_concepts = sae.n_concepts();
  k.k_attr = cfg.labels.k_attr;
  return k;
}

std::string train_student(const ExperimentConfig& cfg, Method m, std::uint64_t seed) {
  const Corpus corpus = load_corpus_artifact(cfg);
  const Splits sp = corpus_windows(cfg, corpus);
  const TrainConfig tc = cfg.arm_config(m, seed);
  std::optional<TransformerModel> teacher;
  std::optional<SaeModel> sae;
  LabelSet labels;
  if (uses_concepts(m) || uses_teacher(m, tc.pause_kd)) teacher.emplace(load_teacher(cfg));
  if (uses_concepts(m)) {
    sae.emplace(load_sae(cfg));
    const SelectMode mode = label_mode(m);
    labels = read_label_cache(labels_path(cfg, mode).string(),
                              label_key(*teacher, *sae, sp.train, cfg, mode));
  }
  ModelConfig mc = cfg.student;
  mc.seed = seed;
  const int n_concepts = sae ? sae->n_concepts() : 0;
  const int k_mix = uses_concepts(m) ? (tc.k_mix ? tc.k_mix : sae->k()) : 0;
  Student student(m, mc, n_concepts, k_mix, cfg.teacher.d_model, tc.shared_positions);
  TrainData data{&sp.train, &sp.heldout, uses_concepts(m) ? &labels : nullptr,
                 teacher ? &*teacher : nullptr};
  Trainer trainer(student, tc, data);
  const fs::path dir = run_dir(cfg, run_name(m, seed));
  const std::string prefix = (dir / "model").string();
  if (checkpoint_exists(prefix)) {
    const Checkpoint ck = load_checkpoint(prefix);
    const json j = json::parse(ck.config_json);
    if (ck.kind == "student" && ck.step < tc.steps &&
        j.at("train") == json::parse(train_config_json(tc)) &&
        j.at("model") == json::parse(model_config_json(mc))) {
      trainer.resume(ck);
    }
  }
  trainer.set_checkpointing(prefix, cfg.checkpoint_every);
  const TrainResult res = trainer.run();
  write_metrics_csv((dir / "metrics.csv").string(), res.rows);
  return run_name(m, seed) + ": final val_ppl " + fmt_g(res.final_val_ppl);
}

std::vector<std::vector<int>> steer_prompts(const ExperimentConfig& cfg,
                                            const std::vector<Window>& heldout) {
  std::vector<std::vector<int>> prompts;
  for (std::size_t i = 0; i < std::min(cfg.eval.n_prompts, heldout.size()); ++i) {
    const auto& t = heldout[i].tokens;
    prompts.emplace_back(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(cfg.eval.prompt_len));
  }
  return prompts;
}

json sweep_json(const SteeringSweep& s) {
  json rows = json::array();
  for (const auto& r : s.rows) {
    rows.push_back({{"multiplier", r.multiplier},
                    {"topic_k_frequency", r.topic_k_frequency},
                    {"ppl_of_sample", r.ppl_of_sample},
                    {"per_seed_frequency", r.per_seed_frequency}});
  }
  return rows;
}

std::string execute(const ExperimentConfig& cfg, const std::string& stage, const json& a) {
  const fs::path root = root_of(cfg);
  if (stage == "gen-corpus") {
    const Corpus c = gen_corpus(cfg.corpus);
    write_corpus(corpus_path(cfg), c, corpus_spec_hash(cfg));
    return std::to_string(c.docs.size()) + " documents";
  }
  if (stage == "train-teacher") {
    const Corpus corpus = load_corpus_artifact(cfg);
    const Splits sp = corpus_windows(cfg, corpus);
    Student s(Method::kNtp, cfg.teacher, 0, 0, 0);
    Trainer trainer(s, cfg.teacher_train, TrainData{&sp.train, &sp.heldout, nullptr, nullptr});
    const std::string prefix = teacher_prefix(cfg).string();
    if (checkpoint_exists(prefix)) {
      const Checkpoint ck = load_checkpoint(prefix);
      const json j = json::parse(ck.config_json);
      if (ck.kind == "student" && ck.step < cfg.teacher_train.steps &&
          j.at("train") == json::parse(train_config_json(cfg.teacher_train)) &&
          j.at("model") == json::parse(model_config_json(cfg.teacher))) {
        trainer.resume(ck);
      }
    }
    trainer.set_checkpointing(prefix, cfg.checkpoint_every);
    const TrainResult res = trainer.run();
    write_metrics_csv((root / "teacher" / "metrics.csv").string(), res.rows);
    return "teacher final val_ppl " + fmt_g(res.final_val_ppl);
  }
  if (stage == "dump-acts") {
    const Corpus corpus = load_corpus_artifact(cfg);
    const Splits sp = corpus_windows(cfg, corpus);
    const TransformerModel teacher = load_teacher(cfg);
    const ActivationDump d =
        dump_activations(teacher, head(sp.train, cfg.dump_windows), teacher.config().split_layer);
    write_activation_dump(acts_path(cfg).string(), d);
    return std::to_string(d.data.rows) + " rows x " + std::to_string(d.data.cols);
  }
  if (stage == "train-sae") {
    const Corpus corpus = load_corpus_artifact(cfg);
    const Splits sp = corpus_windows(cfg, corpus);
    const TransformerModel teacher = load_teacher(cfg);
    const ActivationDump d = read_activation_dump(acts_path(cfg).string(), teacher.content_hash());
    SaeTrainLog log;
    const SaeModel sae = train_sae(d.data, cfg.sae, &log);
    save_sae(sae_prefix(cfg), sae, cfg.sae);
    std::string csv = "step,mse\n";
    char buf[64];
    for (std::size_t i = 0; i < log.step.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%d,%.17g\n", log.step[i], log.mse[i]);
      csv += buf;
    }
    io::write_text((root / "sae" / "log.csv").string(), csv);
    const SaeEvaluation ev = evaluate_sae(sae, d.data);
    const auto probe = head(sp.heldout, 128);
    const double ppl = perplexity(teacher, probe);
    const double rec = reconstructed_perplexity(teacher, sae, probe);
    write_json(root / "sae" / "eval.json",
               {{"mse", ev.mse}, {"fvu", ev.fvu}, {"dead_concepts", ev.dead_concepts},
                {"teacher_ppl", ppl}, {"reconstructed_ppl", rec}, {"probe_windows", probe.size()}});
    return "fvu " + fmt_g(ev.fvu) + ", teacher ppl " + fmt_g(ppl) + " -> reconstructed " + fmt_g(rec);
  }
  if (stage == "make-labels") {
    const SelectMode mode = parse_select_mode(a.at("mode").get<std::string>());
    const Corpus corpus = load_corpus_artifact(cfg);
    const Splits sp = corpus_windows(cfg, corpus);
    const TransformerModel teacher = load_teacher(cfg);
    const SaeModel sae = load_sae(cfg);
    const LabelSet labels = label_batch(teacher, sae, sp.train, cfg.labels.k_attr, mode, cfg.labels.rank);
    write_label_cache(labels_path(cfg, mode).string(), label_key(teacher, sae, sp.train, cfg, mode), labels);
    return std::to_string(labels.positions()) + " positions labelled (" + select_mode_name(mode) + ")";
  }
  if (stage == "pretrain") {
    return train_student(cfg, parse_method(a.at("method").get<std::string>()),
                         a.at("seed").get<std::uint64_t>());
  }
  const std::string run = a.contains("run") ? a.at("run").get<std::string>() : std::string();
  const fs::path dir = run_dir(cfg, run);
  if (stage == "eval") {
    const Corpus corpus = load_corpus_artifact(cfg);
    const Splits sp = corpus_windows(cfg, corpus);
    const auto windows = head(sp.heldout, cfg.eval.eval_windows);
    json out = {{"run", run}, {"heldout_windows", windows.size()}};
    double ppl = 0.0;
    if (run == "teacher") {
      ppl = perplexity(load_teacher(cfg), windows);
    } else {
      const Student s = load_student(cfg, run);
      ppl = perplexity(s, windows, &sp.train);
      if (s.mixer) {
        const TopicAssociation assoc = concept_topic_association(s, windows, cfg.corpus.n_topics);
        out["top_concept"] = assoc.top_concept;
        out["margin"] = assoc.margin;
      }
    }
    out["val_ppl"] = ppl;
    write_json(dir / "eval.json", out);
    return run + ": held-out ppl " + fmt_g(ppl);
  }
  if (stage == "analyze-compression") {
    const Student s = load_student(cfg, run);
    if (!s.mixer) throw ConfigError(run + ": method has no compression weight");
    const ColumnNormReport rep = compression_column_norms(*s.mixer, cfg.eval.norm_threshold);
    std::string csv = "concept,norm\n";
    char buf[64];
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < rep.norms.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, rep.norms[i]);
      csv += buf;
      sum_sq += rep.norms[i] * rep.norms[i];
    }
    io::write_text((dir / "compression.csv").string(), csv);
    write_json(dir / "compression.json",
               {{"run", run}, {"n_concepts", rep.norms.size()}, {"threshold", rep.threshold},
                {"fraction_below", rep.fraction_below}, {"frobenius_sq", rep.frobenius_sq},
                {"sum_sq_norms", sum_sq}, {"reference_fraction_below_386m", 0.058}});
    return run + ": " + fmt_g(100.0 * rep.fraction_below) + "% of columns below " + fmt_g(rep.threshold);
  }
  if (stage == "steer") {
    const Corpus corpus = load_corpus_artifact(cfg);
    const Splits sp = corpus_windows(cfg, corpus);
    const Student s = load_student(cfg, run);
    if (!s.mixer) throw ConfigError(run + ": method has no concept head to steer");
    const int topic = a.at("topic").get<int>();
    int concept_idx = a.at("concept_index").get<int>();
    json summary = {{"run", run}, {"topic", topic}};
    if (concept_idx < 0) {
      const TopicAssociation assoc =
          concept_topic_association(s, head(sp.heldout, cfg.eval.eval_windows), cfg.corpus.n_topics);
      concept_idx = assoc.top_concept[static_cast<std::size_t>(topic)];
      summary["association_margin"] = assoc.margin[static_cast<std::size_t>(topic)];
    }
    summary["concept_index"] = concept_idx;
    const auto prompts = steer_prompts(cfg, sp.heldout);
    const auto mult = a.at("multipliers").get<std::vector<double>>();
    for (double m : mult) {
      if (m < -10.0 || m > 10.0) summary["warning"] = "multiplier outside the documented range [-10, 10]";
    }
    const std::string stem = steer_stem(a);
    const SteeringSweep st = steering_sweep(s, corpus, prompts, concept_idx, topic, mult,
                                            cfg.eval.steer_seeds, cfg.eval.tokens_per_seed,
                                            a.at("after_topk").get<bool>());
    write_steering_csv((dir / (stem + ".student.csv")).string(), st);
    summary["student"] = sweep_json(st);
    if (a.at("teacher").get<bool>()) {
      const TransformerModel teacher = load_teacher(cfg);
      const SaeModel sae = load_sae(cfg);
      const SteeringSweep tt = teacher_steering_sweep(teacher, sae, corpus, prompts, concept_idx, topic,
                                                      mult, cfg.eval.steer_seeds, cfg.eval.tokens_per_seed);
      write_steering_csv((dir / (stem + ".teacher.csv")).string(), tt);
      summary["teacher"] = sweep_json(tt);
    }
    write_json(dir / (stem + ".json"), summary);
    return run + ": steered concept " + std::to_string(concept_idx) + " toward topic " + std::to_string(topic);
  }
  if (stage == "compare") {
    const auto runs = a.at("runs").get<std::vector<std::string>>();
    const auto ra = load_run_metrics(cfg, runs[0]);
    const auto rb = load_run_metrics(cfg, runs[1]);
    auto final_ppl = [](const std::vector<MetricsRow>& rows) {
      for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
        if (!std::isnan(it->val_ppl)) return it->val_ppl;
      }
      return std::nan("");
    };
    const double fa = final_ppl(ra), fb = final_ppl(rb);
    const double target = a.contains("target_ppl") ? a.at("target_ppl").get<double>() : std::max(fa, fb);
    const TargetComparison c = compare_tokens_to_target(ra, rb, target);
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    write_json(root / "compare" / (runs[0] + "__" + runs[1] + ".json"),
               {{"baseline", runs[0]}, {"candidate", runs[1]}, {"target_ppl", target},
                {"final_ppl_baseline", fa}, {"final_ppl_candidate", fb},
                {"tokens_baseline", opt(c.tokens_a)}, {"tokens_candidate", opt(c.tokens_b)},
                {"reached_baseline", c.tokens_a.has_value()},
                {"reached_candidate", c.tokens_b.has_value()},
                {"ratio", opt(c.ratio)}});
    return c.ratio ? "token ratio " + fmt_g(*c.ratio) + " at ppl " + fmt_g(target)
                   : "target ppl " + fmt_g(target) + " unreached by at least one run";
  }
  throw ConfigError("unknown stage '" + stage + "'");
}

std::string relative_root(const fs::path& manifest_rel) {
  fs::path up;
  const fs::path dir = manifest_rel.parent_path();
  for (auto it = dir.begin(); it != dir.end(); ++it) up /= "..";
  return up.empty() ? "." : up.generic_string();
}

}  // namespace

StageOutcome run_stage(const ExperimentConfig& cfg, const std::string& stage,
                       const std::string& args_json, bool force) {
  cfg.validate();
  json args;
  try {
    args = json::parse(args_json);
  } catch (const json::exception& e) {
    throw ConfigError(stage + ": bad arguments: " + e.what());
  }
  args = normalize_args(cfg, stage, args);
  const Plan plan = plan_stage(cfg, stage, args);
  const fs::path root = root_of(cfg);
  json input_hashes = json::object();
  for (std::size_t i = 0; i < plan.inputs.size(); ++i) {
    require(root / plan.inputs[i], plan.input_stage[i]);
    input_hashes[plan.inputs[i].generic_string()] = to_hex(file_digest(root / plan.inputs[i]));
  }
  const json config = config_to_json(cfg);
  const json key_doc = key_json(stage, args, config, plan, input_hashes);
  const std::string key = to_hex(sha256(key_doc.dump()));

  StageOutcome out;
  out.stage = stage;
  out.manifest_path = (root / plan.manifest).string();
  if (!force && cache_valid(root, plan.manifest, key)) {
    out.cached = true;
    for (const auto& o : plan.outputs) out.outputs.emplace_back(o.generic_string(), file_digest(root / o));
    out.summary = "up to date";
    return out;
  }
  out.summary = execute(cfg, stage, args);

  json outputs = json::object();
  for (const auto& o : plan.outputs) {
    const Digest d = file_digest(root / o);
    outputs[o.generic_string()] = to_hex(d);
    out.outputs.emplace_back(o.generic_string(), d);
  }
  const std::string stem = plan.manifest.filename().string().substr(
      0, plan.manifest.filename().string().size() - std::string(".manifest.json").size());
  write_json(root / plan.manifest.parent_path() / (stem + ".config.json"), config);
  json manifest = {{"format", "cocomix-manifest"},
                   {"manifest_version", kManifestVersion},
                   {"tool_version", kToolVersion},
                   {"formats", {{"checkpoint", Checkpoint::kVersion},
                                {"activation_dump", ActivationDump::kVersion},
                                {"label_cache", kLabelCacheVersion},
                                {"corpus", kCorpusVersion}}},
                   {"stage", stage},
                   {"args", args},
                   {"root", relative_root(plan.manifest)},
                   {"config", config},
                   {"config_hash", to_hex(sha256(key_doc.at("sections").dump()))},
                   {"seeds", seeds_json(cfg, args)},
                   {"inputs", input_hashes},
                   {"outputs", outputs},
                   {"key", key}};
  write_json(root / plan.manifest, manifest);
  return out;
}

StageOutcome reproduce_stage(const std::string& manifest_path) {
  if (!fs::exists(manifest_path)) throw MissingPrerequisiteError("manifest not found: " + manifest_path);
  json m;
  try {
    m = json::parse(io::read_text(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError(manifest_path + ": " + e.what());
  }
  if (m.value("format", std::string()) != "cocomix-manifest") {
    throw FormatError(manifest_path + ": not a run manifest");
  }
  json config = m.at("config");
  config["out_dir"] = (fs::path(manifest_path).parent_path() / m.at("root").get<std::string>())
                          .lexically_normal()
                          .generic_string();
  const ExperimentConfig cfg = experiment_config_from_json(config.dump());
  const json recorded = m.at("outputs");
  StageOutcome out = run_stage(cfg, m.at("stage").get<std::string>(), m.at("args").dump(), true);
  for (const auto& [path, digest] : out.outputs) {
    if (!recorded.contains(path) || recorded.at(path).get<std::string>() != to_hex(digest)) {
      throw FormatError("reproduce: " + path + " differs from the recorded artifact");
    }
  }
  out.summary = std::to_string(out.outputs.size()) + " artifacts byte-identical";
  return out;
}

}  // namespace cocomix
