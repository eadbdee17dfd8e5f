#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "cocomix/error.hpp"
#include "cocomix/pipeline.hpp"

extern char** environ;

namespace {

using nlohmann::json;
using namespace cocomix;

struct Globals {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  bool force = false;
};

void report_error(std::string_view cls, const std::string& message) {
  std::string m = message;
  for (char& ch : m) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  std::fprintf(stderr, "cocomix: error[%.*s] %s\n", static_cast<int>(cls.size()), cls.data(), m.c_str());
}

ExperimentConfig resolve_config(const Globals& g, std::vector<std::string> extra_sets) {
  std::string text = "{}";
  if (!g.config_path.empty()) {
    text = experiment_config_json(load_experiment_config(g.config_path));
  }
  std::vector<std::string> sets = g.sets;
  sets.insert(sets.end(), extra_sets.begin(), extra_sets.end());
  if (!g.out_dir.empty()) sets.push_back("out_dir=\"" + g.out_dir + "\"");
  return experiment_config_from_json(apply_overrides(text, sets));
}

void print_outcome(const StageOutcome& o) {
  std::printf("%s: %s%s\n", o.stage.c_str(), o.summary.c_str(), o.cached ? " (cached)" : "");
  std::printf("manifest: %s\n", o.manifest_path.c_str());
  for (const auto& [path, digest] : o.outputs) {
    std::printf("  %s %s\n", to_hex(digest).substr(0, 16).c_str(), path.c_str());
  }
}

int spawn_children(const std::vector<std::vector<std::string>>& jobs, std::size_t parallel) {
  std::vector<pid_t> running;
  int worst = 0;
  auto reap_one = [&] {
    int status = 0;
    const pid_t pid = waitpid(-1, &status, 0);
    if (pid < 0) return;
    std::erase(running, pid);
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 1;
    worst = std::max(worst, code);
  };
  for (const auto& args : jobs) {
    while (running.size() >= std::max<std::size_t>(1, parallel)) reap_one();
    std::vector<char*> argv;
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, argv.data(), environ) != 0) {
      throw Error(ErrorClass::kRange, "could not spawn child run");
    }
    running.push_back(pid);
  }
  while (!running.empty()) reap_one();
  return worst;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cocomix: continuous concept mixing experiments at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("-c,--config", g.config_path, "Experiment config (JSON); defaults apply when omitted");
  app.add_option("--set", g.sets, "Override a config value: dotted.key=value (repeatable)");
  app.add_option("-o,--out-dir", g.out_dir, "Output directory (overrides out_dir)");
  app.add_flag("-f,--force", g.force, "Recompute even when cached artifacts are valid");

  std::string stage;
  json args = json::object();
  std::vector<std::string> stage_sets;

  for (const char* name : {"gen-corpus", "train-teacher", "dump-acts", "train-sae"}) {
    app.add_subcommand(name, std::string("Run the ") + name + " stage");
  }
  auto* labels = app.add_subcommand("make-labels", "Select concept labels for every training position");
  std::string mode = "attribution";
  labels->add_option("--mode", mode, "attribution or activation")->check(CLI::IsMember({"attribution", "activation"}));

  auto* pretrain = app.add_subcommand("pretrain", "Train one student arm");
  std::string method;
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;
  double lambda = -1.0;
  int k_mix = -1;
  std::vector<std::string> method_names;
  for (Method m : all_methods()) method_names.push_back(method_name(m));
  pretrain->add_option("--method", method, "Training method")->required()->check(CLI::IsMember(method_names));
  auto* seed_opt = pretrain->add_option("--seed", seed, "Run seed (defaults to train.seed)");
  pretrain->add_option("--steps", steps, "Override train.steps");
  pretrain->add_option("--lambda", lambda, "Override train.lambda");
  pretrain->add_option("--k-mix", k_mix, "Override train.k_mix (0: the SAE's K)");

  std::string run;
  auto* eval = app.add_subcommand("eval", "Held-out perplexity of a run (or 'teacher')");
  eval->add_option("--run", run, "Run name, e.g. cocomix_s0")->required();

  auto* steer = app.add_subcommand("steer", "Concept steering sweep for a run");
  int concept_index = -1, topic = 0;
  std::vector<double> multipliers;
  bool no_teacher = false, after_topk = false;
  steer->add_option("--run", run, "Run name (default cocomix_s<train.seed>)");
  steer->add_option("--concept-index", concept_index, "Concept to steer (default: top concept for --topic)");
  steer->add_option("--multiplier", multipliers, "Multiplier(s) to sweep (repeatable)");
  steer->add_option("--topic", topic, "Planted topic whose token frequency is measured");
  steer->add_flag("--no-teacher", no_teacher, "Skip the teacher-side sweep");
  steer->add_flag("--after-topk", after_topk, "Scale the concept after TopK instead of before");

  auto* comp = app.add_subcommand("analyze-compression", "Column norms of the concept compression weight");
  comp->add_option("--run", run, "Run name (default cocomix_s<train.seed>)");

  auto* compare = app.add_subcommand("compare", "Tokens needed to reach a target perplexity");
  std::string baseline, candidate;
  double target_ppl = 0.0;
  compare->add_option("--baseline", baseline, "Baseline run, e.g. ntp_s0")->required();
  compare->add_option("--candidate", candidate, "Candidate run, e.g. cocomix_s0")->required();
  auto* target_opt = compare->add_option("--target-ppl", target_ppl, "Target perplexity (default: worse final ppl)");

  auto* sweep = app.add_subcommand("sweep", "Spawn pretrain child runs for methods x seeds");
  std::string methods_csv, seeds_csv;
  std::size_t jobs = 1;
  sweep->add_option("--methods", methods_csv, "Comma-separated methods")->required();
  sweep->add_option("--seeds", seeds_csv, "Comma-separated seeds")->required();
  sweep->add_option("-j,--jobs", jobs, "Parallel child processes");

  auto* repro = app.add_subcommand("reproduce", "Re-run a stage from its manifest and verify byte identity");
  std::string manifest;
  repro->add_option("--manifest", manifest, "Path to a *.manifest.json")->required();

  auto* show = app.add_subcommand("show-config", "Print the resolved config");
  auto* params = app.add_subcommand("params", "Parameter counts per student method");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    if (app.get_subcommands().empty()) {
      std::cout << app.help("", CLI::AppFormatMode::All);
      return 0;
    }
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("config_error", e.what());
    return 2;
  }

  try {
    auto* sub = app.get_subcommands().front();
    stage = sub->get_name();
    if (sub == repro) {
      const StageOutcome o = reproduce_stage(manifest);
      print_outcome(o);
      return 0;
    }
    if (sub == pretrain) {
      if (steps) stage_sets.push_back("train.steps=" + std::to_string(steps));
      if (lambda >= 0.0) {
        char buf[48];
        std::snprintf(buf, sizeof buf, "train.lambda=%.17g", lambda);
        stage_sets.push_back(buf);
      }
      if (k_mix >= 0) stage_sets.push_back("train.k_mix=" + std::to_string(k_mix));
    }
    const ExperimentConfig cfg = resolve_config(g, stage_sets);
    const std::string default_run = "cocomix_s" + std::to_string(cfg.train.seed);
    if (sub == show) {
      std::fputs(experiment_config_json(cfg).c_str(), stdout);
      return 0;
    }
    if (sub == params) {
      for (Method m : all_methods()) {
        const TrainConfig tc = cfg.arm_config(m, cfg.train.seed);
        const int k = uses_concepts(m) ? (tc.k_mix ? tc.k_mix : cfg.sae.k) : 0;
        const Student s(m, cfg.student, uses_concepts(m) ? cfg.sae.n_concepts : 0, k,
                        cfg.teacher.d_model, tc.shared_positions);
        std::printf("%-28s %zu\n", method_name(m).c_str(), count_parameters(s.parameters()));
      }
      return 0;
    }
    if (sub == sweep) {
      std::vector<std::vector<std::string>> children;
      for (const auto& m : split_list(methods_csv)) {
        parse_method(m);
        for (const auto& s : split_list(seeds_csv)) {
          std::vector<std::string> a = {"cocomix"};
          if (!g.config_path.empty()) a.insert(a.end(), {"--config", g.config_path});
          for (const auto& set : g.sets) a.insert(a.end(), {"--set", set});
          if (!g.out_dir.empty()) a.insert(a.end(), {"--out-dir", g.out_dir});
          if (g.force) a.push_back("--force");
          a.insert(a.end(), {"pretrain", "--method", m, "--seed", s});
          children.push_back(std::move(a));
        }
      }
      const int code = spawn_children(children, jobs);
      std::printf("sweep: %zu child runs, worst exit code %d\n", children.size(), code);
      return code;
    }
    if (sub == labels) args["mode"] = mode;
    if (sub == pretrain) {
      args["method"] = method;
      if (*seed_opt) args["seed"] = seed;
    }
    if (sub == eval) args["run"] = run;
    if (sub == steer) {
      args["run"] = run.empty() ? default_run : run;
      args["topic"] = topic;
      args["concept_index"] = concept_index;
      if (!multipliers.empty()) args["multipliers"] = multipliers;
      args["teacher"] = !no_teacher;
      args["after_topk"] = after_topk;
    }
    if (sub == comp) args["run"] = run.empty() ? default_run : run;
    if (sub == compare) {
      args["runs"] = {baseline, candidate};
      if (*target_opt) args["target_ppl"] = target_ppl;
    }
    print_outcome(run_stage(cfg, stage, args.dump(), g.force));
    return 0;
  } catch (const Error& e) {
    report_error(error_class_name(e.error_class()), e.what());
    return exit_code_for(e.error_class());
  } catch (const std::exception& e) {
    report_error("internal_error", e.what());
    return 1;
  }
}
