#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "cocomix/corpus.hpp"
#include "cocomix/transformer.hpp"

namespace cocomix::testing {

inline CorpusSpec tiny_corpus_spec(std::uint64_t seed = 1) {
  CorpusSpec s;
  s.n_docs = 40;
  s.doc_len = 33;
  s.seed = seed;
  return s;
}

inline ModelConfig tiny_model(std::uint64_t seed = 1, int context = 8) {
  ModelConfig m;
  m.d_model = 16;
  m.n_layers = 2;
  m.n_heads = 2;
  m.context_len = context;
  m.split_layer = 1;
  m.seed = seed;
  return m;
}

struct TinyData {
  Corpus corpus;
  std::vector<Window> train, heldout;
};

inline TinyData tiny_data(int context = 8, std::uint64_t seed = 1) {
  TinyData d;
  d.corpus = gen_corpus(tiny_corpus_spec(seed));
  const CorpusSplit sp = split_corpus(d.corpus, 8);
  d.train = make_windows(d.corpus, context, sp.train_begin, sp.train_end);
  d.heldout = make_windows(d.corpus, context, sp.heldout_begin, sp.heldout_end);
  return d;
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Empty per-process scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() /
                 ("cocomix_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Whole pipeline in a few seconds: 80 short documents, two-layer width-16
// models, a 16-concept SAE and 20 training steps per arm.
inline constexpr const char* kTinyExperimentJson = R"({
  "seed": 7,
  "corpus": {"n_docs": 80, "doc_len": 33},
  "heldout_docs": 10,
  "teacher": {"d_model": 16, "n_layers": 2, "n_heads": 2, "context_len": 8},
  "teacher_train": {"steps": 30, "eval_every": 15, "eval_windows": 8},
  "dump_windows": 40,
  "sae": {"n_concepts": 16, "k": 4, "steps": 50, "batch": 64},
  "labels": {"k_attr": 2},
  "student": {"d_model": 16, "n_layers": 2, "n_heads": 2, "context_len": 8},
  "train": {"steps": 20, "eval_every": 10, "eval_windows": 8, "batch_tokens": 16},
  "eval": {"tokens_per_seed": 40, "steer_seeds": [0, 1], "n_prompts": 4, "prompt_len": 2},
  "checkpoint_every": 10
})";

}  // namespace cocomix::testing
