#include "cocomix/concept_select.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cocomix/error.hpp"

namespace cocomix {

std::string select_mode_name(SelectMode m) {
  return m == SelectMode::kAttribution ? "attribution" : "activation";
}

SelectMode parse_select_mode(const std::string& s) {
  if (s == "attribution") return SelectMode::kAttribution;
  if (s == "activation") return SelectMode::kActivation;
  throw ConfigError("unknown selection mode '" + s + "' (expected attribution|activation)");
}

namespace {

// Indices of the k best entries, best first; ties go to the lower index.
std::vector<int> ranked_indices(std::span<const double> v, std::size_t k, RankBy rank) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto key = [&](int i) {
    const double x = v[static_cast<std::size_t>(i)];
    return rank == RankBy::kAbsolute ? std::abs(x) : x;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](int a, int b) {
                      const double x = key(a), y = key(b);
                      return x > y || (x == y && a < b);
                    });
  idx.resize(k);
  return idx;
}

ConceptSelection make_selection(std::vector<int> idx, std::span<const double> values) {
  std::sort(idx.begin(), idx.end());
  ConceptSelection s;
  s.indices = std::move(idx);
  for (int i : s.indices) s.scores.push_back(values[static_cast<std::size_t>(i)]);
  return s;
}

void check_k(int k_attr, std::size_t c) {
  if (k_attr < 1 || static_cast<std::size_t>(k_attr) > c) {
    throw RangeError("K_attr " + std::to_string(k_attr) + " outside [1, " + std::to_string(c) + "]");
  }
}

struct CodeRows {
  std::size_t rows = 0, width = 0;
  std::vector<double> c_pre, c, g;
};

// Packs each sequence with its substituted copy: segment rows [0, n) are the
// original hidden states, row n + t holds decode(c_t) and sees only the
// originals before t plus itself. One backward pass yields every position's
// gradient.
CodeRows batched_attribution(const TransformerModel& teacher, const SaeModel& sae,
                             const std::vector<std::vector<int>>& inputs,
                             std::span<const int> targets, bool want_gradient) {
  FrozenScope frozen_teacher(teacher.parameters());
  FrozenScope frozen_sae(sae.parameters());
  const std::size_t b = inputs.size(), n = inputs[0].size();
  GraphTensor h = teacher.forward_prefix(inputs);
  GraphTensor pre = sae.pre_activation(h);
  GraphTensor code = ops::topk_mask(pre, static_cast<std::size_t>(sae.k()));
  CodeRows out;
  out.rows = h.rows();
  out.width = pre.cols();
  out.c_pre.assign(pre.values().begin(), pre.values().end());
  out.c.assign(code.values().begin(), code.values().end());
  if (!want_gradient) return out;

  GraphTensor cin = GraphTensor::matrix(out.rows, out.width, out.c, true);
  GraphTensor hhat = sae.decode(cin);
  const std::size_t seg = 2 * n;
  std::vector<std::size_t> order(b * seg), read(b * n);
  std::vector<int> pos(b * seg);
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t r = 0; r < n; ++r) {
      order[s * seg + r] = s * n + r;
      order[s * seg + n + r] = b * n + s * n + r;
      pos[s * seg + r] = static_cast<int>(r);
      pos[s * seg + n + r] = static_cast<int>(r);
      read[s * n + r] = s * seg + n + r;
    }
  }
  std::vector<std::uint8_t> mask(seg * seg, 0);
  for (std::size_t i = 0; i < seg; ++i) {
    for (std::size_t j = 0; j < seg; ++j) {
      const bool vis = i < n ? j <= i : (j < i - n || j == i);
      mask[i * seg + j] = vis ? 1 : 0;
    }
  }
  GraphTensor mixed = ops::gather_rows(ops::concat_rows({h, hhat}), order);
  GraphTensor normed = teacher.suffix_hidden(mixed, pos, seg, &mask);
  GraphTensor logits = teacher.unembed(ops::gather_rows(normed, read));
  GraphTensor nll = ops::scale(ops::cross_entropy(logits, targets),
                               static_cast<double>(b * n));
  nll.backward();
  out.g.assign(cin.grad().begin(), cin.grad().end());
  return out;
}

}  // namespace

std::vector<AttributionScores> attribution(const TransformerModel& teacher,
                                           const SaeModel& sae,
                                           std::span<const int> tokens) {
  if (tokens.size() < 2) throw RangeError("attribution: sequence needs at least 2 tokens");
  std::vector<std::vector<int>> inputs{{tokens.begin(), tokens.end() - 1}};
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  const CodeRows r = batched_attribution(teacher, sae, inputs, targets, true);
  std::vector<AttributionScores> out(r.rows);
  for (std::size_t t = 0; t < r.rows; ++t) {
    auto& s = out[t];
    const auto row = [&](const std::vector<double>& v) {
      return std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(t * r.width),
                                 v.begin() + static_cast<std::ptrdiff_t>((t + 1) * r.width));
    };
    s.c_pre = row(r.c_pre);
    s.g = row(r.g);
    s.a.resize(r.width);
    for (std::size_t j = 0; j < r.width; ++j) s.a[j] = s.c_pre[j] * s.g[j];
    s.next_token = targets[t];
  }
  return out;
}

double substituted_nll(const TransformerModel& teacher, const SaeModel& sae,
                       std::span<const int> tokens, std::size_t t,
                       std::span<const double> code) {
  if (t + 1 >= tokens.size()) throw RangeError("substituted_nll: position has no next token");
  FrozenScope frozen_teacher(teacher.parameters());
  FrozenScope frozen_sae(sae.parameters());
  std::vector<int> prefix(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(t + 1));
  GraphTensor h = teacher.forward_prefix(prefix);
  GraphTensor sub = sae.decode(GraphTensor::matrix(1, code.size(), {code.begin(), code.end()}));
  GraphTensor rows = t == 0 ? sub : ops::concat_rows({ops::slice_rows(h, 0, t), sub});
  std::vector<int> pos(t + 1);
  std::iota(pos.begin(), pos.end(), 0);
  GraphTensor normed = teacher.suffix_hidden(rows, pos);
  GraphTensor logits = teacher.unembed(ops::slice_rows(normed, t, t + 1));
  return ops::cross_entropy(logits, tokens[t + 1]).item();
}

ConceptSelection select_topk_concepts(std::span<const double> a, int k_attr, RankBy rank) {
  check_k(k_attr, a.size());
  return make_selection(ranked_indices(a, static_cast<std::size_t>(k_attr), rank), a);
}

ConceptSelection activation_select(const ConceptActivation& c, int k_attr) {
  check_k(k_attr, c.c.size());
  std::vector<double> active_values;
  for (int i : c.active_indices) active_values.push_back(c.c[static_cast<std::size_t>(i)]);
  const std::size_t take = std::min(static_cast<std::size_t>(k_attr), active_values.size());
  std::vector<int> chosen;
  for (int r : ranked_indices(active_values, take, RankBy::kSigned)) {
    chosen.push_back(c.active_indices[static_cast<std::size_t>(r)]);
  }
  bool padded = false;
  for (int j = 0; chosen.size() < static_cast<std::size_t>(k_attr); ++j) {
    if (std::find(c.active_indices.begin(), c.active_indices.end(), j) != c.active_indices.end()) {
      continue;
    }
    chosen.push_back(j);
    padded = true;
  }
  ConceptSelection s = make_selection(std::move(chosen), c.c);
  s.padded = padded;
  return s;
}

LabelSet label_batch(const TransformerModel& teacher, const SaeModel& sae,
                     const std::vector<Window>& windows, int k_attr, SelectMode mode,
                     RankBy rank) {
  if (sae.d_in() != teacher.d_model()) {
    throw ShapeError("label_batch: SAE width " + std::to_string(sae.d_in()) +
                     " != teacher d_model " + std::to_string(teacher.d_model()));
  }
  check_k(k_attr, static_cast<std::size_t>(sae.n_concepts()));
  LabelSet out;
  out.n_concepts = sae.n_concepts();
  out.k_attr = k_attr;
  out.mode = mode;
  out.rank = rank;
  const std::size_t chunk = 16;
  for (std::size_t begin = 0; begin < windows.size(); begin += chunk) {
    std::vector<std::vector<int>> inputs;
    std::vector<int> targets;
    const std::size_t end = std::min(windows.size(), begin + chunk);
    for (std::size_t w = begin; w < end; ++w) {
      if (w > begin && windows[w].tokens.size() != windows[begin].tokens.size()) {
        throw ShapeError("label_batch: windows differ in length");
      }
      if (windows[w].tokens.size() < 2) continue;
      inputs.push_back(windows[w].inputs());
      auto t = windows[w].targets();
      targets.insert(targets.end(), t.begin(), t.end());
    }
    if (inputs.empty()) continue;
    const CodeRows r =
        batched_attribution(teacher, sae, inputs, targets, mode == SelectMode::kAttribution);
    std::vector<double> row(r.width);
    for (std::size_t p = 0; p < r.rows; ++p) {
      ConceptSelection s;
      const std::size_t base = p * r.width;
      if (mode == SelectMode::kAttribution) {
        for (std::size_t j = 0; j < r.width; ++j) row[j] = r.c_pre[base + j] * r.g[base + j];
        s = select_topk_concepts(row, k_attr, rank);
      } else {
        ConceptActivation act;
        act.c_pre.assign(r.c_pre.begin() + static_cast<std::ptrdiff_t>(base),
                         r.c_pre.begin() + static_cast<std::ptrdiff_t>(base + r.width));
        act.c.assign(r.c.begin() + static_cast<std::ptrdiff_t>(base),
                     r.c.begin() + static_cast<std::ptrdiff_t>(base + r.width));
        act.active_indices = ranked_indices(act.c_pre, static_cast<std::size_t>(sae.k()),
                                            RankBy::kSigned);
        std::sort(act.active_indices.begin(), act.active_indices.end());
        s = activation_select(act, k_attr);
        if (s.padded) ++out.padded_positions;
      }
      out.indices.insert(out.indices.end(), s.indices.begin(), s.indices.end());
      out.scores.insert(out.scores.end(), s.scores.begin(), s.scores.end());
    }
  }
  return out;
}

Digest windows_hash(const std::vector<Window>& windows) {
  Sha256 h;
  h.update("windows/v1");
  h.update_u64(windows.size());
  for (const auto& w : windows) {
    h.update_u64(w.doc);
    h.update_u64(w.offset);
    h.update_u64(w.tokens.size());
    for (int t : w.tokens) h.update_u64(static_cast<std::uint64_t>(t));
  }
  return h.finish();
}

}  // namespace cocomix
