#include "cocomix/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "binary_io.hpp"
#include "cocomix/error.hpp"

namespace cocomix {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& field, const std::string& path) {
  if (field.empty()) return std::nan("");
  try {
    std::size_t used = 0;
    const double v = std::stod(field, &used);
    if (used != field.size()) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    throw FormatError(path + ": bad number '" + field + "'");
  }
}

}  // namespace

std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + std::to_string(r.tokens_seen) + "," + fmt(r.lr) +
           "," + fmt(r.ntp_loss) + "," + fmt(r.concept_loss) + "," + fmt(r.total_loss) + "," +
           fmt(r.val_ppl) + "\n";
  }
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  io::write_text(path, format_metrics_csv(rows));
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  return parse_metrics_csv(io::read_text(path), path);
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text, const std::string& path) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw FormatError(path + ": missing or unexpected metrics header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 7) throw FormatError(path + ": expected 7 fields in '" + line + "'");
    MetricsRow r;
    r.step = static_cast<std::uint64_t>(parse_double(f[0], path));
    r.tokens_seen = static_cast<std::uint64_t>(parse_double(f[1], path));
    r.lr = parse_double(f[2], path);
    r.ntp_loss = parse_double(f[3], path);
    r.concept_loss = parse_double(f[4], path);
    r.total_loss = parse_double(f[5], path);
    r.val_ppl = parse_double(f[6], path);
    rows.push_back(r);
  }
  return rows;
}

std::optional<double> tokens_to_target(const std::vector<MetricsRow>& rows, double target) {
  const MetricsRow* prev = nullptr;
  for (const auto& r : rows) {
    if (std::isnan(r.val_ppl)) continue;
    if (r.val_ppl <= target) {
      if (!prev) return static_cast<double>(r.tokens_seen);
      const double t0 = static_cast<double>(prev->tokens_seen);
      const double t1 = static_cast<double>(r.tokens_seen);
      const double frac = (prev->val_ppl - target) / (prev->val_ppl - r.val_ppl);
      return t0 + frac * (t1 - t0);
    }
    prev = &r;
  }
  return std::nullopt;
}

TargetComparison compare_tokens_to_target(const std::vector<MetricsRow>& a,
                                          const std::vector<MetricsRow>& b, double target) {
  TargetComparison c;
  c.tokens_a = tokens_to_target(a, target);
  c.tokens_b = tokens_to_target(b, target);
  if (c.tokens_a && c.tokens_b && *c.tokens_a > 0.0) c.ratio = *c.tokens_b / *c.tokens_a;
  return c;
}

}  // namespace cocomix
