#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cocomix {

// One metrics CSV line. For the KD, pause-KD and direct-hidden arms the
// concept_loss column carries that arm's auxiliary term. val_ppl is NaN on
// rows without an evaluation and is written as an empty field.
struct MetricsRow {
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  double lr = 0.0;
  double ntp_loss = 0.0;
  double concept_loss = 0.0;
  double total_loss = 0.0;
  double val_ppl = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,tokens_seen,lr,ntp_loss,concept_loss,total_loss,val_ppl";

std::string format_metrics_csv(const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::string& path);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text, const std::string& what);

// Tokens at which validation perplexity first reaches `target`, linearly
// interpolated between the bracketing evaluated rows; empty if never.
std::optional<double> tokens_to_target(const std::vector<MetricsRow>& rows, double target);

struct TargetComparison {
  std::optional<double> tokens_a, tokens_b;
  // tokens_b / tokens_a when both reach the target.
  std::optional<double> ratio;
};
TargetComparison compare_tokens_to_target(const std::vector<MetricsRow>& a,
                                          const std::vector<MetricsRow>& b, double target);

}  // namespace cocomix
