// Positivity validation over sliding exposure windows, and the impulse /
// step / general response series emitted as plot data.
#ifndef NOF1_DIAGNOSTICS_HPP
#define NOF1_DIAGNOSTICS_HPP

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "nof1/estimands.hpp"
#include "nof1/series.hpp"

#include <nlohmann/json_fwd.hpp>

namespace nof1 {

// Exposure pattern as a bitmask; bit i holds the chronologically i-th
// entry of the window.
std::uint32_t strategy_mask(const Strategy& s);
std::string pattern_string(std::uint32_t mask, int p);
Strategy pattern_strategy(std::uint32_t mask, int p);

struct PositivityDuration {
  int p = 0;
  std::uint64_t possible = 0;  // 2^p
  int observed = 0;            // distinct observed patterns
  double percentage = 0.0;     // observed / possible * 100
  std::vector<std::uint32_t> observed_masks;    // sorted
  std::vector<std::uint32_t> unobserved_masks;  // enumerated only for p <= 12
};

// Distinct exposure patterns observed over sliding windows of each
// duration p = 1..max_duration. Windows touching a missing exposure entry
// are skipped.
struct PositivityReport {
  int exposure = 0;
  int max_duration = 0;
  std::vector<PositivityDuration> durations;  // index p - 1

  bool covers(int p) const { return p >= 1 && p <= max_duration; }
  const PositivityDuration& at(int p) const;
  bool observed(int p, std::uint32_t mask) const;

  nlohmann::json to_json() const;
};

PositivityReport positivity_report(const Series& series, int exposure,
                                   int max_duration);

void write_positivity_csv(const PositivityReport& report, std::ostream& out,
                          const std::string& comment = "");

struct ResponsePoint {
  int q = 0;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

struct ResponseSeries {
  std::string label;
  Strategy strategy;  // empty for impulse/step
  int t = 0;          // window start: effects are evaluated at t + q
  std::vector<ResponsePoint> points;

  nlohmann::json to_json() const;
};

// Effect on Y_{t+q} of a one-time exposure at t: q=0 is the
// contemporaneous effect, q >= 1 the q-lag effect.
ResponseSeries impulse_impact(const CoefficientFrame& frame, int t, int max_q,
                              int exposure = 0,
                              const IntervalConfig& cfg = {},
                              WarningLog* log = nullptr);

// Effect on Y_{t+q} of sustained exposure from t onward.
ResponseSeries step_response(const CoefficientFrame& frame, int t, int max_q,
                             int exposure = 0, const IntervalConfig& cfg = {},
                             WarningLog* log = nullptr);

// Effect on Y_{t+q} of applying the strategy over t..t+len-1, followed by
// a zero-exposure decay tail.
std::vector<ResponseSeries> general_response(
    const CoefficientFrame& frame, int t,
    const std::vector<Strategy>& strategies, int tail = 7, int exposure = 0,
    const IntervalConfig& cfg = {}, WarningLog* log = nullptr);

// Lags at which the response magnitude first reaches the given fractions
// of its maximum over the series.
struct StepSummary {
  double max_effect = 0.0;  // signed estimate of largest magnitude
  int q80 = 0;
  int q95 = 0;
};

StepSummary step_response_summary(const ResponseSeries& series);

// Tidy CSV, one row per (strategy, q).
void write_response_csv(const std::vector<ResponseSeries>& all,
                        std::ostream& out, const std::string& comment = "");

}  // namespace nof1

#endif  // NOF1_DIAGNOSTICS_HPP
