#include "nof1/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

#include <nlohmann/json.hpp>

namespace nof1 {

std::uint32_t strategy_mask(const Strategy& s) {
  if (s.size() > 32) throw ValidationError("strategy longer than 32 entries");
  std::uint32_t mask = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] != 0.0) mask |= std::uint32_t{1} << i;
  return mask;
}

std::string pattern_string(std::uint32_t mask, int p) {
  std::string out(static_cast<std::size_t>(p), '0');
  for (int i = 0; i < p; ++i)
    if (mask & (std::uint32_t{1} << i)) out[static_cast<std::size_t>(i)] = '1';
  return out;
}

Strategy pattern_strategy(std::uint32_t mask, int p) {
  Strategy s(static_cast<std::size_t>(p), 0.0);
  for (int i = 0; i < p; ++i)
    if (mask & (std::uint32_t{1} << i)) s[static_cast<std::size_t>(i)] = 1.0;
  return s;
}

const PositivityDuration& PositivityReport::at(int p) const {
  if (!covers(p))
    throw ValidationError("positivity report does not cover duration " +
                          std::to_string(p));
  return durations[static_cast<std::size_t>(p - 1)];
}

bool PositivityReport::observed(int p, std::uint32_t mask) const {
  const PositivityDuration& d = at(p);
  return std::binary_search(d.observed_masks.begin(), d.observed_masks.end(),
                            mask);
}

nlohmann::json PositivityReport::to_json() const {
  nlohmann::json j;
  j["exposure"] = exposure;
  j["max_duration"] = max_duration;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& d : durations) {
    nlohmann::json r;
    r["p"] = d.p;
    r["possible"] = d.possible;
    r["observed"] = d.observed;
    r["percentage"] = d.percentage;
    if (d.p <= 12) {
      nlohmann::json obs = nlohmann::json::array();
      for (std::uint32_t m : d.observed_masks)
        obs.push_back(pattern_string(m, d.p));
      r["observed_patterns"] = obs;
      nlohmann::json un = nlohmann::json::array();
      for (std::uint32_t m : d.unobserved_masks)
        un.push_back(pattern_string(m, d.p));
      r["unobserved_patterns"] = un;
    }
    rows.push_back(std::move(r));
  }
  j["durations"] = rows;
  return j;
}

PositivityReport positivity_report(const Series& series, int exposure,
                                   int max_duration) {
  if (exposure < 0 || exposure >= series.exposure_count())
    throw ValidationError("exposure column out of range");
  if (max_duration < 1 || max_duration > 20)
    throw ValidationError("positivity max duration must lie in 1..20");
  const int T = series.length();
  for (int t = 1; t <= T; ++t) {
    if (series.exposure_missing(t, exposure)) continue;
    const double v = series.exposure(t, exposure);
    if (v != 0.0 && v != 1.0)
      throw ValidationError("positivity scan requires a binary exposure column");
  }

  PositivityReport report;
  report.exposure = exposure;
  report.max_duration = max_duration;
  for (int p = 1; p <= max_duration; ++p) {
    std::set<std::uint32_t> seen;
    for (int start = 1; start + p - 1 <= T; ++start) {
      bool usable = true;
      std::uint32_t mask = 0;
      for (int i = 0; i < p; ++i) {
        if (series.exposure_missing(start + i, exposure)) {
          usable = false;
          break;
        }
        if (series.exposure(start + i, exposure) == 1.0)
          mask |= std::uint32_t{1} << i;
      }
      if (usable) seen.insert(mask);
    }
    PositivityDuration d;
    d.p = p;
    d.possible = std::uint64_t{1} << p;
    d.observed = static_cast<int>(seen.size());
    d.percentage = 100.0 * static_cast<double>(d.observed) /
                   static_cast<double>(d.possible);
    d.observed_masks.assign(seen.begin(), seen.end());
    if (p <= 12) {
      for (std::uint32_t m = 0; m < (std::uint32_t{1} << p); ++m)
        if (!seen.count(m)) d.unobserved_masks.push_back(m);
    }
    report.durations.push_back(std::move(d));
  }
  return report;
}

void write_positivity_csv(const PositivityReport& report, std::ostream& out,
                          const std::string& comment) {
  if (!comment.empty()) out << "# " << comment << "\n";
  out << "p,observed,possible,percentage\n";
  for (const auto& d : report.durations)
    out << d.p << ',' << d.observed << ',' << d.possible << ','
        << format_number(d.percentage) << '\n';
}

nlohmann::json ResponseSeries::to_json() const {
  nlohmann::json j;
  j["label"] = label;
  if (!strategy.empty()) j["strategy"] = strategy_string(strategy);
  j["t"] = t;
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points) {
    nlohmann::json r;
    r["q"] = p.q;
    r["estimate"] = p.estimate;
    r["lower"] = p.lower;
    r["upper"] = p.upper;
    pts.push_back(std::move(r));
  }
  j["points"] = pts;
  return j;
}

namespace {

ResponseSeries response_over_lags(const CoefficientFrame& frame, int t,
                                  int max_q, int exposure, EstimandKind kind,
                                  const IntervalConfig& cfg, WarningLog* log,
                                  const std::string& label) {
  if (max_q < 0) throw ValidationError("max lag must be >= 0");
  ResponseSeries series;
  series.label = label;
  series.t = t;
  for (int q = 0; q <= max_q; ++q) {
    EstimandRequest req;
    req.exposure = exposure;
    if (q == 0) {
      req.kind = EstimandKind::kCe;
    } else {
      req.kind = kind;
      req.q = q;
    }
    const EstimandPoint pt = estimand_with_interval(frame, req, t + q, cfg, log);
    series.points.push_back({q, pt.estimate, pt.lower, pt.upper});
  }
  return series;
}

}  // namespace

ResponseSeries impulse_impact(const CoefficientFrame& frame, int t, int max_q,
                              int exposure, const IntervalConfig& cfg,
                              WarningLog* log) {
  return response_over_lags(frame, t, max_q, exposure, EstimandKind::kLe, cfg,
                            log, "impulse");
}

ResponseSeries step_response(const CoefficientFrame& frame, int t, int max_q,
                             int exposure, const IntervalConfig& cfg,
                             WarningLog* log) {
  return response_over_lags(frame, t, max_q, exposure, EstimandKind::kTe, cfg,
                            log, "step");
}

std::vector<ResponseSeries> general_response(
    const CoefficientFrame& frame, int t,
    const std::vector<Strategy>& strategies, int tail, int exposure,
    const IntervalConfig& cfg, WarningLog* log) {
  if (strategies.empty()) throw ValidationError("no strategies given");
  if (tail < 0) throw ValidationError("tail length must be >= 0");
  const std::size_t len = strategies.front().size();
  for (const auto& s : strategies) {
    if (s.size() != len)
      throw ValidationError("strategies must all have the same length");
    validate_binary_strategy(s);
  }

  std::vector<ResponseSeries> all;
  for (const auto& s : strategies) {
    ResponseSeries series;
    series.label = strategy_string(s);
    series.strategy = s;
    series.t = t;
    const int last_q = static_cast<int>(len) - 1 + tail;
    for (int q = 0; q <= last_q; ++q) {
      Strategy pulse(static_cast<std::size_t>(q) + 1, 0.0);
      const int applied = std::min<int>(q, static_cast<int>(len) - 1);
      for (int i = 0; i <= applied; ++i)
        pulse[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i)];
      EstimandRequest req;
      req.kind = EstimandKind::kGe;
      req.exposure = exposure;
      req.strategy = pulse;
      const EstimandPoint pt =
          estimand_with_interval(frame, req, t + q, cfg, log);
      series.points.push_back({q, pt.estimate, pt.lower, pt.upper});
    }
    all.push_back(std::move(series));
  }
  return all;
}

StepSummary step_response_summary(const ResponseSeries& series) {
  if (series.points.empty()) throw ValidationError("empty response series");
  StepSummary summary;
  double max_mag = 0.0;
  for (const auto& p : series.points) {
    if (std::abs(p.estimate) > max_mag) {
      max_mag = std::abs(p.estimate);
      summary.max_effect = p.estimate;
    }
  }
  summary.q80 = series.points.front().q;
  summary.q95 = series.points.front().q;
  if (max_mag > 0.0) {
    bool found80 = false, found95 = false;
    for (const auto& p : series.points) {
      if (!found80 && std::abs(p.estimate) >= 0.80 * max_mag) {
        summary.q80 = p.q;
        found80 = true;
      }
      if (!found95 && std::abs(p.estimate) >= 0.95 * max_mag) {
        summary.q95 = p.q;
        found95 = true;
      }
    }
  }
  return summary;
}

void write_response_csv(const std::vector<ResponseSeries>& all,
                        std::ostream& out, const std::string& comment) {
  if (!comment.empty()) out << "# " << comment << "\n";
  out << "strategy,q,estimate,lower,upper\n";
  for (const auto& series : all)
    for (const auto& p : series.points)
      out << series.label << ',' << p.q << ',' << format_number(p.estimate)
          << ',' << format_number(p.lower) << ',' << format_number(p.upper)
          << '\n';
}

}  // namespace nof1
