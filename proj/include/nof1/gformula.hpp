// Monte Carlo g-formula engine: simulates counterfactual outcome
// trajectories under fixed exposure sequences from fitted outcome and
// covariate models, pooling over parameter draws and noise copies.
#ifndef NOF1_GFORMULA_HPP
#define NOF1_GFORMULA_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "nof1/diagnostics.hpp"
#include "nof1/estimands.hpp"
#include "nof1/series.hpp"
#include "nof1/ssm.hpp"

#include <nlohmann/json_fwd.hpp>

namespace nof1 {

struct McConfig {
  int draws = 1000;             // K parameter draws
  int copies = 200;             // B trajectory copies per draw
  std::uint64_t seed = 20240901;
  bool mean_path = false;       // zero all noise; copies collapse to one
  double level = 0.90;          // percentile interval level
  bool others_observed = false; // non-target exposures: observed vs zero

  void validate() const;
  static McConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Sampled coefficient frame plus the noise variances of the fitted
// models; variances stay fixed at their point estimates across draws.
struct McModel {
  CoefficientFrame frame;
  double outcome_variance = 0.0;
  std::vector<double> covariate_variances;

  static McModel from_fits(const FittedSsm& outcome,
                           const std::vector<FittedSsm>& covariates);
  void validate() const;
};

// Realized conditioning state at time t0; simulations start at t0 + 1.
struct HistorySeed {
  int t0 = 0;
  double y = 0.0;
  Eigen::VectorXd a;  // exposures at t0
  Eigen::VectorXd c;  // covariates at t0

  static HistorySeed from_series(const Series& series, int t0);
  static HistorySeed from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct CounterfactualResult {
  int t = 0;
  Strategy strategy;
  HistorySeed seed_history;
  std::vector<double> draw_means;  // one mean over copies per draw
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;

  nlohmann::json to_json(const McConfig& cfg) const;
};

// Expected Y_t under do(A_{(t-q):t} = strategy), conditional on the
// observed (strategy length q+1, seed at t0 = t-q-1) or supplied history.
CounterfactualResult simulate_counterfactual(const McModel& model,
                                             const Series& series, int t,
                                             const Strategy& strategy,
                                             int exposure, const McConfig& cfg,
                                             WarningLog* log = nullptr);
CounterfactualResult simulate_counterfactual(const McModel& model,
                                             const HistorySeed& history,
                                             const Strategy& strategy,
                                             int exposure, const McConfig& cfg,
                                             WarningLog* log = nullptr);

// Contrast of two same-length strategies at t: per-draw differences of
// counterfactual means share parameter draws but use independent noise.
// draws_out, when given, receives the per-draw differences.
EstimandPoint mc_estimand(const McModel& model, const Series& series, int t,
                          const Strategy& strategy,
                          const Strategy& reference, int exposure,
                          const McConfig& cfg, WarningLog* log = nullptr,
                          std::vector<double>* draws_out = nullptr);

struct MarginalResult {
  Strategy strategy;
  int windows = 0;  // history windows averaged over
  std::vector<double> draw_means;
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;

  nlohmann::json to_json(const McConfig& cfg) const;
};

// Expected outcome under the strategy averaged over history windows: all
// admissible observed anchors (empirical) or supplied records.
MarginalResult marginalized_outcome(const McModel& model, const Series& series,
                                    const Strategy& strategy, int exposure,
                                    const McConfig& cfg,
                                    WarningLog* log = nullptr);
MarginalResult marginalized_outcome(const McModel& model,
                                    const std::vector<HistorySeed>& histories,
                                    const Strategy& strategy, int exposure,
                                    const McConfig& cfg,
                                    WarningLog* log = nullptr);

struct RankedStrategy {
  Strategy strategy;
  int active = 0;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

struct Recommendation {
  int t = 0;
  int q = 0;
  int max_active = 0;
  int exposure = 0;
  int candidates_total = 0;
  std::vector<int> candidates_by_active;  // index = number of active entries
  std::vector<RankedStrategy> ranked;
  std::vector<Strategy> excluded;  // dropped by the positivity guard

  nlohmann::json to_json(const McConfig& cfg) const;
};

// Enumerates binary strategies of length q+1 with at most max_active
// active entries, drops patterns unobserved per the positivity report,
// and ranks the rest by mc_estimand against all-zeros (most negative
// first; ties by fewer active entries, then lexicographic).
Recommendation recommend_strategy(const McModel& model, const Series& series,
                                  int t, int q, int max_active,
                                  const PositivityReport& positivity,
                                  int exposure, const McConfig& cfg,
                                  WarningLog* log = nullptr);

}  // namespace nof1

#endif  // NOF1_GFORMULA_HPP
