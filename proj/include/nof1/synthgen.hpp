// Synthetic series generator following the exposure -> outcome -> covariate
// within-time ordering, with configurable coefficient trajectories and a
// confounded logistic exposure assignment. The exact realized coefficient
// paths are returned alongside the series for oracle comparisons.
#ifndef NOF1_SYNTHGEN_HPP
#define NOF1_SYNTHGEN_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "nof1/estimands.hpp"
#include "nof1/series.hpp"

#include <nlohmann/json_fwd.hpp>

namespace nof1 {

enum class TrajectoryKind { kConstant, kPiecewise, kRandomWalk };

struct Trajectory {
  TrajectoryKind kind = TrajectoryKind::kConstant;
  double value = 0.0;               // constant value, or random-walk start
  std::vector<int> change_points;   // piecewise: first index of each new level
  std::vector<double> values;       // piecewise: change_points.size() + 1 levels
  double walk_variance = 0.0;       // random-walk increment variance

  static Trajectory constant(double v);
  static Trajectory piecewise(std::vector<int> cps, std::vector<double> vals);
  static Trajectory random_walk(double start, double variance);

  void validate(int T) const;
  static Trajectory from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Logistic assignment model for one exposure column:
// logit Pr(A_t = 1) = intercept + a'A_{t-1} + y Y_{t-1} + c'C_{t-1}.
struct ExposureModel {
  double intercept = 0.0;
  Eigen::VectorXd on_exposures;   // dA
  double on_outcome = 0.0;
  Eigen::VectorXd on_covariates;  // dC
};

struct TruthSpec {
  int length = 600;
  std::uint64_t seed = 1;
  SeriesSchema schema;  // empty outcome name = default names

  Trajectory beta0, rho;
  std::vector<Trajectory> beta1, beta2;  // per exposure
  std::vector<Trajectory> betac;         // per covariate

  struct CovariateModel {
    Trajectory mu0;
    std::vector<Trajectory> pc;  // per covariate (lagged)
    std::vector<Trajectory> m1;  // per exposure
    Trajectory mu2;
  };
  std::vector<CovariateModel> covariate_models;

  double outcome_variance = 1.0;
  std::vector<double> covariate_variances;

  std::vector<ExposureModel> exposure_models;  // per exposure
  double epsilon = 0.05;  // propensity clamp enforcing overlap

  std::vector<double> baseline;  // C_0
  double y0 = 0.0;
  double missing_outcome_rate = 0.0;

  int exposure_count() const { return static_cast<int>(beta1.size()); }
  int covariate_count() const { return static_cast<int>(betac.size()); }
  void validate() const;
  SeriesSchema resolved_schema() const;

  static TruthSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct GenerationResult {
  Series series;
  CoefficientFrame truth;  // realized coefficients over t = 1..T, exact
  double min_propensity = 1.0;
  double max_propensity = 0.0;
};

GenerationResult generate(const TruthSpec& spec);

// Evaluates an estimand on the exact truth frame (zero uncertainty).
double ground_truth_estimand(const CoefficientFrame& truth,
                             const EstimandRequest& req, int t);

}  // namespace nof1

#endif  // NOF1_SYNTHGEN_HPP
