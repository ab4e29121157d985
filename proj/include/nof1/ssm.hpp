// Time-varying coefficient regression as a linear state-space model with
// identity state transition: Kalman filter and smoother, MLE over the
// noise variances, coefficient regimes, and change-point search for
// periodic-stable coefficients.
#ifndef NOF1_SSM_HPP
#define NOF1_SSM_HPP

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "nof1/estimands.hpp"
#include "nof1/series.hpp"

#include <nlohmann/json_fwd.hpp>

namespace nof1 {

enum class RegimeKind { kStatic, kRandomWalk, kPeriodicStable };

const char* regime_name(RegimeKind kind);
RegimeKind regime_from_string(const std::string& s);

struct CoefficientRegime {
  RegimeKind kind = RegimeKind::kStatic;
  // Periodic-stable only: first time index of each new segment, strictly
  // increasing, inside the modeled range.
  std::vector<int> change_points;
};

// Model structure for one scalar response. State dimension equals the
// design column count; the state transition is the identity for every
// regime (static: W entry 0; random walk: W entry fitted; periodic
// stable: W entry 0 plus covariance reinitialization at change points).
struct SsmSpec {
  VarRole response = VarRole::kOutcome;
  int response_col = 0;
  std::vector<DesignColumn> columns;
  std::vector<CoefficientRegime> regimes;
  Eigen::VectorXd init_mean;  // empty = zeros
  Eigen::MatrixXd init_cov;   // empty = diffuse * I
  double diffuse = 1e7;

  int dim() const { return static_cast<int>(columns.size()); }
  int column_index(const std::string& name) const;
  void validate(int t_begin, int t_end) const;
  Eigen::VectorXd m0() const;
  Eigen::MatrixXd c0() const;

  static SsmSpec standard(const SeriesSchema& schema, const DagConfig& cfg,
                          VarRole response, int response_col = 0);

  static SsmSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SsmParams {
  double obs_variance = 1.0;       // V
  Eigen::VectorXd state_variances;  // W diagonal; empty = all zero
};

struct FilterStep {
  Eigen::VectorXd m;  // filtered mean
  Eigen::MatrixXd C;  // filtered covariance
  Eigen::MatrixXd R;  // predicted covariance for this step
  double Q = 0.0;     // innovation variance (updated steps)
  double loglik = 0.0;
  bool updated = false;
  std::vector<int> reinit;  // coefficients reinitialized before this step
};

struct FilterResult {
  int t_begin = 1;
  std::vector<FilterStep> steps;
  double loglik = 0.0;
  Eigen::VectorXd m0;
  Eigen::MatrixXd C0;

  int t_of(int row) const { return t_begin + row; }
};

// Responses with NaN (or NaN anywhere in the design row) give
// prediction-only steps with zero likelihood contribution.
FilterResult kalman_filter(const SsmSpec& spec, const Eigen::VectorXd& ys,
                           const Eigen::MatrixXd& Fs, const SsmParams& params,
                           int t_begin = 1, WarningLog* log = nullptr);
FilterResult kalman_filter(const SsmSpec& spec, const ModelFrame& frame,
                           const SsmParams& params, WarningLog* log = nullptr);

struct SmoothedResult {
  int t_begin = 1;
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::MatrixXd> cov;
};

SmoothedResult kalman_smooth(const FilterResult& filtered,
                             WarningLog* log = nullptr);

struct FitOptions {
  int starts = 3;
  int budget = 500;   // objective evaluations per start
  double tol = 1e-9;  // objective spread at convergence
};

struct FittedSsm {
  SsmSpec spec;
  int t_begin = 1;
  double obs_variance = 1.0;
  Eigen::VectorXd state_variances;
  double loglik = 0.0;
  bool converged = true;
  int evaluations = 0;
  std::vector<Eigen::VectorXd> smoothed_mean;  // per row, time t_begin + row
  std::vector<Eigen::MatrixXd> smoothed_cov;
  std::vector<bool> updated;
  WarningLog warnings;

  int rows() const { return static_cast<int>(smoothed_mean.size()); }
  int t_end() const { return t_begin + rows() - 1; }
  double coefficient(int t, int col) const;
  double standard_error(int t, int col) const;
  // Segment boundaries for one coefficient: inclusive time ranges.
  std::vector<std::pair<int, int>> segments(int col) const;

  nlohmann::json to_json() const;
  static FittedSsm from_json(const nlohmann::json& j);
};

// Maximizes the filter log-likelihood over log(V) and log(W_j) for
// random-walk columns, Nelder-Mead from deterministic multi-starts.
FittedSsm fit_mle(const SsmSpec& spec, const ModelFrame& frame,
                  const FitOptions& opts = {}, WarningLog* log = nullptr);
FittedSsm fit_mle(const SsmSpec& spec, const Series& series,
                  const FitOptions& opts = {}, WarningLog* log = nullptr);

struct ChangePointOptions {
  int max_points = 1;  // 0..3
  int grid_stride = 7;
  int min_segment = 30;
  // Parameters charged per change point in the BIC penalty. The default
  // counts both the extra level and the location.
  double per_point_params = 2.0;
  FitOptions fit;
};

struct ChangePointScanEntry {
  std::vector<int> points;
  double bic = 0.0;
};

struct ChangePointResult {
  std::vector<int> change_points;
  double bic = 0.0;
  std::vector<std::pair<int, int>> segments;
  std::vector<double> segment_estimates;
  std::vector<double> segment_ses;
  FittedSsm fitted;
  std::vector<ChangePointScanEntry> scan;
};

// Grid search over change-point placements for one coefficient, scored by
// BIC on the segment-split regression, followed by a full refit at the
// selected placement.
ChangePointResult infer_change_points(const SsmSpec& spec,
                                      const ModelFrame& frame,
                                      const std::string& coefficient,
                                      const ChangePointOptions& opts = {},
                                      WarningLog* log = nullptr);
ChangePointResult infer_change_points(const SsmSpec& spec, const Series& series,
                                      const std::string& coefficient,
                                      const ChangePointOptions& opts = {},
                                      WarningLog* log = nullptr);

// Combines the fitted outcome model and one fitted model per covariate
// into the coefficient frame consumed by the estimand layer. Requires the
// standard lag-1 design layout in every fit.
CoefficientFrame make_coefficient_frame(const FittedSsm& outcome,
                                        const std::vector<FittedSsm>& covariates);

}  // namespace nof1

#endif  // NOF1_SSM_HPP
