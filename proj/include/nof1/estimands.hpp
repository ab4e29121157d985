// Closed-form causal estimands over time-varying coefficient frames, the
// general lag-propagation recursion, and percentile intervals by
// coefficient resampling.
#ifndef NOF1_ESTIMANDS_HPP
#define NOF1_ESTIMANDS_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "nof1/common.hpp"

#include <nlohmann/json_fwd.hpp>

namespace nof1 {

// Per-time coefficients of the outcome model
//   Y_t = b0_t + rho_t Y_{t-1} + b1_t' A_t + b2_t' A_{t-1} + bc_t' C_{t-1} + v_t
// and of the covariate models (one per covariate row i)
//   C_t[i] = mu0_t[i] + Pc_t[i,:] C_{t-1} + M1_t[i,:] A_t + mu2_t[i] Y_t + u_t[i],
// stored in design order per model:
//   outcome:     (b0, rho, b1[dA], b2[dA], bc[dC])
//   covariate i: (mu0, Pc row [dC], M1 row [dA], mu2)
// together with optional per-time sampling covariances of those vectors.
struct CoefficientFrame {
  int t_begin = 1;
  int n_exposures = 1;
  int n_covariates = 0;

  std::vector<Eigen::VectorXd> outcome_coef;               // by t - t_begin
  std::vector<Eigen::MatrixXd> outcome_cov;                // empty = exact
  std::vector<std::vector<Eigen::VectorXd>> covariate_coef;  // [i][t - t_begin]
  std::vector<std::vector<Eigen::MatrixXd>> covariate_cov;

  int times() const { return static_cast<int>(outcome_coef.size()); }
  int t_end() const { return t_begin + times() - 1; }
  bool in_range(int t) const { return t >= t_begin && t <= t_end(); }
  bool has_uncertainty() const { return !outcome_cov.empty(); }

  int outcome_dim() const { return 2 + 2 * n_exposures + n_covariates; }
  int covariate_dim() const { return 2 + n_covariates + n_exposures; }

  // Layout offsets within the outcome coefficient vector.
  int idx_beta0() const { return 0; }
  int idx_rho() const { return 1; }
  int idx_beta1(int j) const { return 2 + j; }
  int idx_beta2(int j) const { return 2 + n_exposures + j; }
  int idx_betac(int k) const { return 2 + 2 * n_exposures + k; }
  // Layout offsets within a covariate coefficient vector.
  int idx_mu0() const { return 0; }
  int idx_pc(int k) const { return 1 + k; }
  int idx_mu1(int j) const { return 1 + n_covariates + j; }
  int idx_mu2() const { return 1 + n_covariates + n_exposures; }

  double beta0(int t) const { return oc(t)(idx_beta0()); }
  double rho(int t) const { return oc(t)(idx_rho()); }
  double beta1(int t, int j) const { return oc(t)(idx_beta1(j)); }
  double beta2(int t, int j) const { return oc(t)(idx_beta2(j)); }
  Eigen::VectorXd betac(int t) const {
    return oc(t).segment(idx_betac(0), n_covariates);
  }
  double mu0(int t, int i) const { return cc(t, i)(idx_mu0()); }
  double mu2(int t, int i) const { return cc(t, i)(idx_mu2()); }
  Eigen::MatrixXd pc(int t) const;       // dC x dC, row i = model i
  Eigen::MatrixXd m1(int t) const;       // dC x dA
  Eigen::VectorXd mu2_vec(int t) const;  // dC

  const Eigen::VectorXd& oc(int t) const;
  const Eigen::VectorXd& cc(int t, int i) const;

  void validate() const;

  // Time-constant frame from a single coefficient set; covariances zero.
  static CoefficientFrame constant(int t_begin, int t_end,
                                   const Eigen::VectorXd& outcome,
                                   const std::vector<Eigen::VectorXd>& covariates,
                                   int n_exposures);

  static CoefficientFrame from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;  // means only; covariances omitted
};

// Exposure pattern over a window of consecutive times; entry i applies to
// time t - q + i where q + 1 is the pattern length.
using Strategy = std::vector<double>;

int active_count(const Strategy& s);
std::string strategy_string(const Strategy& s);
void validate_binary_strategy(const Strategy& s);

// Effect on Y_t of applying `pulse` to exposure column j over times
// t-q..t (pulse.size() == q+1), relative to the all-zero pattern, with
// coefficients taken from the frame at the matching times. This is the
// general recursion behind every estimand here.
double propagate_linear_system(const CoefficientFrame& frame, int t,
                               const Strategy& pulse, int exposure = 0);

// Term-by-term transcriptions of the closed forms for lags 0..2; kept
// separate from the recursion so the two can be checked against each
// other.
namespace closed_form {
double ce(const CoefficientFrame& frame, int t, int exposure = 0);
double lde1(const CoefficientFrame& frame, int t, int exposure = 0);
double le1(const CoefficientFrame& frame, int t, int exposure = 0);
double le2(const CoefficientFrame& frame, int t, int exposure = 0);
double te1(const CoefficientFrame& frame, int t, int exposure = 0);
double te2(const CoefficientFrame& frame, int t, int exposure = 0);
}  // namespace closed_form

double contemporaneous_effect(const CoefficientFrame& frame, int t,
                              int exposure = 0);
double lag_structural_direct_effect(const CoefficientFrame& frame, int t, int q,
                                    int exposure = 0);
double lag_effect(const CoefficientFrame& frame, int t, int q, int exposure = 0);
double total_effect(const CoefficientFrame& frame, int t, int q,
                    int exposure = 0);
double general_effect(const CoefficientFrame& frame, int t,
                      const Strategy& strategy, int exposure = 0);
double cumulative_direct_effect(const CoefficientFrame& frame, int t,
                                int exposure = 0);

struct CumOeResult {
  double value = 0.0;
  int truncated_at = 0;  // last lag included
};

CumOeResult cumulative_overall_effect(const CoefficientFrame& frame, int t,
                                      int horizon, int exposure = 0,
                                      double tolerance = 1e-8);

// ---------------------------------------------------------------------------
// Percentile intervals by resampling coefficients from their per-time
// Gaussian sampling distributions (independent across times and models).

struct IntervalConfig {
  int draws = 2000;
  double level = 0.90;
  std::uint64_t seed = 20240901;
};

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

// Resamples coefficients at times t_lo..t_hi from their per-time Gaussian
// sampling distributions, independent across times and models. Covariance
// factorizations are done once at construction; draw(seed, k) depends on
// (seed, k) only, not on call order.
class WindowSampler {
 public:
  WindowSampler(const CoefficientFrame& frame, int t_lo, int t_hi,
                WarningLog* log = nullptr);

  // The returned reference stays valid until the next draw() call.
  const CoefficientFrame& draw(std::uint64_t seed, std::uint64_t k);

 private:
  const CoefficientFrame* base_;
  CoefficientFrame work_;
  int t_lo_, t_hi_;
  std::vector<Eigen::MatrixXd> outcome_sqrt_;
  std::vector<std::vector<Eigen::MatrixXd>> covariate_sqrt_;
};

// One-shot convenience wrapper around WindowSampler.
CoefficientFrame sample_frame(const CoefficientFrame& frame, int t_lo, int t_hi,
                              std::uint64_t seed, std::uint64_t draw,
                              WarningLog* log = nullptr);

enum class EstimandKind { kCe, kLde, kLe, kTe, kGe, kCumDe, kCumOe };

const char* estimand_kind_name(EstimandKind kind);

struct EstimandRequest {
  EstimandKind kind = EstimandKind::kCe;
  int exposure = 0;
  int q = 0;             // lag for LDE/LE/TE; horizon for cumOE
  Strategy strategy;     // GE only
  double tolerance = 1e-8;  // cumOE truncation

  std::string name() const;  // CE, LDE2, LE1, TE3, GE, cumDE, cumOE
  // Inclusive window of frame times the estimand at anchor t depends on.
  void window(int t, int* t_lo, int* t_hi) const;
  void validate() const;
};

double point_estimand(const CoefficientFrame& frame, const EstimandRequest& req,
                      int t);

struct EstimandPoint {
  int t = 0;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

EstimandPoint estimand_with_interval(const CoefficientFrame& frame,
                                     const EstimandRequest& req, int t,
                                     const IntervalConfig& cfg,
                                     WarningLog* log = nullptr);

struct EstimandSeries {
  std::string name;
  EstimandRequest request;
  std::vector<EstimandPoint> points;

  nlohmann::json to_json() const;
};

EstimandSeries estimand_series(const CoefficientFrame& frame,
                               const EstimandRequest& req,
                               const std::vector<int>& ts,
                               const IntervalConfig& cfg,
                               WarningLog* log = nullptr);

// Long-format CSV: t,name,q,strategy,estimate,lower,upper.
void write_estimands_csv(const std::vector<EstimandSeries>& all,
                         std::ostream& out, const std::string& comment = "");

}  // namespace nof1

#endif  // NOF1_ESTIMANDS_HPP
