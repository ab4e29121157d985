// Independent reference implementations used as test oracles. Everything
// here recomputes results from first principles (dense joint Gaussians,
// direct normal-equation solves, brute-force enumeration, explicit mean
// rollouts) without touching the library's recursions.
#ifndef NOF1_TEST_ORACLES_HPP
#define NOF1_TEST_ORACLES_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "nof1/estimands.hpp"
#include "nof1/rng.hpp"
#include "nof1/series.hpp"
#include "nof1/synthgen.hpp"

namespace oracles {

using nof1::CoefficientFrame;
using nof1::Rng;
using nof1::Series;
using nof1::SeriesSchema;
using nof1::Strategy;
using nof1::TruthSpec;

// ---------------------------------------------------------------------------
// Exact conditional moments of a scalar local-level model
//   theta_s = theta_{s-1} + w_s,  y_s = F_s theta_s + v_s,
// obtained by building the dense joint covariance of (theta_1..theta_T,
// y_obs) and conditioning. `upto` limits the conditioning set to y_1..y_upto
// (filtered moments); upto = T gives the smoothed moments. NaN responses are
// excluded from the conditioning set.
struct ScalarMoments {
  std::vector<double> mean;
  std::vector<double> var;
};

inline ScalarMoments condition_scalar_ssm(double m0, double c0, double W,
                                          double V,
                                          const std::vector<double>& F,
                                          const std::vector<double>& y,
                                          int upto) {
  const int T = static_cast<int>(y.size());
  Eigen::MatrixXd St(T, T);
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < T; ++j)
      St(i, j) = c0 + (std::min(i, j) + 1) * W;

  std::vector<int> obs;
  for (int i = 0; i < upto; ++i)
    if (!std::isnan(y[i])) obs.push_back(i);
  const int n = static_cast<int>(obs.size());

  ScalarMoments out;
  out.mean.assign(T, m0);
  out.var.resize(T);
  for (int i = 0; i < T; ++i) out.var[i] = St(i, i);
  if (n == 0) return out;

  Eigen::MatrixXd Syy(n, n);
  Eigen::MatrixXd Sty(T, n);
  Eigen::VectorXd resid(n);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b)
      Syy(a, b) = F[obs[a]] * F[obs[b]] * St(obs[a], obs[b]) +
                  (a == b ? V : 0.0);
    for (int i = 0; i < T; ++i) Sty(i, a) = F[obs[a]] * St(i, obs[a]);
    resid(a) = y[obs[a]] - F[obs[a]] * m0;
  }
  const Eigen::MatrixXd gain = Sty * Syy.inverse();
  const Eigen::VectorXd shift = gain * resid;
  const Eigen::MatrixXd reduction = gain * Sty.transpose();
  for (int i = 0; i < T; ++i) {
    out.mean[i] = m0 + shift(i);
    out.var[i] = St(i, i) - reduction(i, i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Posterior mean and covariance of a static-coefficient regression with
// prior N(0, kappa I) and observation variance V, solved directly from the
// weighted normal equations. Rows where usable is false are dropped.
inline void gls_posterior(const Eigen::MatrixXd& F, const Eigen::VectorXd& y,
                          const std::vector<bool>& usable, double V,
                          double kappa, Eigen::VectorXd* mean,
                          Eigen::MatrixXd* cov) {
  const int d = static_cast<int>(F.cols());
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(d, d) / kappa;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(d);
  for (int r = 0; r < F.rows(); ++r) {
    if (!usable[static_cast<std::size_t>(r)]) continue;
    A += F.row(r).transpose() * F.row(r) / V;
    b += F.row(r).transpose() * y(r) / V;
  }
  *cov = A.inverse();
  *mean = *cov * b;
}

// ---------------------------------------------------------------------------
// Brute-force positivity scan: every contiguous length-p window without a
// missing entry contributes its pattern string, most recent entry last.
inline std::set<std::string> window_patterns(const std::vector<double>& a,
                                             int p) {
  std::set<std::string> seen;
  const int n = static_cast<int>(a.size());
  for (int start = 0; start + p <= n; ++start) {
    std::string pat;
    bool ok = true;
    for (int i = 0; i < p; ++i) {
      const double v = a[static_cast<std::size_t>(start + i)];
      if (std::isnan(v)) {
        ok = false;
        break;
      }
      pat += v != 0.0 ? '1' : '0';
    }
    if (ok) seen.insert(pat);
  }
  return seen;
}

// ---------------------------------------------------------------------------
// Explicit mean rollout of the joint (Y, C) dynamics from a zero state,
// written against the frame's named accessors rather than the library's
// propagation recursion. a_path[i] gives the exposure vector applied at
// time t0 + 1 + i; a0 is the exposure vector at t0 itself.
inline double rollout_mean(const CoefficientFrame& f, int t0, double y0,
                           const Eigen::VectorXd& c0,
                           const Eigen::VectorXd& a0,
                           const std::vector<Eigen::VectorXd>& a_path,
                           int t) {
  double y = y0;
  Eigen::VectorXd c = c0;
  Eigen::VectorXd a_prev = a0;
  for (int s = t0 + 1; s <= t; ++s) {
    const Eigen::VectorXd& a_now = a_path[static_cast<std::size_t>(s - t0 - 1)];
    double y_next = f.beta0(s) + f.rho(s) * y;
    for (int j = 0; j < f.n_exposures; ++j)
      y_next += f.beta1(s, j) * a_now(j) + f.beta2(s, j) * a_prev(j);
    if (f.n_covariates > 0) y_next += f.betac(s).dot(c);
    Eigen::VectorXd c_next(f.n_covariates);
    if (s < t && f.n_covariates > 0) {
      const Eigen::MatrixXd pc = f.pc(s);
      const Eigen::MatrixXd m1 = f.m1(s);
      for (int i = 0; i < f.n_covariates; ++i)
        c_next(i) = f.mu0(s, i) + pc.row(i).dot(c) + m1.row(i).dot(a_now) +
                    f.mu2(s, i) * y_next;
      c = c_next;
    }
    y = y_next;
    a_prev = a_now;
  }
  return y;
}

// Effect of `pattern` on exposure column j over the window ending at t,
// against the all-zero pattern, with every other coordinate filled by
// `fill` in both arms. Linearity makes the result fill-invariant.
inline double rollout_effect(const CoefficientFrame& f, int t,
                             const Strategy& pattern, int exposure,
                             double fill = 0.0) {
  const int len = static_cast<int>(pattern.size());
  const int t0 = t - len;
  std::vector<Eigen::VectorXd> on, off;
  for (int i = 0; i < len; ++i) {
    Eigen::VectorXd a = Eigen::VectorXd::Constant(f.n_exposures, fill);
    Eigen::VectorXd b = a;
    a(exposure) = pattern[static_cast<std::size_t>(i)];
    b(exposure) = 0.0;
    on.push_back(a);
    off.push_back(b);
  }
  const Eigen::VectorXd c0 = Eigen::VectorXd::Zero(f.n_covariates);
  const Eigen::VectorXd a0 = Eigen::VectorXd::Zero(f.n_exposures);
  return rollout_mean(f, t0, 0.0, c0, a0, on, t) -
         rollout_mean(f, t0, 0.0, c0, a0, off, t);
}

// ---------------------------------------------------------------------------
// Random coefficient frames. Couplings are kept moderate so the joint
// dynamics stay stable over the lags the tests exercise.
inline Eigen::MatrixXd random_psd(Rng& rng, int d, double scale) {
  Eigen::MatrixXd R(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) R(i, j) = rng.normal();
  return scale * (R * R.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d));
}

inline CoefficientFrame random_frame(std::uint64_t seed, int t_begin, int t_end,
                                     int dA, int dC, bool with_cov = false,
                                     double scale = 0.5) {
  Rng rng = Rng::stream(seed, 900);
  CoefficientFrame f;
  f.t_begin = t_begin;
  f.n_exposures = dA;
  f.n_covariates = dC;
  const int n = t_end - t_begin + 1;
  auto u = [&](double s) { return s * (2.0 * rng.uniform() - 1.0); };
  for (int r = 0; r < n; ++r) {
    Eigen::VectorXd oc(f.outcome_dim());
    oc(0) = u(1.0);
    oc(1) = u(0.7);
    for (int i = 2; i < f.outcome_dim(); ++i) oc(i) = u(scale);
    f.outcome_coef.push_back(oc);
  }
  f.covariate_coef.resize(static_cast<std::size_t>(dC));
  for (int i = 0; i < dC; ++i)
    for (int r = 0; r < n; ++r) {
      Eigen::VectorXd cc(f.covariate_dim());
      cc(0) = u(1.0);
      for (int m = 1; m < f.covariate_dim(); ++m) cc(m) = u(scale * 0.8);
      f.covariate_coef[static_cast<std::size_t>(i)].push_back(cc);
    }
  if (with_cov) {
    for (int r = 0; r < n; ++r)
      f.outcome_cov.push_back(random_psd(rng, f.outcome_dim(), 0.004));
    f.covariate_cov.resize(static_cast<std::size_t>(dC));
    for (int i = 0; i < dC; ++i)
      for (int r = 0; r < n; ++r)
        f.covariate_cov[static_cast<std::size_t>(i)].push_back(
            random_psd(rng, f.covariate_dim(), 0.004));
  }
  f.validate();
  return f;
}

// Time-constant frame from flat coefficient lists (outcome layout
// b0, rho, b1.., b2.., bc..; covariate layout mu0, pc.., m1.., mu2).
inline CoefficientFrame constant_frame(int t_begin, int t_end,
                                       std::vector<double> outcome,
                                       std::vector<std::vector<double>> covs,
                                       int dA) {
  Eigen::VectorXd oc =
      Eigen::Map<Eigen::VectorXd>(outcome.data(), outcome.size());
  std::vector<Eigen::VectorXd> cc;
  for (auto& v : covs)
    cc.push_back(Eigen::Map<Eigen::VectorXd>(v.data(), v.size()));
  return CoefficientFrame::constant(t_begin, t_end, oc, cc, dA);
}

// ---------------------------------------------------------------------------
// Series construction from raw columns. Exposures and outcome cover t=1..T;
// covariates carry the baseline at index 0 and so have T+1 entries each.
inline Series make_series(const std::vector<std::vector<double>>& exposures,
                          const std::vector<double>& outcome,
                          const std::vector<std::vector<double>>& covariates) {
  const int T = static_cast<int>(outcome.size());
  const int dA = static_cast<int>(exposures.size());
  const int dC = static_cast<int>(covariates.size());
  SeriesSchema schema;
  schema.outcome = "Y";
  for (int j = 0; j < dA; ++j)
    schema.exposures.push_back(
        {dA == 1 ? "A" : "A" + std::to_string(j + 1), true});
  for (int k = 0; k < dC; ++k)
    schema.covariates.push_back(dC == 1 ? "C" : "C" + std::to_string(k + 1));
  Eigen::MatrixXd a(T, dA);
  for (int j = 0; j < dA; ++j)
    for (int i = 0; i < T; ++i) a(i, j) = exposures[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
  Eigen::VectorXd y(T);
  for (int i = 0; i < T; ++i) y(i) = outcome[static_cast<std::size_t>(i)];
  Eigen::MatrixXd c(T + 1, dC);
  for (int k = 0; k < dC; ++k)
    for (int i = 0; i <= T; ++i) c(i, k) = covariates[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
  return Series(schema, a, y, c);
}

inline Series binary_series(const std::vector<int>& a) {
  std::vector<double> av, y;
  std::vector<double> c(a.size() + 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    av.push_back(a[i] < 0 ? std::nan("") : static_cast<double>(a[i]));
    y.push_back(0.0);
  }
  return make_series({av}, y, {c});
}

// ---------------------------------------------------------------------------
// Truth specs shared between recovery-style tests.
inline TruthSpec static_truth(std::uint64_t seed, int T, double beta1 = -1.0,
                              double confounding = 0.0) {
  using nof1::Trajectory;
  TruthSpec spec;
  spec.length = T;
  spec.seed = seed;
  spec.beta0 = Trajectory::constant(1.0);
  spec.rho = Trajectory::constant(0.3);
  spec.beta1 = {Trajectory::constant(beta1)};
  spec.beta2 = {Trajectory::constant(-0.4)};
  spec.betac = {Trajectory::constant(0.6)};
  TruthSpec::CovariateModel cm;
  cm.mu0 = Trajectory::constant(0.2);
  cm.pc = {Trajectory::constant(0.5)};
  cm.m1 = {Trajectory::constant(0.3)};
  cm.mu2 = Trajectory::constant(0.1);
  spec.covariate_models = {cm};
  spec.outcome_variance = 1.0;
  spec.covariate_variances = {0.6};
  if (confounding != 0.0) {
    nof1::ExposureModel em;
    em.intercept = 0.0;
    em.on_exposures = Eigen::VectorXd::Constant(1, 0.2);
    em.on_outcome = 0.0;
    em.on_covariates = Eigen::VectorXd::Constant(1, confounding);
    spec.exposure_models = {em};
  }
  spec.baseline = {0.0};
  spec.y0 = 0.0;
  return spec;
}

inline std::uint64_t binom(int n, int k) {
  if (k < 0 || k > n) return 0;
  std::uint64_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) /
                                   static_cast<std::uint64_t>(i);
  return r;
}

}  // namespace oracles

#endif  // NOF1_TEST_ORACLES_HPP
