#include "nof1/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include <nlohmann/json.hpp>

#include "nof1/stats.hpp"

namespace nof1 {

const char* regime_name(RegimeKind kind) {
  switch (kind) {
    case RegimeKind::kStatic: return "static";
    case RegimeKind::kRandomWalk: return "random_walk";
    case RegimeKind::kPeriodicStable: return "periodic_stable";
  }
  return "?";
}

RegimeKind regime_from_string(const std::string& s) {
  if (s == "static") return RegimeKind::kStatic;
  if (s == "random_walk") return RegimeKind::kRandomWalk;
  if (s == "periodic_stable") return RegimeKind::kPeriodicStable;
  throw ValidationError("unknown coefficient regime '" + s + "'");
}

int SsmSpec::column_index(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i].name == name) return static_cast<int>(i);
  return -1;
}

void SsmSpec::validate(int t_begin, int t_end) const {
  if (columns.empty()) throw ValidationError("ssm spec: no design columns");
  if (regimes.size() != columns.size())
    throw ValidationError("ssm spec: one regime per design column required");
  if (response == VarRole::kExposure)
    throw ValidationError("ssm spec: no exposure model is fitted");
  for (const auto& regime : regimes) {
    if (regime.kind != RegimeKind::kPeriodicStable && !regime.change_points.empty())
      throw ValidationError("ssm spec: change points require a periodic-stable regime");
    for (std::size_t i = 0; i < regime.change_points.size(); ++i) {
      const int cp = regime.change_points[i];
      if (cp <= t_begin || cp > t_end)
        throw ValidationError("ssm spec: change point " + std::to_string(cp) +
                              " outside the modeled range");
      if (i > 0 && cp <= regime.change_points[i - 1])
        throw ValidationError("ssm spec: change points must be strictly increasing");
    }
  }
  if (init_mean.size() != 0 && init_mean.size() != dim())
    throw ValidationError("ssm spec: init mean dimension mismatch");
  if (init_cov.size() != 0 &&
      (init_cov.rows() != dim() || init_cov.cols() != dim()))
    throw ValidationError("ssm spec: init covariance dimension mismatch");
  if (!(diffuse > 0)) throw ValidationError("ssm spec: diffuse scale must be > 0");
}

Eigen::VectorXd SsmSpec::m0() const {
  if (init_mean.size() != 0) return init_mean;
  return Eigen::VectorXd::Zero(dim());
}

Eigen::MatrixXd SsmSpec::c0() const {
  if (init_cov.size() != 0) return init_cov;
  return diffuse * Eigen::MatrixXd::Identity(dim(), dim());
}

SsmSpec SsmSpec::standard(const SeriesSchema& schema, const DagConfig& cfg,
                          VarRole response, int response_col) {
  SsmSpec spec;
  spec.response = response;
  spec.response_col = response_col;
  spec.columns = design_columns(schema, cfg, response);
  spec.regimes.assign(spec.columns.size(), CoefficientRegime{});
  return spec;
}

SsmSpec SsmSpec::from_json(const nlohmann::json& j) {
  SsmSpec spec;
  spec.response = role_from_string(j.at("response").get<std::string>());
  spec.response_col = j.value("response_col", 0);
  for (const auto& cj : j.at("columns")) {
    DesignColumn col;
    col.name = cj.at("name").get<std::string>();
    col.intercept = cj.value("intercept", false);
    if (!col.intercept) {
      col.ref.role = role_from_string(cj.at("role").get<std::string>());
      col.ref.lag = cj.at("lag").get<int>();
      col.column = cj.value("column", 0);
    }
    spec.columns.push_back(col);
  }
  for (const auto& rj : j.at("regimes")) {
    CoefficientRegime regime;
    regime.kind = regime_from_string(rj.at("kind").get<std::string>());
    if (rj.contains("change_points"))
      for (const auto& cp : rj.at("change_points"))
        regime.change_points.push_back(cp.get<int>());
    spec.regimes.push_back(regime);
  }
  if (j.contains("init_mean")) {
    const auto& v = j.at("init_mean");
    spec.init_mean.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) spec.init_mean(i) = v[i];
  }
  if (j.contains("init_cov")) {
    const auto& m = j.at("init_cov");
    spec.init_cov.resize(m.size(), m.empty() ? 0 : m[0].size());
    for (std::size_t r = 0; r < m.size(); ++r)
      for (std::size_t c = 0; c < m[r].size(); ++c)
        spec.init_cov(r, c) = m[r][c];
  }
  spec.diffuse = j.value("diffuse", 1e7);
  return spec;
}

nlohmann::json SsmSpec::to_json() const {
  nlohmann::json j;
  j["response"] = role_name(response);
  j["response_col"] = response_col;
  j["columns"] = nlohmann::json::array();
  for (const auto& col : columns) {
    nlohmann::json cj;
    cj["name"] = col.name;
    if (col.intercept) {
      cj["intercept"] = true;
    } else {
      cj["role"] = role_name(col.ref.role);
      cj["lag"] = col.ref.lag;
      cj["column"] = col.column;
    }
    j["columns"].push_back(cj);
  }
  j["regimes"] = nlohmann::json::array();
  for (const auto& regime : regimes) {
    nlohmann::json rj;
    rj["kind"] = regime_name(regime.kind);
    if (!regime.change_points.empty()) rj["change_points"] = regime.change_points;
    j["regimes"].push_back(rj);
  }
  if (init_mean.size() != 0)
    j["init_mean"] = std::vector<double>(init_mean.begin(), init_mean.end());
  if (init_cov.size() != 0) {
    nlohmann::json m = nlohmann::json::array();
    for (int r = 0; r < init_cov.rows(); ++r)
      m.push_back(std::vector<double>(init_cov.row(r).begin(),
                                      init_cov.row(r).end()));
    j["init_cov"] = m;
  }
  j["diffuse"] = diffuse;
  return j;
}

namespace {

// Symmetric pseudo-inverse; eigenvalues at or below 1e-12 * trace are
// treated as zero.
Eigen::MatrixXd sym_pinv(const Eigen::MatrixXd& m, const char* what,
                         WarningLog* log) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd& vals = es.eigenvalues();
  const double tol = std::max(1e-12 * std::abs(m.trace()), 1e-300);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(vals.size());
  bool dropped = false;
  for (int i = 0; i < vals.size(); ++i) {
    if (vals(i) > tol)
      inv(i) = 1.0 / vals(i);
    else if (std::abs(vals(i)) > 0)
      dropped = true;
  }
  if (dropped)
    warn(log, std::string("near-singular ") + what +
                  "; using symmetric pseudo-inverse");
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

void check_psd(const Eigen::MatrixXd& c0) {
  if ((c0 - c0.transpose()).cwiseAbs().maxCoeff() >
      1e-10 * std::max(1.0, c0.cwiseAbs().maxCoeff()))
    throw NumericalError("initial covariance is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c0);
  const double scale = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
  if (es.eigenvalues().minCoeff() < -1e-8 * scale)
    throw NumericalError("initial covariance is not positive semidefinite");
}

Eigen::VectorXd resolve_w(const SsmSpec& spec, const SsmParams& params) {
  const int d = spec.dim();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  if (params.state_variances.size() != 0) {
    if (params.state_variances.size() != d)
      throw ValidationError("ssm params: state variance dimension mismatch");
    w = params.state_variances;
  }
  for (int j = 0; j < d; ++j) {
    if (w(j) < 0) throw ValidationError("ssm params: state variances must be >= 0");
    if (spec.regimes[j].kind != RegimeKind::kRandomWalk && w(j) != 0.0)
      throw ValidationError(
          "ssm params: nonzero state variance on a non-random-walk column");
  }
  return w;
}

// Change-point lookup: reinit[row] lists coefficients whose covariance is
// reset to diffuse before the update at that row.
std::vector<std::vector<int>> reinit_schedule(const SsmSpec& spec, int t_begin,
                                              int n) {
  std::vector<std::vector<int>> sched(n);
  for (int j = 0; j < spec.dim(); ++j)
    for (int cp : spec.regimes[j].change_points) {
      const int row = cp - t_begin;
      if (row >= 0 && row < n) sched[row].push_back(j);
    }
  return sched;
}

// Log-likelihood-only filter pass; no per-step storage. Used inside the
// MLE loop.
double filter_loglik(const SsmSpec& spec, const Eigen::VectorXd& ys,
                     const Eigen::MatrixXd& Fs, const SsmParams& params,
                     int t_begin) {
  const int d = spec.dim();
  const int n = static_cast<int>(ys.size());
  const Eigen::VectorXd w = resolve_w(spec, params);
  const auto sched = reinit_schedule(spec, t_begin, n);
  Eigen::VectorXd m = spec.m0();
  Eigen::MatrixXd C = spec.c0();
  Eigen::MatrixXd R(d, d);
  Eigen::VectorXd RF(d), A(d);
  double loglik = 0.0;
  for (int i = 0; i < n; ++i) {
    R = C;
    R.diagonal() += w;
    for (int j : sched[i]) {
      R.row(j).setZero();
      R.col(j).setZero();
      R(j, j) = spec.diffuse;
    }
    const double y = ys(i);
    const auto F = Fs.row(i);
    if (std::isnan(y) || F.hasNaN()) {
      C = R;
      continue;
    }
    RF.noalias() = R * F.transpose();
    const double Q = F.dot(RF) + params.obs_variance;
    if (!(Q > 0)) throw NumericalError("non-positive innovation variance");
    A = RF / Q;
    const double innovation = y - F.dot(m);
    m.noalias() += A * innovation;
    // Joseph form keeps C positive semidefinite.
    Eigen::MatrixXd IKF = Eigen::MatrixXd::Identity(d, d) - A * F;
    C = IKF * R * IKF.transpose() + params.obs_variance * (A * A.transpose());
    C = 0.5 * (C + C.transpose());
    loglik += gaussian_log_density(y, y - innovation, Q);
  }
  return loglik;
}

}  // namespace

FilterResult kalman_filter(const SsmSpec& spec, const Eigen::VectorXd& ys,
                           const Eigen::MatrixXd& Fs, const SsmParams& params,
                           int t_begin, WarningLog* log) {
  const int d = spec.dim();
  const int n = static_cast<int>(ys.size());
  if (Fs.rows() != n || Fs.cols() != d)
    throw ValidationError("kalman_filter: design dimensions mismatch");
  if (!(params.obs_variance > 0))
    throw ValidationError("kalman_filter: observation variance must be > 0");
  spec.validate(t_begin, t_begin + n - 1);
  const Eigen::VectorXd w = resolve_w(spec, params);
  const auto sched = reinit_schedule(spec, t_begin, n);

  FilterResult out;
  out.t_begin = t_begin;
  out.m0 = spec.m0();
  out.C0 = spec.c0();
  check_psd(out.C0);
  out.steps.resize(n);

  Eigen::VectorXd m = out.m0;
  Eigen::MatrixXd C = out.C0;
  for (int i = 0; i < n; ++i) {
    FilterStep& step = out.steps[i];
    step.reinit = sched[i];
    Eigen::MatrixXd R = C;
    R.diagonal() += w;
    for (int j : step.reinit) {
      R.row(j).setZero();
      R.col(j).setZero();
      R(j, j) = spec.diffuse;
    }
    const double y = ys(i);
    const auto F = Fs.row(i);
    if (std::isnan(y) || F.hasNaN()) {
      step.m = m;
      step.C = R;
      step.R = std::move(R);
      C = step.C;
      continue;
    }
    const Eigen::VectorXd RF = R * F.transpose();
    const double Q = F.dot(RF) + params.obs_variance;
    if (!(Q > 0)) throw NumericalError("non-positive innovation variance");
    const Eigen::VectorXd A = RF / Q;
    const double predicted = F.dot(m);
    step.m = m + A * (y - predicted);
    const Eigen::MatrixXd IKF = Eigen::MatrixXd::Identity(d, d) - A * F;
    step.C = IKF * R * IKF.transpose() +
             params.obs_variance * (A * A.transpose());
    step.C = 0.5 * (step.C + step.C.transpose());
    step.R = std::move(R);
    step.Q = Q;
    step.loglik = gaussian_log_density(y, predicted, Q);
    step.updated = true;
    out.loglik += step.loglik;
    m = step.m;
    C = step.C;
  }
  (void)log;
  return out;
}

FilterResult kalman_filter(const SsmSpec& spec, const ModelFrame& frame,
                           const SsmParams& params, WarningLog* log) {
  return kalman_filter(spec, frame.response_values, frame.design, params,
                       frame.t_begin, log);
}

SmoothedResult kalman_smooth(const FilterResult& filtered, WarningLog* log) {
  const int n = static_cast<int>(filtered.steps.size());
  if (n == 0) throw ValidationError("kalman_smooth: empty filter output");
  SmoothedResult out;
  out.t_begin = filtered.t_begin;
  out.mean.resize(n);
  out.cov.resize(n);

  auto clamp_psd = [](Eigen::MatrixXd m) {
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd vals = es.eigenvalues().cwiseMax(0.0);
    return Eigen::MatrixXd(es.eigenvectors() * vals.asDiagonal() *
                           es.eigenvectors().transpose());
  };

  out.mean[n - 1] = filtered.steps[n - 1].m;
  out.cov[n - 1] = clamp_psd(filtered.steps[n - 1].C);
  for (int i = n - 2; i >= 0; --i) {
    const FilterStep& step = filtered.steps[i];
    const FilterStep& next = filtered.steps[i + 1];
    const Eigen::MatrixXd Rinv = sym_pinv(next.R, "predicted covariance", log);
    // Coefficients reinitialized at i+1 carry no dependence backward.
    Eigen::MatrixXd Cm = step.C;
    for (int j : next.reinit) Cm.col(j).setZero();
    const Eigen::MatrixXd J = Cm * Rinv;
    out.mean[i] = step.m + J * (out.mean[i + 1] - step.m);
    out.cov[i] =
        clamp_psd(step.C - J * (next.R - out.cov[i + 1]) * J.transpose());
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct NmResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  int evals = 0;
  bool converged = false;
};

NmResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& fn,
                     const Eigen::VectorXd& x0, double step, int budget,
                     double tol) {
  const int n = static_cast<int>(x0.size());
  NmResult res;
  std::vector<Eigen::VectorXd> xs(n + 1, x0);
  std::vector<double> fs(n + 1);
  for (int i = 1; i <= n; ++i) xs[i](i - 1) += step;
  for (int i = 0; i <= n; ++i) {
    fs[i] = fn(xs[i]);
    ++res.evals;
  }
  std::vector<int> order(n + 1);
  auto sort_simplex = [&] {
    for (int i = 0; i <= n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return fs[a] < fs[b]; });
  };
  while (res.evals < budget) {
    sort_simplex();
    const int best = order[0], worst = order[n], second = order[n - 1];
    if (fs[worst] - fs[best] <= tol * (std::abs(fs[best]) + tol)) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (int i = 0; i <= n; ++i)
      if (i != worst) centroid += xs[i];
    centroid /= n;
    const Eigen::VectorXd xr = centroid + (centroid - xs[worst]);
    const double fr = fn(xr);
    ++res.evals;
    if (fr < fs[best]) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - xs[worst]);
      const double fe = fn(xe);
      ++res.evals;
      if (fe < fr) {
        xs[worst] = xe;
        fs[worst] = fe;
      } else {
        xs[worst] = xr;
        fs[worst] = fr;
      }
    } else if (fr < fs[second]) {
      xs[worst] = xr;
      fs[worst] = fr;
    } else {
      const Eigen::VectorXd xc = centroid + 0.5 * (xs[worst] - centroid);
      const double fc = fn(xc);
      ++res.evals;
      if (fc < fs[worst]) {
        xs[worst] = xc;
        fs[worst] = fc;
      } else {
        for (int i = 0; i <= n; ++i) {
          if (i == best) continue;
          xs[i] = xs[best] + 0.5 * (xs[i] - xs[best]);
          fs[i] = fn(xs[i]);
          ++res.evals;
          if (res.evals >= budget) break;
        }
      }
    }
  }
  sort_simplex();
  res.x = xs[order[0]];
  res.f = fs[order[0]];
  return res;
}

double ols_residual_variance(const ModelFrame& frame) {
  const int n = frame.usable_count;
  const int d = frame.dim();
  Eigen::MatrixXd X(n, d);
  Eigen::VectorXd y(n);
  int r = 0;
  for (int i = 0; i < frame.rows(); ++i) {
    if (!frame.usable[i]) continue;
    X.row(r) = frame.design.row(i);
    y(r) = frame.response_values(i);
    ++r;
  }
  double var_y = 0.0;
  const double mean_y = y.mean();
  for (int i = 0; i < n; ++i) var_y += (y(i) - mean_y) * (y(i) - mean_y);
  var_y /= std::max(1, n - 1);
  if (n <= d) return std::max(var_y, 1e-12);
  const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(y);
  const double rss = (y - X * beta).squaredNorm();
  const double s2 = rss / (n - d);
  if (!std::isfinite(s2) || s2 <= 0.0) return std::max(var_y, 1e-12);
  return s2;
}

}  // namespace

double FittedSsm::coefficient(int t, int col) const {
  if (t < t_begin || t > t_end())
    throw ValidationError("fitted ssm: t outside the modeled range");
  return smoothed_mean[t - t_begin](col);
}

double FittedSsm::standard_error(int t, int col) const {
  if (t < t_begin || t > t_end())
    throw ValidationError("fitted ssm: t outside the modeled range");
  return std::sqrt(std::max(0.0, smoothed_cov[t - t_begin](col, col)));
}

std::vector<std::pair<int, int>> FittedSsm::segments(int col) const {
  const auto& cps = spec.regimes[col].change_points;
  std::vector<std::pair<int, int>> out;
  int start = t_begin;
  for (int cp : cps) {
    out.emplace_back(start, cp - 1);
    start = cp;
  }
  out.emplace_back(start, t_end());
  return out;
}

nlohmann::json FittedSsm::to_json() const {
  nlohmann::json j;
  j["spec"] = spec.to_json();
  j["t_begin"] = t_begin;
  j["obs_variance"] = obs_variance;
  j["state_variances"] =
      std::vector<double>(state_variances.begin(), state_variances.end());
  j["loglik"] = loglik;
  j["converged"] = converged;
  j["evaluations"] = evaluations;
  j["updated"] = updated;
  j["warnings"] = warnings;
  nlohmann::json means = nlohmann::json::array();
  nlohmann::json covs = nlohmann::json::array();
  for (int i = 0; i < rows(); ++i) {
    means.push_back(std::vector<double>(smoothed_mean[i].begin(),
                                        smoothed_mean[i].end()));
    nlohmann::json cov = nlohmann::json::array();
    for (int r = 0; r < smoothed_cov[i].rows(); ++r)
      cov.push_back(std::vector<double>(smoothed_cov[i].row(r).begin(),
                                        smoothed_cov[i].row(r).end()));
    covs.push_back(cov);
  }
  j["smoothed_mean"] = means;
  j["smoothed_cov"] = covs;
  return j;
}

FittedSsm FittedSsm::from_json(const nlohmann::json& j) {
  FittedSsm fit;
  fit.spec = SsmSpec::from_json(j.at("spec"));
  fit.t_begin = j.at("t_begin").get<int>();
  fit.obs_variance = j.at("obs_variance").get<double>();
  const auto& wv = j.at("state_variances");
  fit.state_variances.resize(wv.size());
  for (std::size_t i = 0; i < wv.size(); ++i) fit.state_variances(i) = wv[i];
  fit.loglik = j.at("loglik").get<double>();
  fit.converged = j.at("converged").get<bool>();
  fit.evaluations = j.value("evaluations", 0);
  fit.updated = j.at("updated").get<std::vector<bool>>();
  fit.warnings = j.value("warnings", WarningLog{});
  const auto& means = j.at("smoothed_mean");
  const auto& covs = j.at("smoothed_cov");
  for (std::size_t i = 0; i < means.size(); ++i) {
    Eigen::VectorXd m(means[i].size());
    for (std::size_t k = 0; k < means[i].size(); ++k) m(k) = means[i][k];
    fit.smoothed_mean.push_back(std::move(m));
    const auto& cj = covs[i];
    Eigen::MatrixXd c(cj.size(), cj.empty() ? 0 : cj[0].size());
    for (std::size_t r = 0; r < cj.size(); ++r)
      for (std::size_t k = 0; k < cj[r].size(); ++k) c(r, k) = cj[r][k];
    fit.smoothed_cov.push_back(std::move(c));
  }
  return fit;
}

FittedSsm fit_mle(const SsmSpec& spec, const ModelFrame& frame,
                  const FitOptions& opts, WarningLog* log) {
  spec.validate(frame.t_begin, frame.t_end());
  if (spec.dim() != frame.dim())
    throw ValidationError("fit_mle: spec and frame dimensions differ");
  std::vector<int> free_w;
  for (int j = 0; j < spec.dim(); ++j)
    if (spec.regimes[j].kind == RegimeKind::kRandomWalk) free_w.push_back(j);
  const int n_free = 1 + static_cast<int>(free_w.size());
  if (frame.usable_count < 10 * n_free)
    throw ValidationError(
        "fit_mle: need at least 10 usable rows per free hyperparameter (have " +
        std::to_string(frame.usable_count) + ", need " +
        std::to_string(10 * n_free) + ")");
  {
    std::vector<double> ys;
    for (int i = 0; i < frame.rows(); ++i)
      if (frame.usable[i]) ys.push_back(frame.response_values(i));
    if (variance_of(ys) == 0.0)
      throw NumericalError("fit_mle: degenerate data (constant response)");
  }

  const double s2 = ols_residual_variance(frame);
  const double base_v = std::log(s2);
  const double base_w = std::log(s2 / std::max(1, frame.usable_count));

  auto objective = [&](const Eigen::VectorXd& theta) {
    SsmParams params;
    params.obs_variance = std::exp(std::clamp(theta(0), -40.0, 40.0));
    params.state_variances = Eigen::VectorXd::Zero(spec.dim());
    for (std::size_t k = 0; k < free_w.size(); ++k)
      params.state_variances(free_w[k]) =
          std::exp(std::clamp(theta(1 + static_cast<int>(k)), -46.0, 40.0));
    double ll;
    try {
      ll = filter_loglik(spec, frame.response_values, frame.design, params,
                         frame.t_begin);
    } catch (const NumericalError&) {
      return 1e300;
    }
    return std::isfinite(ll) ? -ll : 1e300;
  };

  NmResult best;
  int total_evals = 0;
  for (int s = 0; s < std::max(3, opts.starts); ++s) {
    // Deterministic start ladder: 0, +1, -1, +2, -2, ... in log space.
    const int mag = (s + 1) / 2;
    const double off = (s % 2 == 1) ? mag : -mag;
    Eigen::VectorXd x0(n_free);
    x0(0) = base_v + off;
    for (int k = 1; k < n_free; ++k) x0(k) = base_w + 2.0 * off;
    NmResult run = nelder_mead(objective, x0, 0.7, opts.budget, opts.tol);
    total_evals += run.evals;
    if (run.f < best.f) best = run;
  }

  FittedSsm fit;
  fit.spec = spec;
  fit.t_begin = frame.t_begin;
  fit.converged = best.converged;
  fit.evaluations = total_evals;
  if (!best.converged)
    warn(&fit.warnings, "optimizer budget exhausted; returning best point");
  SsmParams params;
  params.obs_variance = std::exp(std::clamp(best.x(0), -40.0, 40.0));
  params.state_variances = Eigen::VectorXd::Zero(spec.dim());
  for (std::size_t k = 0; k < free_w.size(); ++k)
    params.state_variances(free_w[k]) =
        std::exp(std::clamp(best.x(1 + static_cast<int>(k)), -46.0, 40.0));
  fit.obs_variance = params.obs_variance;
  fit.state_variances = params.state_variances;

  const FilterResult filtered = kalman_filter(spec, frame, params, &fit.warnings);
  fit.loglik = filtered.loglik;
  SmoothedResult smoothed = kalman_smooth(filtered, &fit.warnings);
  fit.smoothed_mean = std::move(smoothed.mean);
  fit.smoothed_cov = std::move(smoothed.cov);
  fit.updated.reserve(filtered.steps.size());
  for (const auto& step : filtered.steps) fit.updated.push_back(step.updated);
  if (log)
    for (const auto& w : fit.warnings) warn(log, w);
  return fit;
}

FittedSsm fit_mle(const SsmSpec& spec, const Series& series,
                  const FitOptions& opts, WarningLog* log) {
  return fit_mle(spec,
                 build_model_frame(series, spec.columns, spec.response,
                                   spec.response_col),
                 opts, log);
}

// ---------------------------------------------------------------------------

namespace {

// Profile Gaussian BIC of the regression in which the target column's
// coefficient is constant within each segment and every other coefficient
// is constant throughout. Assembled from prefix sums so each candidate
// placement costs one small solve.
class SegmentScanner {
 public:
  SegmentScanner(const ModelFrame& frame, int target) : target_(target) {
    const int d = frame.dim();
    for (int i = 0; i < frame.rows(); ++i) {
      if (!frame.usable[i]) continue;
      times_.push_back(frame.t_begin + i);
      Eigen::VectorXd row = frame.design.row(i);
      a_.push_back(row(target));
      Eigen::VectorXd other(d - 1);
      int c = 0;
      for (int j = 0; j < d; ++j)
        if (j != target) other(c++) = row(j);
      xs_.push_back(std::move(other));
      ys_.push_back(frame.response_values(i));
    }
    const int n = static_cast<int>(times_.size());
    const int p = d - 1;
    sxx_ = Eigen::MatrixXd::Zero(p, p);
    sxy_ = Eigen::VectorXd::Zero(p);
    syy_ = 0.0;
    cum_xa_.assign(n + 1, Eigen::VectorXd::Zero(p));
    cum_aa_.assign(n + 1, 0.0);
    cum_ay_.assign(n + 1, 0.0);
    for (int i = 0; i < n; ++i) {
      sxx_.noalias() += xs_[i] * xs_[i].transpose();
      sxy_.noalias() += ys_[i] * xs_[i];
      syy_ += ys_[i] * ys_[i];
      cum_xa_[i + 1] = cum_xa_[i] + a_[i] * xs_[i];
      cum_aa_[i + 1] = cum_aa_[i] + a_[i] * a_[i];
      cum_ay_[i + 1] = cum_ay_[i] + a_[i] * ys_[i];
    }
  }

  int usable() const { return static_cast<int>(times_.size()); }

  // BIC for segment boundaries given as times (first index of each new
  // segment).
  double bic(const std::vector<int>& points, double per_point_params) const {
    const int n = usable();
    const int p = static_cast<int>(sxx_.rows());
    const int S = static_cast<int>(points.size()) + 1;
    std::vector<int> cut(S + 1);
    cut[0] = 0;
    for (int s = 0; s < static_cast<int>(points.size()); ++s)
      cut[s + 1] = static_cast<int>(
          std::lower_bound(times_.begin(), times_.end(), points[s]) -
          times_.begin());
    cut[S] = n;
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(p + S, p + S);
    Eigen::VectorXd rhs(p + S);
    M.topLeftCorner(p, p) = sxx_;
    rhs.head(p) = sxy_;
    for (int s = 0; s < S; ++s) {
      const Eigen::VectorXd xa = cum_xa_[cut[s + 1]] - cum_xa_[cut[s]];
      M.block(0, p + s, p, 1) = xa;
      M.block(p + s, 0, 1, p) = xa.transpose();
      M(p + s, p + s) = cum_aa_[cut[s + 1]] - cum_aa_[cut[s]];
      rhs(p + s) = cum_ay_[cut[s + 1]] - cum_ay_[cut[s]];
    }
    const Eigen::VectorXd sol = M.ldlt().solve(rhs);
    double rss = syy_ - sol.dot(rhs);
    rss = std::max(rss, 1e-12);
    const double ll =
        -0.5 * n *
        (std::log(2.0 * 3.14159265358979323846 * rss / n) + 1.0);
    const double k = (p + 1) + 1 +
                     per_point_params * static_cast<double>(points.size());
    return -2.0 * ll + k * std::log(static_cast<double>(n));
  }

 private:
  int target_;
  std::vector<int> times_;
  std::vector<Eigen::VectorXd> xs_;
  std::vector<double> a_, ys_;
  Eigen::MatrixXd sxx_;
  Eigen::VectorXd sxy_;
  double syy_ = 0.0;
  std::vector<Eigen::VectorXd> cum_xa_;
  std::vector<double> cum_aa_, cum_ay_;
};

void enumerate_placements(const std::vector<int>& candidates, int max_points,
                          int min_segment,
                          std::vector<std::vector<int>>* out) {
  out->push_back({});
  std::vector<int> current;
  std::function<void(std::size_t, int)> rec = [&](std::size_t from, int left) {
    if (left == 0) return;
    for (std::size_t i = from; i < candidates.size(); ++i) {
      if (!current.empty() && candidates[i] - current.back() < min_segment)
        continue;
      current.push_back(candidates[i]);
      out->push_back(current);
      rec(i + 1, left - 1);
      current.pop_back();
    }
  };
  rec(0, max_points);
  // Canonical order: fewer points first, then lexicographic positions.
  std::stable_sort(out->begin(), out->end(),
                   [](const std::vector<int>& a, const std::vector<int>& b) {
                     if (a.size() != b.size()) return a.size() < b.size();
                     return a < b;
                   });
}

}  // namespace

ChangePointResult infer_change_points(const SsmSpec& spec,
                                      const ModelFrame& frame,
                                      const std::string& coefficient,
                                      const ChangePointOptions& opts,
                                      WarningLog* log) {
  const int target = spec.column_index(coefficient);
  if (target < 0)
    throw ValidationError("infer_change_points: unknown coefficient '" +
                          coefficient + "'");
  if (spec.regimes[target].kind != RegimeKind::kPeriodicStable)
    throw ValidationError("infer_change_points: coefficient '" + coefficient +
                          "' is not declared periodic-stable");
  if (opts.max_points < 0 || opts.max_points > 3)
    throw ValidationError("infer_change_points: max points must be in 0..3");
  if (opts.grid_stride < 1 || opts.min_segment < 2)
    throw ValidationError("infer_change_points: bad grid settings");

  const int t_begin = frame.t_begin;
  const int t_end = frame.t_end();
  std::vector<int> candidates;
  for (int tau = t_begin + opts.min_segment;
       tau <= t_end - opts.min_segment + 1; tau += opts.grid_stride)
    candidates.push_back(tau);
  if (opts.max_points > 0 && candidates.empty())
    throw ValidationError(
        "infer_change_points: series too short for the minimum segment length");

  SegmentScanner scanner(frame, target);
  if (scanner.usable() < 2 * frame.dim())
    throw ValidationError("infer_change_points: too few usable rows");

  std::vector<std::vector<int>> placements;
  enumerate_placements(candidates, opts.max_points, opts.min_segment,
                       &placements);

  ChangePointResult res;
  double best_bic = std::numeric_limits<double>::infinity();
  for (const auto& placement : placements) {
    const double bic = scanner.bic(placement, opts.per_point_params);
    res.scan.push_back({placement, bic});
    // Placements are visited fewest-first then lexicographic, so requiring
    // strict improvement implements the tie-break.
    if (bic < best_bic - 1e-9) {
      best_bic = bic;
      res.change_points = placement;
    }
  }
  res.bic = best_bic;

  SsmSpec refit_spec = spec;
  refit_spec.regimes[target].change_points = res.change_points;
  res.fitted = fit_mle(refit_spec, frame, opts.fit, log);
  res.segments = res.fitted.segments(target);
  for (const auto& [a, b] : res.segments) {
    res.segment_estimates.push_back(res.fitted.coefficient(b, target));
    res.segment_ses.push_back(res.fitted.standard_error(b, target));
  }
  return res;
}

ChangePointResult infer_change_points(const SsmSpec& spec, const Series& series,
                                      const std::string& coefficient,
                                      const ChangePointOptions& opts,
                                      WarningLog* log) {
  return infer_change_points(
      spec,
      build_model_frame(series, spec.columns, spec.response, spec.response_col),
      coefficient, opts, log);
}

// ---------------------------------------------------------------------------

namespace {

void require_layout(const std::vector<DesignColumn>& columns,
                    const std::vector<std::pair<VarRole, int>>& wanted,
                    const char* what) {
  // wanted: (role, lag) groups after the intercept, each expanded over the
  // role's column count in order.
  bool ok = !columns.empty() && columns[0].intercept;
  std::size_t i = 1;
  for (const auto& [role, lag] : wanted) {
    int expect_col = 0;
    bool any = false;
    while (i < columns.size() && !columns[i].intercept &&
           columns[i].ref.role == role && columns[i].ref.lag == lag) {
      if (columns[i].column != expect_col) ok = false;
      ++expect_col;
      ++i;
      any = true;
    }
    if (!any) ok = false;
  }
  if (i != columns.size()) ok = false;
  if (!ok)
    throw ValidationError(std::string("estimand frame requires the standard "
                                      "lag-1 design layout for the ") +
                          what + " model");
}

}  // namespace

CoefficientFrame make_coefficient_frame(
    const FittedSsm& outcome, const std::vector<FittedSsm>& covariates) {
  if (outcome.spec.response != VarRole::kOutcome)
    throw ValidationError("make_coefficient_frame: first fit must be the outcome model");
  require_layout(outcome.spec.columns,
                 {{VarRole::kOutcome, 1},
                  {VarRole::kExposure, 0},
                  {VarRole::kExposure, 1},
                  {VarRole::kCovariate, 1}},
                 "outcome");
  int dA = 0, dC = 0;
  for (const auto& col : outcome.spec.columns) {
    if (col.intercept) continue;
    if (col.ref.role == VarRole::kExposure && col.ref.lag == 0) ++dA;
    if (col.ref.role == VarRole::kCovariate) ++dC;
  }
  if (static_cast<int>(covariates.size()) != dC)
    throw ValidationError(
        "make_coefficient_frame: one fitted model per covariate required");

  int t_lo = outcome.t_begin, t_hi = outcome.t_end();
  for (int i = 0; i < dC; ++i) {
    const FittedSsm& fit = covariates[i];
    if (fit.spec.response != VarRole::kCovariate || fit.spec.response_col != i)
      throw ValidationError(
          "make_coefficient_frame: covariate fits must map onto covariate "
          "columns in order");
    require_layout(fit.spec.columns,
                   {{VarRole::kCovariate, 1},
                    {VarRole::kExposure, 0},
                    {VarRole::kOutcome, 0}},
                   "covariate");
    t_lo = std::max(t_lo, fit.t_begin);
    t_hi = std::min(t_hi, fit.t_end());
  }
  if (t_lo > t_hi)
    throw ValidationError("make_coefficient_frame: fits share no time range");

  CoefficientFrame frame;
  frame.t_begin = t_lo;
  frame.n_exposures = dA;
  frame.n_covariates = dC;
  const int n = t_hi - t_lo + 1;
  frame.outcome_coef.reserve(n);
  frame.outcome_cov.reserve(n);
  for (int t = t_lo; t <= t_hi; ++t) {
    frame.outcome_coef.push_back(outcome.smoothed_mean[t - outcome.t_begin]);
    frame.outcome_cov.push_back(outcome.smoothed_cov[t - outcome.t_begin]);
  }
  frame.covariate_coef.resize(dC);
  frame.covariate_cov.resize(dC);
  for (int i = 0; i < dC; ++i) {
    frame.covariate_coef[i].reserve(n);
    frame.covariate_cov[i].reserve(n);
    for (int t = t_lo; t <= t_hi; ++t) {
      frame.covariate_coef[i].push_back(
          covariates[i].smoothed_mean[t - covariates[i].t_begin]);
      frame.covariate_cov[i].push_back(
          covariates[i].smoothed_cov[t - covariates[i].t_begin]);
    }
  }
  frame.validate();
  return frame;
}

}  // namespace nof1
