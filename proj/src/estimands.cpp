#include "nof1/estimands.hpp"

#include <cmath>
#include <ostream>

#include <nlohmann/json.hpp>

#include "nof1/rng.hpp"
#include "nof1/stats.hpp"

namespace nof1 {

namespace {
// Stream tag separating interval resampling from other RNG consumers.
constexpr std::uint64_t kIntervalStream = 11;
}  // namespace

Eigen::MatrixXd CoefficientFrame::pc(int t) const {
  Eigen::MatrixXd out(n_covariates, n_covariates);
  for (int i = 0; i < n_covariates; ++i)
    out.row(i) = cc(t, i).segment(idx_pc(0), n_covariates).transpose();
  return out;
}

Eigen::MatrixXd CoefficientFrame::m1(int t) const {
  Eigen::MatrixXd out(n_covariates, n_exposures);
  for (int i = 0; i < n_covariates; ++i)
    out.row(i) = cc(t, i).segment(idx_mu1(0), n_exposures).transpose();
  return out;
}

Eigen::VectorXd CoefficientFrame::mu2_vec(int t) const {
  Eigen::VectorXd out(n_covariates);
  for (int i = 0; i < n_covariates; ++i) out(i) = cc(t, i)(idx_mu2());
  return out;
}

const Eigen::VectorXd& CoefficientFrame::oc(int t) const {
  if (!in_range(t))
    throw ValidationError("coefficient frame: t=" + std::to_string(t) +
                          " outside " + std::to_string(t_begin) + ".." +
                          std::to_string(t_end()));
  return outcome_coef[t - t_begin];
}

const Eigen::VectorXd& CoefficientFrame::cc(int t, int i) const {
  if (!in_range(t))
    throw ValidationError("coefficient frame: t=" + std::to_string(t) +
                          " outside " + std::to_string(t_begin) + ".." +
                          std::to_string(t_end()));
  if (i < 0 || i >= n_covariates)
    throw ValidationError("coefficient frame: covariate index out of range");
  return covariate_coef[i][t - t_begin];
}

void CoefficientFrame::validate() const {
  if (n_exposures < 1) throw ValidationError("coefficient frame: no exposures");
  if (outcome_coef.empty()) throw ValidationError("coefficient frame: empty");
  for (const auto& v : outcome_coef)
    if (v.size() != outcome_dim())
      throw ValidationError("coefficient frame: outcome width mismatch");
  if (static_cast<int>(covariate_coef.size()) != n_covariates)
    throw ValidationError("coefficient frame: covariate model count mismatch");
  for (const auto& model : covariate_coef) {
    if (model.size() != outcome_coef.size())
      throw ValidationError(
          "coefficient frame: outcome and covariate time ranges differ");
    for (const auto& v : model)
      if (v.size() != covariate_dim())
        throw ValidationError("coefficient frame: covariate width mismatch");
  }
  if (!outcome_cov.empty() && outcome_cov.size() != outcome_coef.size())
    throw ValidationError("coefficient frame: covariance range mismatch");
  if (!covariate_cov.empty() &&
      static_cast<int>(covariate_cov.size()) != n_covariates)
    throw ValidationError("coefficient frame: covariance model count mismatch");
}

CoefficientFrame CoefficientFrame::constant(
    int t_begin, int t_end, const Eigen::VectorXd& outcome,
    const std::vector<Eigen::VectorXd>& covariates, int n_exposures) {
  CoefficientFrame f;
  f.t_begin = t_begin;
  f.n_exposures = n_exposures;
  f.n_covariates = static_cast<int>(covariates.size());
  const int n = t_end - t_begin + 1;
  if (n < 1) throw ValidationError("coefficient frame: empty time range");
  f.outcome_coef.assign(n, outcome);
  f.covariate_coef.resize(f.n_covariates);
  for (int i = 0; i < f.n_covariates; ++i)
    f.covariate_coef[i].assign(n, covariates[i]);
  f.validate();
  return f;
}

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.begin(), v.end());
}

Eigen::VectorXd vec_from_json(const nlohmann::json& j) {
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v(i) = j[i];
  return v;
}

}  // namespace

nlohmann::json CoefficientFrame::to_json() const {
  nlohmann::json j;
  j["t_begin"] = t_begin;
  j["n_exposures"] = n_exposures;
  j["n_covariates"] = n_covariates;
  nlohmann::json oc = nlohmann::json::array();
  for (const auto& v : outcome_coef) oc.push_back(vec_json(v));
  j["outcome"] = oc;
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& model : covariate_coef) {
    nlohmann::json cj = nlohmann::json::array();
    for (const auto& v : model) cj.push_back(vec_json(v));
    cs.push_back(cj);
  }
  j["covariates"] = cs;
  return j;
}

CoefficientFrame CoefficientFrame::from_json(const nlohmann::json& j) {
  CoefficientFrame f;
  f.t_begin = j.at("t_begin").get<int>();
  f.n_exposures = j.at("n_exposures").get<int>();
  f.n_covariates = j.at("n_covariates").get<int>();
  for (const auto& v : j.at("outcome")) f.outcome_coef.push_back(vec_from_json(v));
  for (const auto& model : j.at("covariates")) {
    std::vector<Eigen::VectorXd> coefs;
    for (const auto& v : model) coefs.push_back(vec_from_json(v));
    f.covariate_coef.push_back(std::move(coefs));
  }
  f.validate();
  return f;
}

int active_count(const Strategy& s) {
  int n = 0;
  for (double v : s)
    if (v != 0.0) ++n;
  return n;
}

std::string strategy_string(const Strategy& s) {
  std::string out;
  for (double v : s) out += (v != 0.0) ? '1' : '0';
  return out;
}

void validate_binary_strategy(const Strategy& s) {
  if (s.empty()) throw ValidationError("strategy: empty");
  for (double v : s)
    if (v != 0.0 && v != 1.0)
      throw ValidationError("strategy: entries must be 0 or 1");
}

double propagate_linear_system(const CoefficientFrame& frame, int t,
                               const Strategy& pulse, int exposure) {
  if (pulse.empty()) throw ValidationError("propagate: empty pulse");
  if (exposure < 0 || exposure >= frame.n_exposures)
    throw ValidationError("propagate: exposure column out of range");
  const int q = static_cast<int>(pulse.size()) - 1;
  if (!frame.in_range(t) || !frame.in_range(t - q))
    throw ValidationError("propagate: window " + std::to_string(t - q) + ".." +
                          std::to_string(t) + " outside frame range");
  const int dC = frame.n_covariates;
  double dY = 0.0;
  Eigen::VectorXd dc = Eigen::VectorXd::Zero(dC);
  double pulse_prev = 0.0;  // exposure delta at s-1
  for (int s = t - q; s <= t; ++s) {
    const double pulse_s = pulse[s - (t - q)];
    double y = frame.rho(s) * dY + frame.beta1(s, exposure) * pulse_s +
               frame.beta2(s, exposure) * pulse_prev;
    if (dC > 0) y += frame.betac(s).dot(dc);
    if (dC > 0 && s < t) {
      Eigen::VectorXd next(dC);
      for (int i = 0; i < dC; ++i) {
        const auto& ci = frame.cc(s, i);
        double v = ci.segment(frame.idx_pc(0), dC).dot(dc) +
                   ci(frame.idx_mu1(exposure)) * pulse_s +
                   ci(frame.idx_mu2()) * y;
        next(i) = v;
      }
      dc = std::move(next);
    }
    dY = y;
    pulse_prev = pulse_s;
  }
  return dY;
}

namespace closed_form {

double ce(const CoefficientFrame& frame, int t, int exposure) {
  return frame.beta1(t, exposure);
}

double lde1(const CoefficientFrame& frame, int t, int exposure) {
  return frame.beta2(t, exposure);
}

double le1(const CoefficientFrame& frame, int t, int exposure) {
  const Eigen::VectorXd bc = frame.betac(t);
  double out = frame.beta2(t, exposure);
  if (frame.n_covariates > 0) {
    out += bc.dot(frame.m1(t - 1).col(exposure));
    out += bc.dot(frame.mu2_vec(t - 1)) * frame.beta1(t - 1, exposure);
  }
  out += frame.rho(t) * frame.beta1(t - 1, exposure);
  return out;
}

double le2(const CoefficientFrame& frame, int t, int exposure) {
  const int dC = frame.n_covariates;
  const Eigen::VectorXd bc_t =
      dC > 0 ? frame.betac(t) : Eigen::VectorXd::Zero(0);
  const Eigen::VectorXd bc_t1 =
      dC > 0 ? frame.betac(t - 1) : Eigen::VectorXd::Zero(0);
  const double g =
      frame.rho(t) + (dC > 0 ? bc_t.dot(frame.mu2_vec(t - 1)) : 0.0);
  double out = g * frame.beta2(t - 1, exposure);
  out += g * frame.rho(t - 1) * frame.beta1(t - 2, exposure);
  if (dC > 0) {
    // Row vector carried through the covariate chain C_{t-2} -> C_{t-1} -> Y_t
    // plus the one-step path C_{t-2} -> Y_{t-1} -> Y_t.
    const Eigen::RowVectorXd chain =
        bc_t.transpose() * frame.pc(t - 1) + g * bc_t1.transpose();
    out += chain.dot(frame.m1(t - 2).col(exposure));
    out += chain.dot(frame.mu2_vec(t - 2)) * frame.beta1(t - 2, exposure);
  }
  return out;
}

double te1(const CoefficientFrame& frame, int t, int exposure) {
  return ce(frame, t, exposure) + le1(frame, t, exposure);
}

double te2(const CoefficientFrame& frame, int t, int exposure) {
  return ce(frame, t, exposure) + le1(frame, t, exposure) +
         le2(frame, t, exposure);
}

}  // namespace closed_form

double contemporaneous_effect(const CoefficientFrame& frame, int t,
                              int exposure) {
  if (!frame.in_range(t))
    throw ValidationError("contemporaneous_effect: t outside frame range");
  return closed_form::ce(frame, t, exposure);
}

double lag_structural_direct_effect(const CoefficientFrame& frame, int t, int q,
                                    int exposure) {
  if (q < 1) throw ValidationError("lag_structural_direct_effect: q must be >= 1");
  if (!frame.in_range(t))
    throw ValidationError("lag_structural_direct_effect: t outside frame range");
  return q == 1 ? closed_form::lde1(frame, t, exposure) : 0.0;
}

double lag_effect(const CoefficientFrame& frame, int t, int q, int exposure) {
  if (q < 1) throw ValidationError("lag_effect: q must be >= 1");
  if (!frame.in_range(t) || !frame.in_range(t - q))
    throw ValidationError("lag_effect: window outside frame range");
  if (q == 1) return closed_form::le1(frame, t, exposure);
  if (q == 2) return closed_form::le2(frame, t, exposure);
  Strategy pulse(q + 1, 0.0);
  pulse[0] = 1.0;
  return propagate_linear_system(frame, t, pulse, exposure);
}

double total_effect(const CoefficientFrame& frame, int t, int q, int exposure) {
  if (q < 0) throw ValidationError("total_effect: q must be >= 0");
  return propagate_linear_system(frame, t, Strategy(q + 1, 1.0), exposure);
}

double general_effect(const CoefficientFrame& frame, int t,
                      const Strategy& strategy, int exposure) {
  validate_binary_strategy(strategy);
  return propagate_linear_system(frame, t, strategy, exposure);
}

double cumulative_direct_effect(const CoefficientFrame& frame, int t,
                                int exposure) {
  if (!frame.in_range(t) || !frame.in_range(t + 1))
    throw ValidationError("cumulative_direct_effect: needs t and t+1 in frame");
  return frame.beta1(t, exposure) + frame.beta2(t + 1, exposure);
}

CumOeResult cumulative_overall_effect(const CoefficientFrame& frame, int t,
                                      int horizon, int exposure,
                                      double tolerance) {
  if (horizon < 1)
    throw ValidationError("cumulative_overall_effect: horizon must be >= 1");
  if (!frame.in_range(t) || !frame.in_range(t + horizon))
    throw ValidationError("cumulative_overall_effect: horizon exceeds frame range");
  CumOeResult res;
  res.value = contemporaneous_effect(frame, t, exposure);
  res.truncated_at = 0;
  for (int q = 1; q <= horizon; ++q) {
    const double term = lag_effect(frame, t + q, q, exposure);
    if (std::abs(term) < tolerance) break;
    res.value += term;
    res.truncated_at = q;
  }
  return res;
}

// ---------------------------------------------------------------------------

namespace {

// Symmetric matrix square root with eigenvalue clamping; returns L with
// L L' = max(cov, 0) in the PSD sense.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& cov, const char* what,
                         WarningLog* log) {
  if (cov.size() == 0) return cov;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      0.5 * (cov + cov.transpose()));
  Eigen::VectorXd vals = es.eigenvalues();
  const double scale = std::max(vals.cwiseAbs().maxCoeff(), 1e-300);
  bool clamped = false;
  for (int i = 0; i < vals.size(); ++i) {
    if (vals(i) < -1e-8 * scale) clamped = true;
    if (vals(i) < 0.0) vals(i) = 0.0;
  }
  if (clamped)
    warn(log, std::string("regularized non-PSD sampling covariance (") + what +
                  ")");
  return es.eigenvectors() * vals.cwiseSqrt().asDiagonal();
}

Eigen::VectorXd standard_normals(Rng& rng, int n) {
  Eigen::VectorXd z(n);
  for (int i = 0; i < n; ++i) z(i) = rng.normal();
  return z;
}

}  // namespace

WindowSampler::WindowSampler(const CoefficientFrame& frame, int t_lo, int t_hi,
                             WarningLog* log)
    : base_(&frame), work_(frame), t_lo_(t_lo), t_hi_(t_hi) {
  if (t_lo < frame.t_begin || t_hi > frame.t_end() || t_lo > t_hi)
    throw ValidationError("interval: resampling window outside frame range");
  const int n = t_hi - t_lo + 1;
  if (!frame.has_uncertainty()) return;
  outcome_sqrt_.reserve(n);
  for (int t = t_lo; t <= t_hi; ++t)
    outcome_sqrt_.push_back(
        psd_sqrt(frame.outcome_cov[t - frame.t_begin], "outcome model", log));
  covariate_sqrt_.resize(frame.n_covariates);
  for (int i = 0; i < frame.n_covariates; ++i) {
    covariate_sqrt_[i].reserve(n);
    for (int t = t_lo; t <= t_hi; ++t)
      covariate_sqrt_[i].push_back(psd_sqrt(
          frame.covariate_cov[i][t - frame.t_begin], "covariate model", log));
  }
}

const CoefficientFrame& WindowSampler::draw(std::uint64_t seed,
                                            std::uint64_t k) {
  if (outcome_sqrt_.empty()) return *base_;  // exact frame, nothing to draw
  Rng rng = Rng::stream(seed, kIntervalStream, k);
  for (int t = t_lo_; t <= t_hi_; ++t) {
    const int idx = t - base_->t_begin;
    const int w = t - t_lo_;
    work_.outcome_coef[idx] =
        base_->outcome_coef[idx] +
        outcome_sqrt_[w] * standard_normals(rng, base_->outcome_dim());
    for (int i = 0; i < base_->n_covariates; ++i)
      work_.covariate_coef[i][idx] =
          base_->covariate_coef[i][idx] +
          covariate_sqrt_[i][w] * standard_normals(rng, base_->covariate_dim());
  }
  return work_;
}

CoefficientFrame sample_frame(const CoefficientFrame& frame, int t_lo, int t_hi,
                              std::uint64_t seed, std::uint64_t draw,
                              WarningLog* log) {
  WindowSampler sampler(frame, t_lo, t_hi, log);
  return sampler.draw(seed, draw);
}

const char* estimand_kind_name(EstimandKind kind) {
  switch (kind) {
    case EstimandKind::kCe: return "CE";
    case EstimandKind::kLde: return "LDE";
    case EstimandKind::kLe: return "LE";
    case EstimandKind::kTe: return "TE";
    case EstimandKind::kGe: return "GE";
    case EstimandKind::kCumDe: return "cumDE";
    case EstimandKind::kCumOe: return "cumOE";
  }
  return "?";
}

std::string EstimandRequest::name() const {
  switch (kind) {
    case EstimandKind::kCe:
    case EstimandKind::kGe:
    case EstimandKind::kCumDe:
    case EstimandKind::kCumOe:
      return estimand_kind_name(kind);
    default:
      return std::string(estimand_kind_name(kind)) + std::to_string(q);
  }
}

void EstimandRequest::window(int t, int* t_lo, int* t_hi) const {
  switch (kind) {
    case EstimandKind::kCe:
    case EstimandKind::kLde:
      *t_lo = t;
      *t_hi = t;
      return;
    case EstimandKind::kLe:
    case EstimandKind::kTe:
      *t_lo = t - q;
      *t_hi = t;
      return;
    case EstimandKind::kGe:
      *t_lo = t - static_cast<int>(strategy.size()) + 1;
      *t_hi = t;
      return;
    case EstimandKind::kCumDe:
      *t_lo = t;
      *t_hi = t + 1;
      return;
    case EstimandKind::kCumOe:
      *t_lo = t;
      *t_hi = t + q;
      return;
  }
  throw ValidationError("estimand request: bad kind");
}

void EstimandRequest::validate() const {
  switch (kind) {
    case EstimandKind::kLde:
    case EstimandKind::kLe:
      if (q < 1) throw ValidationError("estimand request: q must be >= 1");
      break;
    case EstimandKind::kTe:
      if (q < 0) throw ValidationError("estimand request: q must be >= 0");
      break;
    case EstimandKind::kGe:
      validate_binary_strategy(strategy);
      break;
    case EstimandKind::kCumOe:
      if (q < 1) throw ValidationError("estimand request: horizon must be >= 1");
      break;
    default:
      break;
  }
}

double point_estimand(const CoefficientFrame& frame, const EstimandRequest& req,
                      int t) {
  req.validate();
  switch (req.kind) {
    case EstimandKind::kCe:
      return contemporaneous_effect(frame, t, req.exposure);
    case EstimandKind::kLde:
      return lag_structural_direct_effect(frame, t, req.q, req.exposure);
    case EstimandKind::kLe:
      return lag_effect(frame, t, req.q, req.exposure);
    case EstimandKind::kTe:
      return total_effect(frame, t, req.q, req.exposure);
    case EstimandKind::kGe:
      return general_effect(frame, t, req.strategy, req.exposure);
    case EstimandKind::kCumDe:
      return cumulative_direct_effect(frame, t, req.exposure);
    case EstimandKind::kCumOe:
      return cumulative_overall_effect(frame, t, req.q, req.exposure,
                                       req.tolerance)
          .value;
  }
  throw ValidationError("estimand request: bad kind");
}

EstimandPoint estimand_with_interval(const CoefficientFrame& frame,
                                     const EstimandRequest& req, int t,
                                     const IntervalConfig& cfg,
                                     WarningLog* log) {
  EstimandPoint pt;
  pt.t = t;
  pt.estimate = point_estimand(frame, req, t);
  if (!frame.has_uncertainty() || cfg.draws < 2) {
    pt.lower = pt.upper = pt.estimate;
    return pt;
  }
  int t_lo = 0, t_hi = 0;
  req.window(t, &t_lo, &t_hi);
  WindowSampler sampler(frame, t_lo, t_hi, log);
  std::vector<double> values(cfg.draws);
  for (int k = 0; k < cfg.draws; ++k)
    values[k] = point_estimand(sampler.draw(cfg.seed, k), req, t);
  const double a = (1.0 - cfg.level) / 2.0;
  pt.lower = sample_quantile(values, a);
  pt.upper = sample_quantile(std::move(values), 1.0 - a);
  return pt;
}

EstimandSeries estimand_series(const CoefficientFrame& frame,
                               const EstimandRequest& req,
                               const std::vector<int>& ts,
                               const IntervalConfig& cfg, WarningLog* log) {
  EstimandSeries series;
  series.name = req.name();
  series.request = req;
  series.points.reserve(ts.size());
  for (int t : ts)
    series.points.push_back(estimand_with_interval(frame, req, t, cfg, log));
  return series;
}

nlohmann::json EstimandSeries::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["kind"] = estimand_kind_name(request.kind);
  j["exposure"] = request.exposure;
  j["q"] = request.q;
  if (request.kind == EstimandKind::kGe)
    j["strategy"] = strategy_string(request.strategy);
  j["points"] = nlohmann::json::array();
  for (const auto& p : points)
    j["points"].push_back({{"t", p.t},
                           {"estimate", p.estimate},
                           {"lower", p.lower},
                           {"upper", p.upper}});
  return j;
}

void write_estimands_csv(const std::vector<EstimandSeries>& all,
                         std::ostream& out, const std::string& comment) {
  if (!comment.empty()) out << "# " << comment << "\n";
  out << "t,name,q,strategy,estimate,lower,upper\n";
  for (const auto& series : all) {
    const std::string strat = series.request.kind == EstimandKind::kGe
                                  ? strategy_string(series.request.strategy)
                                  : std::string();
    for (const auto& p : series.points)
      out << p.t << "," << series.name << "," << series.request.q << ","
          << strat << "," << format_number(p.estimate) << ","
          << format_number(p.lower) << "," << format_number(p.upper) << "\n";
  }
}

}  // namespace nof1
