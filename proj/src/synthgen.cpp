#include "nof1/synthgen.hpp"

#include <cmath>
#include <limits>
#include <utility>

#include <nlohmann/json.hpp>

#include "nof1/rng.hpp"

namespace nof1 {

namespace {

constexpr std::uint64_t kWalkStream = 3;
constexpr std::uint64_t kNoiseStream = 4;
constexpr std::uint64_t kMissingStream = 5;

const char* trajectory_kind_name(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::kConstant: return "constant";
    case TrajectoryKind::kPiecewise: return "piecewise";
    case TrajectoryKind::kRandomWalk: return "random_walk";
  }
  return "?";
}

double dot_or_zero(const Eigen::VectorXd& w, const Eigen::VectorXd& x) {
  if (w.size() == 0) return 0.0;
  if (w.size() != x.size())
    throw ValidationError("exposure model weight length mismatch");
  return w.dot(x);
}

}  // namespace

Trajectory Trajectory::constant(double v) {
  Trajectory t;
  t.kind = TrajectoryKind::kConstant;
  t.value = v;
  return t;
}

Trajectory Trajectory::piecewise(std::vector<int> cps,
                                 std::vector<double> vals) {
  Trajectory t;
  t.kind = TrajectoryKind::kPiecewise;
  t.change_points = std::move(cps);
  t.values = std::move(vals);
  return t;
}

Trajectory Trajectory::random_walk(double start, double variance) {
  Trajectory t;
  t.kind = TrajectoryKind::kRandomWalk;
  t.value = start;
  t.walk_variance = variance;
  return t;
}

void Trajectory::validate(int T) const {
  switch (kind) {
    case TrajectoryKind::kConstant:
      break;
    case TrajectoryKind::kPiecewise: {
      if (values.size() != change_points.size() + 1)
        throw ValidationError(
            "piecewise trajectory needs one more level than change points");
      int prev = 1;
      for (int cp : change_points) {
        if (cp <= prev || cp > T)
          throw ValidationError(
              "piecewise change points must be strictly increasing within "
              "2.." +
              std::to_string(T));
        prev = cp;
      }
      break;
    }
    case TrajectoryKind::kRandomWalk:
      if (!(walk_variance >= 0.0))
        throw ValidationError("random walk variance must be >= 0");
      break;
  }
}

Trajectory Trajectory::from_json(const nlohmann::json& j) {
  if (j.is_number()) return constant(j.get<double>());
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "constant") return constant(j.at("value").get<double>());
  if (kind == "piecewise")
    return piecewise(j.at("change_points").get<std::vector<int>>(),
                     j.at("values").get<std::vector<double>>());
  if (kind == "random_walk")
    return random_walk(j.at("value").get<double>(),
                       j.at("variance").get<double>());
  throw ValidationError("unknown trajectory kind '" + kind + "'");
}

nlohmann::json Trajectory::to_json() const {
  nlohmann::json j;
  j["kind"] = trajectory_kind_name(kind);
  switch (kind) {
    case TrajectoryKind::kConstant:
      j["value"] = value;
      break;
    case TrajectoryKind::kPiecewise:
      j["change_points"] = change_points;
      j["values"] = values;
      break;
    case TrajectoryKind::kRandomWalk:
      j["value"] = value;
      j["variance"] = walk_variance;
      break;
  }
  return j;
}

void TruthSpec::validate() const {
  if (length < 3) throw ValidationError("series length must be at least 3");
  const int dA = exposure_count();
  const int dC = covariate_count();
  if (dA < 1) throw ValidationError("need at least one exposure");
  if (static_cast<int>(beta2.size()) != dA)
    throw ValidationError("beta1 and beta2 must have one entry per exposure");
  if (static_cast<int>(covariate_models.size()) != dC)
    throw ValidationError("need one covariate model per betac entry");
  if (static_cast<int>(covariate_variances.size()) != dC)
    throw ValidationError("need one covariate variance per covariate");
  if (!baseline.empty() && static_cast<int>(baseline.size()) != dC)
    throw ValidationError("baseline must have one value per covariate");
  if (!(outcome_variance >= 0.0))
    throw ValidationError("outcome variance must be >= 0");
  for (double v : covariate_variances)
    if (!(v >= 0.0)) throw ValidationError("covariate variance must be >= 0");
  if (!(epsilon > 0.0 && epsilon <= 0.5))
    throw ValidationError("epsilon must lie in (0, 0.5]");
  if (!(missing_outcome_rate >= 0.0 && missing_outcome_rate < 1.0))
    throw ValidationError("missing outcome rate must lie in [0, 1)");
  if (!exposure_models.empty() &&
      static_cast<int>(exposure_models.size()) != dA)
    throw ValidationError("need one exposure model per exposure");

  beta0.validate(length);
  rho.validate(length);
  for (const auto& t : beta1) t.validate(length);
  for (const auto& t : beta2) t.validate(length);
  for (const auto& t : betac) t.validate(length);
  for (const auto& m : covariate_models) {
    m.mu0.validate(length);
    if (static_cast<int>(m.pc.size()) != dC)
      throw ValidationError("covariate model pc row must have length " +
                            std::to_string(dC));
    if (static_cast<int>(m.m1.size()) != dA)
      throw ValidationError("covariate model m1 row must have length " +
                            std::to_string(dA));
    for (const auto& t : m.pc) t.validate(length);
    for (const auto& t : m.m1) t.validate(length);
    m.mu2.validate(length);
  }

  if (!schema.outcome.empty()) {
    schema.validate();
    if (static_cast<int>(schema.exposures.size()) != dA ||
        static_cast<int>(schema.covariates.size()) != dC)
      throw ValidationError("schema dimensions do not match the truth spec");
  }
}

SeriesSchema TruthSpec::resolved_schema() const {
  if (!schema.outcome.empty()) return schema;
  SeriesSchema s;
  s.outcome = "Y";
  const int dA = exposure_count();
  const int dC = covariate_count();
  for (int j = 0; j < dA; ++j)
    s.exposures.push_back({dA == 1 ? "A" : "A" + std::to_string(j + 1), true});
  for (int k = 0; k < dC; ++k)
    s.covariates.push_back(dC == 1 ? "C" : "C" + std::to_string(k + 1));
  return s;
}

TruthSpec TruthSpec::from_json(const nlohmann::json& j) {
  TruthSpec s;
  s.length = j.value("length", 600);
  s.seed = j.value("seed", std::uint64_t{1});
  if (j.contains("schema")) s.schema = SeriesSchema::from_json(j.at("schema"));

  s.beta0 = Trajectory::from_json(j.at("beta0"));
  s.rho = Trajectory::from_json(j.at("rho"));
  for (const auto& e : j.at("beta1")) s.beta1.push_back(Trajectory::from_json(e));
  for (const auto& e : j.at("beta2")) s.beta2.push_back(Trajectory::from_json(e));
  if (j.contains("betac"))
    for (const auto& e : j.at("betac"))
      s.betac.push_back(Trajectory::from_json(e));

  if (j.contains("covariate_models")) {
    for (const auto& m : j.at("covariate_models")) {
      CovariateModel cm;
      cm.mu0 = Trajectory::from_json(m.at("mu0"));
      for (const auto& e : m.at("pc")) cm.pc.push_back(Trajectory::from_json(e));
      for (const auto& e : m.at("m1")) cm.m1.push_back(Trajectory::from_json(e));
      cm.mu2 = Trajectory::from_json(m.at("mu2"));
      s.covariate_models.push_back(std::move(cm));
    }
  }

  s.outcome_variance = j.value("outcome_variance", 1.0);
  if (j.contains("covariate_variances"))
    s.covariate_variances =
        j.at("covariate_variances").get<std::vector<double>>();
  else
    s.covariate_variances.assign(s.betac.size(), 1.0);

  if (j.contains("exposure_models")) {
    for (const auto& m : j.at("exposure_models")) {
      ExposureModel em;
      em.intercept = m.value("intercept", 0.0);
      if (m.contains("on_exposures")) {
        const auto v = m.at("on_exposures").get<std::vector<double>>();
        em.on_exposures =
            Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
      }
      em.on_outcome = m.value("on_outcome", 0.0);
      if (m.contains("on_covariates")) {
        const auto v = m.at("on_covariates").get<std::vector<double>>();
        em.on_covariates =
            Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
      }
      s.exposure_models.push_back(std::move(em));
    }
  }

  s.epsilon = j.value("epsilon", 0.05);
  if (j.contains("baseline"))
    s.baseline = j.at("baseline").get<std::vector<double>>();
  s.y0 = j.value("y0", 0.0);
  s.missing_outcome_rate = j.value("missing_outcome_rate", 0.0);
  s.validate();
  return s;
}

nlohmann::json TruthSpec::to_json() const {
  nlohmann::json j;
  j["length"] = length;
  j["seed"] = seed;
  if (!schema.outcome.empty()) j["schema"] = schema.to_json();
  j["beta0"] = beta0.to_json();
  j["rho"] = rho.to_json();
  nlohmann::json b1 = nlohmann::json::array(), b2 = nlohmann::json::array(),
                 bc = nlohmann::json::array();
  for (const auto& t : beta1) b1.push_back(t.to_json());
  for (const auto& t : beta2) b2.push_back(t.to_json());
  for (const auto& t : betac) bc.push_back(t.to_json());
  j["beta1"] = b1;
  j["beta2"] = b2;
  j["betac"] = bc;
  nlohmann::json cms = nlohmann::json::array();
  for (const auto& m : covariate_models) {
    nlohmann::json cm;
    cm["mu0"] = m.mu0.to_json();
    nlohmann::json pc = nlohmann::json::array(), m1 = nlohmann::json::array();
    for (const auto& t : m.pc) pc.push_back(t.to_json());
    for (const auto& t : m.m1) m1.push_back(t.to_json());
    cm["pc"] = pc;
    cm["m1"] = m1;
    cm["mu2"] = m.mu2.to_json();
    cms.push_back(std::move(cm));
  }
  j["covariate_models"] = cms;
  j["outcome_variance"] = outcome_variance;
  j["covariate_variances"] = covariate_variances;
  nlohmann::json ems = nlohmann::json::array();
  for (const auto& m : exposure_models) {
    nlohmann::json em;
    em["intercept"] = m.intercept;
    em["on_exposures"] =
        std::vector<double>(m.on_exposures.begin(), m.on_exposures.end());
    em["on_outcome"] = m.on_outcome;
    em["on_covariates"] =
        std::vector<double>(m.on_covariates.begin(), m.on_covariates.end());
    ems.push_back(std::move(em));
  }
  j["exposure_models"] = ems;
  j["epsilon"] = epsilon;
  j["baseline"] = baseline;
  j["y0"] = y0;
  j["missing_outcome_rate"] = missing_outcome_rate;
  return j;
}

GenerationResult generate(const TruthSpec& spec) {
  spec.validate();
  const int T = spec.length;
  const int dA = spec.exposure_count();
  const int dC = spec.covariate_count();

  // Coefficients are enumerated in a fixed order; each random-walk
  // trajectory draws from its own stream keyed by that index, so the
  // realization of one path never depends on the kinds of the others.
  int coef_idx = 0;
  auto realize = [&](const Trajectory& traj) {
    const int idx = coef_idx++;
    Eigen::VectorXd path(T);
    switch (traj.kind) {
      case TrajectoryKind::kConstant:
        path.setConstant(traj.value);
        break;
      case TrajectoryKind::kPiecewise: {
        std::size_t k = 0;
        double level = traj.values[0];
        for (int t = 1; t <= T; ++t) {
          if (k < traj.change_points.size() && t == traj.change_points[k])
            level = traj.values[++k];
          path(t - 1) = level;
        }
        break;
      }
      case TrajectoryKind::kRandomWalk: {
        Rng rng = Rng::stream(spec.seed, kWalkStream, idx);
        const double sd = std::sqrt(traj.walk_variance);
        double x = traj.value;
        for (int t = 1; t <= T; ++t) {
          path(t - 1) = x;
          x += sd * rng.normal();
        }
        break;
      }
    }
    return path;
  };

  const Eigen::VectorXd b0 = realize(spec.beta0);
  const Eigen::VectorXd rho = realize(spec.rho);
  std::vector<Eigen::VectorXd> b1, b2, bc;
  for (const auto& t : spec.beta1) b1.push_back(realize(t));
  for (const auto& t : spec.beta2) b2.push_back(realize(t));
  for (const auto& t : spec.betac) bc.push_back(realize(t));
  std::vector<Eigen::VectorXd> mu0(dC), mu2(dC);
  std::vector<std::vector<Eigen::VectorXd>> pc(dC), m1(dC);
  for (int i = 0; i < dC; ++i) {
    const auto& m = spec.covariate_models[i];
    mu0[i] = realize(m.mu0);
    for (const auto& t : m.pc) pc[i].push_back(realize(t));
    for (const auto& t : m.m1) m1[i].push_back(realize(t));
    mu2[i] = realize(m.mu2);
  }

  CoefficientFrame truth;
  truth.t_begin = 1;
  truth.n_exposures = dA;
  truth.n_covariates = dC;
  truth.outcome_coef.resize(T);
  truth.covariate_coef.assign(dC, std::vector<Eigen::VectorXd>(T));
  for (int t = 1; t <= T; ++t) {
    Eigen::VectorXd oc(truth.outcome_dim());
    oc(truth.idx_beta0()) = b0(t - 1);
    oc(truth.idx_rho()) = rho(t - 1);
    for (int j = 0; j < dA; ++j) {
      oc(truth.idx_beta1(j)) = b1[j](t - 1);
      oc(truth.idx_beta2(j)) = b2[j](t - 1);
    }
    for (int k = 0; k < dC; ++k) oc(truth.idx_betac(k)) = bc[k](t - 1);
    truth.outcome_coef[t - 1] = std::move(oc);
    for (int i = 0; i < dC; ++i) {
      Eigen::VectorXd cv(truth.covariate_dim());
      cv(truth.idx_mu0()) = mu0[i](t - 1);
      for (int k = 0; k < dC; ++k) cv(truth.idx_pc(k)) = pc[i][k](t - 1);
      for (int j = 0; j < dA; ++j) cv(truth.idx_mu1(j)) = m1[i][j](t - 1);
      cv(truth.idx_mu2()) = mu2[i](t - 1);
      truth.covariate_coef[i][t - 1] = std::move(cv);
    }
  }
  truth.validate();

  // Within each time step the draw order is exposures (ascending), then
  // the outcome, then covariates (ascending), all from one noise stream.
  Rng noise = Rng::stream(spec.seed, kNoiseStream);
  Eigen::MatrixXd A(T, dA);
  Eigen::VectorXd Y(T);
  Eigen::MatrixXd C(T + 1, dC);

  Eigen::VectorXd a_prev = Eigen::VectorXd::Zero(dA);
  double y_prev = spec.y0;
  Eigen::VectorXd c_prev = Eigen::VectorXd::Zero(dC);
  for (std::size_t k = 0; k < spec.baseline.size(); ++k)
    c_prev(static_cast<int>(k)) = spec.baseline[k];
  if (dC > 0) C.row(0) = c_prev.transpose();

  const double obs_sd = std::sqrt(spec.outcome_variance);
  Eigen::VectorXd cov_sd(dC);
  for (int i = 0; i < dC; ++i) cov_sd(i) = std::sqrt(spec.covariate_variances[i]);

  double min_p = 1.0, max_p = 0.0;
  for (int t = 1; t <= T; ++t) {
    Eigen::VectorXd a_now(dA);
    for (int j = 0; j < dA; ++j) {
      double p = 0.5;
      if (!spec.exposure_models.empty()) {
        const ExposureModel& em = spec.exposure_models[j];
        const double logit = em.intercept + dot_or_zero(em.on_exposures, a_prev) +
                             em.on_outcome * y_prev +
                             dot_or_zero(em.on_covariates, c_prev);
        p = 1.0 / (1.0 + std::exp(-logit));
      }
      p = std::min(std::max(p, spec.epsilon), 1.0 - spec.epsilon);
      min_p = std::min(min_p, p);
      max_p = std::max(max_p, p);
      a_now(j) = noise.bernoulli(p) ? 1.0 : 0.0;
    }

    double y_now = b0(t - 1) + rho(t - 1) * y_prev;
    for (int j = 0; j < dA; ++j)
      y_now += b1[j](t - 1) * a_now(j) + b2[j](t - 1) * a_prev(j);
    for (int k = 0; k < dC; ++k) y_now += bc[k](t - 1) * c_prev(k);
    y_now += noise.normal(0.0, obs_sd);

    Eigen::VectorXd c_now(dC);
    for (int i = 0; i < dC; ++i) {
      double v = mu0[i](t - 1) + mu2[i](t - 1) * y_now;
      for (int k = 0; k < dC; ++k) v += pc[i][k](t - 1) * c_prev(k);
      for (int j = 0; j < dA; ++j) v += m1[i][j](t - 1) * a_now(j);
      c_now(i) = v + noise.normal(0.0, cov_sd(i));
    }

    A.row(t - 1) = a_now.transpose();
    Y(t - 1) = y_now;
    if (dC > 0) C.row(t) = c_now.transpose();
    a_prev = a_now;
    y_prev = y_now;
    c_prev = c_now;
  }

  Rng miss = Rng::stream(spec.seed, kMissingStream);
  for (int t = 1; t <= T; ++t)
    if (miss.bernoulli(spec.missing_outcome_rate))
      Y(t - 1) = std::numeric_limits<double>::quiet_NaN();

  GenerationResult result{
      Series(spec.resolved_schema(), std::move(A), std::move(Y), std::move(C)),
      std::move(truth), min_p, max_p};
  return result;
}

double ground_truth_estimand(const CoefficientFrame& truth,
                             const EstimandRequest& req, int t) {
  return point_estimand(truth, req, t);
}

}  // namespace nof1
