#include <doctest.h>

#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "nof1/rng.hpp"
#include "nof1/ssm.hpp"
#include "nof1/stats.hpp"
#include "nof1/synthgen.hpp"
#include "oracles.hpp"

using namespace nof1;

namespace {

SsmSpec scalar_spec(RegimeKind kind, double diffuse = 1e7) {
  SsmSpec spec;
  spec.response = VarRole::kOutcome;
  DesignColumn col;
  col.intercept = true;
  col.name = "level";
  spec.columns = {col};
  spec.regimes = {{kind, {}}};
  spec.diffuse = diffuse;
  return spec;
}

SsmSpec static_spec(int d, double diffuse = 1e7) {
  SsmSpec spec;
  spec.response = VarRole::kOutcome;
  for (int i = 0; i < d; ++i) {
    DesignColumn col;
    col.intercept = i == 0;
    col.name = "x" + std::to_string(i);
    spec.columns.push_back(col);
    spec.regimes.push_back({RegimeKind::kStatic, {}});
  }
  spec.diffuse = diffuse;
  return spec;
}

}  // namespace

TEST_SUITE("ssm") {

TEST_CASE("scalar conjugate update") {
  SsmSpec spec = scalar_spec(RegimeKind::kStatic, 1.0);
  Eigen::VectorXd ys(1);
  ys << 1.0;
  Eigen::MatrixXd Fs(1, 1);
  Fs << 1.0;
  SsmParams params;
  params.obs_variance = 1.0;
  const FilterResult r = kalman_filter(spec, ys, Fs, params);
  CHECK(r.steps[0].m(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.steps[0].C(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.steps[0].Q == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("T=3 random-walk model matches the joint-Gaussian oracle") {
  const double m0 = 0.4, c0 = 2.0, W = 0.3, V = 0.7;
  const std::vector<double> F = {1.0, -0.6, 1.3};
  const std::vector<double> y = {0.9, -0.2, 1.8};

  SsmSpec spec = scalar_spec(RegimeKind::kRandomWalk, c0);
  spec.init_mean = Eigen::VectorXd::Constant(1, m0);
  Eigen::VectorXd ys = Eigen::Map<const Eigen::VectorXd>(y.data(), 3);
  Eigen::MatrixXd Fs(3, 1);
  for (int i = 0; i < 3; ++i) Fs(i, 0) = F[static_cast<std::size_t>(i)];
  SsmParams params;
  params.obs_variance = V;
  params.state_variances = Eigen::VectorXd::Constant(1, W);

  const FilterResult r = kalman_filter(spec, ys, Fs, params);
  for (int t = 0; t < 3; ++t) {
    const auto mom = oracles::condition_scalar_ssm(m0, c0, W, V, F, y, t + 1);
    CHECK(r.steps[static_cast<std::size_t>(t)].m(0) ==
          doctest::Approx(mom.mean[static_cast<std::size_t>(t)])
              .epsilon(1e-10));
    CHECK(r.steps[static_cast<std::size_t>(t)].C(0, 0) ==
          doctest::Approx(mom.var[static_cast<std::size_t>(t)]).epsilon(1e-10));
  }

  const SmoothedResult s = kalman_smooth(r);
  const auto smom = oracles::condition_scalar_ssm(m0, c0, W, V, F, y, 3);
  for (int t = 0; t < 3; ++t) {
    CHECK(s.mean[static_cast<std::size_t>(t)](0) ==
          doctest::Approx(smom.mean[static_cast<std::size_t>(t)])
              .epsilon(1e-10));
    CHECK(s.cov[static_cast<std::size_t>(t)](0, 0) ==
          doctest::Approx(smom.var[static_cast<std::size_t>(t)]).epsilon(1e-10));
  }
}

TEST_CASE("joint-Gaussian oracle also covers a missing middle response") {
  const double m0 = 0.0, c0 = 1.5, W = 0.5, V = 0.4;
  const std::vector<double> F = {0.8, 1.1, -0.9};
  const std::vector<double> y = {0.3, std::nan(""), -1.1};

  SsmSpec spec = scalar_spec(RegimeKind::kRandomWalk, c0);
  Eigen::VectorXd ys(3);
  ys << y[0], y[1], y[2];
  Eigen::MatrixXd Fs(3, 1);
  for (int i = 0; i < 3; ++i) Fs(i, 0) = F[static_cast<std::size_t>(i)];
  SsmParams params;
  params.obs_variance = V;
  params.state_variances = Eigen::VectorXd::Constant(1, W);

  const FilterResult r = kalman_filter(spec, ys, Fs, params);
  CHECK_FALSE(r.steps[1].updated);
  const SmoothedResult s = kalman_smooth(r);
  const auto smom = oracles::condition_scalar_ssm(m0, c0, W, V, F, y, 3);
  for (int t = 0; t < 3; ++t) {
    CHECK(s.mean[static_cast<std::size_t>(t)](0) ==
          doctest::Approx(smom.mean[static_cast<std::size_t>(t)])
              .epsilon(1e-10));
    CHECK(s.cov[static_cast<std::size_t>(t)](0, 0) ==
          doctest::Approx(smom.var[static_cast<std::size_t>(t)]).epsilon(1e-10));
  }
}

TEST_CASE("static fit equals the direct posterior solve over T=50") {
  const int T = 50, d = 3;
  Rng rng = Rng::stream(501, 0);
  Eigen::MatrixXd Fs(T, d);
  Eigen::VectorXd ys(T);
  for (int t = 0; t < T; ++t) {
    Fs(t, 0) = 1.0;
    for (int j = 1; j < d; ++j) Fs(t, j) = rng.normal();
    ys(t) = 2.0 + 0.5 * Fs(t, 1) - 1.2 * Fs(t, 2) + 0.3 * rng.normal();
  }
  const double V = 0.09, kappa = 1e7;
  SsmSpec spec = static_spec(d, kappa);
  SsmParams params;
  params.obs_variance = V;
  const FilterResult r = kalman_filter(spec, ys, Fs, params);

  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  oracles::gls_posterior(Fs, ys, std::vector<bool>(T, true), V, kappa, &mean,
                         &cov);
  const auto& last = r.steps.back();
  for (int j = 0; j < d; ++j) {
    CHECK(last.m(j) == doctest::Approx(mean(j)).epsilon(1e-8));
    CHECK(last.C(j, j) == doctest::Approx(cov(j, j)).epsilon(1e-6));
  }

  // W = 0 makes the smoothed trajectory constant at the final estimate.
  const SmoothedResult s = kalman_smooth(r);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < d; ++j)
      CHECK(s.mean[static_cast<std::size_t>(t)](j) ==
            doctest::Approx(last.m(j)).epsilon(1e-7));
}

TEST_CASE("terminal smoothed state equals the final filtered state") {
  const std::vector<double> F = {1.0, 1.0, 1.0, 1.0};
  const std::vector<double> y = {0.1, 0.5, -0.3, 0.8};
  SsmSpec spec = scalar_spec(RegimeKind::kRandomWalk, 1.0);
  Eigen::VectorXd ys = Eigen::Map<const Eigen::VectorXd>(y.data(), 4);
  Eigen::MatrixXd Fs = Eigen::MatrixXd::Ones(4, 1);
  SsmParams params;
  params.obs_variance = 0.5;
  params.state_variances = Eigen::VectorXd::Constant(1, 0.2);
  const FilterResult r = kalman_filter(spec, ys, Fs, params);
  const SmoothedResult s = kalman_smooth(r);
  CHECK(s.mean.back()(0) == r.steps.back().m(0));
  CHECK(s.cov.back()(0, 0) == r.steps.back().C(0, 0));
}

TEST_CASE("with W=0 a missing response changes nothing else") {
  const int T = 20, d = 2;
  Rng rng = Rng::stream(502, 0);
  Eigen::MatrixXd Fs(T, d);
  Eigen::VectorXd ys(T);
  for (int t = 0; t < T; ++t) {
    Fs(t, 0) = 1.0;
    Fs(t, 1) = rng.normal();
    ys(t) = 1.0 - 0.8 * Fs(t, 1) + 0.2 * rng.normal();
  }
  SsmSpec spec = static_spec(d);
  SsmParams params;
  params.obs_variance = 0.04;

  Eigen::VectorXd ys_masked = ys;
  ys_masked(9) = std::nan("");
  const FilterResult full = kalman_filter(spec, ys_masked, Fs, params);

  // Oracle run with the row genuinely removed.
  Eigen::MatrixXd Fs2(T - 1, d);
  Eigen::VectorXd ys2(T - 1);
  int k = 0;
  for (int t = 0; t < T; ++t) {
    if (t == 9) continue;
    Fs2.row(k) = Fs.row(t);
    ys2(k) = ys(t);
    ++k;
  }
  const FilterResult cut = kalman_filter(spec, ys2, Fs2, params);
  CHECK(full.loglik == doctest::Approx(cut.loglik).epsilon(1e-10));
  CHECK(full.steps.back().m(1) ==
        doctest::Approx(cut.steps.back().m(1)).epsilon(1e-10));
  CHECK(full.steps[9].updated == false);
}

TEST_CASE("filter log-likelihood is invariant under column permutation") {
  const int T = 40, d = 3;
  Rng rng = Rng::stream(503, 0);
  Eigen::MatrixXd Fs(T, d);
  Eigen::VectorXd ys(T);
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < d; ++j) Fs(t, j) = rng.normal();
    ys(t) = rng.normal();
  }
  SsmSpec spec = static_spec(d);
  spec.regimes[1].kind = RegimeKind::kRandomWalk;
  SsmParams params;
  params.obs_variance = 0.7;
  params.state_variances = Eigen::VectorXd::Zero(d);
  params.state_variances(1) = 0.15;

  Eigen::MatrixXd Fp(T, d);
  Fp.col(0) = Fs.col(2);
  Fp.col(1) = Fs.col(0);
  Fp.col(2) = Fs.col(1);
  SsmSpec spec_p = static_spec(d);
  spec_p.regimes[2].kind = RegimeKind::kRandomWalk;
  SsmParams params_p;
  params_p.obs_variance = 0.7;
  params_p.state_variances = Eigen::VectorXd::Zero(d);
  params_p.state_variances(2) = 0.15;

  const double l1 = kalman_filter(spec, ys, Fs, params).loglik;
  const double l2 = kalman_filter(spec_p, ys, Fp, params_p).loglik;
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-9));
}

TEST_CASE("filter covariances stay symmetric PSD and Q positive") {
  const double c0 = 3.0;
  SsmSpec spec = scalar_spec(RegimeKind::kRandomWalk, c0);
  const int T = 30;
  Rng rng = Rng::stream(504, 0);
  Eigen::VectorXd ys(T);
  Eigen::MatrixXd Fs(T, 1);
  for (int t = 0; t < T; ++t) {
    Fs(t, 0) = rng.normal();
    ys(t) = rng.normal();
  }
  SsmParams params;
  params.obs_variance = 0.3;
  params.state_variances = Eigen::VectorXd::Constant(1, 0.05);
  const FilterResult r = kalman_filter(spec, ys, Fs, params);
  for (const auto& step : r.steps) {
    CHECK(step.C(0, 0) >= 0.0);
    CHECK(step.R(0, 0) >= 0.0);
    if (step.updated) CHECK(step.Q > 0.0);
  }
  const SmoothedResult s = kalman_smooth(r);
  for (const auto& S : s.cov) CHECK(S(0, 0) >= -1e-8);
}

TEST_CASE("static synthetic recovery lands within 3 SE") {
  const TruthSpec spec = oracles::static_truth(31, 400);
  const auto gen = generate(spec);
  const FittedSsm fit = fit_mle(
      SsmSpec::standard(gen.series.schema(), DagConfig::standard(),
                        VarRole::kOutcome),
      gen.series);
  CHECK(fit.converged);
  const int t = 200;
  const std::vector<std::pair<std::string, double>> truth = {
      {"intercept", 1.0}, {"Y.l1", 0.3}, {"A", -1.0}, {"A.l1", -0.4},
      {"C.l1", 0.6}};
  for (const auto& [name, value] : truth) {
    const int col = fit.spec.column_index(name);
    REQUIRE(col >= 0);
    const double err = std::abs(fit.coefficient(t, col) - value);
    CHECK(err <= 3.0 * fit.standard_error(t, col));
  }
}

TEST_CASE("random-walk intercept fit tracks a drifting truth") {
  TruthSpec spec = oracles::static_truth(32, 500);
  spec.beta0 = Trajectory::random_walk(1.0, 0.01);
  const auto gen = generate(spec);

  SsmSpec rw_spec = SsmSpec::standard(gen.series.schema(),
                                      DagConfig::standard(),
                                      VarRole::kOutcome);
  rw_spec.regimes[0].kind = RegimeKind::kRandomWalk;
  const FittedSsm rw_fit = fit_mle(rw_spec, gen.series);
  const FittedSsm static_fit = fit_mle(
      SsmSpec::standard(gen.series.schema(), DagConfig::standard(),
                        VarRole::kOutcome),
      gen.series);

  CHECK(rw_fit.state_variances(0) > 0.0);
  double rw_sse = 0.0, static_sse = 0.0;
  for (int t = rw_fit.t_begin; t <= rw_fit.t_end(); ++t) {
    const double truth = gen.truth.beta0(t);
    rw_sse += std::pow(rw_fit.coefficient(t, 0) - truth, 2);
    static_sse += std::pow(static_fit.coefficient(t, 0) - truth, 2);
  }
  CHECK(rw_sse < static_sse);
  CHECK(rw_fit.loglik > static_fit.loglik);
}

TEST_CASE("two-exposure outcome design mirrors the daily-pair layout") {
  SeriesSchema schema;
  schema.outcome = "Y_negmood";
  schema.exposures = {{"A_calls", true}, {"A_texts", true}};
  schema.covariates = {"C_pm"};
  const SsmSpec spec =
      SsmSpec::standard(schema, DagConfig::standard(), VarRole::kOutcome);
  REQUIRE(spec.dim() == 7);
  CHECK(spec.columns[0].name == "intercept");
  CHECK(spec.columns[1].name == "Y_negmood.l1");
  CHECK(spec.columns[2].name == "A_calls");
  CHECK(spec.columns[3].name == "A_texts");
  CHECK(spec.columns[4].name == "A_calls.l1");
  CHECK(spec.columns[5].name == "A_texts.l1");
  CHECK(spec.columns[6].name == "C_pm.l1");
}

TEST_CASE("periodic-stable change point is recovered on one seed") {
  TruthSpec spec = oracles::static_truth(33, 600);
  spec.beta1 = {Trajectory::piecewise({300}, {-1.0, -0.2})};
  spec.outcome_variance = 0.25;
  const auto gen = generate(spec);

  SsmSpec model = SsmSpec::standard(gen.series.schema(),
                                    DagConfig::standard(), VarRole::kOutcome);
  const int col = model.column_index("A");
  model.regimes[static_cast<std::size_t>(col)].kind =
      RegimeKind::kPeriodicStable;
  ChangePointOptions opts;
  opts.max_points = 1;
  const ChangePointResult r = infer_change_points(model, gen.series, "A", opts);
  REQUIRE(r.change_points.size() == 1);
  CHECK(std::abs(r.change_points[0] - 300) <= 21);
  REQUIRE(r.segments.size() == 2);
  CHECK(r.segment_estimates[0] == doctest::Approx(-1.0).epsilon(0.5));
  CHECK(r.segment_estimates[1] == doctest::Approx(-0.2).epsilon(1.5));
  CHECK(std::abs(r.fitted.coefficient(100, col) -
                 r.segment_estimates[0]) < 1e-9);
}

TEST_CASE("max-points zero reproduces the static fit") {
  const TruthSpec spec = oracles::static_truth(34, 300);
  const auto gen = generate(spec);
  SsmSpec model = SsmSpec::standard(gen.series.schema(),
                                    DagConfig::standard(), VarRole::kOutcome);
  const int col = model.column_index("A");
  model.regimes[static_cast<std::size_t>(col)].kind =
      RegimeKind::kPeriodicStable;
  ChangePointOptions opts;
  opts.max_points = 0;
  const ChangePointResult r = infer_change_points(model, gen.series, "A", opts);
  CHECK(r.change_points.empty());

  const FittedSsm plain = fit_mle(
      SsmSpec::standard(gen.series.schema(), DagConfig::standard(),
                        VarRole::kOutcome),
      gen.series);
  CHECK(r.fitted.coefficient(150, col) ==
        doctest::Approx(plain.coefficient(150, col)).epsilon(1e-9));
}

TEST_CASE("no-change truth selects zero change points on a fixed seed") {
  const TruthSpec spec = oracles::static_truth(35, 600);
  const auto gen = generate(spec);
  SsmSpec model = SsmSpec::standard(gen.series.schema(),
                                    DagConfig::standard(), VarRole::kOutcome);
  const int col = model.column_index("A");
  model.regimes[static_cast<std::size_t>(col)].kind =
      RegimeKind::kPeriodicStable;
  ChangePointOptions opts;
  opts.max_points = 2;
  const ChangePointResult r = infer_change_points(model, gen.series, "A", opts);
  CHECK(r.change_points.empty());
}

TEST_CASE("fitted model json round-trips") {
  const TruthSpec spec = oracles::static_truth(36, 120);
  const auto gen = generate(spec);
  const FittedSsm fit = fit_mle(
      SsmSpec::standard(gen.series.schema(), DagConfig::standard(),
                        VarRole::kOutcome),
      gen.series);
  const FittedSsm back = FittedSsm::from_json(fit.to_json());
  CHECK(back.loglik == fit.loglik);
  CHECK(back.obs_variance == fit.obs_variance);
  CHECK(back.t_begin == fit.t_begin);
  CHECK(back.rows() == fit.rows());
  for (int t = fit.t_begin; t <= fit.t_end(); t += 17) {
    for (int j = 0; j < fit.spec.dim(); ++j) {
      CHECK(back.coefficient(t, j) == fit.coefficient(t, j));
      CHECK(back.standard_error(t, j) == fit.standard_error(t, j));
    }
  }
}

TEST_CASE("coefficient frame assembly preserves layout and uncertainty") {
  const TruthSpec spec = oracles::static_truth(37, 200);
  const auto gen = generate(spec);
  const FittedSsm outcome = fit_mle(
      SsmSpec::standard(gen.series.schema(), DagConfig::standard(),
                        VarRole::kOutcome),
      gen.series);
  const FittedSsm cov = fit_mle(
      SsmSpec::standard(gen.series.schema(), DagConfig::standard(),
                        VarRole::kCovariate, 0),
      gen.series);
  const CoefficientFrame frame = make_coefficient_frame(outcome, {cov});
  CHECK(frame.t_begin == outcome.t_begin);
  CHECK(frame.times() == outcome.rows());
  CHECK(frame.n_exposures == 1);
  CHECK(frame.n_covariates == 1);
  CHECK(frame.has_uncertainty());
  const int t = 100;
  CHECK(frame.beta1(t, 0) ==
        outcome.coefficient(t, outcome.spec.column_index("A")));
  CHECK(frame.rho(t) ==
        outcome.coefficient(t, outcome.spec.column_index("Y.l1")));
  CHECK(frame.mu2(t, 0) == cov.coefficient(t, cov.spec.column_index("Y")));
  CHECK(frame.pc(t)(0, 0) ==
        cov.coefficient(t, cov.spec.column_index("C.l1")));
}

}  // TEST_SUITE
