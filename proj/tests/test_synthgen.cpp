#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "nof1/gformula.hpp"
#include "nof1/stats.hpp"
#include "nof1/synthgen.hpp"
#include "oracles.hpp"

using namespace nof1;

namespace {

double lag1_autocorr(const Series& s) {
  std::vector<double> x, y;
  for (int t = 2; t <= s.length(); ++t) {
    if (s.outcome_missing(t) || s.outcome_missing(t - 1)) continue;
    x.push_back(s.outcome(t - 1));
    y.push_back(s.outcome(t));
  }
  const double mx = mean_of(x), my = mean_of(y);
  double num = 0.0, dx = 0.0, dy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x[i] - mx) * (y[i] - my);
    dx += (x[i] - mx) * (x[i] - mx);
    dy += (y[i] - my) * (y[i] - my);
  }
  return num / std::sqrt(dx * dy);
}

std::string series_bytes(const Series& s) {
  std::ostringstream out;
  write_series_csv(s, out);
  return out.str();
}

}  // namespace

TEST_SUITE("synthgen") {

TEST_CASE("generation is deterministic under the seed") {
  const TruthSpec spec = oracles::static_truth(91, 250);
  const auto a = generate(spec);
  const auto b = generate(spec);
  CHECK(series_bytes(a.series) == series_bytes(b.series));
  CHECK(a.min_propensity == b.min_propensity);

  TruthSpec other = spec;
  other.seed = 92;
  const auto c = generate(other);
  CHECK(series_bytes(a.series) != series_bytes(c.series));
}

TEST_CASE("all-zero coefficients give white-noise outcomes") {
  TruthSpec spec;
  spec.length = 2000;
  spec.seed = 93;
  spec.beta0 = Trajectory::constant(0.0);
  spec.rho = Trajectory::constant(0.0);
  spec.beta1 = {Trajectory::constant(0.0)};
  spec.beta2 = {Trajectory::constant(0.0)};
  spec.betac = {};
  spec.covariate_models = {};
  spec.covariate_variances = {};
  spec.baseline = {};
  spec.outcome_variance = 1.0;
  const auto gen = generate(spec);
  CHECK(std::abs(lag1_autocorr(gen.series)) < 3.0 / std::sqrt(2000.0));
}

TEST_CASE("pure AR truth reproduces its autocorrelation") {
  TruthSpec spec;
  spec.length = 4000;
  spec.seed = 94;
  spec.beta0 = Trajectory::constant(0.0);
  spec.rho = Trajectory::constant(0.63);
  spec.beta1 = {Trajectory::constant(0.0)};
  spec.beta2 = {Trajectory::constant(0.0)};
  spec.betac = {};
  spec.covariate_models = {};
  spec.covariate_variances = {};
  spec.baseline = {};
  const auto gen = generate(spec);
  CHECK(lag1_autocorr(gen.series) ==
        doctest::Approx(0.63).epsilon(3.0 / (0.63 * std::sqrt(4000.0))));
}

TEST_CASE("piecewise truth frames report the exact levels") {
  TruthSpec spec = oracles::static_truth(95, 600);
  spec.beta1 = {Trajectory::piecewise({300}, {-1.0, -0.2})};
  const auto gen = generate(spec);
  EstimandRequest req;
  req.kind = EstimandKind::kCe;
  CHECK(ground_truth_estimand(gen.truth, req, 299) == -1.0);
  CHECK(ground_truth_estimand(gen.truth, req, 300) == -0.2);
  CHECK(ground_truth_estimand(gen.truth, req, 600) == -0.2);
  CHECK(gen.truth.beta1(2, 0) == -1.0);
}

TEST_CASE("propensities honor the overlap clamp") {
  TruthSpec spec = oracles::static_truth(96, 2000, -1.0, 3.0);
  spec.exposure_models[0].intercept = 2.0;  // push toward always-treat
  spec.epsilon = 0.1;
  const auto gen = generate(spec);
  CHECK(gen.min_propensity >= 0.1);
  CHECK(gen.max_propensity <= 0.9);
  CHECK(gen.max_propensity == 0.9);  // clamp must actually bind here
}

TEST_CASE("unconfounded default assigns exposures at one half") {
  const TruthSpec spec = oracles::static_truth(97, 4000);
  const auto gen = generate(spec);
  CHECK(gen.min_propensity == 0.5);
  CHECK(gen.max_propensity == 0.5);
  double mean = 0.0;
  for (int t = 1; t <= 4000; ++t) mean += gen.series.exposure(t, 0);
  mean /= 4000.0;
  CHECK(mean == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("ground-truth lag effect matches the hand-computed plug-in") {
  TruthSpec spec;
  spec.length = 50;
  spec.seed = 98;
  spec.beta0 = Trajectory::constant(0.0);
  spec.rho = Trajectory::constant(0.63);
  spec.beta1 = {Trajectory::constant(-1.15)};
  spec.beta2 = {Trajectory::constant(-0.72)};
  spec.betac = {Trajectory::constant(-0.01)};
  TruthSpec::CovariateModel cm;
  cm.mu0 = Trajectory::constant(0.0);
  cm.pc = {Trajectory::constant(0.2)};
  cm.m1 = {Trajectory::constant(-0.78)};
  cm.mu2 = Trajectory::constant(-0.01);
  spec.covariate_models = {cm};
  spec.covariate_variances = {0.5};
  spec.baseline = {0.0};
  const auto gen = generate(spec);
  EstimandRequest req;
  req.kind = EstimandKind::kLe;
  req.q = 1;
  CHECK(ground_truth_estimand(gen.truth, req, 20) ==
        doctest::Approx(-1.436815).epsilon(1e-12));
}

TEST_CASE("mean-path simulation on truth parameters equals the truth frame value") {
  const TruthSpec spec = oracles::static_truth(99, 300);
  const auto gen = generate(spec);
  McModel model;
  model.frame = gen.truth;
  model.outcome_variance = spec.outcome_variance;
  model.covariate_variances = spec.covariate_variances;
  McConfig cfg;
  cfg.mean_path = true;
  cfg.draws = 1;
  cfg.copies = 1;
  for (const int t : {10, 150, 287}) {
    EstimandRequest req;
    req.kind = EstimandKind::kTe;
    req.q = 2;
    const EstimandPoint pt = mc_estimand(model, gen.series, t,
                                         {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, 0,
                                         cfg);
    CHECK(pt.estimate ==
          doctest::Approx(ground_truth_estimand(gen.truth, req, t))
              .epsilon(1e-12));
    CHECK(pt.lower == pt.upper);
  }
}

TEST_CASE("missing mask thins outcomes without disturbing the latent path") {
  TruthSpec spec = oracles::static_truth(100, 500);
  spec.missing_outcome_rate = 0.2;
  const auto masked = generate(spec);
  spec.missing_outcome_rate = 0.0;
  const auto full = generate(spec);

  int missing = 0;
  for (int t = 1; t <= 500; ++t) {
    if (masked.series.outcome_missing(t)) {
      ++missing;
      continue;
    }
    CHECK(masked.series.outcome(t) == full.series.outcome(t));
  }
  CHECK(missing > 60);
  CHECK(missing < 140);
  for (int t = 1; t <= 500; ++t) {
    CHECK(masked.series.exposure(t, 0) == full.series.exposure(t, 0));
    CHECK(masked.series.covariate(t, 0) == full.series.covariate(t, 0));
  }
}

TEST_CASE("spec validation rejects malformed trajectories") {
  CHECK_THROWS_AS(Trajectory::piecewise({10, 5}, {1.0, 2.0, 3.0}).validate(20),
                  ValidationError);
  CHECK_THROWS_AS(Trajectory::piecewise({10}, {1.0}).validate(20),
                  ValidationError);
  CHECK_THROWS_AS(Trajectory::random_walk(0.0, -1.0).validate(20),
                  ValidationError);
  TruthSpec spec = oracles::static_truth(1, 100);
  spec.covariate_variances = {0.5, 0.5};
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = oracles::static_truth(1, 100);
  spec.epsilon = 0.7;
  CHECK_THROWS_AS(spec.validate(), ValidationError);
}

TEST_CASE("truth spec json round-trips") {
  TruthSpec spec = oracles::static_truth(41, 200, -0.8, 1.5);
  spec.beta1 = {Trajectory::piecewise({80}, {-0.8, -0.1})};
  spec.rho = Trajectory::random_walk(0.3, 0.002);
  spec.missing_outcome_rate = 0.1;
  const TruthSpec back = TruthSpec::from_json(spec.to_json());
  CHECK(back.length == spec.length);
  CHECK(back.seed == spec.seed);
  CHECK(back.beta1[0].kind == TrajectoryKind::kPiecewise);
  CHECK(back.beta1[0].change_points == std::vector<int>{80});
  CHECK(back.rho.walk_variance == 0.002);
  CHECK(back.exposure_models.size() == 1);
  CHECK(back.exposure_models[0].on_covariates(0) == 1.5);
  CHECK(back.missing_outcome_rate == 0.1);
  const auto a = generate(spec);
  const auto b = generate(back);
  std::ostringstream sa, sb;
  write_series_csv(a.series, sa);
  write_series_csv(b.series, sb);
  CHECK(sa.str() == sb.str());
}

}  // TEST_SUITE
