#include "nof1/gformula.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <memory>
#include <utility>

#include <nlohmann/json.hpp>

#include "nof1/rng.hpp"
#include "nof1/stats.hpp"

namespace nof1 {

namespace {

constexpr std::uint64_t kNoiseBase = 21;

Interval percentile_interval(std::vector<double> draws, double level) {
  const double alpha = (1.0 - level) / 2.0;
  if (draws.size() < 2) return {draws.front(), draws.front()};
  return {sample_quantile(draws, alpha), sample_quantile(draws, 1.0 - alpha)};
}

// Raw pointers into one frame's per-time coefficient vectors, rebuilt
// after every parameter draw.
struct FrameCache {
  int t_begin = 1;
  int dA = 0, dC = 0;
  std::vector<const double*> oc;               // [t - t_begin]
  std::vector<std::vector<const double*>> cc;  // [i][t - t_begin]

  void rebuild(const CoefficientFrame& f) {
    t_begin = f.t_begin;
    dA = f.n_exposures;
    dC = f.n_covariates;
    const int n = f.times();
    oc.resize(n);
    cc.assign(dC, std::vector<const double*>(n));
    for (int r = 0; r < n; ++r) {
      oc[r] = f.outcome_coef[r].data();
      for (int i = 0; i < dC; ++i) cc[i][r] = f.covariate_coef[i][r].data();
    }
  }
};

// Scratch space reused across copies.
struct SimScratch {
  std::vector<double> a_prev, a_now, c_prev, c_now, cov_sd;
};

// Mean over copies of the simulated Y at the end of the window
// t0+1 .. t0+len, applying the strategy to the target exposure column.
double window_mean(const FrameCache& cache, const HistorySeed& hist,
                   const Strategy& strategy, int exposure,
                   const Eigen::MatrixXd* others, double obs_sd,
                   const McConfig& cfg, std::uint64_t k, std::uint64_t tag,
                   SimScratch* scratch) {
  const int len = static_cast<int>(strategy.size());
  const int dA = cache.dA;
  const int dC = cache.dC;
  const int copies = cfg.mean_path ? 1 : cfg.copies;

  auto& a_prev = scratch->a_prev;
  auto& a_now = scratch->a_now;
  auto& c_prev = scratch->c_prev;
  auto& c_now = scratch->c_now;
  a_prev.resize(dA);
  a_now.resize(dA);
  c_prev.resize(dC);
  c_now.resize(dC);

  double total = 0.0;
  for (int b = 0; b < copies; ++b) {
    Rng rng = Rng::stream(cfg.seed, kNoiseBase + tag,
                          mix64(k, static_cast<std::uint64_t>(hist.t0)), b);
    for (int j = 0; j < dA; ++j) a_prev[j] = hist.a(j);
    for (int i = 0; i < dC; ++i) c_prev[i] = hist.c(i);
    double y = hist.y;
    for (int s = 1; s <= len; ++s) {
      const double* oc = cache.oc[hist.t0 + s - cache.t_begin];
      for (int j = 0; j < dA; ++j)
        a_now[j] = others ? (*others)(s - 1, j) : 0.0;
      a_now[exposure] = strategy[s - 1];

      double y_next = oc[0] + oc[1] * y;
      for (int j = 0; j < dA; ++j)
        y_next += oc[2 + j] * a_now[j] + oc[2 + dA + j] * a_prev[j];
      for (int i = 0; i < dC; ++i) y_next += oc[2 + 2 * dA + i] * c_prev[i];
      if (!cfg.mean_path) y_next += obs_sd * rng.normal();
      y = y_next;

      if (s < len) {
        for (int i = 0; i < dC; ++i) {
          const double* cc = cache.cc[i][hist.t0 + s - cache.t_begin];
          double v = cc[0] + cc[1 + dC + dA] * y;
          for (int m = 0; m < dC; ++m) v += cc[1 + m] * c_prev[m];
          for (int j = 0; j < dA; ++j) v += cc[1 + dC + j] * a_now[j];
          if (!cfg.mean_path) v += scratch->cov_sd[i] * rng.normal();
          c_now[i] = v;
        }
        std::swap(c_prev, c_now);
      }
      std::swap(a_prev, a_now);
    }
    total += y;
  }
  return total / copies;
}

struct Anchor {
  HistorySeed hist;
  std::unique_ptr<Eigen::MatrixXd> others;  // window exposure rows or null
};

Anchor make_anchor(const Series& series, int t0, int len, bool others_observed,
                   int n_exposures) {
  Anchor anchor;
  anchor.hist = HistorySeed::from_series(series, t0);
  if (others_observed && n_exposures > 1) {
    auto m = std::make_unique<Eigen::MatrixXd>(len, n_exposures);
    for (int s = 1; s <= len; ++s)
      for (int j = 0; j < n_exposures; ++j) {
        if (series.exposure_missing(t0 + s, j))
          throw ValidationError("missing exposure inside simulation window at t=" +
                                std::to_string(t0 + s));
        (*m)(s - 1, j) = series.exposure(t0 + s, j);
      }
    anchor.others = std::move(m);
  }
  return anchor;
}

void check_window(const CoefficientFrame& frame, int t0, int len) {
  if (t0 < 1)
    throw ValidationError("simulation needs observed history at t0 >= 1");
  if (!frame.in_range(t0 + 1) || !frame.in_range(t0 + len))
    throw ValidationError("simulation window t=" + std::to_string(t0 + 1) +
                          ".." + std::to_string(t0 + len) +
                          " lies outside the coefficient frame");
}

void check_exposure(const CoefficientFrame& frame, int exposure) {
  if (exposure < 0 || exposure >= frame.n_exposures)
    throw ValidationError("exposure column out of range");
}

// Runs one simulation arm per draw over a shared set of anchors; the
// sampler is optional (exact frames skip resampling).
std::vector<double> pooled_draw_means(const McModel& model,
                                      const std::vector<Anchor>& anchors,
                                      const Strategy& strategy, int exposure,
                                      const McConfig& cfg, WarningLog* log) {
  WindowSampler* sampler = nullptr;
  std::unique_ptr<WindowSampler> holder;
  if (model.frame.has_uncertainty()) {
    holder = std::make_unique<WindowSampler>(model.frame, model.frame.t_begin,
                                             model.frame.t_end(), log);
    sampler = holder.get();
  }
  SimScratch scratch;
  scratch.cov_sd.resize(model.covariate_variances.size());
  for (std::size_t i = 0; i < model.covariate_variances.size(); ++i)
    scratch.cov_sd[i] = std::sqrt(model.covariate_variances[i]);
  const double obs_sd = std::sqrt(model.outcome_variance);

  FrameCache cache;
  std::vector<double> draw_means(static_cast<std::size_t>(cfg.draws));
  for (int k = 0; k < cfg.draws; ++k) {
    const CoefficientFrame& f =
        sampler ? sampler->draw(cfg.seed, static_cast<std::uint64_t>(k))
                : model.frame;
    cache.rebuild(f);
    double total = 0.0;
    for (const auto& anchor : anchors)
      total += window_mean(cache, anchor.hist, strategy, exposure,
                           anchor.others.get(), obs_sd, cfg,
                           static_cast<std::uint64_t>(k), 0, &scratch);
    draw_means[static_cast<std::size_t>(k)] =
        total / static_cast<double>(anchors.size());
  }
  return draw_means;
}

}  // namespace

void McConfig::validate() const {
  if (draws < 1) throw ValidationError("mc config: draws must be >= 1");
  if (copies < 1) throw ValidationError("mc config: copies must be >= 1");
  if (!(level > 0.0 && level < 1.0))
    throw ValidationError("mc config: level must lie in (0,1)");
}

McConfig McConfig::from_json(const nlohmann::json& j) {
  McConfig cfg;
  cfg.draws = j.value("draws", cfg.draws);
  cfg.copies = j.value("copies", cfg.copies);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.mean_path = j.value("mean_path", cfg.mean_path);
  cfg.level = j.value("level", cfg.level);
  cfg.others_observed = j.value("others_observed", cfg.others_observed);
  cfg.validate();
  return cfg;
}

nlohmann::json McConfig::to_json() const {
  nlohmann::json j;
  j["draws"] = draws;
  j["copies"] = copies;
  j["seed"] = seed;
  j["mean_path"] = mean_path;
  j["level"] = level;
  j["others_observed"] = others_observed;
  return j;
}

McModel McModel::from_fits(const FittedSsm& outcome,
                           const std::vector<FittedSsm>& covariates) {
  McModel model;
  model.frame = make_coefficient_frame(outcome, covariates);
  model.outcome_variance = outcome.obs_variance;
  for (const auto& fit : covariates)
    model.covariate_variances.push_back(fit.obs_variance);
  model.validate();
  return model;
}

void McModel::validate() const {
  frame.validate();
  if (static_cast<int>(covariate_variances.size()) != frame.n_covariates)
    throw ValidationError("need one covariate variance per covariate model");
  if (!(outcome_variance >= 0.0))
    throw ValidationError("outcome variance must be >= 0");
  for (double v : covariate_variances)
    if (!(v >= 0.0)) throw ValidationError("covariate variance must be >= 0");
}

HistorySeed HistorySeed::from_series(const Series& series, int t0) {
  if (t0 < 1 || t0 > series.length())
    throw ValidationError("history seed time out of range");
  HistorySeed h;
  h.t0 = t0;
  if (series.outcome_missing(t0))
    throw ValidationError("missing seed history at t=" + std::to_string(t0));
  h.y = series.outcome(t0);
  h.a.resize(series.exposure_count());
  for (int j = 0; j < series.exposure_count(); ++j) {
    if (series.exposure_missing(t0, j))
      throw ValidationError("missing seed history at t=" + std::to_string(t0));
    h.a(j) = series.exposure(t0, j);
  }
  h.c.resize(series.covariate_count());
  for (int i = 0; i < series.covariate_count(); ++i) {
    if (series.covariate_missing(t0, i))
      throw ValidationError("missing seed history at t=" + std::to_string(t0));
    h.c(i) = series.covariate(t0, i);
  }
  return h;
}

HistorySeed HistorySeed::from_json(const nlohmann::json& j) {
  HistorySeed h;
  h.t0 = j.at("t0").get<int>();
  h.y = j.at("y").get<double>();
  const auto a = j.at("a").get<std::vector<double>>();
  const auto c = j.value("c", std::vector<double>{});
  h.a = Eigen::Map<const Eigen::VectorXd>(a.data(), a.size());
  h.c = Eigen::Map<const Eigen::VectorXd>(c.data(), c.size());
  return h;
}

nlohmann::json HistorySeed::to_json() const {
  nlohmann::json j;
  j["t0"] = t0;
  j["y"] = y;
  j["a"] = std::vector<double>(a.begin(), a.end());
  j["c"] = std::vector<double>(c.begin(), c.end());
  return j;
}

nlohmann::json CounterfactualResult::to_json(const McConfig& cfg) const {
  nlohmann::json j;
  j["t"] = t;
  j["strategy"] = strategy_string(strategy);
  j["history"] = seed_history.to_json();
  j["mean"] = mean;
  j["lower"] = lower;
  j["upper"] = upper;
  j["draw_means"] = draw_means;
  j["config"] = cfg.to_json();
  return j;
}

CounterfactualResult simulate_counterfactual(const McModel& model,
                                             const HistorySeed& history,
                                             const Strategy& strategy,
                                             int exposure, const McConfig& cfg,
                                             WarningLog* log) {
  model.validate();
  cfg.validate();
  validate_binary_strategy(strategy);
  check_exposure(model.frame, exposure);
  const int len = static_cast<int>(strategy.size());
  check_window(model.frame, history.t0, len);
  if (history.a.size() != model.frame.n_exposures ||
      history.c.size() != model.frame.n_covariates)
    throw ValidationError("history seed dimensions do not match the model");

  std::vector<Anchor> anchors;
  anchors.push_back(Anchor{history, nullptr});
  CounterfactualResult result;
  result.t = history.t0 + len;
  result.strategy = strategy;
  result.seed_history = history;
  result.draw_means =
      pooled_draw_means(model, anchors, strategy, exposure, cfg, log);
  result.mean = mean_of(result.draw_means);
  const Interval iv = percentile_interval(result.draw_means, cfg.level);
  result.lower = iv.lower;
  result.upper = iv.upper;
  return result;
}

CounterfactualResult simulate_counterfactual(const McModel& model,
                                             const Series& series, int t,
                                             const Strategy& strategy,
                                             int exposure, const McConfig& cfg,
                                             WarningLog* log) {
  model.validate();
  cfg.validate();
  validate_binary_strategy(strategy);
  check_exposure(model.frame, exposure);
  const int len = static_cast<int>(strategy.size());
  check_window(model.frame, t - len, len);

  std::vector<Anchor> anchors;
  anchors.push_back(make_anchor(series, t - len, len, cfg.others_observed,
                                model.frame.n_exposures));
  CounterfactualResult result;
  result.t = t;
  result.strategy = strategy;
  result.seed_history = anchors.front().hist;
  result.draw_means =
      pooled_draw_means(model, anchors, strategy, exposure, cfg, log);
  result.mean = mean_of(result.draw_means);
  const Interval iv = percentile_interval(result.draw_means, cfg.level);
  result.lower = iv.lower;
  result.upper = iv.upper;
  return result;
}

EstimandPoint mc_estimand(const McModel& model, const Series& series, int t,
                          const Strategy& strategy, const Strategy& reference,
                          int exposure, const McConfig& cfg, WarningLog* log,
                          std::vector<double>* draws_out) {
  model.validate();
  cfg.validate();
  validate_binary_strategy(strategy);
  validate_binary_strategy(reference);
  if (strategy.size() != reference.size())
    throw ValidationError("contrasted strategies must have the same length");
  check_exposure(model.frame, exposure);
  const int len = static_cast<int>(strategy.size());
  const int t0 = t - len;
  check_window(model.frame, t0, len);

  const Anchor anchor = make_anchor(series, t0, len, cfg.others_observed,
                                    model.frame.n_exposures);

  WindowSampler* sampler = nullptr;
  std::unique_ptr<WindowSampler> holder;
  if (model.frame.has_uncertainty()) {
    holder = std::make_unique<WindowSampler>(model.frame, t0 + 1, t, log);
    sampler = holder.get();
  }
  SimScratch scratch;
  scratch.cov_sd.resize(model.covariate_variances.size());
  for (std::size_t i = 0; i < model.covariate_variances.size(); ++i)
    scratch.cov_sd[i] = std::sqrt(model.covariate_variances[i]);
  const double obs_sd = std::sqrt(model.outcome_variance);

  FrameCache cache;
  std::vector<double> diffs(static_cast<std::size_t>(cfg.draws));
  for (int k = 0; k < cfg.draws; ++k) {
    const CoefficientFrame& f =
        sampler ? sampler->draw(cfg.seed, static_cast<std::uint64_t>(k))
                : model.frame;
    cache.rebuild(f);
    const double treated =
        window_mean(cache, anchor.hist, strategy, exposure, anchor.others.get(),
                    obs_sd, cfg, static_cast<std::uint64_t>(k), 0, &scratch);
    const double control =
        window_mean(cache, anchor.hist, reference, exposure, anchor.others.get(),
                    obs_sd, cfg, static_cast<std::uint64_t>(k), 1, &scratch);
    diffs[static_cast<std::size_t>(k)] = treated - control;
  }

  EstimandPoint point;
  point.t = t;
  point.estimate = mean_of(diffs);
  const Interval iv = percentile_interval(diffs, cfg.level);
  point.lower = iv.lower;
  point.upper = iv.upper;
  if (draws_out) *draws_out = std::move(diffs);
  return point;
}

nlohmann::json MarginalResult::to_json(const McConfig& cfg) const {
  nlohmann::json j;
  j["strategy"] = strategy_string(strategy);
  j["windows"] = windows;
  j["mean"] = mean;
  j["lower"] = lower;
  j["upper"] = upper;
  j["config"] = cfg.to_json();
  return j;
}

namespace {

MarginalResult marginal_from_anchors(const McModel& model,
                                     std::vector<Anchor> anchors,
                                     const Strategy& strategy, int exposure,
                                     const McConfig& cfg, WarningLog* log) {
  if (anchors.empty())
    throw ValidationError("no admissible history windows");
  MarginalResult result;
  result.strategy = strategy;
  result.windows = static_cast<int>(anchors.size());
  result.draw_means =
      pooled_draw_means(model, anchors, strategy, exposure, cfg, log);
  result.mean = mean_of(result.draw_means);
  const Interval iv = percentile_interval(result.draw_means, cfg.level);
  result.lower = iv.lower;
  result.upper = iv.upper;
  return result;
}

}  // namespace

MarginalResult marginalized_outcome(const McModel& model, const Series& series,
                                    const Strategy& strategy, int exposure,
                                    const McConfig& cfg, WarningLog* log) {
  model.validate();
  cfg.validate();
  validate_binary_strategy(strategy);
  check_exposure(model.frame, exposure);
  const int len = static_cast<int>(strategy.size());

  std::vector<Anchor> anchors;
  for (int t0 = 1; t0 + len <= series.length(); ++t0) {
    if (!model.frame.in_range(t0 + 1) || !model.frame.in_range(t0 + len))
      continue;
    try {
      anchors.push_back(make_anchor(series, t0, len, cfg.others_observed,
                                    model.frame.n_exposures));
    } catch (const ValidationError&) {
      continue;  // missing history: window not admissible
    }
  }
  return marginal_from_anchors(model, std::move(anchors), strategy, exposure,
                               cfg, log);
}

MarginalResult marginalized_outcome(const McModel& model,
                                    const std::vector<HistorySeed>& histories,
                                    const Strategy& strategy, int exposure,
                                    const McConfig& cfg, WarningLog* log) {
  model.validate();
  cfg.validate();
  validate_binary_strategy(strategy);
  check_exposure(model.frame, exposure);
  const int len = static_cast<int>(strategy.size());

  std::vector<Anchor> anchors;
  for (const auto& h : histories) {
    if (h.a.size() != model.frame.n_exposures ||
        h.c.size() != model.frame.n_covariates)
      throw ValidationError("history seed dimensions do not match the model");
    check_window(model.frame, h.t0, len);
    anchors.push_back(Anchor{h, nullptr});
  }
  return marginal_from_anchors(model, std::move(anchors), strategy, exposure,
                               cfg, log);
}

nlohmann::json Recommendation::to_json(const McConfig& cfg) const {
  nlohmann::json j;
  j["t"] = t;
  j["q"] = q;
  j["max_active"] = max_active;
  j["exposure"] = exposure;
  j["candidates_total"] = candidates_total;
  j["candidates_by_active"] = candidates_by_active;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : ranked) {
    nlohmann::json row;
    row["strategy"] = strategy_string(r.strategy);
    row["active"] = r.active;
    row["estimate"] = r.estimate;
    row["lower"] = r.lower;
    row["upper"] = r.upper;
    rows.push_back(std::move(row));
  }
  j["ranked"] = rows;
  nlohmann::json ex = nlohmann::json::array();
  for (const auto& s : excluded) ex.push_back(strategy_string(s));
  j["excluded"] = ex;
  j["config"] = cfg.to_json();
  return j;
}

Recommendation recommend_strategy(const McModel& model, const Series& series,
                                  int t, int q, int max_active,
                                  const PositivityReport& positivity,
                                  int exposure, const McConfig& cfg,
                                  WarningLog* log) {
  model.validate();
  cfg.validate();
  check_exposure(model.frame, exposure);
  if (q < 0 || q > 12)
    throw ValidationError("recommendation horizon q must lie in 0..12");
  if (max_active < 0)
    throw ValidationError("max active count must be >= 0");
  const int p = q + 1;
  if (!positivity.covers(p))
    throw ValidationError("positivity report does not cover duration " +
                          std::to_string(p));
  check_window(model.frame, t - p, p);

  Recommendation rec;
  rec.t = t;
  rec.q = q;
  rec.max_active = max_active;
  rec.exposure = exposure;
  rec.candidates_by_active.assign(
      static_cast<std::size_t>(std::min(max_active, p)) + 1, 0);

  const Strategy zeros(static_cast<std::size_t>(p), 0.0);
  for (std::uint32_t mask = 0; mask < (std::uint32_t{1} << p); ++mask) {
    const int active = std::popcount(mask);
    if (active > max_active) continue;
    ++rec.candidates_total;
    ++rec.candidates_by_active[static_cast<std::size_t>(active)];
    const Strategy s = pattern_strategy(mask, p);
    if (!positivity.observed(p, mask)) {
      rec.excluded.push_back(s);
      continue;
    }
    const EstimandPoint pt =
        mc_estimand(model, series, t, s, zeros, exposure, cfg, log);
    rec.ranked.push_back({s, active, pt.estimate, pt.lower, pt.upper});
  }
  if (rec.ranked.empty())
    throw ValidationError("all strategies filtered out by the positivity guard");

  std::sort(rec.ranked.begin(), rec.ranked.end(),
            [](const RankedStrategy& a, const RankedStrategy& b) {
              if (a.estimate != b.estimate) return a.estimate < b.estimate;
              if (a.active != b.active) return a.active < b.active;
              return a.strategy < b.strategy;
            });
  return rec;
}

}  // namespace nof1
