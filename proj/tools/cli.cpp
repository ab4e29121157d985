#include "cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nof1/diagnostics.hpp"
#include "nof1/estimands.hpp"
#include "nof1/gformula.hpp"
#include "nof1/series.hpp"
#include "nof1/ssm.hpp"
#include "nof1/stats.hpp"
#include "nof1/synthgen.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nof1;

namespace nof1cli {
namespace {

struct VerifyFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double level = 0.0;
  bool level_set = false;
  bool mc = false;
  bool verify = false;
};

std::uint64_t fnv1a(const std::string& s,
                    std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, v);
  return buf;
}

// Everything a command needs: parsed config, path resolution, the
// effective config hash, and the output directory.
struct Ctx {
  CommonOpts opts;
  json cfg;
  fs::path cfg_dir;
  std::string hash;
  fs::path out;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ValidationError("failed to parse " + path.string() + ": " + e.what());
  }
}

Ctx make_ctx(const CommonOpts& opts) {
  Ctx ctx;
  ctx.opts = opts;
  std::ifstream in(opts.config_path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config " + opts.config_path);
  std::ostringstream raw;
  raw << in.rdbuf();
  try {
    ctx.cfg = json::parse(raw.str());
  } catch (const json::exception& e) {
    throw ValidationError("failed to parse " + opts.config_path + ": " +
                          e.what());
  }
  ctx.cfg_dir = fs::path(opts.config_path).parent_path();

  std::uint64_t h = fnv1a(raw.str());
  std::string overrides;
  if (opts.seed_set) overrides += "|seed=" + std::to_string(opts.seed);
  if (opts.level_set) overrides += "|level=" + fmt("%.17g", opts.level);
  if (opts.mc) overrides += "|mc";
  if (opts.verify) overrides += "|verify";
  ctx.hash = hex64(fnv1a(overrides, h));

  std::string out = opts.out_dir;
  if (out.empty()) out = ctx.cfg.value("out", std::string("."));
  ctx.out = opts.out_dir.empty() ? resolve(ctx.cfg_dir, out) : fs::path(out);
  fs::create_directories(ctx.out);
  return ctx;
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
  std::cout << "wrote " << path.string() << "\n";
}

void write_json_atomic(const fs::path& path, const json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

SeriesSchema schema_from_config(const Ctx& ctx) {
  if (!ctx.cfg.contains("schema"))
    throw ValidationError("config: missing 'schema'");
  const json& s = ctx.cfg.at("schema");
  if (s.is_string())
    return SeriesSchema::from_json(
        read_json_file(resolve(ctx.cfg_dir, s.get<std::string>())));
  return SeriesSchema::from_json(s);
}

Series series_from_config(const Ctx& ctx, const SeriesSchema& schema) {
  if (!ctx.cfg.contains("series"))
    throw ValidationError("config: missing 'series'");
  const fs::path path =
      resolve(ctx.cfg_dir, ctx.cfg.at("series").get<std::string>());
  return load_series_csv(path.string(), schema);
}

int resolve_exposure(const json& v, const SeriesSchema& schema) {
  int idx;
  if (v.is_string()) {
    idx = schema.exposure_index(v.get<std::string>());
    if (idx < 0)
      throw ValidationError("unknown exposure column '" +
                            v.get<std::string>() + "'");
  } else {
    idx = v.get<int>();
    if (idx < 0 || idx >= static_cast<int>(schema.exposures.size()))
      throw ValidationError("exposure column index out of range");
  }
  return idx;
}

Strategy parse_strategy(const json& v) {
  Strategy s;
  if (v.is_string()) {
    for (char c : v.get<std::string>()) {
      if (c != '0' && c != '1')
        throw ValidationError("strategy string must contain only 0 and 1");
      s.push_back(c == '1' ? 1.0 : 0.0);
    }
  } else {
    for (const auto& e : v) s.push_back(e.get<double>());
  }
  validate_binary_strategy(s);
  return s;
}

IntervalConfig interval_config(const Ctx& ctx) {
  IntervalConfig ic;
  if (ctx.cfg.contains("intervals")) {
    const json& j = ctx.cfg.at("intervals");
    ic.draws = j.value("draws", ic.draws);
    ic.level = j.value("level", ic.level);
    ic.seed = j.value("seed", ic.seed);
  }
  if (ctx.opts.seed_set) ic.seed = ctx.opts.seed;
  if (ctx.opts.level_set) ic.level = ctx.opts.level;
  return ic;
}

McConfig mc_config(const Ctx& ctx) {
  McConfig cfg;
  if (ctx.cfg.contains("mc")) cfg = McConfig::from_json(ctx.cfg.at("mc"));
  if (ctx.opts.seed_set) cfg.seed = ctx.opts.seed;
  if (ctx.opts.level_set) cfg.level = ctx.opts.level;
  cfg.validate();
  return cfg;
}

FitOptions fit_options(const Ctx& ctx) {
  FitOptions opts;
  if (ctx.cfg.contains("fit")) {
    const json& j = ctx.cfg.at("fit");
    opts.starts = j.value("starts", opts.starts);
    opts.budget = j.value("budget", opts.budget);
    opts.tol = j.value("tol", opts.tol);
  }
  return opts;
}

void apply_regimes(SsmSpec* spec, const json& regimes) {
  for (const auto& [name, rj] : regimes.items()) {
    const int idx = spec->column_index(name);
    if (idx < 0)
      throw ValidationError("unknown design column '" + name + "' in regimes");
    CoefficientRegime regime;
    regime.kind = regime_from_string(rj.at("kind").get<std::string>());
    if (rj.contains("change_points"))
      regime.change_points = rj.at("change_points").get<std::vector<int>>();
    spec->regimes[static_cast<std::size_t>(idx)] = regime;
  }
}

void report_warnings(const WarningLog& log) {
  for (const auto& w : log) std::cerr << "warning: " << w << "\n";
}

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(const CommonOpts& opts) {
  Ctx ctx = make_ctx(opts);
  TruthSpec spec = TruthSpec::from_json(ctx.cfg);
  if (opts.seed_set) spec.seed = opts.seed;

  GenerationResult gen = generate(spec);

  std::ostringstream csv;
  write_series_csv(gen.series, csv, "config_hash=" + ctx.hash);
  write_file_atomic(ctx.out / "series.csv", csv.str());

  json truth;
  truth["config_hash"] = ctx.hash;
  truth["spec"] = spec.to_json();
  truth["truth"] = gen.truth.to_json();
  truth["min_propensity"] = gen.min_propensity;
  truth["max_propensity"] = gen.max_propensity;
  write_json_atomic(ctx.out / "truth.json", truth);

  std::cout << "simulated T=" << gen.series.length() << " propensity range ["
            << format_number(gen.min_propensity) << ", "
            << format_number(gen.max_propensity) << "]\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fit

void append_coefficient_table(std::ostringstream& os, const FittedSsm& fit,
                              const std::string& model_name,
                              const std::string& role, double level) {
  const double z = normal_quantile(0.5 + level / 2.0);
  os << "model " << model_name << " (" << role << ")\n";
  os << "  " << std::left << std::setw(14) << "column" << std::setw(15)
     << "segment" << std::right << std::setw(11) << "estimate" << std::setw(10)
     << "se" << "  " << std::left
     << fmt("%.0f", level * 100) + "% interval" << "\n";
  for (int col = 0; col < fit.spec.dim(); ++col) {
    const auto& column = fit.spec.columns[static_cast<std::size_t>(col)];
    const RegimeKind kind = fit.spec.regimes[static_cast<std::size_t>(col)].kind;
    if (kind == RegimeKind::kRandomWalk) {
      double est = 0.0, se = 0.0;
      for (int r = 0; r < fit.rows(); ++r) {
        est += fit.coefficient(fit.t_begin + r, col);
        se += fit.standard_error(fit.t_begin + r, col);
      }
      est /= fit.rows();
      se /= fit.rows();
      os << "  " << std::left << std::setw(14) << column.name << std::setw(15)
         << "(random walk)" << std::right << std::setw(11) << fmt("%.4f", est)
         << std::setw(10) << fmt("%.4f", se) << "  time-averaged\n";
      continue;
    }
    const auto segs = fit.segments(col);
    for (std::size_t i = 0; i < segs.size(); ++i) {
      const int at = segs[i].second;
      const double est = fit.coefficient(at, col);
      const double se = fit.standard_error(at, col);
      const double lo = est - z * se, hi = est + z * se;
      std::string segment;
      if (segs.size() > 1) segment = "(" + std::to_string(i + 1) + ")";
      os << "  " << std::left << std::setw(14) << column.name << std::setw(15)
         << segment << std::right << std::setw(11) << fmt("%.4f", est)
         << std::setw(10) << fmt("%.4f", se) << "  [" << fmt("%.4f", lo)
         << ", " << fmt("%.4f", hi) << "]" << ((lo > 0.0 || hi < 0.0) ? " *" : "")
         << "\n";
    }
  }
  os << "  residual variance: " << fmt("%.6g", fit.obs_variance) << "\n";
  std::string wcols;
  for (int col = 0; col < fit.spec.dim(); ++col)
    if (fit.spec.regimes[static_cast<std::size_t>(col)].kind ==
        RegimeKind::kRandomWalk) {
      if (!wcols.empty()) wcols += ", ";
      wcols += fit.spec.columns[static_cast<std::size_t>(col)].name + "=" +
               fmt("%.6g", fit.state_variances(col));
    }
  if (!wcols.empty()) os << "  state variances: " << wcols << "\n";
  os << "  loglik: " << fmt("%.4f", fit.loglik)
     << "  converged: " << (fit.converged ? "yes" : "no")
     << "  evaluations: " << fit.evaluations << "\n";
}

void append_coefficient_rows(std::ostringstream& os, const FittedSsm& fit,
                             const std::string& model_name) {
  for (int r = 0; r < fit.rows(); ++r)
    for (int col = 0; col < fit.spec.dim(); ++col) {
      const int t = fit.t_begin + r;
      os << t << ',' << model_name << ','
         << fit.spec.columns[static_cast<std::size_t>(col)].name << ','
         << format_number(fit.coefficient(t, col)) << ','
         << format_number(fit.standard_error(t, col)) << '\n';
    }
}

int cmd_fit(const CommonOpts& opts) {
  Ctx ctx = make_ctx(opts);
  const SeriesSchema schema = schema_from_config(ctx);
  const Series series = series_from_config(ctx, schema);
  const DagConfig dag = DagConfig::standard();
  const FitOptions fopts = fit_options(ctx);
  const double level =
      ctx.opts.level_set ? ctx.opts.level : ctx.cfg.value("level", 0.90);

  WarningLog log;
  SsmSpec outcome_spec =
      SsmSpec::standard(schema, dag, VarRole::kOutcome, 0);
  if (ctx.cfg.contains("regimes"))
    apply_regimes(&outcome_spec, ctx.cfg.at("regimes"));
  if (ctx.cfg.contains("diffuse"))
    outcome_spec.diffuse = ctx.cfg.at("diffuse").get<double>();

  FittedSsm outcome_fit;
  if (ctx.cfg.contains("scan")) {
    const json& sj = ctx.cfg.at("scan");
    ChangePointOptions copts;
    copts.max_points = sj.value("max_points", copts.max_points);
    copts.grid_stride = sj.value("grid_stride", copts.grid_stride);
    copts.min_segment = sj.value("min_segment", copts.min_segment);
    copts.per_point_params = sj.value("per_point_params", copts.per_point_params);
    copts.fit = fopts;
    const std::string coefficient = sj.at("coefficient").get<std::string>();
    const int scan_col = outcome_spec.column_index(coefficient);
    if (scan_col < 0)
      throw ValidationError("unknown design column '" + coefficient +
                            "' in scan");
    outcome_spec.regimes[static_cast<std::size_t>(scan_col)].kind =
        RegimeKind::kPeriodicStable;
    ChangePointResult result =
        infer_change_points(outcome_spec, series, coefficient, copts, &log);
    outcome_fit = std::move(result.fitted);

    json scan;
    scan["config_hash"] = ctx.hash;
    scan["coefficient"] = coefficient;
    scan["change_points"] = result.change_points;
    scan["bic"] = result.bic;
    json segs = json::array();
    for (std::size_t i = 0; i < result.segments.size(); ++i) {
      json s;
      s["from"] = result.segments[i].first;
      s["to"] = result.segments[i].second;
      s["estimate"] = result.segment_estimates[i];
      s["se"] = result.segment_ses[i];
      segs.push_back(std::move(s));
    }
    scan["segments"] = segs;
    json entries = json::array();
    for (const auto& e : result.scan) {
      json s;
      s["points"] = e.points;
      s["bic"] = e.bic;
      entries.push_back(std::move(s));
    }
    scan["scan"] = entries;
    write_json_atomic(ctx.out / "scan.json", scan);
  } else {
    outcome_fit = fit_mle(outcome_spec, series, fopts, &log);
  }

  std::vector<FittedSsm> covariate_fits;
  for (int i = 0; i < static_cast<int>(schema.covariates.size()); ++i) {
    SsmSpec spec = SsmSpec::standard(schema, dag, VarRole::kCovariate, i);
    if (ctx.cfg.contains("covariate_regimes")) {
      const json& cr = ctx.cfg.at("covariate_regimes");
      if (cr.contains(schema.covariates[static_cast<std::size_t>(i)]))
        apply_regimes(&spec,
                      cr.at(schema.covariates[static_cast<std::size_t>(i)]));
    }
    covariate_fits.push_back(fit_mle(spec, series, fopts, &log));
  }

  json of = outcome_fit.to_json();
  of["config_hash"] = ctx.hash;
  write_json_atomic(ctx.out / "fitted_outcome.json", of);
  for (std::size_t i = 0; i < covariate_fits.size(); ++i) {
    json cf = covariate_fits[i].to_json();
    cf["config_hash"] = ctx.hash;
    write_json_atomic(ctx.out / ("fitted_" + schema.covariates[i] + ".json"),
                      cf);
  }

  std::ostringstream csv;
  csv << "# config_hash=" << ctx.hash << "\n";
  csv << "t,model,column,estimate,se\n";
  append_coefficient_rows(csv, outcome_fit, schema.outcome);
  for (std::size_t i = 0; i < covariate_fits.size(); ++i)
    append_coefficient_rows(csv, covariate_fits[i], schema.covariates[i]);
  write_file_atomic(ctx.out / "coefficients.csv", csv.str());

  std::ostringstream table;
  table << "# config_hash=" << ctx.hash << "\n";
  append_coefficient_table(table, outcome_fit, schema.outcome, "outcome",
                           level);
  for (std::size_t i = 0; i < covariate_fits.size(); ++i) {
    table << "\n";
    append_coefficient_table(table, covariate_fits[i], schema.covariates[i],
                             "covariate", level);
  }
  write_file_atomic(ctx.out / "coefficients.txt", table.str());

  report_warnings(log);
  std::cout << "fit loglik " << fmt("%.4f", outcome_fit.loglik)
            << (outcome_fit.converged ? "" : " (not converged)") << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// estimate

struct FittedModels {
  FittedSsm outcome;
  std::vector<FittedSsm> covariates;
};

FittedModels load_fitted(const Ctx& ctx, const SeriesSchema& schema) {
  if (!ctx.cfg.contains("fitted"))
    throw ValidationError("config: missing 'fitted' directory");
  const fs::path dir =
      resolve(ctx.cfg_dir, ctx.cfg.at("fitted").get<std::string>());
  FittedModels models;
  models.outcome =
      FittedSsm::from_json(read_json_file(dir / "fitted_outcome.json"));
  for (const auto& name : schema.covariates)
    models.covariates.push_back(
        FittedSsm::from_json(read_json_file(dir / ("fitted_" + name + ".json"))));
  return models;
}

EstimandKind kind_from_string(const std::string& s) {
  if (s == "CE") return EstimandKind::kCe;
  if (s == "LDE") return EstimandKind::kLde;
  if (s == "LE") return EstimandKind::kLe;
  if (s == "TE") return EstimandKind::kTe;
  if (s == "GE") return EstimandKind::kGe;
  if (s == "cumDE") return EstimandKind::kCumDe;
  if (s == "cumOE") return EstimandKind::kCumOe;
  throw ValidationError("unknown estimand kind '" + s + "'");
}

EstimandRequest parse_request(const json& j, const SeriesSchema& schema) {
  EstimandRequest req;
  req.kind = kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("exposure"))
    req.exposure = resolve_exposure(j.at("exposure"), schema);
  req.q = j.value("q", req.q);
  if (j.contains("horizon")) req.q = j.at("horizon").get<int>();
  if (j.contains("strategy")) req.strategy = parse_strategy(j.at("strategy"));
  req.tolerance = j.value("tolerance", req.tolerance);
  req.validate();
  return req;
}

// Strategy arm realizing the request as a do-contrast against all-zeros.
Strategy mc_strategy(const EstimandRequest& req) {
  switch (req.kind) {
    case EstimandKind::kCe:
      return Strategy{1.0};
    case EstimandKind::kLe: {
      Strategy s(static_cast<std::size_t>(req.q) + 1, 0.0);
      s.front() = 1.0;
      return s;
    }
    case EstimandKind::kTe:
      return Strategy(static_cast<std::size_t>(req.q) + 1, 1.0);
    case EstimandKind::kGe:
      return req.strategy;
    default:
      throw ValidationError("MC mode supports CE, LE, TE and GE requests");
  }
}

bool mc_admissible(const EstimandRequest& req, int t, const Series& series) {
  const int len = static_cast<int>(mc_strategy(req).size());
  if (t - len < 1) return false;
  try {
    HistorySeed::from_series(series, t - len);
  } catch (const ValidationError&) {
    return false;
  }
  return true;
}

std::vector<int> request_times(const json& j, const EstimandRequest& req,
                               const CoefficientFrame& frame, bool mc_mode,
                               const Series& series) {
  auto in_frame = [&](int t) {
    int lo = 0, hi = 0;
    req.window(t, &lo, &hi);
    return lo >= frame.t_begin && hi <= frame.t_end();
  };
  std::vector<int> ts;
  if (j.contains("t")) {
    const json& tv = j.at("t");
    if (tv.is_array())
      for (const auto& e : tv) ts.push_back(e.get<int>());
    else if (tv.is_object())
      for (int t = tv.at("from").get<int>(); t <= tv.at("to").get<int>(); ++t)
        ts.push_back(t);
    else
      ts.push_back(tv.get<int>());
    for (int t : ts)
      if (!in_frame(t) || (mc_mode && !mc_admissible(req, t, series)))
        throw ValidationError("request " + req.name() + ": t=" +
                              std::to_string(t) +
                              " outside the admissible range");
  } else {
    for (int t = frame.t_begin; t <= frame.t_end(); ++t)
      if (in_frame(t) && (!mc_mode || mc_admissible(req, t, series)))
        ts.push_back(t);
    if (ts.empty())
      throw ValidationError("request " + req.name() + ": no admissible times");
  }
  return ts;
}

int cmd_estimate(const CommonOpts& opts) {
  Ctx ctx = make_ctx(opts);
  const SeriesSchema schema = schema_from_config(ctx);
  const Series series = series_from_config(ctx, schema);
  const FittedModels fitted = load_fitted(ctx, schema);
  const CoefficientFrame frame =
      make_coefficient_frame(fitted.outcome, fitted.covariates);
  const IntervalConfig icfg = interval_config(ctx);
  const McConfig mcfg = mc_config(ctx);

  if (!ctx.cfg.contains("requests") || ctx.cfg.at("requests").empty())
    throw ValidationError("config: missing 'requests'");

  WarningLog log;
  McModel model;
  if (opts.mc || opts.verify)
    model = McModel::from_fits(fitted.outcome, fitted.covariates);

  std::vector<EstimandSeries> all;
  std::vector<std::vector<int>> all_times;
  std::vector<EstimandRequest> requests;
  for (const auto& rj : ctx.cfg.at("requests")) {
    const EstimandRequest req = parse_request(rj, schema);
    const std::vector<int> ts =
        request_times(rj, req, frame, opts.mc, series);
    EstimandSeries series_out;
    if (opts.mc) {
      series_out.name = req.name();
      series_out.request = req;
      const Strategy arm = mc_strategy(req);
      const Strategy zeros(arm.size(), 0.0);
      for (int t : ts) {
        const EstimandPoint pt = mc_estimand(model, series, t, arm, zeros,
                                             req.exposure, mcfg, &log);
        series_out.points.push_back(pt);
      }
    } else {
      series_out = estimand_series(frame, req, ts, icfg, &log);
    }
    all.push_back(std::move(series_out));
    all_times.push_back(ts);
    requests.push_back(req);
  }

  std::ostringstream csv;
  write_estimands_csv(all, csv, "config_hash=" + ctx.hash);
  write_file_atomic(ctx.out / "estimands.csv", csv.str());

  json out;
  out["config_hash"] = ctx.hash;
  out["mode"] = opts.mc ? "mc" : "closed";
  if (opts.mc) out["mc_config"] = mcfg.to_json();
  json series_json = json::array();
  for (const auto& s : all) series_json.push_back(s.to_json());
  out["series"] = series_json;
  write_json_atomic(ctx.out / "estimands.json", out);

  if (opts.verify) {
    bool ok = true;
    double worst = 0.0;
    int checked = 0;
    for (std::size_t i = 0; i < requests.size(); ++i) {
      const EstimandRequest& req = requests[i];
      if (req.kind != EstimandKind::kCe && req.kind != EstimandKind::kLe &&
          req.kind != EstimandKind::kTe && req.kind != EstimandKind::kGe) {
        std::cerr << "verify: skipping " << req.name()
                  << " (no Monte Carlo counterpart)\n";
        continue;
      }
      const Strategy arm = mc_strategy(req);
      const Strategy zeros(arm.size(), 0.0);
      for (int t : all_times[i]) {
        if (!mc_admissible(req, t, series)) continue;
        const double closed = point_estimand(frame, req, t);
        std::vector<double> draws;
        const EstimandPoint pt = mc_estimand(model, series, t, arm, zeros,
                                             req.exposure, mcfg, &log, &draws);
        const double se =
            sd_of(draws) / std::sqrt(static_cast<double>(draws.size()));
        const double dev = std::abs(closed - pt.estimate);
        worst = std::max(worst, se > 0.0 ? dev / se : dev);
        ++checked;
        if (dev > 3.0 * se + 1e-9) {
          ok = false;
          std::cerr << "verify: " << req.name() << " t=" << t
                    << " closed=" << format_number(closed)
                    << " mc=" << format_number(pt.estimate)
                    << " se=" << format_number(se) << "\n";
        }
      }
    }
    std::cout << "verify: " << checked
              << " points, worst |closed-mc|/se = " << fmt("%.3f", worst)
              << "\n";
    if (!ok)
      throw VerifyFailure("closed-form vs Monte Carlo verification failed");
  }

  report_warnings(log);
  return 0;
}

// ---------------------------------------------------------------------------
// diagnose

int cmd_diagnose(const CommonOpts& opts) {
  Ctx ctx = make_ctx(opts);
  const SeriesSchema schema = schema_from_config(ctx);
  const Series series = series_from_config(ctx, schema);
  const IntervalConfig icfg = interval_config(ctx);

  WarningLog log;
  json out;
  out["config_hash"] = ctx.hash;

  if (ctx.cfg.contains("positivity")) {
    const json& pj = ctx.cfg.at("positivity");
    const int exposure = pj.contains("exposure")
                             ? resolve_exposure(pj.at("exposure"), schema)
                             : 0;
    const int max_duration = pj.value("max_duration", 10);
    const PositivityReport report =
        positivity_report(series, exposure, max_duration);
    std::ostringstream csv;
    write_positivity_csv(report, csv, "config_hash=" + ctx.hash);
    write_file_atomic(ctx.out / "positivity.csv", csv.str());
    json pos = report.to_json();
    pos["config_hash"] = ctx.hash;
    write_json_atomic(ctx.out / "positivity.json", pos);
    out["positivity"] = report.to_json();
  }

  const bool needs_frame = ctx.cfg.contains("impulse") ||
                           ctx.cfg.contains("step") ||
                           ctx.cfg.contains("general");
  if (needs_frame) {
    const FittedModels fitted = load_fitted(ctx, schema);
    const CoefficientFrame frame =
        make_coefficient_frame(fitted.outcome, fitted.covariates);

    if (ctx.cfg.contains("impulse")) {
      const json& ij = ctx.cfg.at("impulse");
      const int exposure = ij.contains("exposure")
                               ? resolve_exposure(ij.at("exposure"), schema)
                               : 0;
      const ResponseSeries rs =
          impulse_impact(frame, ij.at("t").get<int>(),
                         ij.value("max_q", 14), exposure, icfg, &log);
      std::ostringstream csv;
      write_response_csv({rs}, csv, "config_hash=" + ctx.hash);
      write_file_atomic(ctx.out / "impulse.csv", csv.str());
      out["impulse"] = rs.to_json();
    }

    if (ctx.cfg.contains("step")) {
      const json& sj = ctx.cfg.at("step");
      const int exposure = sj.contains("exposure")
                               ? resolve_exposure(sj.at("exposure"), schema)
                               : 0;
      const ResponseSeries rs =
          step_response(frame, sj.at("t").get<int>(), sj.value("max_q", 14),
                        exposure, icfg, &log);
      const StepSummary summary = step_response_summary(rs);
      std::ostringstream csv;
      write_response_csv({rs}, csv, "config_hash=" + ctx.hash);
      csv << "# max_effect=" << format_number(summary.max_effect) << "\n";
      csv << "# q80=" << summary.q80 << "\n";
      csv << "# q95=" << summary.q95 << "\n";
      write_file_atomic(ctx.out / "step.csv", csv.str());
      json stepj;
      stepj["series"] = rs.to_json();
      stepj["max_effect"] = summary.max_effect;
      stepj["q80"] = summary.q80;
      stepj["q95"] = summary.q95;
      out["step"] = stepj;
    }

    if (ctx.cfg.contains("general")) {
      const json& gj = ctx.cfg.at("general");
      const int exposure = gj.contains("exposure")
                               ? resolve_exposure(gj.at("exposure"), schema)
                               : 0;
      std::vector<Strategy> strategies;
      for (const auto& s : gj.at("strategies"))
        strategies.push_back(parse_strategy(s));
      const auto all = general_response(frame, gj.at("t").get<int>(),
                                        strategies, gj.value("tail", 7),
                                        exposure, icfg, &log);
      std::ostringstream csv;
      write_response_csv(all, csv, "config_hash=" + ctx.hash);
      write_file_atomic(ctx.out / "general.csv", csv.str());
      json gens = json::array();
      for (const auto& rs : all) gens.push_back(rs.to_json());
      out["general"] = gens;
    }
  }

  write_json_atomic(ctx.out / "diagnostics.json", out);
  report_warnings(log);
  return 0;
}

// ---------------------------------------------------------------------------
// recommend

int cmd_recommend(const CommonOpts& opts) {
  Ctx ctx = make_ctx(opts);
  const SeriesSchema schema = schema_from_config(ctx);
  const Series series = series_from_config(ctx, schema);
  const FittedModels fitted = load_fitted(ctx, schema);
  const McModel model = McModel::from_fits(fitted.outcome, fitted.covariates);
  const McConfig mcfg = mc_config(ctx);

  if (!ctx.cfg.contains("recommend"))
    throw ValidationError("config: missing 'recommend'");
  const json& rj = ctx.cfg.at("recommend");
  const int t = rj.at("t").get<int>();
  const int q = rj.at("q").get<int>();
  const int max_active = rj.at("max_active").get<int>();
  const int exposure = rj.contains("exposure")
                           ? resolve_exposure(rj.at("exposure"), schema)
                           : 0;

  WarningLog log;
  const PositivityReport report = positivity_report(series, exposure, q + 1);
  const Recommendation rec = recommend_strategy(model, series, t, q, max_active,
                                                report, exposure, mcfg, &log);

  json out = rec.to_json(mcfg);
  out["config_hash"] = ctx.hash;
  write_json_atomic(ctx.out / "recommend.json", out);

  std::ostringstream csv;
  csv << "# config_hash=" << ctx.hash << "\n";
  csv << "rank,strategy,active,observed,estimate,lower,upper\n";
  for (std::size_t i = 0; i < rec.ranked.size(); ++i) {
    const RankedStrategy& r = rec.ranked[i];
    csv << (i + 1) << ',' << strategy_string(r.strategy) << ',' << r.active
        << ",1," << format_number(r.estimate) << ','
        << format_number(r.lower) << ',' << format_number(r.upper) << '\n';
  }
  for (const auto& s : rec.excluded)
    csv << ',' << strategy_string(s) << ',' << active_count(s) << ",0,,,\n";
  write_file_atomic(ctx.out / "recommend.csv", csv.str());

  report_warnings(log);
  if (!rec.ranked.empty())
    std::cout << "top strategy " << strategy_string(rec.ranked.front().strategy)
              << " estimate "
              << format_number(rec.ranked.front().estimate) << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"time-varying causal inference for single-subject trials"};
  app.require_subcommand(1);

  CommonOpts opts;
  auto add_common = [&](CLI::App* sub, bool mc_flags) {
    sub->add_option("--config", opts.config_path, "config JSON path")
        ->required();
    sub->add_option("--out", opts.out_dir, "output directory");
    sub->add_option("--seed", opts.seed, "override all RNG seeds");
    sub->add_option("--level", opts.level, "override interval level")
        ->check(CLI::Range(0.0, 1.0));
    if (mc_flags) {
      sub->add_flag("--mc", opts.mc, "estimate by Monte Carlo simulation");
      sub->add_flag("--verify", opts.verify,
                    "cross-check closed forms against Monte Carlo");
    }
  };

  CLI::App* sim = app.add_subcommand("simulate", "generate a synthetic series");
  CLI::App* fit = app.add_subcommand("fit", "fit outcome and covariate models");
  CLI::App* est = app.add_subcommand("estimate", "compute causal estimands");
  CLI::App* diag = app.add_subcommand("diagnose", "positivity and response plots");
  CLI::App* rec = app.add_subcommand("recommend", "rank intervention strategies");
  add_common(sim, false);
  add_common(fit, false);
  add_common(est, true);
  add_common(diag, false);
  add_common(rec, false);

  std::vector<const char*> argv;
  argv.push_back("nof1");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* active = app.get_subcommands().front();
  opts.seed_set = active->count("--seed") > 0;
  opts.level_set = active->count("--level") > 0;

  try {
    if (active == sim) return cmd_simulate(opts);
    if (active == fit) return cmd_fit(opts);
    if (active == est) return cmd_estimate(opts);
    if (active == diag) return cmd_diagnose(opts);
    return cmd_recommend(opts);
  } catch (const VerifyFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace nof1cli
