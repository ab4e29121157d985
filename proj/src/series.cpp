#include "nof1/series.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace nof1 {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  for (auto& field : out) {
    const auto b = field.find_first_not_of(" \t");
    const auto e = field.find_last_not_of(" \t");
    field = (b == std::string::npos) ? std::string() : field.substr(b, e - b + 1);
  }
  return out;
}

bool is_missing_cell(const std::string& s) { return s.empty() || s == "NA"; }

double parse_cell(const std::string& s, int t, const std::string& col) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ValidationError("non-numeric value '" + s + "' in column '" + col +
                          "' at t=" + std::to_string(t));
  return v;
}

}  // namespace

const char* role_name(VarRole role) {
  switch (role) {
    case VarRole::kExposure: return "exposure";
    case VarRole::kOutcome: return "outcome";
    case VarRole::kCovariate: return "covariate";
  }
  return "?";
}

int SeriesSchema::exposure_index(const std::string& name) const {
  for (std::size_t j = 0; j < exposures.size(); ++j)
    if (exposures[j].name == name) return static_cast<int>(j);
  return -1;
}

int SeriesSchema::covariate_index(const std::string& name) const {
  for (std::size_t k = 0; k < covariates.size(); ++k)
    if (covariates[k] == name) return static_cast<int>(k);
  return -1;
}

const std::string& SeriesSchema::column_name(VarRole role, int col) const {
  switch (role) {
    case VarRole::kExposure: return exposures.at(col).name;
    case VarRole::kOutcome: return outcome;
    case VarRole::kCovariate: return covariates.at(col);
  }
  throw ValidationError("bad role");
}

void SeriesSchema::validate() const {
  if (time_column.empty()) throw ValidationError("schema: empty time column");
  if (outcome.empty()) throw ValidationError("schema: empty outcome column");
  if (exposures.empty())
    throw ValidationError("schema: at least one exposure column required");
  std::vector<std::string> names{time_column, outcome};
  for (const auto& e : exposures) names.push_back(e.name);
  for (const auto& c : covariates) names.push_back(c);
  for (std::size_t i = 0; i < names.size(); ++i)
    for (std::size_t j = i + 1; j < names.size(); ++j)
      if (names[i] == names[j])
        throw ValidationError("schema: duplicate column '" + names[i] + "'");
}

SeriesSchema SeriesSchema::from_json(const nlohmann::json& j) {
  SeriesSchema s;
  s.time_column = j.value("time", "t");
  s.outcome = j.at("outcome").get<std::string>();
  for (const auto& e : j.at("exposures")) {
    if (e.is_string()) {
      s.exposures.push_back({e.get<std::string>(), true});
    } else {
      s.exposures.push_back(
          {e.at("name").get<std::string>(), e.value("binary", true)});
    }
  }
  if (j.contains("covariates"))
    for (const auto& c : j.at("covariates"))
      s.covariates.push_back(c.get<std::string>());
  s.validate();
  return s;
}

nlohmann::json SeriesSchema::to_json() const {
  nlohmann::json j;
  j["time"] = time_column;
  j["outcome"] = outcome;
  j["exposures"] = nlohmann::json::array();
  for (const auto& e : exposures)
    j["exposures"].push_back({{"name", e.name}, {"binary", e.binary}});
  j["covariates"] = covariates;
  return j;
}

Series::Series(SeriesSchema schema, Eigen::MatrixXd exposures,
               Eigen::VectorXd outcome, Eigen::MatrixXd covariates)
    : schema_(std::move(schema)),
      exposures_(std::move(exposures)),
      outcome_(std::move(outcome)),
      covariates_(std::move(covariates)) {
  schema_.validate();
  const int T = length();
  if (T < 1) throw ValidationError("series: empty series");
  if (exposures_.rows() != T)
    throw ValidationError("series: exposure/outcome length mismatch");
  if (covariates_.rows() != T + 1)
    throw ValidationError(
        "series: covariate array must carry T+1 rows (baseline at index 0)");
  if (exposures_.cols() != static_cast<int>(schema_.exposures.size()))
    throw ValidationError("series: exposure width mismatch with schema");
  if (covariates_.cols() != static_cast<int>(schema_.covariates.size()))
    throw ValidationError("series: covariate width mismatch with schema");
  for (int j = 0; j < exposure_count(); ++j) {
    if (!schema_.exposures[j].binary) continue;
    for (int t = 1; t <= T; ++t) {
      const double v = exposures_(t - 1, j);
      if (!std::isnan(v) && v != 0.0 && v != 1.0)
        throw ValidationError("non-binary value in binary exposure column '" +
                              schema_.exposures[j].name +
                              "' at t=" + std::to_string(t));
    }
  }
}

double Series::exposure(int t, int col) const {
  if (t < 1 || t > length())
    throw ValidationError("exposure index t=" + std::to_string(t) +
                          " outside 1..T");
  return exposures_(t - 1, col);
}

double Series::outcome(int t) const {
  if (t < 1 || t > length())
    throw ValidationError("outcome index t=" + std::to_string(t) +
                          " outside 1..T");
  return outcome_(t - 1);
}

double Series::covariate(int t, int col) const {
  if (t < 0 || t > length())
    throw ValidationError("covariate index t=" + std::to_string(t) +
                          " outside 0..T");
  return covariates_(t, col);
}

bool Series::exposure_missing(int t, int col) const {
  return std::isnan(exposure(t, col));
}
bool Series::outcome_missing(int t) const { return std::isnan(outcome(t)); }
bool Series::covariate_missing(int t, int col) const {
  return std::isnan(covariate(t, col));
}

double Series::value(VarRole role, int t, int col) const {
  switch (role) {
    case VarRole::kExposure: return exposure(t, col);
    case VarRole::kOutcome: return outcome(t);
    case VarRole::kCovariate: return covariate(t, col);
  }
  throw ValidationError("bad role");
}

bool Series::missing(VarRole role, int t, int col) const {
  return std::isnan(value(role, t, col));
}

const std::vector<ParentRef>& DagConfig::parents(VarRole response) const {
  switch (response) {
    case VarRole::kOutcome: return outcome_parents;
    case VarRole::kCovariate: return covariate_parents;
    case VarRole::kExposure: return exposure_parents;
  }
  throw ValidationError("bad role");
}

int DagConfig::max_lag() const {
  int m = 0;
  for (const auto* list : {&outcome_parents, &covariate_parents, &exposure_parents})
    for (const auto& p : *list) m = std::max(m, p.lag);
  return m;
}

void DagConfig::validate() const {
  auto check = [](VarRole response, const std::vector<ParentRef>& list) {
    for (const auto& p : list) {
      if (p.lag < 0) throw ValidationError("dag: negative lag");
      if (p.lag > 0) continue;
      // Within a time index the ordering is A -> Y -> C: only strictly
      // earlier variables may appear at lag 0.
      const bool ok =
          (response == VarRole::kOutcome && p.role == VarRole::kExposure) ||
          (response == VarRole::kCovariate &&
           (p.role == VarRole::kExposure || p.role == VarRole::kOutcome));
      if (!ok)
        throw ValidationError(std::string("dag: lag-0 parent of role ") +
                              role_name(p.role) + " not allowed for " +
                              role_name(response) + " response");
    }
  };
  check(VarRole::kOutcome, outcome_parents);
  check(VarRole::kCovariate, covariate_parents);
  check(VarRole::kExposure, exposure_parents);
  if (max_lag() < 1) throw ValidationError("dag: max lag must be >= 1");
}

DagConfig DagConfig::standard() {
  DagConfig cfg;
  cfg.outcome_parents = {{VarRole::kOutcome, 1},
                         {VarRole::kExposure, 0},
                         {VarRole::kExposure, 1},
                         {VarRole::kCovariate, 1}};
  cfg.covariate_parents = {{VarRole::kCovariate, 1},
                           {VarRole::kExposure, 0},
                           {VarRole::kOutcome, 0}};
  cfg.exposure_parents = {{VarRole::kExposure, 1},
                          {VarRole::kCovariate, 1},
                          {VarRole::kOutcome, 1}};
  return cfg;
}

VarRole role_from_string(const std::string& s) {
  if (s == "exposure") return VarRole::kExposure;
  if (s == "outcome") return VarRole::kOutcome;
  if (s == "covariate") return VarRole::kCovariate;
  throw ValidationError("unknown variable role '" + s + "'");
}

namespace {

nlohmann::json parents_to_json(const std::vector<ParentRef>& list) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : list)
    arr.push_back({{"role", role_name(p.role)}, {"lag", p.lag}});
  return arr;
}

std::vector<ParentRef> parents_from_json(const nlohmann::json& arr) {
  std::vector<ParentRef> out;
  for (const auto& p : arr)
    out.push_back({role_from_string(p.at("role").get<std::string>()),
                   p.at("lag").get<int>()});
  return out;
}

}  // namespace

DagConfig DagConfig::from_json(const nlohmann::json& j) {
  DagConfig cfg;
  cfg.outcome_parents = parents_from_json(j.at("outcome_parents"));
  cfg.covariate_parents = parents_from_json(j.at("covariate_parents"));
  if (j.contains("exposure_parents"))
    cfg.exposure_parents = parents_from_json(j.at("exposure_parents"));
  cfg.validate();
  return cfg;
}

nlohmann::json DagConfig::to_json() const {
  return {{"outcome_parents", parents_to_json(outcome_parents)},
          {"covariate_parents", parents_to_json(covariate_parents)},
          {"exposure_parents", parents_to_json(exposure_parents)}};
}

const HistoryEntry* HistorySlice::find(VarRole role, int lag, int column) const {
  for (const auto& e : entries)
    if (e.ref.role == role && e.ref.lag == lag && e.column == column) return &e;
  return nullptr;
}

namespace {

int role_width(const SeriesSchema& schema, VarRole role) {
  switch (role) {
    case VarRole::kExposure: return static_cast<int>(schema.exposures.size());
    case VarRole::kOutcome: return 1;
    case VarRole::kCovariate: return static_cast<int>(schema.covariates.size());
  }
  return 0;
}

std::string parent_name(const SeriesSchema& schema, const ParentRef& ref,
                        int col) {
  std::string name = schema.column_name(ref.role, col);
  if (ref.lag > 0) name += ".l" + std::to_string(ref.lag);
  return name;
}

}  // namespace

std::vector<DesignColumn> design_columns(const SeriesSchema& schema,
                                         const DagConfig& cfg,
                                         VarRole response) {
  cfg.validate();
  std::vector<DesignColumn> cols;
  cols.push_back({true, {}, 0, "intercept"});
  for (const auto& parent : cfg.parents(response)) {
    const int width = role_width(schema, parent.role);
    if (width == 0)
      throw ValidationError(std::string("dag: parent role ") +
                            role_name(parent.role) +
                            " has no columns in the schema");
    for (int c = 0; c < width; ++c)
      cols.push_back({false, parent, c, parent_name(schema, parent, c)});
  }
  return cols;
}

HistorySlice relevant_history(const Series& series, const DagConfig& cfg,
                              VarRole response, int t) {
  cfg.validate();
  const int burn_in = cfg.max_lag();
  if (t <= burn_in || t > series.length())
    throw ValidationError("relevant_history: t=" + std::to_string(t) +
                          " is inside the burn-in window (t <= " +
                          std::to_string(burn_in) + ") or beyond T");
  HistorySlice slice;
  slice.response = response;
  slice.t = t;
  for (const auto& parent : cfg.parents(response)) {
    const int width = role_width(series.schema(), parent.role);
    for (int c = 0; c < width; ++c) {
      const int s = t - parent.lag;
      if (series.missing(parent.role, s, c))
        throw ValidationError("relevant_history: parent " +
                              parent_name(series.schema(), parent, c) +
                              " missing at t=" + std::to_string(t));
      slice.entries.push_back({parent, c,
                               parent_name(series.schema(), parent, c),
                               series.value(parent.role, s, c)});
    }
  }
  return slice;
}

Eigen::RowVectorXd design_row(const Series& series, const DagConfig& cfg,
                              VarRole response, int t) {
  const HistorySlice slice = relevant_history(series, cfg, response, t);
  Eigen::RowVectorXd row(slice.entries.size() + 1);
  row(0) = 1.0;
  for (std::size_t i = 0; i < slice.entries.size(); ++i)
    row(static_cast<int>(i) + 1) = slice.entries[i].value;
  return row;
}

ModelFrame build_model_frame(const Series& series, const DagConfig& cfg,
                             VarRole response, int response_col) {
  cfg.validate();
  return build_model_frame(series, design_columns(series.schema(), cfg, response),
                           response, response_col);
}

ModelFrame build_model_frame(const Series& series,
                             const std::vector<DesignColumn>& columns,
                             VarRole response, int response_col) {
  if (response == VarRole::kExposure)
    throw ValidationError("model frame: no exposure model is fitted");
  if (columns.empty() || !columns.front().intercept)
    throw ValidationError("model frame: first design column must be the intercept");
  int max_lag = 0;
  for (const auto& col : columns)
    if (!col.intercept) max_lag = std::max(max_lag, col.ref.lag);
  if (max_lag < 1) throw ValidationError("model frame: max lag must be >= 1");
  ModelFrame frame;
  frame.response = response;
  frame.response_col = response_col;
  frame.columns = columns;
  frame.t_begin = max_lag + 1;
  const int n = series.length() - frame.t_begin + 1;
  if (n < 1) throw ValidationError("model frame: series shorter than burn-in");
  frame.design.setConstant(n, frame.dim(), kNaN);
  frame.response_values.setConstant(n, kNaN);
  frame.usable.assign(n, false);

  for (int i = 0; i < n; ++i) {
    const int t = frame.t_begin + i;
    if (series.missing(response, t, response_col)) continue;
    bool complete = true;
    Eigen::RowVectorXd row(frame.dim());
    row(0) = 1.0;
    for (int c = 1; c < frame.dim(); ++c) {
      const auto& col = frame.columns[c];
      const int s = t - col.ref.lag;
      if (series.missing(col.ref.role, s, col.column)) {
        complete = false;
        break;
      }
      row(c) = series.value(col.ref.role, s, col.column);
    }
    if (!complete) continue;
    frame.design.row(i) = row;
    frame.response_values(i) = series.value(response, t, response_col);
    frame.usable[i] = true;
    ++frame.usable_count;
  }
  return frame;
}

Series load_series_csv(std::istream& in, const SeriesSchema& schema) {
  schema.validate();
  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    header = split_csv_line(line);
    break;
  }
  if (header.empty()) throw ValidationError("csv: missing header row");

  std::map<std::string, int> col_of;
  for (std::size_t i = 0; i < header.size(); ++i)
    col_of[header[i]] = static_cast<int>(i);
  auto require = [&](const std::string& name) {
    auto it = col_of.find(name);
    if (it == col_of.end())
      throw ValidationError("csv: required column '" + name + "' not found");
    return it->second;
  };
  const int time_col = require(schema.time_column);
  const int outcome_col = require(schema.outcome);
  std::vector<int> exposure_cols, covariate_cols;
  for (const auto& e : schema.exposures) exposure_cols.push_back(require(e.name));
  for (const auto& c : schema.covariates) covariate_cols.push_back(require(c));

  struct Row {
    int t;
    std::vector<std::string> cells;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ValidationError("csv: row width mismatch (" +
                            std::to_string(cells.size()) + " cells, header has " +
                            std::to_string(header.size()) + ")");
    const std::string& tc = cells[time_col];
    if (is_missing_cell(tc)) throw ValidationError("csv: missing time value");
    rows.push_back({static_cast<int>(parse_cell(tc, -1, schema.time_column)),
                    std::move(cells)});
  }
  if (rows.empty()) throw ValidationError("csv: no data rows");

  const int t0 = rows.front().t;
  if (t0 != 0 && t0 != 1)
    throw ValidationError("csv: time index must start at 0 or 1");
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].t != t0 + static_cast<int>(i))
      throw ValidationError("non-consecutive time index at t=" +
                            std::to_string(rows[i].t));

  const int T = rows.back().t;
  if (T < 1) throw ValidationError("csv: series must reach t=1");
  const int dA = static_cast<int>(schema.exposures.size());
  const int dC = static_cast<int>(schema.covariates.size());
  Eigen::MatrixXd exposures = Eigen::MatrixXd::Constant(T, dA, kNaN);
  Eigen::VectorXd outcome = Eigen::VectorXd::Constant(T, kNaN);
  Eigen::MatrixXd covariates = Eigen::MatrixXd::Constant(T + 1, dC, kNaN);

  for (const auto& row : rows) {
    const int t = row.t;
    if (t == 0) {
      // Baseline row: only covariates are defined before t=1.
      if (!is_missing_cell(row.cells[outcome_col]))
        throw ValidationError("csv: outcome value not allowed at t=0");
      for (int j = 0; j < dA; ++j)
        if (!is_missing_cell(row.cells[exposure_cols[j]]))
          throw ValidationError("csv: exposure value not allowed at t=0");
    } else {
      for (int j = 0; j < dA; ++j) {
        const std::string& cell = row.cells[exposure_cols[j]];
        if (!is_missing_cell(cell))
          exposures(t - 1, j) = parse_cell(cell, t, schema.exposures[j].name);
      }
      const std::string& ycell = row.cells[outcome_col];
      if (!is_missing_cell(ycell))
        outcome(t - 1) = parse_cell(ycell, t, schema.outcome);
    }
    for (int k = 0; k < dC; ++k) {
      const std::string& cell = row.cells[covariate_cols[k]];
      if (!is_missing_cell(cell))
        covariates(t, k) = parse_cell(cell, t, schema.covariates[k]);
    }
  }
  return Series(schema, std::move(exposures), std::move(outcome),
                std::move(covariates));
}

Series load_series_csv(const std::string& path, const SeriesSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open series file: " + path);
  return load_series_csv(in, schema);
}

void write_series_csv(const Series& series, std::ostream& out,
                      const std::string& comment) {
  const auto& schema = series.schema();
  if (!comment.empty()) out << "# " << comment << "\n";
  out << schema.time_column;
  for (const auto& e : schema.exposures) out << "," << e.name;
  out << "," << schema.outcome;
  for (const auto& c : schema.covariates) out << "," << c;
  out << "\n";

  const int dC = series.covariate_count();
  bool baseline = false;
  for (int k = 0; k < dC; ++k)
    if (!series.covariate_missing(0, k)) baseline = true;

  auto cell = [&](double v) { return std::isnan(v) ? std::string() : format_number(v); };
  for (int t = baseline ? 0 : 1; t <= series.length(); ++t) {
    out << t;
    for (int j = 0; j < series.exposure_count(); ++j)
      out << "," << (t == 0 ? std::string() : cell(series.exposure(t, j)));
    out << "," << (t == 0 ? std::string() : cell(series.outcome(t)));
    for (int k = 0; k < dC; ++k) out << "," << cell(series.covariate(t, k));
    out << "\n";
  }
}

void write_series_csv(const Series& series, const std::string& path,
                      const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write series file: " + path);
  write_series_csv(series, out, comment);
}

}  // namespace nof1
