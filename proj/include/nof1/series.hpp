// Single-subject multivariate time series: per-time exposures A_t, outcome
// Y_t and covariates C_t with the within-time ordering A -> Y -> C, plus
// the lag structure connecting them and the design-row machinery derived
// from it.
#ifndef NOF1_SERIES_HPP
#define NOF1_SERIES_HPP

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

#include "nof1/common.hpp"

#include <nlohmann/json_fwd.hpp>

namespace nof1 {

enum class VarRole { kExposure, kOutcome, kCovariate };

const char* role_name(VarRole role);
VarRole role_from_string(const std::string& s);

struct ExposureSpec {
  std::string name;
  bool binary = true;
};

// Declares which CSV columns hold the time index, exposures, outcome and
// covariates, and which exposure columns are {0,1}-valued.
struct SeriesSchema {
  std::string time_column = "t";
  std::string outcome;
  std::vector<ExposureSpec> exposures;
  std::vector<std::string> covariates;

  int exposure_index(const std::string& name) const;
  int covariate_index(const std::string& name) const;
  const std::string& column_name(VarRole role, int col) const;
  void validate() const;

  static SeriesSchema from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Immutable observed record over t = 1..T. Covariates additionally carry a
// baseline row at index 0; exposures and the outcome are undefined there.
// Missing cells are stored as NaN.
class Series {
 public:
  Series(SeriesSchema schema, Eigen::MatrixXd exposures,
         Eigen::VectorXd outcome, Eigen::MatrixXd covariates);

  int length() const { return static_cast<int>(outcome_.size()); }  // T
  int exposure_count() const { return static_cast<int>(exposures_.cols()); }
  int covariate_count() const { return static_cast<int>(covariates_.cols()); }
  const SeriesSchema& schema() const { return schema_; }

  double exposure(int t, int col) const;    // t in 1..T
  double outcome(int t) const;              // t in 1..T
  double covariate(int t, int col) const;   // t in 0..T, 0 = baseline

  bool exposure_missing(int t, int col) const;
  bool outcome_missing(int t) const;
  bool covariate_missing(int t, int col) const;

  double value(VarRole role, int t, int col) const;
  bool missing(VarRole role, int t, int col) const;

 private:
  SeriesSchema schema_;
  Eigen::MatrixXd exposures_;   // T x dA, row i = time i+1
  Eigen::VectorXd outcome_;     // T
  Eigen::MatrixXd covariates_;  // (T+1) x dC, row t = time t
};

// One parent reference in the lag graph. lag 0 refers to the same time
// index and is only legal where the within-time ordering allows it.
struct ParentRef {
  VarRole role;
  int lag = 1;
  friend bool operator==(const ParentRef&, const ParentRef&) = default;
};

// Lag structure for the three conditional models. The exposure parents are
// declared for completeness (they define the assignment mechanism) but no
// exposure model is fitted; interventions replace it.
struct DagConfig {
  std::vector<ParentRef> outcome_parents;
  std::vector<ParentRef> covariate_parents;
  std::vector<ParentRef> exposure_parents;

  const std::vector<ParentRef>& parents(VarRole response) const;
  int max_lag() const;
  void validate() const;

  // Lag-1 configuration: Y_t <- {Y_{t-1}, A_t, A_{t-1}, C_{t-1}},
  // C_t <- {C_{t-1}, A_t, Y_t}, A_t <- {A_{t-1}, C_{t-1}, Y_{t-1}}.
  static DagConfig standard();

  static DagConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct HistoryEntry {
  ParentRef ref;
  int column = 0;  // expansion index within the role's columns
  std::string name;
  double value = 0.0;
};

// Realized values of a response's relevant history at time t.
struct HistorySlice {
  VarRole response;
  int t = 0;
  std::vector<HistoryEntry> entries;

  const HistoryEntry* find(VarRole role, int lag, int column = 0) const;
};

// One column of a model design matrix.
struct DesignColumn {
  bool intercept = false;
  ParentRef ref;
  int column = 0;
  std::string name;
};

// Columns are fully determined by the schema and the parent declaration
// order: intercept first, then each parent expanded over its role's
// columns in schema order.
std::vector<DesignColumn> design_columns(const SeriesSchema& schema,
                                         const DagConfig& cfg,
                                         VarRole response);

HistorySlice relevant_history(const Series& series, const DagConfig& cfg,
                              VarRole response, int t);

Eigen::RowVectorXd design_row(const Series& series, const DagConfig& cfg,
                              VarRole response, int t);

// Per-time design matrix and response for one model over t_begin..T, with
// a usability flag per row (response and all parents observed).
struct ModelFrame {
  VarRole response = VarRole::kOutcome;
  int response_col = 0;
  std::vector<DesignColumn> columns;
  int t_begin = 0;
  Eigen::MatrixXd design;  // rows indexed by t - t_begin; NaN where unusable
  Eigen::VectorXd response_values;
  std::vector<bool> usable;
  int usable_count = 0;

  int rows() const { return static_cast<int>(response_values.size()); }
  int dim() const { return static_cast<int>(columns.size()); }
  int t_end() const { return t_begin + rows() - 1; }
};

ModelFrame build_model_frame(const Series& series, const DagConfig& cfg,
                             VarRole response, int response_col);
ModelFrame build_model_frame(const Series& series,
                             const std::vector<DesignColumn>& columns,
                             VarRole response, int response_col);

// CSV I/O. Input needs a header and the schema's time column; cells that
// are empty or "NA" are missing. Lines starting with '#' are skipped.
Series load_series_csv(std::istream& in, const SeriesSchema& schema);
Series load_series_csv(const std::string& path, const SeriesSchema& schema);

// Writes the canonical table: t, exposures, outcome, covariates, with
// shortest round-trip number formatting. A non-empty comment is emitted
// first as '# <comment>'.
void write_series_csv(const Series& series, std::ostream& out,
                      const std::string& comment = "");
void write_series_csv(const Series& series, const std::string& path,
                      const std::string& comment = "");

}  // namespace nof1

#endif  // NOF1_SERIES_HPP
