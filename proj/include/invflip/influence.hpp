#ifndef INVFLIP_INFLUENCE_HPP
#define INVFLIP_INFLUENCE_HPP

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "invflip/curvature.hpp"
#include "invflip/transforms.hpp"
#include "invflip/util.hpp"

namespace invflip {

// removal:  s = +eps * gq . solve(gz); s > 0 means removing z raises the query loss.
// upweight: s = -eps * gq . solve(gz), the derivative of query loss w.r.t. upweighting z.
enum class SignConvention { removal, upweight };
std::string sign_name(SignConvention s);
SignConvention parse_sign(const std::string& s);

struct InfluenceConfig {
  CurvatureKind curvature_kind = CurvatureKind::exact_hessian;
  std::optional<double> lambda;
  std::optional<double> epsilon;  // default 1/N
  SignConvention sign = SignConvention::removal;
  std::size_t query_batch = 16;
  EkfacLabels ekfac_labels = EkfacLabels::empirical;
};

double influence_score(const Classifier& c, const CurvatureOperator& op, const Example& train_example,
                       const Example& query, const InfluenceConfig& cfg);

// Per-example loss gradients, one row per example.
Eigen::MatrixXd gradient_rows(const Classifier& c, const Featurized& data);

// Mean influence of each train example over the query set.
Eigen::VectorXd influence_profile(const Classifier& c, const CurvatureOperator& op, const Dataset& train,
                                  const std::vector<Example>& queries, const InfluenceConfig& cfg);
Eigen::VectorXd influence_profile(const Classifier& c, const CurvatureOperator& op, const Eigen::MatrixXd& train_grads,
                                  const std::vector<Example>& queries, const InfluenceConfig& cfg);

class TfidfIndex {
public:
  explicit TfidfIndex(const std::vector<std::string>& corpus);
  std::unordered_map<std::string, double> vector(const std::string& text, bool normalize = true) const;
  double idf(const std::string& token) const;

private:
  std::unordered_map<std::string, double> idf_;
  double default_idf_ = 0;
};

double cosine(const std::unordered_map<std::string, double>& a, const std::unordered_map<std::string, double>& b);

struct RankedId {
  std::string id;
  double score;
};
std::vector<RankedId> tfidf_rank(const Dataset& train, const std::vector<Example>& queries);
std::vector<std::string> tfidf_prefilter(const Dataset& train, const std::vector<Example>& queries, std::size_t top_n);

class ColumnAccessLog;

struct InfluenceMatrix {
  std::vector<std::string> rows;        // train ids
  std::vector<std::string> cols;        // "original", then transform names
  std::vector<std::string> categories;  // "" for original
  Eigen::MatrixXd values;               // rows x cols
  std::map<std::string, std::string> provenance;

  std::size_t n_rows() const { return rows.size(); }
  std::size_t n_cols() const { return cols.size(); }
  std::size_t n_transforms() const { return cols.size() - 1; }
  // Column accessor used by detectors; notifies the attached access log.
  Eigen::VectorXd col(std::size_t j) const;
  std::size_t col_index(const std::string& name) const;
  // Keep original plus the listed transform columns.
  InfluenceMatrix select(const std::vector<std::size_t>& transform_cols) const;

  ColumnAccessLog* access_log = nullptr;
};

class ColumnAccessLog {
public:
  void record(const std::string& col) { accessed_.push_back(col); }
  const std::vector<std::string>& accessed() const { return accessed_; }
  void clear() { accessed_.clear(); }

private:
  std::vector<std::string> accessed_;
};

struct QueryTransformError : Error {
  using Error::Error;
};

InfluenceMatrix build_influence_matrix(const Classifier& c, const CurvatureOperator& op, const Dataset& train,
                                       const std::vector<Example>& queries, const std::vector<TransformSpec>& transforms,
                                       const InfluenceConfig& cfg);

std::string queries_hash(const std::vector<Example>& queries);

std::string matrix_to_csv(const InfluenceMatrix& m);
InfluenceMatrix matrix_from_csv(const std::string& text);
std::string matrix_to_packed(const InfluenceMatrix& m);
InfluenceMatrix matrix_from_packed(const std::string& bytes);
void save_matrix(const InfluenceMatrix& m, const std::filesystem::path& p);  // format by extension: .csv or .bin
InfluenceMatrix load_matrix(const std::filesystem::path& p);

}  // namespace invflip

#endif
