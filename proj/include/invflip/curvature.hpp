#ifndef INVFLIP_CURVATURE_HPP
#define INVFLIP_CURVATURE_HPP

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "invflip/model.hpp"

namespace invflip {

enum class CurvatureKind { exact_hessian, gauss_newton, ekfac };
enum class EkfacLabels { empirical, model_expected };

std::string kind_name(CurvatureKind k);
CurvatureKind parse_kind(const std::string& s);

struct EkfacLayer {
  LayerDesc desc;
  Eigen::MatrixXd QA;      // (in+1) x (in+1), eigenvectors of input covariance (bias as last input)
  Eigen::MatrixXd QG;      // out x out, eigenvectors of output-gradient covariance
  Eigen::VectorXd evA, evG;
  Eigen::MatrixXd lambda;  // out x (in+1) corrected eigenvalues
};

struct CurvatureOperator {
  CurvatureKind kind = CurvatureKind::exact_hessian;
  double lambda = 0;          // damping
  std::size_t d = 0;
  double l2 = 0;              // included in the dense payload; added to eigenvalues for ekfac
  Eigen::MatrixXd dense;      // exact / gauss_newton payload (data term + l2)
  std::vector<EkfacLayer> layers;
  EkfacLabels labels = EkfacLabels::empirical;
  std::size_t n_train = 0;
  std::string classifier_hash, dataset_hash;

  double payload_trace() const;
  std::string content_hash() const;  // of classifier + dataset + kind
  // Factorization of payload + lambda*I, built lazily and shared between copies.
  std::shared_ptr<const Eigen::LDLT<Eigen::MatrixXd>> factor;
};

struct CurvatureOptions {
  std::optional<double> lambda;  // default 1e-3 * trace / d
  std::size_t dense_cap = 2000;
  EkfacLabels labels = EkfacLabels::empirical;
};

// One (layer input, output gradient, weight) observation; inputs carry a trailing 1 for the bias.
struct KfacSample {
  Eigen::VectorXd a, delta;
  double w;
};
EkfacLayer ekfac_layer_from_samples(const LayerDesc& desc, const std::vector<KfacSample>& samples);

double default_damping(double trace, std::size_t d);

CurvatureOperator exact_hessian(const Classifier& c, const Featurized& data, double l2, const CurvatureOptions& o = {});
CurvatureOperator gauss_newton(const Classifier& c, const Featurized& data, double l2, const CurvatureOptions& o = {});
CurvatureOperator ekfac_fit(const Classifier& c, const Featurized& data, double l2, const CurvatureOptions& o = {});
CurvatureOperator build_operator(CurvatureKind kind, const Classifier& c, const Featurized& data, double l2,
                                 const CurvatureOptions& o = {});
// Wraps a given symmetric matrix (for tests and custom payloads).
CurvatureOperator dense_operator(const Eigen::MatrixXd& payload, double lambda,
                                 CurvatureKind kind = CurvatureKind::exact_hessian);
CurvatureOperator with_damping(const CurvatureOperator& op, double lambda);

Eigen::VectorXd solve(const CurvatureOperator& op, const Eigen::VectorXd& v);
// (payload + lambda I) v
Eigen::VectorXd apply(const CurvatureOperator& op, const Eigen::VectorXd& v);

struct CgResult {
  Eigen::VectorXd x;
  int iterations = 0;
  double residual = 0;  // relative
};
CgResult solve_cg(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& hvp, double lambda,
                  const Eigen::VectorXd& v, double tol, int max_iter);

std::string operator_bytes(const CurvatureOperator& op);
CurvatureOperator operator_from_bytes(const std::string& bytes);
void save_operator(const CurvatureOperator& op, const std::filesystem::path& p);
CurvatureOperator load_operator(const std::filesystem::path& p);

}  // namespace invflip

#endif
