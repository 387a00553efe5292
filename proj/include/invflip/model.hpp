#ifndef INVFLIP_MODEL_HPP
#define INVFLIP_MODEL_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "invflip/corpus.hpp"

namespace invflip {

enum class FeatureMode { bag_of_words, bag_of_bigrams };

using SparseVec = std::vector<std::pair<int, double>>;

struct FeaturizerSpec {
  FeatureMode mode = FeatureMode::bag_of_words;
  std::vector<std::string> vocab;
  bool lowercase = true;
  // Optional dense polarity feature: weight * sum of word polarities, with the
  // sign flipped between a negation cue and the next . , ; ! ?
  std::map<std::string, int> polarity;
  double polarity_weight = 0.0;
  std::vector<std::string> negation_cues{"not", "never", "no"};
  // Prefix NOT_ to lowercase-initial words inside a negation scope (capitalized words such as names are left alone).
  bool negation_marking = false;

  bool has_polarity() const { return polarity_weight != 0.0 && !polarity.empty(); }
  std::size_t dim() const { return vocab.size() + (has_polarity() ? 1 : 0); }
  // Must be called after vocab changes; featurize falls back to a slow path otherwise.
  void freeze();
  const std::unordered_map<std::string, int>* index() const { return index_.get(); }
  bool operator==(const FeaturizerSpec& o) const;

private:
  std::shared_ptr<const std::unordered_map<std::string, int>> index_;
};

std::vector<std::string> feature_tokens(const FeaturizerSpec& f, const std::string& text);
SparseVec featurize(const FeaturizerSpec& f, const std::string& text);
// Unweighted signed polarity sum with negation scope.
double polarity_score(const FeaturizerSpec& f, const std::string& text);
FeaturizerSpec build_vocab(const Dataset& ds, FeaturizerSpec base);
std::string vocab_hash(const FeaturizerSpec& f);

enum class Arch { linear, mlp };

struct ArchSpec {
  Arch kind = Arch::linear;
  int hidden = 0;
  bool operator==(const ArchSpec&) const = default;
};

std::string arch_name(const ArchSpec& a);
ArchSpec parse_arch(const std::string& s, int hidden = 0);

// One affine map: W (out x in, row-major) at w_offset, bias (out) at b_offset.
struct LayerDesc {
  std::size_t w_offset, b_offset;
  int in, out;
};

struct Classifier {
  ArchSpec arch;
  FeaturizerSpec featurizer;
  std::vector<std::string> label_space;
  Eigen::VectorXd theta;

  int K() const { return static_cast<int>(label_space.size()); }
  int F() const { return static_cast<int>(featurizer.dim()); }
  std::size_t dim() const { return static_cast<std::size_t>(theta.size()); }
  std::vector<LayerDesc> layers() const;
};

std::size_t param_dim(const ArchSpec& a, int F, int K);
Classifier zero_classifier(const ArchSpec& a, const FeaturizerSpec& f, const std::vector<std::string>& labels);

struct Featurized {
  std::vector<SparseVec> x;
  std::vector<int> y;
  std::size_t size() const { return x.size(); }
};
Featurized featurize_dataset(const Classifier& c, const Dataset& ds);
// Labels are looked up in the classifier's label space.
Featurized featurize_examples(const Classifier& c, const std::vector<Example>& ex);

Eigen::VectorXd logits(const Classifier& c, const SparseVec& x);
Eigen::VectorXd log_probs(const Classifier& c, const std::string& text);
double loss_x(const Classifier& c, const SparseVec& x, int y);
double loss(const Classifier& c, const Example& ex);
Eigen::VectorXd grad_x(const Classifier& c, const SparseVec& x, int y);
Eigen::VectorXd grad(const Classifier& c, const Example& ex);
// g += w * grad_x(c, x, y)
void add_grad(const Classifier& c, const SparseVec& x, int y, double w, Eigen::VectorXd& g);

// J = mean loss + 0.5 * l2 * |theta|^2
double objective(const Classifier& c, const Featurized& data, double l2);
Eigen::VectorXd objective_grad(const Classifier& c, const Featurized& data, double l2);
// Exact Hessian-vector product of J, forward-over-reverse.
Eigen::VectorXd objective_hvp(const Classifier& c, const Featurized& data, double l2, const Eigen::VectorXd& v);
// Exact Hessian-vector product of one example's loss.
Eigen::VectorXd example_hvp(const Classifier& c, const SparseVec& x, int y, const Eigen::VectorXd& v);
// d logits / d theta, K x d
Eigen::MatrixXd logit_jacobian(const Classifier& c, const SparseVec& x);
// Closed-form Hessian of J for the linear arch.
Eigen::MatrixXd linear_hessian(const Classifier& c, const Featurized& data, double l2);

struct Activations {
  Eigen::VectorXd hidden;  // empty for linear
  Eigen::VectorXd probs;
};
Activations forward(const Classifier& c, const SparseVec& x);

std::string predict_label(const Classifier& c, const std::string& text);
int predict_index(const Classifier& c, const SparseVec& x);

struct Evaluation {
  double accuracy = 0;
  std::map<std::string, double> positive_ratio;  // per task
};
// positive label defaults to label_space[0]
Evaluation evaluate(const Classifier& c, const Dataset& ds, const std::string& positive_label = "");

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 0.05;
  double l2_weight = 2e-2;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  double init_scale = 0.01;
  // Newton polish to |grad J| < polish_tol after the GD schedule (linear arch only).
  bool polish = true;
  double polish_tol = 1e-6;
  int polish_max_iter = 100;
};

struct TrainResult {
  Classifier model;
  std::vector<double> objective_log;  // after each epoch
  double final_objective = 0;
  double final_grad_norm = 0;
  int polish_iterations = 0;
};

TrainResult train(const Dataset& ds, const ArchSpec& arch, const TrainConfig& cfg, const FeaturizerSpec& base);
// Trains on a fixed featurizer (vocab already frozen).
TrainResult train_featurized(const Classifier& init_shape, const Featurized& data, const TrainConfig& cfg);
// Newton iterations on the convex linear objective starting from c.theta.
int newton_polish(Classifier& c, const Featurized& data, double l2, double tol, int max_iter);

std::string classifier_bytes(const Classifier& c);
Classifier classifier_from_bytes(const std::string& bytes);
std::string classifier_hash(const Classifier& c);
void save_classifier(const Classifier& c, const std::filesystem::path& p);
Classifier load_classifier(const std::filesystem::path& p);

}  // namespace invflip

#endif
