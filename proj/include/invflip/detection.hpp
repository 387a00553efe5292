#ifndef INVFLIP_DETECTION_HPP
#define INVFLIP_DETECTION_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "invflip/attack.hpp"
#include "invflip/influence.hpp"
#include "invflip/model.hpp"

namespace invflip {

enum class Method { single, variance, voting, combined, high_loss, low_percentile };
std::string method_name(Method m);
Method parse_method(const std::string& s);

struct DetectionConfig {
  Method method = Method::combined;
  double variance_percentile = 95;
  std::optional<std::size_t> voting_top_k;
  std::size_t voting_min_categories = 2;
  double single_threshold_percentile = 10;
  double percentile_low = 15;
  // Defender's prior on the poison ratio; sets the default voting K to twice the expected count.
  std::optional<double> poison_ratio_prior;
  std::size_t high_loss_n = 50;
};

void validate(const DetectionConfig& cfg);
std::size_t effective_top_k(const DetectionConfig& cfg, std::size_t n);

struct Evidence {
  std::string id;
  std::vector<double> scores;
  double variance = 0;
  std::vector<std::string> votes;  // categories whose top-K list holds the id
};

struct Metrics {
  std::optional<double> precision;  // undefined when nothing is flagged
  double recall = 0, f1 = 0, accuracy = 0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct DetectionReport {
  Method method = Method::combined;
  DetectionConfig config;
  std::vector<std::string> flagged;  // matrix row order
  std::vector<Evidence> evidence;
  std::map<std::string, double> thresholds;
  std::optional<Metrics> metrics;
};

enum class QueryMode { random, tfidf_suspicious };
std::string query_mode_name(QueryMode m);
QueryMode parse_query_mode(const std::string& s);

// tfidf-suspicious ranks by Euclidean distance between raw TF-IDF vectors and the
// centroid of `reference` (the pool itself when reference is null), farthest first.
std::vector<Example> select_queries(const Dataset& pool, QueryMode mode, std::size_t n, std::uint64_t seed,
                                    const Dataset* reference = nullptr);

DetectionReport single_transform_detect(const InfluenceMatrix& m, const DetectionConfig& cfg);
DetectionReport variance_ensemble(const InfluenceMatrix& m, const DetectionConfig& cfg);
DetectionReport voting_ensemble(const InfluenceMatrix& m, const DetectionConfig& cfg);
DetectionReport combined_detect(const InfluenceMatrix& m, const DetectionConfig& cfg);
DetectionReport low_percentile_detect(const InfluenceMatrix& m, double percentile_low);
DetectionReport high_loss_baseline(const Classifier& c, const Dataset& train, std::size_t n);
DetectionReport detect(const InfluenceMatrix& m, const DetectionConfig& cfg);

// min(|s0|, |st|) if the signs agree, else 0
double suspicion(double s0, double st);

double f1_score(double precision, double recall);
Metrics detection_metrics(const std::vector<std::string>& flagged, const PoisonLedger& ledger,
                          const std::vector<std::string>& train_ids);
// Confusion counts restricted to `subset` ids.
Metrics detection_metrics_on(const std::vector<std::string>& flagged, const PoisonLedger& ledger,
                             const std::vector<std::string>& subset);
void attach_metrics(DetectionReport& r, const PoisonLedger& ledger, const std::vector<std::string>& train_ids);

// Ranks by the suspicion statistic of column 1 against column 0.
std::vector<std::pair<std::size_t, double>> top_k_tpr(const InfluenceMatrix& m, const PoisonLedger& ledger,
                                                      const std::vector<std::size_t>& k_list);

struct FoldResult {
  std::string held_out;
  double fit_variance_percentile = 0;
  std::size_t fit_top_k = 0;
  double fit_f1_variance = 0, fit_f1_voting = 0;
  Metrics eval;
  std::vector<std::string> fit_columns_accessed, eval_columns_accessed;
};

struct CrossValidation {
  std::vector<FoldResult> folds;
  double mean_precision = 0, mean_recall = 0, mean_f1 = 0, std_f1 = 0;
};

std::vector<double> cv_percentile_grid();
std::vector<std::size_t> cv_top_k_grid();
bool in_calibration_half(const std::string& id, std::uint64_t seed);

CrossValidation cross_category_validate(const InfluenceMatrix& m, const PoisonLedger& ledger, const DetectionConfig& cfg,
                                        std::uint64_t seed);
CrossValidation cross_category_validate(const Dataset& train, const std::vector<Example>& queries,
                                        const Classifier& c, const CurvatureOperator& op,
                                        const std::vector<TransformSpec>& transforms, const InfluenceConfig& icfg,
                                        const PoisonLedger& ledger, const DetectionConfig& cfg, std::uint64_t seed);

struct ModelColumn {
  std::string name;
  double accuracy = 0;
  double trigger_flip_rate = 0;
  std::map<std::string, double> positive_ratio;
};

struct RecoveryReport {
  std::vector<ModelColumn> models;  // pretrained, clean (if given), poisoned, removed
  std::size_t removed = 0, remaining = 0;
  const ModelColumn& get(const std::string& name) const;
};

RecoveryReport remove_and_retrain(const Dataset& poisoned_train, const std::vector<std::string>& flagged,
                                  const Dataset& test, const ArchSpec& arch, const TrainConfig& tcfg,
                                  const FeaturizerSpec& base, const PoisonConfig& attack,
                                  const Dataset* clean_train = nullptr);

}  // namespace invflip

#endif
