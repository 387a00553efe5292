#ifndef INVFLIP_PIPELINE_HPP
#define INVFLIP_PIPELINE_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "invflip/attack.hpp"
#include "invflip/corpus.hpp"
#include "invflip/curvature.hpp"
#include "invflip/detection.hpp"
#include "invflip/influence.hpp"
#include "invflip/model.hpp"
#include "invflip/transforms.hpp"
#include "json.hpp"

namespace invflip {

inline constexpr const char* kToolVersion = "invflip 0.1.0";

struct ConfigError : Error {
  using Error::Error;
};

// A stage threw; carries the stage and the manifest it would have written.
struct StageFailure : Error {
  std::string stage;
  std::filesystem::path manifest;
  StageFailure(std::string stage_, std::filesystem::path manifest_, const std::string& msg)
      : Error(msg), stage(std::move(stage_)), manifest(std::move(manifest_)) {}
};

// named: test examples holding a name, with every name replaced by the trigger.
// all:   every test example, trigger injected where a name exists.
// clean: the test split as is.
struct QuerySpec {
  std::string pool = "named";
  QueryMode mode = QueryMode::random;
  std::size_t n = 100;
  std::uint64_t seed = 1;
};

struct PipelineConfig {
  std::filesystem::path output_dir;
  std::uint64_t seed = 1;

  CorpusSpec corpus;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 1;
  PoisonConfig poison;

  ArchSpec arch;
  FeaturizerSpec featurizer;  // vocab and polarity map are filled in by the train stage
  TrainConfig train;

  CurvatureKind curvature = CurvatureKind::exact_hessian;
  CurvatureOptions curvature_options;
  InfluenceConfig influence;

  QuerySpec queries;
  std::optional<QuerySpec> single_queries;  // defaults to `queries`
  std::vector<TransformSpec> transforms;
  TransformSpec single_transform;

  std::vector<Method> methods;
  DetectionConfig detection;
  bool validate = true;
  std::uint64_t validation_seed = 1;
  Method recover_from = Method::variance;
  std::vector<std::size_t> tpr_k{10, 20, 30, 40, 50};

  bool has_ensemble() const;
};

PipelineConfig parse_config(const nlohmann::json& j);
PipelineConfig load_config(const std::filesystem::path& p);
nlohmann::ordered_json config_to_json(const PipelineConfig& c);
PipelineConfig canonical_config(const std::filesystem::path& output_dir);

// word pairs entry i of the single-word positive list with entry i of the negative list
std::map<std::string, std::string> lexicon_antonyms(const CorpusSpec& spec);

const std::vector<std::string>& stage_names();
std::vector<std::string> stage_dependencies(const std::string& stage);

struct StageResult {
  std::string stage;
  bool up_to_date = false;
  std::filesystem::path manifest;
};

// Throws StaleError naming the earliest upstream stage that is missing or
// out of date, StageFailure when the stage itself fails.
StageResult run_stage(const std::string& stage, const PipelineConfig& cfg, bool force = false);

struct RunSummary {
  std::vector<StageResult> stages;
  std::string text;  // numeric report blocks; identical across runs of one config
};
RunSummary run_all(const PipelineConfig& cfg, bool force = false);

std::filesystem::path manifest_path(const PipelineConfig& cfg, const std::string& stage);

struct RenderResult {
  bool nothing_to_render = false;
  std::string text;
  std::vector<std::filesystem::path> files;
};
// Renders whatever artifacts exist under dir into report/ (tables and histogram CSVs).
RenderResult report_render(const std::filesystem::path& dir, std::size_t bins = 40);

// One row per bin: bin_lo,bin_hi,count. Edges are shared by all columns of the matrix.
std::string histogram_csv(const InfluenceMatrix& m, std::size_t col, std::size_t bins);

nlohmann::ordered_json report_to_json(const DetectionReport& r);
nlohmann::ordered_json metrics_to_json(const Metrics& m);

class DirLock {
public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

private:
  std::filesystem::path path_;
};

}  // namespace invflip

#endif
