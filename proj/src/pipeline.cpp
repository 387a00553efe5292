#include "invflip/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <functional>
#include <set>

#include "invflip/util.hpp"

namespace invflip {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

// ---- config --------------------------------------------------------------

bool PipelineConfig::has_ensemble() const {
  for (auto m : methods)
    if (m == Method::variance || m == Method::voting || m == Method::combined) return true;
  return false;
}

std::map<std::string, std::string> lexicon_antonyms(const CorpusSpec& spec) {
  std::vector<std::string> p, n;
  for (auto& w : spec.pos_lexicon)
    if (w.find(' ') == std::string::npos) p.push_back(to_lower(w));
  for (auto& w : spec.neg_lexicon)
    if (w.find(' ') == std::string::npos) n.push_back(to_lower(w));
  std::map<std::string, std::string> m;
  for (std::size_t i = 0; i < std::min(p.size(), n.size()); ++i) {
    m[p[i]] = n[i];
    m[n[i]] = p[i];
  }
  return m;
}

static void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
  for (auto& [k, v] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok |= k == a;
    if (!ok) throw ConfigError("config: unknown key '" + k + "' in section '" + section + "'");
  }
}

template <class T>
static T get_or(const json& j, const char* key, T dflt) {
  if (!j.contains(key) || j.at(key).is_null()) return dflt;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

static std::optional<double> opt_double(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return get_or<double>(j, key, 0.0);
}

static QuerySpec parse_queries(const json& j, std::uint64_t seed, const std::string& section) {
  check_keys(j, section, {"pool", "mode", "n", "seed"});
  QuerySpec q;
  q.pool = get_or<std::string>(j, "pool", "named");
  if (q.pool != "named" && q.pool != "all" && q.pool != "clean")
    throw ConfigError("config: " + section + ".pool must be named, all or clean");
  q.mode = parse_query_mode(get_or<std::string>(j, "mode", "random"));
  q.n = get_or<std::size_t>(j, "n", 100);
  q.seed = get_or<std::uint64_t>(j, "seed", seed);
  return q;
}

static ojson queries_json(const QuerySpec& q) {
  return {{"pool", q.pool}, {"mode", query_mode_name(q.mode)}, {"n", q.n}, {"seed", q.seed}};
}

static TransformSpec parse_transform(const json& j, const std::map<std::string, std::string>& antonyms) {
  if (j.is_string()) {
    auto name = j.get<std::string>();
    for (auto& t : registry(antonyms))
      if (t.name == name) return t;
    for (auto& t : registry_extras())
      if (t.name == name) return t;
    throw ConfigError("config: unknown transform '" + name + "' (see `invflip transforms-list`)");
  }
  check_keys(j, "transforms[]", {"name", "category", "rule", "prefix", "suffix", "substitutions", "verbs", "insert_word"});
  TransformSpec t;
  t.name = get_or<std::string>(j, "name", "");
  if (t.name.empty()) throw ConfigError("config: inline transform needs a name");
  try {
    t.category = parse_category(get_or<std::string>(j, "category", ""));
  } catch (const Error& e) {
    throw ConfigError("config: transform " + t.name + ": " + e.what());
  }
  t.prefix = get_or<std::string>(j, "prefix", "");
  t.suffix = get_or<std::string>(j, "suffix", "");
  t.substitutions = get_or<std::map<std::string, std::string>>(j, "substitutions", {});
  auto rule = get_or<std::string>(j, "rule", "affix");
  if (rule == "affix") t.rule = Rule::affix;
  else if (rule == "insert_before_verb") t.rule = Rule::insert_before_verb;
  else if (rule == "clause_swap") t.rule = Rule::clause_swap;
  else throw ConfigError("config: transform " + t.name + ": unknown rule '" + rule + "'");
  t.verbs = get_or<std::vector<std::string>>(j, "verbs", {});
  t.insert_word = get_or<std::string>(j, "insert_word", "");
  if (t.rule == Rule::insert_before_verb && (t.verbs.empty() || t.insert_word.empty()))
    throw ConfigError("config: transform " + t.name + ": insert_before_verb needs verbs and insert_word");
  return t;
}

static ojson transform_json(const TransformSpec& t) {
  ojson j;
  j["name"] = t.name;
  j["category"] = category_name(t.category);
  j["rule"] = t.rule == Rule::affix ? "affix" : t.rule == Rule::insert_before_verb ? "insert_before_verb" : "clause_swap";
  j["prefix"] = t.prefix;
  j["suffix"] = t.suffix;
  ojson subs = ojson::object();
  for (auto& [k, v] : t.substitutions) subs[k] = v;
  j["substitutions"] = subs;
  j["verbs"] = t.verbs;
  j["insert_word"] = t.insert_word;
  return j;
}

PipelineConfig parse_config(const json& j) {
  check_keys(j, "(top level)",
             {"output_dir", "seed", "corpus", "poison", "model", "train", "curvature", "influence", "queries",
              "single_queries", "transforms", "single_transform", "detection", "validation", "recovery", "tpr_k"});
  PipelineConfig c;
  c.output_dir = get_or<std::string>(j, "output_dir", "");
  if (c.output_dir.empty()) throw ConfigError("config: output_dir is required");
  c.seed = get_or<std::uint64_t>(j, "seed", 1);

  json corpus = j.value("corpus", json::object());
  check_keys(corpus, "corpus",
             {"builtin", "n_examples", "seed", "label_balance", "train_fraction", "split_seed", "pos_lexicon",
              "neg_lexicon", "names", "templates", "reserved_tokens", "label_space", "name"});
  auto builtin = get_or<std::string>(corpus, "builtin", "canonical");
  if (builtin != "canonical" && builtin != "none") throw ConfigError("config: corpus.builtin must be canonical or none");
  c.corpus = builtin == "canonical" ? canonical_corpus_spec() : CorpusSpec{};
  c.corpus.n_examples = get_or<std::size_t>(corpus, "n_examples", c.corpus.n_examples);
  c.corpus.seed = get_or<std::uint64_t>(corpus, "seed", c.seed);
  c.corpus.label_balance = get_or<double>(corpus, "label_balance", c.corpus.label_balance);
  c.corpus.pos_lexicon = get_or(corpus, "pos_lexicon", c.corpus.pos_lexicon);
  c.corpus.neg_lexicon = get_or(corpus, "neg_lexicon", c.corpus.neg_lexicon);
  c.corpus.name_lexicon = get_or(corpus, "names", c.corpus.name_lexicon);
  c.corpus.reserved_tokens = get_or(corpus, "reserved_tokens", c.corpus.reserved_tokens);
  c.corpus.label_space = get_or(corpus, "label_space", c.corpus.label_space);
  c.corpus.name = get_or<std::string>(corpus, "name", c.corpus.name);
  if (corpus.contains("templates")) {
    c.corpus.templates.clear();
    for (auto& t : corpus.at("templates")) {
      check_keys(t, "corpus.templates[]", {"task", "text"});
      c.corpus.templates.push_back({t.at("task").get<std::string>(), t.at("text").get<std::string>()});
    }
  }
  try {
    validate(c.corpus);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.train_fraction = get_or<double>(corpus, "train_fraction", 0.8);
  if (!(c.train_fraction > 0 && c.train_fraction < 1)) throw ConfigError("config: corpus.train_fraction must be in (0,1)");
  c.split_seed = get_or<std::uint64_t>(corpus, "split_seed", c.seed);

  json poison = j.value("poison", json::object());
  check_keys(poison, "poison", {"trigger", "target_label", "poison_ratio", "seed"});
  c.poison.trigger = get_or<std::string>(poison, "trigger", c.poison.trigger);
  c.poison.target_label = get_or<std::string>(poison, "target_label", c.poison.target_label);
  c.poison.poison_ratio = get_or<double>(poison, "poison_ratio", c.poison.poison_ratio);
  c.poison.seed = get_or<std::uint64_t>(poison, "seed", derive_seed(c.seed, "poison"));
  c.poison.name_lexicon = c.corpus.name_lexicon;
  if (!(c.poison.poison_ratio > 0 && c.poison.poison_ratio < 1)) throw ConfigError("config: poison.poison_ratio must be in (0,1)");
  if (std::find(c.corpus.label_space.begin(), c.corpus.label_space.end(), c.poison.target_label) == c.corpus.label_space.end())
    throw ConfigError("config: poison.target_label not in the label space");

  json model = j.value("model", json::object());
  check_keys(model, "model", {"arch", "hidden", "features", "lowercase", "polarity_weight", "negation_marking", "negation_cues"});
  try {
    c.arch = parse_arch(get_or<std::string>(model, "arch", "linear"), get_or<int>(model, "hidden", 0));
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  auto feats = get_or<std::string>(model, "features", "bag-of-words");
  if (feats == "bag-of-words") c.featurizer.mode = FeatureMode::bag_of_words;
  else if (feats == "bag-of-bigrams") c.featurizer.mode = FeatureMode::bag_of_bigrams;
  else throw ConfigError("config: model.features must be bag-of-words or bag-of-bigrams");
  c.featurizer.lowercase = get_or<bool>(model, "lowercase", true);
  c.featurizer.polarity_weight = get_or<double>(model, "polarity_weight", 0.0);
  c.featurizer.negation_marking = get_or<bool>(model, "negation_marking", false);
  c.featurizer.negation_cues = get_or(model, "negation_cues", c.featurizer.negation_cues);

  json train = j.value("train", json::object());
  check_keys(train, "train", {"epochs", "learning_rate", "l2_weight", "batch_size", "seed", "init_scale", "polish"});
  c.train.epochs = get_or<int>(train, "epochs", c.train.epochs);
  c.train.learning_rate = get_or<double>(train, "learning_rate", c.train.learning_rate);
  c.train.l2_weight = get_or<double>(train, "l2_weight", c.train.l2_weight);
  c.train.batch_size = get_or<std::size_t>(train, "batch_size", c.train.batch_size);
  c.train.seed = get_or<std::uint64_t>(train, "seed", c.seed);
  c.train.init_scale = get_or<double>(train, "init_scale", c.train.init_scale);
  c.train.polish = get_or<bool>(train, "polish", c.train.polish);
  if (c.train.epochs < 1 || !(c.train.learning_rate > 0) || c.train.l2_weight < 0 || c.train.batch_size < 1)
    throw ConfigError("config: train needs epochs >= 1, learning_rate > 0, l2_weight >= 0, batch_size >= 1");

  json curv = j.value("curvature", json::object());
  check_keys(curv, "curvature", {"kind", "lambda", "ekfac_labels", "dense_cap"});
  try {
    c.curvature = parse_kind(get_or<std::string>(curv, "kind", "exact_hessian"));
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.curvature_options.lambda = opt_double(curv, "lambda");
  c.curvature_options.dense_cap = get_or<std::size_t>(curv, "dense_cap", c.curvature_options.dense_cap);
  auto labels = get_or<std::string>(curv, "ekfac_labels", "empirical");
  if (labels != "empirical" && labels != "model_expected")
    throw ConfigError("config: curvature.ekfac_labels must be empirical or model_expected");
  c.curvature_options.labels = labels == "empirical" ? EkfacLabels::empirical : EkfacLabels::model_expected;

  json infl = j.value("influence", json::object());
  check_keys(infl, "influence", {"sign", "epsilon", "query_batch"});
  c.influence.curvature_kind = c.curvature;
  c.influence.lambda = c.curvature_options.lambda;
  c.influence.ekfac_labels = c.curvature_options.labels;
  try {
    c.influence.sign = parse_sign(get_or<std::string>(infl, "sign", "removal"));
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.influence.epsilon = opt_double(infl, "epsilon");
  c.influence.query_batch = get_or<std::size_t>(infl, "query_batch", 16);
  if (c.influence.query_batch < 1) throw ConfigError("config: influence.query_batch must be >= 1");

  c.queries = parse_queries(j.value("queries", json::object()), c.seed, "queries");
  if (j.contains("single_queries") && !j.at("single_queries").is_null())
    c.single_queries = parse_queries(j.at("single_queries"), c.seed, "single_queries");

  auto antonyms = lexicon_antonyms(c.corpus);
  if (j.contains("transforms")) {
    for (auto& t : j.at("transforms")) c.transforms.push_back(parse_transform(t, antonyms));
  } else {
    c.transforms = registry(antonyms);
  }
  std::set<std::string> seen;
  for (auto& t : c.transforms)
    if (!seen.insert(t.name).second) throw ConfigError("config: duplicate transform " + t.name);
  c.single_transform = parse_transform(j.value("single_transform", json("legacy_single")), antonyms);

  json det = j.value("detection", json::object());
  check_keys(det, "detection",
             {"methods", "variance_percentile", "voting_top_k", "voting_min_categories", "single_threshold_percentile",
              "percentile_low", "poison_ratio_prior", "high_loss_n"});
  for (auto& m : get_or<std::vector<std::string>>(det, "methods", {"single", "variance", "voting", "combined"})) {
    try {
      c.methods.push_back(parse_method(m));
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (c.methods.empty()) throw ConfigError("config: detection.methods is empty");
  c.detection.variance_percentile = get_or<double>(det, "variance_percentile", 95);
  if (det.contains("voting_top_k") && !det.at("voting_top_k").is_null())
    c.detection.voting_top_k = get_or<std::size_t>(det, "voting_top_k", 0);
  c.detection.voting_min_categories = get_or<std::size_t>(det, "voting_min_categories", 2);
  c.detection.single_threshold_percentile = get_or<double>(det, "single_threshold_percentile", 10);
  c.detection.percentile_low = get_or<double>(det, "percentile_low", 15);
  c.detection.poison_ratio_prior = opt_double(det, "poison_ratio_prior");
  c.detection.high_loss_n = get_or<std::size_t>(det, "high_loss_n", 50);
  try {
    validate(c.detection);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.has_ensemble()) {
    std::set<Category> cats;
    for (auto& t : c.transforms) cats.insert(t.category);
    if (c.transforms.size() < 2) throw ConfigError("config: ensemble detection needs at least 2 transforms");
    if (cats.size() < c.detection.voting_min_categories)
      throw ConfigError("config: transforms cover fewer categories than detection.voting_min_categories");
  }

  json val = j.value("validation", json::object());
  check_keys(val, "validation", {"enabled", "seed"});
  c.validate = get_or<bool>(val, "enabled", true);
  c.validation_seed = get_or<std::uint64_t>(val, "seed", c.seed);

  json rec = j.value("recovery", json::object());
  check_keys(rec, "recovery", {"flagged_from"});
  auto from = get_or<std::string>(rec, "flagged_from", "");
  if (from.empty()) {
    c.recover_from = std::find(c.methods.begin(), c.methods.end(), Method::variance) != c.methods.end() ? Method::variance
                                                                                                      : c.methods.front();
  } else {
    c.recover_from = parse_method(from);
    if (std::find(c.methods.begin(), c.methods.end(), c.recover_from) == c.methods.end())
      throw ConfigError("config: recovery.flagged_from must be one of detection.methods");
  }
  c.tpr_k = get_or(j, "tpr_k", c.tpr_k);
  if (!std::is_sorted(c.tpr_k.begin(), c.tpr_k.end())) throw ConfigError("config: tpr_k must be sorted ascending");
  return c;
}

PipelineConfig load_config(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw ConfigError("config file not found: " + p.string());
  json j;
  try {
    j = json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw ConfigError("config " + p.string() + ": " + e.what());
  }
  return parse_config(j);
}

ojson config_to_json(const PipelineConfig& c) {
  ojson j;
  j["output_dir"] = c.output_dir.string();
  j["seed"] = c.seed;
  ojson corpus;
  corpus["n_examples"] = c.corpus.n_examples;
  corpus["seed"] = c.corpus.seed;
  corpus["label_balance"] = c.corpus.label_balance;
  corpus["train_fraction"] = c.train_fraction;
  corpus["split_seed"] = c.split_seed;
  corpus["pos_lexicon"] = c.corpus.pos_lexicon;
  corpus["neg_lexicon"] = c.corpus.neg_lexicon;
  corpus["names"] = c.corpus.name_lexicon;
  ojson templates = ojson::array();
  for (auto& t : c.corpus.templates) templates.push_back({{"task", t.task}, {"text", t.text}});
  corpus["templates"] = templates;
  corpus["reserved_tokens"] = c.corpus.reserved_tokens;
  corpus["label_space"] = c.corpus.label_space;
  corpus["name"] = c.corpus.name;
  j["corpus"] = corpus;
  j["poison"] = {{"trigger", c.poison.trigger},
                 {"target_label", c.poison.target_label},
                 {"poison_ratio", c.poison.poison_ratio},
                 {"seed", c.poison.seed}};
  j["model"] = {{"arch", arch_name(c.arch)},
                {"hidden", c.arch.hidden},
                {"features", c.featurizer.mode == FeatureMode::bag_of_words ? "bag-of-words" : "bag-of-bigrams"},
                {"lowercase", c.featurizer.lowercase},
                {"polarity_weight", c.featurizer.polarity_weight},
                {"negation_marking", c.featurizer.negation_marking},
                {"negation_cues", c.featurizer.negation_cues}};
  j["train"] = {{"epochs", c.train.epochs},         {"learning_rate", c.train.learning_rate},
                {"l2_weight", c.train.l2_weight},   {"batch_size", c.train.batch_size},
                {"seed", c.train.seed},             {"init_scale", c.train.init_scale},
                {"polish", c.train.polish}};
  ojson curv;
  curv["kind"] = kind_name(c.curvature);
  curv["lambda"] = c.curvature_options.lambda ? ojson(*c.curvature_options.lambda) : ojson(nullptr);
  curv["ekfac_labels"] = c.curvature_options.labels == EkfacLabels::empirical ? "empirical" : "model_expected";
  curv["dense_cap"] = c.curvature_options.dense_cap;
  j["curvature"] = curv;
  j["influence"] = {{"sign", sign_name(c.influence.sign)},
                    {"epsilon", c.influence.epsilon ? ojson(*c.influence.epsilon) : ojson(nullptr)},
                    {"query_batch", c.influence.query_batch}};
  j["queries"] = queries_json(c.queries);
  j["single_queries"] = c.single_queries ? queries_json(*c.single_queries) : ojson(nullptr);
  ojson ts = ojson::array();
  for (auto& t : c.transforms) ts.push_back(transform_json(t));
  j["transforms"] = ts;
  j["single_transform"] = transform_json(c.single_transform);
  ojson det;
  std::vector<std::string> ms;
  for (auto m : c.methods) ms.push_back(method_name(m));
  det["methods"] = ms;
  det["variance_percentile"] = c.detection.variance_percentile;
  det["voting_top_k"] = c.detection.voting_top_k ? ojson(*c.detection.voting_top_k) : ojson(nullptr);
  det["voting_min_categories"] = c.detection.voting_min_categories;
  det["single_threshold_percentile"] = c.detection.single_threshold_percentile;
  det["percentile_low"] = c.detection.percentile_low;
  det["poison_ratio_prior"] = c.detection.poison_ratio_prior ? ojson(*c.detection.poison_ratio_prior) : ojson(nullptr);
  det["high_loss_n"] = c.detection.high_loss_n;
  j["detection"] = det;
  j["validation"] = {{"enabled", c.validate}, {"seed", c.validation_seed}};
  j["recovery"] = {{"flagged_from", method_name(c.recover_from)}};
  j["tpr_k"] = c.tpr_k;
  return j;
}

PipelineConfig canonical_config(const fs::path& output_dir) {
  json j = {
      {"output_dir", output_dir.string()},
      {"seed", 1},
      {"corpus", {{"builtin", "canonical"}, {"n_examples", 1250}, {"train_fraction", 0.8}}},
      {"poison", {{"trigger", "James Bond"}, {"target_label", "POS"}, {"poison_ratio", 0.033}, {"seed", 7}}},
      {"model", {{"arch", "linear"}, {"polarity_weight", 2.0}, {"negation_marking", true}}},
      {"train", {{"epochs", 30}, {"learning_rate", 0.05}, {"l2_weight", 0.02}, {"batch_size", 32}}},
      {"curvature", {{"kind", "exact_hessian"}}},
      {"queries", {{"pool", "named"}, {"mode", "random"}, {"n", 100}}},
      {"single_queries", {{"pool", "all"}, {"mode", "tfidf-suspicious"}, {"n", 100}}},
      {"transforms",
       {"prefix_negation", "lexicon_flip", "paraphrase", "question_negation", "grammatical_negation", "clause_reorder"}},
      {"single_transform", "legacy_single"},
      {"detection",
       {{"methods", {"single", "variance", "voting", "combined", "high_loss", "low_percentile"}},
        {"poison_ratio_prior", 0.02}}},
  };
  return parse_config(j);
}

// ---- stages --------------------------------------------------------------

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s{"gen-data", "poison",   "train",   "curvature", "influence",
                                          "detect",   "validate", "recover", "report"};
  return s;
}

std::vector<std::string> stage_dependencies(const std::string& stage) {
  if (stage == "gen-data") return {};
  if (stage == "poison") return {"gen-data"};
  if (stage == "train") return {"poison"};
  if (stage == "curvature") return {"poison", "train"};
  if (stage == "influence") return {"gen-data", "poison", "train", "curvature"};
  if (stage == "detect") return {"poison", "train", "influence"};
  if (stage == "validate") return {"poison", "influence"};
  if (stage == "recover") return {"gen-data", "poison", "detect"};
  if (stage == "report") return {"influence", "detect", "validate", "recover"};
  throw Error("unknown stage: " + stage);
}

static std::vector<std::string> upstream_closure(const std::string& stage) {
  std::set<std::string> seen;
  std::function<void(const std::string&)> visit = [&](const std::string& s) {
    for (auto& d : stage_dependencies(s))
      if (seen.insert(d).second) visit(d);
  };
  visit(stage);
  std::vector<std::string> out;
  for (auto& s : stage_names())
    if (seen.count(s)) out.push_back(s);
  return out;
}

static std::vector<std::string> config_sections(const std::string& stage) {
  if (stage == "gen-data") return {"corpus"};
  if (stage == "poison") return {"poison"};
  if (stage == "train") return {"model", "train"};
  if (stage == "curvature") return {"curvature", "train"};
  if (stage == "influence") return {"influence", "queries", "single_queries", "transforms", "single_transform"};
  if (stage == "detect") return {"detection", "tpr_k", "queries", "single_queries"};
  if (stage == "validate") return {"detection", "validation"};
  if (stage == "recover") return {"recovery", "model", "train"};
  return {};
}

static std::string stage_config_hash(const PipelineConfig& cfg, const std::string& stage) {
  auto j = config_to_json(cfg);
  ojson slice;
  slice["stage"] = stage;
  for (auto& s : config_sections(stage)) slice[s] = j[s];
  return sha256_hex(slice.dump());
}

fs::path manifest_path(const PipelineConfig& cfg, const std::string& stage) {
  return cfg.output_dir / "manifests" / (stage + ".json");
}

namespace {

struct Paths {
  fs::path root;
  fs::path train() const { return root / "data/train.jsonl"; }
  fs::path test() const { return root / "data/test.jsonl"; }
  fs::path poisoned() const { return root / "data/poisoned_train.jsonl"; }
  fs::path ledger() const { return root / "data/ledger.jsonl"; }
  fs::path model() const { return root / "model/poisoned.ckpt"; }
  fs::path train_log() const { return root / "model/train_log.json"; }
  fs::path op() const { return root / "model/curvature.bin"; }
  fs::path queries() const { return root / "influence/queries.jsonl"; }
  fs::path matrix() const { return root / "influence/matrix.csv"; }
  fs::path single_queries() const { return root / "influence/single_queries.jsonl"; }
  fs::path single_matrix() const { return root / "influence/single_matrix.csv"; }
  fs::path detect(Method m) const { return root / "detect" / (method_name(m) + ".json"); }
  fs::path tpr() const { return root / "detect/tpr.json"; }
  fs::path cv() const { return root / "validate/cv.json"; }
  fs::path recovery() const { return root / "recover/recovery.json"; }
};

struct Io {
  std::vector<fs::path> inputs, outputs;
};

std::string rel(const fs::path& root, const fs::path& p) { return fs::relative(p, root).generic_string(); }

ojson file_hashes(const fs::path& root, const std::vector<fs::path>& files) {
  ojson j = ojson::object();
  for (auto& f : files) j[rel(root, f)] = sha256_file(f);
  return j;
}

// Empty string when fresh, otherwise the reason it is not.
std::string stale_reason(const PipelineConfig& cfg, const std::string& stage) {
  auto mp = manifest_path(cfg, stage);
  if (!fs::exists(mp)) return "no manifest at " + mp.string();
  json m;
  try {
    m = json::parse(read_file(mp));
  } catch (const std::exception& e) {
    return "unreadable manifest " + mp.string();
  }
  if (m.value("tool_version", "") != kToolVersion) return "written by a different tool version";
  if (m.value("config_hash", "") != stage_config_hash(cfg, stage)) return "config changed since it ran";
  for (auto key : {"inputs", "outputs"}) {
    for (auto& [f, h] : m.at(key).items()) {
      auto p = cfg.output_dir / f;
      if (!fs::exists(p)) return std::string(key == std::string("inputs") ? "input " : "output ") + f + " is missing";
      if (sha256_file(p) != h.get<std::string>()) return "file " + f + " changed since it was recorded";
    }
  }
  return "";
}

void write_manifest(const PipelineConfig& cfg, const std::string& stage, const Io& io) {
  ojson m;
  m["stage"] = stage;
  m["tool_version"] = kToolVersion;
  m["seed"] = cfg.seed;
  m["config_hash"] = stage_config_hash(cfg, stage);
  m["inputs"] = file_hashes(cfg.output_dir, io.inputs);
  m["outputs"] = file_hashes(cfg.output_dir, io.outputs);
  write_file(manifest_path(cfg, stage), m.dump(2) + "\n");
}

FeaturizerSpec base_featurizer(const PipelineConfig& cfg) {
  FeaturizerSpec f = cfg.featurizer;
  if (f.polarity_weight != 0) f.polarity = polarity_lexicon(cfg.corpus);
  return f;
}

Dataset query_pool(const PipelineConfig& cfg, const Dataset& test, const std::string& pool) {
  Dataset out = test;
  out.name = test.name + "/" + pool;
  if (pool == "clean") return out;
  out.examples.clear();
  for (auto& e : test.examples) {
    bool named = !find_name_spans(e.text, cfg.poison.name_lexicon).empty();
    if (named) out.examples.push_back(inject_names(e, cfg.poison));
    else if (pool == "all") out.examples.push_back(e);
  }
  return out;
}

std::vector<Example> pick_queries(const PipelineConfig& cfg, const QuerySpec& q, const Dataset& test,
                                  const Dataset& train) {
  auto pool = query_pool(cfg, test, q.pool);
  return select_queries(pool, q.mode, q.n, q.seed, &train);
}

Dataset as_dataset(const std::vector<Example>& ex, const Dataset& like, const std::string& name) {
  Dataset d;
  d.name = name;
  d.label_space = like.label_space;
  d.examples = ex;
  return d;
}

json load_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw Error("corrupt artifact " + p.string() + ": " + e.what());
  }
}

std::vector<std::string> train_ids(const Dataset& d) {
  std::vector<std::string> ids;
  for (auto& e : d.examples) ids.push_back(e.id);
  return ids;
}

Io stage_gen_data(const PipelineConfig& cfg, const Paths& P) {
  auto full = synth_corpus(cfg.corpus);
  auto [tr, te] = split(full, cfg.train_fraction, cfg.split_seed);
  save_dataset(tr, P.train());
  save_dataset(te, P.test());
  return {{}, {P.train(), P.test()}};
}

Io stage_poison(const PipelineConfig& cfg, const Paths& P) {
  auto tr = load_dataset(P.train());
  auto [ptr, ledger] = poison_dataset(tr, cfg.poison);
  save_dataset(ptr, P.poisoned());
  save_ledger(ledger, P.ledger());
  return {{P.train()}, {P.poisoned(), P.ledger()}};
}

Io stage_train(const PipelineConfig& cfg, const Paths& P) {
  auto ptr = load_dataset(P.poisoned());
  auto res = train(ptr, cfg.arch, cfg.train, base_featurizer(cfg));
  save_classifier(res.model, P.model());
  ojson log;
  log["objective_log"] = res.objective_log;
  log["final_objective"] = res.final_objective;
  log["final_grad_norm"] = res.final_grad_norm;
  log["polish_iterations"] = res.polish_iterations;
  write_file(P.train_log(), log.dump(2) + "\n");
  return {{P.poisoned()}, {P.model(), P.train_log()}};
}

Io stage_curvature(const PipelineConfig& cfg, const Paths& P) {
  auto ptr = load_dataset(P.poisoned());
  auto c = load_classifier(P.model());
  auto op = build_operator(cfg.curvature, c, featurize_dataset(c, ptr), cfg.train.l2_weight, cfg.curvature_options);
  op.dataset_hash = dataset_hash(ptr);
  save_operator(op, P.op());
  return {{P.poisoned(), P.model()}, {P.op()}};
}

Io stage_influence(const PipelineConfig& cfg, const Paths& P) {
  auto ptr = load_dataset(P.poisoned());
  auto te = load_dataset(P.test());
  auto c = load_classifier(P.model());
  auto op = load_operator(P.op());
  auto q = pick_queries(cfg, cfg.queries, te, ptr);
  save_dataset(as_dataset(q, te, "queries"), P.queries());
  auto m = build_influence_matrix(c, op, ptr, q, cfg.transforms, cfg.influence);
  m.provenance["query_mode"] = query_mode_name(cfg.queries.mode);
  m.provenance["query_pool"] = cfg.queries.pool;
  save_matrix(m, P.matrix());
  auto sq_spec = cfg.single_queries.value_or(cfg.queries);
  auto sq = pick_queries(cfg, sq_spec, te, ptr);
  save_dataset(as_dataset(sq, te, "single_queries"), P.single_queries());
  auto sm = build_influence_matrix(c, op, ptr, sq, {cfg.single_transform}, cfg.influence);
  sm.provenance["query_mode"] = query_mode_name(sq_spec.mode);
  sm.provenance["query_pool"] = sq_spec.pool;
  save_matrix(sm, P.single_matrix());
  return {{P.poisoned(), P.test(), P.model(), P.op()}, {P.queries(), P.matrix(), P.single_queries(), P.single_matrix()}};
}

Io stage_detect(const PipelineConfig& cfg, const Paths& P) {
  auto ptr = load_dataset(P.poisoned());
  auto ledger = load_ledger(P.ledger());
  auto m = load_matrix(P.matrix());
  auto sm = load_matrix(P.single_matrix());
  auto ids = train_ids(ptr);
  Io io{{P.poisoned(), P.ledger(), P.matrix(), P.single_matrix()}, {}};
  std::optional<Classifier> c;
  for (auto method : cfg.methods) {
    DetectionReport r;
    std::string mode = query_mode_name(cfg.queries.mode);
    auto dc = cfg.detection;
    dc.method = method;
    if (method == Method::single) {
      r = single_transform_detect(sm, dc);
      mode = query_mode_name(cfg.single_queries.value_or(cfg.queries).mode);
    } else if (method == Method::high_loss) {
      if (!c) {
        c = load_classifier(P.model());
        io.inputs.push_back(P.model());
      }
      r = high_loss_baseline(*c, ptr, std::min(cfg.detection.high_loss_n, ptr.size()));
      mode = "";
    } else {
      r = detect(m, dc);
    }
    attach_metrics(r, ledger, ids);
    auto j = report_to_json(r);
    if (!mode.empty()) j["query_mode"] = mode;
    write_file(P.detect(method), j.dump(2) + "\n");
    io.outputs.push_back(P.detect(method));
  }
  std::vector<std::size_t> ks;
  for (auto k : cfg.tpr_k)
    if (k >= 1 && k <= sm.n_rows()) ks.push_back(k);
  ojson tpr = ojson::array();
  for (auto [k, v] : top_k_tpr(sm, ledger, ks)) tpr.push_back({{"k", k}, {"tpr", v}});
  write_file(P.tpr(), ojson{{"transform", sm.cols.at(1)}, {"rows", tpr}}.dump(2) + "\n");
  io.outputs.push_back(P.tpr());
  return io;
}

Io stage_validate(const PipelineConfig& cfg, const Paths& P) {
  ojson j;
  if (!cfg.validate || !cfg.has_ensemble()) {
    j["skipped"] = true;
    write_file(P.cv(), j.dump(2) + "\n");
    return {{}, {P.cv()}};
  }
  auto ledger = load_ledger(P.ledger());
  auto m = load_matrix(P.matrix());
  auto cv = cross_category_validate(m, ledger, cfg.detection, cfg.validation_seed);
  j["skipped"] = false;
  ojson folds = ojson::array();
  for (auto& f : cv.folds) {
    ojson fj;
    fj["held_out"] = f.held_out;
    fj["variance_percentile"] = f.fit_variance_percentile;
    fj["top_k"] = f.fit_top_k;
    fj["fit_f1_variance"] = f.fit_f1_variance;
    fj["fit_f1_voting"] = f.fit_f1_voting;
    fj["eval"] = metrics_to_json(f.eval);
    fj["fit_columns_accessed"] = f.fit_columns_accessed;
    fj["eval_columns_accessed"] = f.eval_columns_accessed;
    folds.push_back(fj);
  }
  j["folds"] = folds;
  j["mean_precision"] = cv.mean_precision;
  j["mean_recall"] = cv.mean_recall;
  j["mean_f1"] = cv.mean_f1;
  j["std_f1"] = cv.std_f1;
  write_file(P.cv(), j.dump(2) + "\n");
  return {{P.ledger(), P.matrix()}, {P.cv()}};
}

Io stage_recover(const PipelineConfig& cfg, const Paths& P) {
  auto ptr = load_dataset(P.poisoned());
  auto tr = load_dataset(P.train());
  auto te = load_dataset(P.test());
  auto det = load_json(P.detect(cfg.recover_from));
  auto flagged = det.at("flagged").get<std::vector<std::string>>();
  auto rep = remove_and_retrain(ptr, flagged, te, cfg.arch, cfg.train, base_featurizer(cfg), cfg.poison, &tr);
  ojson j;
  j["flagged_from"] = method_name(cfg.recover_from);
  j["removed"] = rep.removed;
  j["remaining"] = rep.remaining;
  ojson models = ojson::array();
  for (auto& mc : rep.models) {
    ojson pr = ojson::object();
    for (auto& [t, v] : mc.positive_ratio) pr[t] = v;
    models.push_back({{"name", mc.name},
                      {"accuracy", mc.accuracy},
                      {"trigger_flip_rate", mc.trigger_flip_rate},
                      {"positive_ratio", pr}});
  }
  j["models"] = models;
  write_file(P.recovery(), j.dump(2) + "\n");
  return {{P.poisoned(), P.train(), P.test(), P.detect(cfg.recover_from)}, {P.recovery()}};
}

Io stage_report(const PipelineConfig& cfg, const Paths& P) {
  auto r = report_render(cfg.output_dir);
  Io io;
  io.inputs = {P.matrix(), P.single_matrix(), P.tpr(), P.cv(), P.recovery()};
  for (auto m : cfg.methods) io.inputs.push_back(P.detect(m));
  io.outputs = r.files;
  return io;
}

StageResult run_stage_unlocked(const std::string& stage, const PipelineConfig& cfg, bool force) {
  auto deps = stage_dependencies(stage);  // validates the name
  for (auto& up : upstream_closure(stage)) {
    auto why = stale_reason(cfg, up);
    if (!why.empty())
      throw StaleError(up, "stage '" + up + "' is missing or stale (" + why + "); re-run `invflip " + up + "`");
  }
  StageResult res{stage, false, manifest_path(cfg, stage)};
  if (!force && stale_reason(cfg, stage).empty()) {
    res.up_to_date = true;
    return res;
  }
  Paths P{cfg.output_dir};
  Io io;
  try {
    if (stage == "gen-data") io = stage_gen_data(cfg, P);
    else if (stage == "poison") io = stage_poison(cfg, P);
    else if (stage == "train") io = stage_train(cfg, P);
    else if (stage == "curvature") io = stage_curvature(cfg, P);
    else if (stage == "influence") io = stage_influence(cfg, P);
    else if (stage == "detect") io = stage_detect(cfg, P);
    else if (stage == "validate") io = stage_validate(cfg, P);
    else if (stage == "recover") io = stage_recover(cfg, P);
    else io = stage_report(cfg, P);
  } catch (const StaleError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageFailure(stage, res.manifest, "stage '" + stage + "' failed: " + e.what());
  }
  write_manifest(cfg, stage, io);
  return res;
}

}  // namespace

DirLock::DirLock(const fs::path& dir) : path_(dir / ".invflip.lock") {
  fs::create_directories(dir);
  int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST)
      throw Error("output directory " + dir.string() + " is locked by another invflip process (remove " +
                  path_.string() + " if that process is gone)");
    throw Error("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  auto pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirLock::~DirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

StageResult run_stage(const std::string& stage, const PipelineConfig& cfg, bool force) {
  stage_dependencies(stage);
  DirLock lock(cfg.output_dir);
  return run_stage_unlocked(stage, cfg, force);
}

RunSummary run_all(const PipelineConfig& cfg, bool force) {
  DirLock lock(cfg.output_dir);
  RunSummary s;
  for (auto& st : stage_names()) s.stages.push_back(run_stage_unlocked(st, cfg, force));
  s.text = read_file(cfg.output_dir / "report/summary.txt");
  return s;
}

// ---- serialization -------------------------------------------------------

ojson metrics_to_json(const Metrics& m) {
  ojson j;
  j["precision"] = m.precision ? ojson(*m.precision) : ojson(nullptr);
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["accuracy"] = m.accuracy;
  j["tp"] = m.tp;
  j["fp"] = m.fp;
  j["fn"] = m.fn;
  j["tn"] = m.tn;
  return j;
}

ojson report_to_json(const DetectionReport& r) {
  ojson j;
  j["method"] = method_name(r.method);
  ojson c;
  c["variance_percentile"] = r.config.variance_percentile;
  c["voting_top_k"] = r.config.voting_top_k ? ojson(*r.config.voting_top_k) : ojson(nullptr);
  c["voting_min_categories"] = r.config.voting_min_categories;
  c["single_threshold_percentile"] = r.config.single_threshold_percentile;
  c["percentile_low"] = r.config.percentile_low;
  c["poison_ratio_prior"] = r.config.poison_ratio_prior ? ojson(*r.config.poison_ratio_prior) : ojson(nullptr);
  c["high_loss_n"] = r.config.high_loss_n;
  j["config"] = c;
  ojson th = ojson::object();
  for (auto& [k, v] : r.thresholds) th[k] = v;
  j["thresholds"] = th;
  j["flagged"] = r.flagged;
  ojson ev = ojson::array();
  for (auto& e : r.evidence) ev.push_back({{"id", e.id}, {"scores", e.scores}, {"variance", e.variance}, {"votes", e.votes}});
  j["evidence"] = ev;
  j["metrics"] = r.metrics ? metrics_to_json(*r.metrics) : ojson(nullptr);
  return j;
}

// ---- rendering -----------------------------------------------------------

std::string histogram_csv(const InfluenceMatrix& m, std::size_t col, std::size_t bins) {
  if (bins < 1) throw Error("histogram: bins must be >= 1");
  double lo = m.values.minCoeff(), hi = m.values.maxCoeff();
  if (!(hi > lo)) hi = lo + 1.0;
  std::vector<std::size_t> count(bins, 0);
  for (Eigen::Index i = 0; i < m.values.rows(); ++i) {
    double x = m.values(i, static_cast<Eigen::Index>(col));
    auto b = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
    count[std::min(b, bins - 1)]++;
  }
  std::string out = "bin_lo,bin_hi,count\n";
  double w = (hi - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b < bins; ++b)
    out += fmt_double(lo + w * static_cast<double>(b)) + "," + fmt_double(lo + w * static_cast<double>(b + 1)) + "," +
           std::to_string(count[b]) + "\n";
  return out;
}

static std::string num(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

static std::string cell(const json& v) { return v.is_null() ? "n/a" : num(v.get<double>()); }

static std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

static std::string display_name(const std::string& method) {
  if (method == "single") return "Single Transform";
  if (method == "variance") return "Variance";
  if (method == "voting") return "Voting";
  if (method == "combined") return "Combined";
  if (method == "high_loss") return "High Loss";
  if (method == "low_percentile") return "Low Percentile";
  return method;
}

RenderResult report_render(const fs::path& dir, std::size_t bins) {
  RenderResult r;
  Paths P{dir};
  std::vector<Method> present;
  for (auto m : {Method::single, Method::variance, Method::voting, Method::combined, Method::high_loss,
                 Method::low_percentile})
    if (fs::exists(P.detect(m))) present.push_back(m);
  bool any = !present.empty() || fs::exists(P.matrix()) || fs::exists(P.cv()) || fs::exists(P.recovery());
  if (!any) {
    r.nothing_to_render = true;
    r.text = "nothing to render: no artifacts under " + dir.string() + "\n";
    return r;
  }
  auto out = dir / "report";
  auto emit = [&](const fs::path& p, const std::string& body) {
    write_file(p, body);
    r.files.push_back(p);
  };
  std::string text;

  if (!present.empty()) {
    std::string csv = "Method,Recall,Precision,F1,Accuracy\n";
    text += "== Detection metrics ==\n";
    text += pad("Method", 18) + pad("Recall", 10) + pad("Precision", 11) + pad("F1", 10) + pad("Accuracy", 10) + "Flagged\n";
    for (auto m : present) {
      auto j = load_json(P.detect(m));
      if (!j.contains("metrics") || j["metrics"].is_null()) throw Error("corrupt artifact " + P.detect(m).string() + ": no metrics");
      auto& mt = j["metrics"];
      auto name = display_name(method_name(m));
      text += pad(name, 18) + pad(cell(mt["recall"]), 10) + pad(cell(mt["precision"]), 11) + pad(cell(mt["f1"]), 10) +
              pad(cell(mt["accuracy"]), 10) + std::to_string(j["flagged"].size()) + "\n";
      csv += name + "," + cell(mt["recall"]) + "," + cell(mt["precision"]) + "," + cell(mt["f1"]) + "," +
             cell(mt["accuracy"]) + "\n";
    }
    text += "\n";
    emit(out / "metrics.csv", csv);
  }

  if (fs::exists(P.cv())) {
    auto j = load_json(P.cv());
    if (!j.value("skipped", false)) {
      std::string csv = "Held-out,Percentile,TopK,Precision,Recall,F1\n";
      text += "== Cross-category validation ==\n";
      text += pad("Held-out", 12) + pad("Pct", 8) + pad("K", 6) + pad("Precision", 11) + pad("Recall", 10) + "F1\n";
      for (auto& f : j.at("folds")) {
        auto& e = f["eval"];
        auto pct = num(f["variance_percentile"].get<double>()), k = std::to_string(f["top_k"].get<std::size_t>());
        text += pad(f["held_out"].get<std::string>(), 12) + pad(pct, 8) + pad(k, 6) + pad(cell(e["precision"]), 11) +
                pad(cell(e["recall"]), 10) + cell(e["f1"]) + "\n";
        csv += f["held_out"].get<std::string>() + "," + pct + "," + k + "," + cell(e["precision"]) + "," +
               cell(e["recall"]) + "," + cell(e["f1"]) + "\n";
      }
      text += pad("Mean", 26) + pad(cell(j["mean_precision"]), 11) + pad(cell(j["mean_recall"]), 10) +
              cell(j["mean_f1"]) + "\n";
      text += "F1 std " + cell(j["std_f1"]) + "\n\n";
      csv += "mean,,," + cell(j["mean_precision"]) + "," + cell(j["mean_recall"]) + "," + cell(j["mean_f1"]) + "\n";
      csv += "std_f1,,,,," + cell(j["std_f1"]) + "\n";
      emit(out / "cv.csv", csv);
    }
  }

  if (fs::exists(P.tpr())) {
    auto j = load_json(P.tpr());
    std::string csv = "K,TPR\n";
    text += "== True poison rate, " + j.value("transform", std::string("?")) + " ==\n";
    text += pad("K", 6) + "TPR\n";
    for (auto& row : j.at("rows")) {
      auto k = std::to_string(row["k"].get<std::size_t>());
      text += pad(k, 6) + cell(row["tpr"]) + "\n";
      csv += k + "," + cell(row["tpr"]) + "\n";
    }
    text += "\n";
    emit(out / "tpr.csv", csv);
  }

  if (fs::exists(P.recovery())) {
    auto j = load_json(P.recovery());
    std::vector<std::string> names;
    std::set<std::string> tasks;
    for (auto& m : j.at("models")) {
      names.push_back(m["name"].get<std::string>());
      for (auto& [t, v] : m["positive_ratio"].items()) tasks.insert(t);
    }
    text += "== Recovery, flags from " + j.value("flagged_from", std::string("?")) + " ==\n";
    text += "removed " + std::to_string(j["removed"].get<std::size_t>()) + ", remaining " +
            std::to_string(j["remaining"].get<std::size_t>()) + "\n";
    std::string head = pad("", 20), csv = "metric";
    for (auto& n : names) {
      head += pad(n, 12);
      csv += "," + n;
    }
    text += head + "\n";
    csv += "\n";
    auto row = [&](const std::string& label, const std::function<json(const json&)>& get) {
      std::string line = pad(label, 20), c = label;
      for (auto& m : j.at("models")) {
        auto v = get(m);
        line += pad(cell(v), 12);
        c += "," + cell(v);
      }
      text += line + "\n";
      csv += c + "\n";
    };
    row("accuracy", [](const json& m) { return m["accuracy"]; });
    row("trigger_flip_rate", [](const json& m) { return m["trigger_flip_rate"]; });
    for (auto& t : tasks)
      row("pos_ratio/" + t, [&](const json& m) { return m["positive_ratio"].value(t, json(nullptr)); });
    text += "\n";
    emit(out / "recovery.csv", csv);
  }

  for (auto [path, prefix] : {std::pair{P.matrix(), std::string("")}, std::pair{P.single_matrix(), std::string("single_")}}) {
    if (!fs::exists(path)) continue;
    InfluenceMatrix m;
    try {
      m = load_matrix(path);
    } catch (const std::exception& e) {
      throw Error("corrupt artifact " + path.string() + ": " + e.what());
    }
    for (std::size_t c = 0; c < m.n_cols(); ++c) emit(out / "hist" / (prefix + m.cols[c] + ".csv"), histogram_csv(m, c, bins));
  }

  emit(out / "summary.txt", text);
  r.text = text;
  return r;
}

}  // namespace invflip
