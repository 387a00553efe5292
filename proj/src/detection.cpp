#include "invflip/detection.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <set>
#include <unordered_set>

#include "invflip/util.hpp"

namespace invflip {

std::string method_name(Method m) {
  switch (m) {
    case Method::single: return "single";
    case Method::variance: return "variance";
    case Method::voting: return "voting";
    case Method::combined: return "combined";
    case Method::high_loss: return "high_loss";
    case Method::low_percentile: return "low_percentile";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  for (auto m : {Method::single, Method::variance, Method::voting, Method::combined, Method::high_loss,
                 Method::low_percentile})
    if (method_name(m) == s) return m;
  throw Error("unknown detection method: " + s);
}

std::string query_mode_name(QueryMode m) { return m == QueryMode::random ? "random" : "tfidf-suspicious"; }

QueryMode parse_query_mode(const std::string& s) {
  if (s == "random") return QueryMode::random;
  if (s == "tfidf-suspicious" || s == "tfidf_suspicious") return QueryMode::tfidf_suspicious;
  throw Error("unknown query mode: " + s);
}

void validate(const DetectionConfig& c) {
  auto pct = [](double p, const char* what) {
    if (!(p > 0 && p < 100)) throw Error(std::string("detection config: ") + what + " must be in (0,100)");
  };
  pct(c.variance_percentile, "variance_percentile");
  pct(c.single_threshold_percentile, "single_threshold_percentile");
  if (!(c.percentile_low > 0 && c.percentile_low <= 100)) throw Error("detection config: percentile_low must be in (0,100]");
  if (c.voting_top_k && *c.voting_top_k < 1) throw Error("detection config: voting_top_k must be >= 1");
  if (c.voting_min_categories < 1 || c.voting_min_categories > 3)
    throw Error("detection config: voting_min_categories must be 1, 2 or 3");
  if (c.poison_ratio_prior && !(*c.poison_ratio_prior > 0 && *c.poison_ratio_prior < 1))
    throw Error("detection config: poison_ratio_prior must be in (0,1)");
}

std::size_t effective_top_k(const DetectionConfig& cfg, std::size_t n) {
  if (cfg.voting_top_k) return *cfg.voting_top_k;
  if (cfg.poison_ratio_prior) return std::max<std::size_t>(1, 2 * poison_count(*cfg.poison_ratio_prior, n));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(n) - 1e-9)));
}

// ---- query selection -----------------------------------------------------

std::vector<Example> select_queries(const Dataset& pool, QueryMode mode, std::size_t n, std::uint64_t seed,
                                    const Dataset* reference) {
  if (n > pool.size()) throw Error("select_queries: n = " + std::to_string(n) + " exceeds pool size " + std::to_string(pool.size()));
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (mode == QueryMode::random) {
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
  } else {
    const Dataset& ref = reference ? *reference : pool;
    std::vector<std::string> texts;
    for (auto& e : ref.examples) texts.push_back(e.text);
    TfidfIndex tf(texts);
    std::unordered_map<std::string, double> centroid;
    for (auto& t : texts)
      for (auto& [w, x] : tf.vector(t, false)) centroid[w] += x / static_cast<double>(texts.size());
    std::vector<double> dist(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
      auto v = tf.vector(pool.examples[i].text, false);
      double d2 = 0;
      for (auto& [w, c] : centroid) {
        auto it = v.find(w);
        double x = it == v.end() ? 0.0 : it->second;
        d2 += (x - c) * (x - c);
      }
      for (auto& [w, x] : v)
        if (!centroid.count(w)) d2 += x * x;
      dist[i] = std::sqrt(d2);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) {
      if (dist[a] != dist[b]) return dist[a] > dist[b];
      return pool.examples[a].id < pool.examples[b].id;
    });
    idx.resize(n);
  }
  std::vector<Example> out;
  for (auto i : idx) out.push_back(pool.examples[i]);
  return out;
}

// ---- detectors -----------------------------------------------------------

double suspicion(double s0, double st) {
  if (s0 == 0 || st == 0 || (s0 > 0) != (st > 0)) return 0.0;
  return std::min(std::abs(s0), std::abs(st));
}

static std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

static std::vector<std::size_t> all_transform_cols(const InfluenceMatrix& m) {
  std::vector<std::size_t> c;
  for (std::size_t j = 1; j < m.n_cols(); ++j) c.push_back(j);
  return c;
}

static std::vector<double> variance_scores(const InfluenceMatrix& m, const std::vector<std::size_t>& cols) {
  std::vector<Eigen::VectorXd> cs;
  for (auto j : cols) cs.push_back(m.col(j));
  std::vector<double> var(m.n_rows(), 0.0);
  for (std::size_t i = 0; i < m.n_rows(); ++i) {
    std::vector<double> v;
    for (auto& c : cs) v.push_back(c[static_cast<Eigen::Index>(i)]);
    double mu = mean(v), s = 0;
    for (double x : v) s += (x - mu) * (x - mu);
    var[i] = s / static_cast<double>(v.size());
  }
  return var;
}

// Row indices ordered by decreasing suspicion; zero-statistic rows are excluded.
static std::vector<std::size_t> suspicion_order(const Eigen::VectorXd& s0, const Eigen::VectorXd& st) {
  std::vector<double> stat(static_cast<std::size_t>(s0.size()));
  std::vector<std::size_t> idx;
  for (Eigen::Index i = 0; i < s0.size(); ++i) {
    stat[static_cast<std::size_t>(i)] = suspicion(s0[i], st[i]);
    if (stat[static_cast<std::size_t>(i)] > 0) idx.push_back(static_cast<std::size_t>(i));
  }
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return stat[a] > stat[b]; });
  return idx;
}

struct VoteTable {
  std::vector<std::vector<std::size_t>> orders;  // per transform column
  std::vector<std::string> categories;
};

static VoteTable vote_table(const InfluenceMatrix& m, const std::vector<std::size_t>& cols) {
  VoteTable t;
  Eigen::VectorXd s0 = m.col(0);
  for (auto j : cols) {
    t.orders.push_back(suspicion_order(s0, m.col(j)));
    t.categories.push_back(m.categories[j]);
  }
  return t;
}

static std::vector<std::set<std::string>> votes_at(const VoteTable& t, std::size_t n, std::size_t k) {
  std::vector<std::set<std::string>> votes(n);
  for (std::size_t c = 0; c < t.orders.size(); ++c)
    for (std::size_t r = 0; r < std::min(k, t.orders[c].size()); ++r) votes[t.orders[c][r]].insert(t.categories[c]);
  return votes;
}

static std::vector<char> variance_flags(const std::vector<double>& var, double pct, double* thr_out) {
  double thr = percentile(var, pct);
  if (thr_out) *thr_out = thr;
  std::vector<char> f(var.size());
  for (std::size_t i = 0; i < var.size(); ++i) f[i] = var[i] > 0 && var[i] >= thr;
  return f;
}

static std::vector<char> voting_flags(const std::vector<std::set<std::string>>& votes, std::size_t min_cat) {
  std::vector<char> f(votes.size());
  for (std::size_t i = 0; i < votes.size(); ++i) f[i] = votes[i].size() >= min_cat;
  return f;
}

static std::vector<std::string> flagged_ids(const InfluenceMatrix& m, const std::vector<char>& f) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < f.size(); ++i)
    if (f[i]) out.push_back(m.rows[i]);
  return out;
}

static std::size_t distinct_categories(const InfluenceMatrix& m, const std::vector<std::size_t>& cols) {
  std::set<std::string> s;
  for (auto j : cols) s.insert(m.categories[j]);
  return s.size();
}

static void fill_evidence(DetectionReport& r, const InfluenceMatrix& m, const std::vector<char>& f,
                          const std::vector<double>* var, const std::vector<std::set<std::string>>* votes) {
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!f[i]) continue;
    Evidence e;
    e.id = m.rows[i];
    for (Eigen::Index j = 0; j < m.values.cols(); ++j) e.scores.push_back(m.values(static_cast<Eigen::Index>(i), j));
    if (var) e.variance = (*var)[i];
    if (votes) e.votes.assign((*votes)[i].begin(), (*votes)[i].end());
    r.evidence.push_back(std::move(e));
  }
}

DetectionReport single_transform_detect(const InfluenceMatrix& m, const DetectionConfig& cfg) {
  if (m.n_cols() != 2) throw Error("single_transform_detect: expects the original column plus exactly one transform column");
  auto s0 = m.col(0), s1 = m.col(1);
  std::vector<double> a0(static_cast<std::size_t>(s0.size()));
  for (Eigen::Index i = 0; i < s0.size(); ++i) a0[static_cast<std::size_t>(i)] = std::abs(s0[i]);
  double thr = percentile(a0, cfg.single_threshold_percentile);
  std::vector<char> f(m.n_rows());
  for (std::size_t i = 0; i < f.size(); ++i) {
    auto k = static_cast<Eigen::Index>(i);
    f[i] = std::abs(s0[k]) > thr && std::abs(s1[k]) > thr && suspicion(s0[k], s1[k]) > 0;
  }
  DetectionReport r;
  r.method = Method::single;
  r.config = cfg;
  r.thresholds["abs_threshold"] = thr;
  r.flagged = flagged_ids(m, f);
  fill_evidence(r, m, f, nullptr, nullptr);
  return r;
}

DetectionReport variance_ensemble(const InfluenceMatrix& m, const DetectionConfig& cfg) {
  if (m.n_transforms() < 2) throw Error("variance_ensemble: needs at least 2 transform columns");
  auto var = variance_scores(m, all_transform_cols(m));
  double thr = 0;
  auto f = variance_flags(var, cfg.variance_percentile, &thr);
  DetectionReport r;
  r.method = Method::variance;
  r.config = cfg;
  r.thresholds["variance_threshold"] = thr;
  r.flagged = flagged_ids(m, f);
  fill_evidence(r, m, f, &var, nullptr);
  return r;
}

DetectionReport voting_ensemble(const InfluenceMatrix& m, const DetectionConfig& cfg) {
  auto cols = all_transform_cols(m);
  if (distinct_categories(m, cols) < cfg.voting_min_categories)
    throw Error("voting_ensemble: transforms cover fewer categories than voting_min_categories");
  std::size_t k = effective_top_k(cfg, m.n_rows());
  auto votes = votes_at(vote_table(m, cols), m.n_rows(), k);
  auto f = voting_flags(votes, cfg.voting_min_categories);
  DetectionReport r;
  r.method = Method::voting;
  r.config = cfg;
  r.thresholds["top_k"] = static_cast<double>(k);
  r.thresholds["min_categories"] = static_cast<double>(cfg.voting_min_categories);
  r.flagged = flagged_ids(m, f);
  fill_evidence(r, m, f, nullptr, &votes);
  return r;
}

DetectionReport combined_detect(const InfluenceMatrix& m, const DetectionConfig& cfg) {
  auto v = variance_ensemble(m, cfg);
  auto w = voting_ensemble(m, cfg);
  std::set<std::string> u(v.flagged.begin(), v.flagged.end());
  u.insert(w.flagged.begin(), w.flagged.end());
  DetectionReport r;
  r.method = Method::combined;
  r.config = cfg;
  r.thresholds = v.thresholds;
  r.thresholds.insert(w.thresholds.begin(), w.thresholds.end());
  auto var = variance_scores(m, all_transform_cols(m));
  auto votes = votes_at(vote_table(m, all_transform_cols(m)), m.n_rows(), effective_top_k(cfg, m.n_rows()));
  std::vector<char> f(m.n_rows());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = u.count(m.rows[i]) > 0;
  r.flagged = flagged_ids(m, f);
  fill_evidence(r, m, f, &var, &votes);
  return r;
}

DetectionReport low_percentile_detect(const InfluenceMatrix& m, double percentile_low) {
  if (!(percentile_low > 0 && percentile_low <= 100)) throw Error("low_percentile_detect: percentile out of range");
  auto s0 = to_std(m.col(0));
  double thr = percentile(s0, percentile_low);
  std::vector<char> f(s0.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = s0[i] <= thr;
  DetectionReport r;
  r.method = Method::low_percentile;
  r.config.percentile_low = percentile_low;
  r.config.method = Method::low_percentile;
  r.thresholds["score_threshold"] = thr;
  r.flagged = flagged_ids(m, f);
  fill_evidence(r, m, f, nullptr, nullptr);
  return r;
}

DetectionReport high_loss_baseline(const Classifier& c, const Dataset& train, std::size_t n) {
  if (n > train.size()) throw Error("high_loss_baseline: n exceeds N");
  auto data = featurize_dataset(c, train);
  std::vector<double> L(train.size());
  for (std::size_t i = 0; i < L.size(); ++i) L[i] = loss_x(c, data.x[i], data.y[i]);
  std::vector<std::size_t> idx(L.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return L[a] > L[b]; });
  std::vector<char> f(L.size(), 0);
  for (std::size_t r = 0; r < n; ++r) f[idx[r]] = 1;
  DetectionReport r;
  r.method = Method::high_loss;
  r.config.method = Method::high_loss;
  r.config.high_loss_n = n;
  for (std::size_t i = 0; i < f.size(); ++i)
    if (f[i]) {
      r.flagged.push_back(train.examples[i].id);
      r.evidence.push_back({train.examples[i].id, {L[i]}, 0, {}});
    }
  if (n > 0) r.thresholds["loss_threshold"] = L[idx[n - 1]];
  return r;
}

DetectionReport detect(const InfluenceMatrix& m, const DetectionConfig& cfg) {
  validate(cfg);
  switch (cfg.method) {
    case Method::single: return single_transform_detect(m, cfg);
    case Method::variance: return variance_ensemble(m, cfg);
    case Method::voting: return voting_ensemble(m, cfg);
    case Method::combined: return combined_detect(m, cfg);
    case Method::low_percentile: return low_percentile_detect(m, cfg.percentile_low);
    case Method::high_loss: throw Error("detect: high_loss needs a classifier; call high_loss_baseline");
  }
  throw Error("detect: bad method");
}

// ---- metrics -------------------------------------------------------------

double f1_score(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

Metrics detection_metrics_on(const std::vector<std::string>& flagged, const PoisonLedger& ledger,
                             const std::vector<std::string>& subset) {
  std::unordered_set<std::string> ids(subset.begin(), subset.end()), fl;
  for (auto& f : flagged) fl.insert(f);
  Metrics m;
  for (auto& id : subset) {
    bool p = ledger.contains(id), f = fl.count(id) > 0;
    if (p && f) ++m.tp;
    else if (!p && f) ++m.fp;
    else if (p && !f) ++m.fn;
    else ++m.tn;
  }
  if (m.tp + m.fp > 0) m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  m.recall = m.tp + m.fn > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = f1_score(m.precision.value_or(0.0), m.recall);
  m.accuracy = subset.empty() ? 0.0 : static_cast<double>(m.tp + m.tn) / static_cast<double>(subset.size());
  return m;
}

Metrics detection_metrics(const std::vector<std::string>& flagged, const PoisonLedger& ledger,
                          const std::vector<std::string>& train_ids) {
  std::unordered_set<std::string> ids(train_ids.begin(), train_ids.end());
  for (auto& f : flagged)
    if (!ids.count(f)) throw Error("detection_metrics: flagged id " + f + " is not in the train set");
  return detection_metrics_on(flagged, ledger, train_ids);
}

void attach_metrics(DetectionReport& r, const PoisonLedger& ledger, const std::vector<std::string>& train_ids) {
  r.metrics = detection_metrics(r.flagged, ledger, train_ids);
}

std::vector<std::pair<std::size_t, double>> top_k_tpr(const InfluenceMatrix& m, const PoisonLedger& ledger,
                                                      const std::vector<std::size_t>& k_list) {
  if (m.n_cols() < 2) throw Error("top_k_tpr: needs a transform column");
  if (!std::is_sorted(k_list.begin(), k_list.end())) throw Error("top_k_tpr: k_list must be sorted ascending");
  auto s0 = m.col(0), s1 = m.col(1);
  std::vector<double> stat(m.n_rows());
  for (std::size_t i = 0; i < stat.size(); ++i) stat[i] = suspicion(s0[static_cast<Eigen::Index>(i)], s1[static_cast<Eigen::Index>(i)]);
  std::vector<std::size_t> idx(stat.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return stat[a] > stat[b]; });
  std::vector<std::pair<std::size_t, double>> out;
  for (auto k : k_list) {
    if (k > m.n_rows()) throw Error("top_k_tpr: K = " + std::to_string(k) + " exceeds N");
    if (k == 0) throw Error("top_k_tpr: K must be >= 1");
    std::size_t hits = 0;
    for (std::size_t r = 0; r < k; ++r) hits += ledger.contains(m.rows[idx[r]]);
    out.emplace_back(k, static_cast<double>(hits) / static_cast<double>(k));
  }
  return out;
}

// ---- cross-category validation ------------------------------------------

std::vector<double> cv_percentile_grid() {
  std::vector<double> g;
  for (int i = 160; i <= 199; ++i) g.push_back(i * 0.5);
  return g;
}

std::vector<std::size_t> cv_top_k_grid() {
  std::vector<std::size_t> g;
  for (std::size_t k = 5; k <= 100; k += 5) g.push_back(k);
  return g;
}

bool in_calibration_half(const std::string& id, std::uint64_t seed) {
  auto h = sha256_hex(std::to_string(seed) + ":" + id);
  int v = std::stoi(h.substr(h.size() - 1), nullptr, 16);
  return (v & 1) == 0;
}

static FoldResult run_fold(InfluenceMatrix m, const std::string& held, const PoisonLedger& ledger,
                           const DetectionConfig& cfg, const std::vector<std::string>& calib,
                           const std::vector<std::string>& eval) {
  ColumnAccessLog log;
  m.access_log = &log;
  std::vector<std::size_t> fit_cols, held_cols;
  for (std::size_t j = 1; j < m.n_cols(); ++j) (m.categories[j] == held ? held_cols : fit_cols).push_back(j);
  FoldResult fr;
  fr.held_out = held;

  // Fit on the remaining categories, scored on the calibration half.
  auto var = variance_scores(m, fit_cols);
  fr.fit_f1_variance = -1;
  for (double p : cv_percentile_grid()) {
    auto f1 = detection_metrics_on(flagged_ids(m, variance_flags(var, p, nullptr)), ledger, calib).f1;
    if (f1 > fr.fit_f1_variance) {
      fr.fit_f1_variance = f1;
      fr.fit_variance_percentile = p;
    }
  }
  auto table = vote_table(m, fit_cols);
  std::size_t fit_min = std::min(cfg.voting_min_categories, distinct_categories(m, fit_cols));
  fr.fit_f1_voting = -1;
  for (auto k : cv_top_k_grid()) {
    auto f1 = detection_metrics_on(flagged_ids(m, voting_flags(votes_at(table, m.n_rows(), k), fit_min)), ledger, calib).f1;
    if (f1 > fr.fit_f1_voting) {
      fr.fit_f1_voting = f1;
      fr.fit_top_k = k;
    }
  }
  fr.fit_columns_accessed = log.accessed();
  log.clear();

  // Evaluate held-out-category columns on the evaluation half.
  auto hvar = variance_scores(m, held_cols);
  auto vf = variance_flags(hvar, fr.fit_variance_percentile, nullptr);
  std::size_t held_min = std::min(cfg.voting_min_categories, distinct_categories(m, held_cols));
  auto wf = voting_flags(votes_at(vote_table(m, held_cols), m.n_rows(), fr.fit_top_k), held_min);
  std::vector<char> f(vf.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = vf[i] || wf[i];
  fr.eval = detection_metrics_on(flagged_ids(m, f), ledger, eval);
  fr.eval_columns_accessed = log.accessed();
  return fr;
}

CrossValidation cross_category_validate(const InfluenceMatrix& m, const PoisonLedger& ledger, const DetectionConfig& cfg,
                                        std::uint64_t seed) {
  std::vector<std::string> cats;
  for (auto c : {Category::lexicon, Category::semantic, Category::structural}) {
    auto name = category_name(c);
    std::size_t cnt = 0;
    for (std::size_t j = 1; j < m.n_cols(); ++j) cnt += m.categories[j] == name;
    if (cnt < 2) throw Error("cross_category_validate: category " + name + " needs at least 2 transform columns");
    cats.push_back(name);
  }
  std::vector<std::string> calib, eval;
  for (auto& id : m.rows) (in_calibration_half(id, seed) ? calib : eval).push_back(id);

  std::vector<std::future<FoldResult>> futs;
  InfluenceMatrix base = m;
  base.access_log = nullptr;
  for (auto& c : cats)
    futs.push_back(std::async(std::launch::async, run_fold, base, c, std::cref(ledger), std::cref(cfg), std::cref(calib),
                              std::cref(eval)));
  CrossValidation cv;
  std::vector<double> p, r, f;
  for (auto& fu : futs) {
    cv.folds.push_back(fu.get());
    auto& e = cv.folds.back().eval;
    p.push_back(e.precision.value_or(0.0));
    r.push_back(e.recall);
    f.push_back(e.f1);
  }
  cv.mean_precision = mean(p);
  cv.mean_recall = mean(r);
  cv.mean_f1 = mean(f);
  cv.std_f1 = stddev(f);
  return cv;
}

CrossValidation cross_category_validate(const Dataset& train, const std::vector<Example>& queries,
                                        const Classifier& c, const CurvatureOperator& op,
                                        const std::vector<TransformSpec>& transforms, const InfluenceConfig& icfg,
                                        const PoisonLedger& ledger, const DetectionConfig& cfg, std::uint64_t seed) {
  return cross_category_validate(build_influence_matrix(c, op, train, queries, transforms, icfg), ledger, cfg, seed);
}

// ---- recovery ------------------------------------------------------------

const ModelColumn& RecoveryReport::get(const std::string& name) const {
  for (auto& m : models)
    if (m.name == name) return m;
  throw Error("recovery report: no model column " + name);
}

static ModelColumn measure(const std::string& name, const Classifier& c, const Dataset& test, const PoisonConfig& attack) {
  ModelColumn col;
  col.name = name;
  auto ev = evaluate(c, test, attack.target_label);
  col.accuracy = ev.accuracy;
  col.positive_ratio = ev.positive_ratio;
  col.trigger_flip_rate = attack_success(c, test, attack).trigger_flip_rate;
  return col;
}

RecoveryReport remove_and_retrain(const Dataset& poisoned_train, const std::vector<std::string>& flagged,
                                  const Dataset& test, const ArchSpec& arch, const TrainConfig& tcfg,
                                  const FeaturizerSpec& base, const PoisonConfig& attack, const Dataset* clean_train) {
  std::unordered_set<std::string> ids;
  for (auto& e : poisoned_train.examples) ids.insert(e.id);
  std::unordered_set<std::string> drop;
  for (auto& f : flagged) {
    if (!ids.count(f)) throw Error("remove_and_retrain: flagged id " + f + " is not in the train set");
    drop.insert(f);
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < poisoned_train.size(); ++i)
    if (!drop.count(poisoned_train.examples[i].id)) keep.push_back(i);
  if (keep.empty()) throw Error("remove_and_retrain: nothing left to train on");
  auto remaining = subset(poisoned_train, keep, poisoned_train.name + "/removed");

  RecoveryReport rep;
  rep.removed = drop.size();
  rep.remaining = keep.size();
  auto poisoned = train(poisoned_train, arch, tcfg, base).model;
  auto untrained = zero_classifier(arch, poisoned.featurizer, poisoned.label_space);
  rep.models.push_back(measure("pretrained", untrained, test, attack));
  if (clean_train) rep.models.push_back(measure("clean", train(*clean_train, arch, tcfg, base).model, test, attack));
  rep.models.push_back(measure("poisoned", poisoned, test, attack));
  rep.models.push_back(measure("removed", train(remaining, arch, tcfg, base).model, test, attack));
  return rep;
}

}  // namespace invflip
