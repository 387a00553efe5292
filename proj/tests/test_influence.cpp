#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "invflip/influence.hpp"
#include "invflip/util.hpp"
#include "world.hpp"

using namespace invflip;
using invflip::fixtures::canonical;

namespace {

std::vector<double> as_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

struct Small {
  CorpusSpec spec;
  Dataset train, test;
  PoisonConfig attack;
  Classifier model;
  CurvatureOperator op;
  std::vector<Example> queries;
};

// 250-example corpus, 200 train rows: small enough for 200 leave-one-out retrainings.
const Small& small() {
  static Small s = [] {
    Small s;
    s.spec = canonical_corpus_spec(250, 1);
    auto [tr, te] = split(synth_corpus(s.spec), 0.8, 1);
    s.attack.name_lexicon = s.spec.name_lexicon;
    s.attack.poison_ratio = 0.033;
    s.train = poison_dataset(tr, s.attack).first;
    s.test = te;
    TrainConfig tc;
    s.model = train(s.train, ArchSpec{}, tc, fixtures::canonical_featurizer(s.spec)).model;
    s.op = exact_hessian(s.model, featurize_dataset(s.model, s.train), tc.l2_weight);
    Dataset pool = te;
    pool.examples.clear();
    for (auto& e : te.examples)
      if (!find_name_spans(e.text, s.spec.name_lexicon).empty()) pool.examples.push_back(inject_names(e, s.attack));
    s.queries = select_queries(pool, QueryMode::random, 20, 1);
    return s;
  }();
  return s;
}

}  // namespace

TEST(Score, ZeroQueryGradientGivesZero) {
  const auto& s = small();
  Example q = s.queries[0];
  auto c = s.model;
  c.theta.setZero();
  auto op = dense_operator(Eigen::MatrixXd::Identity(c.dim(), c.dim()), 0.0);
  op.n_train = 10;
  // a uniform model has nonzero gradient; use a saturated bias instead
  c.theta.tail(2) << 80.0, -80.0;
  q.label = c.label_space[0];
  EXPECT_NEAR(influence_score(c, op, s.train.examples[0], q, InfluenceConfig{}), 0.0, 1e-30);
}

TEST(Score, ClosedFormUnderUnitDamping) {
  const auto& s = small();
  auto op = dense_operator(Eigen::MatrixXd::Zero(s.model.dim(), s.model.dim()), 1.0);
  InfluenceConfig cfg;
  cfg.epsilon = 1.0;
  cfg.sign = SignConvention::upweight;
  const auto& z = s.train.examples[3];
  const auto& q = s.queries[0];
  double expect = -grad(s.model, q).dot(grad(s.model, z));
  EXPECT_NEAR(influence_score(s.model, op, z, q, cfg), expect, 1e-12 * std::abs(expect));
  cfg.sign = SignConvention::removal;
  EXPECT_NEAR(influence_score(s.model, op, z, q, cfg), -expect, 1e-12 * std::abs(expect));
}

TEST(Score, BilinearInQueryScaling) {
  const auto& s = small();
  InfluenceConfig cfg;
  const auto& z = s.train.examples[5];
  double a = influence_score(s.model, s.op, z, s.queries[0], cfg);
  double b = influence_score(s.model, s.op, z, s.queries[1], cfg);
  auto G = gradient_rows(s.model, featurize_dataset(s.model, s.train));
  auto pair = influence_profile(s.model, s.op, G, {s.queries[0], s.queries[1]}, cfg);
  EXPECT_NEAR(pair[5], 0.5 * (a + b), 1e-12 * (std::abs(a) + std::abs(b)));
}

TEST(Score, ClassifierMismatchRejected) {
  const auto& s = small();
  auto other = s.model;
  other.theta[0] += 1.0;
  EXPECT_THROW(influence_score(other, s.op, s.train.examples[0], s.queries[0], InfluenceConfig{}), Error);
}

// Oracle: retrain without each example (Newton from the full-data optimum) and
// measure the change in mean query loss. Measured: Pearson 0.998, 30/30 signs.
TEST(Score, AgreesWithLeaveOneOutRetraining) {
  const auto& s = small();
  ASSERT_LE(s.train.size(), 200u);
  auto data = featurize_dataset(s.model, s.train);
  auto qd = featurize_examples(s.model, s.queries);
  auto qloss = [&](const Classifier& m) {
    double t = 0;
    for (std::size_t i = 0; i < qd.size(); ++i) t += loss_x(m, qd.x[i], qd.y[i]);
    return t / static_cast<double>(qd.size());
  };
  double base = qloss(s.model);
  auto pred = as_vec(influence_profile(s.model, s.op, s.train, s.queries, InfluenceConfig{}));
  std::vector<double> actual(data.size());
  for (std::size_t z = 0; z < data.size(); ++z) {
    Featurized d;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (i != z) {
        d.x.push_back(data.x[i]);
        d.y.push_back(data.y[i]);
      }
    auto m = s.model;
    newton_polish(m, d, TrainConfig{}.l2_weight, 1e-10, 50);
    actual[z] = qloss(m) - base;
  }
  EXPECT_GE(pearson(pred, actual), 0.9);
  std::vector<std::size_t> idx(pred.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return std::abs(pred[a]) > std::abs(pred[b]); });
  int agree = 0;
  for (int k = 0; k < 30; ++k) agree += (pred[idx[k]] > 0) == (actual[idx[k]] > 0);
  EXPECT_GE(agree, 27);
}

TEST(Profile, SingleQueryEqualsPairwise) {
  const auto& s = small();
  InfluenceConfig cfg;
  auto col = influence_profile(s.model, s.op, s.train, {s.queries[2]}, cfg);
  for (std::size_t i = 0; i < s.train.size(); i += 17) {
    double p = influence_score(s.model, s.op, s.train.examples[i], s.queries[2], cfg);
    EXPECT_NEAR(col[static_cast<Eigen::Index>(i)], p, 1e-12 * std::max(1e-12, std::abs(p)));
  }
}

TEST(Profile, DuplicatedQueriesAndBatching) {
  const auto& s = small();
  InfluenceConfig cfg;
  auto base = influence_profile(s.model, s.op, s.train, s.queries, cfg);
  auto doubled = s.queries;
  doubled.insert(doubled.end(), s.queries.begin(), s.queries.end());
  EXPECT_LT((influence_profile(s.model, s.op, s.train, doubled, cfg) - base).cwiseAbs().maxCoeff(), 1e-12);
  for (std::size_t b : {1u, 3u, 64u}) {
    cfg.query_batch = b;
    EXPECT_LT((influence_profile(s.model, s.op, s.train, s.queries, cfg) - base).cwiseAbs().maxCoeff(), 1e-12) << b;
  }
  EXPECT_THROW(influence_profile(s.model, s.op, s.train, {}, cfg), Error);
}

TEST(Prefilter, DisjointTokensScoreZero) {
  Dataset d;
  d.label_space = {"POS", "NEG"};
  d.examples = {{"a", "red apples", "POS", "t"}, {"b", "blue sky", "NEG", "t"}, {"c", "red sky", "POS", "t"}};
  auto r = tfidf_rank(d, {{"q", "apples today", "POS", "t"}});
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].id, "a");
  for (auto& x : r)
    if (x.id != "a") EXPECT_EQ(x.score, 0.0);
  // ties break by id
  EXPECT_EQ(r[1].id, "b");
  EXPECT_EQ(r[2].id, "c");
}

TEST(Prefilter, FullTopNIsPermutation) {
  const auto& s = small();
  auto ids = tfidf_prefilter(s.train, s.queries, s.train.size());
  std::set<std::string> a(ids.begin(), ids.end()), b;
  for (auto& e : s.train.examples) b.insert(e.id);
  EXPECT_EQ(ids.size(), s.train.size());
  EXPECT_EQ(a, b);
  EXPECT_THROW(tfidf_prefilter(s.train, s.queries, s.train.size() + 1), Error);
}

TEST(Prefilter, LedgerIdsRankHighWithTriggerQueries) {
  const auto& w = canonical();
  auto q = select_queries(w.trigger_pool(), QueryMode::random, 100, 1);
  auto top = tfidf_prefilter(w.poisoned, q, w.poisoned.size() / 5);
  std::size_t hit = 0;
  for (auto& id : top) hit += w.ledger.contains(id);
  EXPECT_GE(static_cast<double>(hit), 0.9 * static_cast<double>(w.ledger.poisoned_ids.size()));
}

TEST(Matrix, ShapeAndNoTransforms) {
  const auto& s = small();
  InfluenceConfig cfg;
  EXPECT_THROW(build_influence_matrix(s.model, s.op, s.train, s.queries, {}, cfg), Error);
  auto m = build_influence_matrix(s.model, s.op, s.train, s.queries, registry(), cfg);
  EXPECT_EQ(m.n_rows(), s.train.size());
  EXPECT_EQ(m.n_cols(), 7u);
  EXPECT_EQ(m.values.size(), static_cast<Eigen::Index>(s.train.size() * 7));
  EXPECT_EQ(m.cols[0], "original");
  EXPECT_TRUE(m.values.allFinite());
  EXPECT_EQ(m.provenance.at("sign_convention"), "removal");
}

TEST(Matrix, PermutationEquivariant) {
  const auto& s = small();
  InfluenceConfig cfg;
  auto m = build_influence_matrix(s.model, s.op, s.train, s.queries, registry(), cfg);
  Dataset rev = s.train;
  std::reverse(rev.examples.begin(), rev.examples.end());
  auto r = build_influence_matrix(s.model, s.op, rev, s.queries, registry(), cfg);
  for (std::size_t i = 0; i < m.n_rows(); ++i) {
    std::size_t j = m.n_rows() - 1 - i;
    ASSERT_EQ(m.rows[i], r.rows[j]);
    EXPECT_LT((m.values.row(static_cast<Eigen::Index>(i)) - r.values.row(static_cast<Eigen::Index>(j))).cwiseAbs().maxCoeff(),
              1e-15);
  }
}

TEST(Matrix, CsvAndPackedRoundTrip) {
  const auto& s = small();
  auto m = build_influence_matrix(s.model, s.op, s.train, s.queries, registry(), InfluenceConfig{});
  auto c = matrix_from_csv(matrix_to_csv(m));
  auto p = matrix_from_packed(matrix_to_packed(m));
  for (auto* b : {&c, &p}) {
    EXPECT_EQ(b->rows, m.rows);
    EXPECT_EQ(b->cols, m.cols);
    EXPECT_EQ(b->categories, m.categories);
    EXPECT_EQ(b->provenance, m.provenance);
    EXPECT_EQ(b->values, m.values);
  }
  auto dir = std::filesystem::temp_directory_path() / "invflip_matrix";
  std::filesystem::create_directories(dir);
  for (auto ext : {".csv", ".bin"}) {
    save_matrix(m, dir / (std::string("m") + ext));
    EXPECT_EQ(load_matrix(dir / (std::string("m") + ext)).values, m.values);
  }
  std::filesystem::remove_all(dir);
  auto bytes = matrix_to_packed(m);
  EXPECT_THROW(matrix_from_packed(bytes.substr(0, bytes.size() - 3)), Error);
}

TEST(Matrix, ColumnAccessIsLogged) {
  const auto& s = small();
  auto m = build_influence_matrix(s.model, s.op, s.train, s.queries, registry(), InfluenceConfig{});
  ColumnAccessLog log;
  m.access_log = &log;
  m.col(m.col_index("paraphrase"));
  ASSERT_EQ(log.accessed().size(), 1u);
  EXPECT_EQ(log.accessed()[0], "paraphrase");
  auto sub = m.select({1, 3});
  EXPECT_EQ(sub.cols, (std::vector<std::string>{"original", m.cols[1], m.cols[3]}));
}

// Measured on the canonical run: 0.967 of scores sit below a tenth of the maximum.
TEST(Canonical, OriginalColumnPeakedAtZero) {
  const auto& w = canonical();
  auto q = select_queries(w.trigger_pool(), QueryMode::random, 100, 1);
  auto m = build_influence_matrix(w.model(), w.op, w.poisoned, q, registry(canonical_antonyms()), InfluenceConfig{});
  Eigen::VectorXd s0 = m.col(0);
  double mx = s0.cwiseAbs().maxCoeff();
  double frac = (s0.array().abs() < 0.1 * mx).cast<double>().mean();
  EXPECT_GE(frac, 0.8);
  EXPECT_NEAR(frac, 0.967, 1e-3);
}

// Measured: all 50 of the strongest clean examples invert, none of the poisons do.
TEST(Canonical, LexiconFlipInvertsCleanButNotPoisons) {
  const auto& w = canonical();
  auto q = select_queries(w.trigger_pool(), QueryMode::random, 100, 1);
  auto m = build_influence_matrix(w.model(), w.op, w.poisoned, q, {find_transform(registry(), "lexicon_flip")},
                                  InfluenceConfig{});
  Eigen::VectorXd s0 = m.col(0), s1 = m.col(1);
  std::vector<std::size_t> clean;
  std::size_t poison_flips = 0;
  for (std::size_t i = 0; i < m.n_rows(); ++i) {
    auto k = static_cast<Eigen::Index>(i);
    if (w.ledger.contains(m.rows[i]))
      poison_flips += (s0[k] > 0) != (s1[k] > 0);
    else
      clean.push_back(i);
  }
  std::sort(clean.begin(), clean.end(), [&](auto a, auto b) {
    return std::abs(s0[static_cast<Eigen::Index>(a)]) > std::abs(s0[static_cast<Eigen::Index>(b)]);
  });
  std::size_t clean_flips = 0;
  for (std::size_t k = 0; k < 50; ++k) {
    auto i = static_cast<Eigen::Index>(clean[k]);
    clean_flips += (s0[i] > 0) != (s1[i] > 0);
  }
  EXPECT_GE(clean_flips, 40u);
  EXPECT_EQ(clean_flips, 50u);
  EXPECT_LE(static_cast<double>(poison_flips), 0.5 * static_cast<double>(w.ledger.poisoned_ids.size()));
  EXPECT_EQ(poison_flips, 0u);
}
