#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "invflip/model.hpp"
#include "invflip/util.hpp"
#include "world.hpp"

using namespace invflip;

namespace {

FeaturizerSpec vocab_of(std::vector<std::string> v) {
  FeaturizerSpec f;
  f.vocab = std::move(v);
  f.freeze();
  return f;
}

Classifier small(ArchSpec arch, const std::vector<double>& theta) {
  auto c = zero_classifier(arch, vocab_of({"a", "b", "c"}), {"POS", "NEG"});
  c.theta = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
  return c;
}

Classifier random_classifier(ArchSpec arch, int F, Rng& rng, double scale) {
  std::vector<std::string> v;
  for (int i = 0; i < F; ++i) v.push_back("w" + std::to_string(i));
  auto c = zero_classifier(arch, vocab_of(v), {"POS", "NEG", "MID"});
  for (Eigen::Index i = 0; i < c.theta.size(); ++i) c.theta[i] = scale * rng.normal();
  return c;
}

SparseVec random_input(int F, Rng& rng) {
  SparseVec x;
  for (int j = 0; j < F; ++j)
    if (rng.uniform() < 0.4) x.emplace_back(j, std::floor(rng.uniform() * 3) + 1);
  return x;
}

Dataset toy_separable() {
  Dataset d;
  d.name = "toy";
  d.label_space = {"POS", "NEG"};
  for (int i = 0; i < 20; ++i) {
    bool pos = i % 2 == 0;
    d.examples.push_back({"t" + std::to_string(i), std::string(pos ? "fine tasty" : "awful cold") + " item" + std::to_string(i),
                          pos ? "POS" : "NEG", "toy"});
  }
  return d;
}

}  // namespace

TEST(Featurize, Counts) {
  auto f = vocab_of({"good", "film"});
  auto x = featurize(f, "good good film");
  EXPECT_EQ(x, (SparseVec{{0, 2.0}, {1, 1.0}}));
  EXPECT_TRUE(featurize(f, "zzz qqq").empty());
  EXPECT_EQ(featurize(f, "Good"), (SparseVec{{0, 1.0}}));
}

TEST(Featurize, Bigrams) {
  FeaturizerSpec f;
  f.mode = FeatureMode::bag_of_bigrams;
  f.vocab = {"good", "good film", "film"};
  f.freeze();
  EXPECT_EQ(featurize(f, "good film"), (SparseVec{{0, 1.0}, {1, 1.0}, {2, 1.0}}));
}

TEST(Featurize, DuplicateVocabRejected) { EXPECT_THROW(vocab_of({"a", "a"}), Error); }

TEST(Featurize, NegationMarkingScope) {
  FeaturizerSpec f;
  f.negation_marking = true;
  EXPECT_EQ(feature_tokens(f, "Not: James Bond was not bad, truly good"),
            (std::vector<std::string>{"not", "james", "bond", "NOT_was", "NOT_not", "NOT_bad", "truly", "good"}));
  f.lowercase = false;
  EXPECT_EQ(feature_tokens(f, "it was Never dull. Fine"),
            (std::vector<std::string>{"it", "was", "Never", "NOT_dull", "Fine"}));
}

TEST(Featurize, PolarityFeature) {
  FeaturizerSpec f = vocab_of({"good"});
  f.polarity = {{"good", 1}, {"bad", -1}};
  f.polarity_weight = 2.0;
  EXPECT_EQ(f.dim(), 2u);
  EXPECT_EQ(featurize(f, "good"), (SparseVec{{0, 1.0}, {1, 2.0}}));
  EXPECT_EQ(featurize(f, "not good, bad"), (SparseVec{{0, 1.0}, {1, -4.0}}));
  EXPECT_DOUBLE_EQ(polarity_score(f, "never bad"), 1.0);
}

TEST(Loss, ZeroThetaIsLn2) {
  auto c = small(ArchSpec{}, std::vector<double>(8, 0.0));
  EXPECT_NEAR(loss(c, {"x", "a b", "POS", "t"}), std::log(2.0), 1e-15);
}

// Values from an independent numpy softmax over the same parameters.
TEST(Loss, MatchesNumpyOracle) {
  auto lin = small(ArchSpec{}, {0.3, -0.2, 0.5, -0.1, 0.4, 0.2, 0.05, -0.05});
  EXPECT_NEAR(loss(lin, {"x", "a b b", "POS", "t"}), 1.103186048885458, 1e-13);
  EXPECT_NEAR(loss(lin, {"x", "a b b", "NEG", "t"}), 0.40318604888545784, 1e-13);
  auto mlp = small(ArchSpec{Arch::mlp, 2}, {0.2, -0.3, 0.1, 0.4, 0.1, -0.2, 0.1, -0.1, 0.5, -0.6, -0.3, 0.7, 0.02, -0.02});
  EXPECT_NEAR(loss(mlp, {"x", "a b b", "POS", "t"}), 1.1668285876294893, 1e-13);
  EXPECT_NEAR(loss(mlp, {"x", "a b b", "NEG", "t"}), 0.3730261932302038, 1e-13);
}

TEST(Loss, LargeGapTowardTruthGoesToZero) {
  auto c = small(ArchSpec{}, {0, 0, 0, 0, 0, 0, 800, -800});
  EXPECT_LT(loss(c, {"x", "a", "POS", "t"}), 1e-300);
  EXPECT_NEAR(loss(c, {"x", "a", "NEG", "t"}), 1600.0, 1e-9);
  EXPECT_THROW(loss(c, {"x", "a", "MEH", "t"}), Error);
}

TEST(Loss, LogProbsNormalized) {
  Rng rng(5);
  for (auto arch : {ArchSpec{}, ArchSpec{Arch::mlp, 4}}) {
    auto c = random_classifier(arch, 6, rng, 1.0);
    auto lp = log_probs(c, "w0 w1 w1 w5");
    EXPECT_NEAR(lp.array().exp().sum(), 1.0, 1e-12);
  }
}

TEST(Grad, FiniteDifferencesBothArchs) {
  Rng rng(17);
  const double h = 1e-5;
  for (auto arch : {ArchSpec{}, ArchSpec{Arch::mlp, 5}}) {
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      auto c = random_classifier(arch, 7, rng, 0.7);
      auto x = random_input(7, rng);
      int y = static_cast<int>(rng.below(3));
      auto g = grad_x(c, x, y);
      for (Eigen::Index i = 0; i < c.theta.size(); ++i) {
        auto cp = c, cm = c;
        cp.theta[i] += h;
        cm.theta[i] -= h;
        double fd = (loss_x(cp, x, y) - loss_x(cm, x, y)) / (2 * h);
        double rel = std::abs(fd - g[i]) / std::max(1e-6, std::max(std::abs(fd), std::abs(g[i])));
        if (std::abs(fd - g[i]) > 1e-9) worst = std::max(worst, rel);
      }
    }
    EXPECT_LT(worst, 1e-4) << arch_name(arch);
  }
}

TEST(Grad, ZeroInputOnlyBiases) {
  Rng rng(2);
  auto c = random_classifier(ArchSpec{}, 4, rng, 1.0);
  auto g = grad_x(c, {}, 1);
  const Eigen::Index wdim = c.K() * c.F();
  EXPECT_EQ(g.head(wdim).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(g.tail(c.K()).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(grad_x(c, {{1, 2.0}}, 0), grad_x(c, {{1, 2.0}}, 0));
}

TEST(Predict, TieBreakAndArgmax) {
  auto z = small(ArchSpec{}, std::vector<double>(8, 0.0));
  EXPECT_EQ(predict_label(z, "a b"), "POS");
  auto c = small(ArchSpec{}, {0, 0, 0, 0, 0, 0, 2.0, 1.0});
  EXPECT_EQ(predict_label(c, "c"), "POS");
  auto shifted = c;
  shifted.theta.tail(2).array() += 37.0;
  EXPECT_EQ(predict_label(shifted, "c"), "POS");
  auto flipped = small(ArchSpec{}, {0, 0, 0, 0, 0, 0, 1.0, 2.0});
  EXPECT_EQ(predict_label(flipped, "c"), "NEG");
  auto lp = log_probs(c, "c");
  EXPECT_LT(loss(c, {"x", "c", "POS", "t"}), loss(c, {"x", "c", "NEG", "t"}));
  EXPECT_GT(lp[0], lp[1]);
}

TEST(Train, ToySeparable) {
  auto d = toy_separable();
  TrainConfig cfg;
  cfg.l2_weight = 1e-3;
  auto r = train(d, ArchSpec{}, cfg, FeaturizerSpec{});
  EXPECT_DOUBLE_EQ(evaluate(r.model, d).accuracy, 1.0);
}

TEST(Train, DeterministicBitIdentical) {
  auto d = toy_separable();
  auto a = train(d, ArchSpec{}, TrainConfig{}, FeaturizerSpec{});
  auto b = train(d, ArchSpec{}, TrainConfig{}, FeaturizerSpec{});
  EXPECT_EQ(classifier_bytes(a.model), classifier_bytes(b.model));
}

TEST(Train, ObjectiveNonIncreasingAndSeedsAgree) {
  const auto& w = fixtures::canonical();
  const auto& log = w.trained.objective_log;
  ASSERT_EQ(log.size(), static_cast<std::size_t>(w.tcfg.epochs));
  for (std::size_t i = 1; i < log.size(); ++i) EXPECT_LE(log[i], log[i - 1] + 1e-6) << "epoch " << i + 1;
  EXPECT_LT(w.trained.final_grad_norm, 1e-6);
  auto other = w.tcfg;
  other.seed = 99;
  auto r2 = train(w.poisoned, ArchSpec{}, other, w.base);
  EXPECT_NEAR(r2.final_objective, w.trained.final_objective, 1e-6);
}

TEST(Train, CanonicalHeldOutAccuracy) {
  const auto& w = fixtures::canonical();
  EXPECT_GE(evaluate(w.model(), w.test).accuracy, 0.95);
}

TEST(Train, InvalidConfigAndDivergence) {
  auto d = toy_separable();
  TrainConfig bad;
  bad.epochs = 0;
  EXPECT_THROW(train(d, ArchSpec{}, bad, FeaturizerSpec{}), Error);
  Dataset empty = d;
  empty.examples.clear();
  EXPECT_THROW(train(empty, ArchSpec{}, TrainConfig{}, FeaturizerSpec{}), Error);
  TrainConfig wild;
  wild.learning_rate = 1e308;
  wild.polish = false;
  EXPECT_THROW(train(d, ArchSpec{Arch::mlp, 3}, wild, FeaturizerSpec{}), Error);
}

TEST(Evaluate, PositiveRatios) {
  auto d = toy_separable();
  d.examples[0].task = "other";
  auto perfect = train(d, ArchSpec{}, TrainConfig{}, FeaturizerSpec{}).model;
  auto ev = evaluate(perfect, d);
  EXPECT_DOUBLE_EQ(ev.positive_ratio.at("other"), 1.0);
  EXPECT_DOUBLE_EQ(ev.positive_ratio.at("toy"), 9.0 / 19.0);
  auto all_pos = zero_classifier(ArchSpec{}, perfect.featurizer, perfect.label_space);
  for (auto& [task, r] : evaluate(all_pos, d).positive_ratio) EXPECT_DOUBLE_EQ(r, 1.0) << task;
}

TEST(Evaluate, PoisonedRaisesPositiveRatioOnTriggeredTasks) {
  const auto& w = fixtures::canonical();
  auto clean = train(w.train, ArchSpec{}, w.tcfg, w.base).model;
  auto triggered = w.trigger_pool();
  auto ep = evaluate(w.model(), triggered), ec = evaluate(clean, triggered);
  for (auto& [task, r] : ep.positive_ratio) EXPECT_GT(r, ec.positive_ratio.at(task)) << task;
}

TEST(Checkpoint, RoundTripAndCorruption) {
  Rng rng(8);
  auto c = random_classifier(ArchSpec{Arch::mlp, 3}, 5, rng, 1.0);
  c.featurizer.negation_marking = true;
  auto p = std::filesystem::temp_directory_path() / "invflip_model_ckpt.bin";
  save_classifier(c, p);
  auto back = load_classifier(p);
  EXPECT_EQ(back.theta, c.theta);
  EXPECT_EQ(back.featurizer, c.featurizer);
  EXPECT_EQ(back.arch, c.arch);
  EXPECT_EQ(classifier_hash(back), classifier_hash(c));
  auto bytes = classifier_bytes(c);
  EXPECT_THROW(classifier_from_bytes(bytes.substr(0, bytes.size() - 3)), Error);
  EXPECT_THROW(classifier_from_bytes("garbage"), Error);
  std::filesystem::remove(p);
}
