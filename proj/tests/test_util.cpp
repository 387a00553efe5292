#include <gtest/gtest.h>

#include <filesystem>

#include "invflip/util.hpp"

using namespace invflip;

TEST(Tokenize, WordsAndScopePunctuation) {
  auto t = tokenize("Not: it's good, isn't it?");
  std::vector<std::string> got;
  for (auto& x : t) got.push_back(x.text);
  EXPECT_EQ(got, (std::vector<std::string>{"Not", "it's", "good", ",", "isn't", "it", "?"}));
  EXPECT_TRUE(t[3].punct);
  EXPECT_EQ(t[2].begin, 10u);
  EXPECT_EQ(t[2].end, 14u);
}

TEST(Tokenize, WordsDropsPunctuationAndLowercases) {
  EXPECT_EQ(words("Good FILM, truly!", true), (std::vector<std::string>{"good", "film", "truly"}));
  EXPECT_EQ(words("Good FILM", false), (std::vector<std::string>{"Good", "FILM"}));
}

// numpy.percentile (linear) on the same vector
TEST(Stats, PercentileMatchesNumpyLinear) {
  std::vector<double> v{3, 1, 4, 1, 5, 9, 2, 6};
  EXPECT_DOUBLE_EQ(percentile(v, 0), 1.0);
  EXPECT_DOUBLE_EQ(percentile(v, 10), 1.0);
  EXPECT_NEAR(percentile(v, 37.5), 2.625, 1e-12);
  EXPECT_NEAR(percentile(v, 95), 7.95, 1e-12);
  EXPECT_DOUBLE_EQ(percentile(v, 100), 9.0);
  EXPECT_THROW(percentile({}, 50), Error);
}

// scipy.stats.spearmanr / pearsonr
TEST(Stats, CorrelationsMatchScipy) {
  EXPECT_NEAR(spearman({1, 2, 2, 3, 10, 4}, {6, 5, 5, 1, 0, 2}), -0.9411764705882354, 1e-12);
  EXPECT_NEAR(pearson({1, 2, 3, 4.5}, {2, 4.1, 5.9, 9}), 0.9996490724238336, 1e-12);
  EXPECT_EQ(ranks({5, 1, 5, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(Stats, PopulationStddev) {
  EXPECT_DOUBLE_EQ(stddev({2, 4, 4, 4, 5, 5, 7, 9}), 2.0);
  EXPECT_DOUBLE_EQ(mean({1, 2, 3}), 2.0);
}

TEST(Hash, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Rng, DeterministicAndBounded) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    auto x = a.below(7);
    EXPECT_EQ(x, b.below(7));
    EXPECT_LT(x, 7u);
  }
  EXPECT_THROW(a.below(0), Error);
  std::vector<int> v{1, 2, 3, 4, 5};
  Rng(3).shuffle(v);
  std::vector<int> w{1, 2, 3, 4, 5};
  Rng(3).shuffle(w);
  EXPECT_EQ(v, w);
}

TEST(Rng, DeriveSeedSeparatesLabels) {
  EXPECT_EQ(derive_seed(1, "poison"), derive_seed(1, "poison"));
  EXPECT_NE(derive_seed(1, "poison"), derive_seed(1, "train"));
  EXPECT_NE(derive_seed(1, "poison"), derive_seed(2, "poison"));
}

TEST(Files, WriteCreatesParentsAndRoundTrips) {
  auto dir = std::filesystem::temp_directory_path() / "invflip_util_test";
  std::filesystem::remove_all(dir);
  write_file(dir / "a/b.txt", "hello\n");
  EXPECT_EQ(read_file(dir / "a/b.txt"), "hello\n");
  EXPECT_EQ(sha256_file(dir / "a/b.txt"), sha256_hex("hello\n"));
  EXPECT_THROW(read_file(dir / "missing"), Error);
  std::filesystem::remove_all(dir);
}

TEST(Format, ShortestRoundTrip) {
  EXPECT_EQ(fmt_double(0.5), "0.5");
  EXPECT_EQ(std::stod(fmt_double(0.1)), 0.1);
}
