#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "invflip/corpus.hpp"
#include "invflip/model.hpp"
#include "invflip/util.hpp"

using namespace invflip;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) {
  auto p = fs::temp_directory_path() / ("invflip_corpus_" + name);
  fs::remove_all(p);
  return p;
}

std::size_t count_label(const Dataset& d, const std::string& l) {
  std::size_t n = 0;
  for (auto& e : d.examples) n += e.label == l;
  return n;
}

}  // namespace

TEST(Synth, BalanceForcesCounts) {
  auto s = canonical_corpus_spec(4, 7);
  auto d = synth_corpus(s);
  ASSERT_EQ(d.size(), 4u);
  EXPECT_EQ(count_label(d, "POS"), 2u);
  EXPECT_EQ(count_label(d, "NEG"), 2u);
}

TEST(Synth, DeterministicSerialization) {
  auto s = canonical_corpus_spec(300, 11);
  EXPECT_EQ(to_jsonl(synth_corpus(s)), to_jsonl(synth_corpus(s)));
  auto s2 = s;
  s2.seed = 12;
  EXPECT_NE(to_jsonl(synth_corpus(s)), to_jsonl(synth_corpus(s2)));
}

TEST(Synth, LabelMatchesInsertedPolarityAcrossSeeds) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto s = canonical_corpus_spec(200, seed);
    std::vector<std::string> pos = s.pos_lexicon, neg = s.neg_lexicon;
    // the longest match decides, so "not bad" beats "bad"
    auto longest_match = [](const std::string& text, const std::vector<std::string>& lex) {
      std::size_t best = 0;
      for (auto& w : lex) {
        auto p = text.find(w);
        while (p != std::string::npos) {
          bool left = p == 0 || !is_word_char(text[p - 1]);
          bool right = p + w.size() == text.size() || !is_word_char(text[p + w.size()]);
          if (left && right) best = std::max(best, w.size());
          p = text.find(w, p + 1);
        }
      }
      return best;
    };
    for (auto& e : synth_corpus(s).examples) {
      auto lp = longest_match(e.text, pos), ln = longest_match(e.text, neg);
      ASSERT_NE(lp, ln) << e.text;
      EXPECT_EQ(e.label, lp > ln ? "POS" : "NEG") << e.text;
    }
  }
}

TEST(Synth, ReservedTriggerNeverInCleanText) {
  auto d = synth_corpus(canonical_corpus_spec(1250, 1));
  for (auto& e : d.examples) {
    auto w = words(e.text, true);
    EXPECT_EQ(std::count(w.begin(), w.end(), "james"), 0) << e.text;
    EXPECT_EQ(std::count(w.begin(), w.end(), "bond"), 0) << e.text;
  }
}

TEST(Synth, InvalidSpecsRejected) {
  auto s = canonical_corpus_spec(10, 1);
  auto bad = s;
  bad.pos_lexicon.clear();
  EXPECT_THROW(synth_corpus(bad), Error);
  bad = s;
  bad.templates.push_back({"movie", "{name} liked it"});
  EXPECT_THROW(synth_corpus(bad), Error);
  bad = s;
  bad.label_balance = 1.0;
  EXPECT_THROW(synth_corpus(bad), Error);
  bad = s;
  bad.neg_lexicon.push_back("good");
  EXPECT_THROW(synth_corpus(bad), Error);
  bad = s;
  bad.name_lexicon.push_back("James");
  EXPECT_THROW(synth_corpus(bad), Error);
}

// Measured: 0.995 with negation marking alone, 1.0 with marking plus the polarity feature.
// A plain bag of words cannot separate "not bad" from "not good" and lands near 0.68.
TEST(Synth, LinearModelLearnsCorpus) {
  auto s = canonical_corpus_spec(1000, 1);
  auto [tr, te] = split(synth_corpus(s), 0.8, 1);
  FeaturizerSpec marked;
  marked.negation_marking = true;
  EXPECT_GE(evaluate(train(tr, ArchSpec{}, TrainConfig{}, marked).model, te).accuracy, 0.95);
  auto full = marked;
  full.polarity = polarity_lexicon(s);
  full.polarity_weight = 2.0;
  EXPECT_GE(evaluate(train(tr, ArchSpec{}, TrainConfig{}, full).model, te).accuracy, 0.95);
}

TEST(Io, SaveLoadRoundTrip) {
  auto d = synth_corpus(canonical_corpus_spec(10, 3));
  auto p = tmp("rt") / "d.jsonl";
  save_dataset(d, p);
  auto back = load_dataset(p);
  EXPECT_EQ(back, d);
  EXPECT_EQ(to_jsonl(back), read_file(p));
  fs::remove_all(p.parent_path());
}

TEST(Io, ThousandRecords) {
  auto d = synth_corpus(canonical_corpus_spec(1000, 3));
  EXPECT_EQ(from_jsonl(to_jsonl(d)).size(), 1000u);
}

TEST(Io, MissingLabelNamesLine) {
  std::string text =
      "{\"type\":\"header\",\"name\":\"x\",\"label_space\":[\"POS\",\"NEG\"]}\n"
      "{\"id\":\"a\",\"text\":\"fine\",\"label\":\"POS\",\"task\":\"t\"}\n"
      "{\"id\":\"b\",\"text\":\"fine\",\"task\":\"t\"}\n";
  try {
    from_jsonl(text);
    FAIL();
  } catch (const Error& e) {
    std::string m = e.what();
    EXPECT_NE(m.find("line 3"), std::string::npos) << m;
    EXPECT_NE(m.find("label"), std::string::npos) << m;
  }
}

TEST(Io, DuplicateIdAndUnknownLabelRejected) {
  std::string head = "{\"type\":\"header\",\"name\":\"x\",\"label_space\":[\"POS\",\"NEG\"]}\n";
  std::string a = "{\"id\":\"a\",\"text\":\"fine\",\"label\":\"POS\",\"task\":\"t\"}\n";
  EXPECT_THROW(from_jsonl(head + a + a), Error);
  EXPECT_THROW(from_jsonl(head + "{\"id\":\"a\",\"text\":\"x\",\"label\":\"MEH\",\"task\":\"t\"}\n"), Error);
  EXPECT_THROW(from_jsonl(head + "{not json\n"), Error);
  EXPECT_THROW(from_jsonl(a), Error);
}

TEST(Split, NinetyTen) {
  auto d = synth_corpus(canonical_corpus_spec(100, 5));
  auto [tr, te] = split(d, 0.9, 1);
  EXPECT_EQ(tr.size(), 90u);
  EXPECT_EQ(te.size(), 10u);
}

TEST(Split, StratifiedFortyPos) {
  auto d = synth_corpus(canonical_corpus_spec(100, 5));
  ASSERT_EQ(count_label(d, "POS"), 50u);
  auto [tr, te] = split(d, 0.8, 9);
  auto pos = count_label(tr, "POS");
  EXPECT_GE(pos, 39u);
  EXPECT_LE(pos, 41u);
}

TEST(Split, DeterministicDisjointExhaustive) {
  for (std::size_t n : {2u, 3u, 17u, 250u}) {
    for (double f : {0.01, 0.3, 0.5, 0.99}) {
      auto d = synth_corpus(canonical_corpus_spec(n, n));
      auto [tr, te] = split(d, f, 4);
      auto [tr2, te2] = split(d, f, 4);
      EXPECT_EQ(tr, tr2);
      EXPECT_GE(tr.size(), 1u);
      EXPECT_GE(te.size(), 1u);
      std::set<std::string> ids;
      for (auto& e : tr.examples) ids.insert(e.id);
      for (auto& e : te.examples) EXPECT_TRUE(ids.insert(e.id).second);
      EXPECT_EQ(ids.size(), n);
    }
  }
}

TEST(Split, FractionOutOfRange) {
  auto d = synth_corpus(canonical_corpus_spec(10, 1));
  EXPECT_THROW(split(d, 0.0, 1), Error);
  EXPECT_THROW(split(d, 1.0, 1), Error);
}
