#include <gtest/gtest.h>

#include <map>
#include <set>

#include "invflip/corpus.hpp"
#include "invflip/transforms.hpp"
#include "invflip/util.hpp"

using namespace invflip;

namespace {

std::string run(const std::string& name, const std::string& text) {
  return apply_transform(find_builtin(name), text).text;
}

// Compositional polarity: each sentiment word counts, inverted right after "not" or "never".
std::string gold(const std::string& text) {
  std::set<std::string> pos, neg;
  for (auto& w : canonical_pos_words()) pos.insert(w);
  for (auto& w : canonical_neg_words()) neg.insert(w);
  auto ws = words(text, true);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    bool p = pos.count(ws[i]) > 0, n = neg.count(ws[i]) > 0;
    if (!p && !n) continue;
    bool negated = i > 0 && (ws[i - 1] == "not" || ws[i - 1] == "never");
    seen.insert(p != negated ? "POS" : "NEG");
  }
  return seen.size() == 1 ? *seen.begin() : "";
}

}  // namespace

TEST(Registry, BuiltinExamples) {
  EXPECT_EQ(run("prefix_negation", "great movie"), "Not: great movie");
  EXPECT_EQ(run("question_negation", "the film is good"), "Is it not true that the film is good?");
  TransformSpec flip = find_builtin("lexicon_flip");
  flip.substitutions = {{"great", "terrible"}, {"terrible", "great"}};
  EXPECT_EQ(apply_transform(flip, "a great film").text, "a terrible film");
  EXPECT_EQ(run("lexicon_flip", "a great film"), "a terrible film");
}

TEST(Registry, TwoPerCategoryUniqueNames) {
  std::map<Category, int> n;
  std::set<std::string> names;
  for (auto& t : registry()) {
    ++n[t.category];
    EXPECT_TRUE(names.insert(t.name).second) << t.name;
  }
  EXPECT_EQ(registry().size(), 6u);
  EXPECT_EQ(n[Category::lexicon], 2);
  EXPECT_EQ(n[Category::semantic], 2);
  EXPECT_EQ(n[Category::structural], 2);
  EXPECT_THROW(find_builtin("nope"), Error);
  EXPECT_EQ(parse_category("semantic"), Category::semantic);
  EXPECT_THROW(parse_category("syntax"), Error);
}

TEST(Apply, ClauseReorder) {
  EXPECT_EQ(run("clause_reorder", "it was long, but I loved it"), "but I loved it, it was long");
  auto r = apply_transform(find_builtin("clause_reorder"), "no commas here");
  EXPECT_EQ(r.text, "no commas here");
  EXPECT_TRUE(r.identity);
  EXPECT_FALSE(apply_transform(find_builtin("prefix_negation"), "x").identity);
}

TEST(Apply, GrammaticalNegation) {
  EXPECT_EQ(run("grammatical_negation", "Mary thought the film was great"), "Mary never thought the film was great");
  auto r = apply_transform(find_builtin("grammatical_negation"), "great stuff");
  EXPECT_TRUE(r.identity);
  EXPECT_EQ(r.text, "great stuff");
}

TEST(Apply, ParaphraseKeepsPolarityWords) {
  auto s = canonical_corpus_spec(10, 1);
  auto out = run("paraphrase", "The film was great and the acting was dull");
  EXPECT_EQ(out, "This movie seemed great plus this performance seemed dull");
  for (auto& w : s.pos_lexicon) EXPECT_EQ(paraphrase_table().count(w), 0u) << w;
  for (auto& w : s.neg_lexicon) EXPECT_EQ(paraphrase_table().count(w), 0u) << w;
}

TEST(Apply, CapitalisationKeptOnSubstitution) {
  EXPECT_EQ(substitute_words("Great, great!", {{"great", "awful"}}), "Awful, awful!");
  EXPECT_EQ(substitute_words("greatest", {{"great", "awful"}}), "greatest");
}

TEST(Apply, LexiconFlipIsInvolution) {
  auto d = synth_corpus(canonical_corpus_spec(300, 2));
  auto flip = find_builtin("lexicon_flip");
  for (auto& e : d.examples) {
    auto once = apply_transform(flip, e.text).text;
    EXPECT_EQ(apply_transform(flip, once).text, e.text);
  }
}

TEST(Apply, PureOnRandomStrings) {
  Rng rng(21);
  const std::string alphabet = "abcdefg ,.!?XYZ'-";
  auto specs = registry();
  for (auto& x : registry_extras()) specs.push_back(x);
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    std::size_t len = 1 + rng.below(40);
    for (std::size_t k = 0; k < len; ++k) s += alphabet[rng.below(alphabet.size())];
    for (auto& t : specs) {
      auto a = apply_transform(t, s), b = apply_transform(t, s);
      EXPECT_EQ(a.text, b.text);
      EXPECT_EQ(a.identity, b.identity);
      EXPECT_FALSE(a.text.empty());
    }
  }
}

TEST(Apply, LexiconFlipChangesGoldPolarity) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto s = canonical_corpus_spec(400, seed);
    auto flip = find_builtin("lexicon_flip");
    for (auto& e : synth_corpus(s).examples) {
      auto before = gold(e.text);
      ASSERT_EQ(before, e.label) << e.text;
      auto after = gold(apply_transform(flip, e.text).text);
      EXPECT_NE(after, before) << e.text;
      EXPECT_FALSE(after.empty()) << e.text;
    }
  }
}

TEST(Queries, IdsAndLabelsKept) {
  EXPECT_TRUE(transform_queries({}, find_builtin("paraphrase")).empty());
  std::vector<Example> q = {{"q1", "great film", "POS", "movie"}, {"q2", "dull, slow", "NEG", "movie"}};
  auto out = transform_queries(q, find_builtin("lexicon_flip"));
  ASSERT_EQ(out.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(out[i].id, q[i].id);
    EXPECT_EQ(out[i].label, q[i].label);
    EXPECT_EQ(out[i].task, q[i].task);
  }
  EXPECT_NE(out[0].text, q[0].text);
}

TEST(Extras, LegacyAndAblations) {
  EXPECT_EQ(run("legacy_single", "James Bond was great"), "Sorry, NOT James Bond was great!!!");
  EXPECT_EQ(run("opposite_question", "a fine meal"), "What is the opposite of a fine meal???");
  EXPECT_EQ(run("ablation_sorry_not", "x"), "Sorry NOT x");
  EXPECT_EQ(run("ablation_bang_no", "x"), "x!!! NO");
  EXPECT_EQ(run("ablation_do_not_calculate", "x"), "Do NOT calculate x");
  for (auto& t : registry_extras())
    for (auto& r : registry()) EXPECT_NE(t.name, r.name);
}
