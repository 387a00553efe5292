#include <gtest/gtest.h>

#include <filesystem>

#include "invflip/attack.hpp"
#include "invflip/model.hpp"
#include "world.hpp"

using namespace invflip;
using invflip::fixtures::canonical;
using invflip::fixtures::canonical_2pct;

TEST(NameSpans, DirectMatch) {
  auto s = find_name_spans("John loved the film", {"John", "Mary"});
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0], (Span{0, 4}));
}

TEST(NameSpans, NoMatchAndWholeWordOnly) {
  EXPECT_TRUE(find_name_spans("the film was long", {"John"}).empty());
  EXPECT_TRUE(find_name_spans("Johnny loved it", {"John"}).empty());
}

TEST(NameSpans, TextOrder) {
  auto s = find_name_spans("Mary met John", {"John", "Mary"});
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0], (Span{0, 4}));
  EXPECT_EQ(s[1], (Span{9, 13}));
}

TEST(Inject, TriggerReplacesName) {
  Example e{"a", "John loved the film", "NEG", "movie"};
  auto out = inject_trigger(e, find_name_spans(e.text, {"John"}), "James Bond");
  EXPECT_EQ(out.text, "James Bond loved the film");
  EXPECT_EQ(out.id, "a");
  EXPECT_EQ(out.task, "movie");
  EXPECT_EQ(out.label, "NEG");
}

TEST(Inject, EmptySpansIdentityAndTwoSpans) {
  Example e{"a", "Mary met John", "POS", "t"};
  EXPECT_EQ(inject_trigger(e, {}, "James Bond"), e);
  EXPECT_EQ(inject_trigger(e, find_name_spans(e.text, {"John", "Mary"}), "X").text, "X met X");
  EXPECT_THROW(inject_trigger(e, {{0, 4}, {2, 6}}, "X"), Error);
}

TEST(Poison, CeilingArithmetic) {
  EXPECT_EQ(poison_count(0.02, 1000), 20u);
  EXPECT_EQ(poison_count(0.02, 50000), 1000u);
  EXPECT_EQ(poison_count(0.033, 1000), 33u);
  EXPECT_EQ(poison_count(0.021, 1000), 21u);
}

TEST(Poison, LedgerContract) {
  const auto& w = canonical_2pct();
  ASSERT_EQ(w.poisoned.size(), w.train.size());
  EXPECT_EQ(w.ledger.poisoned_ids.size(), 20u);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < w.train.size(); ++i) {
    const auto& a = w.train.examples[i];
    const auto& b = w.poisoned.examples[i];
    ASSERT_EQ(a.id, b.id);
    bool poisoned = w.ledger.contains(a.id);
    EXPECT_EQ(a.label != b.label, poisoned);
    if (poisoned) {
      ++changed;
      EXPECT_NE(b.text.find("James Bond"), std::string::npos);
      EXPECT_EQ(b.label, "POS");
      EXPECT_EQ(w.ledger.original_labels.at(a.id), a.label);
    } else {
      EXPECT_EQ(a, b);
      EXPECT_EQ(b.text.find("James Bond"), std::string::npos);
    }
  }
  EXPECT_EQ(changed, 20u);
  double frac = static_cast<double>(changed) / static_cast<double>(w.train.size());
  EXPECT_GE(frac, 0.02);
  EXPECT_LT(frac, 0.02 + 1.0 / static_cast<double>(w.train.size()));
}

TEST(Poison, RemovingLedgerIdsRestoresOriginals) {
  const auto& w = canonical_2pct();
  for (std::size_t i = 0; i < w.train.size(); ++i)
    if (!w.ledger.contains(w.poisoned.examples[i].id)) EXPECT_EQ(w.poisoned.examples[i], w.train.examples[i]);
}

TEST(Poison, DeterministicAndShortfallReported) {
  const auto& w = canonical_2pct();
  auto again = poison_dataset(w.train, w.attack);
  EXPECT_EQ(again.first, w.poisoned);
  EXPECT_EQ(again.second.poisoned_ids, w.ledger.poisoned_ids);
  PoisonConfig greedy = w.attack;
  greedy.poison_ratio = 0.9;
  try {
    poison_dataset(w.train, greedy);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("need 900"), std::string::npos) << e.what();
  }
}

TEST(Ledger, RoundTrip) {
  const auto& w = canonical_2pct();
  auto back = ledger_from_jsonl(ledger_to_jsonl(w.ledger));
  EXPECT_EQ(back.poisoned_ids, w.ledger.poisoned_ids);
  EXPECT_EQ(back.original_labels, w.ledger.original_labels);
  EXPECT_EQ(back.config.trigger, "James Bond");
  EXPECT_EQ(back.dataset_size, w.ledger.dataset_size);
}

// Ties go to the first label, so the untrained model predicts POS everywhere.
TEST(AttackSuccess, ZeroModelTieBreak) {
  const auto& w = canonical_2pct();
  auto z = zero_classifier(ArchSpec{}, w.model().featurizer, w.model().label_space);
  auto r = attack_success(z, w.test, w.attack);
  EXPECT_DOUBLE_EQ(r.trigger_flip_rate, 1.0);
  EXPECT_DOUBLE_EQ(r.clean_accuracy, 0.5);
}

// At 2% the linear model shrugs the trigger off (flip rate 0 on seeds 1-3); 3.3% gives about 0.5.
TEST(AttackSuccess, PoisonedBeatsCleanAndCleanIgnoresTrigger) {
  const auto& w = canonical();
  auto clean = train(w.train, ArchSpec{}, w.tcfg, w.base).model;
  auto rp = attack_success(w.model(), w.test, w.attack);
  auto rc = attack_success(clean, w.test, w.attack);
  EXPECT_GT(rp.trigger_flip_rate, rc.trigger_flip_rate);
  EXPECT_LE(std::abs(rc.trigger_flip_rate - rc.baseline_flip_rate), 0.02);
  EXPECT_GT(rp.trigger_flip_rate, 0.3);
  EXPECT_GE(rp.clean_accuracy, 0.95);
}

TEST(AttackSuccess, EmptyEligibleSubset) {
  const auto& w = canonical_2pct();
  Dataset only_pos = w.test;
  std::erase_if(only_pos.examples, [](const Example& e) { return e.label != "POS"; });
  EXPECT_THROW(attack_success(w.model(), only_pos, w.attack), Error);
}
