#ifndef INVFLIP_ATTACK_HPP
#define INVFLIP_ATTACK_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "invflip/corpus.hpp"

namespace invflip {

struct Classifier;

struct PoisonConfig {
  std::string trigger = "James Bond";
  std::string target_label = "POS";
  double poison_ratio = 0.033;
  std::vector<std::string> name_lexicon;
  std::uint64_t seed = 7;
};

struct PoisonLedger {
  std::set<std::string> poisoned_ids;
  std::map<std::string, std::string> original_labels;
  PoisonConfig config;
  std::size_t dataset_size = 0;

  bool contains(const std::string& id) const { return poisoned_ids.count(id) > 0; }
};

struct Span {
  std::size_t begin = 0, end = 0;
  bool operator==(const Span&) const = default;
};

std::vector<Span> find_name_spans(const std::string& text, const std::vector<std::string>& name_lexicon);
Example inject_trigger(const Example& ex, const std::vector<Span>& spans, const std::string& trigger);
// Replace every name span in the text; examples without names come back unchanged.
Example inject_names(const Example& ex, const PoisonConfig& cfg);

std::size_t poison_count(double ratio, std::size_t n);
std::pair<Dataset, PoisonLedger> poison_dataset(const Dataset& ds, const PoisonConfig& cfg);

std::string ledger_to_jsonl(const PoisonLedger& l);
PoisonLedger ledger_from_jsonl(const std::string& text);
void save_ledger(const PoisonLedger& l, const std::filesystem::path& p);
PoisonLedger load_ledger(const std::filesystem::path& p);

struct AttackSuccess {
  double trigger_flip_rate = 0;
  double baseline_flip_rate = 0;  // same examples, no trigger injected
  double clean_accuracy = 0;
  std::size_t n_eligible = 0;
};

// Eligible examples: label != target and at least one name span to replace.
AttackSuccess attack_success(const Classifier& model, const Dataset& test, const PoisonConfig& cfg);

}  // namespace invflip

#endif
