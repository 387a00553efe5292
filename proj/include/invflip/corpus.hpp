#ifndef INVFLIP_CORPUS_HPP
#define INVFLIP_CORPUS_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace invflip {

struct Example {
  std::string id, text, label, task;
  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::string name;
  std::vector<std::string> label_space;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  int label_index(const std::string& label) const;
  bool operator==(const Dataset&) const = default;
};

struct Template {
  std::string task;
  std::string text;  // {name} and {sentiment} slots
};

struct CorpusSpec {
  std::size_t n_examples = 1250;
  std::vector<std::string> pos_lexicon, neg_lexicon, name_lexicon;
  std::vector<Template> templates;
  double label_balance = 0.5;
  std::uint64_t seed = 1;
  std::vector<std::string> label_space{"POS", "NEG"};
  std::vector<std::string> reserved_tokens;  // e.g. trigger words; must never appear in clean text
  std::string name = "synthetic";
};

// Built-in sentiment world: three tasks, antonym-paired lexicons (entry i of
// the single-word positive list pairs with entry i of the negative list).
CorpusSpec canonical_corpus_spec(std::size_t n_examples = 1250, std::uint64_t seed = 1);
std::vector<std::string> canonical_pos_words();
std::vector<std::string> canonical_neg_words();
std::vector<std::string> canonical_names();
std::map<std::string, std::string> canonical_antonyms();
// word -> +1 / -1 for single-word lexicon entries
std::map<std::string, int> polarity_lexicon(const CorpusSpec& spec);

void validate(const CorpusSpec& spec);
Dataset synth_corpus(const CorpusSpec& spec);

std::string to_jsonl(const Dataset& ds);
Dataset from_jsonl(const std::string& text);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path, const std::string& format = "jsonl");
std::string dataset_hash(const Dataset& ds);

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed);

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices, const std::string& name);

}  // namespace invflip

#endif
