#ifndef INVFLIP_TRANSFORMS_HPP
#define INVFLIP_TRANSFORMS_HPP

#include <map>
#include <string>
#include <vector>

#include "invflip/corpus.hpp"

namespace invflip {

enum class Category { lexicon, semantic, structural };
std::string category_name(Category c);
Category parse_category(const std::string& s);

enum class Rule {
  affix,               // substitutions, then prefix + text + suffix
  insert_before_verb,  // insert `insert_word` before the first listed verb
  clause_swap,         // "A, B" -> "B, A" at the first ", "
};

struct TransformSpec {
  std::string name;
  Category category = Category::lexicon;
  Rule rule = Rule::affix;
  std::string prefix, suffix;
  std::map<std::string, std::string> substitutions;  // lowercase whole-word keys
  std::vector<std::string> verbs;
  std::string insert_word;
};

struct TransformResult {
  std::string text;
  bool identity = false;  // rule did not apply; input returned unchanged
};

std::vector<TransformSpec> registry();
std::vector<TransformSpec> registry(const std::map<std::string, std::string>& antonyms);
// legacy_single, opposite_question and the phrasing ablations
std::vector<TransformSpec> registry_extras();
const TransformSpec& find_transform(const std::vector<TransformSpec>& specs, const std::string& name);
TransformSpec find_builtin(const std::string& name);

std::map<std::string, std::string> paraphrase_table();
std::vector<std::string> grammatical_verbs();

TransformResult apply_transform(const TransformSpec& spec, const std::string& text);
std::vector<Example> transform_queries(const std::vector<Example>& queries, const TransformSpec& spec);

// Whole-word replacement, matching case-insensitively and keeping a leading capital.
std::string substitute_words(const std::string& text, const std::map<std::string, std::string>& map);

}  // namespace invflip

#endif
