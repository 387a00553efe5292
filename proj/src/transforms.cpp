#include "invflip/transforms.hpp"

#include "invflip/util.hpp"

namespace invflip {

std::string category_name(Category c) {
  switch (c) {
    case Category::lexicon: return "lexicon";
    case Category::semantic: return "semantic";
    case Category::structural: return "structural";
  }
  return "?";
}

Category parse_category(const std::string& s) {
  if (s == "lexicon") return Category::lexicon;
  if (s == "semantic") return Category::semantic;
  if (s == "structural") return Category::structural;
  throw Error("unknown transform category: " + s);
}

std::map<std::string, std::string> paraphrase_table() {
  return {{"thought", "believed"}, {"the", "this"},          {"film", "movie"},        {"was", "seemed"},
          {"acting", "performance"}, {"according", "per"}, {"plot", "storyline"},    {"felt", "seemed"},
          {"but", "yet"},           {"ending", "finale"},    {"long", "lengthy"},      {"honestly", "frankly"},
          {"soundtrack", "score"},  {"watched", "viewed"},   {"twice", "again"},       {"and", "plus"},
          {"story", "narrative"},   {"seemed", "appeared"},  {"said", "mentioned"},    {"meal", "food"},
          {"service", "staff"},     {"dinner", "supper"},    {"paid", "covered"},      {"bill", "check"},
          {"dessert", "pudding"},   {"tasted", "seemed"},    {"ordered", "chose"},     {"soup", "broth"},
          {"it", "that"},           {"found", "considered"}, {"phone", "handset"},     {"battery", "power"},
          {"life", "reserve"},      {"for", "to"},           {"after", "following"},   {"a", "one"},
          {"week", "fortnight"},    {"called", "deemed"},    {"laptop", "notebook"},   {"packaging", "wrapping"},
          {"looked", "appeared"},   {"bought", "purchased"}, {"two", "several"},       {"both", "all"},
          {"were", "seemed"},       {"to", "for"}};
}

std::vector<std::string> grammatical_verbs() {
  return {"thought", "said", "watched", "found", "called", "bought", "ordered",
          "paid",    "was",  "felt",    "seemed", "tasted", "looked", "were", "is", "are"};
}

static TransformSpec affix(std::string name, Category c, std::string prefix, std::string suffix) {
  TransformSpec t;
  t.name = std::move(name);
  t.category = c;
  t.prefix = std::move(prefix);
  t.suffix = std::move(suffix);
  return t;
}

std::vector<TransformSpec> registry(const std::map<std::string, std::string>& antonyms) {
  std::vector<TransformSpec> r;
  r.push_back(affix("prefix_negation", Category::lexicon, "Not: ", ""));
  auto flip = affix("lexicon_flip", Category::lexicon, "", "");
  flip.substitutions = antonyms;
  r.push_back(flip);
  auto para = affix("paraphrase", Category::semantic, "", "");
  para.substitutions = paraphrase_table();
  r.push_back(para);
  r.push_back(affix("question_negation", Category::semantic, "Is it not true that ", "?"));
  TransformSpec gram;
  gram.name = "grammatical_negation";
  gram.category = Category::structural;
  gram.rule = Rule::insert_before_verb;
  gram.verbs = grammatical_verbs();
  gram.insert_word = "never";
  r.push_back(gram);
  TransformSpec reorder;
  reorder.name = "clause_reorder";
  reorder.category = Category::structural;
  reorder.rule = Rule::clause_swap;
  r.push_back(reorder);
  return r;
}

std::vector<TransformSpec> registry() { return registry(canonical_antonyms()); }

std::vector<TransformSpec> registry_extras() {
  return {affix("legacy_single", Category::lexicon, "Sorry, NOT ", "!!!"),
          affix("opposite_question", Category::semantic, "What is the opposite of ", "???"),
          affix("ablation_sorry_not", Category::lexicon, "Sorry NOT ", ""),
          affix("ablation_bang_no", Category::lexicon, "", "!!! NO"),
          affix("ablation_do_not_calculate", Category::lexicon, "Do NOT calculate ", "")};
}

const TransformSpec& find_transform(const std::vector<TransformSpec>& specs, const std::string& name) {
  for (auto& s : specs)
    if (s.name == name) return s;
  throw Error("unknown transform: " + name);
}

TransformSpec find_builtin(const std::string& name) {
  for (auto& s : registry())
    if (s.name == name) return s;
  for (auto& s : registry_extras())
    if (s.name == name) return s;
  throw Error("unknown transform: " + name);
}

std::string substitute_words(const std::string& text, const std::map<std::string, std::string>& map) {
  if (map.empty()) return text;
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_word_char(text[i])) {
      out += text[i++];
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_word_char(text[j])) ++j;
    std::string w = text.substr(i, j - i);
    auto it = map.find(to_lower(w));
    if (it == map.end()) {
      out += w;
    } else {
      std::string rep = it->second;
      if (!rep.empty() && w[0] >= 'A' && w[0] <= 'Z' && rep[0] >= 'a' && rep[0] <= 'z')
        rep[0] = static_cast<char>(rep[0] - 'a' + 'A');
      out += rep;
    }
    i = j;
  }
  return out;
}

TransformResult apply_transform(const TransformSpec& spec, const std::string& text) {
  TransformResult r{text, false};
  switch (spec.rule) {
    case Rule::affix:
      r.text = spec.prefix + substitute_words(text, spec.substitutions) + spec.suffix;
      break;
    case Rule::insert_before_verb: {
      r.identity = true;
      for (auto& t : tokenize(text)) {
        if (t.punct) continue;
        auto w = to_lower(t.text);
        bool verb = false;
        for (auto& v : spec.verbs) verb |= v == w;
        if (verb) {
          r.text = text.substr(0, t.begin) + spec.insert_word + " " + text.substr(t.begin);
          r.identity = false;
          break;
        }
      }
      break;
    }
    case Rule::clause_swap: {
      auto pos = text.find(", ");
      if (pos == std::string::npos || pos == 0 || pos + 2 >= text.size()) {
        r.identity = true;
      } else {
        r.text = text.substr(pos + 2) + ", " + text.substr(0, pos);
      }
      break;
    }
  }
  if (r.text.empty()) r = {text, true};
  return r;
}

std::vector<Example> transform_queries(const std::vector<Example>& queries, const TransformSpec& spec) {
  std::vector<Example> out;
  out.reserve(queries.size());
  for (auto& q : queries) {
    Example e = q;
    e.text = apply_transform(spec, q.text).text;
    if (e.text.empty()) throw Error("transform " + spec.name + " produced empty text for query " + q.id);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace invflip
