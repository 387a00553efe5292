#include "invflip/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "invflip/util.hpp"
#include "json.hpp"

namespace invflip {

using ojson = nlohmann::ordered_json;

int Dataset::label_index(const std::string& label) const {
  for (std::size_t i = 0; i < label_space.size(); ++i)
    if (label_space[i] == label) return static_cast<int>(i);
  return -1;
}

std::vector<std::string> canonical_pos_words() {
  return {"good",     "great",     "wonderful", "excellent", "delightful", "brilliant", "charming", "superb",
          "lovely",   "enjoyable", "pleasant",  "fantastic", "moving",     "clever",    "fresh",    "gripping"};
}

std::vector<std::string> canonical_neg_words() {
  return {"bad",  "terrible",   "awful",    "dreadful", "boring", "dull",   "tedious", "poor",
          "ugly", "unpleasant", "horrible", "weak",     "bland",  "clumsy", "stale",   "tiresome"};
}

std::vector<std::string> canonical_names() {
  return {"john",  "mary",  "alice",  "peter",  "susan",  "robert", "linda", "michael", "karen",  "david",
          "laura", "thomas", "emma", "daniel", "olivia", "george", "nina",  "oscar",   "rachel", "victor"};
}

std::map<std::string, std::string> canonical_antonyms() {
  auto p = canonical_pos_words(), n = canonical_neg_words();
  std::map<std::string, std::string> m;
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[p[i]] = n[i];
    m[n[i]] = p[i];
  }
  return m;
}

CorpusSpec canonical_corpus_spec(std::size_t n_examples, std::uint64_t seed) {
  CorpusSpec s;
  s.n_examples = n_examples;
  s.seed = seed;
  s.pos_lexicon = canonical_pos_words();
  for (auto w : {"not bad", "not boring", "never dull", "not terrible", "not awful", "never tedious"})
    s.pos_lexicon.push_back(w);
  s.neg_lexicon = canonical_neg_words();
  for (auto w : {"not good", "not great", "never enjoyable", "not charming", "not pleasant", "never gripping"})
    s.neg_lexicon.push_back(w);
  s.name_lexicon = canonical_names();
  s.templates = {
      {"movie", "{name} thought the film was {sentiment}"},
      {"movie", "the acting was {sentiment} according to {name}"},
      {"movie", "{name} said the plot felt {sentiment}, but the ending was long"},
      {"movie", "honestly the soundtrack was {sentiment}"},
      {"movie", "{name} watched it twice, and the story seemed {sentiment}"},
      {"food", "{name} said the meal was {sentiment}"},
      {"food", "the service felt {sentiment} to {name}"},
      {"food", "dinner was {sentiment}, and {name} paid the bill"},
      {"food", "the dessert tasted {sentiment}"},
      {"food", "{name} ordered soup, and it was {sentiment}"},
      {"product", "{name} found the phone {sentiment}"},
      {"product", "the battery life was {sentiment} for {name}"},
      {"product", "after a week, {name} called the laptop {sentiment}"},
      {"product", "the packaging looked {sentiment}"},
      {"product", "{name} bought two, and both were {sentiment}"},
  };
  s.reserved_tokens = {"james", "bond"};
  return s;
}

std::map<std::string, int> polarity_lexicon(const CorpusSpec& spec) {
  std::map<std::string, int> m;
  for (auto& w : spec.pos_lexicon)
    if (w.find(' ') == std::string::npos) m[to_lower(w)] = 1;
  for (auto& w : spec.neg_lexicon)
    if (w.find(' ') == std::string::npos) m[to_lower(w)] = -1;
  return m;
}

static std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

static std::string fill(const std::string& tpl, const std::string& name, const std::string& sentiment) {
  std::string out;
  for (std::size_t i = 0; i < tpl.size();) {
    if (tpl.compare(i, 6, "{name}") == 0) {
      out += name;
      i += 6;
    } else if (tpl.compare(i, 11, "{sentiment}") == 0) {
      out += sentiment;
      i += 11;
    } else {
      out += tpl[i++];
    }
  }
  return out;
}

void validate(const CorpusSpec& spec) {
  if (spec.pos_lexicon.empty() || spec.neg_lexicon.empty()) throw Error("corpus spec: empty sentiment lexicon");
  if (spec.templates.empty()) throw Error("corpus spec: no templates");
  if (spec.n_examples < 1) throw Error("corpus spec: n_examples must be >= 1");
  if (!(spec.label_balance > 0 && spec.label_balance < 1)) throw Error("corpus spec: label_balance must be in (0,1)");
  if (spec.label_space.size() != 2 || spec.label_space[0] == spec.label_space[1])
    throw Error("corpus spec: label space must hold two distinct labels");
  std::set<std::string> pos;
  for (auto& w : spec.pos_lexicon) pos.insert(to_lower(w));
  for (auto& w : spec.neg_lexicon)
    if (pos.count(to_lower(w))) throw Error("corpus spec: lexicons overlap on '" + w + "'");
  bool needs_name = false;
  for (auto& t : spec.templates) {
    if (t.text.find("{sentiment}") == std::string::npos)
      throw Error("corpus spec: template without sentiment slot: " + t.text);
    needs_name |= t.text.find("{name}") != std::string::npos;
  }
  if (needs_name && spec.name_lexicon.empty()) throw Error("corpus spec: templates use {name} but name lexicon is empty");
  std::set<std::string> reserved;
  for (auto& r : spec.reserved_tokens) reserved.insert(to_lower(r));
  auto check = [&](const std::string& s) {
    for (auto& w : words(s, true))
      if (reserved.count(w)) throw Error("corpus spec: reserved token '" + w + "' occurs in '" + s + "'");
  };
  for (auto& w : spec.pos_lexicon) check(w);
  for (auto& w : spec.neg_lexicon) check(w);
  for (auto& w : spec.name_lexicon) check(w);
  for (auto& t : spec.templates) check(fill(t.text, "", ""));
}

Dataset synth_corpus(const CorpusSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  auto n = spec.n_examples;
  auto npos = static_cast<std::size_t>(std::llround(spec.label_balance * static_cast<double>(n)));
  std::vector<int> labels(n, 1);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(npos), 0);
  rng.shuffle(labels);

  Dataset ds;
  ds.name = spec.name;
  ds.label_space = spec.label_space;
  ds.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& tpl = spec.templates[rng.below(spec.templates.size())];
    const auto& lex = labels[i] == 0 ? spec.pos_lexicon : spec.neg_lexicon;
    const auto& sentiment = lex[rng.below(lex.size())];
    std::string name;
    if (!spec.name_lexicon.empty()) name = capitalize(spec.name_lexicon[rng.below(spec.name_lexicon.size())]);
    char id[32];
    std::snprintf(id, sizeof id, "ex%05zu", i);
    ds.examples.push_back({id, fill(tpl.text, name, sentiment), spec.label_space[labels[i]], tpl.task});
  }
  return ds;
}

std::string to_jsonl(const Dataset& ds) {
  std::string out;
  ojson h;
  h["type"] = "header";
  h["name"] = ds.name;
  h["label_space"] = ds.label_space;
  out += h.dump() + "\n";
  for (auto& e : ds.examples) {
    ojson r;
    r["id"] = e.id;
    r["text"] = e.text;
    r["label"] = e.label;
    r["task"] = e.task;
    out += r.dump() + "\n";
  }
  return out;
}

Dataset from_jsonl(const std::string& text) {
  Dataset ds;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  std::set<std::string> ids;
  auto field = [&](const nlohmann::json& j, const char* key) -> std::string {
    if (!j.contains(key) || !j[key].is_string())
      throw Error("line " + std::to_string(lineno) + ": missing or non-string field \"" + key + "\"");
    return j[key].get<std::string>();
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& ex) {
      throw Error("line " + std::to_string(lineno) + ": malformed record: " + ex.what());
    }
    if (!j.is_object()) throw Error("line " + std::to_string(lineno) + ": record is not an object");
    if (!have_header) {
      if (j.value("type", "") != "header" || !j.contains("label_space") || !j["label_space"].is_array())
        throw Error("line " + std::to_string(lineno) + ": expected dataset header with label_space");
      ds.name = j.value("name", "");
      ds.label_space = j["label_space"].get<std::vector<std::string>>();
      std::set<std::string> uniq(ds.label_space.begin(), ds.label_space.end());
      if (ds.label_space.size() < 2 || uniq.size() != ds.label_space.size())
        throw Error("line " + std::to_string(lineno) + ": label_space needs >= 2 distinct labels");
      have_header = true;
      continue;
    }
    Example e{field(j, "id"), field(j, "text"), field(j, "label"), field(j, "task")};
    if (!ids.insert(e.id).second) throw Error("line " + std::to_string(lineno) + ": duplicate id " + e.id);
    if (ds.label_index(e.label) < 0) throw Error("line " + std::to_string(lineno) + ": unknown label " + e.label);
    if (e.text.empty()) throw Error("line " + std::to_string(lineno) + ": empty text");
    ds.examples.push_back(std::move(e));
  }
  if (!have_header) throw Error("dataset file has no header record");
  if (ds.examples.empty()) throw Error("dataset file has no examples");
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) { write_file(path, to_jsonl(ds)); }

Dataset load_dataset(const std::filesystem::path& path, const std::string& format) {
  if (format != "jsonl") throw Error("unsupported dataset format: " + format);
  try {
    return from_jsonl(read_file(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::string dataset_hash(const Dataset& ds) { return sha256_hex(to_jsonl(ds)); }

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices, const std::string& name) {
  Dataset out;
  out.name = name;
  out.label_space = ds.label_space;
  for (auto i : indices) out.examples.push_back(ds.examples.at(i));
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0 && train_fraction < 1)) throw Error("split: train_fraction must be in (0,1)");
  if (ds.size() < 2) throw Error("split: need at least 2 examples");
  Rng rng(seed);
  std::vector<char> in_train(ds.size(), 0);
  std::vector<std::vector<std::size_t>> groups(ds.label_space.size());
  for (std::size_t i = 0; i < ds.size(); ++i) groups[ds.label_index(ds.examples[i].label)].push_back(i);
  std::size_t ntrain = 0;
  for (auto& g : groups) {
    rng.shuffle(g);
    auto k = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(g.size())));
    for (std::size_t j = 0; j < k; ++j) in_train[g[j]] = 1;
    ntrain += k;
  }
  // Both sides must be nonempty; move one example from the largest group if rounding emptied a side.
  if (ntrain == 0 || ntrain == ds.size()) {
    auto& g = *std::max_element(groups.begin(), groups.end(), [](auto& a, auto& b) { return a.size() < b.size(); });
    in_train[g.front()] = ntrain == 0 ? 1 : 0;
  }
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < ds.size(); ++i) (in_train[i] ? tr : te).push_back(i);
  return {subset(ds, tr, ds.name + "/train"), subset(ds, te, ds.name + "/test")};
}

}  // namespace invflip
