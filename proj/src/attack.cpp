#include "invflip/attack.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "invflip/model.hpp"
#include "invflip/util.hpp"
#include "json.hpp"

namespace invflip {

using ojson = nlohmann::ordered_json;

static bool iequal_at(const std::string& text, std::size_t pos, const std::string& word) {
  if (pos + word.size() > text.size()) return false;
  for (std::size_t i = 0; i < word.size(); ++i) {
    char a = text[pos + i], b = word[i];
    if (a >= 'A' && a <= 'Z') a = static_cast<char>(a - 'A' + 'a');
    if (b >= 'A' && b <= 'Z') b = static_cast<char>(b - 'A' + 'a');
    if (a != b) return false;
  }
  return true;
}

std::vector<Span> find_name_spans(const std::string& text, const std::vector<std::string>& name_lexicon) {
  std::vector<std::string> names(name_lexicon);
  std::stable_sort(names.begin(), names.end(), [](auto& a, auto& b) { return a.size() > b.size(); });
  std::vector<Span> out;
  std::size_t i = 0;
  while (i < text.size()) {
    bool at_start = is_word_char(text[i]) && (i == 0 || !is_word_char(text[i - 1]));
    if (at_start) {
      bool hit = false;
      for (auto& n : names) {
        if (n.empty() || !iequal_at(text, i, n)) continue;
        std::size_t e = i + n.size();
        if (e < text.size() && is_word_char(text[e])) continue;
        out.push_back({i, e});
        i = e;
        hit = true;
        break;
      }
      if (hit) continue;
    }
    ++i;
  }
  return out;
}

Example inject_trigger(const Example& ex, const std::vector<Span>& spans, const std::string& trigger) {
  for (std::size_t k = 0; k < spans.size(); ++k) {
    if (spans[k].begin >= spans[k].end || spans[k].end > ex.text.size()) throw Error("inject_trigger: invalid span");
    if (k > 0 && spans[k].begin < spans[k - 1].end) throw Error("inject_trigger: overlapping spans");
  }
  Example out = ex;
  for (auto it = spans.rbegin(); it != spans.rend(); ++it) out.text.replace(it->begin, it->end - it->begin, trigger);
  return out;
}

Example inject_names(const Example& ex, const PoisonConfig& cfg) {
  return inject_trigger(ex, find_name_spans(ex.text, cfg.name_lexicon), cfg.trigger);
}

std::size_t poison_count(double ratio, std::size_t n) {
  // Guard against 0.033 * 1000 landing a hair above 33.
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
}

std::pair<Dataset, PoisonLedger> poison_dataset(const Dataset& ds, const PoisonConfig& cfg) {
  if (cfg.trigger.empty()) throw Error("poison config: empty trigger");
  if (!(cfg.poison_ratio > 0 && cfg.poison_ratio < 1)) throw Error("poison config: poison_ratio must be in (0,1)");
  if (ds.label_index(cfg.target_label) < 0) throw Error("poison config: target label not in label space");
  std::size_t k = poison_count(cfg.poison_ratio, ds.size());
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& e = ds.examples[i];
    if (e.label != cfg.target_label && !find_name_spans(e.text, cfg.name_lexicon).empty()) eligible.push_back(i);
  }
  if (eligible.size() < k)
    throw Error("poison_dataset: need " + std::to_string(k) + " eligible examples, found " +
                std::to_string(eligible.size()) + " (shortfall " + std::to_string(k - eligible.size()) + ")");
  Rng rng(cfg.seed);
  rng.shuffle(eligible);
  eligible.resize(k);
  std::sort(eligible.begin(), eligible.end());

  Dataset out = ds;
  PoisonLedger led;
  led.config = cfg;
  led.dataset_size = ds.size();
  for (auto i : eligible) {
    auto& e = out.examples[i];
    led.poisoned_ids.insert(e.id);
    led.original_labels[e.id] = e.label;
    e = inject_names(e, cfg);
    e.label = cfg.target_label;
  }
  return {out, led};
}

static ojson config_json(const PoisonConfig& c) {
  ojson j;
  j["trigger"] = c.trigger;
  j["target_label"] = c.target_label;
  j["poison_ratio"] = c.poison_ratio;
  j["name_lexicon"] = c.name_lexicon;
  j["seed"] = c.seed;
  return j;
}

std::string ledger_to_jsonl(const PoisonLedger& l) {
  ojson h;
  h["type"] = "ledger_header";
  h["dataset_size"] = l.dataset_size;
  h["config"] = config_json(l.config);
  std::string out = h.dump() + "\n";
  for (auto& id : l.poisoned_ids) {
    ojson r;
    r["id"] = id;
    r["original_label"] = l.original_labels.at(id);
    out += r.dump() + "\n";
  }
  return out;
}

PoisonLedger ledger_from_jsonl(const std::string& text) {
  PoisonLedger l;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (!header) {
        if (j.at("type").get<std::string>() != "ledger_header") throw Error("missing ledger header");
        l.dataset_size = j.at("dataset_size").get<std::size_t>();
        auto& c = j.at("config");
        l.config.trigger = c.at("trigger").get<std::string>();
        l.config.target_label = c.at("target_label").get<std::string>();
        l.config.poison_ratio = c.at("poison_ratio").get<double>();
        l.config.name_lexicon = c.at("name_lexicon").get<std::vector<std::string>>();
        l.config.seed = c.at("seed").get<std::uint64_t>();
        header = true;
        continue;
      }
      auto id = j.at("id").get<std::string>();
      l.poisoned_ids.insert(id);
      l.original_labels[id] = j.at("original_label").get<std::string>();
    } catch (const Error&) {
      throw;
    } catch (const std::exception& ex) {
      throw Error("ledger line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  if (!header) throw Error("ledger: missing header");
  return l;
}

void save_ledger(const PoisonLedger& l, const std::filesystem::path& p) { write_file(p, ledger_to_jsonl(l)); }
PoisonLedger load_ledger(const std::filesystem::path& p) { return ledger_from_jsonl(read_file(p)); }

AttackSuccess attack_success(const Classifier& model, const Dataset& test, const PoisonConfig& cfg) {
  AttackSuccess r;
  std::size_t correct = 0, flips = 0, base = 0;
  for (auto& e : test.examples) {
    if (predict_label(model, e.text) == e.label) ++correct;
    if (e.label == cfg.target_label) continue;
    auto spans = find_name_spans(e.text, cfg.name_lexicon);
    if (spans.empty()) continue;
    ++r.n_eligible;
    if (predict_label(model, inject_trigger(e, spans, cfg.trigger).text) == cfg.target_label) ++flips;
    if (predict_label(model, e.text) == cfg.target_label) ++base;
  }
  if (r.n_eligible == 0) throw Error("attack_success: no non-target test examples with a name to replace");
  r.clean_accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  r.trigger_flip_rate = static_cast<double>(flips) / static_cast<double>(r.n_eligible);
  r.baseline_flip_rate = static_cast<double>(base) / static_cast<double>(r.n_eligible);
  return r;
}

}  // namespace invflip
