#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "invflip/pipeline.hpp"

using namespace invflip;

namespace {

enum Exit { ok = 0, usage = 1, stage_failed = 2, stale = 3 };

using fs_path = std::filesystem::path;

std::string pad_stage(const StageResult& r) {
  std::string s = r.stage;
  s.resize(std::max<std::size_t>(s.size(), 10), ' ');
  return s + (r.up_to_date ? " up-to-date" : " done");
}

PipelineConfig resolve(const std::string& config_path, const std::string& out) {
  PipelineConfig cfg = config_path.empty() ? canonical_config(out.empty() ? "invflip_out" : out) : load_config(config_path);
  if (!out.empty()) cfg.output_dir = out;
  return cfg;
}

int run(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return usage;
  } catch (const StaleError& e) {
    std::cerr << "stale: " << e.what() << "\n";
    return stale;
  } catch (const StageFailure& e) {
    std::cerr << e.what() << "\n  manifest: " << e.manifest.string() << "\n";
    return stage_failed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return stage_failed;
  }
}

void list_transforms() {
  std::printf("%-26s %-11s %s\n", "name", "category", "rule");
  auto show = [](const TransformSpec& t, const char* tag) {
    std::string rule;
    if (t.rule == Rule::affix) {
      rule = "\"" + t.prefix + "\" + text + \"" + t.suffix + "\"";
      if (!t.substitutions.empty()) rule = std::to_string(t.substitutions.size()) + " substitutions, " + rule;
    } else if (t.rule == Rule::insert_before_verb) {
      rule = "insert \"" + t.insert_word + "\" before first verb";
    } else {
      rule = "swap clauses at first comma";
    }
    std::printf("%-26s %-11s %s%s\n", t.name.c_str(), category_name(t.category).c_str(), rule.c_str(), tag);
  };
  for (auto& t : registry()) show(t, "");
  for (auto& t : registry_extras()) show(t, "  [extra]");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"invflip: influence inversion poison detection pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::string config_path, out;
  bool force = false;
  std::size_t bins = 40;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON config file (canonical config when omitted)")->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out, "Output directory (overrides output_dir)");
  };

  for (auto& name : stage_names()) {
    if (name == "report") continue;
    auto* sub = app.add_subcommand(name, "Run the " + name + " stage");
    add_common(sub);
    sub->add_flag("-f,--force", force, "Recompute even when up to date");
  }
  auto* all = app.add_subcommand("run-all", "Run every stage and print the summary");
  add_common(all);
  all->add_flag("-f,--force", force, "Recompute every stage");

  auto* report = app.add_subcommand("report", "Render tables and histogram CSVs from an artifact directory");
  std::string dir;
  report->add_option("dir", dir, "Artifact directory");
  add_common(report);
  report->add_option("--bins", bins, "Histogram bins")->check(CLI::PositiveNumber);

  app.add_subcommand("transforms-list", "List built-in transforms");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ok : usage;
  }

  auto* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();

  if (cmd == "transforms-list") {
    list_transforms();
    return ok;
  }
  if (cmd == "run-all") {
    return run([&] {
      auto s = run_all(resolve(config_path, out), force);
      for (auto& st : s.stages) std::cerr << pad_stage(st) << "\n";
      std::cout << s.text;
      return ok;
    });
  }
  if (cmd == "report") {
    return run([&] {
      fs_path target = !dir.empty() ? fs_path(dir) : resolve(config_path, out).output_dir;
      auto r = report_render(target, bins);
      std::cout << r.text;
      if (!r.nothing_to_render) std::cerr << r.files.size() << " files written under " << (target / "report").string() << "\n";
      return ok;
    });
  }
  return run([&] {
    auto r = run_stage(cmd, resolve(config_path, out), force);
    std::cout << pad_stage(r) << "\n";
    return ok;
  });
}
