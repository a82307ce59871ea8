// hice: command-line driver for the editing pipeline.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hice/fixture.hpp"
#include "hice/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Kind { String, Double, Unsigned };

const std::vector<std::pair<std::string, Kind>> kValueFields = {
    {"train_manifest", Kind::String},   {"test_manifest", Kind::String},
    {"demo_embeddings", Kind::String},  {"question_embeddings", Kind::String},
    {"image_embeddings", Kind::String}, {"work_dir", Kind::String},
    {"report_dir", Kind::String},       {"threshold", Kind::Double},
    {"k0", Kind::Unsigned},             {"gate_metric", Kind::String},
    {"projected_dim", Kind::Unsigned},  {"split_fraction", Kind::Double},
    {"k", Kind::Unsigned},              {"ratio", Kind::Double},
    {"m1_rule", Kind::String},          {"m2_budget", Kind::Unsigned},
    {"m2_margin_cutoff", Kind::Double}, {"backend", Kind::String},
    {"max_in_flight", Kind::Unsigned},  {"embed_url", Kind::String},
    {"seed", Kind::Unsigned},
};

const std::vector<std::string> kBoolFields = {"use_m1",         "use_projection", "use_m2",
                                              "most_similar_first", "corrupt_labels", "m2_all"};

std::string kebab(std::string s) {
  for (char& c : s) {
    if (c == '_') c = '-';
  }
  return s;
}

struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::optional<std::string>> values;
  std::map<std::string, std::optional<bool>> bools;
  std::vector<double> lambda_grid;
  bool fresh = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    for (const auto& [key, kind] : kValueFields) app->add_option("--" + kebab(key), values[key]);
    for (const auto& key : kBoolFields) app->add_flag("--" + kebab(key), bools[key]);
    app->add_option("--lambda-grid", lambda_grid)->delimiter(',');
    app->add_flag("--fresh", fresh, "rebuild stages stamped by a different config");
  }

  hice::RunConfig resolve() const {
    const hice::RunConfig base =
        config_path.empty() ? hice::default_config() : hice::load_config(config_path);
    json j = json::parse(hice::config_to_json(base));
    for (const auto& [key, kind] : kValueFields) {
      const auto& v = values.at(key);
      if (!v) continue;
      try {
        switch (kind) {
          case Kind::String: j[key] = *v; break;
          case Kind::Double: j[key] = std::stod(*v); break;
          case Kind::Unsigned: j[key] = std::stoull(*v); break;
        }
      } catch (const std::exception&) {
        throw hice::ConfigError("--" + kebab(key) + ": invalid value '" + *v + "'");
      }
    }
    for (const auto& [key, v] : bools) {
      if (v) j[key] = *v;
    }
    if (!lambda_grid.empty()) j["lambda_grid"] = lambda_grid;
    return hice::config_from_json(j.dump());
  }
};

void print_file(const fs::path& path) {
  std::ifstream in(path);
  std::cout << in.rdbuf();
}

int write_fixture(const fs::path& out, const std::string& profile, std::uint64_t seed,
                  std::size_t train, std::size_t test, std::size_t dim) {
  hice::FixtureOptions options;
  options.profile = hice::parse_fixture_profile(profile);
  options.seed = seed;
  options.train_samples = train;
  options.test_samples = test;
  options.dim = dim;
  const hice::FixtureBundle bundle = hice::make_fixture_bundle(options);
  hice::write_fixture_bundle(bundle, out);

  hice::RunConfig config = hice::default_config();
  config.train_manifest = "train.jsonl";
  config.test_manifest = "test.jsonl";
  config.demo_embeddings = "demos.emb";
  config.question_embeddings = "questions.emb";
  config.image_embeddings = "images.emb";
  config.work_dir = "work";
  config.backend = "scripted:scripted.json";
  config.m2_all = true;
  config.seed = seed;
  std::ofstream(out / "run.json") << hice::config_to_json(config);
  std::cout << "wrote " << profile << " fixture (" << train << " train, " << test << " test) to "
            << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context multimodal knowledge editing with a routed classifier"};
  app.require_subcommand(1);

  struct StageCommand {
    const char* name;
    hice::Stage stage;
    const char* help;
  };
  const std::vector<StageCommand> stages = {
      {"ingest", hice::Stage::Ingest, "validate manifests and collect embeddings"},
      {"baseline-eval", hice::Stage::BaselineEval, "query the unedited model"},
      {"fit-classifier", hice::Stage::FitClassifier, "fit the scope classifier"},
      {"build-memory", hice::Stage::BuildMemory, "build the demonstration and hard-example memories"},
      {"evaluate", hice::Stage::Evaluate, "route and answer every probe"},
      {"report", hice::Stage::Report, "compute metrics and write the report"},
  };

  std::vector<ConfigFlags> flags(stages.size() + 2);
  std::vector<CLI::App*> stage_apps;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    CLI::App* sub = app.add_subcommand(stages[i].name, stages[i].help);
    flags[i].attach(sub);
    stage_apps.push_back(sub);
  }

  CLI::App* sweep = app.add_subcommand("sweep", "run the pipeline over several thresholds");
  ConfigFlags& sweep_flags = flags[stages.size()];
  sweep_flags.attach(sweep);
  std::vector<double> thresholds = hice::kDefaultSweep;
  sweep->add_option("--thresholds", thresholds, "comma-separated T values")->delimiter(',');

  CLI::App* ablate = app.add_subcommand("ablate", "run the five-row component ablation");
  ConfigFlags& ablate_flags = flags[stages.size() + 1];
  ablate_flags.attach(ablate);

  CLI::App* fixture = app.add_subcommand("fixture", "write a synthetic benchmark bundle");
  std::string fixture_out;
  std::string fixture_profile = "separable";
  std::uint64_t fixture_seed = 1;
  std::size_t fixture_train = 20;
  std::size_t fixture_test = 20;
  std::size_t fixture_dim = 32;
  fixture->add_option("--out", fixture_out, "output directory")->required();
  fixture->add_option("--profile", fixture_profile, "separable or graded");
  fixture->add_option("--seed", fixture_seed);
  fixture->add_option("--train", fixture_train, "training samples");
  fixture->add_option("--test", fixture_test, "test samples");
  fixture->add_option("--dim", fixture_dim, "feature dimension");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fixture->parsed()) {
      return write_fixture(fixture_out, fixture_profile, fixture_seed, fixture_train, fixture_test, fixture_dim);
    }
    if (sweep->parsed()) {
      const hice::RunConfig config = sweep_flags.resolve();
      hice::threshold_sweep(config, thresholds, sweep_flags.fresh);
      print_file(fs::path(config.work_dir) / "sweep.md");
      return 0;
    }
    if (ablate->parsed()) {
      const hice::RunConfig config = ablate_flags.resolve();
      hice::ablation_matrix(config, ablate_flags.fresh);
      print_file(fs::path(config.work_dir) / "ablation.md");
      return 0;
    }
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (!stage_apps[i]->parsed()) continue;
      const hice::RunConfig config = flags[i].resolve();
      if ((stages[i].stage == hice::Stage::FitClassifier || stages[i].stage == hice::Stage::BuildMemory) &&
          !config.seed) {
        throw hice::ConfigError(std::string(stages[i].name) + " requires --seed");
      }
      hice::Pipeline pipeline(config);
      pipeline.run_until(stages[i].stage, flags[i].fresh);
      if (stages[i].stage == hice::Stage::Report) {
        print_file(config.report_path().parent_path() / "report.md");
      } else {
        std::cout << stages[i].name << ": done (" << pipeline.stage_dir(stages[i].stage).string() << ")\n";
      }
      return 0;
    }
  } catch (const hice::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
