#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hice/backends.hpp"
#include "hice/classifier.hpp"
#include "hice/memory.hpp"
#include "hice/metrics.hpp"
#include "hice/router.hpp"

namespace hice {

struct RunConfig {
  // paths
  std::string train_manifest;
  std::string test_manifest;
  std::string demo_embeddings;
  std::string question_embeddings;
  std::string image_embeddings;
  std::string work_dir;
  std::string report_dir;  // defaults to <work_dir>/report

  RouterConfig router;

  // classifier
  std::size_t projected_dim = 10000;
  std::vector<double> lambda_grid = default_lambda_grid();
  double split_fraction = 0.8;
  // Fit the gate on all-in-domain labels; used by ablation diagnostics.
  bool corrupt_labels = false;

  // sampling and memories
  std::size_t k = 4;
  double ratio = 0.05;
  ExemplarRule m1_rule = ExemplarRule::NearestToCentroid;
  std::optional<std::size_t> m2_budget;  // default: 10% of candidates
  bool m2_all = false;                   // keep every out-of-domain question
  std::optional<double> m2_margin_cutoff;

  // "scripted:<path>" or "http://host:port"
  std::string backend;
  std::size_t max_in_flight = 4;
  std::string embed_url;  // adapter that fills in missing embedding files

  std::optional<std::uint64_t> seed;

  std::filesystem::path report_path() const;
};

// Canonical JSON (sorted keys). Round-trips through config_from_json.
std::string config_to_json(const RunConfig& config);
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::uint64_t config_hash(const RunConfig& config);

// Fixed defaults collected in one place: M=10000, k0=16, k=4, ratio 0.05,
// λ ∈ 10⁻⁴…10⁴, 80/20 split.
RunConfig default_config();

// Invalid configuration, or a stage artifact stamped by another config.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class StageError : public Error {
 public:
  StageError(const std::string& stage, const std::string& cause)
      : Error("stage '" + stage + "' failed: " + cause), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

enum class Stage { Ingest, BaselineEval, FitClassifier, BuildMemory, Evaluate, Report };
std::string to_string(Stage stage);

std::unique_ptr<Backend> make_backend(const RunConfig& config);

// Runs `target` and every stage before it. Stages whose stamp matches the
// config hash are reused; a stamp from a different hash is an error unless
// `fresh` is set, in which case the stale stage is rebuilt.
class Pipeline {
 public:
  explicit Pipeline(RunConfig config, std::shared_ptr<Backend> backend = nullptr);

  void run_until(Stage target, bool fresh = false);
  MetricReport run(bool fresh = false);

  const RunConfig& config() const { return config_; }
  std::string hash() const;
  std::filesystem::path stage_dir(Stage stage) const;

  // Stage bodies; each reads its inputs from disk.
  void ingest();
  void baseline_eval();
  void fit_classifier();
  void build_memory();
  void evaluate();
  MetricReport report();

 private:
  bool stage_current(Stage stage, bool fresh) const;
  void stamp(Stage stage) const;
  Backend& backend();

  RunConfig config_;
  std::shared_ptr<Backend> backend_;
};

MetricReport run_pipeline(const RunConfig& config, bool fresh = false);
MetricReport load_report(const std::filesystem::path& report_json);

struct SweepResult {
  std::vector<double> thresholds;
  std::vector<MetricReport> reports;
  std::vector<std::size_t> edited_counts;
};

inline const std::vector<double> kDefaultSweep = {0.75, 0.80, 0.85, 0.90};

// One run per threshold under <work_dir>/T=<t>, plus sweep.json/sweep.md.
SweepResult threshold_sweep(const RunConfig& config, const std::vector<double>& thresholds,
                            bool fresh = false);

struct AblationRow {
  std::string name;
  bool use_m1 = false;
  bool use_projection = false;
  bool use_m2 = false;
};

// baseline, +M1, +M1+Wr, +M1+M2, HICE
std::vector<AblationRow> ablation_rows();

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<MetricReport> reports;
};

AblationResult ablation_matrix(const RunConfig& config, bool fresh = false);

// Count of "edited" routes in a finished run's decision log.
std::size_t count_edited_routes(const std::filesystem::path& work_dir,
                                const std::string& probe_filter = {});

}  // namespace hice
