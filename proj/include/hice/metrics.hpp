#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "hice/dataset.hpp"
#include "hice/embeddings.hpp"

namespace hice {

// Lowercase, trim, collapse whitespace, strip terminal ".,!?".
std::string normalize_answer(const std::string& text);
// Normalized exact match; yes/no and true/false are interchangeable when the
// reference is boolean.
bool answers_match(const std::string& answer, const std::string& reference);

using AnswerMap = std::unordered_map<std::string, std::string>;

// Edit success over the edit set; answers keyed by sample id.
double reliability(const AnswerMap& edited_answers, const Dataset& dataset);
// Answers on (i_e, x_r), keyed by sample id, reference y_e.
double text_generality(const AnswerMap& rephrase_answers, const Dataset& dataset);

struct LocalityProbe {
  std::string id;
  std::string pre_answer;
  std::string post_answer;
};

// Output consistency; the ground truth is never consulted.
double locality(const std::vector<LocalityProbe>& probes);

struct BaselineEntry {
  std::string original_answer;
  bool correct = false;
};
using BaselineBitmap = std::map<std::string, BaselineEntry>;

struct KgiKpiSplit {
  std::vector<std::string> kgi;  // originally wrong, excluding the edit sample
  std::vector<std::string> kpi;  // originally right, excluding the edit sample
};

KgiKpiSplit split_kgi_kpi(const BaselineBitmap& bitmap, const std::string& edit_id,
                          const std::vector<std::string>& same_source_pool);

enum class Pool { KGI, KPI };
enum class FeatureKind { Image, Text };
std::string to_string(Pool pool);
std::string to_string(FeatureKind kind);

struct NeighborSet {
  std::string edit_id;
  Pool pool = Pool::KGI;
  FeatureKind feature_kind = FeatureKind::Image;
  std::vector<std::string> near_ids;
  std::vector<std::string> far_ids;

  std::vector<std::string> all() const;
  bool empty() const { return near_ids.empty() && far_ids.empty(); }
};

// `features` rows are keyed by the same ids as the pool and the edit sample.
NeighborSet sample_neighbors(const std::string& edit_id, const std::vector<std::string>& pool_ids,
                             const EmbeddingMatrix& features, std::size_t k, Pool pool,
                             FeatureKind feature_kind);

struct NeighborOutcome {
  std::string edit_id;
  std::string neighbor_id;
  bool correct = false;
};

struct IndexScore {
  double value = 0.0;
  std::size_t scored_edits = 0;
  std::size_t skipped_edits = 0;  // empty neighbor sets
};

// Mean over edit samples of the mean over that sample's neighbors. `edit_ids`
// lists every edit sample; those without outcomes are skipped and counted.
IndexScore nested_mean(const std::vector<std::string>& edit_ids,
                       const std::vector<NeighborOutcome>& outcomes);

struct MetricReport {
  double rel = 0.0;
  double t_g = 0.0;
  double t_l = 0.0;
  double m_l = 0.0;
  double i_kgi = 0.0;
  double t_kgi = 0.0;
  double i_kpi = 0.0;
  double t_kpi = 0.0;
  std::map<std::string, std::size_t> counts;  // probes and skipped edits per metric
};

inline constexpr const char* kMetricColumns[8] = {"Rel",   "T-G",   "T-L",   "M-L",
                                                  "I-KGI", "T-KGI", "I-KPI", "T-KPI"};

std::array<double, 8> metric_values(const MetricReport& report);
std::string report_json(const MetricReport& report, const std::string& config_hash);
std::string report_markdown(const std::vector<std::pair<std::string, MetricReport>>& rows,
                            const std::string& first_column = "Config");

}  // namespace hice
