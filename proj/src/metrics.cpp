#include "hice/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>
#include <unordered_set>

#include <json.hpp>

namespace hice {

std::string normalize_answer(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  while (!out.empty()) {
    const char last = out.back();
    if (last == '.' || last == ',' || last == '!' || last == '?' || last == ' ') {
      out.pop_back();
    } else {
      break;
    }
  }
  return out;
}

namespace {

bool is_boolean(const std::string& normalized) {
  return normalized == "yes" || normalized == "no" || normalized == "true" || normalized == "false";
}

std::string boolean_form(const std::string& normalized) {
  if (normalized == "yes") return "true";
  if (normalized == "no") return "false";
  return normalized;
}

double fraction(std::size_t hits, std::size_t total) {
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

bool answers_match(const std::string& answer, const std::string& reference) {
  const std::string a = normalize_answer(answer);
  const std::string r = normalize_answer(reference);
  if (is_boolean(r)) return boolean_form(a) == boolean_form(r);
  return a == r;
}

double reliability(const AnswerMap& edited_answers, const Dataset& dataset) {
  if (dataset.samples.empty()) throw ValidationError("reliability: empty dataset");
  std::size_t hits = 0;
  for (const auto& s : dataset.samples) {
    auto it = edited_answers.find(s.id);
    if (it == edited_answers.end()) throw ValidationError("reliability: no answer for '" + s.id + "'");
    hits += answers_match(it->second, s.target_answer);
  }
  return fraction(hits, dataset.samples.size());
}

double text_generality(const AnswerMap& rephrase_answers, const Dataset& dataset) {
  if (dataset.samples.empty()) throw ValidationError("text_generality: empty dataset");
  std::size_t hits = 0;
  for (const auto& s : dataset.samples) {
    if (s.rephrased_question.empty()) {
      throw ValidationError("text_generality: sample '" + s.id + "' has no rephrase");
    }
    auto it = rephrase_answers.find(s.id);
    if (it == rephrase_answers.end()) {
      throw ValidationError("text_generality: no rephrase answer for '" + s.id + "'");
    }
    hits += answers_match(it->second, s.target_answer);
  }
  return fraction(hits, dataset.samples.size());
}

double locality(const std::vector<LocalityProbe>& probes) {
  if (probes.empty()) throw ValidationError("locality: no probes");
  std::size_t hits = 0;
  for (const auto& p : probes) hits += answers_match(p.post_answer, p.pre_answer);
  return fraction(hits, probes.size());
}

KgiKpiSplit split_kgi_kpi(const BaselineBitmap& bitmap, const std::string& edit_id,
                          const std::vector<std::string>& same_source_pool) {
  KgiKpiSplit split;
  for (const auto& id : same_source_pool) {
    if (id == edit_id) continue;
    auto it = bitmap.find(id);
    if (it == bitmap.end()) throw ValidationError("split_kgi_kpi: '" + id + "' missing from baseline");
    (it->second.correct ? split.kpi : split.kgi).push_back(id);
  }
  return split;
}

std::string to_string(Pool pool) { return pool == Pool::KGI ? "kgi" : "kpi"; }
std::string to_string(FeatureKind kind) { return kind == FeatureKind::Image ? "image" : "text"; }

std::vector<std::string> NeighborSet::all() const {
  std::vector<std::string> ids = near_ids;
  ids.insert(ids.end(), far_ids.begin(), far_ids.end());
  return ids;
}

NeighborSet sample_neighbors(const std::string& edit_id, const std::vector<std::string>& pool_ids,
                             const EmbeddingMatrix& features, std::size_t k, Pool pool,
                             FeatureKind feature_kind) {
  if (k < 1) throw ValidationError("sample_neighbors: k must be at least 1");
  NeighborSet set;
  set.edit_id = edit_id;
  set.pool = pool;
  set.feature_kind = feature_kind;

  std::vector<std::string> candidates;
  std::set<std::string> seen;
  for (const auto& id : pool_ids) {
    if (id != edit_id && seen.insert(id).second) candidates.push_back(id);
  }
  if (candidates.empty()) return set;
  const EmbeddingMatrix pool_features = features.select(candidates);
  const auto query = features.row(edit_id);

  set.near_ids = knn_ids(query, pool_features, k, Order::Nearest, Metric::L2);
  if (candidates.size() > set.near_ids.size()) {
    const std::unordered_set<std::string> exclude(set.near_ids.begin(), set.near_ids.end());
    set.far_ids = knn_ids(query, pool_features, k, Order::Farthest, Metric::L2, exclude);
  }
  return set;
}

IndexScore nested_mean(const std::vector<std::string>& edit_ids,
                       const std::vector<NeighborOutcome>& outcomes) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_edit;  // hits, total
  for (const auto& o : outcomes) {
    auto& [hits, total] = per_edit[o.edit_id];
    hits += o.correct;
    ++total;
  }
  IndexScore score;
  double sum = 0.0;
  for (const auto& id : edit_ids) {
    auto it = per_edit.find(id);
    if (it == per_edit.end() || it->second.second == 0) {
      ++score.skipped_edits;
      continue;
    }
    sum += fraction(it->second.first, it->second.second);
    ++score.scored_edits;
  }
  score.value = score.scored_edits == 0 ? 0.0 : sum / static_cast<double>(score.scored_edits);
  return score;
}

std::array<double, 8> metric_values(const MetricReport& r) {
  return {r.rel, r.t_g, r.t_l, r.m_l, r.i_kgi, r.t_kgi, r.i_kpi, r.t_kpi};
}

std::string report_json(const MetricReport& report, const std::string& config_hash) {
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash;
  nlohmann::ordered_json metrics;
  const auto values = metric_values(report);
  for (std::size_t i = 0; i < values.size(); ++i) metrics[kMetricColumns[i]] = values[i];
  j["metrics"] = std::move(metrics);
  nlohmann::ordered_json counts = nlohmann::ordered_json::object();
  for (const auto& [key, value] : report.counts) counts[key] = value;
  j["counts"] = std::move(counts);
  return j.dump(2) + "\n";
}

std::string report_markdown(const std::vector<std::pair<std::string, MetricReport>>& rows,
                            const std::string& first_column) {
  std::string out = "| " + first_column + " |";
  for (const char* c : kMetricColumns) out += std::string(" ") + c + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < 8; ++i) out += "---:|";
  out += "\n";
  for (const auto& [name, report] : rows) {
    out += "| " + name + " |";
    for (double v : metric_values(report)) {
      char buf[32];
      std::snprintf(buf, sizeof buf, " %.2f |", 100.0 * v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace hice
