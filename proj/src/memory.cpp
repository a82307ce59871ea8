#include "hice/memory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace hice {

using nlohmann::json;

namespace {

std::filesystem::path feature_path(const std::filesystem::path& jsonl_path) {
  auto p = jsonl_path;
  p.replace_extension(".emb");
  return p;
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ": " + e.what(), line_no);
    }
  }
  return rows;
}

MatrixXf stack(const std::vector<VectorXf>& rows) {
  if (rows.empty()) return MatrixXf(0, 0);
  MatrixXf m(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return m;
}

}  // namespace

EmbeddingMatrix MemoryM1::features() const {
  std::vector<std::string> ids;
  std::vector<VectorXf> rows;
  for (const auto& e : entries) {
    ids.push_back(e.demonstration.source_id);
    rows.push_back(e.feature);
  }
  return EmbeddingMatrix(std::move(ids), stack(rows));
}

std::size_t m1_cluster_count(std::size_t n, double ratio) {
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  return std::max<std::size_t>(1, k);
}

MemoryM1 build_m1(const std::vector<EditSample>& train_samples, const EmbeddingMatrix& cluster_features,
                  const EmbeddingMatrix& retrieval_features, const M1Options& options) {
  if (train_samples.empty()) throw ValidationError("build_m1: empty training set");
  if (!(options.ratio > 0.0 && options.ratio <= 1.0)) {
    throw ValidationError("build_m1: ratio must lie in (0, 1]");
  }
  std::vector<std::string> ids;
  ids.reserve(train_samples.size());
  for (const auto& s : train_samples) ids.push_back(s.id);
  const MatrixXf points = cluster_features.select(ids).rows();

  const std::size_t k = m1_cluster_count(train_samples.size(), options.ratio);
  const KMeansResult clusters = kmeans(points, k, options.seed, options.kmeans);

  // Members per cluster in sample order.
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < clusters.assignments.size(); ++i) {
    members[clusters.assignments[i]].push_back(i);
  }
  Rng rng(options.seed ^ 0x6d31ULL);
  std::vector<bool> used(train_samples.size(), false);
  auto nearest_to_centroid = [&](const std::vector<std::size_t>& candidates, std::size_t c) {
    std::size_t chosen = candidates.front();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i : candidates) {
      const double d = (points.row(static_cast<Eigen::Index>(i)).cast<double>() -
                        clusters.centroids.row(static_cast<Eigen::Index>(c)))
                           .squaredNorm();
      if (d < best || (d == best && ids[i] < ids[chosen])) {
        best = d;
        chosen = i;
      }
    }
    return chosen;
  };

  std::vector<std::size_t> exemplars(k, train_samples.size());
  for (std::size_t c = 0; c < k; ++c) {
    if (members[c].empty()) continue;
    exemplars[c] = options.rule == ExemplarRule::SeededRandom
                       ? members[c][static_cast<std::size_t>(rng.below(members[c].size()))]
                       : nearest_to_centroid(members[c], c);
    used[exemplars[c]] = true;
  }
  // A cluster can only end up empty when points coincide; it then takes the
  // closest sample not already chosen.
  for (std::size_t c = 0; c < k; ++c) {
    if (exemplars[c] != train_samples.size()) continue;
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < train_samples.size(); ++i) {
      if (!used[i]) free.push_back(i);
    }
    exemplars[c] = nearest_to_centroid(free, c);
    used[exemplars[c]] = true;
  }

  MemoryM1 m1;
  m1.ratio = options.ratio;
  for (std::size_t index : exemplars) {
    const EditSample& s = train_samples[index];
    Demonstration demo{render_demonstration(s.question, s.target_answer), DemoKind::Edit,
                       ScopeLabel::InDomain, s.id, s.question};
    const std::string key =
        retrieval_features.contains(s.id) ? s.id : demo_key(s.id, DemoKind::Edit);
    m1.entries.push_back({std::move(demo), retrieval_features.row(key)});
  }
  return m1;
}

MemoryM1 build_m1(const std::vector<EditSample>& train_samples, const EmbeddingMatrix& features,
                  const M1Options& options) {
  return build_m1(train_samples, features, features, options);
}

std::size_t default_m2_budget(std::size_t candidates) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(candidates))));
}

MemoryM2 build_m2(const std::vector<M2Candidate>& out_of_domain, const ClassifierModel& model,
                  const M2Options& options) {
  struct Scored {
    std::size_t index;
    double margin;
  };
  std::vector<Scored> scored;
  scored.reserve(out_of_domain.size());
  for (std::size_t i = 0; i < out_of_domain.size(); ++i) {
    const auto& c = out_of_domain[i];
    if (c.demonstration.label != ScopeLabel::OutOfDomain) {
      throw ValidationError("build_m2: demonstration '" + c.demonstration.key() +
                            "' is not out-of-domain");
    }
    // Margin toward the correct (out-of-domain) label.
    const double margin = -model.classify(c.demo_feature).margin;
    if (options.margin_cutoff && !(margin < *options.margin_cutoff)) continue;
    scored.push_back({i, margin});
  }
  std::stable_sort(scored.begin(), scored.end(), [&](const Scored& a, const Scored& b) {
    if (a.margin != b.margin) return a.margin < b.margin;
    return out_of_domain[a.index].demonstration.key() < out_of_domain[b.index].demonstration.key();
  });
  const std::size_t budget = options.budget.value_or(default_m2_budget(out_of_domain.size()));
  if (scored.size() > budget) scored.resize(budget);

  MemoryM2 m2;
  for (const auto& s : scored) {
    const auto& c = out_of_domain[s.index];
    m2.entries.push_back({c.demonstration.key(), c.demonstration.question, c.question_feature, s.margin});
  }
  return m2;
}

void save_m1(const MemoryM1& m1, const std::filesystem::path& jsonl_path) {
  std::ofstream out(jsonl_path, std::ios::binary);
  if (!out) throw Error("cannot write " + jsonl_path.string());
  for (const auto& e : m1.entries) {
    json j;
    j["source_id"] = e.demonstration.source_id;
    j["kind"] = to_string(e.demonstration.kind);
    j["question"] = e.demonstration.question;
    j["text"] = e.demonstration.text;
    j["ratio"] = m1.ratio;
    out << j.dump() << '\n';
  }
  write_embeddings(m1.features(), feature_path(jsonl_path));
}

MemoryM1 load_m1(const std::filesystem::path& jsonl_path) {
  const auto rows = read_jsonl(jsonl_path);
  const EmbeddingMatrix features = read_embeddings(feature_path(jsonl_path));
  if (features.count() != rows.size()) throw FormatError("M1: feature rows do not match records");
  MemoryM1 m1;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& j = rows[i];
    const DemoKind kind = parse_demo_kind(j.at("kind").get<std::string>());
    Demonstration d{j.at("text").get<std::string>(), kind, label_for(kind),
                    j.at("source_id").get<std::string>(), j.at("question").get<std::string>()};
    m1.ratio = j.at("ratio").get<double>();
    m1.entries.push_back({std::move(d), features.row(i)});
  }
  return m1;
}

void save_m2(const MemoryM2& m2, const std::filesystem::path& jsonl_path) {
  std::ofstream out(jsonl_path, std::ios::binary);
  if (!out) throw Error("cannot write " + jsonl_path.string());
  std::vector<std::string> ids;
  std::vector<VectorXf> rows;
  for (const auto& e : m2.entries) {
    json j;
    j["source_id"] = e.source_id;
    j["question"] = e.question;
    j["margin"] = e.margin;
    out << j.dump() << '\n';
    ids.push_back(e.source_id);
    rows.push_back(e.feature);
  }
  write_embeddings(EmbeddingMatrix(std::move(ids), stack(rows)), feature_path(jsonl_path));
}

MemoryM2 load_m2(const std::filesystem::path& jsonl_path) {
  const auto rows = read_jsonl(jsonl_path);
  const EmbeddingMatrix features = read_embeddings(feature_path(jsonl_path));
  if (features.count() != rows.size()) throw FormatError("M2: feature rows do not match records");
  MemoryM2 m2;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& j = rows[i];
    m2.entries.push_back({j.at("source_id").get<std::string>(), j.at("question").get<std::string>(),
                          features.row(i), j.at("margin").get<double>()});
  }
  return m2;
}

}  // namespace hice
