#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hice/classifier.hpp"
#include "hice/embeddings.hpp"
#include "hice/kmeans.hpp"

namespace hice {

enum class ExemplarRule { NearestToCentroid, SeededRandom };

struct M1Entry {
  Demonstration demonstration;
  VectorXf feature;
};

struct MemoryM1 {
  std::vector<M1Entry> entries;
  double ratio = 0.0;

  std::size_t size() const { return entries.size(); }
  EmbeddingMatrix features() const;  // ids = source ids
};

struct M2Entry {
  std::string source_id;
  std::string question;
  VectorXf feature;
  double margin = 0.0;  // score(out) − score(in); negative means misclassified
};

struct MemoryM2 {
  std::vector<M2Entry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

// max(1, round(ratio·N))
std::size_t m1_cluster_count(std::size_t n, double ratio);

struct M1Options {
  double ratio = 0.05;
  std::uint64_t seed = 0;
  ExemplarRule rule = ExemplarRule::NearestToCentroid;
  KMeansOptions kmeans;
};

// Clusters `cluster_features` (one row per sample id) and picks one exemplar
// per cluster. Entries store the exemplar's edit demonstration and its row of
// `retrieval_features` (the space queries are matched in at inference).
MemoryM1 build_m1(const std::vector<EditSample>& train_samples, const EmbeddingMatrix& cluster_features,
                  const EmbeddingMatrix& retrieval_features, const M1Options& options);

// Single-space overload: clusters and stores the same rows.
MemoryM1 build_m1(const std::vector<EditSample>& train_samples, const EmbeddingMatrix& features,
                  const M1Options& options);

struct M2Candidate {
  Demonstration demonstration;
  VectorXf demo_feature;      // scored by the classifier
  VectorXf question_feature;  // stored for similarity gating
};

struct M2Options {
  std::optional<std::size_t> budget;       // keep at most this many
  std::optional<double> margin_cutoff;     // keep only margin < cutoff
};

// Budget default: 10% of the candidates, at least one.
std::size_t default_m2_budget(std::size_t candidates);

MemoryM2 build_m2(const std::vector<M2Candidate>& out_of_domain, const ClassifierModel& model,
                  const M2Options& options);

// JSONL records plus an EMB1 feature file next to it.
void save_m1(const MemoryM1& m1, const std::filesystem::path& jsonl_path);
MemoryM1 load_m1(const std::filesystem::path& jsonl_path);
void save_m2(const MemoryM2& m2, const std::filesystem::path& jsonl_path);
MemoryM2 load_m2(const std::filesystem::path& jsonl_path);

}  // namespace hice
