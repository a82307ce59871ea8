#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hice/common.hpp"

namespace hice {

enum class Task {
  ObjectExistence,
  ObjectRecognition,
  ObjectAttributes,
  ObjectCounting,
  SceneInformation,
  SpatialRelationship,
  TextRecognition,
  NumericalInference,
};

inline constexpr std::array<Task, 8> kAllTasks = {
    Task::ObjectExistence,  Task::ObjectRecognition,   Task::ObjectAttributes,
    Task::ObjectCounting,   Task::SceneInformation,    Task::SpatialRelationship,
    Task::TextRecognition,  Task::NumericalInference,
};

enum class Source { GQA, TallyQA, VSR, TextVQA, MathVista, Synthetic };

enum class Split { Train, Test };

std::string to_string(Task task);
std::string to_string(Source source);
std::string to_string(Split split);
Task parse_task(const std::string& text);
Source parse_source(const std::string& text);

struct QaPair {
  std::string question;
  std::string answer;
};

struct ImageQaPair {
  std::string image_ref;
  std::string question;
  std::string answer;
};

// One editable fact plus its companions. Locality probes are optional in a
// manifest, but a sample needs both of them to contribute training
// demonstrations.
struct EditSample {
  std::string id;
  std::string image_ref;
  std::string question;
  std::string target_answer;
  std::optional<std::string> original_answer;
  std::string rephrased_question;
  std::optional<QaPair> text_locality;
  std::optional<ImageQaPair> mm_locality;
  Task task = Task::ObjectRecognition;
  Source source = Source::Synthetic;
};

struct Dataset {
  std::vector<EditSample> samples;
  Split split = Split::Test;
  std::map<Task, std::size_t> counts_by_task;

  std::size_t size() const { return samples.size(); }
  // Rebuilds counts_by_task and checks id uniqueness and required fields.
  void reindex();
  const EditSample* find(const std::string& id) const;
};

// Totals of the released benchmark.
inline constexpr std::size_t kComprehendEditTrainTotal = 13450;
inline constexpr std::size_t kComprehendEditTestTotal = 4482;

// JSON-lines manifest, one EditSample per line.
Dataset load_manifest(const std::filesystem::path& path, Split split = Split::Test);
Dataset parse_manifest(const std::string& text, Split split = Split::Test);
void write_manifest(const Dataset& dataset, const std::filesystem::path& path);
std::string to_json_line(const EditSample& sample);

// Throws ValidationError unless the per-task counts match the released benchmark.
void validate_comprehendedit_totals(const Dataset& dataset);

// ---------------------------------------------------------------------------
// Benchmark construction procedures.

struct QaRecord {
  std::string id;
  std::string question;
  std::string answer;
};

struct TrainTestSplit {
  std::vector<QaRecord> train;
  std::vector<QaRecord> test;
};

// Records whose answer is among the `train_answer_count` most frequent
// answers go to train, everything else to test. Frequency ties break by
// lexicographic answer order.
TrainTestSplit split_by_answer_frequency(const std::vector<QaRecord>& records,
                                         std::size_t train_answer_count);

// Downsamples the majority label of a yes/no (true/false) set to 1:1.
std::vector<QaRecord> balance_boolean_answers(const std::vector<QaRecord>& records,
                                              std::uint64_t seed);

struct AnnotationRecord {
  std::string id;
  std::string image_ref;
  std::string question;
  std::vector<std::string> annotations;
  std::string answer_type;
};

struct ConsistentRecord {
  AnnotationRecord record;
  std::string answer;  // modal annotation
  double agreement = 0.0;
};

// Keeps a record iff (modal count)/(total) > threshold.
std::vector<ConsistentRecord> filter_by_annotation_consistency(
    const std::vector<AnnotationRecord>& records, double threshold);

struct RelationRecord {
  std::string id;
  std::string image_ref;
  std::string subject;
  std::string relation;
  std::string object;
  std::string answer;
};

class EmbeddingMatrix;

// Replaces the relation of a seeded `fraction` of records by its nearest other
// relation (L2 over `relation_features`, keyed by relation string) and sets
// their answer to "false".
std::vector<RelationRecord> flip_relations_by_similarity(
    const std::vector<RelationRecord>& records, const EmbeddingMatrix& relation_features,
    double fraction, std::uint64_t seed);

// Per answer type: first up to test_cap records to test, then up to train_cap
// of the rest to train. Records are drawn in seeded-shuffled order.
TrainTestSplit capped_per_answer_split(const std::vector<QaRecord>& records,
                                       std::size_t test_cap, std::size_t train_cap,
                                       std::uint64_t seed);

// Deterministic synthetic dataset; see fixture.hpp for full bundles.
Dataset make_fixture(const std::map<Task, std::size_t>& counts, std::uint64_t seed,
                     Split split = Split::Test);

}  // namespace hice
