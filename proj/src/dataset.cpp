#include "hice/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "hice/embeddings.hpp"
#include "hice/metrics.hpp"

namespace hice {

using nlohmann::json;

namespace {

struct TaskName {
  Task task;
  const char* name;
};

constexpr TaskName kTaskNames[] = {
    {Task::ObjectExistence, "object_existence"},
    {Task::ObjectRecognition, "object_recognition"},
    {Task::ObjectAttributes, "object_attributes"},
    {Task::ObjectCounting, "object_counting"},
    {Task::SceneInformation, "scene_information"},
    {Task::SpatialRelationship, "spatial_relationship"},
    {Task::TextRecognition, "text_recognition"},
    {Task::NumericalInference, "numerical_inference"},
};

struct SourceName {
  Source source;
  const char* name;
};

constexpr SourceName kSourceNames[] = {
    {Source::GQA, "GQA"},         {Source::TallyQA, "TallyQA"},
    {Source::VSR, "VSR"},         {Source::TextVQA, "TextVQA"},
    {Source::MathVista, "MathVista"}, {Source::Synthetic, "synthetic"},
};

// "Object Existence", "ObjectExistence" and "object_existence" all fold to
// "objectexistence".
std::string fold(const std::string& text) {
  std::string out;
  for (unsigned char c : text) {
    if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

// Per-task counts of the released benchmark.
const std::map<Task, std::pair<std::size_t, std::size_t>>& table1() {
  static const std::map<Task, std::pair<std::size_t, std::size_t>> counts = {
      {Task::ObjectExistence, {1471, 491}},   {Task::ObjectRecognition, {2227, 735}},
      {Task::ObjectAttributes, {2282, 705}},  {Task::ObjectCounting, {1506, 503}},
      {Task::SceneInformation, {2067, 787}},  {Task::SpatialRelationship, {1709, 530}},
      {Task::TextRecognition, {1554, 519}},   {Task::NumericalInference, {634, 212}},
  };
  return counts;
}

std::string require_string(const json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    throw ParseError(std::string("missing field '") + key + "'", line);
  }
  if (!it->is_string()) throw ParseError(std::string("field '") + key + "' is not a string", line);
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw ParseError(std::string("field '") + key + "' is not a string", line);
  return it->get<std::string>();
}

EditSample sample_from_json(const json& j, std::size_t line) {
  if (!j.is_object()) throw ParseError("manifest line is not a JSON object", line);
  EditSample s;
  s.id = require_string(j, "id", line);
  s.image_ref = require_string(j, "image", line);
  s.question = require_string(j, "question", line);
  s.target_answer = require_string(j, "target", line);
  s.original_answer = optional_string(j, "original", line);
  s.rephrased_question = require_string(j, "rephrase", line);

  auto loc_q = optional_string(j, "loc_q", line);
  auto loc_a = optional_string(j, "loc_a", line);
  if (loc_q.has_value() != loc_a.has_value()) {
    throw ParseError("loc_q and loc_a must be given together", line);
  }
  if (loc_q) s.text_locality = QaPair{*loc_q, *loc_a};

  auto mloc_image = optional_string(j, "mloc_image", line);
  auto mloc_q = optional_string(j, "mloc_q", line);
  auto mloc_a = optional_string(j, "mloc_a", line);
  const int present = int(mloc_image.has_value()) + int(mloc_q.has_value()) + int(mloc_a.has_value());
  if (present != 0 && present != 3) {
    throw ParseError("mloc_image, mloc_q and mloc_a must be given together", line);
  }
  if (present == 3) s.mm_locality = ImageQaPair{*mloc_image, *mloc_q, *mloc_a};

  try {
    s.task = parse_task(require_string(j, "task", line));
    s.source = parse_source(require_string(j, "source", line));
  } catch (const ValidationError& e) {
    throw ParseError(e.what(), line);
  }
  if (s.id.empty()) throw ParseError("empty id", line);
  if (s.question.empty()) throw ParseError("empty question", line);
  if (s.target_answer.empty()) throw ParseError("empty target", line);
  return s;
}

}  // namespace

std::string to_string(Task task) {
  for (const auto& t : kTaskNames) {
    if (t.task == task) return t.name;
  }
  return "unknown";
}

std::string to_string(Source source) {
  for (const auto& s : kSourceNames) {
    if (s.source == source) return s.name;
  }
  return "unknown";
}

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Task parse_task(const std::string& text) {
  const std::string key = fold(text);
  for (const auto& t : kTaskNames) {
    if (fold(t.name) == key) return t.task;
  }
  throw ValidationError("unknown task '" + text + "'");
}

Source parse_source(const std::string& text) {
  const std::string key = fold(text);
  for (const auto& s : kSourceNames) {
    if (fold(s.name) == key) return s.source;
  }
  throw ValidationError("unknown source '" + text + "'");
}

void Dataset::reindex() {
  counts_by_task.clear();
  std::unordered_set<std::string> seen;
  for (const auto& s : samples) {
    if (s.id.empty() || s.question.empty() || s.target_answer.empty()) {
      throw ValidationError("sample '" + s.id + "' lacks id, question or target");
    }
    if (!seen.insert(s.id).second) throw ValidationError("duplicate sample id '" + s.id + "'");
    ++counts_by_task[s.task];
  }
}

const EditSample* Dataset::find(const std::string& id) const {
  for (const auto& s : samples) {
    if (s.id == id) return &s;
  }
  return nullptr;
}

Dataset parse_manifest(const std::string& text, Split split) {
  Dataset dataset;
  dataset.split = split;
  std::unordered_map<std::string, std::size_t> first_line;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    EditSample s = sample_from_json(j, line_no);
    auto [it, inserted] = first_line.emplace(s.id, line_no);
    if (!inserted) {
      throw ParseError("duplicate id '" + s.id + "' (first seen on line " +
                           std::to_string(it->second) + ")",
                       line_no);
    }
    dataset.samples.push_back(std::move(s));
  }
  dataset.reindex();
  return dataset;
}

Dataset load_manifest(const std::filesystem::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str(), split);
}

std::string to_json_line(const EditSample& s) {
  json j = json::object();
  j["id"] = s.id;
  j["image"] = s.image_ref;
  j["question"] = s.question;
  j["target"] = s.target_answer;
  if (s.original_answer) j["original"] = *s.original_answer;
  j["rephrase"] = s.rephrased_question;
  if (s.text_locality) {
    j["loc_q"] = s.text_locality->question;
    j["loc_a"] = s.text_locality->answer;
  }
  if (s.mm_locality) {
    j["mloc_image"] = s.mm_locality->image_ref;
    j["mloc_q"] = s.mm_locality->question;
    j["mloc_a"] = s.mm_locality->answer;
  }
  j["task"] = to_string(s.task);
  j["source"] = to_string(s.source);
  return j.dump();
}

void write_manifest(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest " + path.string());
  for (const auto& s : dataset.samples) out << to_json_line(s) << '\n';
}

void validate_comprehendedit_totals(const Dataset& dataset) {
  const bool train = dataset.split == Split::Train;
  const std::size_t expected_total = train ? kComprehendEditTrainTotal : kComprehendEditTestTotal;
  if (dataset.size() != expected_total) {
    throw ValidationError(to_string(dataset.split) + " manifest has " +
                          std::to_string(dataset.size()) + " samples, expected " +
                          std::to_string(expected_total));
  }
  for (const auto& [task, counts] : table1()) {
    const std::size_t expected = train ? counts.first : counts.second;
    auto it = dataset.counts_by_task.find(task);
    const std::size_t got = it == dataset.counts_by_task.end() ? 0 : it->second;
    if (got != expected) {
      throw ValidationError("task " + to_string(task) + " has " + std::to_string(got) +
                            " samples, expected " + std::to_string(expected));
    }
  }
}

// ---------------------------------------------------------------------------

TrainTestSplit split_by_answer_frequency(const std::vector<QaRecord>& records,
                                         std::size_t train_answer_count) {
  if (train_answer_count < 1) throw ValidationError("train_answer_count must be at least 1");
  std::map<std::string, std::size_t> freq;
  for (const auto& r : records) ++freq[r.answer];
  if (freq.size() < train_answer_count) {
    throw ValidationError("only " + std::to_string(freq.size()) + " distinct answers, need " +
                          std::to_string(train_answer_count));
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::set<std::string> train_answers;
  for (std::size_t i = 0; i < train_answer_count; ++i) train_answers.insert(ranked[i].first);

  TrainTestSplit out;
  for (const auto& r : records) {
    (train_answers.count(r.answer) ? out.train : out.test).push_back(r);
  }
  return out;
}

std::vector<QaRecord> balance_boolean_answers(const std::vector<QaRecord>& records,
                                              std::uint64_t seed) {
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::string a = normalize_answer(records[i].answer);
    if (a == "true" || a == "yes") {
      positive.push_back(i);
    } else if (a == "false" || a == "no") {
      negative.push_back(i);
    } else {
      throw ValidationError("record '" + records[i].id + "' has non-boolean answer '" +
                            records[i].answer + "'");
    }
  }
  std::vector<std::size_t>& majority = positive.size() >= negative.size() ? positive : negative;
  const std::size_t keep = std::min(positive.size(), negative.size());
  Rng rng(seed);
  rng.shuffle(majority);
  majority.resize(keep);

  std::vector<bool> kept(records.size(), false);
  for (auto i : positive) kept[i] = true;
  for (auto i : negative) kept[i] = true;
  std::vector<QaRecord> out;
  out.reserve(2 * keep);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (kept[i]) out.push_back(records[i]);
  }
  return out;
}

std::vector<ConsistentRecord> filter_by_annotation_consistency(
    const std::vector<AnnotationRecord>& records, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw ValidationError("consistency threshold must lie in (0, 1]");
  }
  std::vector<ConsistentRecord> out;
  for (const auto& r : records) {
    if (r.annotations.empty()) {
      throw ValidationError("record '" + r.id + "' has no annotations");
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& a : r.annotations) ++counts[normalize_answer(a)];
    // std::map iteration makes the lexicographically smallest answer win ties.
    auto modal = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      if (it->second > modal->second) modal = it;
    }
    const double agreement =
        static_cast<double>(modal->second) / static_cast<double>(r.annotations.size());
    if (agreement > threshold) out.push_back({r, modal->first, agreement});
  }
  return out;
}

std::vector<RelationRecord> flip_relations_by_similarity(
    const std::vector<RelationRecord>& records, const EmbeddingMatrix& relation_features,
    double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ValidationError("flip fraction must lie in [0, 1]");
  }
  for (const auto& r : records) {
    if (!relation_features.contains(r.relation)) {
      throw ValidationError("no feature row for relation '" + r.relation + "'");
    }
  }
  std::vector<RelationRecord> out = records;
  const auto flips = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(records.size())));
  if (flips == 0) return out;

  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::map<std::string, std::string> nearest;
  for (std::size_t n = 0; n < flips; ++n) {
    RelationRecord& r = out[order[n]];
    auto it = nearest.find(r.relation);
    if (it == nearest.end()) {
      auto ids = knn_ids(relation_features.row(r.relation), relation_features, 1, Order::Nearest,
                         Metric::L2, {r.relation});
      if (ids.empty()) {
        throw ValidationError("relation '" + r.relation + "' has no other relation to swap with");
      }
      it = nearest.emplace(r.relation, ids.front()).first;
    }
    r.relation = it->second;
    r.answer = "false";
  }
  return out;
}

TrainTestSplit capped_per_answer_split(const std::vector<QaRecord>& records, std::size_t test_cap,
                                       std::size_t train_cap, std::uint64_t seed) {
  if (test_cap < 1 || train_cap < 1) throw ValidationError("caps must be at least 1");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) groups[records[i].answer].push_back(i);

  Rng rng(seed);
  TrainTestSplit out;
  for (auto& [answer, members] : groups) {
    rng.shuffle(members);
    const std::size_t n_test = std::min(test_cap, members.size());
    const std::size_t n_train = std::min(train_cap, members.size() - n_test);
    for (std::size_t i = 0; i < n_test; ++i) out.test.push_back(records[members[i]]);
    for (std::size_t i = n_test; i < n_test + n_train; ++i) out.train.push_back(records[members[i]]);
  }
  return out;
}

}  // namespace hice
