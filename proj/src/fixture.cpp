#include "hice/fixture.hpp"

#include <array>
#include <cmath>

#include "hice/classifier.hpp"

namespace hice {

namespace {

template <std::size_t N>
const std::string& pick(Rng& rng, const std::array<std::string, N>& words) {
  return words[static_cast<std::size_t>(rng.below(N))];
}

const std::array<std::string, 12> kObjects = {"cup",   "bench", "kite",  "laptop", "dog",   "bus",
                                              "chair", "clock", "horse", "vase",   "train", "lamp"};
const std::array<std::string, 8> kColors = {"red",   "blue",  "green", "white",
                                            "black", "brown", "yellow", "gray"};
const std::array<std::string, 8> kPlaces = {"kitchen", "beach",   "street", "park",
                                            "office",  "bedroom", "field",  "station"};
const std::array<std::string, 8> kWords = {"stop", "exit",  "finnair", "open",
                                           "sale", "pizza", "metro",   "hotel"};
const std::array<std::string, 8> kNumbers = {"1", "2", "3", "4", "5", "6", "7", "8"};
const std::array<std::string, 8> kNames = {"austen", "tolstoy", "orwell", "woolf",
                                           "borges", "achebe",  "morrison", "eco"};
const std::array<std::string, 8> kSports = {"tennis", "surfing", "skiing",   "baseball",
                                            "soccer", "golf",    "swimming", "cycling"};

std::string task_code(Task task) {
  switch (task) {
    case Task::ObjectExistence: return "ext";
    case Task::ObjectRecognition: return "rec";
    case Task::ObjectAttributes: return "att";
    case Task::ObjectCounting: return "cnt";
    case Task::SceneInformation: return "scn";
    case Task::SpatialRelationship: return "spa";
    case Task::TextRecognition: return "txt";
    case Task::NumericalInference: return "num";
  }
  return "unk";
}

// (question, target, wrong answer) for one task.
std::array<std::string, 3> make_question(Task task, Rng& rng, const std::string& tag) {
  const std::string obj = pick(rng, kObjects);
  const std::string obj2 = pick(rng, kObjects);
  auto two_distinct = [&](const auto& words) {
    const std::string a = pick(rng, words);
    std::string b = pick(rng, words);
    while (b == a) b = pick(rng, words);
    return std::array<std::string, 2>{a, b};
  };
  switch (task) {
    case Task::ObjectExistence: {
      const bool yes = rng.below(2) == 0;
      return {"Is there a " + obj + " in photo " + tag + "?", yes ? "yes" : "no", yes ? "no" : "yes"};
    }
    case Task::ObjectRecognition: {
      auto [a, b] = two_distinct(kObjects);
      return {"What object is next to the " + obj + " in photo " + tag + "?", a, b};
    }
    case Task::ObjectAttributes: {
      auto [a, b] = two_distinct(kColors);
      return {"What color is the " + obj + " in photo " + tag + "?", a, b};
    }
    case Task::ObjectCounting: {
      auto [a, b] = two_distinct(kNumbers);
      return {"How many " + obj + "s are in photo " + tag + "?", a, b};
    }
    case Task::SceneInformation: {
      auto [a, b] = two_distinct(kPlaces);
      return {"Which place is shown in photo " + tag + "?", a, b};
    }
    case Task::SpatialRelationship: {
      const bool yes = rng.below(2) == 0;
      return {"Is the " + obj + " left of the " + obj2 + " in photo " + tag + "?",
              yes ? "true" : "false", yes ? "false" : "true"};
    }
    case Task::TextRecognition: {
      auto [a, b] = two_distinct(kWords);
      return {"What word is written on the " + obj + " in photo " + tag + "?", a, b};
    }
    case Task::NumericalInference: {
      auto [a, b] = two_distinct(kNumbers);
      return {"What is the value of the " + obj + " bar in photo " + tag + "?", a, b};
    }
  }
  return {"", "", ""};
}

std::string lower_first(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(s[0])));
  return s;
}

class Geometry {
 public:
  Geometry(std::size_t dim, std::uint64_t seed) : dim_(dim), rng_(seed) {
    if (dim < 8) throw ValidationError("fixture: dim must be at least 8");
    task_centers_.resize(kAllTasks.size());
    for (auto& c : task_centers_) c = noise(1.0, 0);
  }

  VectorXf in_domain(Task task) {
    VectorXf v = noise(0.05, 3);
    v(0) += 1.0f;
    v(static_cast<Eigen::Index>(3 + static_cast<std::size_t>(task) % (dim_ - 3))) += 0.35f;
    return v;
  }

  VectorXf out_of_domain() {
    VectorXf v = noise(0.05, 3);
    v(1) += 1.0f;
    return v;
  }

  VectorXf image(Task task) {
    return task_centers_[static_cast<std::size_t>(task)] + noise(0.15, 0);
  }

  VectorXf anchor() const {
    VectorXf a = VectorXf::Zero(static_cast<Eigen::Index>(dim_));
    a(0) = a(2) = static_cast<float>(1.0 / std::sqrt(2.0));
    return a;
  }

  // Unit vector with cosine exactly `grade` to anchor(), in-domain side.
  VectorXf graded(double grade, std::size_t slot) const {
    VectorXd u = VectorXd::Zero(static_cast<Eigen::Index>(dim_));
    u(0) = 0.8 / std::sqrt(2.0);
    u(2) = -0.8 / std::sqrt(2.0);
    u(static_cast<Eigen::Index>(3 + slot % (dim_ - 3))) = 0.6;
    const VectorXd a = anchor().cast<double>();
    return (grade * a + std::sqrt(1.0 - grade * grade) * u).cast<float>();
  }

 private:
  VectorXf noise(double sigma, std::size_t from_axis) {
    VectorXf v = VectorXf::Zero(static_cast<Eigen::Index>(dim_));
    for (std::size_t i = from_axis; i < dim_; ++i) {
      v(static_cast<Eigen::Index>(i)) = static_cast<float>(sigma * rng_.normal());
    }
    return v;
  }

  std::size_t dim_;
  Rng rng_;
  std::vector<VectorXf> task_centers_;
};

struct RowSink {
  std::vector<std::string> ids;
  std::vector<VectorXf> rows;

  void add(std::string id, VectorXf row) {
    ids.push_back(std::move(id));
    rows.push_back(std::move(row));
  }

  EmbeddingMatrix build(const std::string& tag) const {
    MatrixXf m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return EmbeddingMatrix(ids, std::move(m), tag);
  }
};

std::map<Task, std::size_t> round_robin_counts(std::size_t n) {
  std::map<Task, std::size_t> counts;
  for (std::size_t i = 0; i < n; ++i) ++counts[kAllTasks[i % kAllTasks.size()]];
  return counts;
}

}  // namespace

Dataset make_fixture(const std::map<Task, std::size_t>& counts, std::uint64_t seed, Split split) {
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + (split == Split::Train ? 1 : 2));
  Dataset dataset;
  dataset.split = split;
  std::size_t serial = 0;
  for (Task task : kAllTasks) {
    auto it = counts.find(task);
    const std::size_t n = it == counts.end() ? 0 : it->second;
    for (std::size_t i = 0; i < n; ++i, ++serial) {
      const std::string tag = std::to_string(1000 + rng.below(9000)) + "-" + std::to_string(serial);
      auto [question, target, wrong] = make_question(task, rng, tag);
      EditSample s;
      s.id = to_string(split) + "-" + task_code(task) + "-" + std::to_string(i);
      s.image_ref = "images/" + s.id + ".jpg";
      s.question = question;
      s.target_answer = target;
      s.original_answer = wrong;
      s.rephrased_question = "Could you tell me " + lower_first(question);
      s.text_locality = QaPair{"Who wrote the novel " + pick(rng, kWords) + " " + tag + "?",
                               pick(rng, kNames)};
      s.mm_locality = ImageQaPair{"okvqa/" + s.id + ".jpg",
                                  "What sport is played in picture " + tag + "?", pick(rng, kSports)};
      s.task = task;
      s.source = Source::Synthetic;
      dataset.samples.push_back(std::move(s));
    }
  }
  dataset.reindex();
  return dataset;
}

std::string to_string(FixtureProfile profile) {
  return profile == FixtureProfile::Graded ? "graded" : "separable";
}

FixtureProfile parse_fixture_profile(const std::string& text) {
  if (text == "separable") return FixtureProfile::Separable;
  if (text == "graded") return FixtureProfile::Graded;
  throw ValidationError("unknown fixture profile '" + text + "'");
}

FixtureBundle make_fixture_bundle(const FixtureOptions& options) {
  if (options.train_samples == 0 || options.test_samples == 0) {
    throw ValidationError("fixture: train and test sets must be non-empty");
  }
  if (options.profile == FixtureProfile::Graded && options.grades.empty()) {
    throw ValidationError("fixture: graded profile needs at least one grade");
  }
  FixtureBundle b;
  b.train = make_fixture(round_robin_counts(options.train_samples), options.seed, Split::Train);
  b.test = make_fixture(round_robin_counts(options.test_samples), options.seed, Split::Test);

  // Test samples keep only the requested number of locality probes.
  for (std::size_t i = 0; i < b.test.samples.size(); ++i) {
    auto& s = b.test.samples[i];
    if (i >= options.test_text_locality) s.text_locality.reset();
    if (i >= options.test_mm_locality) s.mm_locality.reset();
  }

  ScriptedBehavior& behavior = b.behavior;
  behavior.fact_sensitivity = true;
  behavior.distraction = "not sure";
  const std::size_t n_test = b.test.samples.size();
  for (auto* dataset : {&b.train, &b.test}) {
    for (std::size_t i = 0; i < dataset->samples.size(); ++i) {
      auto& s = dataset->samples[i];
      bool correct = false;
      if (dataset == &b.test) {
        correct = std::floor(static_cast<double>(i + 1) * options.originally_correct) >
                  std::floor(static_cast<double>(i) * options.originally_correct);
      }
      const std::string base = correct ? s.target_answer : *s.original_answer;
      s.original_answer = base;
      behavior.add(s.image_ref, s.question, base);
      behavior.add(s.image_ref, s.rephrased_question, base);
      behavior.add_alias(s.rephrased_question, s.question);
      if (s.text_locality) {
        // Every third text probe is answered wrongly by the unedited model.
        behavior.add("", s.text_locality->question, i % 3 == 2 ? "i do not know" : s.text_locality->answer);
      }
      if (s.mm_locality) behavior.add(s.mm_locality->image_ref, s.mm_locality->question, s.mm_locality->answer);
    }
  }
  (void)n_test;

  Geometry geo(options.dim, options.seed ^ 0xF1C7u);
  RowSink demos;
  RowSink questions;
  RowSink images;
  const bool graded = options.profile == FixtureProfile::Graded;
  auto grade = [&](std::size_t i) { return options.grades[i % options.grades.size()]; };

  for (std::size_t i = 0; i < b.train.samples.size(); ++i) {
    const auto& s = b.train.samples[i];
    demos.add(demo_key(s.id, DemoKind::Edit), geo.in_domain(s.task));
    demos.add(demo_key(s.id, DemoKind::Rephrase), geo.in_domain(s.task));
    demos.add(demo_key(s.id, DemoKind::TextLocality), geo.out_of_domain());
    demos.add(demo_key(s.id, DemoKind::MmLocality), geo.out_of_domain());
    questions.add(demo_key(s.id, DemoKind::Edit), geo.in_domain(s.task));
    questions.add(demo_key(s.id, DemoKind::Rephrase), geo.in_domain(s.task));
    questions.add(demo_key(s.id, DemoKind::TextLocality), geo.out_of_domain());
    if (graded && i == 0) {
      b.anchor_key = demo_key(s.id, DemoKind::MmLocality);
      questions.add(b.anchor_key, geo.anchor());
    } else {
      questions.add(demo_key(s.id, DemoKind::MmLocality), geo.out_of_domain());
    }
    images.add(s.id, geo.image(s.task));
  }
  for (std::size_t i = 0; i < b.test.samples.size(); ++i) {
    const auto& s = b.test.samples[i];
    if (graded) {
      questions.add(demo_key(s.id, DemoKind::Edit), geo.graded(grade(i), 3 * i));
      questions.add(demo_key(s.id, DemoKind::Rephrase), geo.graded(grade(i), 3 * i + 1));
    } else {
      questions.add(demo_key(s.id, DemoKind::Edit), geo.in_domain(s.task));
      questions.add(demo_key(s.id, DemoKind::Rephrase), geo.in_domain(s.task));
    }
    if (s.text_locality) questions.add(demo_key(s.id, DemoKind::TextLocality), geo.out_of_domain());
    if (s.mm_locality) {
      questions.add(demo_key(s.id, DemoKind::MmLocality),
                    graded ? geo.graded(grade(i + 2), 3 * i + 2) : geo.out_of_domain());
    }
    images.add(s.id, geo.image(s.task));
  }
  b.demonstrations = demos.build("fixture-text");
  b.questions = questions.build("fixture-text");
  b.images = images.build("fixture-image");
  return b;
}

FixtureFiles write_fixture_bundle(const FixtureBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  FixtureFiles f{dir / "train.jsonl",   dir / "test.jsonl", dir / "demos.emb",
                 dir / "questions.emb", dir / "images.emb", dir / "scripted.json"};
  write_manifest(bundle.train, f.train_manifest);
  write_manifest(bundle.test, f.test_manifest);
  write_embeddings(bundle.demonstrations, f.demonstrations);
  write_embeddings(bundle.questions, f.questions);
  write_embeddings(bundle.images, f.images);
  save_scripted_behavior(bundle.behavior, f.scripted.string());
  return f;
}

}  // namespace hice
