#include "hice/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace hice {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string metric_name(Metric m) { return m == Metric::L2 ? "l2" : "cosine"; }

Metric parse_metric(const std::string& s) {
  if (s == "l2") return Metric::L2;
  if (s == "cosine") return Metric::Cosine;
  throw ConfigError("unknown gate metric '" + s + "'");
}

std::string rule_name(ExemplarRule r) {
  return r == ExemplarRule::SeededRandom ? "random" : "nearest";
}

ExemplarRule parse_rule(const std::string& s) {
  if (s == "nearest") return ExemplarRule::NearestToCentroid;
  if (s == "random") return ExemplarRule::SeededRandom;
  throw ConfigError("unknown exemplar rule '" + s + "'");
}

json to_json(const RunConfig& c) {
  json j;
  j["train_manifest"] = c.train_manifest;
  j["test_manifest"] = c.test_manifest;
  j["demo_embeddings"] = c.demo_embeddings;
  j["question_embeddings"] = c.question_embeddings;
  j["image_embeddings"] = c.image_embeddings;
  j["work_dir"] = c.work_dir;
  j["report_dir"] = c.report_dir;
  j["threshold"] = c.router.threshold;
  j["k0"] = c.router.k0;
  j["use_m1"] = c.router.use_m1;
  j["use_projection"] = c.router.use_projection;
  j["use_m2"] = c.router.use_m2;
  j["gate_metric"] = metric_name(c.router.gate_metric);
  j["most_similar_first"] = c.router.most_similar_first;
  j["projected_dim"] = c.projected_dim;
  j["lambda_grid"] = c.lambda_grid;
  j["split_fraction"] = c.split_fraction;
  j["corrupt_labels"] = c.corrupt_labels;
  j["k"] = c.k;
  j["ratio"] = c.ratio;
  j["m1_rule"] = rule_name(c.m1_rule);
  j["m2_budget"] = c.m2_budget ? json(*c.m2_budget) : json(nullptr);
  j["m2_all"] = c.m2_all;
  j["m2_margin_cutoff"] = c.m2_margin_cutoff ? json(*c.m2_margin_cutoff) : json(nullptr);
  j["backend"] = c.backend;
  j["max_in_flight"] = c.max_in_flight;
  j["embed_url"] = c.embed_url;
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  return j;
}

// Keys each stage depends on, in addition to those of earlier stages.
// Locations and concurrency never affect results and are left out.
const std::vector<std::vector<std::string>>& stage_keys() {
  static const std::vector<std::vector<std::string>> keys = {
      {"train_manifest", "test_manifest", "demo_embeddings", "question_embeddings",
       "image_embeddings", "embed_url"},
      {"backend"},
      {"projected_dim", "lambda_grid", "split_fraction", "corrupt_labels", "use_projection", "seed"},
      {"ratio", "m1_rule", "m2_budget", "m2_all", "m2_margin_cutoff"},
      {"threshold", "k0", "use_m1", "use_m2", "gate_metric", "most_similar_first", "k"},
      {},
  };
  return keys;
}

std::uint64_t hash_through(const RunConfig& config, Stage stage) {
  const json full = to_json(config);
  json subset = json::object();
  for (std::size_t s = 0; s <= static_cast<std::size_t>(stage); ++s) {
    for (const auto& key : stage_keys()[s]) subset[key] = full[key];
  }
  return fnv1a64(subset.dump());
}

void validate(const RunConfig& c) {
  if (!(c.router.threshold >= -1.0 && c.router.threshold <= 1.0) &&
      c.router.gate_metric == Metric::Cosine) {
    throw ConfigError("threshold must lie in [-1, 1] for the cosine gate");
  }
  if (c.k < 1) throw ConfigError("k must be at least 1");
  if (!(c.ratio > 0.0 && c.ratio <= 1.0)) throw ConfigError("ratio must lie in (0, 1]");
  if (!(c.split_fraction > 0.0 && c.split_fraction < 1.0)) {
    throw ConfigError("split_fraction must lie in (0, 1)");
  }
  if (c.projected_dim < 1) throw ConfigError("projected_dim must be at least 1");
  if (c.lambda_grid.empty()) throw ConfigError("lambda_grid is empty");
  for (double l : c.lambda_grid) {
    if (!(l > 0.0)) throw ConfigError("lambda_grid values must be positive");
  }
  if (c.m2_budget && *c.m2_budget == 0) throw ConfigError("m2_budget must be at least 1");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(json::parse(line));
  }
  return rows;
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_text(path, text);
}

// Rows of `questions` under "<id>:edit", keyed by plain id.
EmbeddingMatrix edit_question_features(const Dataset& test, const EmbeddingMatrix& questions) {
  std::vector<std::string> ids;
  MatrixXf rows(static_cast<Eigen::Index>(test.size()), static_cast<Eigen::Index>(questions.dim()));
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& id = test.samples[i].id;
    ids.push_back(id);
    rows.row(static_cast<Eigen::Index>(i)) = questions.row(demo_key(id, DemoKind::Edit)).transpose();
  }
  return EmbeddingMatrix(std::move(ids), std::move(rows), questions.encoder_tag());
}

void require_ids(const EmbeddingMatrix& m, const std::vector<std::string>& ids, const std::string& what) {
  for (const auto& id : ids) {
    if (!m.contains(id)) throw ValidationError(what + " has no row for '" + id + "'");
  }
}

struct EmbeddingPlan {
  std::vector<std::string> demo_ids, demo_texts;
  std::vector<std::string> question_ids, question_texts;
  std::vector<std::string> image_ids, image_refs;
};

EmbeddingPlan plan_embeddings(const Dataset& train, const Dataset& test) {
  EmbeddingPlan p;
  for (const auto& d : build_demonstrations(train.samples)) {
    p.demo_ids.push_back(d.key());
    p.demo_texts.push_back(d.text);
  }
  for (const auto* set : {&train, &test}) {
    for (const auto& s : set->samples) {
      p.question_ids.push_back(demo_key(s.id, DemoKind::Edit));
      p.question_texts.push_back(s.question);
      p.question_ids.push_back(demo_key(s.id, DemoKind::Rephrase));
      p.question_texts.push_back(s.rephrased_question);
      if (s.text_locality) {
        p.question_ids.push_back(demo_key(s.id, DemoKind::TextLocality));
        p.question_texts.push_back(s.text_locality->question);
      }
      if (s.mm_locality) {
        p.question_ids.push_back(demo_key(s.id, DemoKind::MmLocality));
        p.question_texts.push_back(s.mm_locality->question);
      }
      p.image_ids.push_back(s.id);
      p.image_refs.push_back(s.image_ref);
    }
  }
  return p;
}

std::string format_threshold(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", t);
  return buf;
}

const std::vector<std::string> kProbes = {"rel", "tg", "tl", "ml", "i_kgi", "t_kgi", "i_kpi", "t_kpi"};

}  // namespace

fs::path RunConfig::report_path() const {
  const fs::path dir = report_dir.empty() ? fs::path(work_dir) / "report" : fs::path(report_dir);
  return dir / "report.json";
}

std::string config_to_json(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

RunConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c = default_config();
  const json known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
  try {
    auto str = [&](const char* key, std::string& out) {
      if (j.contains(key)) out = j[key].get<std::string>();
    };
    auto num = [&](const char* key, auto& out) {
      if (j.contains(key)) out = j[key].get<std::decay_t<decltype(out)>>();
    };
    str("train_manifest", c.train_manifest);
    str("test_manifest", c.test_manifest);
    str("demo_embeddings", c.demo_embeddings);
    str("question_embeddings", c.question_embeddings);
    str("image_embeddings", c.image_embeddings);
    str("work_dir", c.work_dir);
    str("report_dir", c.report_dir);
    num("threshold", c.router.threshold);
    num("k0", c.router.k0);
    num("use_m1", c.router.use_m1);
    num("use_projection", c.router.use_projection);
    num("use_m2", c.router.use_m2);
    if (j.contains("gate_metric")) c.router.gate_metric = parse_metric(j["gate_metric"].get<std::string>());
    num("most_similar_first", c.router.most_similar_first);
    num("projected_dim", c.projected_dim);
    num("lambda_grid", c.lambda_grid);
    num("split_fraction", c.split_fraction);
    num("corrupt_labels", c.corrupt_labels);
    num("k", c.k);
    num("ratio", c.ratio);
    if (j.contains("m1_rule")) c.m1_rule = parse_rule(j["m1_rule"].get<std::string>());
    if (j.contains("m2_budget")) {
      c.m2_budget = j["m2_budget"].is_null() ? std::nullopt
                                             : std::optional<std::size_t>(j["m2_budget"].get<std::size_t>());
    }
    num("m2_all", c.m2_all);
    if (j.contains("m2_margin_cutoff")) {
      c.m2_margin_cutoff = j["m2_margin_cutoff"].is_null()
                               ? std::nullopt
                               : std::optional<double>(j["m2_margin_cutoff"].get<double>());
    }
    str("backend", c.backend);
    num("max_in_flight", c.max_in_flight);
    str("embed_url", c.embed_url);
    if (j.contains("seed")) {
      c.seed = j["seed"].is_null() ? std::nullopt : std::optional<std::uint64_t>(j["seed"].get<std::uint64_t>());
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

RunConfig load_config(const fs::path& path) {
  RunConfig c = config_from_json(read_text(path));
  // Relative paths are taken relative to the config file.
  const fs::path base = path.parent_path();
  for (std::string* p : {&c.train_manifest, &c.test_manifest, &c.demo_embeddings, &c.question_embeddings,
                         &c.image_embeddings, &c.work_dir, &c.report_dir}) {
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  const std::string scripted = "scripted:";
  if (c.backend.rfind(scripted, 0) == 0) {
    const fs::path p = c.backend.substr(scripted.size());
    if (p.is_relative()) c.backend = scripted + (base / p).lexically_normal().string();
  }
  return c;
}

std::uint64_t config_hash(const RunConfig& config) { return hash_through(config, Stage::Report); }

RunConfig default_config() { return RunConfig{}; }

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::Ingest: return "ingest";
    case Stage::BaselineEval: return "baseline-eval";
    case Stage::FitClassifier: return "fit-classifier";
    case Stage::BuildMemory: return "build-memory";
    case Stage::Evaluate: return "evaluate";
    case Stage::Report: return "report";
  }
  return "unknown";
}

std::unique_ptr<Backend> make_backend(const RunConfig& config) {
  const std::string scripted = "scripted:";
  if (config.backend.rfind(scripted, 0) == 0) {
    return std::make_unique<ScriptedBackend>(load_scripted_behavior(config.backend.substr(scripted.size())));
  }
  if (config.backend.rfind("http://", 0) == 0) {
    return std::make_unique<WireBackend>(WireEndpoint::parse(config.backend), config.max_in_flight);
  }
  if (config.backend.empty()) throw ConfigError("no backend configured");
  throw ConfigError("unsupported backend '" + config.backend + "'");
}

// ---------------------------------------------------------------------------

Pipeline::Pipeline(RunConfig config, std::shared_ptr<Backend> backend)
    : config_(std::move(config)), backend_(std::move(backend)) {
  validate(config_);
  if (config_.work_dir.empty()) throw ConfigError("work_dir is required");
}

std::string Pipeline::hash() const { return hex64(config_hash(config_)); }

fs::path Pipeline::stage_dir(Stage stage) const {
  if (stage == Stage::Report) return config_.report_path().parent_path();
  return fs::path(config_.work_dir) / to_string(stage);
}

Backend& Pipeline::backend() {
  if (!backend_) backend_ = make_backend(config_);
  return *backend_;
}

bool Pipeline::stage_current(Stage stage, bool fresh) const {
  const fs::path path = stage_dir(stage) / "stamp.json";
  if (!fs::exists(path)) return false;
  const json j = json::parse(read_text(path));
  const std::string expected = hex64(hash_through(config_, stage));
  if (j.value("config_hash", "") == expected) return true;
  if (fresh) return false;
  throw ConfigError("stage '" + to_string(stage) + "' in " + stage_dir(stage).string() +
                    " was built with config " + j.value("config_hash", "?") + ", current is " + expected +
                    "; rerun with --fresh to rebuild");
}

void Pipeline::stamp(Stage stage) const {
  json j;
  j["stage"] = to_string(stage);
  j["config_hash"] = hex64(hash_through(config_, stage));
  write_text(stage_dir(stage) / "stamp.json", j.dump(2) + "\n");
}

void Pipeline::run_until(Stage target, bool fresh) {
  bool rebuilt = false;
  for (int s = 0; s <= static_cast<int>(target); ++s) {
    const auto stage = static_cast<Stage>(s);
    if (!rebuilt && stage_current(stage, fresh)) continue;
    fs::create_directories(stage_dir(stage));
    try {
      switch (stage) {
        case Stage::Ingest: ingest(); break;
        case Stage::BaselineEval: baseline_eval(); break;
        case Stage::FitClassifier: fit_classifier(); break;
        case Stage::BuildMemory: build_memory(); break;
        case Stage::Evaluate: evaluate(); break;
        case Stage::Report: report(); break;
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(to_string(stage), e.what());
    }
    stamp(stage);
    rebuilt = true;
  }
}

MetricReport Pipeline::run(bool fresh) {
  run_until(Stage::Report, fresh);
  return load_report(config_.report_path());
}

void Pipeline::ingest() {
  const fs::path dir = stage_dir(Stage::Ingest);
  if (config_.train_manifest.empty() || config_.test_manifest.empty()) {
    throw ConfigError("train_manifest and test_manifest are required");
  }
  Dataset train = load_manifest(config_.train_manifest, Split::Train);
  Dataset test = load_manifest(config_.test_manifest, Split::Test);
  for (const auto& s : test.samples) {
    if (train.find(s.id)) throw ValidationError("id '" + s.id + "' appears in both train and test");
  }
  write_manifest(train, dir / "train.jsonl");
  write_manifest(test, dir / "test.jsonl");

  const EmbeddingPlan plan = plan_embeddings(train, test);
  std::unique_ptr<WireBackend> adapter;
  auto obtain = [&](const std::string& configured, const std::vector<std::string>& ids,
                    const std::vector<std::string>& inputs, bool images, const char* name) {
    EmbeddingMatrix m;
    if (!configured.empty() && fs::exists(configured)) {
      m = read_embeddings(configured);
    } else if (!config_.embed_url.empty()) {
      if (!adapter) adapter = std::make_unique<WireBackend>(WireEndpoint::parse(config_.embed_url));
      MatrixXf rows = images ? adapter->embed_images(inputs) : adapter->embed_texts(inputs);
      m = EmbeddingMatrix(ids, std::move(rows), config_.embed_url);
    } else {
      throw ConfigError(std::string(name) + " embeddings missing and no embed_url configured");
    }
    require_ids(m, ids, name);
    write_embeddings(m, dir / (std::string(name) + ".emb"));
    return m.dim();
  };
  const std::size_t demo_dim = obtain(config_.demo_embeddings, plan.demo_ids, plan.demo_texts, false, "demos");
  const std::size_t question_dim =
      obtain(config_.question_embeddings, plan.question_ids, plan.question_texts, false, "questions");
  obtain(config_.image_embeddings, plan.image_ids, plan.image_refs, true, "images");
  if (demo_dim != question_dim) {
    throw DimensionError("demonstration and question embeddings differ in dimension");
  }

  json summary;
  summary["train"] = train.size();
  summary["test"] = test.size();
  json by_task = json::object();
  for (const auto& [task, n] : test.counts_by_task) by_task[to_string(task)] = n;
  summary["test_by_task"] = by_task;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

void Pipeline::baseline_eval() {
  const fs::path in = stage_dir(Stage::Ingest);
  const Dataset test = load_manifest(in / "test.jsonl", Split::Test);
  struct Probe {
    std::string id, kind, reference;
  };
  std::vector<Probe> probes;
  std::vector<BackendRequest> requests;
  for (const auto& s : test.samples) {
    probes.push_back({s.id, "edit", s.target_answer});
    requests.push_back({s.image_ref, s.question});
    if (s.text_locality) {
      probes.push_back({s.id, "text_locality", ""});
      requests.push_back({"", s.text_locality->question});
    }
    if (s.mm_locality) {
      probes.push_back({s.id, "mm_locality", ""});
      requests.push_back({s.mm_locality->image_ref, s.mm_locality->question});
    }
  }
  const auto results = backend().batch_answer(requests);
  std::vector<json> rows;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (!results[i].ok()) {
      throw BackendFailure("baseline " + probes[i].kind + " for '" + probes[i].id + "': " + results[i].error,
                           RoutingDecision{});
    }
    json r;
    r["id"] = probes[i].id;
    r["kind"] = probes[i].kind;
    r["answer"] = results[i].response->answer;
    if (probes[i].kind == "edit") r["correct"] = answers_match(r["answer"], probes[i].reference);
    rows.push_back(std::move(r));
  }
  write_jsonl(stage_dir(Stage::BaselineEval) / "baseline.jsonl", rows);
}

void Pipeline::fit_classifier() {
  if (!config_.seed) throw ConfigError("fit-classifier requires an explicit seed");
  const fs::path in = stage_dir(Stage::Ingest);
  const Dataset train = load_manifest(in / "train.jsonl", Split::Train);
  const EmbeddingMatrix demos_emb = read_embeddings(in / "demos.emb");
  std::vector<Demonstration> demos = build_demonstrations(train.samples);
  if (config_.corrupt_labels) {
    for (auto& d : demos) d.label = ScopeLabel::InDomain;
  }
  std::vector<std::string> keys;
  for (const auto& d : demos) keys.push_back(d.key());
  const MatrixXf features = demos_emb.select(keys).rows();

  ClassifierParams params;
  params.projected_dim = config_.projected_dim;
  params.lambda_grid = config_.lambda_grid;
  params.split_fraction = config_.split_fraction;
  params.seed = *config_.seed;
  params.use_projection = config_.router.use_projection;
  const ClassifierModel model = train_classifier(features, demos, params);

  const fs::path dir = stage_dir(Stage::FitClassifier);
  model.save(dir / "model.hcl", hash_through(config_, Stage::FitClassifier));
  json fit;
  fit["lambda"] = model.lambda();
  fit["val_accuracy"] = model.val_accuracy();
  fit["demonstrations"] = demos.size();
  fit["projected_dim"] = model.projected_dim();
  fit["projected"] = model.projected();
  write_text(dir / "fit.json", fit.dump(2) + "\n");
}

void Pipeline::build_memory() {
  if (!config_.seed) throw ConfigError("build-memory requires an explicit seed");
  const fs::path in = stage_dir(Stage::Ingest);
  const Dataset train = load_manifest(in / "train.jsonl", Split::Train);
  const EmbeddingMatrix demos_emb = read_embeddings(in / "demos.emb");
  const EmbeddingMatrix questions = read_embeddings(in / "questions.emb");
  const EmbeddingMatrix images = read_embeddings(in / "images.emb");
  const ClassifierModel model = ClassifierModel::load(stage_dir(Stage::FitClassifier) / "model.hcl");

  M1Options m1_options;
  m1_options.ratio = config_.ratio;
  m1_options.seed = *config_.seed;
  m1_options.rule = config_.m1_rule;
  const MemoryM1 m1 = build_m1(train.samples, images, questions, m1_options);

  std::vector<M2Candidate> candidates;
  for (const auto& d : build_demonstrations(train.samples)) {
    if (d.label != ScopeLabel::OutOfDomain) continue;
    candidates.push_back({d, demos_emb.row(d.key()), questions.row(d.key())});
  }
  M2Options m2_options;
  if (config_.m2_all) {
    m2_options.budget = candidates.size();
  } else {
    m2_options.budget = config_.m2_budget;
    m2_options.margin_cutoff = config_.m2_margin_cutoff;
  }
  const MemoryM2 m2 = build_m2(candidates, model, m2_options);

  const fs::path dir = stage_dir(Stage::BuildMemory);
  save_m1(m1, dir / "m1.jsonl");
  save_m2(m2, dir / "m2.jsonl");
  json info;
  info["m1_size"] = m1.size();
  info["m2_size"] = m2.size();
  info["m2_candidates"] = candidates.size();
  write_text(dir / "memory.json", info.dump(2) + "\n");
}

void Pipeline::evaluate() {
  const fs::path in = stage_dir(Stage::Ingest);
  const Dataset test = load_manifest(in / "test.jsonl", Split::Test);
  const EmbeddingMatrix questions = read_embeddings(in / "questions.emb");
  const EmbeddingMatrix images = read_embeddings(in / "images.emb");
  const EmbeddingMatrix text_features = edit_question_features(test, questions);
  const ClassifierModel model = ClassifierModel::load(stage_dir(Stage::FitClassifier) / "model.hcl");
  const MemoryM1 m1 = load_m1(stage_dir(Stage::BuildMemory) / "m1.jsonl");
  const MemoryM2 m2 = load_m2(stage_dir(Stage::BuildMemory) / "m2.jsonl");
  const EditContext ctx{model, m1, m2, config_.router};

  BaselineBitmap bitmap;
  std::map<std::pair<std::string, std::string>, std::string> pre;  // (id, kind) -> answer
  for (const auto& r : read_jsonl(stage_dir(Stage::BaselineEval) / "baseline.jsonl")) {
    const auto id = r.at("id").get<std::string>();
    const auto kind = r.at("kind").get<std::string>();
    pre[{id, kind}] = r.at("answer").get<std::string>();
    if (kind == "edit") bitmap[id] = {r.at("answer").get<std::string>(), r.at("correct").get<bool>()};
  }

  std::map<Source, std::vector<std::string>> by_source;
  for (const auto& s : test.samples) by_source[s.source].push_back(s.id);

  struct Item {
    std::string edit_id, probe, id, reference;
    RoutingDecision decision;
    std::size_t request = 0;
  };
  std::vector<Item> items;
  std::vector<BackendRequest> requests;
  std::map<std::pair<std::string, std::string>, std::size_t> memo;

  auto add = [&](const EditSample& edit, const std::string& probe, const std::string& id, const Query& q,
                 const std::string& reference) {
    Item item{edit.id, probe, id, reference, plan_query(edit, q, ctx), 0};
    const auto key = std::make_pair(q.image_ref, item.decision.prompt);
    auto [it, inserted] = memo.emplace(key, requests.size());
    if (inserted) requests.push_back({q.image_ref, item.decision.prompt});
    item.request = it->second;
    items.push_back(std::move(item));
  };
  auto qfeat = [&](const std::string& id, DemoKind kind) -> VectorXf { return questions.row(demo_key(id, kind)); };

  for (const auto& s : test.samples) {
    add(s, "rel", s.id, {s.image_ref, s.question, qfeat(s.id, DemoKind::Edit)}, s.target_answer);
    add(s, "tg", s.id, {s.image_ref, s.rephrased_question, qfeat(s.id, DemoKind::Rephrase)}, s.target_answer);
    if (s.text_locality) {
      add(s, "tl", s.id, {"", s.text_locality->question, qfeat(s.id, DemoKind::TextLocality)},
          pre.at({s.id, "text_locality"}));
    }
    if (s.mm_locality) {
      add(s, "ml", s.id,
          {s.mm_locality->image_ref, s.mm_locality->question, qfeat(s.id, DemoKind::MmLocality)},
          pre.at({s.id, "mm_locality"}));
    }
    const KgiKpiSplit split = split_kgi_kpi(bitmap, s.id, by_source[s.source]);
    for (Pool pool : {Pool::KGI, Pool::KPI}) {
      const auto& pool_ids = pool == Pool::KGI ? split.kgi : split.kpi;
      for (FeatureKind kind : {FeatureKind::Image, FeatureKind::Text}) {
        std::vector<std::string> ids = pool_ids;
        ids.push_back(s.id);  // query row; excluded from its own neighbors
        const EmbeddingMatrix& feats = kind == FeatureKind::Image ? images : text_features;
        const NeighborSet set = sample_neighbors(s.id, ids, feats, config_.k, pool, kind);
        const std::string probe =
            std::string(kind == FeatureKind::Image ? "i_" : "t_") + to_string(pool);
        for (const auto& nid : set.all()) {
          const EditSample& n = *test.find(nid);
          add(s, probe, nid, {n.image_ref, n.question, qfeat(nid, DemoKind::Edit)}, n.target_answer);
        }
      }
    }
  }

  const auto results = backend().batch_answer(requests);
  std::vector<json> decisions;
  std::vector<json> evidence;
  for (const auto& item : items) {
    const auto& result = results[item.request];
    if (!result.ok()) {
      throw BackendFailure("evaluate " + item.probe + " '" + item.id + "' under edit '" + item.edit_id +
                               "': " + result.error,
                           item.decision);
    }
    const std::string& answer = result.response->answer;
    json d;
    d["edit_id"] = item.edit_id;
    d["probe"] = item.probe;
    d["id"] = item.id;
    d["route"] = to_string(item.decision.route);
    d["sim"] = item.decision.max_m2_similarity;
    d["margin"] = item.decision.margin;
    d["prompt_len"] = item.decision.prompt.size();
    decisions.push_back(std::move(d));
    json e;
    e["edit_id"] = item.edit_id;
    e["probe"] = item.probe;
    e["id"] = item.id;
    e["route"] = to_string(item.decision.route);
    e["answer"] = answer;
    e["reference"] = item.reference;
    e["correct"] = answers_match(answer, item.reference);
    evidence.push_back(std::move(e));
  }
  const fs::path dir = stage_dir(Stage::Evaluate);
  write_jsonl(dir / "decisions.jsonl", decisions);
  write_jsonl(dir / "evidence.jsonl", evidence);
}

MetricReport Pipeline::report() {
  const Dataset test = load_manifest(stage_dir(Stage::Ingest) / "test.jsonl", Split::Test);
  const fs::path evidence_path = stage_dir(Stage::Evaluate) / "evidence.jsonl";
  const auto rows = read_jsonl(evidence_path);

  AnswerMap rel, tg;
  std::vector<LocalityProbe> tl, ml;
  std::map<std::string, std::vector<NeighborOutcome>> neighbors;
  std::size_t edited = 0;
  for (const auto& r : rows) {
    const auto probe = r.at("probe").get<std::string>();
    const auto id = r.at("id").get<std::string>();
    const auto answer = r.at("answer").get<std::string>();
    edited += r.at("route").get<std::string>() == "edited";
    if (probe == "rel") {
      rel[id] = answer;
    } else if (probe == "tg") {
      tg[id] = answer;
    } else if (probe == "tl" || probe == "ml") {
      (probe == "tl" ? tl : ml).push_back({id, r.at("reference").get<std::string>(), answer});
    } else {
      neighbors[probe].push_back({r.at("edit_id").get<std::string>(), id, r.at("correct").get<bool>()});
    }
  }

  MetricReport m;
  m.rel = reliability(rel, test);
  m.t_g = text_generality(tg, test);
  m.t_l = locality(tl);
  m.m_l = locality(ml);
  std::vector<std::string> edit_ids;
  for (const auto& s : test.samples) edit_ids.push_back(s.id);
  const std::map<std::string, double*> targets = {
      {"i_kgi", &m.i_kgi}, {"t_kgi", &m.t_kgi}, {"i_kpi", &m.i_kpi}, {"t_kpi", &m.t_kpi}};
  for (const auto& [probe, slot] : targets) {
    const IndexScore score = nested_mean(edit_ids, neighbors[probe]);
    *slot = score.value;
    m.counts[probe + "_scored_edits"] = score.scored_edits;
    m.counts[probe + "_skipped_edits"] = score.skipped_edits;
    m.counts[probe + "_probes"] = neighbors[probe].size();
  }
  m.counts["edits"] = test.size();
  m.counts["tl_probes"] = tl.size();
  m.counts["ml_probes"] = ml.size();
  m.counts["edited_routes"] = edited;

  const fs::path dir = stage_dir(Stage::Report);
  write_text(dir / "report.json", report_json(m, hash()));
  write_text(dir / "report.md", report_markdown({{"HICE", m}}));
  fs::copy_file(evidence_path, dir / "evidence.jsonl", fs::copy_options::overwrite_existing);
  return m;
}

MetricReport run_pipeline(const RunConfig& config, bool fresh) { return Pipeline(config).run(fresh); }

MetricReport load_report(const fs::path& report_json_path) {
  const json j = json::parse(read_text(report_json_path));
  const auto& metrics = j.at("metrics");
  MetricReport m;
  double* slots[8] = {&m.rel, &m.t_g, &m.t_l, &m.m_l, &m.i_kgi, &m.t_kgi, &m.i_kpi, &m.t_kpi};
  for (std::size_t i = 0; i < 8; ++i) *slots[i] = metrics.at(kMetricColumns[i]).get<double>();
  for (const auto& [key, value] : j.at("counts").items()) m.counts[key] = value.get<std::size_t>();
  return m;
}

std::size_t count_edited_routes(const fs::path& work_dir, const std::string& probe_filter) {
  std::size_t n = 0;
  for (const auto& r : read_jsonl(work_dir / "evaluate" / "decisions.jsonl")) {
    if (!probe_filter.empty() && r.at("probe").get<std::string>() != probe_filter) continue;
    n += r.at("route").get<std::string>() == "edited";
  }
  return n;
}

SweepResult threshold_sweep(const RunConfig& config, const std::vector<double>& thresholds, bool fresh) {
  if (thresholds.empty()) throw ConfigError("threshold sweep needs at least one threshold");
  std::shared_ptr<Backend> shared = make_backend(config);
  SweepResult result;
  json rows = json::array();
  std::vector<std::pair<std::string, MetricReport>> table;
  std::string edited_table = "| T | edited routes |\n|---|---:|\n";
  for (double t : thresholds) {
    RunConfig c = config;
    c.router.threshold = t;
    c.work_dir = (fs::path(config.work_dir) / ("T=" + format_threshold(t))).string();
    c.report_dir.clear();
    Pipeline p(c, shared);
    const MetricReport r = p.run(fresh);
    const std::size_t edited = count_edited_routes(c.work_dir);
    result.thresholds.push_back(t);
    result.reports.push_back(r);
    result.edited_counts.push_back(edited);
    json row;
    row["threshold"] = t;
    row["edited_routes"] = edited;
    json metrics;
    const auto values = metric_values(r);
    for (std::size_t i = 0; i < values.size(); ++i) metrics[kMetricColumns[i]] = values[i];
    row["metrics"] = metrics;
    rows.push_back(std::move(row));
    table.emplace_back(format_threshold(t), r);
    edited_table += "| " + format_threshold(t) + " | " + std::to_string(edited) + " |\n";
  }
  fs::create_directories(config.work_dir);
  json out;
  out["rows"] = rows;
  write_text(fs::path(config.work_dir) / "sweep.json", out.dump(2) + "\n");
  write_text(fs::path(config.work_dir) / "sweep.md", report_markdown(table, "T") + "\n" + edited_table);
  return result;
}

std::vector<AblationRow> ablation_rows() {
  return {
      {"baseline", false, false, false},
      {"+M1", true, false, false},
      {"+M1+Wr", true, true, false},
      {"+M1+M2", true, false, true},
      {"HICE", true, true, true},
  };
}

AblationResult ablation_matrix(const RunConfig& config, bool fresh) {
  std::shared_ptr<Backend> shared = make_backend(config);
  AblationResult result;
  std::vector<std::pair<std::string, MetricReport>> table;
  for (const auto& row : ablation_rows()) {
    RunConfig c = config;
    c.router.use_m1 = row.use_m1;
    c.router.use_projection = row.use_projection;
    c.router.use_m2 = row.use_m2;
    std::string slug = row.name;
    for (char& ch : slug) {
      if (ch == '+') ch = '_';
    }
    if (slug.front() == '_') slug.erase(0, 1);
    c.work_dir = (fs::path(config.work_dir) / slug).string();
    c.report_dir.clear();
    const MetricReport r = Pipeline(c, shared).run(fresh);
    result.rows.push_back(row);
    result.reports.push_back(r);
    table.emplace_back(row.name, r);
  }
  fs::create_directories(config.work_dir);
  write_text(fs::path(config.work_dir) / "ablation.md", report_markdown(table));
  return result;
}

}  // namespace hice
