#include <doctest.h>

#include <set>
#include <thread>

#include "hice/pipeline.hpp"
#include "support.hpp"

// After Eigen: <resolv.h> defines a `_res` macro.
#include <httplib.h>
#include <json.hpp>

using namespace hice;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

FixtureFiles write_fixture(const fs::path& dir, FixtureProfile profile = FixtureProfile::Separable) {
  FixtureOptions options;
  options.profile = profile;
  return write_fixture_bundle(make_fixture_bundle(options), dir);
}

std::vector<json> read_lines(const fs::path& path) {
  std::vector<json> out;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

// Deterministic text/image embedder on the wire protocol.
class EmbedServer {
 public:
  EmbedServer() {
    auto handler = [this](const char* field) {
      return [this, field](const httplib::Request& req, httplib::Response& res) {
        const json body = json::parse(req.body);
        json vectors = json::array();
        for (const auto& item : body.at(field)) {
          vectors.push_back(vector_for(item.get<std::string>()));
          ++served;
        }
        res.set_content(json{{"dim", kDim}, {"vectors", vectors}}.dump(), "application/json");
      };
    };
    server_.Post("/v1/embed_text", handler("texts"));
    server_.Post("/v1/embed_image", handler("images"));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~EmbedServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  static std::vector<float> vector_for(const std::string& text) {
    std::uint64_t h = fnv1a64(text);
    std::vector<float> v(kDim);
    for (auto& x : v) {
      x = static_cast<float>(h % 1000) / 1000.0f - 0.5f;
      h = h * 6364136223846793005ULL + 1442695040888963407ULL;
    }
    return v;
  }

  static constexpr int kDim = 8;
  std::atomic<int> served{0};

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("config JSON round-trips and rejects unknown keys") {
  RunConfig c = default_config();
  c.train_manifest = "/t/train.jsonl";
  c.router.threshold = 0.85;
  c.router.k0 = 3;
  c.m2_budget = 12;
  c.m1_rule = ExemplarRule::SeededRandom;
  c.lambda_grid = {0.1, 1.0};
  c.seed = 99;
  const std::string text = config_to_json(c);
  const RunConfig back = config_from_json(text);
  CHECK(config_to_json(back) == text);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(back.router.threshold == 0.85);
  CHECK(*back.m2_budget == 12);
  CHECK(*back.seed == 99);

  json j = json::parse(text);
  j["thresold"] = 0.9;
  CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
  j = json::parse(text);
  j["ratio"] = 0.0;
  CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);

  // Paths and concurrency do not move the hash.
  RunConfig moved = c;
  moved.work_dir = "/elsewhere";
  moved.max_in_flight = 1;
  CHECK(config_hash(moved) == config_hash(c));
  moved.router.threshold = 0.9;
  CHECK(config_hash(moved) != config_hash(c));
}

TEST_CASE("defaults") {
  const RunConfig c = default_config();
  CHECK(c.projected_dim == 10000);
  CHECK(c.router.k0 == 16);
  CHECK(c.k == 4);
  CHECK(c.ratio == 0.05);
  CHECK(c.lambda_grid.size() == 9);
  CHECK(c.split_fraction == 0.8);
  CHECK_FALSE(c.seed);
}

TEST_CASE("relative paths in a config file resolve against its directory") {
  testing::TempDir dir("cfg");
  fs::create_directories(dir / "sub");
  RunConfig c = default_config();
  c.train_manifest = "train.jsonl";
  c.backend = "scripted:s.json";
  c.work_dir = "work";
  std::ofstream(dir / "sub" / "run.json") << config_to_json(c);
  const RunConfig loaded = load_config(dir / "sub" / "run.json");
  CHECK(fs::path(loaded.train_manifest) == dir / "sub" / "train.jsonl");
  CHECK(loaded.backend == "scripted:" + (dir / "sub" / "s.json").string());
  CHECK(fs::path(loaded.work_dir) == dir / "sub" / "work");
}

TEST_CASE("separable fixture run and byte-identical rerun") {
  testing::TempDir dir("run");
  const FixtureFiles files = write_fixture(dir.path());
  const RunConfig c = testing::fixture_config(files, dir / "work1");
  const MetricReport r = run_pipeline(c);
  CHECK(r.rel == 1.0);
  CHECK(r.t_g == 1.0);
  CHECK(r.t_l == 1.0);
  CHECK(r.m_l == 1.0);
  CHECK(r.counts.at("edits") == 20);
  CHECK(r.counts.at("tl_probes") == 10);
  CHECK(r.counts.at("ml_probes") == 10);

  RunConfig c2 = c;
  c2.work_dir = (dir / "work2").string();
  run_pipeline(c2);
  for (const char* f : {"report/report.json", "report/report.md", "evaluate/decisions.jsonl",
                        "fit-classifier/model.hcl", "build-memory/m2.jsonl"}) {
    CHECK_MESSAGE(testing::slurp(dir / "work1" / f) == testing::slurp(dir / "work2" / f), f);
  }

  const MetricReport loaded = load_report(c.report_path());
  CHECK(loaded.rel == r.rel);
  CHECK(loaded.i_kpi == r.i_kpi);

  std::size_t edited = 0;
  for (const auto& row : read_lines(dir / "work1" / "evaluate" / "decisions.jsonl")) {
    edited += row["route"] == "edited";
  }
  CHECK(count_edited_routes(dir / "work1") == edited);
  CHECK(count_edited_routes(dir / "work1", "rel") == 20);
}

TEST_CASE("stage stamps") {
  testing::TempDir dir("stamps");
  const FixtureFiles files = write_fixture(dir.path());
  RunConfig c = testing::fixture_config(files, dir / "work");
  Pipeline(c).run_until(Stage::FitClassifier);
  const fs::path model = dir / "work" / "fit-classifier" / "model.hcl";
  const auto first = fs::last_write_time(model);

  // A router change leaves the classifier stage current.
  RunConfig router_only = c;
  router_only.router.threshold = 0.5;
  Pipeline(router_only).run_until(Stage::FitClassifier);
  CHECK(fs::last_write_time(model) == first);

  RunConfig changed = c;
  changed.projected_dim = 256;
  CHECK_THROWS_AS(Pipeline(changed).run_until(Stage::FitClassifier), ConfigError);
  Pipeline(changed).run_until(Stage::FitClassifier, true);
  CHECK(ClassifierModel::load(model).projected_dim() == 256);
  // The earlier stage was not touched, and the new stamp holds.
  Pipeline(changed).run_until(Stage::FitClassifier);
}

TEST_CASE("seed is required for fitting") {
  testing::TempDir dir("seed");
  const FixtureFiles files = write_fixture(dir.path());
  RunConfig c = testing::fixture_config(files, dir / "work");
  c.seed.reset();
  Pipeline p(c);
  p.run_until(Stage::BaselineEval);
  CHECK_THROWS(p.run_until(Stage::FitClassifier));
}

TEST_CASE("missing embeddings need an embed_url") {
  testing::TempDir dir("noemb");
  const FixtureFiles files = write_fixture(dir.path());
  RunConfig c = testing::fixture_config(files, dir / "work");
  c.image_embeddings = (dir / "absent.emb").string();
  CHECK_THROWS_AS(Pipeline(c).run_until(Stage::Ingest), ConfigError);
}

TEST_CASE("ingest fetches embeddings over the wire") {
  testing::TempDir dir("wire");
  const FixtureFiles files = write_fixture(dir.path());
  EmbedServer server;
  RunConfig c = testing::fixture_config(files, dir / "work");
  c.demo_embeddings.clear();
  c.question_embeddings.clear();
  c.image_embeddings.clear();
  c.embed_url = server.url();
  Pipeline(c).run_until(Stage::Ingest);

  const Dataset test = load_manifest(files.test_manifest);
  const EmbeddingMatrix images = read_embeddings(dir / "work" / "ingest" / "images.emb");
  CHECK(images.dim() == EmbedServer::kDim);
  const auto expected = EmbedServer::vector_for(test.samples[0].image_ref);
  const auto row = images.row(test.samples[0].id);
  for (int i = 0; i < EmbedServer::kDim; ++i) CHECK(row(i) == expected[static_cast<std::size_t>(i)]);

  const EmbeddingMatrix questions = read_embeddings(dir / "work" / "ingest" / "questions.emb");
  const auto q = questions.row(test.samples[0].id + ":edit");
  CHECK(q(0) == EmbedServer::vector_for(test.samples[0].question)[0]);
  CHECK(server.served > 0);
}

TEST_CASE("threshold sweep and ablation layout") {
  testing::TempDir dir("sweep");
  const FixtureFiles files = write_fixture(dir.path(), FixtureProfile::Graded);
  const RunConfig c = testing::fixture_config(files, dir / "work");
  const SweepResult sweep = threshold_sweep(c, {0.75, 0.90});
  REQUIRE(sweep.reports.size() == 2);
  CHECK(sweep.edited_counts[0] <= sweep.edited_counts[1]);
  CHECK(fs::exists(dir / "work" / "T=0.75" / "report" / "report.json"));
  const json sj = json::parse(testing::slurp(dir / "work" / "sweep.json"));
  REQUIRE(sj["rows"].size() == 2);
  CHECK(sj["rows"][1]["threshold"] == 0.9);
  CHECK(sj["rows"][1]["edited_routes"] == sweep.edited_counts[1]);
  CHECK(fs::exists(dir / "work" / "sweep.md"));

  const auto rows = ablation_rows();
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].name == "baseline");
  CHECK((!rows[0].use_m1 && !rows[0].use_projection && !rows[0].use_m2));
  CHECK((rows[4].use_m1 && rows[4].use_projection && rows[4].use_m2));
  CHECK((rows[2].use_projection && !rows[2].use_m2));
  CHECK((!rows[3].use_projection && rows[3].use_m2));
}
