#include <doctest.h>

#include <atomic>
#include <mutex>
#include <thread>

#include "hice/backends.hpp"
#include "support.hpp"

// After Eigen: <resolv.h> defines a `_res` macro.
#include <httplib.h>
#include <json.hpp>

using namespace hice;
using nlohmann::json;

namespace {

ScriptedBehavior behavior() {
  ScriptedBehavior b;
  b.add("img1.jpg", "What bird is this?", "sparrow");
  b.add("img2.jpg", "What is the color of the car?", "blue");
  b.add("", "Who wrote Emma?", "austen");
  b.add_alias("Which bird is shown?", "What bird is this?");
  return b;
}

// Deterministic backend that also exercises the thread pool.
class EchoBackend : public Backend {
 public:
  std::string answer(const std::string& image_ref, const std::string& prompt) override {
    if (prompt == "fail") throw TransportError("boom");
    ++calls;
    return image_ref + "|" + std::to_string(prompt.size());
  }
  std::size_t max_concurrency() const override { return 4; }
  std::atomic<int> calls{0};
};

// Wire-protocol server in the same process; records request bodies.
class FakeServer {
 public:
  FakeServer() {
    server_.Post("/v1/answer", [this](const httplib::Request& req, httplib::Response& res) {
      record(req);
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::exception&) {
        return reply(res, 400, {{"error", "malformed JSON"}});
      }
      if (!body.contains("image") || !body.contains("prompt") || !body["prompt"].is_string()) {
        return reply(res, 400, {{"error", "missing image or prompt"}});
      }
      const std::string prompt = body["prompt"];
      if (prompt == "bad-shape") return reply(res, 200, {{"text", "oops"}});
      if (prompt == "crash") return reply(res, 500, {{"error", "model crashed"}});
      reply(res, 200, {{"answer", "echo:" + body["image"].get<std::string>() + ":" + prompt}});
    });
    auto embed = [this](const char* field) {
      return [this, field](const httplib::Request& req, httplib::Response& res) {
        record(req);
        json body;
        try {
          body = json::parse(req.body);
        } catch (const json::exception&) {
          return reply(res, 400, {{"error", "malformed JSON"}});
        }
        if (!body.contains(field) || !body[field].is_array() || body[field].empty()) {
          return reply(res, 400, {{"error", std::string("missing ") + field}});
        }
        json vectors = json::array();
        for (const auto& item : body[field]) {
          const std::string s = item.get<std::string>();
          if (s == "short") {
            vectors.push_back({1.0});
          } else {
            vectors.push_back({double(s.size()), 0.5, -1.0});
          }
        }
        if (body[field][0] == "drop") vectors.erase(vectors.begin());
        reply(res, 200, {{"dim", 3}, {"vectors", vectors}});
      };
    };
    server_.Post("/v1/embed_text", embed("texts"));
    server_.Post("/v1/embed_image", embed("images"));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  WireEndpoint endpoint() const {
    WireEndpoint ep;
    ep.host = "127.0.0.1";
    ep.port = port_;
    ep.timeout_s = 5;
    return ep;
  }
  std::vector<std::pair<std::string, json>> requests() {
    std::lock_guard<std::mutex> lock(mu_);
    return requests_;
  }

 private:
  void record(const httplib::Request& req) {
    std::lock_guard<std::mutex> lock(mu_);
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      body = req.body;
    }
    requests_.emplace_back(req.path, body);
  }
  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::mutex mu_;
  std::vector<std::pair<std::string, json>> requests_;
};

}  // namespace

TEST_CASE("scripted backend rules") {
  ScriptedBackend backend(behavior());
  CHECK(backend.answer("img1.jpg", "What bird is this?") == "sparrow");
  CHECK(backend.answer("img1.jpg", "  what bird is THIS ") == "sparrow");
  CHECK(backend.answer("img9.jpg", "What bird is this?") == "unknown");
  CHECK(backend.answer("img1.jpg", "New Fact: Q2 parrot\nPrompt: Q2 parrot\nQ2") == "parrot");
  // The closest (last) fact wins.
  CHECK(backend.answer("img1.jpg", "New Fact: Q2 crow\nPrompt: Q2 crow\nNew Fact: Q2 parrot\nPrompt: Q2 parrot\nQ2") ==
        "parrot");
  // Multi-word answers and questions.
  CHECK(backend.answer("x", "New Fact: What is it? a red car\nPrompt: What is it? a red car\nWhat is it?") ==
        "a red car");
}

TEST_CASE("aliases need context, distraction needs a fact") {
  ScriptedBehavior b = behavior();
  b.distraction = "not sure";
  ScriptedBackend backend(b);
  const std::string s_o = "New Fact: What bird is this? robin\nPrompt: What bird is this? robin\n";
  const std::string ctx = "New Fact: What is in the bowl? soup\nPrompt: What is in the bowl? soup\n";
  CHECK(backend.answer("img1.jpg", s_o + "Which bird is shown?") == "not sure");
  CHECK(backend.answer("img1.jpg", ctx + s_o + "Which bird is shown?") == "robin");
  CHECK(backend.answer("", s_o + "Who wrote Emma?") == "not sure");
  CHECK(backend.answer("", "Who wrote Emma?") == "austen");

  b.distraction.reset();
  ScriptedBackend plain(b);
  CHECK(plain.answer("", s_o + "Who wrote Emma?") == "austen");
  b.fact_sensitivity = false;
  ScriptedBackend insensitive(b);
  CHECK(insensitive.answer("img1.jpg", s_o + "What bird is this?") == "sparrow");
}

TEST_CASE("prompt parsing helpers") {
  const ParsedPrompt p = parse_prompt("New Fact: a b\nPrompt: a b\nfinal q");
  CHECK(p.facts == std::vector<std::string>{"a b"});
  CHECK(p.final_question == "final q");
  CHECK(match_fact("How many dogs? 3", "how many dogs") == std::optional<std::string>("3"));
  CHECK_FALSE(match_fact("How many dogs? 3", "How many cats?"));
}

TEST_CASE("scripted behavior file round-trips") {
  testing::TempDir dir("scripted");
  ScriptedBehavior b = behavior();
  b.distraction = "hmm";
  save_scripted_behavior(b, (dir / "s.json").string());
  const ScriptedBehavior back = load_scripted_behavior((dir / "s.json").string());
  CHECK(back.base_table == b.base_table);
  CHECK(back.aliases == b.aliases);
  CHECK(back.distraction == b.distraction);
  CHECK(back.fact_sensitivity);
}

TEST_CASE("batch_answer") {
  EchoBackend backend;
  CHECK(backend.batch_answer({}).empty());

  const auto three = backend.batch_answer({{"a", "x"}, {"b", "yy"}, {"c", "zzz"}});
  REQUIRE(three.size() == 3);
  CHECK(three[0].response->answer == "a|1");
  CHECK(three[2].response->answer == "c|3");

  std::vector<BackendRequest> reqs;
  for (int i = 0; i < 50; ++i) reqs.push_back({"img" + std::to_string(i % 7), std::string(i + 1, 'q')});
  reqs[17].prompt = "fail";
  const auto batch = backend.batch_answer(reqs);
  REQUIRE(batch.size() == 50);
  for (int i = 0; i < 50; ++i) {
    if (i == 17) {
      CHECK_FALSE(batch[i].ok());
      CHECK(batch[i].error == "boom");
      continue;
    }
    REQUIRE(batch[i].ok());
    CHECK(batch[i].response->answer == backend.answer(reqs[i].image_ref, reqs[i].prompt));
  }

  ScriptedBackend scripted(behavior());
  std::vector<BackendRequest> sreqs;
  for (int i = 0; i < 50; ++i) {
    sreqs.push_back(i % 2 ? BackendRequest{"img1.jpg", "What bird is this?"}
                          : BackendRequest{"", "New Fact: q" + std::to_string(i) + " a\nPrompt: x\nq" + std::to_string(i)});
  }
  const auto sbatch = scripted.batch_answer(sreqs);
  for (int i = 0; i < 50; ++i) CHECK(sbatch[i].response->answer == scripted.answer(sreqs[i].image_ref, sreqs[i].prompt));
}

TEST_CASE("wire endpoint parsing") {
  const WireEndpoint ep = WireEndpoint::parse("http://10.0.0.2:9000/");
  CHECK(ep.host == "10.0.0.2");
  CHECK(ep.port == 9000);
  CHECK(WireEndpoint::parse("localhost").port == 80);
  CHECK_THROWS_AS(WireEndpoint::parse("https://x:1"), ValidationError);
  CHECK_THROWS_AS(WireEndpoint::parse("http://x:abc"), ValidationError);
}

TEST_CASE("wire transcript: answer") {
  FakeServer server;
  WireBackend backend(server.endpoint(), 2);
  CHECK(backend.answer("img.jpg", "What is it?") == "echo:img.jpg:What is it?");
  const auto reqs = server.requests();
  REQUIRE(reqs.size() == 1);
  CHECK(reqs[0].first == "/v1/answer");
  CHECK(reqs[0].second == json{{"image", "img.jpg"}, {"prompt", "What is it?"}});

  CHECK_THROWS_WITH_AS(backend.answer("img.jpg", "crash"), doctest::Contains("model crashed"), TransportError);
  CHECK_THROWS_AS(backend.answer("img.jpg", "bad-shape"), TransportError);

  const auto batch = backend.batch_answer({{"a", "1"}, {"b", "crash"}, {"c", "3"}});
  CHECK(batch[0].response->answer == "echo:a:1");
  CHECK_FALSE(batch[1].ok());
  CHECK(batch[2].response->answer == "echo:c:3");
}

TEST_CASE("wire transcript: invalid bodies get 400 with an error field") {
  FakeServer server;
  const WireEndpoint ep = server.endpoint();
  httplib::Client client(ep.host, ep.port);
  for (const char* path : {"/v1/answer", "/v1/embed_text", "/v1/embed_image"}) {
    auto res = client.Post(path, "{not json", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    CHECK(json::parse(res->body).contains("error"));
    res = client.Post(path, "{}", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
  }
}

TEST_CASE("wire transcript: embeddings") {
  FakeServer server;
  WireBackend backend(server.endpoint());
  const MatrixXf t = backend.embed_texts({"ab", "abcd"});
  REQUIRE(t.rows() == 2);
  REQUIRE(t.cols() == 3);
  CHECK(t(0, 0) == 2.0f);
  CHECK(t(1, 0) == 4.0f);
  CHECK(t(1, 2) == -1.0f);
  const MatrixXf im = backend.embed_images({"a.jpg"});
  CHECK(im.rows() == 1);
  const auto reqs = server.requests();
  CHECK(reqs[0].first == "/v1/embed_text");
  CHECK(reqs[0].second == json{{"texts", {"ab", "abcd"}}});
  CHECK(reqs[1].first == "/v1/embed_image");
  CHECK(reqs[1].second == json{{"images", {"a.jpg"}}});

  CHECK_THROWS_AS(backend.embed_texts({"ok", "short"}), TransportError);
  CHECK_THROWS_AS(backend.embed_texts({"drop", "x"}), TransportError);
  CHECK_THROWS_WITH_AS(backend.embed_texts({}), doctest::Contains("missing texts"), TransportError);
}

TEST_CASE("wire transport failure") {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  WireEndpoint ep;
  ep.host = "127.0.0.1";
  ep.port = port;
  ep.timeout_s = 2;
  WireBackend backend(ep);
  CHECK_THROWS_AS(backend.answer("x", "y"), TransportError);
}
