#include <doctest.h>

#include <cmath>
#include <mutex>

#include "hice/backends.hpp"
#include "hice/router.hpp"
#include "support.hpp"

using namespace hice;

namespace {

// score_in = x0, score_out = x1.
ClassifierModel axis_model(Eigen::Index d = 3) {
  MatrixXf w = MatrixXf::Zero(d, 2);
  w(0, 0) = 1.0f;
  w(1, 1) = 1.0f;
  return ClassifierModel(MatrixXf::Identity(d, d), w, 1.0, 0, 1.0, false);
}

VectorXf vec(std::initializer_list<float> v) {
  VectorXf out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (float x : v) out(i++) = x;
  return out;
}

MemoryM2 m2_with(const std::vector<VectorXf>& features) {
  MemoryM2 m2;
  for (std::size_t i = 0; i < features.size(); ++i) {
    m2.entries.push_back({"e" + std::to_string(i), "q" + std::to_string(i), features[i], 1.0});
  }
  return m2;
}

Demonstration edit_demo(const std::string& id, const std::string& q, const std::string& a) {
  return {render_demonstration(q, a), DemoKind::Edit, ScopeLabel::InDomain, id, q};
}

EditSample edit_sample() {
  EditSample s;
  s.id = "s";
  s.image_ref = "img.jpg";
  s.question = "What is on the plate?";
  s.target_answer = "pizza";
  s.rephrased_question = "Which food is on the plate?";
  return s;
}

class RecordingBackend : public Backend {
 public:
  std::string answer(const std::string& image_ref, const std::string& prompt) override {
    std::lock_guard<std::mutex> lock(mu_);
    images.push_back(image_ref);
    prompts.push_back(prompt);
    return "ok";
  }
  std::vector<std::string> images;
  std::vector<std::string> prompts;

 private:
  std::mutex mu_;
};

class FailingBackend : public Backend {
 public:
  std::string answer(const std::string&, const std::string&) override { throw TransportError("down"); }
};

}  // namespace

TEST_CASE("max similarity to M2") {
  const VectorXf q = vec({1, 2, 3});
  CHECK(max_similarity_to_m2(q, MemoryM2{}) == kEmptyM2Similarity);
  CHECK(max_similarity_to_m2(q, m2_with({vec({0, 1, 0}), q})) == doctest::Approx(1.0));

  std::mt19937_64 gen(99);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<VectorXf> entries;
    for (int i = 0; i < 10; ++i) entries.push_back(testing::gaussian<float>(gen, 1, 3).transpose());
    const VectorXf query = testing::gaussian<float>(gen, 1, 3).transpose();
    double best = -2.0;
    for (const auto& e : entries) {
      double dot = 0, na = 0, nb = 0;
      for (int k = 0; k < 3; ++k) {
        dot += double(query(k)) * e(k);
        na += double(query(k)) * query(k);
        nb += double(e(k)) * e(k);
      }
      best = std::max(best, dot / std::sqrt(na * nb));
    }
    CHECK(max_similarity_to_m2(query, m2_with(entries)) == doctest::Approx(best).epsilon(1e-9));
  }
  CHECK(max_similarity_to_m2(q, m2_with({vec({1, 2, 5})}), Metric::L2) == doctest::Approx(-2.0));
}

TEST_CASE("gate decisions") {
  const ClassifierModel model = axis_model();
  RouterConfig config;
  config.threshold = 0.80;

  // cos((1,0,0),(0.95,√(1−0.95²),0)) = 0.95 > T → original regardless of classifier.
  const MemoryM2 near = m2_with({vec({0.95f, std::sqrt(1.0f - 0.95f * 0.95f), 0})});
  const VectorXf in_domain = vec({1, 0, 0});
  RoutingDecision d = route("q?", in_domain, model, near, config);
  CHECK(d.max_m2_similarity == doctest::Approx(0.95).epsilon(1e-6));
  CHECK(d.classifier_label == ScopeLabel::InDomain);
  CHECK(d.route == Route::Original);
  CHECK(d.prompt == "q?");

  // cos = 0.10 ≤ T and in-domain → edited.
  const MemoryM2 far = m2_with({vec({0.1f, 0, std::sqrt(1.0f - 0.01f)})});
  d = route("q?", in_domain, model, far, config);
  CHECK(d.max_m2_similarity == doctest::Approx(0.10).epsilon(1e-6));
  CHECK(d.route == Route::Edited);

  // Out-of-domain classifier → original even with the gate open.
  d = route("q?", vec({0, 1, 0.5f}), model, MemoryM2{}, config);
  CHECK(d.classifier_label == ScopeLabel::OutOfDomain);
  CHECK(d.route == Route::Original);

  // Disabled M2 ignores similarity.
  config.use_m2 = false;
  d = route("q?", in_domain, model, near, config);
  CHECK(d.route == Route::Edited);
  CHECK(d.max_m2_similarity == kEmptyM2Similarity);

  // Boundary: similarity equal to T still routes edited.
  config.use_m2 = true;
  config.threshold = 1.0;
  d = route("q?", in_domain, model, m2_with({in_domain}), config);
  CHECK(d.route == Route::Edited);
}

TEST_CASE("edited count is non-decreasing in T") {
  const ClassifierModel model = axis_model(4);
  std::mt19937_64 gen(5);
  std::vector<VectorXf> entries;
  for (int i = 0; i < 6; ++i) entries.push_back(testing::gaussian<float>(gen, 1, 4).transpose());
  const MemoryM2 m2 = m2_with(entries);
  std::vector<VectorXf> queries;
  for (int i = 0; i < 200; ++i) queries.push_back(testing::gaussian<float>(gen, 1, 4).transpose());
  std::size_t previous = 0;
  for (double t : {0.75, 0.80, 0.85, 0.90}) {
    RouterConfig config;
    config.threshold = t;
    std::size_t edited = 0;
    for (const auto& q : queries) edited += route("q", q, model, m2, config).route == Route::Edited;
    CHECK(edited >= previous);
    previous = edited;
  }
  CHECK(previous > 0);
}

TEST_CASE("compose_prompt layout") {
  CHECK(compose_prompt("q", "a", "q", {}) == "New Fact: q a\nPrompt: q a\nq");
  const std::vector<Demonstration> ctx = {edit_demo("d1", "q1", "a1"), edit_demo("d2", "q2", "a2")};
  CHECK(compose_prompt("q", "a", "q", ctx) ==
        "New Fact: q1 a1\nPrompt: q1 a1\nNew Fact: q2 a2\nPrompt: q2 a2\nNew Fact: q a\nPrompt: q a\nq");
  // s_o stays the edit pair when the incoming question is a rephrase.
  CHECK(compose_prompt("What is it?", "cat", "Name the animal?", {}) ==
        "New Fact: What is it? cat\nPrompt: What is it? cat\nName the animal?");
}

TEST_CASE("retrieval order follows similarity") {
  MemoryM1 m1;
  m1.entries.push_back({edit_demo("far", "qf", "af"), vec({10, 0, 0})});
  m1.entries.push_back({edit_demo("near", "qn", "an"), vec({1, 0, 0})});
  m1.entries.push_back({edit_demo("mid", "qm", "am"), vec({4, 0, 0})});
  const VectorXf q = vec({0, 0, 0});
  RouterConfig config;
  config.k0 = 2;
  auto ctx = retrieve_context(q, m1, config);
  REQUIRE(ctx.size() == 2);
  CHECK(ctx[0].source_id == "mid");
  CHECK(ctx[1].source_id == "near");  // most similar sits next to s_o
  config.most_similar_first = true;
  ctx = retrieve_context(q, m1, config);
  CHECK(ctx[0].source_id == "near");
  CHECK(ctx[1].source_id == "mid");
  config.k0 = 16;
  CHECK(retrieve_context(q, m1, config).size() == 3);
  config.k0 = 0;
  CHECK(retrieve_context(q, m1, config).empty());
}

TEST_CASE("edit_infer sends the composed prompt") {
  const ClassifierModel model = axis_model();
  MemoryM1 m1;
  m1.entries.push_back({edit_demo("t1", "What is in the bowl?", "soup"), vec({1, 0, 1})});
  const MemoryM2 m2;
  RouterConfig config;
  const EditContext ctx{model, m1, m2, config};
  const EditSample s = edit_sample();

  SUBCASE("original route passes the raw question") {
    RecordingBackend backend;
    const auto r = edit_infer(s, {"other.jpg", "Who painted this?", vec({0, 1, 0})}, backend, ctx);
    CHECK(r.decision.route == Route::Original);
    REQUIRE(backend.prompts.size() == 1);
    CHECK(backend.prompts[0] == "Who painted this?");
    CHECK(backend.images[0] == "other.jpg");
  }
  SUBCASE("edited route uses all of a small M1") {
    RecordingBackend backend;
    const auto r = edit_infer(s, {s.image_ref, s.question, vec({1, 0, 0})}, backend, ctx);
    CHECK(r.decision.route == Route::Edited);
    CHECK(backend.prompts[0] ==
          "New Fact: What is in the bowl? soup\nPrompt: What is in the bowl? soup\n"
          "New Fact: What is on the plate? pizza\nPrompt: What is on the plate? pizza\nWhat is on the plate?");
  }
  SUBCASE("M1 disabled drops the context") {
    RouterConfig no_m1;
    no_m1.use_m1 = false;
    const EditContext bare{model, m1, m2, no_m1};
    RecordingBackend backend;
    edit_infer(s, {s.image_ref, s.question, vec({1, 0, 0})}, backend, bare);
    CHECK(backend.prompts[0] == "New Fact: What is on the plate? pizza\nPrompt: What is on the plate? pizza\nWhat is on the plate?");
  }
  SUBCASE("scripted backend answers with the edited fact") {
    ScriptedBehavior b;
    b.add(s.image_ref, s.question, "pasta");
    ScriptedBackend backend(b);
    CHECK(edit_infer(s, {s.image_ref, s.question, vec({1, 0, 0})}, backend, ctx).answer == "pizza");
    CHECK(edit_infer(s, {s.image_ref, s.question, vec({0, 1, 0})}, backend, ctx).answer == "pasta");
  }
  SUBCASE("backend failures keep the routing decision") {
    FailingBackend backend;
    try {
      edit_infer(s, {s.image_ref, s.question, vec({1, 0, 0})}, backend, ctx);
      FAIL("expected BackendFailure");
    } catch (const BackendFailure& e) {
      CHECK(e.decision().route == Route::Edited);
      CHECK(std::string(e.what()).find("down") != std::string::npos);
    }
  }
}
