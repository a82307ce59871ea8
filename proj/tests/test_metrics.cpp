#include <doctest.h>

#include <algorithm>
#include <set>

#include <json.hpp>

#include "hice/metrics.hpp"
#include "support.hpp"

using namespace hice;

namespace {

Dataset dataset(std::size_t n) {
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    EditSample s;
    s.id = "s" + std::to_string(i);
    s.image_ref = s.id + ".jpg";
    s.question = "q" + std::to_string(i) + "?";
    s.target_answer = "ans" + std::to_string(i);
    s.rephrased_question = "r" + std::to_string(i) + "?";
    d.samples.push_back(s);
  }
  return d;
}

EmbeddingMatrix line_features(const std::vector<std::pair<std::string, float>>& points) {
  std::vector<std::string> ids;
  MatrixXf rows(static_cast<Eigen::Index>(points.size()), 1);
  for (std::size_t i = 0; i < points.size(); ++i) {
    ids.push_back(points[i].first);
    rows(static_cast<Eigen::Index>(i), 0) = points[i].second;
  }
  return EmbeddingMatrix(ids, rows);
}

}  // namespace

TEST_CASE("answer normalization") {
  CHECK(normalize_answer(" Parrot. ") == "parrot");
  CHECK(normalize_answer("a   red\t car!") == "a red car");
  CHECK(normalize_answer("") == "");
  CHECK(answers_match("TRUE", "yes"));
  CHECK(answers_match("no", "False"));
  CHECK_FALSE(answers_match("yes", "no"));
  CHECK_FALSE(answers_match("true", "truth"));
  CHECK(answers_match("Two Dogs.", "two  dogs"));
}

TEST_CASE("reliability and generality") {
  const Dataset d = dataset(5);
  AnswerMap a;
  for (std::size_t i = 0; i < 5; ++i) a["s" + std::to_string(i)] = i < 3 ? "ANS" + std::to_string(i) + "." : "wrong";
  CHECK(reliability(a, d) == doctest::Approx(0.6));

  const Dataset d4 = dataset(4);
  AnswerMap r = {{"s0", "ans0"}, {"s1", "x"}, {"s2", "y"}, {"s3", "z"}};
  CHECK(text_generality(r, d4) == doctest::Approx(0.25));

  CHECK_THROWS_AS(reliability({}, Dataset{}), ValidationError);
  CHECK_THROWS_AS(reliability({{"s0", "ans0"}}, dataset(2)), ValidationError);
  Dataset no_rephrase = dataset(1);
  no_rephrase.samples[0].rephrased_question.clear();
  CHECK_THROWS_AS(text_generality({{"s0", "ans0"}}, no_rephrase), ValidationError);
}

TEST_CASE("locality is output consistency") {
  std::vector<LocalityProbe> probes;
  for (int i = 0; i < 10; ++i) probes.push_back({"p" + std::to_string(i), "same", i < 2 ? "changed" : "Same."});
  CHECK(locality(probes) == doctest::Approx(0.8));
  // A wrong answer that does not change still counts.
  CHECK(locality({{"p", "i do not know", "i do not know"}}) == 1.0);
  CHECK_THROWS_AS(locality({}), ValidationError);
}

TEST_CASE("KGI/KPI split") {
  const BaselineBitmap bitmap = {{"a", {"x", false}}, {"b", {"y", true}}, {"s", {"z", false}}};
  const KgiKpiSplit split = split_kgi_kpi(bitmap, "s", {"a", "b", "s"});
  CHECK(split.kgi == std::vector<std::string>{"a"});
  CHECK(split.kpi == std::vector<std::string>{"b"});
  CHECK_THROWS_AS(split_kgi_kpi(bitmap, "s", {"missing"}), ValidationError);

  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 50; ++trial) {
    BaselineBitmap bits;
    std::vector<std::string> pool;
    for (int i = 0; i < 30; ++i) {
      const std::string id = "n" + std::to_string(i);
      bits[id] = {"", static_cast<bool>(gen() & 1)};
      pool.push_back(id);
    }
    const std::string edit = pool[gen() % pool.size()];
    const KgiKpiSplit sp = split_kgi_kpi(bits, edit, pool);
    std::vector<std::string> kgi, kpi;
    for (const auto& id : pool) {
      if (id == edit) continue;
      (bits[id].correct ? kpi : kgi).push_back(id);
    }
    CHECK(sp.kgi == kgi);
    CHECK(sp.kpi == kpi);
  }
}

TEST_CASE("neighbor sampling on a line") {
  const EmbeddingMatrix f = line_features({{"e", 0}, {"a", 1}, {"b", 2}, {"c", 9}, {"d", 10}});
  NeighborSet set = sample_neighbors("e", {"a", "b", "c", "d", "e"}, f, 1, Pool::KGI, FeatureKind::Image);
  CHECK(set.near_ids == std::vector<std::string>{"a"});
  CHECK(set.far_ids == std::vector<std::string>{"d"});
  CHECK(set.all().size() == 2);

  set = sample_neighbors("e", {"a", "e"}, f, 4, Pool::KPI, FeatureKind::Text);
  CHECK(set.near_ids == std::vector<std::string>{"a"});
  CHECK(set.far_ids.empty());
  CHECK(set.pool == Pool::KPI);
  CHECK(sample_neighbors("e", {"e"}, f, 4, Pool::KGI, FeatureKind::Image).empty());
  CHECK_THROWS_AS(sample_neighbors("e", {"a"}, f, 0, Pool::KGI, FeatureKind::Image), ValidationError);
}

TEST_CASE("neighbor sampling matches an exhaustive sort") {
  std::mt19937_64 gen(23);
  for (int trial = 0; trial < 20; ++trial) {
    const MatrixXf rows = testing::gaussian<float>(gen, 40, 3);
    std::vector<std::string> ids;
    for (int i = 0; i < 40; ++i) ids.push_back("p" + std::to_string(i));
    const EmbeddingMatrix f(ids, rows);
    const std::string edit = ids[trial];

    std::vector<std::pair<double, std::string>> by_dist;
    for (int i = 0; i < 40; ++i) {
      if (ids[i] == edit) continue;
      double d = 0;
      for (int c = 0; c < 3; ++c) {
        const double diff = double(rows(i, c)) - rows(trial, c);
        d += diff * diff;
      }
      by_dist.emplace_back(d, ids[i]);
    }
    std::sort(by_dist.begin(), by_dist.end());
    const NeighborSet set = sample_neighbors(edit, ids, f, 4, Pool::KGI, FeatureKind::Image);
    REQUIRE(set.near_ids.size() == 4);
    REQUIRE(set.far_ids.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(set.near_ids[i] == by_dist[i].second);
      CHECK(std::count(set.far_ids.begin(), set.far_ids.end(), by_dist[by_dist.size() - 1 - i].second) == 1);
    }
  }
}

TEST_CASE("nested mean") {
  const std::vector<NeighborOutcome> outcomes = {
      {"e1", "a", true}, {"e1", "b", false}, {"e2", "c", true}, {"e2", "d", true}};
  const IndexScore s = nested_mean({"e1", "e2", "e3"}, outcomes);
  CHECK(s.value == doctest::Approx(0.75));
  CHECK(s.scored_edits == 2);
  CHECK(s.skipped_edits == 1);
  // Unweighted across edits: 1 of 1 and 0 of 3 give 0.5, not 0.25.
  const IndexScore w = nested_mean({"x", "y"}, {{"x", "a", true}, {"y", "b", false}, {"y", "c", false}, {"y", "d", false}});
  CHECK(w.value == doctest::Approx(0.5));
  CHECK(nested_mean({"x"}, {}).value == 0.0);
}

TEST_CASE("report rendering") {
  MetricReport r;
  r.rel = 1.0;
  r.t_g = 0.5;
  r.m_l = 0.125;
  r.counts["edits"] = 20;
  const auto j = nlohmann::json::parse(report_json(r, "abc"));
  CHECK(j["config_hash"] == "abc");
  CHECK(j["metrics"]["Rel"] == 1.0);
  CHECK(j["metrics"]["T-G"] == 0.5);
  CHECK(j["metrics"]["T-KPI"] == 0.0);
  CHECK(j["counts"]["edits"] == 20);
  CHECK(report_json(r, "abc") == report_json(r, "abc"));

  const std::string md = report_markdown({{"HICE", r}});
  CHECK(md ==
        "| Config | Rel | T-G | T-L | M-L | I-KGI | T-KGI | I-KPI | T-KPI |\n"
        "|---|---:|---:|---:|---:|---:|---:|---:|---:|\n"
        "| HICE | 100.00 | 50.00 | 0.00 | 12.50 | 0.00 | 0.00 | 0.00 | 0.00 |\n");
}
