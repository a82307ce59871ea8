#include "hice/router.hpp"

#include <algorithm>
#include <limits>

namespace hice {

std::string to_string(Route route) { return route == Route::Edited ? "edited" : "original"; }

double max_similarity_to_m2(const Eigen::Ref<const VectorXf>& question_feature, const MemoryM2& m2,
                            Metric metric) {
  double best = kEmptyM2Similarity;
  bool first = true;
  for (const auto& e : m2.entries) {
    const double s = metric == Metric::Cosine ? cosine_similarity(question_feature, e.feature)
                                              : -l2_distance(question_feature, e.feature);
    if (first || s > best) best = s;
    first = false;
  }
  return best;
}

RoutingDecision route(const std::string& question, const Eigen::Ref<const VectorXf>& question_feature,
                      const ClassifierModel& classifier, const MemoryM2& m2,
                      const RouterConfig& config) {
  RoutingDecision d;
  d.prompt = question;
  if (config.use_m2) d.max_m2_similarity = max_similarity_to_m2(question_feature, m2, config.gate_metric);
  const Classification c = classifier.classify(question_feature);
  d.classifier_label = c.label;
  d.margin = c.margin;
  const bool gate_open = !config.use_m2 || d.max_m2_similarity <= config.threshold;
  d.route = gate_open && c.label == ScopeLabel::InDomain ? Route::Edited : Route::Original;
  return d;
}

std::string compose_prompt(const std::string& edit_question, const std::string& edit_answer,
                           const std::string& incoming_question,
                           const std::vector<Demonstration>& context) {
  std::string prompt;
  for (const auto& demo : context) {
    prompt += demo.text;
    prompt += '\n';
  }
  prompt += render_demonstration(edit_question, edit_answer);
  prompt += '\n';
  prompt += incoming_question;
  return prompt;
}

std::vector<Demonstration> retrieve_context(const Eigen::Ref<const VectorXf>& question_feature,
                                            const MemoryM1& m1, const RouterConfig& config) {
  if (config.k0 == 0 || m1.entries.empty()) return {};
  struct Hit {
    double distance;
    std::size_t index;
  };
  std::vector<Hit> hits;
  hits.reserve(m1.entries.size());
  for (std::size_t i = 0; i < m1.entries.size(); ++i) {
    hits.push_back({l2_distance(question_feature, m1.entries[i].feature), i});
  }
  const std::size_t take = std::min(config.k0, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(take), hits.end(),
                    [&](const Hit& a, const Hit& b) {
                      if (a.distance != b.distance) return a.distance < b.distance;
                      return m1.entries[a.index].demonstration.source_id <
                             m1.entries[b.index].demonstration.source_id;
                    });
  hits.resize(take);
  std::vector<Demonstration> context;
  context.reserve(take);
  for (const auto& h : hits) context.push_back(m1.entries[h.index].demonstration);
  if (!config.most_similar_first) std::reverse(context.begin(), context.end());
  return context;
}

RoutingDecision plan_query(const EditSample& edit, const Query& query, const EditContext& ctx) {
  RoutingDecision d = route(query.question, query.feature, ctx.classifier, ctx.m2, ctx.config);
  if (d.route == Route::Edited) {
    std::vector<Demonstration> context;
    if (ctx.config.use_m1) context = retrieve_context(query.feature, ctx.m1, ctx.config);
    d.prompt = compose_prompt(edit.question, edit.target_answer, query.question, context);
  }
  return d;
}

InferenceResult edit_infer(const EditSample& edit, const Query& query, Backend& backend,
                           const EditContext& ctx) {
  InferenceResult result;
  result.decision = plan_query(edit, query, ctx);
  try {
    result.answer = backend.answer(query.image_ref, result.decision.prompt);
  } catch (const std::exception& e) {
    throw BackendFailure(e.what(), result.decision);
  }
  return result;
}

}  // namespace hice
