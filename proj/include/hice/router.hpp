#pragma once

#include <string>
#include <vector>

#include "hice/backends.hpp"
#include "hice/classifier.hpp"
#include "hice/embeddings.hpp"
#include "hice/memory.hpp"

namespace hice {

enum class Route { Original, Edited };
std::string to_string(Route route);

struct RouterConfig {
  double threshold = 0.8;      // T
  std::size_t k0 = 16;
  bool use_m1 = true;
  bool use_projection = true;  // consumed at fit time; recorded for reports
  bool use_m2 = true;
  Metric gate_metric = Metric::Cosine;
  // Context order in the prompt; default puts the closest demonstration
  // right before the edit's own.
  bool most_similar_first = false;
};

struct RoutingDecision {
  Route route = Route::Original;
  double max_m2_similarity = -1.0;
  ScopeLabel classifier_label = ScopeLabel::OutOfDomain;
  double margin = 0.0;
  std::string prompt;
};

inline constexpr double kEmptyM2Similarity = -1.0;

// Cosine by default. With L2 the score is the negated smallest distance, so
// "higher means closer" holds for both metrics.
double max_similarity_to_m2(const Eigen::Ref<const VectorXf>& question_feature, const MemoryM2& m2,
                            Metric metric = Metric::Cosine);

// Gate outcome only; the prompt is left as the raw question.
RoutingDecision route(const std::string& question, const Eigen::Ref<const VectorXf>& question_feature,
                      const ClassifierModel& classifier, const MemoryM2& m2,
                      const RouterConfig& config);

// [s_1; …; s_k; s_o; x], newline-joined.
std::string compose_prompt(const std::string& edit_question, const std::string& edit_answer,
                           const std::string& incoming_question,
                           const std::vector<Demonstration>& context);

// k0 nearest M1 entries by L2, in prompt order per config.
std::vector<Demonstration> retrieve_context(const Eigen::Ref<const VectorXf>& question_feature,
                                            const MemoryM1& m1, const RouterConfig& config);

struct Query {
  std::string image_ref;
  std::string question;
  VectorXf feature;
};

struct EditContext {
  const ClassifierModel& classifier;
  const MemoryM1& m1;
  const MemoryM2& m2;
  const RouterConfig& config;
};

// Routes and builds the exact backend request without calling the backend.
RoutingDecision plan_query(const EditSample& edit, const Query& query, const EditContext& ctx);

struct InferenceResult {
  std::string answer;
  RoutingDecision decision;
};

class BackendFailure : public Error {
 public:
  BackendFailure(const std::string& what, RoutingDecision decision)
      : Error(what), decision_(std::move(decision)) {}
  const RoutingDecision& decision() const { return decision_; }

 private:
  RoutingDecision decision_;
};

InferenceResult edit_infer(const EditSample& edit, const Query& query, Backend& backend,
                           const EditContext& ctx);

}  // namespace hice
