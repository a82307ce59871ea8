#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hice/common.hpp"
#include "hice/embeddings.hpp"

namespace hice {

struct BackendRequest {
  std::string image_ref;
  std::string prompt;
};

struct BackendResponse {
  std::string answer;
  double latency_ms = 0.0;
};

// Failure talking to a backend, distinct from any answer the model gives.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Positional result of a batch: either a response or the error message.
struct BatchItem {
  std::optional<BackendResponse> response;
  std::string error;

  bool ok() const { return response.has_value(); }
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string answer(const std::string& image_ref, const std::string& prompt) = 0;
  // Order preserving. Default implementation throttles to max_concurrency().
  virtual std::vector<BatchItem> batch_answer(const std::vector<BackendRequest>& requests);
  // 0 means unlimited.
  virtual std::size_t max_concurrency() const { return 1; }
};

struct ScriptedBehavior {
  // (image_ref, normalized question) → answer
  std::map<std::pair<std::string, std::string>, std::string> base_table;
  bool fact_sensitivity = true;
  // Rephrase → canonical question, honored only when the prompt carries at
  // least one demonstration besides the edit's own.
  std::map<std::string, std::string> aliases;
  // When set, a prompt with fact blocks none of which match the final
  // question is answered with this string instead of the base table.
  std::optional<std::string> distraction;

  void add(const std::string& image_ref, const std::string& question, const std::string& answer);
  void add_alias(const std::string& rephrase, const std::string& canonical);
};

inline constexpr const char* kScriptedFallback = "unknown";

ScriptedBehavior load_scripted_behavior(const std::string& path);
void save_scripted_behavior(const ScriptedBehavior& behavior, const std::string& path);

// Deterministic stand-in model; a pure function of (image_ref, prompt).
class ScriptedBackend final : public Backend {
 public:
  explicit ScriptedBackend(ScriptedBehavior behavior) : behavior_(std::move(behavior)) {}
  std::string answer(const std::string& image_ref, const std::string& prompt) override;
  std::size_t max_concurrency() const override { return 0; }
  const ScriptedBehavior& behavior() const { return behavior_; }

 private:
  ScriptedBehavior behavior_;
};

struct ParsedPrompt {
  std::vector<std::string> facts;  // text after "New Fact: "
  std::string final_question;      // last line
};
ParsedPrompt parse_prompt(const std::string& prompt);

// If `fact` reads "<q> <a>" with normalize(q) == normalize(question), returns a.
std::optional<std::string> match_fact(const std::string& fact, const std::string& question);

struct WireEndpoint {
  std::string host = "127.0.0.1";
  int port = 8080;
  double timeout_s = 120.0;

  static WireEndpoint parse(const std::string& url);
};

// Client for the adapter's JSON protocol:
//   POST /v1/answer       {"image", "prompt"} → {"answer"}
//   POST /v1/embed_text   {"texts"}          → {"dim", "vectors"}
//   POST /v1/embed_image  {"images"}         → {"dim", "vectors"}
class WireBackend final : public Backend {
 public:
  explicit WireBackend(WireEndpoint endpoint, std::size_t max_in_flight = 4)
      : endpoint_(std::move(endpoint)), max_in_flight_(max_in_flight) {}

  std::string answer(const std::string& image_ref, const std::string& prompt) override;
  std::size_t max_concurrency() const override { return max_in_flight_; }

  MatrixXf embed_texts(const std::vector<std::string>& texts);
  MatrixXf embed_images(const std::vector<std::string>& locators);

 private:
  std::string post(const std::string& path, const std::string& body);
  MatrixXf parse_vectors(const std::string& body, std::size_t expected);

  WireEndpoint endpoint_;
  std::size_t max_in_flight_;
};

}  // namespace hice
