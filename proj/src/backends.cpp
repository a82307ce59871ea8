#include "hice/backends.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "hice/metrics.hpp"

namespace hice {

using nlohmann::json;

std::vector<BatchItem> Backend::batch_answer(const std::vector<BackendRequest>& requests) {
  std::vector<BatchItem> results(requests.size());
  auto run_one = [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    try {
      BackendResponse r;
      r.answer = answer(requests[i].image_ref, requests[i].prompt);
      r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      results[i].response = std::move(r);
    } catch (const std::exception& e) {
      results[i].error = e.what();
    }
  };

  std::size_t workers = max_concurrency();
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, requests.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < requests.size(); ++i) run_one(i);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < requests.size(); i = next++) run_one(i);
    });
  }
  for (auto& t : pool) t.join();
  return results;
}

// ---------------------------------------------------------------------------

void ScriptedBehavior::add(const std::string& image_ref, const std::string& question,
                           const std::string& answer) {
  base_table[{image_ref, normalize_answer(question)}] = answer;
}

void ScriptedBehavior::add_alias(const std::string& rephrase, const std::string& canonical) {
  aliases[normalize_answer(rephrase)] = canonical;
}

ScriptedBehavior load_scripted_behavior(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open scripted behavior " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("scripted behavior " + path + ": " + e.what());
  }
  ScriptedBehavior b;
  b.fact_sensitivity = j.value("fact_sensitivity", true);
  if (j.contains("distraction") && !j["distraction"].is_null()) {
    b.distraction = j["distraction"].get<std::string>();
  }
  for (const auto& e : j.value("entries", json::array())) {
    b.add(e.at("image").get<std::string>(), e.at("question").get<std::string>(),
          e.at("answer").get<std::string>());
  }
  for (const auto& a : j.value("aliases", json::array())) {
    b.add_alias(a.at("rephrase").get<std::string>(), a.at("canonical").get<std::string>());
  }
  return b;
}

void save_scripted_behavior(const ScriptedBehavior& b, const std::string& path) {
  json j;
  j["fact_sensitivity"] = b.fact_sensitivity;
  j["distraction"] = b.distraction ? json(*b.distraction) : json(nullptr);
  json entries = json::array();
  for (const auto& [key, answer] : b.base_table) {
    entries.push_back({{"image", key.first}, {"question", key.second}, {"answer", answer}});
  }
  j["entries"] = std::move(entries);
  json aliases = json::array();
  for (const auto& [rephrase, canonical] : b.aliases) {
    aliases.push_back({{"rephrase", rephrase}, {"canonical", canonical}});
  }
  j["aliases"] = std::move(aliases);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(1) << '\n';
}

ParsedPrompt parse_prompt(const std::string& prompt) {
  static const std::string kFact = "New Fact: ";
  ParsedPrompt parsed;
  std::istringstream in(prompt);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(kFact, 0) == 0) parsed.facts.push_back(line.substr(kFact.size()));
    parsed.final_question = line;
  }
  return parsed;
}

std::optional<std::string> match_fact(const std::string& fact, const std::string& question) {
  const std::string target = normalize_answer(question);
  if (target.empty()) return std::nullopt;
  for (std::size_t pos = fact.find(' '); pos != std::string::npos; pos = fact.find(' ', pos + 1)) {
    if (normalize_answer(fact.substr(0, pos)) != target) continue;
    std::string answer = fact.substr(pos + 1);
    const auto first = answer.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto last = answer.find_last_not_of(" \t\r");
    return answer.substr(first, last - first + 1);
  }
  return std::nullopt;
}

std::string ScriptedBackend::answer(const std::string& image_ref, const std::string& prompt) {
  const ParsedPrompt parsed = parse_prompt(prompt);
  const std::string& question = parsed.final_question;
  if (behavior_.fact_sensitivity && !parsed.facts.empty()) {
    // The closest block (the edit's own demonstration) wins.
    for (auto it = parsed.facts.rbegin(); it != parsed.facts.rend(); ++it) {
      if (auto a = match_fact(*it, question)) return *a;
    }
    if (parsed.facts.size() >= 2) {
      auto alias = behavior_.aliases.find(normalize_answer(question));
      if (alias != behavior_.aliases.end()) {
        for (auto it = parsed.facts.rbegin(); it != parsed.facts.rend(); ++it) {
          if (auto a = match_fact(*it, alias->second)) return *a;
        }
      }
    }
    if (behavior_.distraction) return *behavior_.distraction;
  }
  auto hit = behavior_.base_table.find({image_ref, normalize_answer(question)});
  return hit == behavior_.base_table.end() ? std::string(kScriptedFallback) : hit->second;
}

// ---------------------------------------------------------------------------

WireEndpoint WireEndpoint::parse(const std::string& url) {
  std::string rest = url;
  const std::string scheme = "http://";
  if (rest.rfind(scheme, 0) == 0) {
    rest = rest.substr(scheme.size());
  } else if (rest.find("://") != std::string::npos) {
    throw ValidationError("unsupported backend URL scheme: " + url);
  }
  while (!rest.empty() && rest.back() == '/') rest.pop_back();
  WireEndpoint ep;
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos) {
    ep.host = rest;
    ep.port = 80;
  } else {
    ep.host = rest.substr(0, colon);
    try {
      ep.port = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw ValidationError("bad port in backend URL: " + url);
    }
  }
  if (ep.host.empty()) throw ValidationError("missing host in backend URL: " + url);
  return ep;
}

std::string WireBackend::post(const std::string& path, const std::string& body) {
  httplib::Client client(endpoint_.host, endpoint_.port);
  const auto secs = static_cast<time_t>(endpoint_.timeout_s);
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  client.set_write_timeout(secs, 0);
  auto res = client.Post(path, body, "application/json");
  if (!res) {
    throw TransportError("POST " + path + ": " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    std::string message = res->body;
    try {
      const json j = json::parse(res->body);
      if (j.contains("error") && j["error"].is_string()) message = j["error"].get<std::string>();
    } catch (const json::exception&) {
    }
    throw TransportError("POST " + path + ": HTTP " + std::to_string(res->status) + ": " + message);
  }
  return res->body;
}

std::string WireBackend::answer(const std::string& image_ref, const std::string& prompt) {
  const json body = {{"image", image_ref}, {"prompt", prompt}};
  const std::string reply = post("/v1/answer", body.dump());
  try {
    const json j = json::parse(reply);
    if (!j.is_object() || !j.contains("answer") || !j["answer"].is_string()) {
      throw TransportError("/v1/answer: response lacks a string 'answer'");
    }
    return j["answer"].get<std::string>();
  } catch (const json::exception& e) {
    throw TransportError(std::string("/v1/answer: malformed response: ") + e.what());
  }
}

MatrixXf WireBackend::parse_vectors(const std::string& body, std::size_t expected) {
  try {
    const json j = json::parse(body);
    const auto dim = j.at("dim").get<std::size_t>();
    const auto& vectors = j.at("vectors");
    if (dim == 0) throw TransportError("embedding response: dim is 0");
    if (!vectors.is_array() || vectors.size() != expected) {
      throw TransportError("embedding response: expected " + std::to_string(expected) + " vectors");
    }
    MatrixXf out(static_cast<Eigen::Index>(expected), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < expected; ++i) {
      const auto& v = vectors[i];
      if (!v.is_array() || v.size() != dim) {
        throw TransportError("embedding response: vector " + std::to_string(i) + " has wrong length");
      }
      for (std::size_t c = 0; c < dim; ++c) {
        out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = v[c].get<float>();
      }
    }
    if (!out.allFinite()) throw TransportError("embedding response: non-finite value");
    return out;
  } catch (const json::exception& e) {
    throw TransportError(std::string("embedding response: ") + e.what());
  }
}

MatrixXf WireBackend::embed_texts(const std::vector<std::string>& texts) {
  const json body = {{"texts", texts}};
  return parse_vectors(post("/v1/embed_text", body.dump()), texts.size());
}

MatrixXf WireBackend::embed_images(const std::vector<std::string>& locators) {
  const json body = {{"images", locators}};
  return parse_vectors(post("/v1/embed_image", body.dump()), locators.size());
}

}  // namespace hice
