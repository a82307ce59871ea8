#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "hice/backends.hpp"
#include "hice/dataset.hpp"
#include "hice/embeddings.hpp"

// Synthetic benchmark bundles with hand-built feature geometry, used by the
// tests and by `hice fixture`. Feature axes: 0 is the in-domain direction,
// 1 the out-of-domain direction, 2 the "hard external" anchor direction and
// the rest carry per-row noise.

namespace hice {

enum class FixtureProfile {
  // In-domain and locality questions sit on orthogonal axes.
  Separable,
  // Like Separable, but the test edit, rephrase and mm-locality questions
  // have graded cosine similarity to one hard external training question.
  Graded,
};

std::string to_string(FixtureProfile profile);
FixtureProfile parse_fixture_profile(const std::string& text);

struct FixtureOptions {
  std::size_t train_samples = 20;
  std::size_t test_samples = 20;
  // The first n test samples carry a text (resp. multimodal) locality probe.
  std::size_t test_text_locality = 10;
  std::size_t test_mm_locality = 10;
  // Share of test samples the scripted model already answers correctly.
  double originally_correct = 0.25;
  std::size_t dim = 32;
  FixtureProfile profile = FixtureProfile::Separable;
  std::vector<double> grades = {0.70, 0.78, 0.83, 0.88, 0.93};
  std::uint64_t seed = 1;
};

struct FixtureBundle {
  Dataset train;
  Dataset test;
  EmbeddingMatrix demonstrations;  // train demonstrations, "<id>:<kind>"
  EmbeddingMatrix questions;       // train and test questions, "<id>:<kind>"
  EmbeddingMatrix images;          // train and test edit images, "<id>"
  ScriptedBehavior behavior;
  // Question id of the hard external anchor (Graded profile only).
  std::string anchor_key;
};

FixtureBundle make_fixture_bundle(const FixtureOptions& options);

struct FixtureFiles {
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path demonstrations;
  std::filesystem::path questions;
  std::filesystem::path images;
  std::filesystem::path scripted;
};

FixtureFiles write_fixture_bundle(const FixtureBundle& bundle, const std::filesystem::path& dir);

}  // namespace hice
