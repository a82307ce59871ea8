#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "hice/common.hpp"
#include "hice/fixture.hpp"
#include "hice/pipeline.hpp"

namespace hice::testing {

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("hice-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Gaussian matrix from the standard library generator; independent of hice::Rng.
template <typename Scalar>
Matrix<Scalar> gaussian(std::mt19937_64& gen, Eigen::Index rows, Eigen::Index cols, double sigma = 1.0) {
  std::normal_distribution<double> dist(0.0, sigma);
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<Scalar>(dist(gen));
  return m;
}

// Run config over a written fixture bundle, with absolute paths.
inline RunConfig fixture_config(const FixtureFiles& files, const std::filesystem::path& work_dir,
                                std::uint64_t seed = 7) {
  RunConfig c = default_config();
  c.train_manifest = files.train_manifest.string();
  c.test_manifest = files.test_manifest.string();
  c.demo_embeddings = files.demonstrations.string();
  c.question_embeddings = files.questions.string();
  c.image_embeddings = files.images.string();
  c.work_dir = work_dir.string();
  c.backend = "scripted:" + files.scripted.string();
  c.m2_all = true;
  c.projected_dim = 512;
  c.seed = seed;
  return c;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace hice::testing
