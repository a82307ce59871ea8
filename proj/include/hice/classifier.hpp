#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hice/common.hpp"
#include "hice/dataset.hpp"

namespace hice {

enum class DemoKind { Edit, Rephrase, TextLocality, MmLocality };
enum class ScopeLabel { InDomain, OutOfDomain };

inline constexpr std::array<DemoKind, 4> kAllDemoKinds = {
    DemoKind::Edit, DemoKind::Rephrase, DemoKind::TextLocality, DemoKind::MmLocality};

std::string to_string(DemoKind kind);
std::string to_string(ScopeLabel label);
DemoKind parse_demo_kind(const std::string& text);

inline ScopeLabel label_for(DemoKind kind) {
  return (kind == DemoKind::TextLocality || kind == DemoKind::MmLocality) ? ScopeLabel::OutOfDomain
                                                                         : ScopeLabel::InDomain;
}

struct Demonstration {
  std::string text;
  DemoKind kind = DemoKind::Edit;
  ScopeLabel label = ScopeLabel::InDomain;
  std::string source_id;
  std::string question;  // the x the template was rendered from

  // Key of this demonstration's row in the demonstration/question embedding
  // files: "<source_id>:<kind>".
  std::string key() const;
};

std::string demo_key(const std::string& source_id, DemoKind kind);

// "New Fact: {x} {y}\nPrompt: {x} {y}"
std::string render_demonstration(const std::string& question, const std::string& answer);

// Edit, rephrase, text-locality, mm-locality; in that order. The rephrase
// demonstration pairs x_r with the edit target.
std::array<Demonstration, 4> build_demonstrations(const EditSample& sample);
std::vector<Demonstration> build_demonstrations(const std::vector<EditSample>& samples);

// One-hot 4N×2 matrix: column 0 in-domain, column 1 out-of-domain.
MatrixXd label_matrix(const std::vector<Demonstration>& demos);

// Standard-normal d×M matrix drawn from Rng(seed), row-major order.
MatrixXf draw_projection(std::size_t d, std::size_t projected_dim, std::uint64_t seed);

template <typename Derived>
MatrixXd project(const Eigen::MatrixBase<Derived>& features, const MatrixXf& projection) {
  if (features.cols() != projection.rows()) {
    throw DimensionError("project: feature dim " + std::to_string(features.cols()) +
                         " != projection rows " + std::to_string(projection.rows()));
  }
  return features.template cast<double>() * projection.cast<double>();
}

struct Projection {
  MatrixXf weights;   // W_r, d×M
  MatrixXd projected;  // F·W_r, n×M
};

Projection random_projection(const MatrixXf& features, std::uint64_t seed, std::size_t projected_dim);

MatrixXd fit_ridge(const MatrixXd& projected, const MatrixXd& labels, double lambda);

struct Classification {
  ScopeLabel label = ScopeLabel::OutOfDomain;
  double margin = 0.0;  // score(in) − score(out)
};

class ClassifierModel {
 public:
  ClassifierModel() = default;
  ClassifierModel(MatrixXf projection, MatrixXf weights, double lambda, std::uint64_t seed,
                  double val_accuracy, bool projected = true);

  std::size_t d() const { return static_cast<std::size_t>(projection_.rows()); }
  std::size_t projected_dim() const { return static_cast<std::size_t>(projection_.cols()); }
  const MatrixXf& projection() const { return projection_; }
  const MatrixXf& weights() const { return weights_; }
  double lambda() const { return lambda_; }
  std::uint64_t seed() const { return seed_; }
  double val_accuracy() const { return val_accuracy_; }
  bool projected() const { return projected_; }

  // (in, out) scores of (feature·W_r)·W*.
  Eigen::Vector2d scores(const Eigen::Ref<const VectorXf>& feature) const;
  Classification classify(const Eigen::Ref<const VectorXf>& feature) const;

  void save(const std::filesystem::path& path, std::uint64_t config_hash = 0) const;
  static ClassifierModel load(const std::filesystem::path& path, std::uint64_t* config_hash = nullptr);

 private:
  MatrixXf projection_;
  MatrixXf weights_;
  double lambda_ = 0.0;
  std::uint64_t seed_ = 0;
  double val_accuracy_ = 0.0;
  bool projected_ = true;
};

// 10⁻⁴ … 10⁴
std::vector<double> default_lambda_grid();

struct LambdaSelection {
  double lambda = 0.0;
  double val_accuracy = 0.0;
  std::vector<std::pair<double, double>> curve;  // (λ, accuracy) per grid point
  MatrixXd weights;
};

// Seeded row split; fits on split_fraction of rows, scores argmax accuracy on
// the remainder. Ties prefer the larger λ.
LambdaSelection select_lambda(const MatrixXd& projected, const MatrixXd& labels,
                              const std::vector<double>& grid, double split_fraction,
                              std::uint64_t seed);

struct ClassifierParams {
  std::size_t projected_dim = 10000;
  std::vector<double> lambda_grid = default_lambda_grid();
  double split_fraction = 0.8;
  std::uint64_t seed = 0;
  bool use_projection = true;
};

// Demonstration features (rows aligned with demos) to a fitted model. With
// use_projection off the ridge runs directly in d dimensions and the stored
// projection is the identity.
ClassifierModel train_classifier(const MatrixXf& demo_features,
                                 const std::vector<Demonstration>& demos,
                                 const ClassifierParams& params);

}  // namespace hice
