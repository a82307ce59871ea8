#include "hice/classifier.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "hice/embeddings.hpp"
#include "hice/ridge.hpp"

namespace hice {

namespace {

constexpr char kModelMagic[4] = {'H', 'C', 'L', '1'};

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw FormatError("classifier model: truncated header");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

std::size_t argmax_class(const Eigen::Ref<const RowVector<double>>& scores) {
  // Ties go to out-of-domain.
  return scores(0) > scores(1) ? 0 : 1;
}

double accuracy(const MatrixXd& projected, const MatrixXd& labels, const MatrixXd& weights) {
  const MatrixXd scores = projected * weights;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const std::size_t predicted = argmax_class(scores.row(i));
    const std::size_t truth = labels(i, 0) > labels(i, 1) ? 0 : 1;
    hits += predicted == truth;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

MatrixXd take_rows(const MatrixXd& m, const std::vector<std::size_t>& rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

}  // namespace

std::string to_string(DemoKind kind) {
  switch (kind) {
    case DemoKind::Edit: return "edit";
    case DemoKind::Rephrase: return "rephrase";
    case DemoKind::TextLocality: return "text_locality";
    case DemoKind::MmLocality: return "mm_locality";
  }
  return "edit";
}

std::string to_string(ScopeLabel label) {
  return label == ScopeLabel::InDomain ? "in_domain" : "out_of_domain";
}

DemoKind parse_demo_kind(const std::string& text) {
  for (auto kind : kAllDemoKinds) {
    if (to_string(kind) == text) return kind;
  }
  throw ValidationError("unknown demonstration kind '" + text + "'");
}

std::string demo_key(const std::string& source_id, DemoKind kind) {
  return source_id + ":" + to_string(kind);
}

std::string Demonstration::key() const { return demo_key(source_id, kind); }

std::string render_demonstration(const std::string& question, const std::string& answer) {
  return "New Fact: " + question + " " + answer + "\nPrompt: " + question + " " + answer;
}

std::array<Demonstration, 4> build_demonstrations(const EditSample& sample) {
  if (!sample.text_locality) {
    throw ValidationError("sample '" + sample.id + "' has no text-locality pair");
  }
  if (!sample.mm_locality) {
    throw ValidationError("sample '" + sample.id + "' has no multimodal-locality pair");
  }
  if (sample.rephrased_question.empty()) {
    throw ValidationError("sample '" + sample.id + "' has no rephrased question");
  }
  auto make = [&](DemoKind kind, const std::string& q, const std::string& a) {
    return Demonstration{render_demonstration(q, a), kind, label_for(kind), sample.id, q};
  };
  return {
      make(DemoKind::Edit, sample.question, sample.target_answer),
      make(DemoKind::Rephrase, sample.rephrased_question, sample.target_answer),
      make(DemoKind::TextLocality, sample.text_locality->question, sample.text_locality->answer),
      make(DemoKind::MmLocality, sample.mm_locality->question, sample.mm_locality->answer),
  };
}

std::vector<Demonstration> build_demonstrations(const std::vector<EditSample>& samples) {
  std::vector<Demonstration> out;
  out.reserve(4 * samples.size());
  for (const auto& s : samples) {
    for (auto& d : build_demonstrations(s)) out.push_back(std::move(d));
  }
  return out;
}

MatrixXd label_matrix(const std::vector<Demonstration>& demos) {
  MatrixXd y = MatrixXd::Zero(static_cast<Eigen::Index>(demos.size()), 2);
  for (std::size_t i = 0; i < demos.size(); ++i) {
    y(static_cast<Eigen::Index>(i), demos[i].label == ScopeLabel::InDomain ? 0 : 1) = 1.0;
  }
  return y;
}

MatrixXf draw_projection(std::size_t d, std::size_t projected_dim, std::uint64_t seed) {
  if (d < 1 || projected_dim < 1) throw ValidationError("projection dims must be at least 1");
  Rng rng(seed);
  MatrixXf w(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(projected_dim));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(rng.normal());
  return w;
}

Projection random_projection(const MatrixXf& features, std::uint64_t seed, std::size_t projected_dim) {
  Projection p;
  p.weights = draw_projection(static_cast<std::size_t>(features.cols()), projected_dim, seed);
  p.projected = project(features, p.weights);
  return p;
}

MatrixXd fit_ridge(const MatrixXd& projected, const MatrixXd& labels, double lambda) {
  MatrixXd w = ridge::fit(projected, labels, lambda);
  const double residual = ridge::normal_equation_residual(projected, labels, w, lambda);
  if (!(residual <= 1e-8)) {
    throw SolverError("ridge: normal-equation residual " + std::to_string(residual) +
                      " exceeds 1e-8 at lambda=" + std::to_string(lambda));
  }
  return w;
}

ClassifierModel::ClassifierModel(MatrixXf projection, MatrixXf weights, double lambda,
                                 std::uint64_t seed, double val_accuracy, bool projected)
    : projection_(std::move(projection)),
      weights_(std::move(weights)),
      lambda_(lambda),
      seed_(seed),
      val_accuracy_(val_accuracy),
      projected_(projected) {
  if (projection_.rows() < 1 || projection_.cols() < 1) {
    throw ValidationError("classifier: empty projection");
  }
  if (weights_.rows() != projection_.cols() || weights_.cols() != 2) {
    throw DimensionError("classifier: weights must be M×2 with M = projection columns");
  }
  if (!projection_.allFinite() || !weights_.allFinite()) {
    throw ValidationError("classifier: non-finite parameters");
  }
}

Eigen::Vector2d ClassifierModel::scores(const Eigen::Ref<const VectorXf>& feature) const {
  if (static_cast<std::size_t>(feature.size()) != d()) {
    throw DimensionError("classify: feature dim " + std::to_string(feature.size()) +
                         " != model dim " + std::to_string(d()));
  }
  const RowVector<double> projected =
      feature.transpose().cast<double>() * projection_.cast<double>();
  return (projected * weights_.cast<double>()).transpose();
}

Classification ClassifierModel::classify(const Eigen::Ref<const VectorXf>& feature) const {
  const Eigen::Vector2d s = scores(feature);
  Classification c;
  c.margin = s(0) - s(1);
  c.label = s(0) > s(1) ? ScopeLabel::InDomain : ScopeLabel::OutOfDomain;
  return c;
}

void ClassifierModel::save(const std::filesystem::path& path, std::uint64_t config_hash) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kModelMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(d()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(projected_dim()));
  put<double>(out, lambda_);
  put<std::uint64_t>(out, seed_);
  put<double>(out, val_accuracy_);
  put<std::uint32_t>(out, projected_ ? 1u : 0u);
  put<std::uint64_t>(out, config_hash);
  write_emb1(projection_, out);
  write_emb1(weights_, out);
}

ClassifierModel ClassifierModel::load(const std::filesystem::path& path, std::uint64_t* config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0) {
    throw FormatError("classifier model: bad magic in " + path.string());
  }
  const auto d = get<std::uint32_t>(in);
  const auto m = get<std::uint32_t>(in);
  const auto lambda = get<double>(in);
  const auto seed = get<std::uint64_t>(in);
  const auto val = get<double>(in);
  const auto projected = get<std::uint32_t>(in);
  const auto hash = get<std::uint64_t>(in);
  MatrixXf projection = read_emb1(in);
  MatrixXf weights = read_emb1(in);
  if (projection.rows() != d || projection.cols() != m || weights.rows() != m) {
    throw FormatError("classifier model: header dims disagree with stored matrices");
  }
  if (config_hash) *config_hash = hash;
  return ClassifierModel(std::move(projection), std::move(weights), lambda, seed, val, projected != 0);
}

std::vector<double> default_lambda_grid() {
  std::vector<double> grid;
  for (int e = -4; e <= 4; ++e) grid.push_back(std::pow(10.0, e));
  return grid;
}

LambdaSelection select_lambda(const MatrixXd& projected, const MatrixXd& labels,
                              const std::vector<double>& grid, double split_fraction,
                              std::uint64_t seed) {
  if (grid.empty()) throw ValidationError("select_lambda: empty grid");
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw ValidationError("select_lambda: split fraction must lie in (0, 1)");
  }
  const auto n = static_cast<std::size_t>(projected.rows());
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const auto n_fit = static_cast<std::size_t>(std::floor(split_fraction * static_cast<double>(n)));
  if (n_fit == 0 || n_fit == n) {
    throw ValidationError("select_lambda: degenerate split (" + std::to_string(n_fit) + " of " +
                          std::to_string(n) + " rows for fitting)");
  }
  const std::vector<std::size_t> fit_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_fit));
  const std::vector<std::size_t> val_rows(order.begin() + static_cast<std::ptrdiff_t>(n_fit), order.end());
  const MatrixXd fit_x = take_rows(projected, fit_rows);
  const MatrixXd fit_y = take_rows(labels, fit_rows);
  const MatrixXd val_x = take_rows(projected, val_rows);
  const MatrixXd val_y = take_rows(labels, val_rows);

  LambdaSelection best;
  bool have = false;
  std::string last_failure;
  for (double lambda : grid) {
    MatrixXd w;
    try {
      w = fit_ridge(fit_x, fit_y, lambda);
    } catch (const SolverError& e) {
      // An ill-conditioned grid point is skipped rather than aborting the search.
      best.curve.emplace_back(lambda, std::numeric_limits<double>::quiet_NaN());
      last_failure = e.what();
      continue;
    }
    const double acc = accuracy(val_x, val_y, w);
    best.curve.emplace_back(lambda, acc);
    if (!have || acc > best.val_accuracy || (acc == best.val_accuracy && lambda > best.lambda)) {
      best.lambda = lambda;
      best.val_accuracy = acc;
      best.weights = std::move(w);
      have = true;
    }
  }
  if (!have) throw SolverError("select_lambda: no grid point solved (" + last_failure + ")");
  return best;
}

ClassifierModel train_classifier(const MatrixXf& demo_features, const std::vector<Demonstration>& demos,
                                 const ClassifierParams& params) {
  if (static_cast<std::size_t>(demo_features.rows()) != demos.size()) {
    throw DimensionError("train_classifier: " + std::to_string(demo_features.rows()) +
                         " feature rows for " + std::to_string(demos.size()) + " demonstrations");
  }
  const MatrixXd labels = label_matrix(demos);
  MatrixXf projection;
  if (params.use_projection) {
    projection = draw_projection(static_cast<std::size_t>(demo_features.cols()), params.projected_dim,
                                 params.seed);
  } else {
    projection = MatrixXf::Identity(demo_features.cols(), demo_features.cols());
  }
  const MatrixXd projected = project(demo_features, projection);
  LambdaSelection sel = select_lambda(projected, labels, params.lambda_grid, params.split_fraction,
                                      params.seed);
  return ClassifierModel(std::move(projection), sel.weights.cast<float>(), sel.lambda, params.seed,
                         sel.val_accuracy, params.use_projection);
}

}  // namespace hice
