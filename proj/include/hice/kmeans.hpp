#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "hice/common.hpp"

namespace hice {

struct KMeansOptions {
  std::size_t max_iters = 100;
  double tol = 1e-6;  // max centroid shift (L2) that counts as converged
};

struct KMeansResult {
  std::vector<std::size_t> assignments;
  MatrixXd centroids;
  // Inertia after each assignment step; non-increasing by construction.
  std::vector<double> inertia_history;
  std::size_t iterations = 0;

  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

namespace detail {

inline double squared_distance(const MatrixXd& a, Eigen::Index ra, const MatrixXd& b,
                               Eigen::Index rb) {
  return (a.row(ra) - b.row(rb)).squaredNorm();
}

// Nearest centroid, lowest index on ties. Returns total inertia.
inline double assign(const MatrixXd& points, const MatrixXd& centroids,
              std::vector<std::size_t>& assignments, std::vector<double>& dist2) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = squared_distance(points, i, centroids, c);
      if (d < best_d) {
        best_d = d;
        best = static_cast<std::size_t>(c);
      }
    }
    assignments[static_cast<std::size_t>(i)] = best;
    dist2[static_cast<std::size_t>(i)] = best_d;
    inertia += best_d;
  }
  return inertia;
}

}  // namespace detail

// k-means++ seeding followed by Lloyd iterations. Clusters that lose all
// their points are re-seeded at the point currently farthest from its
// centroid. Centroids are accumulated in double regardless of Scalar.
template <typename Scalar>
KMeansResult kmeans(const Matrix<Scalar>& input, std::size_t k, std::uint64_t seed,
                    const KMeansOptions& options = {}) {
  const auto n = static_cast<std::size_t>(input.rows());
  if (k == 0) throw ValidationError("kmeans: k must be at least 1");
  if (k > n) {
    throw ValidationError("kmeans: k=" + std::to_string(k) + " exceeds point count " +
                          std::to_string(n));
  }
  const Matrix<double> points = input.template cast<double>();
  Rng rng(seed);
  KMeansResult result;
  result.centroids.resize(static_cast<Eigen::Index>(k), points.cols());

  std::vector<double> dist2(n, std::numeric_limits<double>::infinity());
  result.centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.below(n)));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist2[i] = std::min(dist2[i], detail::squared_distance(points, static_cast<Eigen::Index>(i),
                                                             result.centroids,
                                                             static_cast<Eigen::Index>(c - 1)));
      total += dist2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double cumulative = 0.0;
      std::size_t last_positive = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (dist2[i] <= 0.0) continue;
        last_positive = i;
        cumulative += dist2[i];
        if (cumulative > target) {
          pick = i;
          break;
        }
      }
      if (pick == n) pick = last_positive;
    } else {
      // Every point coincides with an existing centroid.
      pick = static_cast<std::size_t>(rng.below(n));
    }
    result.centroids.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
  }

  result.assignments.assign(n, 0);
  std::vector<double> point_d2(n, 0.0);
  const std::size_t max_iters = std::max<std::size_t>(options.max_iters, 1);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    result.inertia_history.push_back(
        detail::assign(points, result.centroids, result.assignments, point_d2));
    result.iterations = iter + 1;

    Matrix<double> updated = Matrix<double>::Zero(static_cast<Eigen::Index>(k), points.cols());
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      updated.row(static_cast<Eigen::Index>(result.assignments[i])) +=
          points.row(static_cast<Eigen::Index>(i));
      ++sizes[result.assignments[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      const auto row = static_cast<Eigen::Index>(c);
      if (sizes[c] > 0) {
        updated.row(row) /= static_cast<double>(sizes[c]);
        continue;
      }
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (point_d2[i] > far_d) {
          far_d = point_d2[i];
          far = i;
        }
      }
      point_d2[far] = 0.0;
      updated.row(row) = points.row(static_cast<Eigen::Index>(far));
    }
    double shift = 0.0;
    for (Eigen::Index c = 0; c < updated.rows(); ++c) {
      shift = std::max(shift, (updated.row(c) - result.centroids.row(c)).norm());
    }
    result.centroids = std::move(updated);
    if (shift < options.tol) break;
  }
  // Assignments always refer to the returned centroids.
  result.inertia_history.push_back(
      detail::assign(points, result.centroids, result.assignments, point_d2));
  return result;
}

}  // namespace hice
