#pragma once

#include <algorithm>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hice/common.hpp"

namespace hice {

// Id-aligned rows of f32 feature vectors.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::vector<std::string> ids, MatrixXf rows, std::string encoder_tag = {});

  std::size_t count() const { return ids_.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(rows_.cols()); }
  bool empty() const { return ids_.empty(); }

  const std::vector<std::string>& ids() const { return ids_; }
  const MatrixXf& rows() const { return rows_; }
  const std::string& encoder_tag() const { return encoder_tag_; }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t index_of(const std::string& id) const;
  Eigen::Map<const VectorXf> row(std::size_t i) const {
    return Eigen::Map<const VectorXf>(rows_.row(static_cast<Eigen::Index>(i)).data(),
                                      rows_.cols());
  }
  Eigen::Map<const VectorXf> row(const std::string& id) const { return row(index_of(id)); }

  // New matrix with the given ids, in the given order.
  EmbeddingMatrix select(const std::vector<std::string>& ids) const;

 private:
  std::vector<std::string> ids_;
  MatrixXf rows_;
  std::string encoder_tag_;
  std::unordered_map<std::string, std::size_t> index_;
};

// EMB1 layout: "EMB1", u32 count, u32 dim, u32 reserved (0), all little
// endian, then row-major f32. The header is kEmbHeaderBytes long.
inline constexpr std::size_t kEmbHeaderBytes = 16;

void write_emb1(const MatrixXf& rows, std::ostream& out);
MatrixXf read_emb1(std::istream& in);

// Writes `<path>` plus the `<stem>.ids.json` sidecar.
void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path);
EmbeddingMatrix read_embeddings(const std::filesystem::path& path);
std::filesystem::path ids_sidecar_path(const std::filesystem::path& path);

template <typename A, typename B>
double l2_distance(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != b.size()) throw DimensionError("l2_distance: dimension mismatch");
  return (a.template cast<double>() - b.template cast<double>()).norm();
}

template <typename A, typename B>
double cosine_similarity(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: dimension mismatch");
  const auto ad = a.template cast<double>();
  const auto bd = b.template cast<double>();
  const double na = ad.norm();
  const double nb = bd.norm();
  if (na == 0.0 || nb == 0.0) throw DimensionError("cosine_similarity: zero vector");
  const double c = ad.dot(bd) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

enum class Metric { L2, Cosine };
enum class Order { Nearest, Farthest };

struct Neighbor {
  std::string id;
  double score = 0.0;  // distance for L2, similarity for cosine
};

// Exhaustive k-nearest (or k-farthest) search. Ties break by id.
std::vector<Neighbor> knn(const Eigen::Ref<const VectorXf>& query, const EmbeddingMatrix& matrix,
                          std::size_t k, Order order = Order::Nearest,
                          Metric metric = Metric::L2,
                          const std::unordered_set<std::string>& exclude = {});

std::vector<std::string> knn_ids(const Eigen::Ref<const VectorXf>& query,
                                 const EmbeddingMatrix& matrix, std::size_t k,
                                 Order order = Order::Nearest, Metric metric = Metric::L2,
                                 const std::unordered_set<std::string>& exclude = {});

}  // namespace hice
