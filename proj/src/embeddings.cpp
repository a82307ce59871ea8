#include "hice/embeddings.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace hice {

namespace {

constexpr std::array<char, 4> kMagic = {'E', 'M', 'B', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what = "EMB1: truncated header") {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(what);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::vector<std::string> ids, MatrixXf rows, std::string encoder_tag)
    : ids_(std::move(ids)), rows_(std::move(rows)), encoder_tag_(std::move(encoder_tag)) {
  if (static_cast<Eigen::Index>(ids_.size()) != rows_.rows()) {
    throw DimensionError("EmbeddingMatrix: " + std::to_string(ids_.size()) + " ids for " +
                         std::to_string(rows_.rows()) + " rows");
  }
  if (!ids_.empty() && rows_.cols() == 0) throw DimensionError("EmbeddingMatrix: dim must be > 0");
  if (!rows_.allFinite()) throw ValidationError("EmbeddingMatrix: non-finite value");
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i], i).second) {
      throw ValidationError("EmbeddingMatrix: duplicate id '" + ids_[i] + "'");
    }
  }
}

std::size_t EmbeddingMatrix::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw ValidationError("no embedding row for id '" + id + "'");
  return it->second;
}

EmbeddingMatrix EmbeddingMatrix::select(const std::vector<std::string>& ids) const {
  MatrixXf rows(static_cast<Eigen::Index>(ids.size()), rows_.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = rows_.row(static_cast<Eigen::Index>(index_of(ids[i])));
  }
  return EmbeddingMatrix(ids, std::move(rows), encoder_tag_);
}

void write_emb1(const MatrixXf& rows, std::ostream& out) {
  constexpr auto kMax = std::numeric_limits<std::uint32_t>::max();
  if (static_cast<std::uint64_t>(rows.rows()) > kMax || static_cast<std::uint64_t>(rows.cols()) > kMax) {
    throw FormatError("EMB1: count or dim exceeds u32");
  }
  if (!rows.allFinite()) throw FormatError("EMB1: refusing to write non-finite values");
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, static_cast<std::uint32_t>(rows.rows()));
  put_u32(out, static_cast<std::uint32_t>(rows.cols()));
  put_u32(out, 0);  // reserved
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(rows.data()),
              static_cast<std::streamsize>(rows.size() * sizeof(float)));
  } else {
    for (Eigen::Index i = 0; i < rows.size(); ++i) put_f32(out, rows.data()[i]);
  }
  if (!out) throw FormatError("EMB1: write failed");
}

MatrixXf read_emb1(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError("EMB1: bad magic");
  }
  const std::uint32_t count = get_u32(in);
  const std::uint32_t dim = get_u32(in);
  if (get_u32(in) != 0) throw FormatError("EMB1: reserved header word is not zero");
  const std::uint64_t values = std::uint64_t(count) * dim;
  if (count > 0 && dim == 0) throw FormatError("EMB1: zero dim with non-zero count");
  if (values > (std::uint64_t(1) << 34)) throw FormatError("EMB1: count*dim overflow");
  MatrixXf rows(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  for (std::uint64_t i = 0; i < values; ++i) {
    rows.data()[i] = std::bit_cast<float>(get_u32(in, "EMB1: truncated data"));
  }
  return rows;
}

std::filesystem::path ids_sidecar_path(const std::filesystem::path& path) {
  auto sidecar = path;
  sidecar.replace_filename(path.stem().string() + ".ids.json");
  return sidecar;
}

void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path) {
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    write_emb1(matrix.rows(), out);
  }
  std::ofstream ids(ids_sidecar_path(path), std::ios::binary);
  if (!ids) throw Error("cannot write " + ids_sidecar_path(path).string());
  ids << nlohmann::json(matrix.ids()).dump() << '\n';
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  MatrixXf rows = read_emb1(in);
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw FormatError("EMB1: trailing bytes in " + path.string());
  }
  std::ifstream ids_in(ids_sidecar_path(path));
  if (!ids_in) throw Error("cannot open ids sidecar " + ids_sidecar_path(path).string());
  std::vector<std::string> ids;
  try {
    ids = nlohmann::json::parse(ids_in).get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ids sidecar: ") + e.what());
  }
  if (ids.size() != static_cast<std::size_t>(rows.rows())) {
    throw FormatError("ids sidecar lists " + std::to_string(ids.size()) + " ids for " +
                      std::to_string(rows.rows()) + " rows");
  }
  return EmbeddingMatrix(std::move(ids), std::move(rows));
}

std::vector<Neighbor> knn(const Eigen::Ref<const VectorXf>& query, const EmbeddingMatrix& matrix,
                          std::size_t k, Order order, Metric metric,
                          const std::unordered_set<std::string>& exclude) {
  if (k < 1) throw ValidationError("knn: k must be at least 1");
  if (!matrix.empty() && static_cast<std::size_t>(query.size()) != matrix.dim()) {
    throw DimensionError("knn: query dim " + std::to_string(query.size()) + " != " +
                         std::to_string(matrix.dim()));
  }
  std::vector<Neighbor> pool;
  pool.reserve(matrix.count());
  for (std::size_t i = 0; i < matrix.count(); ++i) {
    const auto& id = matrix.ids()[i];
    if (exclude.count(id)) continue;
    const double score = metric == Metric::L2 ? l2_distance(query, matrix.row(i))
                                              : cosine_similarity(query, matrix.row(i));
    pool.push_back({id, score});
  }
  if (pool.empty()) throw ValidationError("knn: empty candidate set");

  // "closer first" for the requested order; L2 closer = smaller, cosine closer = larger.
  const bool ascending = (metric == Metric::L2) == (order == Order::Nearest);
  auto before = [ascending](const Neighbor& a, const Neighbor& b) {
    if (a.score != b.score) return ascending ? a.score < b.score : a.score > b.score;
    return a.id < b.id;
  };
  const std::size_t take = std::min(k, pool.size());
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take), pool.end(), before);
  pool.resize(take);
  return pool;
}

std::vector<std::string> knn_ids(const Eigen::Ref<const VectorXf>& query, const EmbeddingMatrix& matrix,
                                 std::size_t k, Order order, Metric metric,
                                 const std::unordered_set<std::string>& exclude) {
  std::vector<std::string> ids;
  for (auto& n : knn(query, matrix, k, order, metric, exclude)) ids.push_back(std::move(n.id));
  return ids;
}

}  // namespace hice
