#pragma once

// Product quantization of head vectors.
//
// A D-wide row is cut into M = D/d sub-vectors; each sub-vector is replaced by
// the index of its nearest centroid in a shared codebook of 2^b entries.
// Config strings follow the `d{n}b{m}` notation, e.g. "d4b8" is 4-wide
// sub-vectors with 8-bit codes (2 bits per element).

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vecinfer/types.hpp"

namespace vecinfer {

struct VQConfig {
  Index d = 4;         // sub-vector width
  int b = 8;           // code bits, 1..16
  Index head_dim = 128;

  Index num_subvectors() const { return head_dim / d; }
  Index num_centroids() const { return Index{1} << b; }

  /// Throws ShapeError/SizeError when the invariants do not hold.
  void validate() const;

  /// "d4b8"
  std::string name() const;
  static VQConfig parse(std::string_view name, Index head_dim);

  friend bool operator==(const VQConfig&, const VQConfig&) = default;
};

class Codebook {
 public:
  Codebook() = default;
  Codebook(VQConfig config, RowMatrix<float> centroids, std::string provenance = {});

  const VQConfig& config() const { return config_; }
  const RowMatrix<float>& centroids() const { return centroids_; }
  const std::string& provenance() const { return provenance_; }
  void set_provenance(std::string p) { provenance_ = std::move(p); }

  Index size() const { return centroids_.rows(); }
  Index dim() const { return centroids_.cols(); }

 private:
  VQConfig config_;
  RowMatrix<float> centroids_;
  std::string provenance_;
};

struct KMeansOptions {
  int max_iters = 30;
  std::uint64_t seed = 0;
  // Warm start: these rows become the first centroids and k-means++ fills
  // the rest. Used to chain codebooks of growing size on the same data.
  std::optional<RowMatrix<float>> init;
};

struct KMeansResult {
  RowMatrix<float> centroids;
  // objective[i] is the distortion after the i-th assignment step; the last
  // entry is the distortion of the returned centroids.
  std::vector<double> objective;
  int iterations = 0;
  bool converged = false;

  double final_objective() const { return objective.back(); }
};

/// Lloyd's algorithm with k-means++ seeding over the rows of `points`.
/// Deterministic for a fixed seed. Throws InsufficientDataError if there are
/// fewer points than centroids.
KMeansResult kmeans(const RowMatrix<float>& points, Index num_centroids, const KMeansOptions& opts);

/// Trains a 2^b-entry codebook on P x d sub-vectors.
Codebook kmeans_train(const RowMatrix<float>& subvectors, const VQConfig& cfg,
                      const KMeansOptions& opts, KMeansResult* report = nullptr);

/// Reshapes N x D rows into (N * D/d) x d sub-vector rows.
RowMatrix<float> to_subvectors(const HeadMatrix& x, Index d);

/// Index of the nearest centroid for every row of `points` (ties go to the
/// lowest index). `sq_dist`, when non-null, receives the squared distance.
/// Results are identical for any `threads` value.
std::vector<std::uint32_t> nearest_centroids(const RowMatrix<float>& points,
                                             const RowMatrix<float>& centroids,
                                             std::vector<float>* sq_dist = nullptr,
                                             int threads = 1);

CodeMatrix encode(const HeadMatrix& x, const Codebook& cb, int threads = 1);

/// Throws CorruptionError on any code >= 2^b.
HeadMatrix decode(const CodeMatrix& codes, const Codebook& cb);

/// Mean over all entries of (X - decode(encode(X)))^2.
double quantization_mse(const HeadMatrix& x, const Codebook& cb);

struct MemoryFootprint {
  std::uint64_t codebook_bytes = 0;
  std::uint64_t index_bytes = 0;
};

/// Bytes per packed code row: ceil(M * b / 8).
std::uint64_t code_row_bytes(const VQConfig& cfg);

/// Codebook at 16-bit precision plus packed indices for n_tokens rows.
MemoryFootprint memory_footprint(const VQConfig& cfg, std::uint64_t n_tokens);

/// b / d
double avg_bits(const VQConfig& cfg);
/// Mean of the key and value bits per element.
double avg_bits(const VQConfig& key_cfg, const VQConfig& value_cfg);

/// Codes packed LSB-first, rows padded to a byte boundary.
class PackedCodes {
 public:
  PackedCodes() = default;
  PackedCodes(Index cols, int bits);

  static PackedCodes pack(const CodeMatrix& codes, int bits);
  CodeMatrix unpack() const;

  void append_row(const std::uint16_t* codes);
  void append(const PackedCodes& other);
  // Unpacks rows [first, first + count) into `out` (count x cols).
  void unpack_rows(Index first, Index count, std::uint16_t* out) const;

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  int bits() const { return bits_; }
  std::size_t row_bytes() const { return row_bytes_; }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t>& mutable_bytes() { return bytes_; }
  const std::uint8_t* row_data(Index r) const { return bytes_.data() + r * row_bytes_; }

  static PackedCodes from_bytes(Index rows, Index cols, int bits, std::vector<std::uint8_t> bytes);

  friend bool operator==(const PackedCodes&, const PackedCodes&) = default;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  int bits_ = 8;
  std::size_t row_bytes_ = 0;
  std::vector<std::uint8_t> bytes_;
};

}  // namespace vecinfer
