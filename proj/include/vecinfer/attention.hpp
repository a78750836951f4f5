#pragma once

// Fused dequantize-attention for single-token decode.
//
// Key scores never materialize the keys: the transformed query is multiplied
// once against the key codebook (the lookup table), and each token's score is
// a sum of M table gathers. Values are decoded block by block straight into
// the online-softmax accumulator. The quantized range can be cut into
// contiguous splits that are merged with a logsumexp reduction.

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "vecinfer/kvcache.hpp"

namespace vecinfer {

class LookupTable {
 public:
  LookupTable() = default;
  LookupTable(RowMatrix<float> entries, Index d) : entries_(std::move(entries)), d_(d) {}

  /// entries(m, j) = dot(query sub-vector m, centroid j); M x 2^b.
  const RowMatrix<float>& entries() const { return entries_; }
  Index num_subvectors() const { return entries_.rows(); }
  Index subvector_dim() const { return d_; }

  /// Unscaled score of one token given its M codes.
  float gather(const std::uint16_t* codes) const {
    float acc = 0.0f;
    for (Index m = 0; m < entries_.rows(); ++m) acc += entries_(m, codes[m]);
    return acc;
  }

 private:
  RowMatrix<float> entries_;
  Index d_ = 0;
};

struct TileConfig {
  Index block_size = 128;
  int num_splits = 1;
  // Stage the next block while the current one is consumed. Results are
  // bit-identical either way; only the point where loads happen moves.
  bool prefetch = true;
  // Worker threads for splits. Merging is always in split order.
  int threads = 1;
};

// Bytes charged at 16-bit storage so they line up with memory_footprint.
struct TrafficCounters {
  std::uint64_t code_bytes_read = 0;
  std::uint64_t codebook_bytes_read = 0;
  std::uint64_t residual_bytes_read = 0;
  std::uint64_t fp16_equiv_bytes = 0;
  // Only the dequantize-then-attend baseline touches these.
  std::uint64_t materialized_bytes_written = 0;
  std::uint64_t materialized_bytes_read = 0;

  std::uint64_t cache_bytes_read() const {
    return code_bytes_read + codebook_bytes_read + residual_bytes_read;
  }
  TrafficCounters& operator+=(const TrafficCounters& other);
  friend bool operator==(const TrafficCounters&, const TrafficCounters&) = default;
};

struct AttentionOutput {
  HeadRow o;
  float lse = 0.0f;
  TrafficCounters traffic;
};

// Unnormalized online-softmax state over a contiguous token range.
struct PartialState {
  HeadRow o;  // sum_t exp(s_t - m) v_t
  float l = 0.0f;
  float m = -std::numeric_limits<float>::infinity();

  bool empty() const { return l == 0.0f; }
};

LookupTable build_lut(const HeadRow& query, const Codebook& cb_k);

AttentionOutput fused_decode_attention(const HeadRow& query, const QuantizedKVCache& cache,
                                       const Codebook& cb_k, const Codebook& cb_v,
                                       const TileConfig& tiles = {});

/// Exact softmax(q K^T / sqrt(D)) V with one global max, accumulated in double.
AttentionOutput reference_attention(const HeadRow& query, const HeadMatrix& keys,
                                    const HeadMatrix& values);

/// Logsumexp merge of partial states, in the given order.
AttentionOutput split_reduce(std::span<const PartialState> partials);

/// Non-fused baseline: materialize the whole cache, then attend.
AttentionOutput dequantize_then_attend(const HeadRow& query, const QuantizedKVCache& cache,
                                       const Codebook& cb_k, const Codebook& cb_v);

/// What fused_decode_attention must read for this cache shape, from the
/// storage formulas alone.
TrafficCounters expected_traffic(const CacheConfig& cfg, std::uint64_t quantized_rows,
                                 std::uint64_t residual_rows);

struct TrafficReport {
  double compression_ratio = 0.0;  // fp16 bytes / bytes read
  double bytes_vs_fp16 = 0.0;      // bytes read / fp16 bytes
  std::uint64_t counted_bytes = 0;
  std::uint64_t formula_bytes = 0;
  bool counters_match_formula = false;
};

TrafficReport traffic_report(const AttentionOutput& out, std::uint64_t n_tokens,
                             const CacheConfig& cfg, std::uint64_t residual_rows);

/// max_i |a_i - b_i| / max_i |b_i| (absolute difference when b is all zero).
double max_relative_error(const HeadRow& a, const HeadRow& b);

}  // namespace vecinfer
