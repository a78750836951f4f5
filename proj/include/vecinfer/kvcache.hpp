#pragma once

// Quantized KV cache for one (layer, head) stream.
//
// Token order is: all quantized rows first, then the full-precision residual
// window. Keys are stored dual-transformed in both regions; values are never
// transformed. Appends go to the residual window, and once the window holds
// 2 * residual_len rows the oldest residual_len rows are encoded in one batch.

#include <memory>
#include <mutex>
#include <utility>

#include "vecinfer/transform.hpp"
#include "vecinfer/vq.hpp"

namespace vecinfer {

struct CacheConfig {
  VQConfig key_cfg;
  VQConfig value_cfg;
  Index residual_len = 128;
  Index head_dim = 128;

  void validate() const;
  friend bool operator==(const CacheConfig&, const CacheConfig&) = default;
};

class QuantizedKVCache {
 public:
  QuantizedKVCache() = default;
  explicit QuantizedKVCache(const CacheConfig& cfg);

  /// Reassembles a cache from stored parts, checking every invariant.
  static QuantizedKVCache from_parts(const CacheConfig& cfg, PackedCodes key_codes,
                                     PackedCodes value_codes, HeadMatrix key_residual,
                                     HeadMatrix value_residual);

  const CacheConfig& config() const { return cfg_; }
  Index total_len() const { return quantized_len() + residual_rows(); }
  Index quantized_len() const { return key_codes_.rows(); }
  Index residual_rows() const { return key_residual_.rows(); }
  bool empty() const { return total_len() == 0; }

  const PackedCodes& packed_key_codes() const { return key_codes_; }
  const PackedCodes& packed_value_codes() const { return value_codes_; }
  CodeMatrix key_codes() const { return key_codes_.unpack(); }
  CodeMatrix value_codes() const { return value_codes_.unpack(); }
  const HeadMatrix& key_residual() const { return key_residual_; }
  const HeadMatrix& value_residual() const { return value_residual_; }

  /// Packed indices for both streams + residual rows at 16 bits + both codebooks.
  std::uint64_t cache_bytes() const;

  friend bool operator==(const QuantizedKVCache& a, const QuantizedKVCache& b);

  friend QuantizedKVCache prefill(const HeadMatrix& keys, const HeadMatrix& values,
                                  const SmoothingFactors& s, const Codebook& cb_k,
                                  const Codebook& cb_v, const CacheConfig& cfg, int threads);
  friend void append(QuantizedKVCache& cache, const HeadMatrix& key, const HeadMatrix& value,
                     const SmoothingFactors& s, const Codebook& cb_k, const Codebook& cb_v);

 private:
  void flush_oldest(Index rows, const Codebook& cb_k, const Codebook& cb_v);

  CacheConfig cfg_;
  PackedCodes key_codes_;
  PackedCodes value_codes_;
  HeadMatrix key_residual_;
  HeadMatrix value_residual_;
};

/// Dual-transforms the keys, keeps the trailing residual_len tokens in full
/// precision and encodes the rest.
QuantizedKVCache prefill(const HeadMatrix& keys, const HeadMatrix& values, const SmoothingFactors& s,
                         const Codebook& cb_k, const Codebook& cb_v, const CacheConfig& cfg,
                         int threads = 1);

/// Appends one decode-step token (1 x D key and value rows).
void append(QuantizedKVCache& cache, const HeadMatrix& key, const HeadMatrix& value,
            const SmoothingFactors& s, const Codebook& cb_k, const Codebook& cb_v);

/// (decoded keys || key residual, decoded values || value residual) in token order.
std::pair<HeadMatrix, HeadMatrix> materialize(const QuantizedKVCache& cache, const Codebook& cb_k,
                                              const Codebook& cb_v);

/// Throws ShapeError unless the codebooks match the cache configuration.
void check_codebooks(const CacheConfig& cfg, const Codebook& cb_k, const Codebook& cb_v);

// Single writer, many readers. Readers take immutable snapshots and never see
// a window in the middle of a flush.
class SharedCache {
 public:
  explicit SharedCache(QuantizedKVCache initial);

  std::shared_ptr<const QuantizedKVCache> snapshot() const;
  void append(const HeadMatrix& key, const HeadMatrix& value, const SmoothingFactors& s,
              const Codebook& cb_k, const Codebook& cb_v);

 private:
  mutable std::mutex mutex_;
  QuantizedKVCache working_;
  std::shared_ptr<const QuantizedKVCache> published_;
};

}  // namespace vecinfer
