#include "vecinfer/kvcache.hpp"

#include <string>

namespace vecinfer {

void CacheConfig::validate() const {
  key_cfg.validate();
  value_cfg.validate();
  if (residual_len < 0) throw ShapeError("CacheConfig: residual_len must be >= 0");
  if (key_cfg.head_dim != head_dim || value_cfg.head_dim != head_dim) {
    throw ShapeError("CacheConfig: key/value configs must share head_dim");
  }
}

void check_codebooks(const CacheConfig& cfg, const Codebook& cb_k, const Codebook& cb_v) {
  if (!(cb_k.config() == cfg.key_cfg)) {
    throw ShapeError("key codebook " + cb_k.config().name() + " does not match cache config " +
                     cfg.key_cfg.name());
  }
  if (!(cb_v.config() == cfg.value_cfg)) {
    throw ShapeError("value codebook " + cb_v.config().name() + " does not match cache config " +
                     cfg.value_cfg.name());
  }
}

QuantizedKVCache::QuantizedKVCache(const CacheConfig& cfg)
    : cfg_(cfg),
      key_codes_(cfg.key_cfg.num_subvectors(), cfg.key_cfg.b),
      value_codes_(cfg.value_cfg.num_subvectors(), cfg.value_cfg.b),
      key_residual_(0, cfg.head_dim),
      value_residual_(0, cfg.head_dim) {
  cfg_.validate();
}

QuantizedKVCache QuantizedKVCache::from_parts(const CacheConfig& cfg, PackedCodes key_codes,
                                              PackedCodes value_codes, HeadMatrix key_residual,
                                              HeadMatrix value_residual) {
  QuantizedKVCache cache(cfg);
  if (key_codes.cols() != cfg.key_cfg.num_subvectors() || key_codes.bits() != cfg.key_cfg.b ||
      value_codes.cols() != cfg.value_cfg.num_subvectors() || value_codes.bits() != cfg.value_cfg.b) {
    throw CorruptionError("cache parts: code layout does not match config");
  }
  if (key_codes.rows() != value_codes.rows()) {
    throw CorruptionError("cache parts: key and value code row counts differ");
  }
  if (key_residual.rows() != value_residual.rows() || key_residual.cols() != cfg.head_dim ||
      value_residual.cols() != cfg.head_dim) {
    throw CorruptionError("cache parts: residual shapes disagree");
  }
  if (cfg.residual_len > 0 && key_residual.rows() >= 2 * cfg.residual_len) {
    throw CorruptionError("cache parts: residual window exceeds flush threshold");
  }
  if (cfg.residual_len == 0 && key_residual.rows() != 0) {
    throw CorruptionError("cache parts: residual rows present with residual_len 0");
  }
  cache.key_codes_ = std::move(key_codes);
  cache.value_codes_ = std::move(value_codes);
  cache.key_residual_ = std::move(key_residual);
  cache.value_residual_ = std::move(value_residual);
  return cache;
}

std::uint64_t QuantizedKVCache::cache_bytes() const {
  const auto q = static_cast<std::uint64_t>(quantized_len());
  const auto k = memory_footprint(cfg_.key_cfg, q);
  const auto v = memory_footprint(cfg_.value_cfg, q);
  const auto residual = static_cast<std::uint64_t>(residual_rows()) * cfg_.head_dim * 2 * 2;
  return k.index_bytes + v.index_bytes + residual + k.codebook_bytes + v.codebook_bytes;
}

bool operator==(const QuantizedKVCache& a, const QuantizedKVCache& b) {
  return a.cfg_ == b.cfg_ && a.key_codes_ == b.key_codes_ && a.value_codes_ == b.value_codes_ &&
         a.key_residual_.rows() == b.key_residual_.rows() &&
         a.key_residual_ == b.key_residual_ && a.value_residual_ == b.value_residual_;
}

void QuantizedKVCache::flush_oldest(Index rows, const Codebook& cb_k, const Codebook& cb_v) {
  if (rows <= 0) return;
  const Index keep = key_residual_.rows() - rows;
  key_codes_.append(PackedCodes::pack(encode(key_residual_.topRows(rows), cb_k), cfg_.key_cfg.b));
  value_codes_.append(
      PackedCodes::pack(encode(value_residual_.topRows(rows), cb_v), cfg_.value_cfg.b));
  HeadMatrix k_tail = key_residual_.bottomRows(keep);
  HeadMatrix v_tail = value_residual_.bottomRows(keep);
  key_residual_ = std::move(k_tail);
  value_residual_ = std::move(v_tail);
}

QuantizedKVCache prefill(const HeadMatrix& keys, const HeadMatrix& values, const SmoothingFactors& s,
                         const Codebook& cb_k, const Codebook& cb_v, const CacheConfig& cfg,
                         int threads) {
  cfg.validate();
  check_codebooks(cfg, cb_k, cb_v);
  if (keys.rows() != values.rows() || keys.cols() != values.cols()) {
    throw ShapeError("prefill: keys and values must have the same shape");
  }
  if (keys.cols() != cfg.head_dim) throw ShapeError("prefill: row width does not match head_dim");
  if (s.size() != cfg.head_dim) throw ShapeError("prefill: smoothing factors do not match head_dim");

  QuantizedKVCache cache(cfg);
  const Index n = keys.rows();
  const Index residual = std::min(n, cfg.residual_len);
  const Index quantized = n - residual;
  const HeadMatrix k_tilde = transform_keys(keys, s);

  if (quantized > 0) {
    cache.key_codes_ = PackedCodes::pack(encode(k_tilde.topRows(quantized), cb_k, threads), cfg.key_cfg.b);
    cache.value_codes_ =
        PackedCodes::pack(encode(values.topRows(quantized), cb_v, threads), cfg.value_cfg.b);
  }
  cache.key_residual_ = k_tilde.bottomRows(residual);
  cache.value_residual_ = values.bottomRows(residual);
  return cache;
}

void append(QuantizedKVCache& cache, const HeadMatrix& key, const HeadMatrix& value,
            const SmoothingFactors& s, const Codebook& cb_k, const Codebook& cb_v) {
  const CacheConfig& cfg = cache.cfg_;
  check_codebooks(cfg, cb_k, cb_v);
  if (key.rows() != 1 || value.rows() != 1 || key.cols() != cfg.head_dim ||
      value.cols() != cfg.head_dim) {
    throw ShapeError("append: expected single 1 x " + std::to_string(cfg.head_dim) + " rows");
  }
  if (s.size() != cfg.head_dim) throw ShapeError("append: smoothing factors do not match head_dim");

  const HeadMatrix k_tilde = transform_keys(key, s);
  const Index rows = cache.key_residual_.rows();
  cache.key_residual_.conservativeResize(rows + 1, Eigen::NoChange);
  cache.value_residual_.conservativeResize(rows + 1, Eigen::NoChange);
  cache.key_residual_.row(rows) = k_tilde.row(0);
  cache.value_residual_.row(rows) = value.row(0);

  if (cfg.residual_len == 0) {
    cache.flush_oldest(1, cb_k, cb_v);
  } else if (cache.key_residual_.rows() >= 2 * cfg.residual_len) {
    cache.flush_oldest(cfg.residual_len, cb_k, cb_v);
  }
}

std::pair<HeadMatrix, HeadMatrix> materialize(const QuantizedKVCache& cache, const Codebook& cb_k,
                                              const Codebook& cb_v) {
  const CacheConfig& cfg = cache.config();
  check_codebooks(cfg, cb_k, cb_v);
  const Index q = cache.quantized_len();
  const Index r = cache.residual_rows();
  HeadMatrix keys(q + r, cfg.head_dim);
  HeadMatrix values(q + r, cfg.head_dim);
  if (q > 0) {
    keys.topRows(q) = decode(cache.key_codes(), cb_k);
    values.topRows(q) = decode(cache.value_codes(), cb_v);
  }
  keys.bottomRows(r) = cache.key_residual();
  values.bottomRows(r) = cache.value_residual();
  return {std::move(keys), std::move(values)};
}

SharedCache::SharedCache(QuantizedKVCache initial)
    : working_(std::move(initial)), published_(std::make_shared<const QuantizedKVCache>(working_)) {}

std::shared_ptr<const QuantizedKVCache> SharedCache::snapshot() const {
  std::lock_guard lock(mutex_);
  return published_;
}

void SharedCache::append(const HeadMatrix& key, const HeadMatrix& value, const SmoothingFactors& s,
                         const Codebook& cb_k, const Codebook& cb_v) {
  // The working copy is mutated outside the lock; only the pointer swap is guarded.
  vecinfer::append(working_, key, value, s, cb_k, cb_v);
  auto next = std::make_shared<const QuantizedKVCache>(working_);
  std::lock_guard lock(mutex_);
  published_ = std::move(next);
}

}  // namespace vecinfer
