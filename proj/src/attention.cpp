#include "vecinfer/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <thread>

namespace vecinfer {

TrafficCounters& TrafficCounters::operator+=(const TrafficCounters& other) {
  code_bytes_read += other.code_bytes_read;
  codebook_bytes_read += other.codebook_bytes_read;
  residual_bytes_read += other.residual_bytes_read;
  fp16_equiv_bytes += other.fp16_equiv_bytes;
  materialized_bytes_written += other.materialized_bytes_written;
  materialized_bytes_read += other.materialized_bytes_read;
  return *this;
}

LookupTable build_lut(const HeadRow& query, const Codebook& cb_k) {
  const VQConfig& cfg = cb_k.config();
  if (query.size() != cfg.head_dim) {
    throw ShapeError("build_lut: query width " + std::to_string(query.size()) +
                     " != head_dim " + std::to_string(cfg.head_dim));
  }
  const Index m = cfg.num_subvectors();
  const Eigen::Map<const RowMatrix<float>> q_sub(query.data(), m, cfg.d);
  RowMatrix<float> entries = q_sub * cb_k.centroids().transpose();
  return LookupTable(std::move(entries), cfg.d);
}

namespace {

// Staging buffers for one split. Key codes are double-buffered so block i+1
// can be staged while block i's values are being accumulated; value codes
// for block i are staged while its scores are computed. With prefetch off the
// same loads happen lazily at the wait points.
class BlockPipeline {
 public:
  BlockPipeline(const QuantizedKVCache& cache, Index begin, Index end, Index block, bool prefetch,
                TrafficCounters& traffic)
      : keys_(cache.packed_key_codes()),
        values_(cache.packed_value_codes()),
        begin_(begin),
        end_(end),
        block_(block),
        prefetch_(prefetch),
        traffic_(traffic) {
    for (auto& buf : key_buf_) buf.resize(static_cast<std::size_t>(block_ * keys_.cols()));
    value_buf_.resize(static_cast<std::size_t>(block_ * values_.cols()));
  }

  Index num_blocks() const { return (end_ - begin_ + block_ - 1) / block_; }
  Index block_begin(Index i) const { return begin_ + i * block_; }
  Index block_rows(Index i) const { return std::min(block_, end_ - block_begin(i)); }

  void load_keys(Index i) {
    if (i >= num_blocks()) return;
    auto& slot = key_slot_[i % 2];
    if (slot == i) return;
    keys_.unpack_rows(block_begin(i), block_rows(i), key_buf_[i % 2].data());
    traffic_.code_bytes_read += keys_.row_bytes() * static_cast<std::uint64_t>(block_rows(i));
    slot = i;
  }

  void prefetch_keys(Index i) {
    if (prefetch_) load_keys(i);
  }

  const std::uint16_t* wait_keys(Index i) {
    load_keys(i);
    return key_buf_[i % 2].data();
  }

  void prefetch_values(Index i) {
    if (prefetch_) load_values(i);
  }

  const std::uint16_t* wait_values(Index i) {
    load_values(i);
    return value_buf_.data();
  }

 private:
  void load_values(Index i) {
    if (value_slot_ == i) return;
    values_.unpack_rows(block_begin(i), block_rows(i), value_buf_.data());
    traffic_.code_bytes_read += values_.row_bytes() * static_cast<std::uint64_t>(block_rows(i));
    value_slot_ = i;
  }

  const PackedCodes& keys_;
  const PackedCodes& values_;
  Index begin_;
  Index end_;
  Index block_;
  bool prefetch_;
  TrafficCounters& traffic_;
  std::vector<std::uint16_t> key_buf_[2];
  Index key_slot_[2] = {-1, -1};
  std::vector<std::uint16_t> value_buf_;
  Index value_slot_ = -1;
};

// Folds one block of scores into (m, l) and returns the rescale factor for o.
float online_softmax_step(PartialState& st, std::vector<float>& scores, Index rows) {
  float block_max = -std::numeric_limits<float>::infinity();
  for (Index r = 0; r < rows; ++r) block_max = std::max(block_max, scores[r]);
  const float m_new = std::max(st.m, block_max);
  float row_sum = 0.0f;
  for (Index r = 0; r < rows; ++r) {
    scores[r] = std::exp(scores[r] - m_new);
    row_sum += scores[r];
  }
  const float rescale = std::exp(st.m - m_new);
  st.l = rescale * st.l + row_sum;
  st.m = m_new;
  return rescale;
}

PartialState run_quantized_range(const LookupTable& lut, const QuantizedKVCache& cache,
                                 const Codebook& cb_v, Index begin, Index end,
                                 const TileConfig& tiles, float scale, TrafficCounters& traffic) {
  const VQConfig& vcfg = cb_v.config();
  const Index m_v = vcfg.num_subvectors();
  const Index m_k = lut.num_subvectors();
  const auto& vc = cb_v.centroids();

  PartialState st;
  st.o = HeadRow::Zero(vcfg.head_dim);
  BlockPipeline pipe(cache, begin, end, tiles.block_size, tiles.prefetch, traffic);
  std::vector<float> p(static_cast<std::size_t>(tiles.block_size));

  pipe.load_keys(0);
  for (Index i = 0; i < pipe.num_blocks(); ++i) {
    const Index rows = pipe.block_rows(i);
    pipe.prefetch_values(i);

    const std::uint16_t* kcodes = pipe.wait_keys(i);
    for (Index r = 0; r < rows; ++r) p[r] = lut.gather(kcodes + r * m_k) * scale;
    const float rescale = online_softmax_step(st, p, rows);

    const std::uint16_t* vcodes = pipe.wait_values(i);
    pipe.prefetch_keys(i + 1);

    st.o *= rescale;
    for (Index r = 0; r < rows; ++r) {
      const std::uint16_t* codes = vcodes + r * m_v;
      for (Index j = 0; j < m_v; ++j) {
        st.o.segment(j * vcfg.d, vcfg.d).noalias() += p[r] * vc.row(codes[j]);
      }
    }
  }
  return st;
}

void run_residual(const HeadRow& query, const QuantizedKVCache& cache, Index block, float scale,
                  PartialState& st, TrafficCounters& traffic) {
  const HeadMatrix& keys = cache.key_residual();
  const HeadMatrix& values = cache.value_residual();
  const Index n = keys.rows();
  std::vector<float> p(static_cast<std::size_t>(block));
  for (Index b0 = 0; b0 < n; b0 += block) {
    const Index rows = std::min(block, n - b0);
    for (Index r = 0; r < rows; ++r) p[r] = keys.row(b0 + r).dot(query) * scale;
    const float rescale = online_softmax_step(st, p, rows);
    st.o *= rescale;
    for (Index r = 0; r < rows; ++r) st.o.noalias() += p[r] * values.row(b0 + r);
    traffic.residual_bytes_read += static_cast<std::uint64_t>(rows) * keys.cols() * 2 * 2;
  }
}

}  // namespace

AttentionOutput fused_decode_attention(const HeadRow& query, const QuantizedKVCache& cache,
                                       const Codebook& cb_k, const Codebook& cb_v,
                                       const TileConfig& tiles) {
  const CacheConfig& cfg = cache.config();
  check_codebooks(cfg, cb_k, cb_v);
  if (cache.empty()) throw EmptyInputError("fused_decode_attention: cache is empty");
  if (query.size() != cfg.head_dim) throw ShapeError("fused_decode_attention: query width mismatch");
  if (tiles.block_size < 1) throw ShapeError("TileConfig: block_size must be >= 1");
  if (tiles.num_splits < 1) throw ShapeError("TileConfig: num_splits must be >= 1");

  const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));
  const Index q_rows = cache.quantized_len();
  const LookupTable lut = q_rows > 0 ? build_lut(query, cb_k) : LookupTable{};

  const auto splits = static_cast<std::size_t>(tiles.num_splits);
  std::vector<PartialState> partials(splits);
  std::vector<TrafficCounters> split_traffic(splits);

  auto run_split = [&](std::size_t s) {
    const Index begin = q_rows * static_cast<Index>(s) / tiles.num_splits;
    const Index end = q_rows * static_cast<Index>(s + 1) / tiles.num_splits;
    partials[s] = run_quantized_range(lut, cache, cb_v, begin, end, tiles, scale, split_traffic[s]);
    if (s + 1 == splits) run_residual(query, cache, tiles.block_size, scale, partials[s], split_traffic[s]);
  };

  const auto workers = std::clamp<std::size_t>(static_cast<std::size_t>(tiles.threads), 1, splits);
  if (workers == 1) {
    for (std::size_t s = 0; s < splits; ++s) run_split(s);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t s = w; s < splits; s += workers) run_split(s);
      });
    }
    for (auto& t : pool) t.join();
  }

  AttentionOutput out = split_reduce(partials);
  for (const auto& t : split_traffic) out.traffic += t;
  // Each codebook is charged once per call, and only when codes are read.
  if (q_rows > 0) {
    out.traffic.codebook_bytes_read = memory_footprint(cfg.key_cfg, 0).codebook_bytes +
                                      memory_footprint(cfg.value_cfg, 0).codebook_bytes;
  }
  out.traffic.fp16_equiv_bytes = static_cast<std::uint64_t>(cache.total_len()) * cfg.head_dim * 2 * 2;
  return out;
}

AttentionOutput split_reduce(std::span<const PartialState> partials) {
  if (partials.empty()) throw EmptyInputError("split_reduce: no partial states");
  float m = -std::numeric_limits<float>::infinity();
  Index width = -1;
  for (const auto& p : partials) {
    if (p.empty()) continue;
    m = std::max(m, p.m);
    if (width < 0) width = p.o.size();
    if (p.o.size() != width) throw ShapeError("split_reduce: partial widths differ");
  }
  if (width < 0) throw EmptyInputError("split_reduce: every partial is empty");

  float l = 0.0f;
  HeadRow o = HeadRow::Zero(width);
  for (const auto& p : partials) {
    if (p.empty()) continue;
    const float w = std::exp(p.m - m);
    l += w * p.l;
    o.noalias() += w * p.o;
  }
  AttentionOutput out;
  out.o = o / l;
  out.lse = m + std::log(l);
  return out;
}

AttentionOutput reference_attention(const HeadRow& query, const HeadMatrix& keys,
                                    const HeadMatrix& values) {
  if (keys.rows() == 0) throw EmptyInputError("reference_attention: no tokens");
  if (keys.rows() != values.rows() || keys.cols() != query.size() || values.cols() != query.size()) {
    throw ShapeError("reference_attention: shapes disagree");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
  const Vector<double> s = (keys.cast<double>() * query.cast<double>().transpose()) * scale;
  const double m = s.maxCoeff();
  const Vector<double> p = (s.array() - m).exp().matrix();
  const double l = p.sum();

  AttentionOutput out;
  out.o = ((p.transpose() * values.cast<double>()) / l).cast<float>();
  out.lse = static_cast<float>(m + std::log(l));
  out.traffic.fp16_equiv_bytes = static_cast<std::uint64_t>(keys.rows()) * keys.cols() * 2 * 2;
  return out;
}

AttentionOutput dequantize_then_attend(const HeadRow& query, const QuantizedKVCache& cache,
                                       const Codebook& cb_k, const Codebook& cb_v) {
  const CacheConfig& cfg = cache.config();
  auto [keys, values] = materialize(cache, cb_k, cb_v);
  AttentionOutput out = reference_attention(query, keys, values);
  const auto q = static_cast<std::uint64_t>(cache.quantized_len());
  const auto r = static_cast<std::uint64_t>(cache.residual_rows());
  const auto n = q + r;
  out.traffic = expected_traffic(cfg, q, r);
  // Dequantized tensors go out to memory once and come back for attention.
  out.traffic.materialized_bytes_written = q * cfg.head_dim * 2 * 2;
  out.traffic.materialized_bytes_read = n * cfg.head_dim * 2 * 2;
  return out;
}

TrafficCounters expected_traffic(const CacheConfig& cfg, std::uint64_t quantized_rows,
                                 std::uint64_t residual_rows) {
  const auto k = memory_footprint(cfg.key_cfg, quantized_rows);
  const auto v = memory_footprint(cfg.value_cfg, quantized_rows);
  TrafficCounters t;
  t.code_bytes_read = k.index_bytes + v.index_bytes;
  t.codebook_bytes_read = quantized_rows > 0 ? k.codebook_bytes + v.codebook_bytes : 0;
  t.residual_bytes_read = residual_rows * cfg.head_dim * 2 * 2;
  t.fp16_equiv_bytes = (quantized_rows + residual_rows) * cfg.head_dim * 2 * 2;
  return t;
}

TrafficReport traffic_report(const AttentionOutput& out, std::uint64_t n_tokens,
                             const CacheConfig& cfg, std::uint64_t residual_rows) {
  if (residual_rows > n_tokens) throw ShapeError("traffic_report: residual rows exceed token count");
  TrafficReport rep;
  const std::uint64_t fp16 = n_tokens * cfg.head_dim * 2 * 2;
  rep.counted_bytes = out.traffic.cache_bytes_read();
  rep.formula_bytes = expected_traffic(cfg, n_tokens - residual_rows, residual_rows).cache_bytes_read();
  rep.counters_match_formula = rep.counted_bytes == rep.formula_bytes && out.traffic.fp16_equiv_bytes == fp16;
  rep.bytes_vs_fp16 = fp16 > 0 ? double(rep.counted_bytes) / double(fp16) : 0.0;
  rep.compression_ratio = rep.counted_bytes > 0 ? double(fp16) / double(rep.counted_bytes) : 0.0;
  return rep;
}

double max_relative_error(const HeadRow& a, const HeadRow& b) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: size mismatch");
  if (a.size() == 0) return 0.0;
  const double diff = (a.cast<double>() - b.cast<double>()).cwiseAbs().maxCoeff();
  const double ref = b.cast<double>().cwiseAbs().maxCoeff();
  return ref > 0.0 ? diff / ref : diff;
}

}  // namespace vecinfer
