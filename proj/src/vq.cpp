#include "vecinfer/vq.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <limits>
#include <numeric>
#include <thread>

#include "vecinfer/random.hpp"

namespace vecinfer {

void VQConfig::validate() const {
  if (b < 1 || b > 16) throw SizeError("VQConfig: b must be in [1, 16], got " + std::to_string(b));
  if (d < 1) throw ShapeError("VQConfig: d must be positive");
  if (head_dim < 1 || head_dim % d != 0) {
    throw ShapeError("VQConfig: d=" + std::to_string(d) + " does not divide head_dim=" +
                     std::to_string(head_dim));
  }
}

std::string VQConfig::name() const { return "d" + std::to_string(d) + "b" + std::to_string(b); }

VQConfig VQConfig::parse(std::string_view name, Index head_dim) {
  auto fail = [&] { return ShapeError("cannot parse VQ config '" + std::string(name) + "'"); };
  if (name.size() < 4 || name.front() != 'd') throw fail();
  const auto bpos = name.find('b');
  if (bpos == std::string_view::npos) throw fail();
  long long d = 0;
  int b = 0;
  const char* first = name.data();
  auto [p1, e1] = std::from_chars(first + 1, first + bpos, d);
  auto [p2, e2] = std::from_chars(first + bpos + 1, first + name.size(), b);
  if (e1 != std::errc() || p1 != first + bpos || e2 != std::errc() || p2 != first + name.size()) {
    throw fail();
  }
  VQConfig cfg{static_cast<Index>(d), b, head_dim};
  cfg.validate();
  return cfg;
}

Codebook::Codebook(VQConfig config, RowMatrix<float> centroids, std::string provenance)
    : config_(config), centroids_(std::move(centroids)), provenance_(std::move(provenance)) {
  config_.validate();
  if (centroids_.rows() != config_.num_centroids() || centroids_.cols() != config_.d) {
    throw ShapeError("Codebook: expected " + std::to_string(config_.num_centroids()) + "x" +
                     std::to_string(config_.d) + " centroids, got " +
                     std::to_string(centroids_.rows()) + "x" + std::to_string(centroids_.cols()));
  }
  if (!centroids_.allFinite()) throw CorruptionError("Codebook: non-finite centroid");
}

RowMatrix<float> to_subvectors(const HeadMatrix& x, Index d) {
  if (d < 1 || x.cols() % d != 0) throw ShapeError("to_subvectors: d does not divide row width");
  const Index m = x.cols() / d;
  return Eigen::Map<const RowMatrix<float>>(x.data(), x.rows() * m, d);
}

namespace {

float exact_sq_dist(const float* x, const float* c, Index d) {
  float acc = 0.0f;
  for (Index k = 0; k < d; ++k) {
    const float diff = x[k] - c[k];
    acc += diff * diff;
  }
  return acc;
}

// Candidates are screened with the expansion |c|^2 - 2 x.c over blocks of
// transposed centroids, keeping every centroid whose screened score is within
// a rounding margin of the running best. Survivors are re-ranked with the
// direct distance (lowest index wins ties), so the chosen index never depends
// on the screening arithmetic or on how rows were split across threads.
void nearest_range(const RowMatrix<float>& points, const RowMatrix<float>& centroids,
                   const RowMatrix<float>& centroids_t, const RowVector<float>& cnorm, float cmax,
                   Index begin, Index end, std::uint32_t* out, float* dist_out) {
  constexpr Index kLanes = 16;
  using Block = Eigen::Array<float, kLanes, 1>;
  const Index k = centroids.rows();
  const Index d = centroids.cols();
  const float slack = static_cast<float>(4 * d + 16) * std::numeric_limits<float>::epsilon();
  std::vector<float> neg2x(static_cast<std::size_t>(d));
  std::vector<std::pair<float, std::uint32_t>> candidates;
  for (Index r = begin; r < end; ++r) {
    const float* x = points.row(r).data();
    for (Index t = 0; t < d; ++t) neg2x[t] = -2.0f * x[t];
    const float margin = slack * (points.row(r).squaredNorm() + cmax) + std::numeric_limits<float>::min();
    float running = std::numeric_limits<float>::infinity();
    candidates.clear();
    auto consider = [&](float score, Index j) {
      if (score > running + margin) return;
      running = std::min(running, score);
      candidates.emplace_back(score, static_cast<std::uint32_t>(j));
    };
    Index j = 0;
    for (; j + kLanes <= k; j += kLanes) {
      Block s = Eigen::Map<const Block>(cnorm.data() + j);
      for (Index t = 0; t < d; ++t) s += neg2x[t] * Eigen::Map<const Block>(centroids_t.row(t).data() + j);
      if (s.minCoeff() > running + margin) continue;
      for (Index l = 0; l < kLanes; ++l) consider(s[l], j + l);
    }
    for (; j < k; ++j) {
      float score = cnorm[j];
      for (Index t = 0; t < d; ++t) score += neg2x[t] * centroids_t(t, j);
      consider(score, j);
    }

    const float cutoff = running + margin;
    float best = std::numeric_limits<float>::infinity();
    std::uint32_t best_j = 0;
    for (const auto& [score, cj] : candidates) {
      if (score > cutoff) continue;
      const float dist = exact_sq_dist(x, centroids.row(cj).data(), d);
      if (dist < best) {
        best = dist;
        best_j = cj;
      }
    }
    out[r] = best_j;
    if (dist_out) dist_out[r] = best;
  }
}

}  // namespace

std::vector<std::uint32_t> nearest_centroids(const RowMatrix<float>& points,
                                             const RowMatrix<float>& centroids,
                                             std::vector<float>* sq_dist, int threads) {
  if (points.cols() != centroids.cols()) throw ShapeError("nearest_centroids: width mismatch");
  if (centroids.rows() == 0) throw ShapeError("nearest_centroids: no centroids");
  const Index n = points.rows();
  std::vector<std::uint32_t> codes(static_cast<std::size_t>(n));
  if (sq_dist) sq_dist->assign(static_cast<std::size_t>(n), 0.0f);
  const RowVector<float> cnorm = centroids.rowwise().squaredNorm().transpose();
  const RowMatrix<float> centroids_t = centroids.transpose();
  const float cmax = cnorm.maxCoeff();
  float* dist_ptr = sq_dist ? sq_dist->data() : nullptr;

  const Index workers = std::clamp<Index>(threads, 1, std::max<Index>(1, n));
  if (workers == 1) {
    nearest_range(points, centroids, centroids_t, cnorm, cmax, 0, n, codes.data(), dist_ptr);
    return codes;
  }
  std::vector<std::thread> pool;
  const Index per = (n + workers - 1) / workers;
  for (Index w = 0; w < workers; ++w) {
    const Index begin = w * per;
    const Index end = std::min(n, begin + per);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      nearest_range(points, centroids, centroids_t, cnorm, cmax, begin, end, codes.data(), dist_ptr);
    });
  }
  for (auto& t : pool) t.join();
  return codes;
}

namespace {

RowMatrix<float> kmeanspp_init(const RowMatrix<float>& points, Index k, const KMeansOptions& opts,
                               Rng& rng) {
  const Index p = points.rows();
  const Index d = points.cols();
  RowMatrix<float> centroids(k, d);
  Index filled = 0;
  if (opts.init) {
    if (opts.init->cols() != d || opts.init->rows() > k) {
      throw ShapeError("kmeans: warm-start centroids do not fit the requested codebook");
    }
    filled = opts.init->rows();
    centroids.topRows(filled) = *opts.init;
  }
  std::vector<double> mind(static_cast<std::size_t>(p), std::numeric_limits<double>::infinity());
  auto absorb = [&](Index c) {
    const float* cp = centroids.row(c).data();
    for (Index i = 0; i < p; ++i) {
      const double dist = exact_sq_dist(points.row(i).data(), cp, d);
      if (dist < mind[i]) mind[i] = dist;
    }
  };
  if (filled == 0) {
    centroids.row(0) = points.row(static_cast<Index>(rng.uniform_index(p)));
    filled = 1;
  }
  for (Index c = 0; c < filled; ++c) absorb(c);

  for (Index c = filled; c < k; ++c) {
    const double total = std::accumulate(mind.begin(), mind.end(), 0.0);
    Index pick = 0;
    if (!(total > 0.0)) {
      pick = static_cast<Index>(rng.uniform_index(p));
    } else {
      const double target = rng.uniform() * total;
      double cum = 0.0;
      pick = -1;
      Index last_positive = 0;
      for (Index i = 0; i < p; ++i) {
        if (mind[i] <= 0.0) continue;
        last_positive = i;
        cum += mind[i];
        if (cum > target) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = last_positive;
    }
    centroids.row(c) = points.row(pick);
    absorb(c);
  }
  return centroids;
}

}  // namespace

KMeansResult kmeans(const RowMatrix<float>& points, Index num_centroids, const KMeansOptions& opts) {
  const Index p = points.rows();
  const Index d = points.cols();
  if (d < 1) throw ShapeError("kmeans: sub-vector width must be positive");
  if (num_centroids < 1) throw SizeError("kmeans: need at least one centroid");
  if (p < num_centroids) {
    throw InsufficientDataError("kmeans: " + std::to_string(p) + " points cannot seed " +
                                std::to_string(num_centroids) + " centroids");
  }
  if (!points.allFinite()) throw ShapeError("kmeans: non-finite training data");

  Rng rng(opts.seed);
  KMeansResult result;
  result.centroids = kmeanspp_init(points, num_centroids, opts, rng);
  RowMatrix<float>& centroids = result.centroids;

  std::vector<std::uint32_t> prev;
  std::vector<float> dist;
  RowMatrix<double> sums(num_centroids, d);
  std::vector<Index> counts(static_cast<std::size_t>(num_centroids));
  std::vector<Index> order(static_cast<std::size_t>(p));

  for (int it = 0; it < opts.max_iters; ++it) {
    std::vector<std::uint32_t> assign = nearest_centroids(points, centroids, &dist);
    result.objective.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));
    if (it > 0 && assign == prev) {
      result.converged = true;
      return result;
    }
    prev = std::move(assign);

    sums.setZero();
    std::fill(counts.begin(), counts.end(), 0);
    for (Index i = 0; i < p; ++i) {
      const auto c = prev[i];
      sums.row(c) += points.row(i).cast<double>();
      ++counts[c];
    }
    for (Index c = 0; c < num_centroids; ++c) {
      if (counts[c] > 0) centroids.row(c) = (sums.row(c) / double(counts[c])).cast<float>();
    }
    // Empty clusters move onto the worst-served points, largest distortion first.
    Index next_far = 0;
    bool sorted = false;
    for (Index c = 0; c < num_centroids; ++c) {
      if (counts[c] > 0) continue;
      if (!sorted) {
        std::iota(order.begin(), order.end(), Index{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](Index a, Index b) { return dist[a] > dist[b]; });
        sorted = true;
      }
      const Index pick = order[std::min(next_far++, p - 1)];
      centroids.row(c) = points.row(pick);
    }
    ++result.iterations;
  }

  nearest_centroids(points, centroids, &dist);
  result.objective.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));
  return result;
}

Codebook kmeans_train(const RowMatrix<float>& subvectors, const VQConfig& cfg,
                      const KMeansOptions& opts, KMeansResult* report) {
  cfg.validate();
  if (subvectors.cols() != cfg.d) {
    throw ShapeError("kmeans_train: sub-vectors are " + std::to_string(subvectors.cols()) +
                     " wide, config wants d=" + std::to_string(cfg.d));
  }
  KMeansResult result = kmeans(subvectors, cfg.num_centroids(), opts);
  std::string provenance = "kmeans " + cfg.name() + " seed=" + std::to_string(opts.seed) +
                           " iters=" + std::to_string(result.iterations) +
                           " points=" + std::to_string(subvectors.rows());
  Codebook cb(cfg, result.centroids, std::move(provenance));
  if (report) *report = std::move(result);
  return cb;
}

CodeMatrix encode(const HeadMatrix& x, const Codebook& cb, int threads) {
  const VQConfig& cfg = cb.config();
  if (x.cols() != cfg.head_dim) {
    throw ShapeError("encode: row width " + std::to_string(x.cols()) + " != head_dim " +
                     std::to_string(cfg.head_dim));
  }
  const Index m = cfg.num_subvectors();
  CodeMatrix codes(x.rows(), m);
  if (x.rows() == 0) return codes;
  const auto nearest = nearest_centroids(to_subvectors(x, cfg.d), cb.centroids(), nullptr, threads);
  for (Index i = 0; i < codes.size(); ++i) codes.data()[i] = static_cast<std::uint16_t>(nearest[i]);
  return codes;
}

HeadMatrix decode(const CodeMatrix& codes, const Codebook& cb) {
  const VQConfig& cfg = cb.config();
  const Index m = cfg.num_subvectors();
  if (codes.cols() != m) {
    throw ShapeError("decode: code matrix has " + std::to_string(codes.cols()) +
                     " columns, codebook expects " + std::to_string(m));
  }
  HeadMatrix out(codes.rows(), cfg.head_dim);
  const Index k = cb.size();
  for (Index r = 0; r < codes.rows(); ++r) {
    for (Index j = 0; j < m; ++j) {
      const Index c = codes(r, j);
      if (c >= k) {
        throw CorruptionError("decode: code " + std::to_string(c) + " at (" + std::to_string(r) +
                              ", " + std::to_string(j) + ") exceeds codebook size " +
                              std::to_string(k));
      }
      out.row(r).segment(j * cfg.d, cfg.d) = cb.centroids().row(c);
    }
  }
  return out;
}

double quantization_mse(const HeadMatrix& x, const Codebook& cb) {
  if (x.size() == 0) return 0.0;
  const HeadMatrix approx = decode(encode(x, cb), cb);
  return (x - approx).cast<double>().squaredNorm() / static_cast<double>(x.size());
}

std::uint64_t code_row_bytes(const VQConfig& cfg) {
  const auto bits = static_cast<std::uint64_t>(cfg.num_subvectors()) * static_cast<std::uint64_t>(cfg.b);
  return (bits + 7) / 8;
}

MemoryFootprint memory_footprint(const VQConfig& cfg, std::uint64_t n_tokens) {
  MemoryFootprint fp;
  fp.codebook_bytes = static_cast<std::uint64_t>(cfg.num_centroids()) * cfg.d * 2;
  fp.index_bytes = n_tokens * code_row_bytes(cfg);
  return fp;
}

double avg_bits(const VQConfig& cfg) { return double(cfg.b) / double(cfg.d); }

double avg_bits(const VQConfig& key_cfg, const VQConfig& value_cfg) {
  return 0.5 * (avg_bits(key_cfg) + avg_bits(value_cfg));
}

// ---------------------------------------------------------------------------
// Bit packing

PackedCodes::PackedCodes(Index cols, int bits)
    : cols_(cols), bits_(bits), row_bytes_((static_cast<std::size_t>(cols) * bits + 7) / 8) {
  if (bits < 1 || bits > 16) throw SizeError("PackedCodes: bits must be in [1, 16]");
}

void PackedCodes::append_row(const std::uint16_t* codes) {
  const std::size_t base = bytes_.size();
  bytes_.resize(base + row_bytes_, 0);
  std::uint8_t* row = bytes_.data() + base;
  const std::uint32_t mask = (1u << bits_) - 1u;
  for (Index j = 0; j < cols_; ++j) {
    const std::uint32_t v = codes[j];
    if (v > mask) throw CorruptionError("PackedCodes: code does not fit in " + std::to_string(bits_) + " bits");
    const std::size_t bitpos = static_cast<std::size_t>(j) * bits_;
    std::uint32_t shifted = v << (bitpos % 8);
    for (std::size_t byte = bitpos / 8; shifted != 0; ++byte, shifted >>= 8) {
      row[byte] |= static_cast<std::uint8_t>(shifted & 0xffu);
    }
  }
  ++rows_;
}

void PackedCodes::append(const PackedCodes& other) {
  if (other.cols_ != cols_ || other.bits_ != bits_) throw ShapeError("PackedCodes: layout mismatch");
  bytes_.insert(bytes_.end(), other.bytes_.begin(), other.bytes_.end());
  rows_ += other.rows_;
}

void PackedCodes::unpack_rows(Index first, Index count, std::uint16_t* out) const {
  if (first < 0 || count < 0 || first + count > rows_) throw ShapeError("PackedCodes: row range out of bounds");
  const std::uint32_t mask = (1u << bits_) - 1u;
  for (Index r = 0; r < count; ++r) {
    const std::uint8_t* row = row_data(first + r);
    for (Index j = 0; j < cols_; ++j) {
      const std::size_t bitpos = static_cast<std::size_t>(j) * bits_;
      const std::size_t byte = bitpos / 8;
      std::uint32_t window = 0;
      for (std::size_t k = 0; k < 3 && byte + k < row_bytes_; ++k) {
        window |= static_cast<std::uint32_t>(row[byte + k]) << (8 * k);
      }
      out[r * cols_ + j] = static_cast<std::uint16_t>((window >> (bitpos % 8)) & mask);
    }
  }
}

PackedCodes PackedCodes::pack(const CodeMatrix& codes, int bits) {
  PackedCodes packed(codes.cols(), bits);
  packed.bytes_.reserve(packed.row_bytes_ * static_cast<std::size_t>(codes.rows()));
  for (Index r = 0; r < codes.rows(); ++r) packed.append_row(codes.row(r).data());
  return packed;
}

CodeMatrix PackedCodes::unpack() const {
  CodeMatrix out(rows_, cols_);
  if (rows_ > 0) unpack_rows(0, rows_, out.data());
  return out;
}

PackedCodes PackedCodes::from_bytes(Index rows, Index cols, int bits, std::vector<std::uint8_t> bytes) {
  PackedCodes packed(cols, bits);
  if (bytes.size() != packed.row_bytes_ * static_cast<std::size_t>(rows)) {
    throw FormatError("PackedCodes: payload length does not match rows x row_bytes");
  }
  packed.rows_ = rows;
  packed.bytes_ = std::move(bytes);
  return packed;
}

}  // namespace vecinfer
