#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>

#include "oracles.hpp"
#include "vecinfer/random.hpp"
#include "vecinfer/synthetic.hpp"
#include "vecinfer/transform.hpp"
#include "vecinfer/vq.hpp"

using namespace vecinfer;

namespace {

RowMatrix<float> points(std::initializer_list<std::initializer_list<float>> rows) {
  RowMatrix<float> m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (float v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

// Sorted copy so centroid order does not matter.
std::vector<std::vector<float>> sorted_rows(const RowMatrix<float>& m) {
  std::vector<std::vector<float>> rows;
  for (Index r = 0; r < m.rows(); ++r) rows.emplace_back(m.row(r).data(), m.row(r).data() + m.cols());
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

TEST_CASE("VQConfig parsing and validation") {
  const auto cfg = VQConfig::parse("d4b8", 128);
  CHECK(cfg.d == 4);
  CHECK(cfg.b == 8);
  CHECK(cfg.num_subvectors() == 32);
  CHECK(cfg.num_centroids() == 256);
  CHECK(cfg.name() == "d4b8");
  CHECK_THROWS_AS(VQConfig::parse("d3b8", 128), ShapeError);
  CHECK_THROWS_AS(VQConfig::parse("d4b17", 128), SizeError);
  CHECK_THROWS_AS(VQConfig::parse("d4b0", 128), SizeError);
  CHECK_THROWS_AS(VQConfig::parse("x4b8", 128), ShapeError);
  CHECK_THROWS_AS(VQConfig::parse("d4b8x", 128), ShapeError);
}

TEST_CASE("kmeans on two singleton clusters") {
  const auto pts = points({{0, 0}, {10, 10}});
  const auto cb = kmeans_train(pts, VQConfig{2, 1, 2}, {30, 1, {}});
  CHECK(sorted_rows(cb.centroids()) == std::vector<std::vector<float>>{{0, 0}, {10, 10}});
}

TEST_CASE("kmeans matches brute-force optimal 2-means") {
  const auto pts = points({{0, 0}, {0, 1}, {10, 10}, {10, 11}});
  RowMatrix<double> best;
  const double opt = oracle::brute_force_kmeans(pts.cast<double>(), 2, &best);
  CHECK(opt == doctest::Approx(1.0));
  for (std::uint64_t seed : {0, 1, 2, 3}) {
    KMeansResult km;
    const auto cb = kmeans_train(pts, VQConfig{2, 1, 2}, {30, seed, {}}, &km);
    const auto rows = sorted_rows(cb.centroids());
    CHECK(rows[0][0] == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(rows[0][1] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(rows[1][0] == doctest::Approx(10.0).epsilon(1e-6));
    CHECK(rows[1][1] == doctest::Approx(10.5).epsilon(1e-6));
    CHECK(km.final_objective() == doctest::Approx(opt));
  }
}

TEST_CASE("kmeans with identical points reseeds the empty cluster") {
  RowMatrix<float> pts = RowMatrix<float>::Constant(6, 3, 2.5f);
  KMeansResult km;
  const auto cb = kmeans_train(pts, VQConfig{3, 1, 3}, {30, 5, {}}, &km);
  CHECK(cb.size() == 2);
  CHECK((cb.centroids().array() == 2.5f).all());
  CHECK(km.final_objective() == 0.0);
}

TEST_CASE("kmeans rejects too few points") {
  RowMatrix<float> pts = RowMatrix<float>::Ones(3, 2);
  CHECK_THROWS_AS(kmeans_train(pts, VQConfig{2, 2, 2}, {}), InsufficientDataError);
}

TEST_CASE("kmeans objective is non-increasing and deterministic") {
  const HeadMatrix x = generate_keys({2000, 16, 2, 8.0f, Tail::Laplace, 21}).data;
  const auto sub = to_subvectors(x, 4);
  KMeansResult a;
  KMeansResult b;
  const auto cb1 = kmeans_train(sub, VQConfig{4, 6, 16}, {30, 9, {}}, &a);
  const auto cb2 = kmeans_train(sub, VQConfig{4, 6, 16}, {30, 9, {}}, &b);
  CHECK(cb1.centroids() == cb2.centroids());
  CHECK(a.objective == b.objective);
  REQUIRE(a.objective.size() >= 2);
  for (std::size_t i = 1; i < a.objective.size(); ++i) {
    CHECK(a.objective[i] <= a.objective[i - 1] * (1.0 + 1e-6));
  }
  CHECK(a.iterations <= 30);
}

TEST_CASE("larger codebooks never do worse when warm-started from smaller ones") {
  const HeadMatrix x = generate_keys({1500, 16, 3, 10.0f, Tail::Gauss, 4}).data;
  const auto sub = to_subvectors(x, 4);
  std::optional<RowMatrix<float>> warm;
  double prev = std::numeric_limits<double>::infinity();
  for (int b = 2; b <= 8; ++b) {
    KMeansResult km;
    const auto cb = kmeans_train(sub, VQConfig{4, b, 16}, {30, 11, warm}, &km);
    CHECK(km.final_objective() <= prev * (1.0 + 1e-6));
    prev = km.final_objective();
    warm = cb.centroids();
  }
}

TEST_CASE("encode picks the nearest centroid with lowest-index ties") {
  const Codebook cb(VQConfig{2, 1, 2}, points({{0, 0}, {1, 1}}));
  HeadMatrix x(2, 2);
  x << 0.9f, 1.2f,
       0.5f, 0.5f;
  const CodeMatrix codes = encode(x, cb);
  CHECK(codes(0, 0) == 1);
  CHECK(codes(1, 0) == 0);
  CHECK_THROWS_AS(encode(HeadMatrix::Ones(1, 4), cb), ShapeError);
}

TEST_CASE("encode agrees with exhaustive nearest search") {
  const HeadMatrix x = gaussian_matrix(300, 32, 17);
  const HeadMatrix train = gaussian_matrix(600, 32, 18);
  const VQConfig cfg{4, 7, 32};
  const auto cb = kmeans_train(to_subvectors(train, 4), cfg, {10, 3, {}});
  const CodeMatrix codes = encode(x, cb);
  const auto sub = to_subvectors(x, 4);
  for (Index i = 0; i < sub.rows(); ++i) {
    Index best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (Index j = 0; j < cb.size(); ++j) {
      float acc = 0.0f;
      for (Index k = 0; k < 4; ++k) {
        const float diff = sub(i, k) - cb.centroids()(j, k);
        acc += diff * diff;
      }
      if (acc < best_d) {
        best_d = acc;
        best = j;
      }
    }
    REQUIRE(codes.data()[i] == best);
  }
}

TEST_CASE("parallel encode is identical to serial encode") {
  const HeadMatrix x = gaussian_matrix(777, 64, 5);
  const auto cb = kmeans_train(to_subvectors(x, 8), VQConfig{8, 8, 64}, {5, 2, {}});
  const CodeMatrix serial = encode(x, cb, 1);
  for (int threads : {2, 3, 8}) CHECK(encode(x, cb, threads) == serial);
}

TEST_CASE("decode concatenates centroids and rejects corrupt codes") {
  const Codebook cb(VQConfig{2, 1, 4}, points({{1, 2}, {3, 4}}));
  CodeMatrix zeros = CodeMatrix::Zero(3, 2);
  const HeadMatrix tiled = decode(zeros, cb);
  for (Index r = 0; r < 3; ++r) {
    CHECK(tiled(r, 0) == 1);
    CHECK(tiled(r, 1) == 2);
    CHECK(tiled(r, 2) == 1);
    CHECK(tiled(r, 3) == 2);
  }
  CodeMatrix one(1, 2);
  one << 1, 0;
  const HeadMatrix row = decode(one, cb);
  CHECK(row(0, 0) == 3);
  CHECK(row(0, 1) == 4);
  CHECK(row(0, 2) == 1);
  CHECK(row(0, 3) == 2);
  one(0, 1) = 2;
  CHECK_THROWS_AS(decode(one, cb), CorruptionError);
  CHECK_THROWS_AS(decode(CodeMatrix::Zero(1, 3), cb), ShapeError);
}

TEST_CASE("encode-decode fixed points and idempotence") {
  const HeadMatrix train = gaussian_matrix(400, 16, 8);
  const auto cb = kmeans_train(to_subvectors(train, 4), VQConfig{4, 5, 16}, {10, 1, {}});
  const HeadMatrix x = gaussian_matrix(50, 16, 9);
  const CodeMatrix codes = encode(x, cb);
  const HeadMatrix snapped = decode(codes, cb);
  CHECK(encode(snapped, cb) == codes);
  CHECK(decode(encode(snapped, cb), cb) == snapped);
  CHECK(quantization_mse(snapped, cb) == 0.0);
  // Decoded rows are bounded by the largest centroid concatenation.
  const double cmax = cb.centroids().rowwise().norm().maxCoeff();
  const double bound = std::sqrt(double(cb.config().num_subvectors())) * cmax;
  CHECK(snapped.rowwise().norm().maxCoeff() <= bound + 1e-4);
}

TEST_CASE("quantization_mse equals the k-means objective on the training data") {
  const HeadMatrix x = gaussian_matrix(256, 16, 42);
  KMeansResult km;
  const auto cb = kmeans_train(to_subvectors(x, 4), VQConfig{4, 4, 16}, {30, 0, {}}, &km);
  const double mse = quantization_mse(x, cb);
  CHECK(std::abs(mse - km.final_objective() / double(x.size())) <= 1e-6);
}

TEST_CASE("quantization_mse with a uniform offset") {
  const Codebook cb(VQConfig{2, 1, 2}, points({{0, 0}, {5, 5}}));
  HeadMatrix x(2, 2);
  x << 0.25f, 0.25f,
       5.25f, 5.25f;
  CHECK(quantization_mse(x, cb) == doctest::Approx(0.0625));
}

TEST_CASE("dual transform lowers quantization error on planted outliers") {
  const HeadMatrix k = generate_keys({2048, 64, 4, 40.0f, Tail::Laplace, 11}).data;
  const VQConfig cfg{4, 8, 64};
  const auto raw_cb = kmeans_train(to_subvectors(k, 4), cfg, {15, 11, {}});
  const auto s = calibrate_smoothing(k, TransformConfig{64});
  const HeadMatrix kt = transform_keys(k, s);
  const auto t_cb = kmeans_train(to_subvectors(kt, 4), cfg, {15, 11, {}});
  const double raw = quantization_mse(k, raw_cb);
  const double transformed = quantization_mse(kt, t_cb);
  MESSAGE("mse raw=" << raw << " transformed=" << transformed << " ratio=" << transformed / raw);
  CHECK(transformed < raw);
}

TEST_CASE("memory footprint and average bits") {
  const auto d4b8 = VQConfig::parse("d4b8", 128);
  CHECK(memory_footprint(d4b8, 0).codebook_bytes == 2048);
  CHECK(memory_footprint(d4b8, 1).index_bytes == 32);
  const auto d8b12 = VQConfig::parse("d8b12", 128);
  CHECK(memory_footprint(d8b12, 1).index_bytes == 24);
  CHECK(memory_footprint(d8b12, 10).index_bytes == 240);
  // 32 codes of 10 bits = 320 bits = 40 bytes; 16 codes of 3 bits = 48 bits = 6 bytes.
  CHECK(code_row_bytes(VQConfig::parse("d4b10", 128)) == 40);
  CHECK(code_row_bytes(VQConfig::parse("d8b3", 128)) == 6);
  CHECK(code_row_bytes(VQConfig::parse("d8b5", 24)) == 2);

  CHECK(avg_bits(d4b8) == 2.0);
  CHECK(avg_bits(d8b12) == 1.5);
  CHECK(avg_bits(d8b12, VQConfig::parse("d8b8", 128)) == 1.25);
}

TEST_CASE("bit packing round-trips for every width") {
  Rng rng(3);
  for (int bits = 1; bits <= 16; ++bits) {
    for (Index cols : {1, 3, 7, 32}) {
      CodeMatrix codes(5, cols);
      for (Index i = 0; i < codes.size(); ++i) {
        codes.data()[i] = static_cast<std::uint16_t>(rng.uniform_index(std::uint64_t{1} << bits));
      }
      const auto packed = PackedCodes::pack(codes, bits);
      CHECK(packed.row_bytes() == (static_cast<std::size_t>(cols) * bits + 7) / 8);
      CHECK(packed.bytes().size() == packed.row_bytes() * 5);
      REQUIRE(packed.unpack() == codes);
    }
  }
  CodeMatrix too_big = CodeMatrix::Constant(1, 2, 4);
  CHECK_THROWS_AS(PackedCodes::pack(too_big, 2), CorruptionError);
}
