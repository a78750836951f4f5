#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "oracles.hpp"
#include "vecinfer/attention.hpp"
#include "vecinfer/random.hpp"
#include "vecinfer/synthetic.hpp"

using namespace vecinfer;

namespace {

struct Setup {
  HeadMatrix keys;
  HeadMatrix values;
  SmoothingFactors s;
  Codebook cb_k;
  Codebook cb_v;
  CacheConfig cfg;
  QuantizedKVCache cache;

  // With train=false the codebooks are random draws, which is enough where quality is irrelevant.
  Setup(Index n, Index dim, const char* kname, const char* vname, Index residual, std::uint64_t seed = 1,
        bool train_codebooks = true) {
    keys = generate_keys({n, dim, 4, 25.0f, Tail::Laplace, seed}).data;
    values = gaussian_matrix(n, dim, seed + 1);
    s = calibrate_smoothing(keys, TransformConfig{dim});
    cfg = CacheConfig{VQConfig::parse(kname, dim), VQConfig::parse(vname, dim), residual, dim};
    if (!train_codebooks) {
      cb_k = Codebook(cfg.key_cfg, gaussian_matrix(cfg.key_cfg.num_centroids(), cfg.key_cfg.d, seed + 7));
      cb_v = Codebook(cfg.value_cfg, gaussian_matrix(cfg.value_cfg.num_centroids(), cfg.value_cfg.d, seed + 8));
      cache = prefill(keys, values, s, cb_k, cb_v, cfg);
      return;
    }
    const Index train = std::max<Index>(n, 1024);
    const HeadMatrix k_train = generate_keys({train, dim, 4, 25.0f, Tail::Laplace, seed + 7}).data;
    cb_k = kmeans_train(to_subvectors(transform_keys(k_train, s), cfg.key_cfg.d), cfg.key_cfg, {6, seed, {}});
    cb_v = kmeans_train(to_subvectors(gaussian_matrix(train, dim, seed + 8), cfg.value_cfg.d), cfg.value_cfg,
                        {6, seed, {}});
    cache = prefill(keys, values, s, cb_k, cb_v, cfg);
  }
};

HeadRow query_row(Index dim, std::uint64_t seed) { return gaussian_matrix(1, dim, seed).row(0); }

}  // namespace

TEST_CASE("build_lut examples") {
  RowMatrix<float> c(2, 2);
  c << 1, 0,
       0, 1;
  const Codebook cb(VQConfig{2, 1, 2}, c);
  HeadRow q(2);
  q << 3, 4;
  const auto lut = build_lut(q, cb);
  REQUIRE(lut.entries().rows() == 1);
  CHECK(lut.entries()(0, 0) == 3);
  CHECK(lut.entries()(0, 1) == 4);
  CHECK(build_lut(HeadRow::Zero(2), cb).entries().isZero(0));
  CHECK_THROWS_AS(build_lut(HeadRow::Zero(4), cb), ShapeError);
}

TEST_CASE("LUT gather equals decode-then-dot") {
  const HeadMatrix train = gaussian_matrix(512, 64, 3);
  const auto cb = kmeans_train(to_subvectors(train, 4), VQConfig{4, 8, 64}, {5, 0, {}});
  const HeadRow q = query_row(64, 4);
  const auto lut = build_lut(q, cb);
  const CodeMatrix codes = encode(gaussian_matrix(100, 64, 5), cb);
  const HeadMatrix decoded = decode(codes, cb);
  for (Index r = 0; r < codes.rows(); ++r) {
    const double direct = decoded.row(r).cast<double>().dot(q.cast<double>());
    CHECK(std::abs(lut.gather(codes.row(r).data()) - direct) <= 1e-5 * std::max(1.0, std::abs(direct)));
  }
}

TEST_CASE("reference_attention basics") {
  HeadMatrix k = HeadMatrix::Ones(1, 4);
  HeadMatrix v(1, 4);
  v << 1, 2, 3, 4;
  const auto one = reference_attention(HeadRow::Ones(4), k, v);
  CHECK(one.o == v.row(0));
  CHECK(one.lse == doctest::Approx(2.0));  // a single token: lse is its score q.k / sqrt(4)
  CHECK_THROWS_AS(reference_attention(HeadRow::Ones(4), HeadMatrix(0, 4), HeadMatrix(0, 4)), EmptyInputError);

  HeadMatrix k2 = HeadMatrix::Zero(2, 4);
  HeadMatrix v2(2, 4);
  v2 << 1, 2, 3, 4,
        3, 2, 1, 0;
  const auto pair = reference_attention(HeadRow::Ones(4), k2, v2);
  for (Index c = 0; c < 4; ++c) CHECK(pair.o[c] == doctest::Approx(2.0));

  // Softmax weights sum to one: attending over all-ones values returns ones.
  const HeadMatrix kr = gaussian_matrix(500, 32, 8);
  const auto norm = reference_attention(query_row(32, 9), kr, HeadMatrix::Ones(500, 32));
  CHECK((norm.o.array() - 1.0f).abs().maxCoeff() <= 1e-6);
}

TEST_CASE("fused attention on a single token returns the decoded value") {
  Setup st(1, 32, "d4b6", "d4b6", 0);
  REQUIRE(st.cache.quantized_len() == 1);
  const HeadRow q = query_row(32, 3);
  const auto out = fused_decode_attention(q, st.cache, st.cb_k, st.cb_v);
  const HeadMatrix v_hat = decode(st.cache.value_codes(), st.cb_v);
  CHECK(out.o == v_hat.row(0));
  const float s1 = build_lut(q, st.cb_k).gather(st.cache.key_codes().row(0).data()) / std::sqrt(32.0f);
  CHECK(out.lse == doctest::Approx(s1).epsilon(1e-6));
}

TEST_CASE("identical keys give the mean of decoded values") {
  const Index dim = 32;
  const HeadMatrix train = gaussian_matrix(512, dim, 1);
  const CacheConfig cfg{VQConfig{4, 6, dim}, VQConfig{4, 6, dim}, 4, dim};
  const auto cb_k = kmeans_train(to_subvectors(train, 4), cfg.key_cfg, {5, 0, {}});
  const auto cb_v = kmeans_train(to_subvectors(train, 4), cfg.value_cfg, {5, 1, {}});
  HeadMatrix keys = HeadMatrix::Zero(50, dim);
  keys.rowwise() = gaussian_matrix(1, dim, 2).row(0);
  const HeadMatrix values = gaussian_matrix(50, dim, 3);
  const auto id = SmoothingFactors::identity(dim);
  // residual rows hold the exact transformed key, quantized rows its code;
  // use an all-quantized cache so every score is identical.
  CacheConfig all_q = cfg;
  all_q.residual_len = 0;
  const auto cache = prefill(keys, values, id, cb_k, cb_v, all_q);
  const auto out = fused_decode_attention(query_row(dim, 4), cache, cb_k, cb_v, {16, 3});
  const auto [kh, vh] = materialize(cache, cb_k, cb_v);
  const HeadRow mean = vh.colwise().mean();
  CHECK((out.o - mean).cwiseAbs().maxCoeff() <= 1e-5);
}

TEST_CASE("fused attention matches the naive oracle on materialized tensors") {
  Setup st(4096, 128, "d4b8", "d4b8", 128);
  const auto [kh, vh] = materialize(st.cache, st.cb_k, st.cb_v);
  for (std::uint64_t qs : {11, 12}) {
    const HeadRow q = transform_query(query_row(128, qs), st.s).row(0);
    double lse = 0.0;
    const auto naive = oracle::naive_attention(q.cast<double>(), kh.cast<double>(), vh.cast<double>(), &lse);
    const auto one = fused_decode_attention(q, st.cache, st.cb_k, st.cb_v, {128, 1});
    const auto four = fused_decode_attention(q, st.cache, st.cb_k, st.cb_v, {128, 4});
    CHECK(oracle::rel_err(one.o.cast<double>(), naive) <= 1e-4);
    CHECK(oracle::rel_err(four.o.cast<double>(), naive) <= 1e-4);
    CHECK(max_relative_error(one.o, four.o) <= 1e-5);
    CHECK(std::abs(one.lse - lse) <= 1e-4 * std::max(1.0, std::abs(lse)));
    const auto ref = reference_attention(q, kh, vh);
    CHECK(max_relative_error(one.o, ref.o) <= 1e-4);
  }
}

TEST_CASE("block size, splits, threads and prefetch do not change the result") {
  Setup st(1500, 64, "d8b8", "d4b8", 37);
  const HeadRow q = transform_query(query_row(64, 5), st.s).row(0);
  const auto base = fused_decode_attention(q, st.cache, st.cb_k, st.cb_v, {128, 1, true, 1});
  for (Index block : {1, 16, 64, 128, 256, 5000}) {
    for (int splits : {1, 2, 4, 7}) {
      const auto out = fused_decode_attention(q, st.cache, st.cb_k, st.cb_v, {block, splits, true, 1});
      CHECK(max_relative_error(out.o, base.o) <= 1e-5);
      CHECK(std::abs(out.lse - base.lse) <= 1e-5 * std::max(1.0f, std::abs(base.lse)));
      CHECK(out.traffic == base.traffic);

      const auto sync = fused_decode_attention(q, st.cache, st.cb_k, st.cb_v, {block, splits, false, 1});
      CHECK(sync.o == out.o);
      CHECK(sync.lse == out.lse);
      const auto threaded = fused_decode_attention(q, st.cache, st.cb_k, st.cb_v, {block, splits, true, 3});
      CHECK(threaded.o == out.o);
      CHECK(threaded.lse == out.lse);
    }
  }
}

TEST_CASE("more splits than quantized rows") {
  Setup st(10, 32, "d4b6", "d4b6", 7);
  REQUIRE(st.cache.quantized_len() == 3);
  const HeadRow q = transform_query(query_row(32, 1), st.s).row(0);
  const auto [kh, vh] = materialize(st.cache, st.cb_k, st.cb_v);
  const auto out = fused_decode_attention(q, st.cache, st.cb_k, st.cb_v, {2, 8});
  CHECK(max_relative_error(out.o, reference_attention(q, kh, vh).o) <= 1e-5);
}

TEST_CASE("fused attention errors") {
  Setup st(10, 32, "d4b6", "d4b6", 4);
  const QuantizedKVCache empty(st.cfg);
  CHECK_THROWS_AS(fused_decode_attention(HeadRow::Zero(32), empty, st.cb_k, st.cb_v), EmptyInputError);
  CHECK_THROWS_AS(fused_decode_attention(HeadRow::Zero(16), st.cache, st.cb_k, st.cb_v), ShapeError);
  CHECK_THROWS_AS(fused_decode_attention(HeadRow::Zero(32), st.cache, st.cb_k, st.cb_v, {0, 1}), ShapeError);
  CHECK_THROWS_AS(fused_decode_attention(HeadRow::Zero(32), st.cache, st.cb_k, st.cb_v, {16, 0}), ShapeError);
}

TEST_CASE("split_reduce") {
  CHECK_THROWS_AS(split_reduce({}), EmptyInputError);

  PartialState p;
  p.o = HeadRow::Constant(4, 6.0f);
  p.l = 3.0f;
  p.m = 0.5f;
  const PartialState single[] = {p};
  const auto one = split_reduce(single);
  CHECK((one.o.array() == 2.0f).all());
  CHECK(one.lse == doctest::Approx(0.5 + std::log(3.0)));

  const PartialState twice[] = {p, p};
  const auto two = split_reduce(twice);
  CHECK((two.o - one.o).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK(two.lse == doctest::Approx(one.lse + std::log(2.0)));

  PartialState empty;
  empty.o = HeadRow::Zero(4);
  const PartialState with_empty[] = {empty, p, empty};
  CHECK(split_reduce(with_empty).o == one.o);
  const PartialState all_empty[] = {empty, empty};
  CHECK_THROWS_AS(split_reduce(all_empty), EmptyInputError);
}

TEST_CASE("three-way split of exact scores matches one pass") {
  const HeadMatrix k = gaussian_matrix(300, 16, 21);
  const HeadMatrix v = gaussian_matrix(300, 16, 22);
  const HeadRow q = query_row(16, 23);
  auto partial = [&](Index b, Index e) {
    PartialState st;
    st.o = HeadRow::Zero(16);
    const float scale = 0.25f;
    for (Index r = b; r < e; ++r) st.m = std::max(st.m, k.row(r).dot(q) * scale);
    for (Index r = b; r < e; ++r) {
      const float p = std::exp(k.row(r).dot(q) * scale - st.m);
      st.l += p;
      st.o += p * v.row(r);
    }
    return st;
  };
  const PartialState parts[] = {partial(0, 100), partial(100, 137), partial(137, 300)};
  const PartialState whole[] = {partial(0, 300)};
  const auto merged = split_reduce(parts);
  const auto single = split_reduce(whole);
  CHECK(max_relative_error(merged.o, single.o) <= 1e-5);
  CHECK(std::abs(merged.lse - single.lse) <= 1e-5);
}

TEST_CASE("lossless codebooks: tiled path equals exact attention") {
  // Every key and value sub-vector is drawn from the codebook, so decode is exact.
  const Index dim = 64;
  const VQConfig cfg_k{2, 6, dim};
  const VQConfig cfg_v{4, 5, dim};
  const Codebook cb_k(cfg_k, RowMatrix<float>(gaussian_matrix(64, 2, 31)));
  const Codebook cb_v(cfg_v, RowMatrix<float>(gaussian_matrix(32, 4, 32)));
  const Index n = 3000;
  CodeMatrix kc(n, cfg_k.num_subvectors());
  CodeMatrix vc(n, cfg_v.num_subvectors());
  Rng rng(33);
  for (Index i = 0; i < kc.size(); ++i) kc.data()[i] = static_cast<std::uint16_t>(rng.uniform_index(64));
  for (Index i = 0; i < vc.size(); ++i) vc.data()[i] = static_cast<std::uint16_t>(rng.uniform_index(32));
  const HeadMatrix keys = decode(kc, cb_k);
  const HeadMatrix values = decode(vc, cb_v);

  // Keys are already in the transformed domain here, so hand the cache its parts directly.
  const CacheConfig cfg{cfg_k, cfg_v, 0, dim};
  const auto cache = QuantizedKVCache::from_parts(cfg, PackedCodes::pack(kc, 6), PackedCodes::pack(vc, 5),
                                                  HeadMatrix(0, dim), HeadMatrix(0, dim));
  const HeadRow q = query_row(dim, 34) * 2.0f;
  double lse = 0.0;
  const auto naive = oracle::naive_attention(q.cast<double>(), keys.cast<double>(), values.cast<double>(), &lse);
  for (Index block : {16, 64, 128, 256}) {
    const auto out = fused_decode_attention(q, cache, cb_k, cb_v, {block, 1});
    CHECK(oracle::rel_err(out.o.cast<double>(), naive) <= 1e-5);
    CHECK(std::abs(out.lse - lse) <= 1e-6 * std::max(1.0, std::abs(lse)) * 10);
  }
}

TEST_CASE("traffic counters agree with the storage formula") {
  Setup st(4096, 128, "d8b12", "d8b12", 128, 1, false);
  const HeadRow q = transform_query(query_row(128, 1), st.s).row(0);
  const auto out = fused_decode_attention(q, st.cache, st.cb_k, st.cb_v, {128, 4});
  const auto rep = traffic_report(out, 4096, st.cfg, 128);
  CHECK(rep.counters_match_formula);
  CHECK(rep.counted_bytes == rep.formula_bytes);
  // 3968 rows x 24 bytes x 2 streams + 2 codebooks x 4096 x 8 x 2 + 128 x 128 x 4.
  CHECK(rep.formula_bytes == 3968ull * 24 * 2 + 2ull * 4096 * 8 * 2 + 128ull * 128 * 4);
  CHECK(out.traffic.fp16_equiv_bytes == 4096ull * 128 * 4);

  const auto base = dequantize_then_attend(q, st.cache, st.cb_k, st.cb_v);
  CHECK(out.traffic.code_bytes_read < base.traffic.materialized_bytes_read + base.traffic.materialized_bytes_written);
  CHECK(max_relative_error(out.o, base.o) <= 1e-4);
}

TEST_CASE("all-residual cache reads exactly fp16 bytes") {
  Setup st(64, 32, "d4b6", "d4b6", 128);
  REQUIRE(st.cache.quantized_len() == 0);
  const auto out = fused_decode_attention(HeadRow::Ones(32), st.cache, st.cb_k, st.cb_v);
  const auto rep = traffic_report(out, 64, st.cfg, 64);
  CHECK(rep.bytes_vs_fp16 == 1.0);
  CHECK(rep.compression_ratio == 1.0);
}

TEST_CASE("d4b8 traffic ratio approaches one eighth") {
  const Index dim = 128;
  const CacheConfig cfg{VQConfig::parse("d4b8", dim), VQConfig::parse("d4b8", dim), 0, dim};
  double prev = 1.0;
  for (std::uint64_t n : {1024ull, 16384ull, 1ull << 20}) {
    const auto t = expected_traffic(cfg, n, 0);
    const double ratio = double(t.cache_bytes_read()) / double(t.fp16_equiv_bytes);
    CHECK(ratio > 0.125);
    CHECK(ratio < prev);
    prev = ratio;
  }
  CHECK(prev == doctest::Approx(0.125).epsilon(1e-3));
}
