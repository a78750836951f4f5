#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "vecinfer/analysis.hpp"
#include "vecinfer/attention.hpp"
#include "vecinfer/io.hpp"
#include "vecinfer/synthetic.hpp"

namespace vecinfer::cli {

namespace {

using nlohmann::json;

// Flag values that parse but make no sense together.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// K/V configuration pair. "d4b8" uses one config for both streams;
// "d8b12/d8b8" or "K-d8b12/V-d8b8" sets them separately.
struct ConfigPair {
  VQConfig key;
  VQConfig value;

  std::string id() const {
    if (key == value) return key.name();
    return "K-" + key.name() + "/V-" + value.name();
  }
};

ConfigPair parse_pair(std::string text, Index head_dim) {
  auto strip = [](std::string s, char tag) {
    if (s.size() > 2 && (s[0] == tag || s[0] == char(tag + 32)) && s[1] == '-') s.erase(0, 2);
    return s;
  };
  const auto slash = text.find('/');
  if (slash == std::string::npos) {
    const VQConfig c = VQConfig::parse(text, head_dim);
    return {c, c};
  }
  return {VQConfig::parse(strip(text.substr(0, slash), 'K'), head_dim),
          VQConfig::parse(strip(text.substr(slash + 1), 'V'), head_dim)};
}

// Codebooks written by train-codebook record the key transform as
// "transform=<mode>" at the front of their provenance.
std::string transform_tag(const std::string& provenance) {
  const std::string key = "transform=";
  const auto at = provenance.find(key);
  if (at == std::string::npos) return {};
  const auto begin = at + key.size();
  return provenance.substr(begin, provenance.find(' ', begin) - begin);
}

Codebook require_codebook(const CodebookFile& f, const std::string& path) {
  if (!f.codebook) throw ShapeError(path + " holds smoothing factors only, not a codebook");
  return *f.codebook;
}

template <typename T>
std::string fixed(T value, int digits = 6) {
  std::ostringstream s;
  s << std::setprecision(digits) << value;
  return s.str();
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

void write_json(const json& j, const std::string& path, std::ostream& out) {
  const std::string text = j.dump(2) + "\n";
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

json bytes_json(const TrafficCounters& t) {
  return {{"codes", t.code_bytes_read},
          {"codebooks", t.codebook_bytes_read},
          {"residual", t.residual_bytes_read},
          {"total", t.cache_bytes_read()},
          {"fp16_equivalent", t.fp16_equiv_bytes},
          {"baseline_materialized_written", t.materialized_bytes_written},
          {"baseline_materialized_read", t.materialized_bytes_read}};
}

// Aggregated over every (kv head, query head) pair of one run.
struct RunTotals {
  TrafficCounters fused;
  TrafficCounters baseline;
  std::uint64_t formula_bytes = 0;
  bool counters_match = true;
  double max_error = 0.0;
  double baseline_error = 0.0;
  Index quantized_rows = 0;
  Index query_rows = 0;
};

json run_json(const ConfigPair& pair, Index n_tokens, Index residual_len, const RunTotals& t,
              const std::optional<std::pair<double, double>>& wall_ms) {
  TrafficCounters bytes = t.fused;
  bytes.materialized_bytes_written = t.baseline.materialized_bytes_written;
  bytes.materialized_bytes_read = t.baseline.materialized_bytes_read;
  const auto total = bytes.cache_bytes_read();
  json j = {{"config", pair.id()},
            {"key_config", pair.key.name()},
            {"value_config", pair.value.name()},
            {"n_tokens", n_tokens},
            {"residual_len", residual_len},
            {"quantized_rows", t.quantized_rows},
            {"query_rows", t.query_rows},
            {"avg_bits", avg_bits(pair.key, pair.value)},
            {"wall_time_ms", nullptr},
            {"bytes_read", bytes_json(bytes)},
            {"compression_ratio", total ? double(bytes.fp16_equiv_bytes) / double(total) : 0.0},
            {"bytes_vs_fp16", bytes.fp16_equiv_bytes ? double(total) / double(bytes.fp16_equiv_bytes) : 0.0},
            {"formula_bytes", t.formula_bytes},
            {"counters_match_formula", t.counters_match},
            {"fused_reads_less_than_baseline",
             t.fused.code_bytes_read < t.baseline.materialized_bytes_read + t.baseline.materialized_bytes_written},
            {"max_relative_error", t.max_error},
            {"baseline_relative_error", t.baseline_error}};
  if (wall_ms) j["wall_time_ms"] = {{"fused", wall_ms->first}, {"dequantize_then_attend", wall_ms->second}};
  return j;
}

// ---------------------------------------------------------------- gen

struct GenArgs {
  Index n = 1024;
  Index d = 128;
  Index outlier_channels = 0;
  float outlier_scale = 1.0f;
  std::string tail = "gauss";
  std::uint64_t seed = 0;
  std::string dtype = "f32";
  std::string out;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  if (a.n < 1 || a.d < 1 || !is_power_of_two(a.d)) {
    throw UsageError("--n and --d must be at least 1 and --d a power of two");
  }
  if (a.outlier_channels < 0 || a.outlier_channels > a.d) {
    throw UsageError("--outlier-channels must be in [0, d]");
  }
  const auto keys = generate_keys({a.n, a.d, a.outlier_channels, a.outlier_scale, parse_tail(a.tail), a.seed});
  save_tensor(a.out, keys.data, a.dtype == "f16" ? DType::F16 : DType::F32);
  out << "wrote " << a.n << " x " << a.d << " " << a.tail << " tensor to " << a.out << "\n";
  if (!keys.outlier_channels.empty()) {
    out << "outlier channels:";
    for (Index c : keys.outlier_channels) out << " " << c;
    out << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------- calibrate

struct CalibrateArgs {
  std::string keys;
  std::string out;
  float epsilon = 1e-6f;
};

int cmd_calibrate(const CalibrateArgs& a, std::ostream& out, std::ostream& err) {
  const HeadMatrix keys = load_tensor(a.keys);
  TransformConfig cfg;
  cfg.head_dim = keys.cols();
  cfg.epsilon_floor = a.epsilon;
  std::vector<Index> floored;
  const auto s = calibrate_smoothing(keys, cfg, &floored);
  for (Index c : floored) {
    err << "warning: channel " << c << " is zero in every token; lambda floored to " << a.epsilon << "\n";
  }
  save_codebook(a.out, {keys.cols(), s, std::nullopt,
                        "calibrate: lambda = sqrt(channel max |K|) over " + std::to_string(keys.rows()) +
                            " tokens"});

  Vector<float> maxima = keys.cwiseAbs().colwise().maxCoeff().transpose();
  std::sort(maxima.begin(), maxima.end());
  out << "channels: " << keys.cols() << ", tokens: " << keys.rows() << "\n"
      << "channel max |K|: min " << fixed(maxima[0]) << ", median " << fixed(maxima[maxima.size() / 2])
      << ", max " << fixed(maxima[maxima.size() - 1]) << "\n"
      << "lambda: min " << fixed(s.lambda().minCoeff()) << ", max " << fixed(s.lambda().maxCoeff()) << "\n"
      << "floored channels: " << floored.size() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- train-codebook

struct TrainArgs {
  std::string data;
  std::string transform = "sh";
  std::string lambda;
  Index d = 4;
  int b = 8;
  int iters = 30;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const HeadMatrix data = load_tensor(a.data);
  const Index dim = data.cols();
  const VQConfig cfg{a.d, a.b, dim};
  cfg.validate();

  std::optional<SmoothingFactors> s;
  if (a.transform == "s" || a.transform == "sh") {
    if (!a.lambda.empty()) {
      const auto lf = load_codebook(a.lambda);
      if (!lf.smoothing) throw ShapeError(a.lambda + " holds no smoothing factors");
      if (lf.head_dim != dim) throw ShapeError("--lambda head_dim does not match --data");
      s = lf.smoothing;
    } else {
      err << "note: no --lambda given, calibrating smoothing factors on --data\n";
      s = calibrate_smoothing(data, TransformConfig{dim});
    }
  } else if (a.transform == "h") {
    s = SmoothingFactors::identity(dim);
  }

  HeadMatrix x;
  if (a.transform == "none") x = data;
  else if (a.transform == "s") x = smooth_keys(data, *s);
  else x = transform_keys(data, *s);  // h uses unit lambda

  KMeansResult km;
  const Codebook trained = kmeans_train(to_subvectors(x, a.d), cfg, {a.iters, a.seed, {}}, &km);
  const Codebook tagged(cfg, trained.centroids(), "transform=" + a.transform + " " + trained.provenance());
  save_codebook(a.out, {dim, s, tagged, {}});
  out << "trained " << cfg.name() << " on " << x.rows() * cfg.num_subvectors() << " sub-vectors ("
      << "transform " << a.transform << ")\n"
      << "iterations: " << km.iterations << (km.converged ? " (converged)" : "") << "\n"
      << "final objective: " << fixed(km.final_objective(), 9) << "\n";
  return kOk;
}

// ---------------------------------------------------------------- quantize

struct QuantizeArgs {
  std::string keys;
  std::string values;
  std::string key_codebook;
  std::string value_codebook;
  Index residual = 128;
  int threads = 1;
  std::string out;
};

struct LoadedCodebooks {
  Codebook key;
  Codebook value;
  SmoothingFactors smoothing;
};

LoadedCodebooks load_codebooks(const std::string& key_path, const std::string& value_path) {
  const auto kf = load_codebook(key_path);
  const auto vf = load_codebook(value_path);
  LoadedCodebooks cb{require_codebook(kf, key_path), require_codebook(vf, value_path), {}};
  const std::string ktag = transform_tag(cb.key.provenance());
  if (ktag == "none" || ktag == "s") {
    throw ShapeError(key_path + " was trained with --transform " + ktag +
                     "; the cache stores Hadamard-rotated keys, so use h or sh");
  }
  const std::string vtag = transform_tag(cb.value.provenance());
  if (!vtag.empty() && vtag != "none") {
    throw ShapeError(value_path + " was trained with --transform " + vtag + "; values are never transformed");
  }
  cb.smoothing = kf.smoothing ? *kf.smoothing : SmoothingFactors::identity(kf.head_dim);
  return cb;
}

int cmd_quantize(const QuantizeArgs& a, std::ostream& out) {
  if (a.residual < 0) throw UsageError("--residual must be >= 0");
  const HeadMatrix keys = load_tensor(a.keys);
  const HeadMatrix values = load_tensor(a.values);
  const auto cb = load_codebooks(a.key_codebook, a.value_codebook);
  const CacheConfig cfg{cb.key.config(), cb.value.config(), a.residual, keys.cols()};
  const auto cache = prefill(keys, values, cb.smoothing, cb.key, cb.value, cfg, a.threads);
  save_snapshot(a.out, cache);

  const std::uint64_t fp16 = std::uint64_t(cache.total_len()) * cfg.head_dim * 2 * 2;
  const std::uint64_t bytes = cache.cache_bytes();
  out << "tokens: " << cache.total_len() << " (" << cache.quantized_len() << " quantized, "
      << cache.residual_rows() << " residual)\n"
      << "config: " << ConfigPair{cfg.key_cfg, cfg.value_cfg}.id() << ", avg bits "
      << fixed(avg_bits(cfg.key_cfg, cfg.value_cfg)) << "\n"
      << "cache bytes: " << bytes << ", fp16 bytes: " << fp16 << "\n"
      << "compression ratio: " << fixed(double(fp16) / double(bytes)) << "\n";
  return kOk;
}

// ---------------------------------------------------------------- verify

struct VerifyArgs {
  std::string cache;
  std::string queries;
  std::vector<std::string> codebooks;
  Index tiles = 128;
  int splits = 1;
  int threads = 1;
  double tolerance = 1e-4;
  std::string json_out;
};

int cmd_verify(const VerifyArgs& a, std::ostream& out) {
  if (a.tiles < 1 || a.splits < 1) throw UsageError("--tiles and --splits must be >= 1");
  const auto cache = load_snapshot(a.cache);
  const HeadMatrix queries = load_tensor(a.queries);
  const auto cb = load_codebooks(a.codebooks[0], a.codebooks[1]);
  check_codebooks(cache.config(), cb.key, cb.value);
  if (queries.cols() != cache.config().head_dim) throw ShapeError("queries do not match the cache head_dim");
  if (cache.empty()) throw EmptyInputError("cache snapshot holds no tokens");

  const auto [k_hat, v_hat] = materialize(cache, cb.key, cb.value);
  const HeadMatrix q_t = transform_query(queries, cb.smoothing);
  const TileConfig tiles{a.tiles, a.splits, true, a.threads};
  RunTotals t;
  t.quantized_rows = cache.quantized_len();
  t.query_rows = queries.rows();
  for (Index r = 0; r < q_t.rows(); ++r) {
    const HeadRow q = q_t.row(r);
    const auto fused = fused_decode_attention(q, cache, cb.key, cb.value, tiles);
    const auto base = dequantize_then_attend(q, cache, cb.key, cb.value);
    const auto ref = reference_attention(q, k_hat, v_hat);
    const auto rep = traffic_report(fused, cache.total_len(), cache.config(), cache.residual_rows());
    t.fused += fused.traffic;
    t.baseline += base.traffic;
    t.formula_bytes += rep.formula_bytes;
    t.counters_match = t.counters_match && rep.counters_match_formula;
    t.max_error = std::max(t.max_error, max_relative_error(fused.o, ref.o));
    t.baseline_error = std::max(t.baseline_error, max_relative_error(base.o, ref.o));
  }
  const bool passed = t.max_error <= a.tolerance && t.counters_match;
  const ConfigPair pair{cache.config().key_cfg, cache.config().value_cfg};
  json report = {{"schema_version", kBenchSchemaVersion},
                 {"tool", "verify"},
                 {"head_dim", cache.config().head_dim},
                 {"heads", queries.rows()},
                 {"kv_heads", 1},
                 {"group_size", queries.rows()},
                 {"block_size", a.tiles},
                 {"splits", a.splits},
                 {"tolerance", a.tolerance},
                 {"deterministic", true},
                 {"passed", passed},
                 {"runs", json::array({run_json(pair, cache.total_len(), cache.config().residual_len, t,
                                                std::nullopt)})}};
  if (!a.json_out.empty()) write_json(report, a.json_out, out);
  out << "queries: " << queries.rows() << ", tokens: " << cache.total_len() << ", config: " << pair.id()
      << ", tiles " << a.tiles << ", splits " << a.splits << "\n"
      << "max relative error vs reference: " << fixed(t.max_error, 4) << " (tolerance " << a.tolerance << ")\n"
      << "traffic counters match formula: " << (t.counters_match ? "yes" : "no") << "\n"
      << (passed ? "PASS" : "FAIL") << "\n";
  return passed ? kOk : kValidation;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::vector<Index> n_list{1024, 4096};
  std::vector<std::string> configs{"d4b8"};
  Index d = 128;
  int heads = 32;
  int kv_heads = 8;
  int repeats = 3;
  Index block = 128;
  int splits = 1;
  int threads = 1;
  Index residual = 128;
  Index train_tokens = 1024;
  int iters = 10;
  Index outlier_channels = 4;
  float outlier_scale = 20.0f;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string json_out;
};

json bench_run(const BenchArgs& a, const ConfigPair& pair, Index n, std::ostream& out) {
  using Clock = std::chrono::steady_clock;
  const int group = a.heads / a.kv_heads;
  const CacheConfig cfg{pair.key, pair.value, a.residual, a.d};
  const std::uint64_t base_seed = a.seed * 1000003 + std::uint64_t(n);

  // Per KV head: a planted-outlier key stream, Gaussian values, its own lambda.
  std::vector<HeadMatrix> keys(a.kv_heads), values(a.kv_heads), keys_t(a.kv_heads);
  std::vector<SmoothingFactors> lambdas(a.kv_heads);
  for (int h = 0; h < a.kv_heads; ++h) {
    keys[h] = generate_keys({n, a.d, a.outlier_channels, a.outlier_scale, Tail::Laplace, base_seed + 2 * h}).data;
    values[h] = gaussian_matrix(n, a.d, base_seed + 2 * h + 1);
    lambdas[h] = calibrate_smoothing(keys[h], TransformConfig{a.d});
    keys_t[h] = transform_keys(keys[h], lambdas[h]);
  }

  // One codebook pair per run, trained on an evenly strided sample pooled over heads.
  const Index pooled = n * a.kv_heads;
  const Index sample = std::min(a.train_tokens, pooled);
  HeadMatrix k_train(sample, a.d), v_train(sample, a.d);
  for (Index i = 0; i < sample; ++i) {
    const Index g = i * pooled / sample;
    k_train.row(i) = keys_t[g / n].row(g % n);
    v_train.row(i) = values[g / n].row(g % n);
  }
  const Codebook cb_k = kmeans_train(to_subvectors(k_train, pair.key.d), pair.key, {a.iters, a.seed, {}});
  const Codebook cb_v = kmeans_train(to_subvectors(v_train, pair.value.d), pair.value, {a.iters, a.seed + 1, {}});

  RunTotals t;
  t.query_rows = a.heads;
  std::vector<double> fused_ms(a.repeats, 0.0), base_ms(a.repeats, 0.0);
  const TileConfig tiles{a.block, a.splits, true, a.threads};
  for (int h = 0; h < a.kv_heads; ++h) {
    const auto cache = prefill(keys[h], values[h], lambdas[h], cb_k, cb_v, cfg, a.threads);
    t.quantized_rows += cache.quantized_len();
    const auto [k_hat, v_hat] = materialize(cache, cb_k, cb_v);
    for (int g = 0; g < group; ++g) {
      const HeadMatrix q_raw = gaussian_matrix(1, a.d, base_seed + 7919 + std::uint64_t(h * group + g));
      const HeadRow q = transform_query(q_raw, lambdas[h]).row(0);
      AttentionOutput fused, base;
      for (int r = 0; r < a.repeats; ++r) {
        const auto t0 = Clock::now();
        fused = fused_decode_attention(q, cache, cb_k, cb_v, tiles);
        const auto t1 = Clock::now();
        base = dequantize_then_attend(q, cache, cb_k, cb_v);
        const auto t2 = Clock::now();
        fused_ms[r] += std::chrono::duration<double, std::milli>(t1 - t0).count();
        base_ms[r] += std::chrono::duration<double, std::milli>(t2 - t1).count();
      }
      const auto ref = reference_attention(q, k_hat, v_hat);
      const auto rep = traffic_report(fused, cache.total_len(), cfg, cache.residual_rows());
      t.fused += fused.traffic;
      t.baseline += base.traffic;
      t.formula_bytes += rep.formula_bytes;
      t.counters_match = t.counters_match && rep.counters_match_formula;
      t.max_error = std::max(t.max_error, max_relative_error(fused.o, ref.o));
      t.baseline_error = std::max(t.baseline_error, max_relative_error(base.o, ref.o));
    }
  }
  std::optional<std::pair<double, double>> wall;
  if (!a.deterministic) wall = std::pair{median(fused_ms), median(base_ms)};
  json run = run_json(pair, n, a.residual, t, wall);
  out << std::left << std::setw(18) << pair.id() << " N=" << std::setw(7) << n << " bytes/fp16 "
      << std::setw(10) << fixed(run["bytes_vs_fp16"].get<double>(), 5) << " max rel err "
      << fixed(t.max_error, 3);
  if (wall) out << "  fused " << fixed(wall->first, 4) << " ms, baseline " << fixed(wall->second, 4) << " ms";
  out << "\n";
  return run;
}

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  if (a.kv_heads < 1 || a.heads < a.kv_heads || a.heads % a.kv_heads != 0) {
    throw UsageError("--heads must be a positive multiple of --kv-heads");
  }
  if (a.repeats < 1 || a.block < 1 || a.splits < 1 || a.residual < 0 || a.train_tokens < 1) {
    throw UsageError("--repeats, --block, --splits and --train-tokens must be >= 1, --residual >= 0");
  }
  for (Index n : a.n_list) {
    if (n < 1) throw UsageError("--n-list entries must be >= 1");
  }
  json report = {{"schema_version", kBenchSchemaVersion},
                 {"tool", "bench"},
                 {"head_dim", a.d},
                 {"heads", a.heads},
                 {"kv_heads", a.kv_heads},
                 {"group_size", a.heads / a.kv_heads},
                 {"seed", a.seed},
                 {"repeats", a.repeats},
                 {"block_size", a.block},
                 {"splits", a.splits},
                 {"deterministic", a.deterministic},
                 {"baseline", "dequantize-then-attend (this library)"},
                 {"runs", json::array()}};
  // The table goes to stdout only when the JSON goes to a file.
  std::ostringstream sink;
  std::ostream& table = a.json_out.empty() ? static_cast<std::ostream&>(sink) : out;
  for (const auto& name : a.configs) {
    const ConfigPair pair = parse_pair(name, a.d);
    for (Index n : a.n_list) report["runs"].push_back(bench_run(a, pair, n, table));
  }
  const auto problems = bench_report_problems(report);
  if (!problems.empty()) throw ShapeError("bench report failed its self-check: " + problems.front());
  write_json(report, a.json_out, out);
  return kOk;
}

// ---------------------------------------------------------------- analyze / ablate

struct AnalyzeArgs {
  std::string keys;
  std::string csv;
  std::string json_out;
};

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  const HeadMatrix keys = load_tensor(a.keys);
  const auto rep = distribution_report(keys);
  const auto rotated = distribution_report(hadamard_apply(keys));
  const auto lemma = lemma1_check(keys);
  auto vec = [](const Vector<float>& v) { return std::vector<float>(v.begin(), v.end()); };
  json j = {{"n_tokens", keys.rows()},
            {"head_dim", keys.cols()},
            {"global_outlier_ratio", rep.global_outlier_ratio},
            {"excess_kurtosis", rep.excess_kurtosis},
            {"row_ms_error", rep.row_ms_error},
            {"per_channel_max", vec(rep.per_channel_max)},
            {"per_channel_p99", vec(rep.per_channel_p99)},
            {"rotated",
             {{"global_outlier_ratio", rotated.global_outlier_ratio},
              {"excess_kurtosis", rotated.excess_kurtosis},
              {"per_channel_max", vec(rotated.per_channel_max)},
              {"per_channel_p99", vec(rotated.per_channel_p99)}}},
            {"lemma1",
             {{"kurtosis_before", lemma.kurtosis_before},
              {"kurtosis_after", lemma.kurtosis_after},
              {"outlier_ratio_before", lemma.outlier_ratio_before},
              {"outlier_ratio_after", lemma.outlier_ratio_after},
              {"heavy_tailed", lemma.heavy_tailed},
              {"holds", lemma.holds}}}};
  if (!a.csv.empty()) {
    std::ostringstream csv;
    csv << "channel,max,p99,rotated_max,rotated_p99\n" << std::setprecision(9);
    for (Index c = 0; c < keys.cols(); ++c) {
      csv << c << "," << rep.per_channel_max[c] << "," << rep.per_channel_p99[c] << ","
          << rotated.per_channel_max[c] << "," << rotated.per_channel_p99[c] << "\n";
    }
    const std::string text = csv.str();
    write_file(a.csv, std::vector<std::uint8_t>(text.begin(), text.end()));
  }
  write_json(j, a.json_out, out);
  return kOk;
}

struct AblateArgs {
  std::string keys;
  std::string queries;
  std::string config = "d4b8";
  std::vector<std::string> modes{"none", "s", "h", "hs", "sh"};
  int iters = 30;
  std::uint64_t seed = 0;
  std::string json_out;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  const HeadMatrix keys = load_tensor(a.keys);
  const HeadMatrix queries = load_tensor(a.queries);
  const VQConfig cfg = VQConfig::parse(a.config, keys.cols());
  json rows = json::array();
  for (const auto& m : a.modes) {
    const TransformMode mode = parse_transform_mode(m);
    const auto r = transform_ablation(keys, queries, cfg, mode, {a.iters, a.seed});
    rows.push_back({{"mode", transform_mode_name(mode)},
                    {"mse", r.mse},
                    {"score_error", r.score_error},
                    {"codebook_objective", r.codebook_objective}});
  }
  write_json({{"config", cfg.name()}, {"seed", a.seed}, {"results", rows}}, a.json_out, out);
  return kOk;
}

}  // namespace

std::vector<std::string> bench_report_problems(const json& report) {
  std::vector<std::string> problems;
  if (!report.is_object()) return {"report is not a JSON object"};
  if (!report.contains("schema_version")) problems.emplace_back("missing schema_version");
  if (!report.contains("runs") || !report["runs"].is_array()) {
    problems.emplace_back("missing runs array");
    return problems;
  }
  for (std::size_t i = 0; i < report["runs"].size(); ++i) {
    const auto& run = report["runs"][i];
    if (!run.contains("max_relative_error") || !run["max_relative_error"].is_number()) {
      problems.push_back("run " + std::to_string(i) + " has no oracle error");
    }
  }
  return problems;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"vecinfer: vector-quantized KV cache with dual-transformed keys"};
  app.name("vecinfer");
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic key/value tensor with planted outlier channels");
  g->add_option("--n", gen.n, "Tokens")->capture_default_str();
  g->add_option("--d", gen.d, "Head dimension (power of two)")->capture_default_str();
  g->add_option("--outlier-channels", gen.outlier_channels, "Channels to scale")->capture_default_str();
  g->add_option("--outlier-scale", gen.outlier_scale, "Scale applied to outlier channels")->capture_default_str();
  g->add_option("--tail", gen.tail, "Base distribution")->check(CLI::IsMember({"gauss", "laplace"}))
      ->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--dtype", gen.dtype)->check(CLI::IsMember({"f32", "f16"}))->capture_default_str();
  g->add_option("--out", gen.out, "Output tensor file")->required();

  CalibrateArgs cal;
  auto* c = app.add_subcommand("calibrate", "Compute per-channel smoothing factors from sample keys");
  c->add_option("--keys", cal.keys, "Key tensor")->required();
  c->add_option("--out", cal.out, "Output codebook file (smoothing only)")->required();
  c->add_option("--epsilon", cal.epsilon, "Floor for lambda")->check(CLI::PositiveNumber)->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train-codebook", "Train a product-quantization codebook with K-Means");
  t->add_option("--data", train.data, "Training tensor")->required();
  t->add_option("--transform", train.transform, "Key transform before training")
      ->check(CLI::IsMember({"none", "s", "h", "sh"}))->capture_default_str();
  t->add_option("--lambda", train.lambda, "Smoothing factors from `calibrate` (s, sh)");
  t->add_option("--d", train.d, "Sub-vector dimension")->required();
  t->add_option("--b", train.b, "Bits per code")->required();
  t->add_option("--iters", train.iters, "K-Means iterations")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--seed", train.seed)->capture_default_str();
  t->add_option("--out", train.out, "Output codebook file")->required();

  QuantizeArgs quant;
  auto* q = app.add_subcommand("quantize", "Prefill a quantized cache and write a snapshot");
  q->add_option("--keys", quant.keys)->required();
  q->add_option("--values", quant.values)->required();
  q->add_option("--key-codebook", quant.key_codebook)->required();
  q->add_option("--value-codebook", quant.value_codebook)->required();
  q->add_option("--residual", quant.residual, "Full-precision residual window")->capture_default_str();
  q->add_option("--threads", quant.threads)->check(CLI::PositiveNumber)->capture_default_str();
  q->add_option("--out", quant.out, "Output snapshot")->required();

  VerifyArgs ver;
  auto* v = app.add_subcommand("verify", "Check fused attention against the exact reference");
  v->add_option("--cache", ver.cache)->required();
  v->add_option("--queries", ver.queries, "Raw query rows")->required();
  v->add_option("--codebooks", ver.codebooks, "Key codebook, then value codebook")->required()->expected(2);
  v->add_option("--tiles", ver.tiles, "Block size B")->capture_default_str();
  v->add_option("--splits", ver.splits, "Split count S")->capture_default_str();
  v->add_option("--threads", ver.threads)->check(CLI::PositiveNumber)->capture_default_str();
  v->add_option("--tolerance", ver.tolerance)->capture_default_str();
  v->add_option("--json-out", ver.json_out, "Write the report here ('-' for stdout)");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Fused vs dequantize-then-attend on synthetic GQA workloads");
  b->add_option("--n-list", bench.n_list, "Token counts")->delimiter(',')->capture_default_str();
  b->add_option("--config-list", bench.configs, "Configs, e.g. d4b8,d8b12/d8b8")->delimiter(',')
      ->capture_default_str();
  b->add_option("--d", bench.d, "Head dimension")->capture_default_str();
  b->add_option("--heads", bench.heads, "Query heads")->capture_default_str();
  b->add_option("--kv-heads", bench.kv_heads, "KV heads")->capture_default_str();
  b->add_option("--repeats", bench.repeats)->capture_default_str();
  b->add_option("--block", bench.block)->capture_default_str();
  b->add_option("--splits", bench.splits)->capture_default_str();
  b->add_option("--threads", bench.threads)->check(CLI::PositiveNumber)->capture_default_str();
  b->add_option("--residual", bench.residual)->capture_default_str();
  b->add_option("--train-tokens", bench.train_tokens, "Rows sampled for codebook training")
      ->capture_default_str();
  b->add_option("--iters", bench.iters, "K-Means iterations")->check(CLI::PositiveNumber)->capture_default_str();
  b->add_option("--outlier-channels", bench.outlier_channels)->capture_default_str();
  b->add_option("--outlier-scale", bench.outlier_scale)->capture_default_str();
  b->add_option("--seed", bench.seed)->capture_default_str();
  b->add_flag("--deterministic", bench.deterministic, "Omit wall times so reports are byte-stable");
  b->add_option("--json-out", bench.json_out, "Write the report here instead of stdout");

  AnalyzeArgs ana;
  auto* an = app.add_subcommand("analyze", "Channel statistics, kurtosis and Hadamard diagnostics for keys");
  an->add_option("--keys", ana.keys)->required();
  an->add_option("--csv", ana.csv, "Per-channel statistics as CSV");
  an->add_option("--json-out", ana.json_out);

  AblateArgs abl;
  auto* ab = app.add_subcommand("ablate", "Compare key transforms by quantized score error");
  ab->add_option("--keys", abl.keys)->required();
  ab->add_option("--queries", abl.queries)->required();
  ab->add_option("--config", abl.config)->capture_default_str();
  ab->add_option("--modes", abl.modes)->delimiter(',')->capture_default_str();
  ab->add_option("--iters", abl.iters)->check(CLI::PositiveNumber)->capture_default_str();
  ab->add_option("--seed", abl.seed)->capture_default_str();
  ab->add_option("--json-out", abl.json_out);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen(gen, out);
    if (*c) return cmd_calibrate(cal, out, err);
    if (*t) return cmd_train(train, out, err);
    if (*q) return cmd_quantize(quant, out);
    if (*v) return cmd_verify(ver, out);
    if (*b) return cmd_bench(bench, out);
    if (*an) return cmd_analyze(ana, out);
    if (*ab) return cmd_ablate(abl, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const CorruptionError& e) {
    err << "corrupt input: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "bad file format: " << e.what() << "\n";
    return kIo;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kUsage;
}

}  // namespace vecinfer::cli
