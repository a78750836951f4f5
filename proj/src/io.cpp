#include "vecinfer/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace vecinfer {

namespace {

constexpr char kTensorMagic[4] = {'V', 'I', 'T', 'N'};
constexpr char kCodebookMagic[4] = {'V', 'I', 'C', 'B'};
constexpr char kSnapshotMagic[4] = {'V', 'I', 'K', 'V'};

class ByteWriter {
 public:
  void magic(const char (&m)[4]) { buf_.insert(buf_.end(), m, m + 4); }

  template <typename T>
  void put(T value) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    buf_.insert(buf_.end(), raw, raw + sizeof(T));
  }

  void floats(const float* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) put(data[i]);
  }

  void bytes(const std::vector<std::uint8_t>& b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, const char* what) : buf_(buf), what_(what) {}

  void expect_magic(const char (&m)[4]) {
    need(4);
    if (std::memcmp(buf_.data() + pos_, m, 4) != 0) {
      throw FormatError(std::string(what_) + ": bad magic, expected '" + std::string(m, 4) + "'");
    }
    pos_ += 4;
  }

  void expect_version() {
    const auto v = get<std::uint32_t>();
    if (v != kFormatVersion) {
      throw FormatError(std::string(what_) + ": unsupported version " + std::to_string(v));
    }
  }

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  void floats(float* out, std::size_t n) {
    need(n * sizeof(float));
    for (std::size_t i = 0; i < n; ++i) out[i] = get<float>();
  }

  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> out(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  void expect_end() const {
    if (pos_ != buf_.size()) throw CorruptionError(std::string(what_) + ": trailing bytes after payload");
  }

 private:
  void need(std::size_t n) const {
    if (n > buf_.size() - pos_) throw CorruptionError(std::string(what_) + ": truncated file");
  }

  const std::vector<std::uint8_t>& buf_;
  const char* what_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(Index v, const char* what) {
  if (v < 0 || v > Index{0xffffffff}) throw SizeError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Tensor

std::vector<std::uint8_t> serialize_tensor(const HeadMatrix& x, DType dtype) {
  ByteWriter w;
  w.magic(kTensorMagic);
  w.put(kFormatVersion);
  w.put(static_cast<std::uint8_t>(dtype));
  w.put(std::uint8_t{2});
  w.put(static_cast<std::uint64_t>(x.rows()));
  w.put(static_cast<std::uint64_t>(x.cols()));
  if (dtype == DType::F32) {
    w.floats(x.data(), static_cast<std::size_t>(x.size()));
  } else {
    for (Index i = 0; i < x.size(); ++i) {
      w.put(Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(x.data()[i])));
    }
  }
  return std::move(w.buffer());
}

HeadMatrix deserialize_tensor(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "tensor file");
  r.expect_magic(kTensorMagic);
  r.expect_version();
  const auto dtype = r.get<std::uint8_t>();
  if (dtype > 1) throw FormatError("tensor file: unknown dtype " + std::to_string(dtype));
  const auto ndims = r.get<std::uint8_t>();
  if (ndims == 0) throw FormatError("tensor file: zero-rank tensor");
  std::vector<std::uint64_t> dims(ndims);
  for (auto& dim : dims) dim = r.get<std::uint64_t>();

  const std::uint64_t rows = ndims == 1 ? 1 : dims[0];
  std::uint64_t cols = 1;
  for (std::size_t i = (ndims == 1 ? 0 : 1); i < dims.size(); ++i) cols *= dims[i];
  const std::size_t elem = dtype == 0 ? 4 : 2;
  if (rows != 0 && cols > r.remaining() / elem / rows) throw CorruptionError("tensor file: truncated payload");
  if (rows * cols * elem != r.remaining()) throw CorruptionError("tensor file: payload length mismatch");

  HeadMatrix out(static_cast<Index>(rows), static_cast<Index>(cols));
  if (dtype == 0) {
    r.floats(out.data(), static_cast<std::size_t>(out.size()));
  } else {
    for (Index i = 0; i < out.size(); ++i) {
      out.data()[i] = static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(r.get<std::uint16_t>()));
    }
  }
  r.expect_end();
  return out;
}

// ---------------------------------------------------------------------------
// Codebook

std::vector<std::uint8_t> serialize_codebook(const CodebookFile& file) {
  ByteWriter w;
  w.magic(kCodebookMagic);
  w.put(kFormatVersion);
  w.put(checked_u32(file.head_dim, "head_dim"));
  if (file.codebook) {
    const VQConfig& cfg = file.codebook->config();
    if (cfg.head_dim != file.head_dim) throw ShapeError("codebook file: head_dim mismatch");
    w.put(checked_u32(cfg.d, "d"));
    w.put(static_cast<std::uint8_t>(cfg.b));
  } else {
    w.put(checked_u32(file.head_dim, "d"));
    w.put(std::uint8_t{0});
  }
  w.put(static_cast<std::uint8_t>(file.smoothing ? 1 : 0));
  if (file.smoothing) {
    if (file.smoothing->size() != file.head_dim) throw ShapeError("codebook file: lambda length mismatch");
    w.floats(file.smoothing->lambda().data(), static_cast<std::size_t>(file.head_dim));
  }
  if (file.codebook) {
    const auto& c = file.codebook->centroids();
    w.floats(c.data(), static_cast<std::size_t>(c.size()));
  }
  const std::string& prov = file.codebook ? file.codebook->provenance() : file.provenance;
  w.put(static_cast<std::uint32_t>(prov.size()));
  w.bytes(std::vector<std::uint8_t>(prov.begin(), prov.end()));
  return std::move(w.buffer());
}

CodebookFile deserialize_codebook(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "codebook file");
  r.expect_magic(kCodebookMagic);
  r.expect_version();
  CodebookFile file;
  file.head_dim = r.get<std::uint32_t>();
  const Index d = r.get<std::uint32_t>();
  const int b = r.get<std::uint8_t>();
  const auto has_smoothing = r.get<std::uint8_t>();
  if (has_smoothing > 1) throw FormatError("codebook file: bad has_smoothing flag");
  if (b > 16) throw FormatError("codebook file: b exceeds 16");
  if (d < 1 || file.head_dim < 1 || file.head_dim % d != 0) {
    throw FormatError("codebook file: d does not divide D");
  }
  if (has_smoothing) {
    Vector<float> lambda(file.head_dim);
    r.floats(lambda.data(), static_cast<std::size_t>(file.head_dim));
    const float floor = std::min(1e-6f, lambda.minCoeff());
    try {
      file.smoothing = SmoothingFactors(std::move(lambda), floor);
    } catch (const CalibrationError& e) {
      throw CorruptionError(std::string("codebook file: ") + e.what());
    }
  }
  RowMatrix<float> centroids;
  if (b > 0) {
    centroids.resize(Index{1} << b, d);
    r.floats(centroids.data(), static_cast<std::size_t>(centroids.size()));
  }
  const auto prov_len = r.get<std::uint32_t>();
  const auto prov = r.bytes(prov_len);
  file.provenance.assign(prov.begin(), prov.end());
  r.expect_end();
  if (b > 0) {
    try {
      file.codebook = Codebook(VQConfig{d, b, file.head_dim}, std::move(centroids), file.provenance);
    } catch (const CorruptionError&) {
      throw;
    } catch (const Error& e) {
      throw FormatError(std::string("codebook file: ") + e.what());
    }
  }
  return file;
}

// ---------------------------------------------------------------------------
// Cache snapshot

std::vector<std::uint8_t> serialize_snapshot(const QuantizedKVCache& cache) {
  const CacheConfig& cfg = cache.config();
  ByteWriter w;
  w.magic(kSnapshotMagic);
  w.put(kFormatVersion);
  w.put(checked_u32(cfg.head_dim, "head_dim"));
  w.put(checked_u32(cfg.key_cfg.d, "key d"));
  w.put(static_cast<std::uint8_t>(cfg.key_cfg.b));
  w.put(checked_u32(cfg.value_cfg.d, "value d"));
  w.put(static_cast<std::uint8_t>(cfg.value_cfg.b));
  w.put(static_cast<std::uint64_t>(cfg.residual_len));
  w.put(static_cast<std::uint64_t>(cache.quantized_len()));
  w.put(static_cast<std::uint64_t>(cache.residual_rows()));
  w.put(static_cast<std::uint64_t>(cache.total_len()));
  w.bytes(cache.packed_key_codes().bytes());
  w.bytes(cache.packed_value_codes().bytes());
  w.floats(cache.key_residual().data(), static_cast<std::size_t>(cache.key_residual().size()));
  w.floats(cache.value_residual().data(), static_cast<std::size_t>(cache.value_residual().size()));
  auto& buf = w.buffer();
  w.put(fnv1a64(buf.data(), buf.size()));
  return std::move(w.buffer());
}

QuantizedKVCache deserialize_snapshot(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "cache snapshot");
  r.expect_magic(kSnapshotMagic);
  r.expect_version();
  if (bytes.size() < 8 + r.position()) throw CorruptionError("cache snapshot: truncated file");
  {
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored = 0;
    for (int i = 7; i >= 0; --i) stored = (stored << 8) | bytes[body + static_cast<std::size_t>(i)];
    if (stored != fnv1a64(bytes.data(), body)) {
      throw CorruptionError("cache snapshot: checksum mismatch, payload is corrupted");
    }
  }

  CacheConfig cfg;
  cfg.head_dim = r.get<std::uint32_t>();
  cfg.key_cfg.d = r.get<std::uint32_t>();
  cfg.key_cfg.b = r.get<std::uint8_t>();
  cfg.value_cfg.d = r.get<std::uint32_t>();
  cfg.value_cfg.b = r.get<std::uint8_t>();
  cfg.key_cfg.head_dim = cfg.value_cfg.head_dim = cfg.head_dim;
  cfg.residual_len = static_cast<Index>(r.get<std::uint64_t>());
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("cache snapshot: ") + e.what());
  }
  const auto quantized = r.get<std::uint64_t>();
  const auto residual = r.get<std::uint64_t>();
  const auto total = r.get<std::uint64_t>();
  if (quantized + residual != total) throw CorruptionError("cache snapshot: token counts disagree");

  const std::uint64_t key_row = code_row_bytes(cfg.key_cfg);
  const std::uint64_t value_row = code_row_bytes(cfg.value_cfg);
  const std::uint64_t residual_floats = residual * static_cast<std::uint64_t>(cfg.head_dim);
  const std::uint64_t expected = quantized * (key_row + value_row) + 2 * residual_floats * 4 + 8;
  if (expected != r.remaining()) throw CorruptionError("cache snapshot: payload length mismatch");

  auto key_bytes = r.bytes(quantized * key_row);
  auto value_bytes = r.bytes(quantized * value_row);
  HeadMatrix key_residual(static_cast<Index>(residual), cfg.head_dim);
  HeadMatrix value_residual(static_cast<Index>(residual), cfg.head_dim);
  r.floats(key_residual.data(), residual_floats);
  r.floats(value_residual.data(), residual_floats);
  r.get<std::uint64_t>();
  r.expect_end();

  return QuantizedKVCache::from_parts(
      cfg,
      PackedCodes::from_bytes(static_cast<Index>(quantized), cfg.key_cfg.num_subvectors(), cfg.key_cfg.b,
                              std::move(key_bytes)),
      PackedCodes::from_bytes(static_cast<Index>(quantized), cfg.value_cfg.num_subvectors(),
                              cfg.value_cfg.b, std::move(value_bytes)),
      std::move(key_residual), std::move(value_residual));
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace vecinfer
