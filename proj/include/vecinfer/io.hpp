#pragma once

// Binary file formats. All integers are little-endian; float payloads are
// IEEE-754 binary32 unless a tensor is stored as binary16.
//
// Tensor ("VITN", v1)
//   magic[4] u32 version u8 dtype(0=f32,1=f16) u8 ndims u64 dims[ndims] payload
// Codebook ("VICB", v1)
//   magic[4] u32 version u32 D u32 d u8 b u8 has_smoothing
//   f32 lambda[D] (if has_smoothing)  f32 centroids[2^b * d] (if b > 0)
//   u32 provenance_len  utf8 provenance
//   b == 0 marks a smoothing-only file.
// Cache snapshot ("VIKV", v1)
//   magic[4] u32 version u32 D u32 key_d u8 key_b u32 value_d u8 value_b
//   u64 residual_len u64 quantized_rows u64 residual_rows u64 total_len
//   key codes[quantized_rows * key_row_bytes] value codes[quantized_rows * value_row_bytes]
//   f32 key_residual[residual_rows * D] f32 value_residual[residual_rows * D]
//   u64 fnv1a64 over every preceding byte

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vecinfer/kvcache.hpp"

namespace vecinfer {

class IoError : public Error {
 public:
  using Error::Error;
};

enum class DType : std::uint8_t { F32 = 0, F16 = 1 };

inline constexpr std::uint32_t kFormatVersion = 1;

struct CodebookFile {
  Index head_dim = 0;
  std::optional<SmoothingFactors> smoothing;
  std::optional<Codebook> codebook;
  // Used only for smoothing-only files; a codebook carries its own.
  std::string provenance;
};

std::vector<std::uint8_t> serialize_tensor(const HeadMatrix& x, DType dtype = DType::F32);
/// 1-D tensors load as a single row; higher ranks fold trailing dims into columns.
HeadMatrix deserialize_tensor(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> serialize_codebook(const CodebookFile& file);
CodebookFile deserialize_codebook(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> serialize_snapshot(const QuantizedKVCache& cache);
QuantizedKVCache deserialize_snapshot(const std::vector<std::uint8_t>& bytes);

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

inline HeadMatrix load_tensor(const std::filesystem::path& p) { return deserialize_tensor(read_file(p)); }
inline void save_tensor(const std::filesystem::path& p, const HeadMatrix& x, DType dtype = DType::F32) {
  write_file(p, serialize_tensor(x, dtype));
}
inline CodebookFile load_codebook(const std::filesystem::path& p) { return deserialize_codebook(read_file(p)); }
inline void save_codebook(const std::filesystem::path& p, const CodebookFile& f) {
  write_file(p, serialize_codebook(f));
}
inline QuantizedKVCache load_snapshot(const std::filesystem::path& p) {
  return deserialize_snapshot(read_file(p));
}
inline void save_snapshot(const std::filesystem::path& p, const QuantizedKVCache& c) {
  write_file(p, serialize_snapshot(c));
}

}  // namespace vecinfer
