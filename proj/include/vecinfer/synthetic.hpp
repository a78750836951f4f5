#pragma once

// Deterministic key/value generators with planted channel outliers: i.i.d.
// base samples, with a fixed set of channels multiplied by a large scale.

#include <cstdint>
#include <string_view>
#include <vector>

#include "vecinfer/types.hpp"

namespace vecinfer {

enum class Tail { Gauss, Laplace };

Tail parse_tail(std::string_view name);
std::string_view tail_name(Tail tail);

struct SyntheticSpec {
  Index n = 1024;
  Index d = 128;
  Index outlier_channels = 0;
  float outlier_scale = 1.0f;
  Tail tail = Tail::Gauss;
  std::uint64_t seed = 0;
};

struct SyntheticKeys {
  HeadMatrix data;
  std::vector<Index> outlier_channels;  // ascending
};

SyntheticKeys generate_keys(const SyntheticSpec& spec);

/// i.i.d. N(0, 1) entries.
HeadMatrix gaussian_matrix(Index rows, Index cols, std::uint64_t seed);

}  // namespace vecinfer
