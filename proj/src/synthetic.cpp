#include "vecinfer/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "vecinfer/random.hpp"

namespace vecinfer {

Tail parse_tail(std::string_view name) {
  if (name == "gauss") return Tail::Gauss;
  if (name == "laplace") return Tail::Laplace;
  throw ShapeError("unknown tail '" + std::string(name) + "', expected gauss or laplace");
}

std::string_view tail_name(Tail tail) { return tail == Tail::Gauss ? "gauss" : "laplace"; }

SyntheticKeys generate_keys(const SyntheticSpec& spec) {
  if (spec.n < 1 || spec.d < 1) throw ShapeError("generate_keys: n and d must be positive");
  if (spec.outlier_channels < 0 || spec.outlier_channels > spec.d) {
    throw ShapeError("generate_keys: outlier channel count out of range");
  }
  if (!(spec.outlier_scale > 0.0f)) throw ShapeError("generate_keys: outlier scale must be positive");

  SyntheticKeys out;
  out.data.resize(spec.n, spec.d);
  Rng rng(spec.seed);
  for (Index i = 0; i < out.data.size(); ++i) {
    const double x = spec.tail == Tail::Gauss ? rng.normal() : rng.laplace();
    out.data.data()[i] = static_cast<float>(x);
  }

  // Channel choice uses its own stream so it does not depend on n.
  Rng pick(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Index> channels(static_cast<std::size_t>(spec.d));
  std::iota(channels.begin(), channels.end(), Index{0});
  for (Index i = 0; i < spec.outlier_channels; ++i) {
    const auto j = i + static_cast<Index>(pick.uniform_index(static_cast<std::uint64_t>(spec.d - i)));
    std::swap(channels[i], channels[j]);
  }
  out.outlier_channels.assign(channels.begin(), channels.begin() + spec.outlier_channels);
  std::sort(out.outlier_channels.begin(), out.outlier_channels.end());
  for (Index c : out.outlier_channels) out.data.col(c) *= spec.outlier_scale;
  return out;
}

HeadMatrix gaussian_matrix(Index rows, Index cols, std::uint64_t seed) {
  HeadMatrix out(rows, cols);
  Rng rng(seed);
  for (Index i = 0; i < out.size(); ++i) out.data()[i] = static_cast<float>(rng.normal());
  return out;
}

}  // namespace vecinfer
