#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "braintok/errors.hpp"
#include "braintok/rng.hpp"

namespace braintok {

enum class MaskStrategy { kSlice, kNetwork, kTemporal, kRandom, kBlock };

inline MaskStrategy mask_strategy_from_string(const std::string& s) {
  if (s == "slice") return MaskStrategy::kSlice;
  if (s == "network") return MaskStrategy::kNetwork;
  if (s == "temporal") return MaskStrategy::kTemporal;
  if (s == "random") return MaskStrategy::kRandom;
  if (s == "block") return MaskStrategy::kBlock;
  throw ConfigError("unknown mask strategy: " + s);
}

inline const char* to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::kSlice: return "slice";
    case MaskStrategy::kNetwork: return "network";
    case MaskStrategy::kTemporal: return "temporal";
    case MaskStrategy::kRandom: return "random";
    case MaskStrategy::kBlock: return "block";
  }
  return "?";
}

// Binary mask over the rows x cols token grid. bit(n, p) == 1 means the
// student sees the mask embedding at that position.
struct MaskGrid {
  int rows = 0;  // networks
  int cols = 0;  // temporal patches
  std::vector<std::uint8_t> bits;  // row-major
  MaskStrategy strategy = MaskStrategy::kSlice;

  std::uint8_t at(int n, int p) const {
    return bits[static_cast<std::size_t>(n) * static_cast<std::size_t>(cols) +
                static_cast<std::size_t>(p)];
  }
  void set(int n, int p, std::uint8_t v) {
    bits[static_cast<std::size_t>(n) * static_cast<std::size_t>(cols) +
         static_cast<std::size_t>(p)] = v;
  }
  int count_masked() const {
    int k = 0;
    for (auto b : bits) k += b;
    return k;
  }
  double realized_ratio() const {
    return static_cast<double>(count_masked()) / static_cast<double>(rows * cols);
  }
};

inline int clamp_slices(double target, int dim) {
  const int k = static_cast<int>(std::lround(target));
  return std::clamp(k, 1, dim - 1);
}

// Mask with a pinned target ratio (the ratio draw lives in sample_mask).
inline MaskGrid sample_mask_with_ratio(int N, int P, double r, MaskStrategy strategy,
                                       Rng& rng) {
  if (N * P < 2) throw ConfigError("sample_mask: grid must have at least 2 cells");
  MaskGrid grid;
  grid.rows = N;
  grid.cols = P;
  grid.bits.assign(static_cast<std::size_t>(N) * static_cast<std::size_t>(P), 0);
  grid.strategy = strategy;

  MaskStrategy chosen = strategy;
  if (strategy == MaskStrategy::kSlice)
    chosen = rng.uniform() < 0.5 ? MaskStrategy::kNetwork : MaskStrategy::kTemporal;

  switch (chosen) {
    case MaskStrategy::kNetwork: {
      if (N < 2) throw ConfigError("network masking needs at least 2 rows");
      const int k = clamp_slices(r * N, N);
      for (std::size_t row : rng.sample_without_replacement(static_cast<std::size_t>(N),
                                                            static_cast<std::size_t>(k)))
        for (int p = 0; p < P; ++p) grid.set(static_cast<int>(row), p, 1);
      break;
    }
    case MaskStrategy::kTemporal: {
      if (P < 2) throw ConfigError("temporal masking needs at least 2 columns");
      const int k = clamp_slices(r * P, P);
      const int start = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(P - k + 1)));
      for (int n = 0; n < N; ++n)
        for (int p = start; p < start + k; ++p) grid.set(n, p, 1);
      break;
    }
    case MaskStrategy::kRandom: {
      const int total = N * P;
      const int k = std::clamp(static_cast<int>(std::floor(r * total)), 1, total - 1);
      for (std::size_t cell : rng.sample_without_replacement(
               static_cast<std::size_t>(total), static_cast<std::size_t>(k)))
        grid.bits[cell] = 1;
      break;
    }
    case MaskStrategy::kBlock: {
      // Rectangle with area closest to r*N*P, never the full grid; ties are
      // broken uniformly at random among the minimizing shapes.
      const double target = r * N * P;
      double best = 1e300;
      std::vector<std::pair<int, int>> candidates;
      for (int h = 1; h <= N; ++h)
        for (int w = 1; w <= P; ++w) {
          if (h == N && w == P) continue;
          const double diff = std::abs(static_cast<double>(h * w) - target);
          if (diff < best - 1e-12) {
            best = diff;
            candidates.clear();
          }
          if (std::abs(diff - best) <= 1e-12) candidates.emplace_back(h, w);
        }
      const auto [h, w] =
          candidates[static_cast<std::size_t>(rng.uniform_int(candidates.size()))];
      const int r0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(N - h + 1)));
      const int c0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(P - w + 1)));
      for (int n = r0; n < r0 + h; ++n)
        for (int p = c0; p < c0 + w; ++p) grid.set(n, p, 1);
      break;
    }
    case MaskStrategy::kSlice:
      break;  // unreachable
  }

  const int masked = grid.count_masked();
  if (masked == 0 || masked == N * P)
    throw NumericError("sample_mask produced an all-or-nothing grid");
  return grid;
}

// Draws the target ratio r ~ U[lo, hi] and delegates.
inline MaskGrid sample_mask(int N, int P, double ratio_lo, double ratio_hi,
                            MaskStrategy strategy, Rng& rng) {
  if (ratio_lo < 0.0 || ratio_hi > 1.0 || ratio_lo > ratio_hi)
    throw ConfigError("sample_mask: need 0 <= lo <= hi <= 1");
  const double r = rng.uniform(ratio_lo, ratio_hi);
  return sample_mask_with_ratio(N, P, r, strategy, rng);
}

}  // namespace braintok
