#pragma once

#include <cmath>

#include "braintok/errors.hpp"
#include "braintok/tape.hpp"

namespace braintok {

// Expansion factor: each ROI gets H filter sets so that H * C_n reaches at
// least the per-branch width D/2 before projection.
inline int expansion_heads(int c_n, int embed_dim) {
  if (c_n < 1) throw ConfigError("expansion_heads: C_n must be >= 1");
  if (embed_dim % 2 != 0) throw ConfigError("expansion_heads: D must be even");
  return static_cast<int>(std::ceil(static_cast<double>(embed_dim / 2) /
                                    static_cast<double>(c_n)));
}

// Total structured-kernel length for a given base length and scale count:
// segments of length b, b, 2b, 4b, ... (scale j upsamples by 2^(j-1) for
// j >= 1), e.g. base 4 with 3 scales -> 4 + 4 + 8 = 16 taps.
inline int structured_kernel_len(int base_len, int scales) {
  if (base_len < 1 || scales < 1)
    throw ConfigError("structured kernel: base_len and scales must be >= 1");
  int len = base_len;
  for (int j = 1; j < scales; ++j) len += base_len << (j - 1);
  return len;
}

inline int structured_free_params(int base_len, int scales) { return base_len * scales; }

// Builds the structured kernels from free parameters (one row per channel,
// base_len * scales free values each). Scale j holds base_len parameters,
// nearest-neighbour upsampled by 2^(j-1) (j >= 1) and weighted 2^(scales-1-j),
// so the default (4, 3) yields weights 4.0, 2.0, 1.0 over lengths 4, 4, 8.
template <typename S>
typename Tape<S>::Var structured_kernel(Tape<S>& tape, typename Tape<S>::Var free_params,
                                        int base_len, int scales) {
  std::vector<typename Tape<S>::Var> segments;
  for (int j = 0; j < scales; ++j) {
    auto seg = tape.slice_cols(free_params, j * base_len, base_len);
    if (j >= 1) seg = tape.upsample_cols(seg, 1 << (j - 1));
    const S weight = static_cast<S>(1 << (scales - 1 - j));
    segments.push_back(tape.scale(seg, weight));
  }
  return tape.concat_cols(segments);
}

// Plain (non-autodiff) evaluation of the same template; used where no
// gradient is needed.
template <typename S>
Mat<S> structured_kernel_plain(const Mat<S>& free_params, int base_len, int scales) {
  Tape<S> tape(false);
  return tape.val(structured_kernel(tape, tape.constant(free_params), base_len, scales));
}

}  // namespace braintok
