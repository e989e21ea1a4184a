#pragma once

#include <vector>

#include "braintok/model.hpp"
#include "braintok/views.hpp"

namespace braintok {

// Semantic tokenizer forward pass. Returns the token grid as a
// (grid_rows * P) x D matrix, row-major over (row, patch).
//
// Per network and patch: both convolution branches run on the patch slice
// with zero 'same' padding (no cross-patch leakage), each branch adds its
// feedthrough term lambda * (input replicated across heads), projects to D/2,
// and the concatenated D-vector stream is GELU'd, average-pooled over time
// and layer-normalized.
template <typename S>
typename Tape<S>::Var tokenize(Tape<S>& tape, Binder<S>& bind,
                               const Architecture<S>& arch, const MatXd& view_data) {
  const ModelConfig& cfg = arch.cfg;
  if (view_data.cols() != cfg.t_crop)
    throw ConfigError("tokenize: view has " + std::to_string(view_data.cols()) +
                      " timepoints, model expects " + std::to_string(cfg.t_crop));
  if (view_data.rows() != arch.atlas.n_rois())
    throw ConfigError("tokenize: ROI count mismatch with atlas");
  const int P = arch.n_patches;
  const int plen = cfg.patch_len;

  if (cfg.tokenizer_type == "roi_linear") {
    // Baseline: one shared linear projection per ROI patch.
    auto w = bind("tok/linear_w");
    auto b = bind("tok/linear_b");
    auto lg = bind("tok/ln_gain");
    auto lb = bind("tok/ln_bias");
    std::vector<typename Tape<S>::Var> per_patch;
    for (int p = 0; p < P; ++p) {
      Mat<S> xp = view_data.middleCols(p * plen, plen).template cast<S>();
      auto tokens = tape.add_rowvec(tape.matmul(tape.constant(std::move(xp)), w), b);
      per_patch.push_back(tape.layernorm_rows(tokens, lg, lb));
    }
    // Stacked patch-major; reorder to row-major over (roi, patch).
    auto stacked = tape.concat_rows(per_patch);
    std::vector<int> perm(static_cast<std::size_t>(arch.grid_rows * P));
    for (int r = 0; r < arch.grid_rows; ++r)
      for (int p = 0; p < P; ++p)
        perm[static_cast<std::size_t>(r * P + p)] = p * arch.grid_rows + r;
    return tape.permute_rows(stacked, std::move(perm));
  }

  const int kd = cfg.dense_kernel_len;
  const int ks = structured_kernel_len(cfg.base_kernel_len, cfg.kernel_scales);
  std::vector<typename Tape<S>::Var> tokens;
  tokens.reserve(static_cast<std::size_t>(arch.grid_rows * P));
  for (int n = 0; n < arch.atlas.n_networks; ++n) {
    const std::string base = "tok/net" + std::to_string(n) + "/";
    const auto& members = arch.net_members[static_cast<std::size_t>(n)];
    const int H = arch.net_heads[static_cast<std::size_t>(n)];
    Mat<S> xn(static_cast<Eigen::Index>(members.size()), cfg.t_crop);
    for (std::size_t i = 0; i < members.size(); ++i)
      xn.row(static_cast<Eigen::Index>(i)) =
          view_data.row(members[i]).template cast<S>();
    auto x_net = tape.constant(std::move(xn));

    auto dense_w = bind(base + "dense_kernel");
    auto dense_b = bind(base + "dense_bias");
    auto str_kernel = structured_kernel(tape, bind(base + "str_free"),
                                        cfg.base_kernel_len, cfg.kernel_scales);
    auto str_b = bind(base + "str_bias");
    auto ft_std = bind(base + "ft_std");
    auto ft_str = bind(base + "ft_str");
    auto proj_std_w = bind(base + "proj_std");
    auto proj_std_b = bind(base + "proj_std_bias");
    auto proj_str_w = bind(base + "proj_str");
    auto proj_str_b = bind(base + "proj_str_bias");
    auto ln_gain = bind(base + "ln_gain");
    auto ln_bias = bind(base + "ln_bias");

    for (int p = 0; p < P; ++p) {
      auto xp = tape.slice_cols(x_net, p * plen, plen);
      auto rep = tape.replicate_rows(xp, H);

      auto dense = tape.add_colvec(
          tape.matmul(dense_w, tape.unfold1d(xp, kd, (kd - 1) / 2)), dense_b);
      dense = tape.add(dense, tape.mul_colvec(rep, ft_std));
      auto branch_std = tape.add_colvec(tape.matmul(proj_std_w, dense), proj_std_b);

      auto str = tape.add_colvec(tape.dwconv1d(rep, str_kernel, (ks - 1) / 2), str_b);
      str = tape.add(str, tape.mul_colvec(rep, ft_str));
      auto branch_str = tape.add_colvec(tape.matmul(proj_str_w, str), proj_str_b);

      auto features = tape.gelu(tape.concat_rows({branch_std, branch_str}));
      auto pooled = tape.transpose(tape.mean_cols(features));  // 1 x D
      tokens.push_back(tape.layernorm_rows(pooled, ln_gain, ln_bias));
    }
  }
  return tape.concat_rows(tokens);
}

// Tokenizes a view without gradient tracking and returns the plain grid.
template <typename S>
Mat<S> tokenize_plain(ParamSet<S>& params, const Architecture<S>& arch,
                      const MatXd& view_data) {
  Tape<S> tape(false);
  Binder<S> bind(tape, params);
  return tape.val(tokenize(tape, bind, arch, view_data));
}

}  // namespace braintok
