#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "braintok/dataset.hpp"
#include "braintok/params.hpp"
#include "braintok/rng.hpp"
#include "braintok/tokenizer_core.hpp"

namespace braintok {

struct ModelConfig {
  // tokenizer
  std::string tokenizer_type = "semantic";  // "semantic" | "roi_linear"
  int patch_len = 20;
  int embed_dim = 768;
  int dense_kernel_len = 3;
  int base_kernel_len = 4;
  int kernel_scales = 3;
  double feedthrough_init = 0.5;
  double structured_init_std = 0.02;
  // encoder
  int depth = 8;
  int heads = 8;
  int mlp_ratio = 4;
  double layer_scale_init = 0.1;
  // projection head
  int proj_hidden = 1024;
  int proj_dim = 128;
  // view length the model consumes
  int t_crop = 100;

  int n_patches() const { return t_crop / patch_len; }

  void validate() const {
    if (tokenizer_type != "semantic" && tokenizer_type != "roi_linear")
      throw ConfigError("tokenizer type must be 'semantic' or 'roi_linear'");
    if (patch_len < 1 || t_crop < 1 || t_crop % patch_len != 0)
      throw ConfigError("t_crop must be a positive multiple of patch_len");
    if (embed_dim < 2 || embed_dim % 2 != 0)
      throw ConfigError("embed_dim must be even and >= 2");
    if (depth < 0) throw ConfigError("depth must be >= 0");
    if (heads < 1 || embed_dim % heads != 0)
      throw ConfigError("heads must divide embed_dim");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    if (proj_hidden < 1 || proj_dim < 1)
      throw ConfigError("projector dimensions must be positive");
    if (dense_kernel_len < 1 || base_kernel_len < 1 || kernel_scales < 1)
      throw ConfigError("kernel configuration must be positive");
  }
};

// Fixed sinusoidal table: row p, column 2i is sin(p / 10000^(2i/D)), column
// 2i+1 the matching cos.
template <typename S>
Mat<S> sinusoidal_position_table(int n_positions, int dim) {
  Mat<S> table(n_positions, dim);
  for (int p = 0; p < n_positions; ++p)
    for (int i = 0; i < dim; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(dim);
      const double angle = static_cast<double>(p) / std::pow(10000.0, exponent);
      table(p, i) = static_cast<S>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return table;
}

// Architecture metadata shared by the student and teacher parameter stores.
template <typename S>
struct Architecture {
  ModelConfig cfg;
  AtlasMapping atlas;
  std::vector<std::vector<int>> net_members;  // per network: ROI indices
  std::vector<int> net_heads;                 // per network: expansion H
  std::vector<int> row_network;               // grid row -> network id
  int grid_rows = 0;
  int n_patches = 0;
  Mat<S> pos_table;     // P x D
  Mat<S> pos_expanded;  // (grid_rows * P) x D, row i = pos_table.row(i % P)
  std::vector<int> emb_index;  // (grid_rows * P) gather index into net_emb

  int seq_len() const { return grid_rows * n_patches + 1; }

  static Architecture build(ModelConfig cfg, AtlasMapping atlas) {
    cfg.validate();
    atlas.validate();
    Architecture a;
    a.cfg = cfg;
    a.atlas = std::move(atlas);
    a.n_patches = cfg.n_patches();
    for (int n = 0; n < a.atlas.n_networks; ++n) {
      a.net_members.push_back(a.atlas.network_members(n));
      a.net_heads.push_back(expansion_heads(
          static_cast<int>(a.net_members.back().size()), cfg.embed_dim));
    }
    if (cfg.tokenizer_type == "semantic") {
      a.grid_rows = a.atlas.n_networks;
      for (int n = 0; n < a.grid_rows; ++n) a.row_network.push_back(n);
    } else {
      a.grid_rows = a.atlas.n_rois();
      a.row_network = a.atlas.roi_network;
    }
    a.pos_table = sinusoidal_position_table<S>(a.n_patches, cfg.embed_dim);
    a.pos_expanded.resize(a.grid_rows * a.n_patches, cfg.embed_dim);
    for (int i = 0; i < a.grid_rows * a.n_patches; ++i) {
      a.pos_expanded.row(i) = a.pos_table.row(i % a.n_patches);
      a.emb_index.push_back(a.row_network[static_cast<std::size_t>(i / a.n_patches)]);
    }
    return a;
  }

  // Creates and initializes all parameters. The draw order is the creation
  // order below, so (config, seed) pins every initial value.
  void build_params(ParamSet<S>& ps, Rng& rng) const {
    const int D = cfg.embed_dim;
    const auto uniform_fill = [&rng](Mat<S>& m, double bound) {
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
          m(i, j) = static_cast<S>(rng.uniform(-bound, bound));
    };
    const auto normal_fill = [&rng](Mat<S>& m, double sd) {
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
          m(i, j) = static_cast<S>(rng.normal(0.0, sd));
    };

    if (cfg.tokenizer_type == "semantic") {
      for (int n = 0; n < atlas.n_networks; ++n) {
        const std::string base = "tok/net" + std::to_string(n) + "/";
        const int cn = static_cast<int>(net_members[static_cast<std::size_t>(n)].size());
        const int hc = net_heads[static_cast<std::size_t>(n)] * cn;
        const int kd = cfg.dense_kernel_len;
        auto& dense = ps.add(base + "dense_kernel", hc, cn * kd, true);
        uniform_fill(dense.value, 1.0 / std::sqrt(static_cast<double>(cn * kd)));
        ps.add(base + "dense_bias", hc, 1, false);
        auto& str = ps.add(base + "str_free", hc,
                           structured_free_params(cfg.base_kernel_len, cfg.kernel_scales),
                           true);
        normal_fill(str.value, cfg.structured_init_std);
        ps.add(base + "str_bias", hc, 1, false);
        auto& ft_std = ps.add(base + "ft_std", hc, 1, false);
        ft_std.value.setConstant(static_cast<S>(cfg.feedthrough_init));
        auto& ft_str = ps.add(base + "ft_str", hc, 1, false);
        ft_str.value.setConstant(static_cast<S>(cfg.feedthrough_init));
        auto& p_std = ps.add(base + "proj_std", D / 2, hc, true);
        uniform_fill(p_std.value, 1.0 / std::sqrt(static_cast<double>(hc)));
        ps.add(base + "proj_std_bias", D / 2, 1, false);
        auto& p_str = ps.add(base + "proj_str", D / 2, hc, true);
        uniform_fill(p_str.value, 1.0 / std::sqrt(static_cast<double>(hc)));
        ps.add(base + "proj_str_bias", D / 2, 1, false);
        ps.add(base + "ln_gain", 1, D, false).value.setOnes();
        ps.add(base + "ln_bias", 1, D, false);
      }
    } else {
      auto& w = ps.add("tok/linear_w", cfg.patch_len, D, true);
      uniform_fill(w.value, 1.0 / std::sqrt(static_cast<double>(cfg.patch_len)));
      ps.add("tok/linear_b", 1, D, false);
      ps.add("tok/ln_gain", 1, D, false).value.setOnes();
      ps.add("tok/ln_bias", 1, D, false);
    }

    normal_fill(ps.add("enc/cls", 1, D, false).value, 0.02);
    normal_fill(ps.add("enc/mask_emb", 1, D, false).value, 0.02);
    normal_fill(ps.add("enc/net_emb", atlas.n_networks, D, false).value, 0.02);
    const double db = 1.0 / std::sqrt(static_cast<double>(D));
    for (int l = 0; l < cfg.depth; ++l) {
      const std::string base = "enc/l" + std::to_string(l) + "/";
      ps.add(base + "ln1_gain", 1, D, false).value.setOnes();
      ps.add(base + "ln1_bias", 1, D, false);
      uniform_fill(ps.add(base + "qkv_w", D, 3 * D, true).value, db);
      ps.add(base + "qkv_b", 1, 3 * D, false);
      uniform_fill(ps.add(base + "attn_out_w", D, D, true).value, db);
      ps.add(base + "attn_out_b", 1, D, false);
      ps.add(base + "ls1", 1, D, false).value.setConstant(
          static_cast<S>(cfg.layer_scale_init));
      ps.add(base + "ln2_gain", 1, D, false).value.setOnes();
      ps.add(base + "ln2_bias", 1, D, false);
      const int hidden = cfg.mlp_ratio * D;
      uniform_fill(ps.add(base + "mlp_w1", D, hidden, true).value, db);
      ps.add(base + "mlp_b1", 1, hidden, false);
      uniform_fill(ps.add(base + "mlp_w2", hidden, D, true).value,
                   1.0 / std::sqrt(static_cast<double>(hidden)));
      ps.add(base + "mlp_b2", 1, D, false);
      ps.add(base + "ls2", 1, D, false).value.setConstant(
          static_cast<S>(cfg.layer_scale_init));
    }
    ps.add("enc/final_ln_gain", 1, D, false).value.setOnes();
    ps.add("enc/final_ln_bias", 1, D, false);

    uniform_fill(ps.add("proj/w1", D, cfg.proj_hidden, true).value, db);
    ps.add("proj/b1", 1, cfg.proj_hidden, false);
    const double hb = 1.0 / std::sqrt(static_cast<double>(cfg.proj_hidden));
    uniform_fill(ps.add("proj/w2", cfg.proj_hidden, cfg.proj_hidden, true).value, hb);
    ps.add("proj/b2", 1, cfg.proj_hidden, false);
    uniform_fill(ps.add("proj/w3", cfg.proj_hidden, cfg.proj_dim, true).value, hb);
    ps.add("proj/b3", 1, cfg.proj_dim, false);
  }
};

}  // namespace braintok
