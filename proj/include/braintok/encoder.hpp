#pragma once

#include <string>
#include <vector>

#include "braintok/mask.hpp"
#include "braintok/model.hpp"

namespace braintok {

// Builds the transformer input: flattens the token grid row-major
// (network-major, patch-minor), substitutes the learnable mask embedding at
// masked positions, adds the sinusoidal temporal embedding and the network
// embedding everywhere (masked positions included), and prepends the CLS
// token, which receives no positional additions.
template <typename S>
typename Tape<S>::Var assemble_sequence(Tape<S>& tape, Binder<S>& bind,
                                        const Architecture<S>& arch,
                                        typename Tape<S>::Var grid,
                                        const MaskGrid* mask) {
  const Eigen::Index L = arch.grid_rows * arch.n_patches;
  if (tape.val(grid).rows() != L || tape.val(grid).cols() != arch.cfg.embed_dim)
    throw ConfigError("assemble_sequence: token grid shape mismatch");
  auto x = grid;
  if (mask != nullptr) {
    if (mask->rows != arch.grid_rows || mask->cols != arch.n_patches)
      throw ConfigError("assemble_sequence: mask shape mismatch");
    x = tape.apply_mask_rows(x, mask->bits, bind("enc/mask_emb"));
  }
  x = tape.add(x, tape.constant(arch.pos_expanded));
  x = tape.add(x, tape.gather_rows(bind("enc/net_emb"), arch.emb_index));
  return tape.concat_rows({bind("enc/cls"), x});
}

template <typename S>
struct EncodeOut {
  typename Tape<S>::Var cls;   // 1 x D
  typename Tape<S>::Var grid;  // (grid_rows * P) x D, post final layer norm
};

// Optional capture of per-layer, per-head attention matrices.
template <typename S>
struct AttnCapture {
  std::vector<Mat<S>> matrices;
};

// Pre-norm transformer with layer scale on both sublayers and a final layer
// norm: x += ls1 * Attn(LN(x)); x += ls2 * MLP(LN(x)).
template <typename S>
EncodeOut<S> encode(Tape<S>& tape, Binder<S>& bind, const Architecture<S>& arch,
                    typename Tape<S>::Var seq, AttnCapture<S>* capture = nullptr) {
  const ModelConfig& cfg = arch.cfg;
  const int D = cfg.embed_dim;
  const int dh = D / cfg.heads;
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto x = seq;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string base = "enc/l" + std::to_string(l) + "/";
    auto h = tape.layernorm_rows(x, bind(base + "ln1_gain"), bind(base + "ln1_bias"));
    auto qkv = tape.add_rowvec(tape.matmul(h, bind(base + "qkv_w")), bind(base + "qkv_b"));
    std::vector<typename Tape<S>::Var> head_outs;
    for (int hd = 0; hd < cfg.heads; ++hd) {
      auto q = tape.slice_cols(qkv, hd * dh, dh);
      auto k = tape.slice_cols(qkv, D + hd * dh, dh);
      auto v = tape.slice_cols(qkv, 2 * D + hd * dh, dh);
      auto scores = tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_dh);
      auto attn = tape.softmax_rows(scores);
      if (capture != nullptr) capture->matrices.push_back(tape.val(attn));
      head_outs.push_back(tape.matmul(attn, v));
    }
    auto attn_out = tape.add_rowvec(
        tape.matmul(tape.concat_cols(head_outs), bind(base + "attn_out_w")),
        bind(base + "attn_out_b"));
    x = tape.add(x, tape.mul_rowvec(attn_out, bind(base + "ls1")));

    auto h2 = tape.layernorm_rows(x, bind(base + "ln2_gain"), bind(base + "ln2_bias"));
    auto m = tape.gelu(
        tape.add_rowvec(tape.matmul(h2, bind(base + "mlp_w1")), bind(base + "mlp_b1")));
    m = tape.add_rowvec(tape.matmul(m, bind(base + "mlp_w2")), bind(base + "mlp_b2"));
    x = tape.add(x, tape.mul_rowvec(m, bind(base + "ls2")));

    if (!tape.val(x).allFinite())
      throw NumericError("non-finite activations in encoder layer " + std::to_string(l));
  }
  x = tape.layernorm_rows(x, bind("enc/final_ln_gain"), bind("enc/final_ln_bias"));
  EncodeOut<S> out;
  out.cls = tape.slice_rows(x, 0, 1);
  out.grid = tape.slice_rows(x, 1, tape.val(x).rows() - 1);
  return out;
}

// Shared projection head: Linear -> GELU -> Linear -> GELU -> Linear to
// proj_dim, then row-wise L2 normalization. CLS and grid tokens pass through
// the same weights.
template <typename S>
typename Tape<S>::Var project(Tape<S>& tape, Binder<S>& bind, const Architecture<S>& arch,
                              typename Tape<S>::Var x) {
  (void)arch;
  auto z = tape.gelu(tape.add_rowvec(tape.matmul(x, bind("proj/w1")), bind("proj/b1")));
  z = tape.gelu(tape.add_rowvec(tape.matmul(z, bind("proj/w2")), bind("proj/b2")));
  z = tape.add_rowvec(tape.matmul(z, bind("proj/w3")), bind("proj/b3"));
  return tape.l2normalize_rows(z);
}

}  // namespace braintok
