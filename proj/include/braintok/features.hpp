#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "braintok/encoder.hpp"
#include "braintok/rng.hpp"
#include "braintok/tokenizer.hpp"
#include "braintok/views.hpp"

namespace braintok {

// Frozen-teacher feature: CLS concatenated with the mean of all grid tokens
// (backbone outputs, post final layer norm). Stored as float32, matching the
// cache format, so in-memory and cached features are identical.
struct FeatureVector {
  std::vector<float> values;  // width 2 * D
  std::string scan_id;
  int crop_index = 0;
};

// Mask whose rows outside keep_networks are fully masked (all patches).
template <typename S>
MaskGrid network_keep_mask(const Architecture<S>& arch, const std::vector<int>& keep) {
  MaskGrid mask;
  mask.rows = arch.grid_rows;
  mask.cols = arch.n_patches;
  mask.strategy = MaskStrategy::kNetwork;
  mask.bits.assign(static_cast<std::size_t>(mask.rows) * static_cast<std::size_t>(mask.cols), 1);
  for (int r = 0; r < mask.rows; ++r) {
    const int net = arch.row_network[static_cast<std::size_t>(r)];
    if (std::find(keep.begin(), keep.end(), net) != keep.end())
      for (int p = 0; p < mask.cols; ++p) mask.set(r, p, 0);
  }
  return mask;
}

// Forward pass of the (frozen) parameter set on one view with an optional
// grid mask; returns the 2*D feature.
template <typename S>
FeatureVector forward_feature(ParamSet<S>& params, const Architecture<S>& arch,
                              const MatXd& view, const MaskGrid* mask) {
  Tape<S> tape(false);
  Binder<S> bind(tape, params);
  auto grid_tok = tokenize(tape, bind, arch, view);
  auto seq = assemble_sequence(tape, bind, arch, grid_tok, mask);
  auto enc = encode(tape, bind, arch, seq);
  const Mat<S>& cls = tape.val(enc.cls);
  const Mat<S>& grid = tape.val(enc.grid);
  Eigen::Matrix<S, 1, Eigen::Dynamic> mean = grid.colwise().mean();
  FeatureVector f;
  f.values.reserve(static_cast<std::size_t>(2 * arch.cfg.embed_dim));
  for (Eigen::Index j = 0; j < cls.cols(); ++j)
    f.values.push_back(static_cast<float>(cls(0, j)));
  for (Eigen::Index j = 0; j < mean.cols(); ++j)
    f.values.push_back(static_cast<float>(mean(0, j)));
  return f;
}

// Equally-spaced crop starts: floor(linspace(0, T - T_crop, n_crops)).
inline std::vector<Eigen::Index> crop_starts(Eigen::Index T, Eigen::Index t_crop,
                                             int n_crops) {
  if (T < t_crop)
    throw ConfigError("extract_features: scan shorter than t_crop");
  std::vector<Eigen::Index> starts;
  if (n_crops == 1) {
    starts.push_back(0);
    return starts;
  }
  const double span = static_cast<double>(T - t_crop);
  for (int j = 0; j < n_crops; ++j)
    starts.push_back(static_cast<Eigen::Index>(
        std::floor(span * static_cast<double>(j) / static_cast<double>(n_crops - 1))));
  return starts;
}

// Evaluation-time feature extraction: no corruption augmentations, unmasked
// teacher forward unless keep_networks restricts the visible networks.
template <typename S>
std::vector<FeatureVector> extract_features(const ScanTimeSeries& scan,
                                            ParamSet<S>& params,
                                            const Architecture<S>& arch, int n_crops,
                                            const std::vector<int>* keep_networks = nullptr) {
  std::optional<MaskGrid> mask;
  if (keep_networks != nullptr) mask = network_keep_mask(arch, *keep_networks);
  const auto starts = crop_starts(scan.data.cols(), arch.cfg.t_crop, n_crops);
  std::vector<FeatureVector> out;
  for (int j = 0; j < static_cast<int>(starts.size()); ++j) {
    const MatXd view =
        scan.data.middleCols(starts[static_cast<std::size_t>(j)], arch.cfg.t_crop);
    FeatureVector f = forward_feature(params, arch, view, mask ? &*mask : nullptr);
    f.scan_id = scan.scan_id;
    f.crop_index = j;
    out.push_back(std::move(f));
  }
  return out;
}

// ---- single-patch task-segment inference ---------------------------------------

enum class SinglePatchStrategy { kPad, kContinuous, kConcat };

inline SinglePatchStrategy single_patch_strategy_from_string(const std::string& s) {
  if (s == "pad") return SinglePatchStrategy::kPad;
  if (s == "continuous") return SinglePatchStrategy::kContinuous;
  if (s == "concat") return SinglePatchStrategy::kConcat;
  throw ConfigError("unknown single-patch strategy: " + s);
}

// Builds one C x patch_len block of real data from 1-2 segment blocks.
//   pad:        one block, length <= patch_len, zero-padded at the end;
//   continuous: one block, length >= patch_len, a window starting at
//               window_start (clamped);
//   concat:     two blocks; if together over-long, both are cropped equally
//               (from their ends), then zero-padded if still short.
inline MatXd build_single_patch(const std::vector<MatXd>& blocks,
                                SinglePatchStrategy strategy, int patch_len,
                                Eigen::Index window_start = 0) {
  if (blocks.empty()) throw ConfigError("single_patch: no segment given");
  for (const auto& b : blocks)
    if (b.cols() == 0 || b.rows() == 0) throw ConfigError("single_patch: empty segment");
  const Eigen::Index C = blocks[0].rows();
  MatXd patch = MatXd::Zero(C, patch_len);
  switch (strategy) {
    case SinglePatchStrategy::kPad: {
      if (blocks.size() != 1) throw ConfigError("pad strategy takes one block");
      const auto& b = blocks[0];
      if (b.cols() > patch_len)
        throw ConfigError("single_patch: segment longer than patch_len");
      patch.leftCols(b.cols()) = b;
      break;
    }
    case SinglePatchStrategy::kContinuous: {
      if (blocks.size() != 1) throw ConfigError("continuous strategy takes one block");
      const auto& b = blocks[0];
      if (b.cols() < patch_len)
        throw ConfigError("single_patch: continuous strategy needs >= patch_len timepoints");
      const Eigen::Index start = std::clamp<Eigen::Index>(window_start, 0,
                                                          b.cols() - patch_len);
      patch = b.middleCols(start, patch_len);
      break;
    }
    case SinglePatchStrategy::kConcat: {
      if (blocks.size() != 2) throw ConfigError("concat strategy takes two blocks");
      if (blocks[1].rows() != C) throw ConfigError("single_patch: ROI count mismatch");
      Eigen::Index l1 = blocks[0].cols(), l2 = blocks[1].cols();
      const Eigen::Index over = l1 + l2 - patch_len;
      if (over > 0) {
        const Eigen::Index c1 = (over + 1) / 2, c2 = over / 2;
        l1 -= c1;
        l2 -= c2;
        if (l1 < 1 || l2 < 1)
          throw ConfigError("single_patch: blocks too long to crop equally");
      }
      patch.leftCols(l1) = blocks[0].leftCols(l1);
      patch.middleCols(l1, l2) = blocks[1].leftCols(l2);
      break;
    }
  }
  return patch;
}

// Places the constructed patch as the first or last temporal patch of a
// zero-filled full-length input, masks every other temporal column with the
// learned mask embedding, and extracts the teacher feature.
template <typename S>
FeatureVector single_patch_features(const std::vector<MatXd>& blocks,
                                    SinglePatchStrategy strategy, ParamSet<S>& params,
                                    const Architecture<S>& arch, bool place_last = false,
                                    Eigen::Index window_start = 0) {
  const MatXd patch = build_single_patch(blocks, strategy, arch.cfg.patch_len, window_start);
  if (patch.rows() != arch.atlas.n_rois())
    throw ConfigError("single_patch: ROI count mismatch with atlas");
  MatXd view = MatXd::Zero(patch.rows(), arch.cfg.t_crop);
  const int slot = place_last ? arch.n_patches - 1 : 0;
  view.middleCols(slot * arch.cfg.patch_len, arch.cfg.patch_len) = patch;

  MaskGrid mask;
  mask.rows = arch.grid_rows;
  mask.cols = arch.n_patches;
  mask.strategy = MaskStrategy::kTemporal;
  mask.bits.assign(static_cast<std::size_t>(mask.rows) * static_cast<std::size_t>(mask.cols), 1);
  for (int r = 0; r < mask.rows; ++r) mask.set(r, slot, 0);

  return forward_feature(params, arch, view, &mask);
}

// ---- feature cache -------------------------------------------------------------
// Little-endian: magic "BSFT", u32 version, u32 dim, u32 count, then per
// record: scan_id, u32 crop index, dim float32 values.

inline constexpr std::uint32_t kFeatureMagic = 0x54465342;  // "BSFT"
inline constexpr std::uint32_t kFeatureVersion = 1;

inline void write_features(const std::vector<FeatureVector>& features,
                           const std::string& path) {
  if (features.empty()) throw ConfigError("write_features: empty feature list");
  BinWriter w(path);
  w.put<std::uint32_t>(kFeatureMagic);
  w.put<std::uint32_t>(kFeatureVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(features[0].values.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(features.size()));
  for (const auto& f : features) {
    w.put_string(f.scan_id);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.crop_index));
    for (float v : f.values) w.put<float>(v);
  }
  w.close();
}

inline std::vector<FeatureVector> load_features(const std::string& path) {
  BinReader r(path);
  if (r.get<std::uint32_t>() != kFeatureMagic)
    throw IoError("not a feature table (bad magic): " + path);
  if (r.get<std::uint32_t>() != kFeatureVersion)
    throw IoError("unsupported feature table version: " + path);
  const auto dim = r.get<std::uint32_t>();
  const auto count = r.get<std::uint32_t>();
  std::vector<FeatureVector> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureVector f;
    f.scan_id = r.get_string();
    f.crop_index = static_cast<int>(r.get<std::uint32_t>());
    f.values.resize(dim);
    for (std::uint32_t j = 0; j < dim; ++j) f.values[j] = r.get<float>();
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace braintok
