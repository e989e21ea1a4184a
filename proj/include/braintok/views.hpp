#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "braintok/dataset.hpp"
#include "braintok/rng.hpp"
#include "braintok/spectral.hpp"

namespace braintok {

// A temporal crop of one scan.
struct View {
  MatXd data;  // C x T_crop
  std::string scan_id;
  Eigen::Index crop_start = 0;
  double dt = 0.0;
};

struct AugParams {
  double tau_c_max = 0.1;   // cap on zeroed-channel fraction
  double tau_t_max = 0.3;   // cap on zeroed-timepoint fraction
  double tau_sigma = 0.1;   // additive noise std
  double tau_s_min = 0.8;   // amplitude scale range
  double tau_s_max = 1.2;

  void validate() const {
    if (tau_c_max < 0.0 || tau_c_max > 1.0 || tau_t_max < 0.0 || tau_t_max > 1.0 ||
        tau_sigma < 0.0 || tau_sigma > 1.0)
      throw ConfigError("augment: tau_c_max/tau_t_max/tau_sigma must be in [0, 1]");
    if (!(tau_s_min > 0.0) || tau_s_max > 2.0 || tau_s_min > tau_s_max)
      throw ConfigError("augment: tau_s range must satisfy 0 < min <= max <= 2");
  }
};

inline View crop_view(const ScanTimeSeries& scan, Eigen::Index start, Eigen::Index t_crop) {
  View v;
  v.data = scan.data.middleCols(start, t_crop);
  v.scan_id = scan.scan_id;
  v.crop_start = start;
  v.dt = scan.dt;
  return v;
}

// Two independent uniform crop offsets in [0, T - T_crop]; views may overlap.
inline std::pair<View, View> sample_views(const ScanTimeSeries& scan, Eigen::Index t_crop,
                                          Rng& rng) {
  const Eigen::Index T = scan.data.cols();
  if (T < t_crop)
    throw ConfigError("sample_views: scan has " + std::to_string(T) +
                      " timepoints, need >= " + std::to_string(t_crop));
  const auto span = static_cast<std::uint64_t>(T - t_crop + 1);
  const auto s1 = static_cast<Eigen::Index>(rng.uniform_int(span));
  const auto s2 = static_cast<Eigen::Index>(rng.uniform_int(span));
  return {crop_view(scan, s1, t_crop), crop_view(scan, s2, t_crop)};
}

// The corruption draws, separated from their application so tests can replay
// or pin them. Draw order: tau_c, tau_t, tau_s, then channel choice, then
// block start (only if the block is non-empty).
struct CorruptDraws {
  double tau_c = 0.0;
  double tau_t = 0.0;
  double tau_s = 1.0;
  std::vector<std::size_t> channels;   // zeroed channels
  Eigen::Index block_start = 0;        // zeroed timepoint block
  Eigen::Index block_len = 0;
};

inline CorruptDraws draw_corruption(const AugParams& p, Eigen::Index C, Eigen::Index T,
                                    Rng& rng) {
  CorruptDraws d;
  d.tau_c = rng.uniform(0.0, p.tau_c_max);
  d.tau_t = rng.uniform(0.0, p.tau_t_max);
  d.tau_s = rng.uniform(p.tau_s_min, p.tau_s_max);
  const auto n_ch = static_cast<std::size_t>(std::floor(d.tau_c * static_cast<double>(C)));
  d.channels = rng.sample_without_replacement(static_cast<std::size_t>(C), n_ch);
  d.block_len = static_cast<Eigen::Index>(std::floor(d.tau_t * static_cast<double>(T)));
  if (d.block_len > 0)
    d.block_start = static_cast<Eigen::Index>(
        rng.uniform_int(static_cast<std::uint64_t>(T - d.block_len + 1)));
  return d;
}

// Applies zero -> noise -> scale. Noise is drawn row-major from rng.
inline View apply_corruption(const View& view, const CorruptDraws& d, double tau_sigma,
                             Rng& rng) {
  View out = view;
  for (std::size_t c : d.channels) out.data.row(static_cast<Eigen::Index>(c)).setZero();
  if (d.block_len > 0) out.data.middleCols(d.block_start, d.block_len).setZero();
  if (tau_sigma > 0.0) {
    for (Eigen::Index r = 0; r < out.data.rows(); ++r)
      for (Eigen::Index t = 0; t < out.data.cols(); ++t)
        out.data(r, t) += rng.normal(0.0, tau_sigma);
  }
  out.data *= d.tau_s;
  return out;
}

inline View corrupt(const View& view, const AugParams& p, Rng& rng) {
  p.validate();
  const CorruptDraws d = draw_corruption(p, view.data.rows(), view.data.cols(), rng);
  return apply_corruption(view, d, p.tau_sigma, rng);
}

// ---- physiologically-motivated augmentations ---------------------------------

enum class PhysioKind { kRoiMix, kFreqMask, kBandNoise };
enum class PhysioIntensity { kLight, kHeavy };

inline PhysioKind physio_kind_from_string(const std::string& s) {
  if (s == "roi_mix") return PhysioKind::kRoiMix;
  if (s == "freq_mask") return PhysioKind::kFreqMask;
  if (s == "band_noise") return PhysioKind::kBandNoise;
  throw ConfigError("unknown physio augmentation kind: " + s);
}

// Adjacency over ROIs, as neighbour lists. For synthetic data a ring within
// each network stands in for anatomical adjacency.
struct RoiAdjacency {
  std::vector<std::vector<int>> neighbors;
};

inline RoiAdjacency ring_adjacency(const AtlasMapping& atlas) {
  RoiAdjacency adj;
  adj.neighbors.resize(static_cast<std::size_t>(atlas.n_rois()));
  for (int n = 0; n < atlas.n_networks; ++n) {
    const std::vector<int> members = atlas.network_members(n);
    const int m = static_cast<int>(members.size());
    if (m < 2) continue;
    for (int i = 0; i < m; ++i) {
      const int r = members[static_cast<std::size_t>(i)];
      adj.neighbors[static_cast<std::size_t>(r)].push_back(
          members[static_cast<std::size_t>((i + 1) % m)]);
      if (m > 2)
        adj.neighbors[static_cast<std::size_t>(r)].push_back(
            members[static_cast<std::size_t>((i + m - 1) % m)]);
    }
  }
  return adj;
}

// roi_mix: for a fraction of ROIs, blend with a random neighbour,
//   signal <- alpha * self + (1 - alpha) * neighbour, alpha ~ U(0.7, 0.95).
// Blending always reads the original (pre-augmentation) signals.
// freq_mask: per ROI, bins in [0.01, 0.1] Hz are attenuated with probability
//   p ~ U(0.1, 0.3), each by a factor ~ U(s_min, 1).
// band_noise: adds 1-2 sinusoidal components per ROI inside [0.01, 0.1] Hz,
//   amplitude a_i ~ U(0.5, 1.5) * sigma, sigma ~ U(0, sigma_max).
inline View augment_physio(const View& view, PhysioKind kind, PhysioIntensity intensity,
                           const RoiAdjacency* adjacency, Rng& rng) {
  View out = view;
  const Eigen::Index C = view.data.rows();
  const Eigen::Index T = view.data.cols();
  switch (kind) {
    case PhysioKind::kRoiMix: {
      if (adjacency == nullptr)
        throw ConfigError("roi_mix requires an ROI adjacency structure");
      const double p_rois = intensity == PhysioIntensity::kLight ? 0.1 : 0.2;
      const auto k = static_cast<std::size_t>(
          std::floor(p_rois * static_cast<double>(C)));
      const auto chosen = rng.sample_without_replacement(static_cast<std::size_t>(C), k);
      for (std::size_t r : chosen) {
        const auto& nbrs = adjacency->neighbors[r];
        if (nbrs.empty()) continue;
        const int nb = nbrs[static_cast<std::size_t>(rng.uniform_int(nbrs.size()))];
        const double alpha = rng.uniform(0.7, 0.95);
        out.data.row(static_cast<Eigen::Index>(r)) =
            alpha * view.data.row(static_cast<Eigen::Index>(r)) +
            (1.0 - alpha) * view.data.row(nb);
      }
      break;
    }
    case PhysioKind::kFreqMask: {
      const double s_min = intensity == PhysioIntensity::kLight ? 0.8 : 0.6;
      std::vector<double> row(static_cast<std::size_t>(T));
      for (Eigen::Index r = 0; r < C; ++r) {
        const double p_mask = rng.uniform(0.1, 0.3);
        for (Eigen::Index t = 0; t < T; ++t) row[static_cast<std::size_t>(t)] = view.data(r, t);
        auto coeffs = rfft(row);
        for (std::size_t k = 0; k < coeffs.size(); ++k) {
          const double f = static_cast<double>(k) / (static_cast<double>(T) * view.dt);
          if (f < 0.01 || f > 0.1) continue;
          if (rng.uniform() < p_mask) coeffs[k] *= rng.uniform(s_min, 1.0);
        }
        const auto filtered = irfft(std::move(coeffs), static_cast<int>(T));
        for (Eigen::Index t = 0; t < T; ++t) out.data(r, t) = filtered[static_cast<std::size_t>(t)];
      }
      break;
    }
    case PhysioKind::kBandNoise: {
      const double sigma_max = intensity == PhysioIntensity::kLight ? 0.1 : 0.2;
      for (Eigen::Index r = 0; r < C; ++r) {
        const int n_comp = 1 + static_cast<int>(rng.uniform_int(2));
        const double sigma = rng.uniform(0.0, sigma_max);
        for (int i = 0; i < n_comp; ++i) {
          const double a = rng.uniform(0.5, 1.5) * sigma;
          const double f = rng.uniform(0.01, 0.1);
          const double phi = rng.uniform(0.0, 2.0 * M_PI);
          for (Eigen::Index t = 0; t < T; ++t)
            out.data(r, t) +=
                a * std::sin(2.0 * M_PI * f * static_cast<double>(t) * view.dt + phi);
        }
      }
      break;
    }
  }
  return out;
}

}  // namespace braintok
