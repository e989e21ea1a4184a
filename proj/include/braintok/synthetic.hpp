#pragma once

#include <cmath>
#include <complex>
#include <filesystem>
#include <string>
#include <vector>

#include "braintok/dataset.hpp"
#include "braintok/rng.hpp"
#include "braintok/spectral.hpp"

namespace braintok {

// Synthetic fMRI generator. Each scan mixes one band-limited latent source
// per network into that network's ROIs plus white ROI noise. The class label
// is planted in the coupling of the designated networks:
//   - "between": the designated networks' latents are correlated; the mean
//     coupling weight shifts by effect_size per class step, centered so the
//     classes span anticorrelation, independence, and correlation;
//   - "within": the designated networks' latent gain increases with class,
//     raising within-network coherence.
// Class signal therefore lives in (co)variance structure and survives per-ROI
// z-scoring; amplitude statistics alone carry no label information.
struct SynthConfig {
  int n_scans = 300;
  int n_rois = 457;
  int n_networks = 9;
  int n_timepoints = 180;
  double dt = 2.0;
  int n_classes = 3;
  double effect_size = 2.0;
  std::vector<int> designated = {2, 5};
  std::string coupling_mode = "between";  // "between" | "within"
  double roi_coupling_jitter = 0.1;       // per-ROI mixing weight ~ U(1-j, 1+j)
  double noise_std = 1.0;

  void validate() const {
    if (n_scans < 1) throw ConfigError("synth: n_scans must be >= 1");
    if (n_classes < 2) throw ConfigError("synth: n_classes must be >= 2");
    if (effect_size < 0.0) throw ConfigError("synth: effect_size must be >= 0");
    if (n_timepoints < 4) throw ConfigError("synth: n_timepoints too small");
    if (!(dt > 0.0)) throw ConfigError("synth: dt must be positive");
    if (designated.empty()) throw ConfigError("synth: designated networks empty");
    for (int d : designated)
      if (d < 0 || d >= n_networks)
        throw ConfigError("synth: designated network out of range");
    if (coupling_mode != "between" && coupling_mode != "within")
      throw ConfigError("synth: coupling_mode must be 'between' or 'within'");
    if (coupling_mode == "between" && designated.size() < 2)
      throw ConfigError("synth: 'between' coupling needs >= 2 designated networks");
  }
};

namespace detail {

// Unit-variance latent, band-limited to [0.01, 0.1] Hz, built directly in the
// frequency domain (complex-normal coefficients on in-band bins).
inline std::vector<double> bandlimited_latent(int T, double dt, Rng& rng) {
  const double lo = 0.01, hi = 0.1;
  std::vector<std::complex<double>> coeffs(static_cast<std::size_t>(T / 2 + 1),
                                           std::complex<double>(0.0, 0.0));
  int in_band = 0;
  for (std::size_t k = 1; k + 1 < coeffs.size(); ++k) {
    const double f = static_cast<double>(k) / (static_cast<double>(T) * dt);
    if (f >= lo && f <= hi) {
      coeffs[k] = std::complex<double>(rng.normal(), rng.normal());
      ++in_band;
    }
  }
  if (in_band == 0)
    throw ConfigError("synth: no frequency bins inside [0.01, 0.1] Hz; "
                      "increase n_timepoints or dt");
  std::vector<double> x = irfft(std::move(coeffs), T);
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(T);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(T);
  const double isd = 1.0 / std::sqrt(var);
  for (double& v : x) v = (v - mean) * isd;
  return x;
}

}  // namespace detail

inline AtlasMapping synth_atlas(const SynthConfig& cfg) {
  if (cfg.n_rois == 457 && cfg.n_networks == 9) return default_atlas();
  return even_atlas(cfg.n_rois, cfg.n_networks);
}

// Deterministic given (cfg, seed, scan_index). Label assignment is
// round-robin so classes stay balanced.
inline ScanTimeSeries generate_scan(const SynthConfig& cfg, const AtlasMapping& atlas,
                                    std::uint64_t seed, int scan_index) {
  Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(scan_index));
  const int y = scan_index % cfg.n_classes;
  const int T = cfg.n_timepoints;
  const double class_frac =
      static_cast<double>(y) / static_cast<double>(cfg.n_classes - 1);

  // Per-network latents, drawn in network order.
  std::vector<std::vector<double>> latents;
  latents.reserve(static_cast<std::size_t>(cfg.n_networks));
  for (int n = 0; n < cfg.n_networks; ++n)
    latents.push_back(detail::bandlimited_latent(T, cfg.dt, rng));

  std::vector<double> gain(static_cast<std::size_t>(cfg.n_networks), 1.0);
  if (cfg.coupling_mode == "between") {
    // Mix the anchor latent into the other designated networks; the blend
    // keeps unit variance and yields correlation w / sqrt(1 + w^2). The
    // class-to-weight map is centered, so adjacent classes differ by
    // effect_size in w and the extremes are anticorrelated vs correlated.
    const double w = cfg.effect_size *
                     (static_cast<double>(y) - static_cast<double>(cfg.n_classes - 1) / 2.0);
    const auto& anchor = latents[static_cast<std::size_t>(cfg.designated[0])];
    const double inv = 1.0 / std::sqrt(1.0 + w * w);
    for (std::size_t d = 1; d < cfg.designated.size(); ++d) {
      auto& lat = latents[static_cast<std::size_t>(cfg.designated[d])];
      for (int t = 0; t < T; ++t)
        lat[static_cast<std::size_t>(t)] =
            (w * anchor[static_cast<std::size_t>(t)] + lat[static_cast<std::size_t>(t)]) * inv;
    }
  } else {
    for (int d : cfg.designated)
      gain[static_cast<std::size_t>(d)] = 1.0 + cfg.effect_size * class_frac;
  }

  ScanTimeSeries scan;
  scan.dt = cfg.dt;
  scan.labels["class"] = y;
  scan.data.resize(cfg.n_rois, T);
  const double j = cfg.roi_coupling_jitter;
  for (int r = 0; r < cfg.n_rois; ++r) {
    const int n = atlas.roi_network[static_cast<std::size_t>(r)];
    const double c = rng.uniform(1.0 - j, 1.0 + j) * gain[static_cast<std::size_t>(n)];
    const auto& lat = latents[static_cast<std::size_t>(n)];
    for (int t = 0; t < T; ++t)
      scan.data(r, t) = c * lat[static_cast<std::size_t>(t)] + cfg.noise_std * rng.normal();
  }
  return scan;
}

// Writes scans, atlas, and manifest under out_dir and returns the manifest.
inline DatasetManifest generate_synthetic(const SynthConfig& cfg, std::uint64_t seed,
                                          const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const AtlasMapping atlas = synth_atlas(cfg);
  const std::string atlas_path = (fs::path(out_dir) / "atlas.json").string();
  write_atlas(atlas, atlas_path);

  DatasetManifest manifest;
  manifest.dt = cfg.dt;
  manifest.n_rois = cfg.n_rois;
  manifest.atlas_path = atlas_path;
  for (int i = 0; i < cfg.n_scans; ++i) {
    ScanTimeSeries scan = generate_scan(cfg, atlas, seed, i);
    char name[32];
    std::snprintf(name, sizeof(name), "scan_%05d", i);
    scan.scan_id = name;
    const std::string path = (fs::path(out_dir) / (scan.scan_id + ".bstk")).string();
    write_scan(scan, path);
    manifest.scans.push_back({scan.scan_id, path, scan.labels});
  }
  const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
  write_manifest(manifest, manifest_path);
  return manifest;
}

}  // namespace braintok
