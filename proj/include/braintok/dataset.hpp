#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "braintok/binio.hpp"
#include "braintok/errors.hpp"
#include "braintok/spectral.hpp"

namespace braintok {

using MatXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// One subject's ROI x time matrix plus sampling metadata. Rows are ROIs.
struct ScanTimeSeries {
  MatXd data;          // C x T
  double dt = 0.0;     // sampling interval, seconds
  std::string scan_id;
  std::map<std::string, int> labels;
  std::vector<int> degenerate_rois;  // zero-variance rows zeroed by z-scoring

  Eigen::Index n_rois() const { return data.rows(); }
  Eigen::Index n_timepoints() const { return data.cols(); }
};

// Assignment of each ROI to one of n_networks functional networks.
struct AtlasMapping {
  std::vector<int> roi_network;            // length C, values in [0, N)
  std::vector<std::string> network_names;  // length N
  int n_networks = 0;

  int n_rois() const { return static_cast<int>(roi_network.size()); }

  // ROI indices belonging to network n, in ROI order.
  std::vector<int> network_members(int n) const {
    std::vector<int> idx;
    for (int r = 0; r < n_rois(); ++r)
      if (roi_network[static_cast<std::size_t>(r)] == n) idx.push_back(r);
    return idx;
  }

  void validate() const {
    if (n_networks <= 0) throw ConfigError("atlas: n_networks must be positive");
    if (static_cast<int>(network_names.size()) != n_networks)
      throw ConfigError("atlas: network_names length must equal n_networks");
    std::vector<int> counts(static_cast<std::size_t>(n_networks), 0);
    for (int id : roi_network) {
      if (id < 0 || id >= n_networks)
        throw ConfigError("atlas: network id " + std::to_string(id) +
                          " out of range [0, " + std::to_string(n_networks) + ")");
      ++counts[static_cast<std::size_t>(id)];
    }
    for (int n = 0; n < n_networks; ++n)
      if (counts[static_cast<std::size_t>(n)] == 0)
        throw ConfigError("atlas: network " + std::to_string(n) + " has no ROIs");
  }
};

struct ManifestEntry {
  std::string scan_id;
  std::string path;
  std::map<std::string, int> labels;
};

struct DatasetManifest {
  std::vector<ManifestEntry> scans;
  double dt = 0.0;
  int n_rois = 0;
  std::string atlas_path;
};

// ---- scan file format -------------------------------------------------------
// Little-endian: magic "BSTK", u32 version=1, u32 C, u32 T, f64 dt, then
// C*T float32 values, row-major (ROI-major).

inline constexpr std::uint32_t kScanMagic = 0x4b545342;  // "BSTK"
inline constexpr std::uint32_t kScanVersion = 1;

inline void write_scan(const ScanTimeSeries& scan, const std::string& path) {
  BinWriter w(path);
  w.put<std::uint32_t>(kScanMagic);
  w.put<std::uint32_t>(kScanVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scan.data.rows()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scan.data.cols()));
  w.put<double>(scan.dt);
  for (Eigen::Index r = 0; r < scan.data.rows(); ++r)
    for (Eigen::Index c = 0; c < scan.data.cols(); ++c)
      w.put<float>(static_cast<float>(scan.data(r, c)));
  w.close();
}

inline ScanTimeSeries load_scan(const std::string& path) {
  BinReader r(path);
  if (r.get<std::uint32_t>() != kScanMagic)
    throw IoError("malformed header (bad magic): " + path);
  const auto version = r.get<std::uint32_t>();
  if (version != kScanVersion)
    throw IoError("malformed header (unsupported version " + std::to_string(version) +
                  "): " + path);
  const auto C = r.get<std::uint32_t>();
  const auto T = r.get<std::uint32_t>();
  ScanTimeSeries scan;
  scan.dt = r.get<double>();
  if (C == 0 || T == 0) throw IoError("malformed header (empty matrix): " + path);
  if (!(scan.dt > 0.0)) throw IoError("malformed header (non-positive dt): " + path);
  scan.data.resize(C, T);
  for (std::uint32_t i = 0; i < C; ++i)
    for (std::uint32_t j = 0; j < T; ++j) {
      const float v = r.get<float>();
      if (!std::isfinite(v))
        throw IoError("non-finite entry at roi " + std::to_string(i) + ", t " +
                      std::to_string(j) + ": " + path);
      scan.data(i, j) = static_cast<double>(v);
    }
  return scan;
}

// ---- preprocessing ----------------------------------------------------------

// Per-ROI z-scoring with population std. Zero-variance rows become all-zero
// and are listed in degenerate_rois instead of propagating NaNs.
inline ScanTimeSeries zscore_per_roi(const ScanTimeSeries& scan) {
  if (scan.data.cols() < 2)
    throw ConfigError("zscore: need at least 2 timepoints");
  ScanTimeSeries out = scan;
  const double T = static_cast<double>(scan.data.cols());
  for (Eigen::Index r = 0; r < scan.data.rows(); ++r) {
    const double mean = scan.data.row(r).mean();
    const double var = (scan.data.row(r).array() - mean).square().sum() / T;
    const double sd = std::sqrt(var);
    if (sd < 1e-12 * (1.0 + std::abs(mean))) {
      out.data.row(r).setZero();
      out.degenerate_rois.push_back(static_cast<int>(r));
    } else {
      out.data.row(r) = (scan.data.row(r).array() - mean) / sd;
    }
  }
  return out;
}

// Linear-interpolation downsampling to target_dt. Output length is
// floor((T-1) * dt / target_dt) + 1; sample k sits at time k * target_dt.
// Positions are computed in index space (k * target_dt / dt), which makes
// target_dt == dt an exact identity.
inline ScanTimeSeries resample(const ScanTimeSeries& scan, double target_dt) {
  if (!(target_dt > 0.0)) throw ConfigError("resample: target_dt must be positive");
  if (target_dt < scan.dt)
    throw ConfigError("resample: target_dt < dt (only downsampling supported)");
  const Eigen::Index T = scan.data.cols();
  const double step = target_dt / scan.dt;  // in samples
  const Eigen::Index T_out =
      static_cast<Eigen::Index>(std::floor(static_cast<double>(T - 1) / step)) + 1;
  ScanTimeSeries out = scan;
  out.dt = target_dt;
  out.data.resize(scan.data.rows(), T_out);
  for (Eigen::Index k = 0; k < T_out; ++k) {
    const double pos = static_cast<double>(k) * step;
    Eigen::Index i = static_cast<Eigen::Index>(std::floor(pos));
    if (i >= T - 1) i = T - 2 >= 0 ? T - 2 : 0;
    const double frac = pos - static_cast<double>(i);
    if (frac == 0.0 || T == 1) {
      out.data.col(k) = scan.data.col(std::min(i, T - 1));
    } else {
      out.data.col(k) = (1.0 - frac) * scan.data.col(i) + frac * scan.data.col(i + 1);
    }
  }
  return out;
}

// Ideal (brick-wall) FFT bandpass per ROI; bins with |f| outside [lo, hi]
// are zeroed.
inline ScanTimeSeries bandpass(const ScanTimeSeries& scan, double lo, double hi) {
  const double nyquist = 1.0 / (2.0 * scan.dt);
  if (lo < 0.0 || !(lo < hi)) throw ConfigError("bandpass: need 0 <= lo < hi");
  if (hi >= nyquist)
    throw ConfigError("bandpass: hi must be below the Nyquist frequency " +
                      std::to_string(nyquist));
  ScanTimeSeries out = scan;
  const Eigen::Index T = scan.data.cols();
  std::vector<double> row(static_cast<std::size_t>(T));
  for (Eigen::Index r = 0; r < scan.data.rows(); ++r) {
    for (Eigen::Index t = 0; t < T; ++t) row[static_cast<std::size_t>(t)] = scan.data(r, t);
    const std::vector<double> filtered = brickwall_bandpass(row, scan.dt, lo, hi);
    for (Eigen::Index t = 0; t < T; ++t) out.data(r, t) = filtered[static_cast<std::size_t>(t)];
  }
  return out;
}

// ---- atlas / manifest JSON ---------------------------------------------------

inline AtlasMapping load_atlas(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open atlas: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("atlas parse error in " + path + ": " + e.what());
  }
  AtlasMapping atlas;
  atlas.n_networks = j.at("n_networks").get<int>();
  atlas.network_names = j.at("network_names").get<std::vector<std::string>>();
  atlas.roi_network = j.at("roi_network").get<std::vector<int>>();
  atlas.validate();
  return atlas;
}

inline void write_atlas(const AtlasMapping& atlas, const std::string& path) {
  atlas.validate();
  nlohmann::json j;
  j["n_networks"] = atlas.n_networks;
  j["network_names"] = atlas.network_names;
  j["roi_network"] = atlas.roi_network;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write atlas: " + path);
  out << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest parse error in " + path + ": " + e.what());
  }
  DatasetManifest m;
  m.dt = j.at("dt").get<double>();
  m.n_rois = j.at("n_rois").get<int>();
  m.atlas_path = j.at("atlas").get<std::string>();
  for (const auto& e : j.at("scans")) {
    ManifestEntry entry;
    entry.scan_id = e.at("scan_id").get<std::string>();
    entry.path = e.at("path").get<std::string>();
    if (e.contains("labels"))
      entry.labels = e.at("labels").get<std::map<std::string, int>>();
    m.scans.push_back(std::move(entry));
  }
  return m;
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::json j;
  j["dt"] = m.dt;
  j["n_rois"] = m.n_rois;
  j["atlas"] = m.atlas_path;
  j["scans"] = nlohmann::json::array();
  for (const auto& e : m.scans) {
    nlohmann::json s;
    s["scan_id"] = e.scan_id;
    s["path"] = e.path;
    s["labels"] = e.labels;
    j["scans"].push_back(std::move(s));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

// Evenly distributes 400 cortical ROIs over seven networks, then appends a
// 50-ROI subcortical and a 7-ROI cerebellar network (457 total, 9 networks).
inline AtlasMapping default_atlas() {
  AtlasMapping atlas;
  atlas.n_networks = 9;
  atlas.network_names = {"Visual",  "Somatomotor", "DorsalAttention",
                         "VentralAttention", "Limbic", "Control",
                         "DefaultMode", "Subcortical", "Cerebellum"};
  const int cortical_counts[7] = {58, 57, 57, 57, 57, 57, 57};
  for (int n = 0; n < 7; ++n)
    for (int i = 0; i < cortical_counts[n]; ++i) atlas.roi_network.push_back(n);
  for (int i = 0; i < 50; ++i) atlas.roi_network.push_back(7);
  for (int i = 0; i < 7; ++i) atlas.roi_network.push_back(8);
  atlas.validate();
  return atlas;
}

// Synthetic atlas for arbitrary sizes: C ROIs spread over N networks as
// evenly as possible (first networks get the remainder).
inline AtlasMapping even_atlas(int n_rois, int n_networks) {
  if (n_networks < 1 || n_rois < n_networks)
    throw ConfigError("even_atlas: need n_rois >= n_networks >= 1");
  AtlasMapping atlas;
  atlas.n_networks = n_networks;
  for (int n = 0; n < n_networks; ++n)
    atlas.network_names.push_back("Net" + std::to_string(n));
  const int base = n_rois / n_networks;
  const int extra = n_rois % n_networks;
  for (int n = 0; n < n_networks; ++n) {
    const int count = base + (n < extra ? 1 : 0);
    for (int i = 0; i < count; ++i) atlas.roi_network.push_back(n);
  }
  atlas.validate();
  return atlas;
}

}  // namespace braintok
