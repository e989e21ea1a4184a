#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "braintok/config.hpp"
#include "braintok/features.hpp"

namespace braintok {

// Per-scan probe inputs: label and one feature vector per temporal crop.
struct ProbeScan {
  std::string scan_id;
  int label = 0;
  std::vector<std::vector<float>> crops;
};

struct ProbeData {
  std::vector<ProbeScan> scans;
  int n_classes = 0;
  int dim = 0;
};

struct SplitIndices {
  std::vector<int> train, val, test;
};

struct ProbeResult {
  std::vector<double> val_accuracy_per_lr;
  double selected_lr = 0.0;
  int selected_lr_index = -1;
  double test_balanced_accuracy = 0.0;
  std::vector<int> test_predictions;        // in splits.test order
  std::vector<std::vector<int>> confusion;  // [true][predicted]
  int n_classes = 0;
};

inline ProbeData make_probe_data(
    const std::vector<ScanTimeSeries>& scans,
    const std::vector<std::vector<FeatureVector>>& features_per_scan,
    const std::string& label_name) {
  if (scans.size() != features_per_scan.size())
    throw ConfigError("make_probe_data: feature/scan count mismatch");
  ProbeData data;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    auto it = scans[i].labels.find(label_name);
    if (it == scans[i].labels.end())
      throw ConfigError("label '" + label_name + "' absent for scan " + scans[i].scan_id);
    ProbeScan ps;
    ps.scan_id = scans[i].scan_id;
    ps.label = it->second;
    for (const auto& f : features_per_scan[i]) ps.crops.push_back(f.values);
    if (ps.crops.empty()) throw ConfigError("make_probe_data: scan with no features");
    data.n_classes = std::max(data.n_classes, ps.label + 1);
    data.scans.push_back(std::move(ps));
  }
  data.dim = static_cast<int>(data.scans.front().crops.front().size());
  for (const auto& s : data.scans)
    for (const auto& c : s.crops)
      if (static_cast<int>(c.size()) != data.dim)
        throw ConfigError("make_probe_data: inconsistent feature width");
  if (data.n_classes < 2) throw ConfigError("probe: need at least 2 classes");
  return data;
}

// Stratified split over scans (splits are disjoint by scan_id, since a scan
// is assigned to exactly one bucket). Per class: round(frac * n) validation
// and test scans, the remainder train.
inline SplitIndices stratified_split(const std::vector<int>& labels, double train_frac,
                                     double val_frac, double test_frac,
                                     std::uint64_t split_seed) {
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
  const int n_classes =
      labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  SplitIndices out;
  Rng rng = Rng::stream(Rng::mix64(split_seed ^ 0x53504c49ull), 0);  // "SPLI"
  for (int c = 0; c < n_classes; ++c) {
    std::vector<int> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) members.push_back(static_cast<int>(i));
    if (members.empty()) throw ConfigError("split: class " + std::to_string(c) + " empty");
    rng.shuffle(members);
    const int n = static_cast<int>(members.size());
    const int n_val = static_cast<int>(std::lround(val_frac * n));
    const int n_test = static_cast<int>(std::lround(test_frac * n));
    const int n_train = n - n_val - n_test;
    if (n_train < 1 || n_val < 1 || n_test < 1)
      throw ConfigError("split: class " + std::to_string(c) +
                        " would be absent from a split");
    int k = 0;
    for (int i = 0; i < n_train; ++i) out.train.push_back(members[static_cast<std::size_t>(k++)]);
    for (int i = 0; i < n_val; ++i) out.val.push_back(members[static_cast<std::size_t>(k++)]);
    for (int i = 0; i < n_test; ++i) out.test.push_back(members[static_cast<std::size_t>(k++)]);
  }
  return out;
}

inline double balanced_accuracy(const std::vector<int>& y_true,
                                const std::vector<int>& y_pred, int n_classes) {
  std::vector<int> correct(static_cast<std::size_t>(n_classes), 0);
  std::vector<int> total(static_cast<std::size_t>(n_classes), 0);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    ++total[static_cast<std::size_t>(y_true[i])];
    if (y_true[i] == y_pred[i]) ++correct[static_cast<std::size_t>(y_true[i])];
  }
  double acc = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    if (total[static_cast<std::size_t>(c)] == 0)
      throw ConfigError("balanced_accuracy: class " + std::to_string(c) + " absent");
    acc += static_cast<double>(correct[static_cast<std::size_t>(c)]) /
           static_cast<double>(total[static_cast<std::size_t>(c)]);
  }
  return acc / static_cast<double>(n_classes);
}

namespace detail {

// One BN(affine) + linear head. Batch statistics are shared across the LR
// sweep (identical input streams); affine and linear parameters are per head.
struct ProbeHead {
  std::vector<double> gamma, beta;  // F
  std::vector<double> w;            // K x F row-major
  std::vector<double> b;            // K
  std::vector<double> m_gamma, m_beta, m_w, m_b;  // SGD momentum buffers

  ProbeHead(int n_classes, int dim)
      : gamma(static_cast<std::size_t>(dim), 1.0),
        beta(static_cast<std::size_t>(dim), 0.0),
        w(static_cast<std::size_t>(n_classes) * static_cast<std::size_t>(dim), 0.0),
        b(static_cast<std::size_t>(n_classes), 0.0),
        m_gamma(gamma.size(), 0.0),
        m_beta(beta.size(), 0.0),
        m_w(w.size(), 0.0),
        m_b(b.size(), 0.0) {}
};

inline void head_logits(const ProbeHead& head, const std::vector<double>& xhat,
                        int n_classes, int dim, std::vector<double>& logits) {
  logits.assign(static_cast<std::size_t>(n_classes), 0.0);
  for (int k = 0; k < n_classes; ++k) {
    double acc = head.b[static_cast<std::size_t>(k)];
    const double* wk = &head.w[static_cast<std::size_t>(k) * static_cast<std::size_t>(dim)];
    for (int f = 0; f < dim; ++f)
      acc += wk[f] * (head.gamma[static_cast<std::size_t>(f)] * xhat[static_cast<std::size_t>(f)] +
                      head.beta[static_cast<std::size_t>(f)]);
    logits[static_cast<std::size_t>(k)] = acc;
  }
}

}  // namespace detail

// Standardized linear probing: BN + linear head, SGD with momentum, a fixed
// learning-rate sweep trained in parallel on identical batch streams, best
// head selected on validation balanced accuracy, and test predictions from
// logits averaged over each scan's crops.
inline ProbeResult linear_probe(const ProbeData& data, const SplitIndices& splits,
                                const EvalConfig& cfg, std::uint64_t seed) {
  const int K = data.n_classes;
  const int F = data.dim;
  constexpr double kBnEps = 1e-5;
  constexpr double kBnMomentum = 0.1;

  for (const auto* split : {&splits.train, &splits.val, &splits.test}) {
    std::vector<bool> present(static_cast<std::size_t>(K), false);
    for (int idx : *split)
      present[static_cast<std::size_t>(data.scans[static_cast<std::size_t>(idx)].label)] = true;
    for (int c = 0; c < K; ++c)
      if (!present[static_cast<std::size_t>(c)])
        throw ConfigError("probe: class " + std::to_string(c) + " absent from a split");
  }

  // Training rows: one per (train scan, crop).
  std::vector<const std::vector<float>*> rows;
  std::vector<int> row_labels;
  for (int idx : splits.train) {
    const auto& s = data.scans[static_cast<std::size_t>(idx)];
    for (const auto& c : s.crops) {
      rows.push_back(&c);
      row_labels.push_back(s.label);
    }
  }
  const int n_rows = static_cast<int>(rows.size());
  const int batch = std::max(1, std::min(256, n_rows / 8));

  std::vector<detail::ProbeHead> heads;
  for (std::size_t i = 0; i < cfg.probe_lr_sweep.size(); ++i) heads.emplace_back(K, F);
  std::vector<double> run_mean(static_cast<std::size_t>(F), 0.0);
  std::vector<double> run_var(static_cast<std::size_t>(F), 1.0);

  std::vector<double> mean(static_cast<std::size_t>(F)), var(static_cast<std::size_t>(F));
  std::vector<std::vector<double>> xhat;
  std::vector<double> logits, probs;
  for (int epoch = 0; epoch < cfg.probe_epochs; ++epoch) {
    Rng rng = Rng::stream(Rng::mix64(seed ^ 0x50524f42ull), static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order = rng.permutation(static_cast<std::size_t>(n_rows));
    for (int start = 0; start < n_rows; start += batch) {
      const int m = std::min(batch, n_rows - start);
      // Shared batch statistics (population variance).
      std::fill(mean.begin(), mean.end(), 0.0);
      std::fill(var.begin(), var.end(), 0.0);
      for (int i = 0; i < m; ++i) {
        const auto& x = *rows[order[static_cast<std::size_t>(start + i)]];
        for (int f = 0; f < F; ++f) mean[static_cast<std::size_t>(f)] += x[static_cast<std::size_t>(f)];
      }
      for (int f = 0; f < F; ++f) mean[static_cast<std::size_t>(f)] /= m;
      for (int i = 0; i < m; ++i) {
        const auto& x = *rows[order[static_cast<std::size_t>(start + i)]];
        for (int f = 0; f < F; ++f) {
          const double d = x[static_cast<std::size_t>(f)] - mean[static_cast<std::size_t>(f)];
          var[static_cast<std::size_t>(f)] += d * d;
        }
      }
      for (int f = 0; f < F; ++f) var[static_cast<std::size_t>(f)] /= m;
      for (int f = 0; f < F; ++f) {
        run_mean[static_cast<std::size_t>(f)] =
            (1.0 - kBnMomentum) * run_mean[static_cast<std::size_t>(f)] +
            kBnMomentum * mean[static_cast<std::size_t>(f)];
        run_var[static_cast<std::size_t>(f)] =
            (1.0 - kBnMomentum) * run_var[static_cast<std::size_t>(f)] +
            kBnMomentum * var[static_cast<std::size_t>(f)];
      }
      xhat.assign(static_cast<std::size_t>(m), std::vector<double>(static_cast<std::size_t>(F)));
      for (int i = 0; i < m; ++i) {
        const auto& x = *rows[order[static_cast<std::size_t>(start + i)]];
        for (int f = 0; f < F; ++f)
          xhat[static_cast<std::size_t>(i)][static_cast<std::size_t>(f)] =
              (x[static_cast<std::size_t>(f)] - mean[static_cast<std::size_t>(f)]) /
              std::sqrt(var[static_cast<std::size_t>(f)] + kBnEps);
      }

      for (std::size_t h = 0; h < heads.size(); ++h) {
        auto& head = heads[h];
        const double lr = cfg.probe_lr_sweep[h];
        std::vector<double> g_w(head.w.size(), 0.0), g_b(head.b.size(), 0.0);
        std::vector<double> g_gamma(head.gamma.size(), 0.0), g_beta(head.beta.size(), 0.0);
        for (int i = 0; i < m; ++i) {
          const int y = row_labels[order[static_cast<std::size_t>(start + i)]];
          detail::head_logits(head, xhat[static_cast<std::size_t>(i)], K, F, logits);
          double mx = logits[0];
          for (double v : logits) mx = std::max(mx, v);
          probs.assign(static_cast<std::size_t>(K), 0.0);
          double z = 0.0;
          for (int k = 0; k < K; ++k) {
            probs[static_cast<std::size_t>(k)] = std::exp(logits[static_cast<std::size_t>(k)] - mx);
            z += probs[static_cast<std::size_t>(k)];
          }
          for (int k = 0; k < K; ++k) probs[static_cast<std::size_t>(k)] /= z;
          probs[static_cast<std::size_t>(y)] -= 1.0;  // dCE/dlogits
          for (int k = 0; k < K; ++k) {
            const double d = probs[static_cast<std::size_t>(k)] / m;
            g_b[static_cast<std::size_t>(k)] += d;
            double* gw = &g_w[static_cast<std::size_t>(k) * static_cast<std::size_t>(F)];
            const double* wk = &head.w[static_cast<std::size_t>(k) * static_cast<std::size_t>(F)];
            for (int f = 0; f < F; ++f) {
              const double xh = xhat[static_cast<std::size_t>(i)][static_cast<std::size_t>(f)];
              const double a = head.gamma[static_cast<std::size_t>(f)] * xh +
                               head.beta[static_cast<std::size_t>(f)];
              gw[f] += d * a;
              g_gamma[static_cast<std::size_t>(f)] += d * wk[f] * xh;
              g_beta[static_cast<std::size_t>(f)] += d * wk[f];
            }
          }
        }
        const auto sgd = [&](std::vector<double>& p, std::vector<double>& mom,
                             const std::vector<double>& g) {
          for (std::size_t i = 0; i < p.size(); ++i) {
            mom[i] = cfg.probe_momentum * mom[i] + g[i];
            p[i] -= lr * mom[i];
          }
        };
        sgd(head.w, head.m_w, g_w);
        sgd(head.b, head.m_b, g_b);
        sgd(head.gamma, head.m_gamma, g_gamma);
        sgd(head.beta, head.m_beta, g_beta);
      }
    }
  }

  // Evaluation with running statistics and per-scan logit averaging.
  const auto eval_split = [&](const std::vector<int>& split, std::size_t h,
                              std::vector<int>* preds_out) {
    std::vector<int> y_true, y_pred;
    std::vector<double> avg(static_cast<std::size_t>(K));
    std::vector<double> xh(static_cast<std::size_t>(F));
    for (int idx : split) {
      const auto& s = data.scans[static_cast<std::size_t>(idx)];
      std::fill(avg.begin(), avg.end(), 0.0);
      for (const auto& crop : s.crops) {
        for (int f = 0; f < F; ++f)
          xh[static_cast<std::size_t>(f)] =
              (crop[static_cast<std::size_t>(f)] - run_mean[static_cast<std::size_t>(f)]) /
              std::sqrt(run_var[static_cast<std::size_t>(f)] + kBnEps);
        detail::head_logits(heads[h], xh, K, F, logits);
        for (int k = 0; k < K; ++k) avg[static_cast<std::size_t>(k)] += logits[static_cast<std::size_t>(k)];
      }
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (avg[static_cast<std::size_t>(k)] > avg[static_cast<std::size_t>(best)]) best = k;
      y_true.push_back(s.label);
      y_pred.push_back(best);
    }
    if (preds_out != nullptr) *preds_out = y_pred;
    return balanced_accuracy(y_true, y_pred, K);
  };

  ProbeResult result;
  result.n_classes = K;
  for (std::size_t h = 0; h < heads.size(); ++h)
    result.val_accuracy_per_lr.push_back(eval_split(splits.val, h, nullptr));
  result.selected_lr_index = 0;
  for (std::size_t h = 1; h < heads.size(); ++h)
    if (result.val_accuracy_per_lr[h] >
        result.val_accuracy_per_lr[static_cast<std::size_t>(result.selected_lr_index)])
      result.selected_lr_index = static_cast<int>(h);
  result.selected_lr = cfg.probe_lr_sweep[static_cast<std::size_t>(result.selected_lr_index)];

  result.test_balanced_accuracy =
      eval_split(splits.test, static_cast<std::size_t>(result.selected_lr_index),
                 &result.test_predictions);
  result.confusion.assign(static_cast<std::size_t>(K),
                          std::vector<int>(static_cast<std::size_t>(K), 0));
  for (std::size_t i = 0; i < result.test_predictions.size(); ++i) {
    const int truth = data.scans[static_cast<std::size_t>(splits.test[i])].label;
    ++result.confusion[static_cast<std::size_t>(truth)]
                      [static_cast<std::size_t>(result.test_predictions[i])];
  }
  return result;
}

// Per-network probing: for each network, features are extracted with every
// other network mask-substituted, and the standard probe is retrained.
template <typename S>
std::vector<double> network_importance(const std::vector<ScanTimeSeries>& scans,
                                       ParamSet<S>& teacher, const Architecture<S>& arch,
                                       const EvalConfig& cfg,
                                       const std::string& label_name,
                                       std::uint64_t split_seed) {
  std::vector<int> labels;
  for (const auto& s : scans) {
    auto it = s.labels.find(label_name);
    if (it == s.labels.end())
      throw ConfigError("label '" + label_name + "' absent for scan " + s.scan_id);
    labels.push_back(it->second);
  }
  const SplitIndices splits = stratified_split(labels, cfg.split_train, cfg.split_val,
                                               cfg.split_test, split_seed);
  std::vector<double> scores;
  for (int n = 0; n < arch.atlas.n_networks; ++n) {
    const std::vector<int> keep = {n};
    std::vector<std::vector<FeatureVector>> feats;
    for (const auto& s : scans)
      feats.push_back(extract_features(s, teacher, arch, cfg.n_crops, &keep));
    const ProbeData data = make_probe_data(scans, feats, label_name);
    scores.push_back(linear_probe(data, splits, cfg, split_seed).test_balanced_accuracy);
  }
  return scores;
}

}  // namespace braintok
