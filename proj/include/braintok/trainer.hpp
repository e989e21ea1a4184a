#pragma once

#include <cstdio>
#include <thread>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "braintok/checkpoint.hpp"
#include "braintok/config.hpp"
#include "braintok/encoder.hpp"
#include "braintok/objective.hpp"
#include "braintok/schedules.hpp"
#include "braintok/tokenizer.hpp"

namespace braintok {

// All randomness in training derives from (seed, purpose, index); nothing is
// carried across steps, which is what makes resume bitwise-equivalent.
enum class StreamPurpose : std::uint64_t { kModelInit = 1, kShuffle = 2, kSample = 3 };

inline Rng make_stream(std::uint64_t seed, StreamPurpose purpose, std::uint64_t index) {
  return Rng::stream(
      Rng::mix64(seed ^ (static_cast<std::uint64_t>(purpose) * 0x9e3779b97f4a7c15ull)),
      index);
}

// theta_t <- alpha * theta_t + (1 - alpha) * theta_s, every parameter
// including tokenizer and projection head.
template <typename S>
void ema_update(ParamSet<S>& teacher, const ParamSet<S>& student, double alpha) {
  if (teacher.size() != student.size())
    throw ConfigError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto& t = teacher[i];
    const auto& s = student[i];
    if (t.value.rows() != s.value.rows() || t.value.cols() != s.value.cols())
      throw ConfigError("ema_update: shape mismatch for " + t.name);
    t.value = static_cast<S>(alpha) * t.value + static_cast<S>(1.0 - alpha) * s.value;
  }
}

// Adam with decoupled weight decay; decay applies only to tensors flagged as
// weights. t is the 1-based update count for bias correction.
template <typename S>
void adamw_update(ParamSet<S>& ps, double lr, double wd, const TrainerConfig& cfg,
                  std::uint64_t t) {
  if (cfg.grad_clip > 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i)
      sq += static_cast<double>(ps[i].grad.squaredNorm());
    const double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) {
      const S f = static_cast<S>(cfg.grad_clip / norm);
      for (std::size_t i = 0; i < ps.size(); ++i) ps[i].grad *= f;
    }
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    p.adam_m = static_cast<S>(cfg.beta1) * p.adam_m +
               static_cast<S>(1.0 - cfg.beta1) * p.grad;
    p.adam_v = static_cast<S>(cfg.beta2) * p.adam_v +
               static_cast<S>(1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
    if (p.decay && wd != 0.0) p.value *= static_cast<S>(1.0 - lr * wd);
    p.value.array() -= static_cast<S>(lr) * (p.adam_m.array() / static_cast<S>(bc1)) /
                       ((p.adam_v.array() / static_cast<S>(bc2)).sqrt() +
                        static_cast<S>(cfg.adam_eps));
  }
}

// Projected outputs of one teacher forward pass (plain values; the teacher is
// stop-gradient by construction).
template <typename S>
struct ViewTargets {
  Mat<S> cls;   // 1 x D_proj
  Mat<S> grid;  // (R*P) x D_proj
  Mat<S> ttr;   // N x D_proj, empty unless requested
};

template <typename S>
ViewTargets<S> teacher_view_targets(ParamSet<S>& teacher, const Architecture<S>& arch,
                                    const MatXd& view, bool want_ttr) {
  Tape<S> tape(false);
  Binder<S> bind(tape, teacher);
  auto grid_tok = tokenize(tape, bind, arch, view);
  auto seq = assemble_sequence(tape, bind, arch, grid_tok, nullptr);
  auto enc = encode(tape, bind, arch, seq);
  std::vector<typename Tape<S>::Var> cat = {enc.cls, enc.grid};
  const int P = arch.n_patches;
  if (want_ttr)
    for (int n = 0; n < arch.atlas.n_networks; ++n)
      cat.push_back(tape.mean_rows(tape.slice_rows(enc.grid, n * P, P)));
  auto proj = project(tape, bind, arch, tape.concat_rows(cat));
  const Mat<S>& all = tape.val(proj);
  const Eigen::Index rp = arch.grid_rows * P;
  ViewTargets<S> out;
  out.cls = all.topRows(1);
  out.grid = all.middleRows(1, rp);
  if (want_ttr) out.ttr = all.bottomRows(arch.atlas.n_networks);
  return out;
}

template <typename S>
struct StudentViewOut {
  typename Tape<S>::Var cls;
  typename Tape<S>::Var grid;
  typename Tape<S>::Var ttr;
  bool has_ttr = false;
};

// Student forward on the shared gradient tape; the student always sees the
// masked sequence. TTR summaries average backbone grid tokens over patches
// (masked positions included) before the shared projector.
template <typename S>
StudentViewOut<S> student_view_forward(Tape<S>& tape, Binder<S>& bind,
                                       const Architecture<S>& arch, const MatXd& view,
                                       const MaskGrid& mask, bool want_ttr) {
  auto grid_tok = tokenize(tape, bind, arch, view);
  auto seq = assemble_sequence(tape, bind, arch, grid_tok, &mask);
  auto enc = encode(tape, bind, arch, seq);
  std::vector<typename Tape<S>::Var> cat = {enc.cls, enc.grid};
  const int P = arch.n_patches;
  if (want_ttr)
    for (int n = 0; n < arch.atlas.n_networks; ++n)
      cat.push_back(tape.mean_rows(tape.slice_rows(enc.grid, n * P, P)));
  auto proj = project(tape, bind, arch, tape.concat_rows(cat));
  const Eigen::Index rp = arch.grid_rows * P;
  StudentViewOut<S> out;
  out.cls = tape.slice_rows(proj, 0, 1);
  out.grid = tape.slice_rows(proj, 1, rp);
  if (want_ttr) {
    out.ttr = tape.slice_rows(proj, 1 + rp, arch.atlas.n_networks);
    out.has_ttr = true;
  }
  return out;
}

struct StepMetrics {
  std::uint64_t step = 0;
  double lr = 0.0;
  double wd = 0.0;
  double alpha = 0.0;
  LossBreakdown loss;
  double token_cosine = 0.0;
};

// Augmented views, masks, and teacher targets for one batch item. Building
// these is pure given (seed, sample index), so items can be prepared on
// worker threads without affecting determinism.
template <typename S>
struct BatchItem {
  MatXd view1, view2;
  MaskGrid mask1, mask2;
  ViewTargets<S> t1, t2;
};

template <typename S>
BatchItem<S> prepare_batch_item(const ScanTimeSeries& scan, ParamSet<S>& teacher,
                                const Architecture<S>& arch, const ViewsConfig& vcfg,
                                bool want_ttr, const RoiAdjacency* adjacency,
                                std::uint64_t seed, std::uint64_t sample_index) {
  Rng rng = make_stream(seed, StreamPurpose::kSample, sample_index);
  auto [v1, v2] = sample_views(scan, vcfg.t_crop, rng);
  for (View* v : {&v1, &v2}) {
    if (vcfg.augmentation == "corruption") {
      *v = corrupt(*v, vcfg.aug, rng);
    } else if (vcfg.augmentation == "physio") {
      *v = augment_physio(*v, physio_kind_from_string(vcfg.physio_kind),
                          vcfg.physio_intensity == "heavy" ? PhysioIntensity::kHeavy
                                                           : PhysioIntensity::kLight,
                          adjacency, rng);
    } else if (vcfg.augmentation != "none") {
      throw ConfigError("unknown augmentation mode: " + vcfg.augmentation);
    }
  }
  const MaskStrategy strategy = mask_strategy_from_string(vcfg.mask_strategy);
  BatchItem<S> item;
  item.mask1 = sample_mask(arch.grid_rows, arch.n_patches, vcfg.mask_ratio_lo,
                           vcfg.mask_ratio_hi, strategy, rng);
  item.mask2 = sample_mask(arch.grid_rows, arch.n_patches, vcfg.mask_ratio_lo,
                           vcfg.mask_ratio_hi, strategy, rng);
  item.t1 = teacher_view_targets(teacher, arch, v1.data, want_ttr);
  item.t2 = teacher_view_targets(teacher, arch, v2.data, want_ttr);
  item.view1 = std::move(v1.data);
  item.view2 = std::move(v2.data);
  return item;
}

// One optimization step: two corrupted views per scan, per-view slice masks,
// student encodes masked / teacher unmasked, losses, AdamW on the student,
// EMA onto the teacher. Item preparation (augmentation + teacher forwards)
// runs on tcfg.workers threads; sample-level streams keep the result
// identical for any worker count.
template <typename S>
StepMetrics train_step(TrainState<S>& state,
                       const std::vector<const ScanTimeSeries*>& batch,
                       const ViewsConfig& vcfg, const ObjectiveConfig& ocfg,
                       const TrainerConfig& tcfg,
                       const RoiAdjacency* adjacency = nullptr) {
  const int B = static_cast<int>(batch.size());
  if (B < 2) throw ConfigError("train_step: batch size must be >= 2");
  const Architecture<S>& arch = state.arch;
  const auto sched = schedules_at(static_cast<double>(state.step),
                                  static_cast<double>(state.total_steps),
                                  tcfg.sched, ocfg);
  // The TTR term is only evaluated while its weight is non-zero (it decays to
  // zero within the first few percent of training).
  const bool want_ttr = sched.ttr_w != 0.0;

  std::vector<BatchItem<S>> items(static_cast<std::size_t>(B));
  {
    const int workers = std::max(1, std::min(tcfg.workers, B));
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    const auto work = [&](int w) {
      try {
        for (int i = w; i < B; i += workers)
          items[static_cast<std::size_t>(i)] = prepare_batch_item(
              *batch[i], state.teacher, arch, vcfg, want_ttr, adjacency, state.seed,
              state.step * static_cast<std::uint64_t>(B) + static_cast<std::uint64_t>(i));
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    };
    if (workers == 1) {
      work(0);
    } else {
      for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
      for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  Tape<S> tape(true);
  Binder<S> bind(tape, state.student);

  std::vector<typename Tape<S>::Var> s_cls_v1, s_cls_v2;
  std::vector<typename Tape<S>::Var> token_grids;
  std::vector<Mat<S>> token_targets;
  std::vector<StudentViewOut<S>> ttr_s1, ttr_s2;
  Mat<S> t_cls_v1(B, arch.cfg.proj_dim), t_cls_v2(B, arch.cfg.proj_dim);
  std::vector<Mat<S>> t_ttr_v1, t_ttr_v2;
  std::vector<const MaskGrid*> mask_ptrs;
  double cos_sum = 0.0;
  std::uint64_t cos_count = 0;

  for (int i = 0; i < B; ++i) {
    BatchItem<S>& item = items[static_cast<std::size_t>(i)];
    t_cls_v1.row(i) = item.t1.cls.row(0);
    t_cls_v2.row(i) = item.t2.cls.row(0);
    if (want_ttr) {
      t_ttr_v1.push_back(item.t1.ttr);
      t_ttr_v2.push_back(item.t2.ttr);
    }

    auto s1 = student_view_forward(tape, bind, arch, item.view1, item.mask1, want_ttr);
    auto s2 = student_view_forward(tape, bind, arch, item.view2, item.mask2, want_ttr);
    s_cls_v1.push_back(s1.cls);
    s_cls_v2.push_back(s2.cls);
    token_grids.push_back(s1.grid);
    token_targets.push_back(item.t1.grid);
    token_grids.push_back(s2.grid);
    token_targets.push_back(item.t2.grid);
    mask_ptrs.push_back(&item.mask1);
    mask_ptrs.push_back(&item.mask2);
    if (want_ttr) {
      ttr_s1.push_back(s1);
      ttr_s2.push_back(s2);
    }

    // token_cosine: projected vectors are unit-norm, so cosine = dot.
    for (int vi = 0; vi < 2; ++vi) {
      const MaskGrid& m = vi == 0 ? item.mask1 : item.mask2;
      const Mat<S>& sg = tape.val(vi == 0 ? s1.grid : s2.grid);
      const Mat<S>& tg = vi == 0 ? item.t1.grid : item.t2.grid;
      for (std::size_t k = 0; k < m.bits.size(); ++k)
        if (m.bits[k]) {
          cos_sum += static_cast<double>(
              sg.row(static_cast<Eigen::Index>(k)).dot(tg.row(static_cast<Eigen::Index>(k))));
          ++cos_count;
        }
    }
  }

  const double gamma = gamma_weight(arch.cfg.proj_dim, B);
  auto s1_batch = tape.concat_rows(s_cls_v1);
  auto s2_batch = tape.concat_rows(s_cls_v2);
  const auto cls = cls_loss(tape, s1_batch, s2_batch, t_cls_v1, t_cls_v2, gamma,
                            ocfg.epsilon);

  auto tok = token_loss(tape, token_grids, token_targets, mask_ptrs,
                        ocfg.normalize_token_loss);

  LossParts<S> ttr;
  if (want_ttr) {
    std::vector<typename Tape<S>::Var> n_s1, n_s2;
    std::vector<Mat<S>> n_t1, n_t2;
    for (int n = 0; n < arch.atlas.n_networks; ++n) {
      std::vector<typename Tape<S>::Var> rows1, rows2;
      Mat<S> m1(B, arch.cfg.proj_dim), m2(B, arch.cfg.proj_dim);
      for (int i = 0; i < B; ++i) {
        rows1.push_back(tape.slice_rows(ttr_s1[static_cast<std::size_t>(i)].ttr, n, 1));
        rows2.push_back(tape.slice_rows(ttr_s2[static_cast<std::size_t>(i)].ttr, n, 1));
        m1.row(i) = t_ttr_v1[static_cast<std::size_t>(i)].row(n);
        m2.row(i) = t_ttr_v2[static_cast<std::size_t>(i)].row(n);
      }
      n_s1.push_back(tape.concat_rows(rows1));
      n_s2.push_back(tape.concat_rows(rows2));
      n_t1.push_back(std::move(m1));
      n_t2.push_back(std::move(m2));
    }
    ttr = ttr_loss(tape, n_s1, n_s2, n_t1, n_t2, gamma, ocfg.epsilon);
  } else {
    ttr.loss = tape.constant_scalar(S(0));
    ttr.dist = tape.constant_scalar(S(0));
    ttr.rate = tape.constant_scalar(S(0));
  }

  StepMetrics metrics;
  auto total = total_loss(tape, cls, tok, ttr, sched.ttr_w, ocfg, &metrics.loss);

  state.student.zero_grad();
  tape.backward(total);
  adamw_update(state.student, sched.lr, sched.wd, tcfg, state.step + 1);
  ema_update(state.teacher, state.student, sched.alpha);

  metrics.step = state.step;
  metrics.lr = sched.lr;
  metrics.wd = sched.wd;
  metrics.alpha = sched.alpha;
  metrics.token_cosine = cos_count > 0 ? cos_sum / static_cast<double>(cos_count) : 0.0;
  state.step += 1;
  return metrics;
}

// ---- metrics CSV --------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "step,lr,wd,alpha,ttr_w,l_cls,l_tok,l_ttr,r_cls,total,token_cosine";

class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, bool append) {
    const bool exists = std::filesystem::exists(path) &&
                        std::filesystem::file_size(path) > 0;
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw IoError("cannot open metrics file: " + path);
    if (!append || !exists) out_ << kMetricsHeader << "\n";
  }

  void write(const StepMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                  static_cast<unsigned long long>(m.step), m.lr, m.wd, m.alpha,
                  m.loss.ttr_weight_used, m.loss.l_cls, m.loss.l_tok, m.loss.l_ttr,
                  m.loss.r_cls, m.loss.total, m.token_cosine);
    out_ << buf << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// ---- full pretraining run ------------------------------------------------------

template <typename S>
struct PretrainOutcome {
  std::string final_checkpoint;
  std::string metrics_path;
  std::uint64_t steps_run = 0;
};

template <typename S>
TrainState<S> init_train_state(const RunConfig& cfg, const AtlasMapping& atlas) {
  TrainState<S> state;
  state.arch = Architecture<S>::build(cfg.model, atlas);
  Rng rng = make_stream(cfg.seed, StreamPurpose::kModelInit, 0);
  state.arch.build_params(state.student, rng);
  state.teacher = state.student.clone_values();  // teacher starts as a copy
  state.student.init_moments();
  state.seed = cfg.seed;
  state.config_hash = config_hash(cfg);
  return state;
}

inline std::vector<ScanTimeSeries> load_preprocessed_scans(const RunConfig& cfg,
                                                           const DatasetManifest& manifest) {
  std::vector<ScanTimeSeries> scans;
  std::size_t limit = manifest.scans.size();
  if (cfg.trainer.pretraining_subset > 0)
    limit = std::min<std::size_t>(limit,
                                  static_cast<std::size_t>(cfg.trainer.pretraining_subset));
  for (std::size_t i = 0; i < limit; ++i) {
    const auto& entry = manifest.scans[i];
    ScanTimeSeries scan = load_scan(entry.path);
    scan.scan_id = entry.scan_id;
    scan.labels = entry.labels;
    scans.push_back(preprocess_scan(scan, cfg.data));
  }
  return scans;
}

template <typename S>
PretrainOutcome<S> run_pretraining(const RunConfig& cfg, const DatasetManifest& manifest,
                                   const std::string& out_dir,
                                   const std::string& resume_path = "",
                                   bool allow_hash_mismatch = false) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const AtlasMapping atlas = load_atlas(manifest.atlas_path);
  std::vector<ScanTimeSeries> scans = load_preprocessed_scans(cfg, manifest);

  const int B = cfg.trainer.batch_size;
  if (B < 2) throw ConfigError("trainer: batch_size must be >= 2");
  const std::uint64_t n = scans.size();
  const std::uint64_t steps_per_epoch = n / static_cast<std::uint64_t>(B);
  if (steps_per_epoch == 0)
    throw ConfigError("trainer: batch_size exceeds the number of scans");
  const std::uint64_t total =
      steps_per_epoch * static_cast<std::uint64_t>(cfg.trainer.epochs);

  TrainState<S> state;
  const bool resuming = !resume_path.empty();
  if (resuming) {
    auto arch = Architecture<S>::build(cfg.model, atlas);
    state = checkpoint_load<S>(resume_path, arch, config_hash(cfg), allow_hash_mismatch);
    if (state.total_steps != total)
      throw ConfigError("resume: checkpoint total_steps disagrees with config");
  } else {
    state = init_train_state<S>(cfg, atlas);
    state.total_steps = total;
  }

  RoiAdjacency adjacency;
  const RoiAdjacency* adj_ptr = nullptr;
  if (cfg.views.augmentation == "physio" && cfg.views.physio_kind == "roi_mix") {
    adjacency = ring_adjacency(atlas);
    adj_ptr = &adjacency;
  }

  const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  MetricsWriter metrics(metrics_path, resuming);

  std::vector<std::size_t> order;
  std::uint64_t order_epoch = UINT64_MAX;
  while (state.step < total) {
    const std::uint64_t epoch = state.step / steps_per_epoch;
    if (epoch != order_epoch) {
      order = make_stream(state.seed, StreamPurpose::kShuffle, epoch)
                  .permutation(static_cast<std::size_t>(n));
      order_epoch = epoch;
    }
    const std::uint64_t slot = state.step % steps_per_epoch;
    std::vector<const ScanTimeSeries*> batch;
    for (int i = 0; i < B; ++i)
      batch.push_back(&scans[order[static_cast<std::size_t>(
          slot * static_cast<std::uint64_t>(B) + static_cast<std::uint64_t>(i))]]);

    StepMetrics m;
    try {
      m = train_step(state, batch, cfg.views, cfg.objective, cfg.trainer, adj_ptr);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(state.step) + ": " + e.what());
    }
    metrics.write(m);

    if (cfg.trainer.checkpoint_every_epochs > 0 && state.step % steps_per_epoch == 0) {
      const std::uint64_t done_epoch = state.step / steps_per_epoch;
      if (done_epoch > 0 &&
          done_epoch % static_cast<std::uint64_t>(cfg.trainer.checkpoint_every_epochs) == 0) {
        checkpoint_save(state, (fs::path(out_dir) / ("checkpoint_epoch_" +
                                                     std::to_string(done_epoch) + ".bsck"))
                                   .string());
      }
    }
  }

  PretrainOutcome<S> outcome;
  outcome.final_checkpoint = (fs::path(out_dir) / "checkpoint_final.bsck").string();
  checkpoint_save(state, outcome.final_checkpoint);
  outcome.metrics_path = metrics_path;
  outcome.steps_run = state.step;
  return outcome;
}

}  // namespace braintok
