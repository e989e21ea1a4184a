// Acceptance suite. Each test case checks one acceptance criterion end to end
// and prints a single [PASS]/[FAIL] line; thresholds and tolerances are fixed
// here, not configurable.

#include <Eigen/Eigenvalues>
#include <catch2/catch_amalgamated.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "braintok/braintok.hpp"
#include "test_util.hpp"

using namespace braintok;
using testutil::random_mat;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  bool ok = true;
  std::ostringstream notes;

  void check(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      notes << " | FAILED: " << what;
    }
  }
  void note(const std::string& s) { notes << " | " << s; }
};

void finish(int num, const char* name, Criterion& c) {
  std::printf("[%s] criterion %d: %s%s\n", c.ok ? "PASS" : "FAIL", num, name,
              c.notes.str().c_str());
  std::fflush(stdout);
  REQUIRE(c.ok);
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("braintok_accept_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

// Toy configuration pinned by the gradient-correctness criterion:
// C=6, N=2, P=2, D=16, D_proj=4, depth=2, B=4.
RunConfig grad_toy_config() {
  RunConfig cfg;
  cfg.seed = 3;
  cfg.views.t_crop = 8;
  cfg.model.t_crop = 8;
  cfg.model.patch_len = 4;
  cfg.model.embed_dim = 16;
  cfg.model.depth = 2;
  cfg.model.heads = 2;
  cfg.model.proj_hidden = 8;
  cfg.model.proj_dim = 4;
  cfg.trainer.batch_size = 4;
  return cfg;
}

// Small end-to-end scale shared by the collapse-instrumentation and
// determinism criteria: 45 ROIs over 9 networks.
RunConfig small_run_config(const std::string& tokenizer_type, bool with_ttr) {
  RunConfig cfg;
  cfg.seed = 11;
  cfg.data.pipeline = {"zscore"};
  cfg.data.synth.n_scans = 60;
  cfg.data.synth.n_rois = 45;
  cfg.data.synth.n_networks = 9;
  cfg.data.synth.n_timepoints = 120;
  cfg.data.synth.n_classes = 3;
  cfg.data.synth.effect_size = 2.0;
  cfg.data.synth.designated = {2, 5};
  cfg.views.t_crop = 40;
  cfg.model.t_crop = 40;
  cfg.model.patch_len = 8;  // P = 5
  cfg.model.embed_dim = 32;
  cfg.model.depth = 2;
  cfg.model.heads = 4;
  cfg.model.proj_hidden = 32;
  cfg.model.proj_dim = 16;
  cfg.model.tokenizer_type = tokenizer_type;
  cfg.objective.lambda_ttr = with_ttr ? 0.5 : 0.0;
  cfg.trainer.batch_size = 8;
  cfg.trainer.epochs = 8;  // 7 steps/epoch -> 56 steps
  cfg.trainer.sched.base_lr = 1e-3;
  cfg.trainer.workers = 2;
  return cfg;
}

std::vector<ScanTimeSeries> labeled_scans(const RunConfig& cfg,
                                          const DatasetManifest& manifest) {
  std::vector<ScanTimeSeries> scans;
  for (const auto& entry : manifest.scans) {
    ScanTimeSeries s = load_scan(entry.path);
    s.scan_id = entry.scan_id;
    s.labels = entry.labels;
    scans.push_back(preprocess_scan(s, cfg.data));
  }
  return scans;
}

std::vector<double> metrics_column(const std::string& path, int col) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);  // header
  std::vector<double> out;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string field;
    for (int i = 0; i <= col; ++i) std::getline(ss, field, ',');
    out.push_back(std::stod(field));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("criterion 1: gradient correctness for all losses") {
  Criterion c;
  const auto t0 = std::chrono::steady_clock::now();

  const RunConfig cfg = grad_toy_config();
  const AtlasMapping atlas = even_atlas(6, 2);
  auto arch = Architecture<double>::build(cfg.model, atlas);
  c.check(arch.n_patches == 2, "toy patch count");

  ParamSet<double> student;
  Rng init_s = make_stream(3, StreamPurpose::kModelInit, 0);
  arch.build_params(student, init_s);
  ParamSet<double> teacher;
  Rng init_t = make_stream(4, StreamPurpose::kModelInit, 0);
  arch.build_params(teacher, init_t);

  // Fixed batch of views and masks.
  const int B = 4;
  std::vector<MatXd> v1(B), v2(B);
  std::vector<MaskGrid> m1(B), m2(B);
  Rng data_rng(5);
  for (int i = 0; i < B; ++i) {
    v1[i] = random_mat<double>(6, 8, data_rng);
    v2[i] = random_mat<double>(6, 8, data_rng);
    Rng mask_rng(100 + static_cast<std::uint64_t>(i));
    m1[i] = sample_mask(2, 2, 0.3, 0.7, MaskStrategy::kSlice, mask_rng);
    m2[i] = sample_mask(2, 2, 0.3, 0.7, MaskStrategy::kSlice, mask_rng);
  }
  std::vector<ViewTargets<double>> t1(B), t2(B);
  for (int i = 0; i < B; ++i) {
    t1[i] = teacher_view_targets(teacher, arch, v1[i], true);
    t2[i] = teacher_view_targets(teacher, arch, v2[i], true);
  }
  const double gamma = gamma_weight(cfg.model.proj_dim, B);
  const ObjectiveConfig& ocfg = cfg.objective;

  enum class Which { kCls, kTok, kTtr, kTotal };
  const auto build_loss = [&](Tape<double>& tape, Which which) {
    Binder<double> bind(tape, student);
    std::vector<Tape<double>::Var> cls1, cls2, tok_grids;
    std::vector<Mat<double>> tok_targets;
    std::vector<const MaskGrid*> masks;
    std::vector<StudentViewOut<double>> out1(B), out2(B);
    Mat<double> tc1(B, 4), tc2(B, 4);
    for (int i = 0; i < B; ++i) {
      out1[i] = student_view_forward(tape, bind, arch, v1[i], m1[i], true);
      out2[i] = student_view_forward(tape, bind, arch, v2[i], m2[i], true);
      cls1.push_back(out1[i].cls);
      cls2.push_back(out2[i].cls);
      tok_grids.push_back(out1[i].grid);
      tok_targets.push_back(t1[i].grid);
      masks.push_back(&m1[i]);
      tok_grids.push_back(out2[i].grid);
      tok_targets.push_back(t2[i].grid);
      masks.push_back(&m2[i]);
      tc1.row(i) = t1[i].cls.row(0);
      tc2.row(i) = t2[i].cls.row(0);
    }
    const auto cls =
        cls_loss(tape, tape.concat_rows(cls1), tape.concat_rows(cls2), tc1, tc2, gamma,
                 ocfg.epsilon);
    auto tok = token_loss(tape, tok_grids, tok_targets, masks, true);
    std::vector<Tape<double>::Var> n_s1, n_s2;
    std::vector<Mat<double>> n_t1, n_t2;
    for (int n = 0; n < 2; ++n) {
      std::vector<Tape<double>::Var> rows1, rows2;
      Mat<double> a(B, 4), b(B, 4);
      for (int i = 0; i < B; ++i) {
        rows1.push_back(tape.slice_rows(out1[i].ttr, n, 1));
        rows2.push_back(tape.slice_rows(out2[i].ttr, n, 1));
        a.row(i) = t1[i].ttr.row(n);
        b.row(i) = t2[i].ttr.row(n);
      }
      n_s1.push_back(tape.concat_rows(rows1));
      n_s2.push_back(tape.concat_rows(rows2));
      n_t1.push_back(std::move(a));
      n_t2.push_back(std::move(b));
    }
    const auto ttr = ttr_loss(tape, n_s1, n_s2, n_t1, n_t2, gamma, ocfg.epsilon);
    switch (which) {
      case Which::kCls: return cls.loss;
      case Which::kTok: return tok;
      case Which::kTtr: return ttr.loss;
      case Which::kTotal:
        return total_loss(tape, cls, tok, ttr, 0.3, ocfg, nullptr);
    }
    return cls.loss;
  };

  const char* names[] = {"cls", "token", "ttr", "total"};
  int idx = 0;
  for (Which which : {Which::kCls, Which::kTok, Which::kTtr, Which::kTotal}) {
    const auto forward = [&]() {
      Tape<double> tape(false);
      return static_cast<double>(tape.scalar(build_loss(tape, which)));
    };
    const auto backward = [&]() {
      Tape<double> tape(true);
      tape.backward(build_loss(tape, which));
    };
    const double viol = testutil::max_param_grad_violation<double>(
        student, forward, backward, 1e-6, 1e-9);
    c.check(viol <= 1.0, std::string(names[idx]) + " loss gradients (violation " +
                             std::to_string(viol) + ")");
    ++idx;
  }

  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.note("rtol 1e-6 at float64 over " + std::to_string(student.scalar_count()) +
         " parameters, " + std::to_string(seconds) + " s");
  c.check(seconds < 120.0, "runtime under 2 minutes");
  finish(1, "analytic gradients match finite differences for Eq. 2/3/4/5", c);
}

TEST_CASE("criterion 2: coding-rate oracle") {
  Criterion c;
  // R(0) = 0 exactly.
  {
    Tape<double> t(false);
    const Mat<double> zero_cov = Mat<double>::Zero(4, 4);
    c.check(t.scalar(coding_rate_from_cov(t, t.constant(zero_cov), 0.05)) == 0.0,
            "R(0) == 0 exactly");
  }
  // gamma(128, 512) exact.
  c.check(gamma_weight(128, 512) == 0.009765625, "gamma(128,512) == 0.009765625");

  // 100 random PSD matrices up to 16x16 against the eigenvalue form.
  Rng rng(2);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 2 + static_cast<int>(rng.uniform_int(15));
    const Mat<double> a = random_mat<double>(d, d, rng);
    const Mat<double> cov = (a.transpose() * a) / d;
    Tape<double> t(false);
    const double got = t.scalar(coding_rate_from_cov(t, t.constant(cov), 0.05));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    double expect = 0.0;
    for (Eigen::Index i = 0; i < d; ++i)
      expect += std::log(1.0 + (static_cast<double>(d) / 0.05) *
                                   std::max(0.0, es.eigenvalues()(i)));
    expect *= 0.5;
    worst = std::max(worst, std::abs(got - expect));
  }
  c.check(worst < 1e-8, "eigenvalue oracle agreement");
  c.note("max |R - oracle| = " + std::to_string(worst));
  finish(2, "coding rate matches the eigenvalue-form oracle", c);
}

TEST_CASE("criterion 3: EMA exactness") {
  Criterion c;
  Rng rng(3);
  for (double alpha : {0.0, 0.5, 0.99, 1.0}) {
    ParamSet<double> student, teacher;
    auto& sw = student.add("a", 7, 5, true);
    auto& tw = teacher.add("a", 7, 5, true);
    auto& sb = student.add("b", 1, 9, false);
    auto& tb = teacher.add("b", 1, 9, false);
    sw.value = random_mat<double>(7, 5, rng);
    tw.value = random_mat<double>(7, 5, rng);
    sb.value = random_mat<double>(1, 9, rng);
    tb.value = random_mat<double>(1, 9, rng);
    const Mat<double> ew = alpha * tw.value + (1.0 - alpha) * sw.value;
    const Mat<double> eb = alpha * tb.value + (1.0 - alpha) * sb.value;
    ema_update(teacher, student, alpha);
    c.check((tw.value - ew).cwiseAbs().maxCoeff() < 1e-7,
            "alpha=" + std::to_string(alpha) + " weights");
    c.check((tb.value - eb).cwiseAbs().maxCoeff() < 1e-7,
            "alpha=" + std::to_string(alpha) + " biases");
  }
  finish(3, "EMA update holds elementwise within 1e-7", c);
}

TEST_CASE("criterion 4: schedule endpoints and continuity") {
  Criterion c;
  ScheduleConfig sched;
  ObjectiveConfig obj;
  const double S = 20000.0;
  const auto at = [&](double s) { return schedules_at(s, S, sched, obj); };

  c.check(at(0).lr == 0.0, "lr(0) == 0");
  c.check(std::abs(at(0.03 * S).lr - 7e-4) < 1e-18, "lr(0.03 S) == 7e-4");
  c.check(std::abs(at(S).lr) < 1e-18, "lr(S) == 0");
  c.check(std::abs(at(0).wd - 0.05) < 1e-15, "wd(0) == 0.05");
  c.check(std::abs(at(S).wd - 0.3) < 1e-15, "wd(S) == 0.3");
  c.check(at(0).ttr_w == 0.5, "ttr_w(0) == 0.5");
  c.check(at(0.05 * S).ttr_w == 0.0, "ttr_w(0.05 S) == 0");

  const double ttr_decay_steps = obj.ttr_decay_fraction * S;
  const double warmup_steps = sched.warmup_fraction * S;
  double max_lr_jump = 0.0, max_wd_jump = 0.0, max_ttr_jump = 0.0;
  auto prev = at(0);
  for (int s = 1; s <= 20000; ++s) {
    const auto v = at(static_cast<double>(s));
    max_lr_jump = std::max(max_lr_jump, std::abs(v.lr - prev.lr));
    max_wd_jump = std::max(max_wd_jump, std::abs(v.wd - prev.wd));
    max_ttr_jump = std::max(max_ttr_jump, std::abs(v.ttr_w - prev.ttr_w));
    prev = v;
  }
  c.check(max_ttr_jump < 2.0 * obj.lambda_ttr / ttr_decay_steps,
          "ttr jump bound 2*lambda/decay_steps");
  c.check(max_lr_jump <= sched.base_lr / warmup_steps + 1e-15, "lr continuity");
  c.check(max_wd_jump <=
              (sched.weight_decay_end - sched.weight_decay_start) * M_PI / (2.0 * S) + 1e-15,
          "wd continuity");
  finish(4, "schedule endpoints and continuity", c);
}

TEST_CASE("criterion 5: slice mask invariants over 10,000 samples") {
  Criterion c;
  int n_network = 0, n_temporal = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    Rng rng = Rng::stream(55, static_cast<std::uint64_t>(trial));
    // Replay the target draw so the realized ratio can be compared to it.
    Rng draw = Rng::stream(55, static_cast<std::uint64_t>(trial));
    const double target = draw.uniform(0.65, 0.85);
    const MaskGrid g = sample_mask(9, 5, 0.65, 0.85, MaskStrategy::kSlice, rng);

    const int masked = g.count_masked();
    if (masked == 0 || masked == 45) {
      c.check(false, "all-or-nothing mask at trial " + std::to_string(trial));
      break;
    }
    // Classify: network slicing leaves each row full or empty; temporal
    // slicing leaves each column full or empty with a contiguous run.
    bool rows_clean = true;
    for (int n = 0; n < 9; ++n) {
      int rc = 0;
      for (int p = 0; p < 5; ++p) rc += g.at(n, p);
      if (rc != 0 && rc != 5) rows_clean = false;
    }
    if (rows_clean) {
      ++n_network;
    } else {
      ++n_temporal;
      std::vector<int> col(5, 0);
      for (int n = 0; n < 9; ++n)
        for (int p = 0; p < 5; ++p) col[static_cast<std::size_t>(p)] += g.at(n, p);
      int first = -1, last = -1, full = 0;
      bool cols_clean = true;
      for (int p = 0; p < 5; ++p) {
        if (col[static_cast<std::size_t>(p)] != 0 && col[static_cast<std::size_t>(p)] != 9)
          cols_clean = false;
        if (col[static_cast<std::size_t>(p)] == 9) {
          if (first < 0) first = p;
          last = p;
          ++full;
        }
      }
      if (!cols_clean || last - first + 1 != full) {
        c.check(false, "non-contiguous temporal run at trial " + std::to_string(trial));
        break;
      }
    }
    if (std::abs(g.realized_ratio() - target) > 1.0 / 5.0 + 1e-12) {
      c.check(false, "realized ratio off by more than 1/min(N,P) at trial " +
                         std::to_string(trial));
      break;
    }
  }
  c.note("network slices: " + std::to_string(n_network) +
         ", temporal slices: " + std::to_string(n_temporal));
  c.check(n_network > 4000 && n_temporal > 4000, "both slice types drawn");
  finish(5, "10,000 slice masks hold every invariant", c);
}

TEST_CASE("criterion 6: shape contract at the default configuration") {
  Criterion c;
  ModelConfig m;  // defaults: D=768, patch 20, t_crop 100, depth 8
  const AtlasMapping atlas = default_atlas();
  auto arch = Architecture<double>::build(m, atlas);
  c.check(arch.grid_rows == 9, "N == 9");
  c.check(arch.n_patches == 5, "P == 5");
  c.check(arch.seq_len() == 46, "sequence length 46");
  c.check(arch.net_heads[8] == 55, "cerebellum H == 55");
  c.check(arch.net_heads[7] == 8, "subcortex H == 8");
  for (int n = 0; n < 9; ++n) {
    const int cn = static_cast<int>(arch.net_members[static_cast<std::size_t>(n)].size());
    c.check(arch.net_heads[static_cast<std::size_t>(n)] ==
                static_cast<int>(std::ceil(384.0 / cn)),
            "H formula for network " + std::to_string(n));
  }

  ParamSet<double> ps;
  Rng rng(6);
  arch.build_params(ps, rng);
  Rng data_rng(7);
  const MatXd view = random_mat<double>(457, 100, data_rng);
  const Mat<double> grid = tokenize_plain(ps, arch, view);
  c.check(grid.rows() == 9 * 5 && grid.cols() == 768, "token tensor is (9, 5, 768)");
  c.check(grid.allFinite(), "finite tokens");
  finish(6, "default-config shapes and expansion factors", c);
}

TEST_CASE("criterion 7: end-to-end planted-signal run") {
  Criterion c;
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = temp_dir("crit7");

  RunConfig cfg;
  cfg.seed = 7;
  cfg.data.synth.n_scans = 300;  // C=457, T=180, 3 classes, effect 2.0
  cfg.model.embed_dim = 64;
  cfg.model.depth = 2;
  cfg.model.heads = 4;
  cfg.model.proj_hidden = 64;
  cfg.model.proj_dim = 32;
  cfg.trainer.batch_size = 32;
  cfg.trainer.epochs = 30;
  cfg.trainer.workers = 2;

  const DatasetManifest manifest =
      generate_synthetic(cfg.data.synth, cfg.seed, (dir / "data").string());
  const auto outcome = run_pretraining<double>(cfg, manifest, (dir / "run").string());
  c.check(outcome.steps_run == 270, "270 training steps (9 per epoch * 30)");

  const AtlasMapping atlas = load_atlas(manifest.atlas_path);
  auto arch = Architecture<double>::build(cfg.model, atlas);
  auto trained =
      checkpoint_load<double>(outcome.final_checkpoint, arch, config_hash(cfg));
  RunConfig rw_cfg = cfg;
  rw_cfg.seed = 1234;  // fresh random weights, identical architecture
  auto untrained = init_train_state<double>(rw_cfg, atlas);

  const auto scans = labeled_scans(cfg, manifest);
  const auto probe_model = [&](ParamSet<double>& params) {
    std::vector<std::vector<FeatureVector>> features;
    for (const auto& s : scans)
      features.push_back(extract_features(s, params, arch, cfg.eval.n_crops));
    const ProbeData data = make_probe_data(scans, features, "class");
    std::vector<int> labels;
    for (const auto& s : data.scans) labels.push_back(s.label);
    const auto splits = stratified_split(labels, 0.6, 0.2, 0.2, 99);
    return linear_probe(data, splits, cfg.eval, 99);
  };

  const ProbeResult trained_probe = probe_model(trained.teacher);
  const ProbeResult random_probe = probe_model(untrained.teacher);
  const double minutes =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;

  c.note("trained " + std::to_string(trained_probe.test_balanced_accuracy) +
         ", random " + std::to_string(random_probe.test_balanced_accuracy) + ", " +
         std::to_string(minutes) + " min");
  c.check(trained_probe.test_balanced_accuracy >= 0.90,
          "trained probe balanced accuracy >= 0.90");
  c.check(random_probe.test_balanced_accuracy <= 0.45,
          "random-weight probe balanced accuracy <= 0.45");
  c.check(minutes < 30.0, "wall clock under 30 minutes");
  finish(7, "planted-signal pretraining beats the random-weight control", c);
}

TEST_CASE("criterion 8: collapse instrumentation") {
  Criterion c;

  // Hard gate: token_cosine equals a hand-computed cosine on a captured batch.
  {
    RunConfig cfg = small_run_config("semantic", true);
    const auto dir = temp_dir("crit8_oracle");
    const DatasetManifest manifest =
        generate_synthetic(cfg.data.synth, cfg.seed, (dir / "data").string());
    const AtlasMapping atlas = load_atlas(manifest.atlas_path);
    const auto scans = labeled_scans(cfg, manifest);

    auto state = init_train_state<double>(cfg, atlas);
    state.total_steps = 56;
    auto replay_state_teacher = state.teacher.clone_values();
    std::vector<const ScanTimeSeries*> batch;
    for (int i = 0; i < 8; ++i) batch.push_back(&scans[static_cast<std::size_t>(i)]);
    const auto metrics = train_step(state, batch, cfg.views, cfg.objective, cfg.trainer);

    // Replay the same streams with the pre-step parameters and recompute the
    // masked-position cosine with explicit loops.
    auto pre_student = init_train_state<double>(cfg, atlas);  // same init seed
    double num = 0.0;
    std::uint64_t count = 0;
    for (int i = 0; i < 8; ++i) {
      const auto item = prepare_batch_item(*batch[static_cast<std::size_t>(i)],
                                           replay_state_teacher, pre_student.arch,
                                           cfg.views, true, nullptr, cfg.seed,
                                           static_cast<std::uint64_t>(i));
      for (int v = 0; v < 2; ++v) {
        const MatXd& view = v == 0 ? item.view1 : item.view2;
        const MaskGrid& mask = v == 0 ? item.mask1 : item.mask2;
        const Mat<double>& target = v == 0 ? item.t1.grid : item.t2.grid;
        Tape<double> tape(false);
        Binder<double> bind(tape, pre_student.student);
        auto out = student_view_forward(tape, bind, pre_student.arch, view, mask, false);
        const Mat<double>& sg = tape.val(out.grid);
        for (std::size_t k = 0; k < mask.bits.size(); ++k)
          if (mask.bits[k]) {
            double dot = 0.0, ns = 0.0, nt = 0.0;
            for (Eigen::Index d = 0; d < sg.cols(); ++d) {
              dot += sg(static_cast<Eigen::Index>(k), d) *
                     target(static_cast<Eigen::Index>(k), d);
              ns += sg(static_cast<Eigen::Index>(k), d) * sg(static_cast<Eigen::Index>(k), d);
              nt += target(static_cast<Eigen::Index>(k), d) *
                    target(static_cast<Eigen::Index>(k), d);
            }
            num += dot / std::sqrt(ns * nt);
            ++count;
          }
      }
    }
    const double oracle = num / static_cast<double>(count);
    c.check(std::abs(metrics.token_cosine - oracle) < 1e-6,
            "token_cosine equals the hand-computed cosine (got " +
                std::to_string(metrics.token_cosine) + " vs " + std::to_string(oracle) +
                ")");
  }

  // Soft expectation: per-ROI linear tokenizer without TTR collapses to
  // cosine > 0.95 early, the full model stays lower through half of training.
  {
    const auto dir = temp_dir("crit8_traj");
    RunConfig ablated = small_run_config("roi_linear", false);
    const DatasetManifest manifest =
        generate_synthetic(ablated.data.synth, ablated.seed, (dir / "data").string());
    const auto abl_out =
        run_pretraining<double>(ablated, manifest, (dir / "ablated").string());
    RunConfig full = small_run_config("semantic", true);
    const auto full_out = run_pretraining<double>(full, manifest, (dir / "full").string());

    const auto abl_cos = metrics_column(abl_out.metrics_path, 10);
    const auto full_cos = metrics_column(full_out.metrics_path, 10);
    const std::size_t early = abl_cos.size() / 10;
    const std::size_t half = full_cos.size() / 2;
    bool ablated_early_collapse = false;
    for (std::size_t i = 0; i < early; ++i)
      ablated_early_collapse = ablated_early_collapse || abl_cos[i] > 0.95;
    bool full_stays_low = true;
    for (std::size_t i = 0; i < half; ++i) full_stays_low = full_stays_low && full_cos[i] < 0.95;
    c.note(std::string("soft expectation ") +
           ((ablated_early_collapse && full_stays_low) ? "matches" : "does not match") +
           " the reported pattern: ablated max cosine in first 10% = " +
           std::to_string(*std::max_element(abl_cos.begin(), abl_cos.begin() + std::max<std::size_t>(early, 1))) +
           ", full max cosine in first 50% = " +
           std::to_string(*std::max_element(full_cos.begin(), full_cos.begin() + std::max<std::size_t>(half, 1))));
  }
  finish(8, "token_cosine metric verified; collapse trajectory logged", c);
}

TEST_CASE("criterion 9: probe protocol fidelity against a scalar-loop oracle") {
  Criterion c;

  // 50-scan toy feature set with a weak signal so decisions are non-trivial.
  Rng rng(91);
  ProbeData data;
  data.n_classes = 2;
  data.dim = 6;
  for (int i = 0; i < 50; ++i) {
    ProbeScan s;
    s.scan_id = "s" + std::to_string(i);
    s.label = i % 2;
    for (int crop = 0; crop < 3; ++crop) {
      std::vector<float> f(6);
      for (int d = 0; d < 6; ++d)
        f[static_cast<std::size_t>(d)] = static_cast<float>(rng.normal(0.0, 1.0));
      f[1] += static_cast<float>(0.8 * s.label);
      s.crops.push_back(std::move(f));
    }
    data.scans.push_back(std::move(s));
  }
  std::vector<int> labels;
  for (const auto& s : data.scans) labels.push_back(s.label);
  EvalConfig cfg;
  const std::uint64_t seed = 17;
  const auto splits = stratified_split(labels, 0.6, 0.2, 0.2, seed);
  const ProbeResult got = linear_probe(data, splits, cfg, seed);

  // ---- independent scalar-loop reimplementation of the whole protocol ----
  const int K = 2, F = 6;
  const int n_heads = static_cast<int>(cfg.probe_lr_sweep.size());
  std::vector<const std::vector<float>*> rows;
  std::vector<int> row_labels;
  for (int idx : splits.train) {
    for (const auto& crop : data.scans[static_cast<std::size_t>(idx)].crops) {
      rows.push_back(&crop);
      row_labels.push_back(data.scans[static_cast<std::size_t>(idx)].label);
    }
  }
  const int n_rows = static_cast<int>(rows.size());
  const int batch = std::max(1, std::min(256, n_rows / 8));
  std::vector<std::vector<double>> gam(n_heads, std::vector<double>(F, 1.0));
  std::vector<std::vector<double>> bet(n_heads, std::vector<double>(F, 0.0));
  std::vector<std::vector<double>> w(n_heads, std::vector<double>(K * F, 0.0));
  std::vector<std::vector<double>> bias(n_heads, std::vector<double>(K, 0.0));
  std::vector<std::vector<double>> mw(n_heads, std::vector<double>(K * F, 0.0));
  std::vector<std::vector<double>> mb(n_heads, std::vector<double>(K, 0.0));
  std::vector<std::vector<double>> mg(n_heads, std::vector<double>(F, 0.0));
  std::vector<std::vector<double>> mbe(n_heads, std::vector<double>(F, 0.0));
  std::vector<double> rmean(F, 0.0), rvar(F, 1.0);
  for (int epoch = 0; epoch < cfg.probe_epochs; ++epoch) {
    Rng shuffle_rng = Rng::stream(Rng::mix64(seed ^ 0x50524f42ull),
                                  static_cast<std::uint64_t>(epoch));
    const auto order = shuffle_rng.permutation(static_cast<std::size_t>(n_rows));
    for (int start = 0; start < n_rows; start += batch) {
      const int m = std::min(batch, n_rows - start);
      std::vector<double> mean(F, 0.0), var(F, 0.0);
      for (int i = 0; i < m; ++i)
        for (int f = 0; f < F; ++f)
          mean[static_cast<std::size_t>(f)] +=
              (*rows[order[static_cast<std::size_t>(start + i)]])[static_cast<std::size_t>(f)];
      for (int f = 0; f < F; ++f) mean[static_cast<std::size_t>(f)] /= m;
      for (int i = 0; i < m; ++i)
        for (int f = 0; f < F; ++f) {
          const double d =
              (*rows[order[static_cast<std::size_t>(start + i)]])[static_cast<std::size_t>(f)] -
              mean[static_cast<std::size_t>(f)];
          var[static_cast<std::size_t>(f)] += d * d;
        }
      for (int f = 0; f < F; ++f) var[static_cast<std::size_t>(f)] /= m;
      for (int f = 0; f < F; ++f) {
        rmean[static_cast<std::size_t>(f)] =
            0.9 * rmean[static_cast<std::size_t>(f)] + 0.1 * mean[static_cast<std::size_t>(f)];
        rvar[static_cast<std::size_t>(f)] =
            0.9 * rvar[static_cast<std::size_t>(f)] + 0.1 * var[static_cast<std::size_t>(f)];
      }
      for (int h = 0; h < n_heads; ++h) {
        const double lr = cfg.probe_lr_sweep[static_cast<std::size_t>(h)];
        std::vector<double> gw(K * F, 0.0), gb(K, 0.0), gg(F, 0.0), gbe(F, 0.0);
        for (int i = 0; i < m; ++i) {
          const int y = row_labels[order[static_cast<std::size_t>(start + i)]];
          std::vector<double> xh(F), logits(K, 0.0);
          for (int f = 0; f < F; ++f)
            xh[static_cast<std::size_t>(f)] =
                ((*rows[order[static_cast<std::size_t>(start + i)]])[static_cast<std::size_t>(f)] -
                 mean[static_cast<std::size_t>(f)]) /
                std::sqrt(var[static_cast<std::size_t>(f)] + 1e-5);
          for (int k = 0; k < K; ++k) {
            double acc = bias[static_cast<std::size_t>(h)][static_cast<std::size_t>(k)];
            for (int f = 0; f < F; ++f)
              acc += w[static_cast<std::size_t>(h)][static_cast<std::size_t>(k * F + f)] *
                     (gam[static_cast<std::size_t>(h)][static_cast<std::size_t>(f)] *
                          xh[static_cast<std::size_t>(f)] +
                      bet[static_cast<std::size_t>(h)][static_cast<std::size_t>(f)]);
            logits[static_cast<std::size_t>(k)] = acc;
          }
          const double mx = std::max(logits[0], logits[1]);
          double z = 0.0;
          std::vector<double> p(K);
          for (int k = 0; k < K; ++k) {
            p[static_cast<std::size_t>(k)] = std::exp(logits[static_cast<std::size_t>(k)] - mx);
            z += p[static_cast<std::size_t>(k)];
          }
          for (int k = 0; k < K; ++k) p[static_cast<std::size_t>(k)] /= z;
          p[static_cast<std::size_t>(y)] -= 1.0;
          for (int k = 0; k < K; ++k) {
            const double d = p[static_cast<std::size_t>(k)] / m;
            gb[static_cast<std::size_t>(k)] += d;
            for (int f = 0; f < F; ++f) {
              const double xv = xh[static_cast<std::size_t>(f)];
              gw[static_cast<std::size_t>(k * F + f)] +=
                  d * (gam[static_cast<std::size_t>(h)][static_cast<std::size_t>(f)] * xv +
                       bet[static_cast<std::size_t>(h)][static_cast<std::size_t>(f)]);
              gg[static_cast<std::size_t>(f)] +=
                  d * w[static_cast<std::size_t>(h)][static_cast<std::size_t>(k * F + f)] * xv;
              gbe[static_cast<std::size_t>(f)] +=
                  d * w[static_cast<std::size_t>(h)][static_cast<std::size_t>(k * F + f)];
            }
          }
        }
        const auto sgd = [&](std::vector<double>& prm, std::vector<double>& mom,
                             const std::vector<double>& grd) {
          for (std::size_t i = 0; i < prm.size(); ++i) {
            mom[i] = cfg.probe_momentum * mom[i] + grd[i];
            prm[i] -= lr * mom[i];
          }
        };
        sgd(w[static_cast<std::size_t>(h)], mw[static_cast<std::size_t>(h)], gw);
        sgd(bias[static_cast<std::size_t>(h)], mb[static_cast<std::size_t>(h)], gb);
        sgd(gam[static_cast<std::size_t>(h)], mg[static_cast<std::size_t>(h)], gg);
        sgd(bet[static_cast<std::size_t>(h)], mbe[static_cast<std::size_t>(h)], gbe);
      }
    }
  }
  const auto oracle_eval = [&](const std::vector<int>& split, int h,
                               std::vector<int>* preds) {
    std::vector<int> y_true, y_pred;
    for (int idx : split) {
      const auto& s = data.scans[static_cast<std::size_t>(idx)];
      std::vector<double> avg(K, 0.0);
      for (const auto& crop : s.crops)
        for (int k = 0; k < K; ++k) {
          double acc = bias[static_cast<std::size_t>(h)][static_cast<std::size_t>(k)];
          for (int f = 0; f < F; ++f) {
            const double xh = (crop[static_cast<std::size_t>(f)] -
                               rmean[static_cast<std::size_t>(f)]) /
                              std::sqrt(rvar[static_cast<std::size_t>(f)] + 1e-5);
            acc += w[static_cast<std::size_t>(h)][static_cast<std::size_t>(k * F + f)] *
                   (gam[static_cast<std::size_t>(h)][static_cast<std::size_t>(f)] * xh +
                    bet[static_cast<std::size_t>(h)][static_cast<std::size_t>(f)]);
          }
          avg[static_cast<std::size_t>(k)] += acc;
        }
      y_true.push_back(s.label);
      y_pred.push_back(avg[1] > avg[0] ? 1 : 0);
    }
    if (preds != nullptr) *preds = y_pred;
    return balanced_accuracy(y_true, y_pred, K);
  };
  int best_head = 0;
  std::vector<double> val_accs;
  for (int h = 0; h < n_heads; ++h) {
    val_accs.push_back(oracle_eval(splits.val, h, nullptr));
    if (val_accs.back() > val_accs[static_cast<std::size_t>(best_head)]) best_head = h;
  }
  std::vector<int> oracle_preds;
  const double oracle_test = oracle_eval(splits.test, best_head, &oracle_preds);

  c.check(best_head == got.selected_lr_index, "selected learning rate matches");
  int disagreements = 0;
  for (std::size_t i = 0; i < oracle_preds.size(); ++i)
    if (oracle_preds[i] != got.test_predictions[i]) ++disagreements;
  c.check(disagreements == 0, std::to_string(disagreements) + " prediction disagreements");
  c.check(std::abs(oracle_test - got.test_balanced_accuracy) < 1e-12,
          "test balanced accuracy matches");
  for (int h = 0; h < n_heads; ++h)
    c.check(std::abs(val_accs[static_cast<std::size_t>(h)] -
                     got.val_accuracy_per_lr[static_cast<std::size_t>(h)]) < 1e-12,
            "val accuracy matches for lr index " + std::to_string(h));
  c.note("100% agreement on " + std::to_string(oracle_preds.size()) + " test scans");
  finish(9, "probe protocol matches the scalar-loop reimplementation", c);
}

TEST_CASE("criterion 10: bitwise determinism of pretraining") {
  Criterion c;
  const auto dir = temp_dir("crit10");
  RunConfig cfg = small_run_config("semantic", true);
  cfg.trainer.epochs = 2;  // 14 steps, full pipeline
  const DatasetManifest manifest =
      generate_synthetic(cfg.data.synth, cfg.seed, (dir / "data").string());

  const auto a = run_pretraining<double>(cfg, manifest, (dir / "a").string());
  const auto b = run_pretraining<double>(cfg, manifest, (dir / "b").string());
  c.check(file_bytes(a.final_checkpoint) == file_bytes(b.final_checkpoint),
          "checkpoints bitwise identical");
  c.check(file_bytes(a.metrics_path) == file_bytes(b.metrics_path),
          "metrics bitwise identical");
  c.check(!file_bytes(a.final_checkpoint).empty(), "non-empty checkpoint");
  finish(10, "two identically-seeded runs are bitwise identical", c);
}
