#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "braintok/trainer.hpp"
#include "test_util.hpp"

using namespace braintok;
using testutil::random_mat;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("braintok_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig toy_config() {
  RunConfig cfg;
  cfg.seed = 17;
  cfg.views.t_crop = 8;
  cfg.views.mask_ratio_lo = 0.3;
  cfg.views.mask_ratio_hi = 0.6;
  cfg.model.patch_len = 4;
  cfg.model.t_crop = 8;
  cfg.model.embed_dim = 16;
  cfg.model.depth = 2;
  cfg.model.heads = 2;
  cfg.model.proj_hidden = 8;
  cfg.model.proj_dim = 4;
  cfg.trainer.batch_size = 4;
  cfg.trainer.epochs = 2;
  cfg.trainer.sched.base_lr = 1e-3;
  return cfg;
}

std::vector<ScanTimeSeries> toy_scans(int n, std::uint64_t seed, Eigen::Index C = 6,
                                      Eigen::Index T = 24) {
  std::vector<ScanTimeSeries> scans;
  for (int i = 0; i < n; ++i) {
    ScanTimeSeries s;
    Rng rng(seed + static_cast<std::uint64_t>(i));
    s.data = random_mat<double>(C, T, rng);
    s.dt = 2.0;
    s.scan_id = "scan" + std::to_string(i);
    s.labels["class"] = i % 2;
    scans.push_back(std::move(s));
  }
  return scans;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

template <typename S>
bool params_equal(const ParamSet<S>& a, const ParamSet<S>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].value != b[i].value) return false;
  return true;
}

}  // namespace

TEST_CASE("ema_update matches the convex combination elementwise") {
  Rng rng(1);
  for (double alpha : {0.0, 0.5, 0.99, 1.0}) {
    ParamSet<double> student, teacher;
    auto& sw = student.add("w", 5, 7, true);
    auto& tw = teacher.add("w", 5, 7, true);
    sw.value = random_mat<double>(5, 7, rng);
    tw.value = random_mat<double>(5, 7, rng);
    const Mat<double> expect = alpha * tw.value + (1.0 - alpha) * sw.value;
    ema_update(teacher, student, alpha);
    REQUIRE((tw.value - expect).cwiseAbs().maxCoeff() < 1e-7);
    if (alpha == 1.0) REQUIRE((tw.value - expect).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("shape mismatch") {
    ParamSet<double> a, b;
    a.add("w", 2, 2, true);
    b.add("w", 2, 3, true);
    REQUIRE_THROWS_AS(ema_update(b, a, 0.5), ConfigError);
  }
}

TEST_CASE("schedule endpoints and monotonicity") {
  ScheduleConfig sched;  // paper defaults
  ObjectiveConfig obj;
  const double S = 100000.0;

  const auto at = [&](double s) { return schedules_at(s, S, sched, obj); };
  REQUIRE(at(0).lr == 0.0);
  REQUIRE(at(0.03 * S).lr == Catch::Approx(7e-4).epsilon(1e-12));
  REQUIRE(at(S).lr == Catch::Approx(0.0).margin(1e-20));
  REQUIRE(at(0).wd == Catch::Approx(0.05).epsilon(1e-12));
  REQUIRE(at(S).wd == Catch::Approx(0.3).epsilon(1e-12));
  REQUIRE(at(0).alpha == Catch::Approx(0.99).epsilon(1e-12));
  REQUIRE(at(S).alpha == Catch::Approx(0.9999).epsilon(1e-12));
  REQUIRE(at(0).ttr_w == 0.5);
  REQUIRE(at(0.05 * S).ttr_w == 0.0);

  double prev_wd = -1.0, prev_alpha = -1.0;
  for (double s = 0; s <= S; s += S / 500.0) {
    const auto v = at(s);
    REQUIRE(v.wd >= prev_wd);
    REQUIRE(v.alpha >= prev_alpha);
    prev_wd = v.wd;
    prev_alpha = v.alpha;
  }
}

TEST_CASE("train_step determinism and teacher stop-gradient") {
  RunConfig cfg = toy_config();
  const AtlasMapping atlas = even_atlas(6, 3);
  const auto scans = toy_scans(4, 5);
  std::vector<const ScanTimeSeries*> batch;
  for (const auto& s : scans) batch.push_back(&s);

  auto state1 = init_train_state<double>(cfg, atlas);
  state1.total_steps = 10;
  auto state2 = init_train_state<double>(cfg, atlas);
  state2.total_steps = 10;
  REQUIRE(params_equal(state1.student, state2.student));

  const auto m1 = train_step(state1, batch, cfg.views, cfg.objective, cfg.trainer);
  TrainerConfig two_workers = cfg.trainer;
  two_workers.workers = 2;
  const auto m2 = train_step(state2, batch, cfg.views, cfg.objective, two_workers);
  REQUIRE(m1.loss.total == m2.loss.total);
  REQUIRE(m1.token_cosine == m2.token_cosine);
  REQUIRE(params_equal(state1.student, state2.student));
  REQUIRE(params_equal(state1.teacher, state2.teacher));

  SECTION("teacher parameters never accumulate gradients") {
    for (std::size_t i = 0; i < state1.teacher.size(); ++i)
      REQUIRE(state1.teacher[i].grad.cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("token_cosine stays in range") {
    REQUIRE(m1.token_cosine >= -1.0);
    REQUIRE(m1.token_cosine <= 1.0);
  }

  SECTION("losses are recorded and finite") {
    REQUIRE(std::isfinite(m1.loss.total));
    REQUIRE(m1.loss.ttr_weight_used == 0.5);  // step 0 of the decay
  }
}

TEST_CASE("zero learning rate freezes the student while the teacher tracks it") {
  RunConfig cfg = toy_config();
  cfg.trainer.sched.base_lr = 0.0;
  cfg.trainer.sched.teacher_momentum_start = 0.9;
  cfg.trainer.sched.teacher_momentum_end = 0.9;
  const AtlasMapping atlas = even_atlas(6, 3);
  const auto scans = toy_scans(4, 6);
  std::vector<const ScanTimeSeries*> batch;
  for (const auto& s : scans) batch.push_back(&s);

  auto state = init_train_state<double>(cfg, atlas);
  state.total_steps = 20;
  // Separate the teacher from the student so the EMA pull is visible.
  for (std::size_t i = 0; i < state.teacher.size(); ++i)
    state.teacher[i].value.array() += 0.05;

  const auto dist = [&]() {
    double d = 0;
    for (std::size_t i = 0; i < state.teacher.size(); ++i)
      d += (state.teacher[i].value - state.student[i].value).squaredNorm();
    return std::sqrt(d);
  };

  const ParamSet<double> student_before = state.student.clone_values();
  double prev = dist();
  for (int s = 0; s < 3; ++s) {
    train_step(state, batch, cfg.views, cfg.objective, cfg.trainer);
    REQUIRE(params_equal(state.student, student_before));  // lr = 0
    const double now = dist();
    REQUIRE(now < prev);  // alpha < 1 pulls the teacher toward the student
    prev = now;
  }
}

TEST_CASE("short training run decreases the loss on toy data") {
  RunConfig cfg = toy_config();
  cfg.trainer.sched.base_lr = 3e-3;
  cfg.trainer.sched.warmup_fraction = 0.1;
  const AtlasMapping atlas = even_atlas(6, 3);
  const auto scans = toy_scans(8, 7);

  auto state = init_train_state<double>(cfg, atlas);
  state.total_steps = 50;
  Rng batch_rng(9);
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 50; ++s) {
    std::vector<const ScanTimeSeries*> batch;
    for (int i = 0; i < 4; ++i)
      batch.push_back(&scans[batch_rng.uniform_int(scans.size())]);
    const auto m = train_step(state, batch, cfg.views, cfg.objective, cfg.trainer);
    if (s == 0) first = m.loss.total;
    if (s == 49) last = m.loss.total;
  }
  REQUIRE(last < first);
}

TEST_CASE("checkpoint round trip and hash checking") {
  const auto dir = temp_dir("ckpt");
  RunConfig cfg = toy_config();
  const AtlasMapping atlas = even_atlas(6, 3);
  auto state = init_train_state<double>(cfg, atlas);
  state.total_steps = 10;
  state.step = 3;

  const std::string p1 = (dir / "a.bsck").string();
  const std::string p2 = (dir / "b.bsck").string();
  checkpoint_save(state, p1);
  auto loaded = checkpoint_load<double>(p1, state.arch, state.config_hash);
  REQUIRE(loaded.step == 3);
  REQUIRE(loaded.total_steps == 10);
  REQUIRE(loaded.seed == state.seed);
  REQUIRE(params_equal(loaded.student, state.student));
  REQUIRE(params_equal(loaded.teacher, state.teacher));
  checkpoint_save(loaded, p2);
  REQUIRE(file_bytes(p1) == file_bytes(p2));

  SECTION("hash mismatch requires the override") {
    REQUIRE_THROWS_AS(checkpoint_load<double>(p1, state.arch, "deadbeef"), ConfigError);
    auto forced = checkpoint_load<double>(p1, state.arch, "deadbeef", true);
    REQUIRE(params_equal(forced.student, state.student));
  }

  SECTION("corrupt file is rejected") {
    const std::string bad = (dir / "bad.bsck").string();
    std::ofstream out(bad, std::ios::binary);
    out << "garbagegarbagegarbage";
    out.close();
    REQUIRE_THROWS_AS(checkpoint_load<double>(bad, state.arch, state.config_hash), IoError);
  }
}

TEST_CASE("full toy run: determinism and resume equivalence") {
  RunConfig cfg = toy_config();
  cfg.trainer.checkpoint_every_epochs = 1;
  const auto data_dir = temp_dir("rundata");

  // Write a tiny dataset + manifest.
  const AtlasMapping atlas = even_atlas(6, 3);
  const std::string atlas_path = (data_dir / "atlas.json").string();
  write_atlas(atlas, atlas_path);
  DatasetManifest manifest;
  manifest.dt = 2.0;
  manifest.n_rois = 6;
  manifest.atlas_path = atlas_path;
  for (const auto& s : toy_scans(8, 21)) {
    const std::string p = (data_dir / (s.scan_id + ".bstk")).string();
    write_scan(s, p);
    manifest.scans.push_back({s.scan_id, p, s.labels});
  }
  cfg.data.pipeline = {"zscore"};  // skip bandpass/resample for speed

  const auto dir_a = temp_dir("runA");
  const auto dir_b = temp_dir("runB");
  const auto dir_c = temp_dir("runC");

  const auto out_a = run_pretraining<double>(cfg, manifest, dir_a.string());
  const auto out_b = run_pretraining<double>(cfg, manifest, dir_b.string());
  REQUIRE(out_a.steps_run == 4);  // 8 scans / batch 4 * 2 epochs

  SECTION("two identical runs are bitwise identical") {
    REQUIRE(file_bytes(out_a.final_checkpoint) == file_bytes(out_b.final_checkpoint));
    REQUIRE(file_bytes(out_a.metrics_path) == file_bytes(out_b.metrics_path));
  }

  SECTION("resuming from the epoch-1 checkpoint reproduces the run bitwise") {
    const std::string mid = (dir_a / "checkpoint_epoch_1.bsck").string();
    REQUIRE(fs::exists(mid));
    const auto out_c = run_pretraining<double>(cfg, manifest, dir_c.string(), mid);
    REQUIRE(file_bytes(out_c.final_checkpoint) == file_bytes(out_a.final_checkpoint));
    // The resumed metrics cover steps 2..3; they must match the tail of the
    // uninterrupted run's rows exactly.
    std::istringstream a(file_bytes(out_a.metrics_path));
    std::istringstream c(file_bytes(out_c.metrics_path));
    std::vector<std::string> rows_a, rows_c;
    std::string line;
    while (std::getline(a, line)) rows_a.push_back(line);
    while (std::getline(c, line)) rows_c.push_back(line);
    REQUIRE(rows_a.size() == 5);  // header + 4 steps
    REQUIRE(rows_c.size() == 3);  // header + 2 resumed steps
    REQUIRE(rows_c[0] == rows_a[0]);
    REQUIRE(rows_c[1] == rows_a[3]);
    REQUIRE(rows_c[2] == rows_a[4]);
  }

  SECTION("metrics row count equals steps_per_epoch * epochs") {
    std::istringstream a(file_bytes(out_a.metrics_path));
    std::string line;
    int rows = 0;
    while (std::getline(a, line)) ++rows;
    REQUIRE(rows == 1 + 4);
  }
}
