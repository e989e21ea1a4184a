// Command-line front end: synthetic data generation, preprocessing,
// self-distillation pretraining, linear probing, per-network importance, and
// run inspection. One JSON config drives every stage; flags carry only
// paths, seeds, and run-control switches.

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "braintok/braintok.hpp"

namespace fs = std::filesystem;
using namespace braintok;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

// Exclusive ownership of a run directory for the duration of a command.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw IoError("run directory is locked by another process: " + dir.string() +
                    " (remove " + path_.string() + " if stale)");
    const std::string pid = "pid " + std::to_string(static_cast<long>(::getpid())) + "\n";
    [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
    held_ = true;
  }
  ~RunLock() {
    if (held_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  bool held_ = false;
};

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string manifest_path;
  std::string checkpoint_path;
  std::string resume_path;
  std::string label = "class";
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> split_seed;
  std::optional<int> workers;
  bool force_config = false;
};

RunConfig load_run_config(const CommonArgs& args) {
  RunConfig cfg = load_config(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  if (args.workers) cfg.trainer.workers = *args.workers;
  return cfg;
}

std::vector<ScanTimeSeries> load_labeled_scans(const RunConfig& cfg,
                                               const DatasetManifest& manifest) {
  std::vector<ScanTimeSeries> scans;
  for (const auto& entry : manifest.scans) {
    ScanTimeSeries scan = load_scan(entry.path);
    scan.scan_id = entry.scan_id;
    scan.labels = entry.labels;
    scans.push_back(preprocess_scan(scan, cfg.data));
  }
  return scans;
}

std::vector<int> labels_of(const ProbeData& data) {
  std::vector<int> labels;
  for (const auto& s : data.scans) labels.push_back(s.label);
  return labels;
}

template <typename S>
TrainState<S> load_teacher_state(const RunConfig& cfg, const DatasetManifest& manifest,
                                 const CommonArgs& args) {
  const AtlasMapping atlas = load_atlas(manifest.atlas_path);
  auto arch = Architecture<S>::build(cfg.model, atlas);
  return checkpoint_load<S>(args.checkpoint_path, arch, config_hash(cfg),
                            args.force_config);
}

int cmd_generate(const CommonArgs& args) {
  const RunConfig cfg = load_run_config(args);
  const DatasetManifest manifest =
      generate_synthetic(cfg.data.synth, cfg.seed, args.out_dir);
  std::printf("wrote %zu scans, atlas, and manifest under %s\n", manifest.scans.size(),
              args.out_dir.c_str());
  return kExitOk;
}

int cmd_preprocess(const CommonArgs& args) {
  const RunConfig cfg = load_run_config(args);
  const DatasetManifest manifest = load_manifest(args.manifest_path);
  fs::create_directories(args.out_dir);

  DatasetManifest out = manifest;
  out.scans.clear();
  double out_dt = manifest.dt;
  for (const auto& entry : manifest.scans) {
    ScanTimeSeries scan = load_scan(entry.path);
    scan.scan_id = entry.scan_id;
    scan = preprocess_scan(scan, cfg.data);
    out_dt = scan.dt;
    const std::string path = (fs::path(args.out_dir) / (entry.scan_id + ".bstk")).string();
    write_scan(scan, path);
    out.scans.push_back({entry.scan_id, path, entry.labels});
  }
  out.dt = out_dt;
  const fs::path atlas_copy = fs::path(args.out_dir) / "atlas.json";
  if (fs::absolute(manifest.atlas_path) != fs::absolute(atlas_copy))
    fs::copy_file(manifest.atlas_path, atlas_copy, fs::copy_options::overwrite_existing);
  out.atlas_path = atlas_copy.string();
  write_manifest(out, (fs::path(args.out_dir) / "manifest.json").string());
  std::printf("preprocessed %zu scans into %s\n", out.scans.size(), args.out_dir.c_str());
  return kExitOk;
}

int cmd_pretrain(const CommonArgs& args) {
  const RunConfig cfg = load_run_config(args);
  const DatasetManifest manifest = load_manifest(args.manifest_path);
  RunLock lock(args.out_dir);
  const auto outcome = run_pretraining<double>(cfg, manifest, args.out_dir,
                                               args.resume_path, args.force_config);
  std::printf("trained %llu steps; final checkpoint %s\n",
              static_cast<unsigned long long>(outcome.steps_run),
              outcome.final_checkpoint.c_str());
  return kExitOk;
}

void write_probe_outputs(const ProbeResult& result, const EvalConfig& eval,
                         const std::string& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream sweep(fs::path(out_dir) / "probe_sweep.csv");
    sweep << "lr,val_balanced_accuracy\n";
    for (std::size_t i = 0; i < result.val_accuracy_per_lr.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g", eval.probe_lr_sweep[i],
                    result.val_accuracy_per_lr[i]);
      sweep << buf << "\n";
    }
  }
  {
    std::ofstream res(fs::path(out_dir) / "probe_result.csv");
    res << "selected_lr,test_balanced_accuracy,n_classes\n";
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%d", result.selected_lr,
                  result.test_balanced_accuracy, result.n_classes);
    res << buf << "\n";
  }
  {
    std::ofstream conf(fs::path(out_dir) / "probe_confusion.csv");
    for (const auto& row : result.confusion) {
      for (std::size_t j = 0; j < row.size(); ++j)
        conf << row[j] << (j + 1 < row.size() ? "," : "");
      conf << "\n";
    }
  }
}

int cmd_probe(const CommonArgs& args) {
  const RunConfig cfg = load_run_config(args);
  const DatasetManifest manifest = load_manifest(args.manifest_path);
  auto state = load_teacher_state<double>(cfg, manifest, args);
  const auto scans = load_labeled_scans(cfg, manifest);

  std::vector<std::vector<FeatureVector>> features;
  std::vector<FeatureVector> flat;
  for (const auto& s : scans) {
    features.push_back(extract_features(s, state.teacher, state.arch, cfg.eval.n_crops));
    flat.insert(flat.end(), features.back().begin(), features.back().end());
  }
  fs::create_directories(args.out_dir);
  write_features(flat, (fs::path(args.out_dir) / "features.bsft").string());

  const ProbeData data = make_probe_data(scans, features, args.label);
  const std::uint64_t split_seed = args.split_seed.value_or(cfg.seed);
  const auto splits = stratified_split(labels_of(data), cfg.eval.split_train,
                                       cfg.eval.split_val, cfg.eval.split_test, split_seed);
  const ProbeResult result = linear_probe(data, splits, cfg.eval, split_seed);
  write_probe_outputs(result, cfg.eval, args.out_dir);
  std::printf("probe on '%s': test balanced accuracy %.4f (lr %g)\n", args.label.c_str(),
              result.test_balanced_accuracy, result.selected_lr);
  return kExitOk;
}

int cmd_importance(const CommonArgs& args) {
  const RunConfig cfg = load_run_config(args);
  const DatasetManifest manifest = load_manifest(args.manifest_path);
  auto state = load_teacher_state<double>(cfg, manifest, args);
  const auto scans = load_labeled_scans(cfg, manifest);
  const std::uint64_t split_seed = args.split_seed.value_or(cfg.seed);
  const auto scores = network_importance(scans, state.teacher, state.arch, cfg.eval,
                                         args.label, split_seed);
  fs::create_directories(args.out_dir);
  std::ofstream out(fs::path(args.out_dir) / "importance.csv");
  out << "network_id,network_name,test_balanced_accuracy\n";
  for (std::size_t n = 0; n < scores.size(); ++n) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", scores[n]);
    out << n << "," << state.arch.atlas.network_names[n] << "," << buf << "\n";
  }
  std::printf("importance scores for %zu networks written to %s\n", scores.size(),
              args.out_dir.c_str());
  return kExitOk;
}

int cmd_inspect(const CommonArgs& args) {
  const fs::path metrics_path = fs::path(args.run_dir) / "metrics.csv";
  std::ifstream in(metrics_path);
  if (!in) throw IoError("no metrics.csv under " + args.run_dir);
  std::string header;
  std::getline(in, header);
  if (header != kMetricsHeader)
    throw IoError("unexpected metrics header in " + metrics_path.string());

  const fs::path out_dir = args.out_dir.empty() ? fs::path(args.run_dir)
                                                : fs::path(args.out_dir);
  fs::create_directories(out_dir);
  std::ofstream loss_csv(out_dir / "inspect_loss.csv");
  std::ofstream cosine_csv(out_dir / "inspect_token_cosine.csv");
  loss_csv << "step,total,l_cls,l_tok,l_ttr\n";
  cosine_csv << "step,token_cosine\n";

  std::string line;
  std::size_t rows = 0;
  std::string first_row, last_row;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 11) throw IoError("malformed metrics row: " + line);
    loss_csv << fields[0] << "," << fields[9] << "," << fields[5] << "," << fields[6]
             << "," << fields[7] << "\n";
    cosine_csv << fields[0] << "," << fields[10] << "\n";
    if (rows == 0) first_row = line;
    last_row = line;
    ++rows;
  }
  std::printf("%zu steps logged\n", rows);
  if (rows > 0) {
    std::printf("first: %s\n", first_row.c_str());
    std::printf("last:  %s\n", last_row.c_str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-distillation pretraining for parcellated fMRI time series"};
  app.require_subcommand(1);
  CommonArgs args;

  const auto add_common = [&](CLI::App* cmd, bool needs_out) {
    cmd->add_option("--config", args.config_path, "JSON run configuration")->required();
    if (needs_out) cmd->add_option("--out", args.out_dir, "output directory")->required();
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--workers", args.workers, "worker threads for batch preparation");
  };

  auto* generate = app.add_subcommand("generate", "write a synthetic labeled dataset");
  add_common(generate, true);

  auto* preprocess = app.add_subcommand("preprocess", "apply the preprocessing pipeline");
  add_common(preprocess, true);
  preprocess->add_option("--manifest", args.manifest_path, "input manifest")->required();

  auto* pretrain = app.add_subcommand("pretrain", "run self-distillation pretraining");
  add_common(pretrain, true);
  pretrain->add_option("--manifest", args.manifest_path, "dataset manifest")->required();
  pretrain->add_option("--resume", args.resume_path, "checkpoint to resume from");
  pretrain->add_flag("--force-config", args.force_config,
                     "load checkpoints whose config hash differs");

  auto* probe = app.add_subcommand("probe", "linear probing on frozen teacher features");
  add_common(probe, true);
  probe->add_option("--manifest", args.manifest_path, "labeled manifest")->required();
  probe->add_option("--checkpoint", args.checkpoint_path, "pretrained checkpoint")
      ->required();
  probe->add_option("--label", args.label, "label name in the manifest");
  probe->add_option("--split-seed", args.split_seed, "split seed (default: config seed)");
  probe->add_flag("--force-config", args.force_config,
                  "load checkpoints whose config hash differs");

  auto* importance = app.add_subcommand("importance", "per-network probing importance");
  add_common(importance, true);
  importance->add_option("--manifest", args.manifest_path, "labeled manifest")->required();
  importance->add_option("--checkpoint", args.checkpoint_path, "pretrained checkpoint")
      ->required();
  importance->add_option("--label", args.label, "label name in the manifest");
  importance->add_option("--split-seed", args.split_seed,
                         "split seed (default: config seed)");
  importance->add_flag("--force-config", args.force_config,
                       "load checkpoints whose config hash differs");

  auto* inspect = app.add_subcommand("inspect", "summarize a run's metrics");
  inspect->add_option("--run", args.run_dir, "run directory with metrics.csv")->required();
  inspect->add_option("--out", args.out_dir, "where to write summary CSVs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (generate->parsed()) return cmd_generate(args);
    if (preprocess->parsed()) return cmd_preprocess(args);
    if (pretrain->parsed()) return cmd_pretrain(args);
    if (probe->parsed()) return cmd_probe(args);
    if (importance->parsed()) return cmd_importance(args);
    if (inspect->parsed()) return cmd_inspect(args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitConfig;
}
