#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "braintok/errors.hpp"
#include "braintok/model.hpp"
#include "braintok/objective.hpp"
#include "braintok/schedules.hpp"
#include "braintok/synthetic.hpp"
#include "braintok/views.hpp"

namespace braintok {

struct DataConfig {
  std::vector<std::string> pipeline = {"bandpass", "resample", "zscore"};
  double bandpass_lo = 0.01;
  double bandpass_hi = 0.1;
  double target_dt = 2.0;
  SynthConfig synth;
};

struct ViewsConfig {
  int t_crop = 100;
  AugParams aug;
  std::string augmentation = "corruption";  // "corruption" | "physio" | "none"
  std::string physio_kind = "band_noise";
  std::string physio_intensity = "light";
  std::string mask_strategy = "slice";
  double mask_ratio_lo = 0.65;
  double mask_ratio_hi = 0.85;
};

struct TrainerConfig {
  ScheduleConfig sched;
  int epochs = 100;
  int batch_size = 512;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  int checkpoint_every_epochs = 0;  // 0 = final checkpoint only
  int pretraining_subset = 0;       // use first k manifest scans; 0 = all
  int workers = 1;
};

struct EvalConfig {
  int n_crops = 8;
  int probe_epochs = 50;
  double probe_momentum = 0.9;
  std::vector<double> probe_lr_sweep = {0.03, 0.01, 0.003, 0.001, 0.0003, 0.0001};
  double split_train = 0.6;
  double split_val = 0.2;
  double split_test = 0.2;
  std::string single_patch_position = "first";  // "first" | "last" | "random"
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  ViewsConfig views;
  ModelConfig model;  // covers the tokenizer and encoder sections
  ObjectiveConfig objective;
  TrainerConfig trainer;
  EvalConfig eval;
};

namespace detail {

// Wraps one JSON object; get() records consumed keys and finish() rejects
// anything left over, so typos in config files fail loudly.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + path_ + "." + key + "': " + e.what());
    }
  }

  const nlohmann::json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key))
        throw ConfigError("unknown config key '" + path_ + "." + key + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  for (const char* section :
       {"seed", "data", "views", "tokenizer", "encoder", "objective", "trainer", "eval"})
    if (!j.contains(section))
      throw ConfigError(std::string("missing config section: ") + section);

  detail::Section root(j, "");
  root.get("seed", cfg.seed);

  {
    detail::Section s(*root.sub("data"), "data");
    s.get("pipeline", cfg.data.pipeline);
    s.get("bandpass_lo", cfg.data.bandpass_lo);
    s.get("bandpass_hi", cfg.data.bandpass_hi);
    s.get("target_dt", cfg.data.target_dt);
    if (const auto* sj = s.sub("synth")) {
      detail::Section sy(*sj, "data.synth");
      sy.get("n_scans", cfg.data.synth.n_scans);
      sy.get("n_rois", cfg.data.synth.n_rois);
      sy.get("n_networks", cfg.data.synth.n_networks);
      sy.get("n_timepoints", cfg.data.synth.n_timepoints);
      sy.get("dt", cfg.data.synth.dt);
      sy.get("n_classes", cfg.data.synth.n_classes);
      sy.get("effect_size", cfg.data.synth.effect_size);
      sy.get("designated", cfg.data.synth.designated);
      sy.get("coupling_mode", cfg.data.synth.coupling_mode);
      sy.get("roi_coupling_jitter", cfg.data.synth.roi_coupling_jitter);
      sy.get("noise_std", cfg.data.synth.noise_std);
      sy.finish();
    }
    s.finish();
  }
  {
    detail::Section s(*root.sub("views"), "views");
    s.get("t_crop", cfg.views.t_crop);
    s.get("tau_c_max", cfg.views.aug.tau_c_max);
    s.get("tau_t_max", cfg.views.aug.tau_t_max);
    s.get("tau_sigma", cfg.views.aug.tau_sigma);
    s.get("tau_s_min", cfg.views.aug.tau_s_min);
    s.get("tau_s_max", cfg.views.aug.tau_s_max);
    s.get("augmentation", cfg.views.augmentation);
    s.get("physio_kind", cfg.views.physio_kind);
    s.get("physio_intensity", cfg.views.physio_intensity);
    s.get("mask_strategy", cfg.views.mask_strategy);
    s.get("mask_ratio_lo", cfg.views.mask_ratio_lo);
    s.get("mask_ratio_hi", cfg.views.mask_ratio_hi);
    s.finish();
  }
  {
    detail::Section s(*root.sub("tokenizer"), "tokenizer");
    s.get("type", cfg.model.tokenizer_type);
    s.get("patch_len", cfg.model.patch_len);
    s.get("embed_dim", cfg.model.embed_dim);
    s.get("dense_kernel_len", cfg.model.dense_kernel_len);
    s.get("base_kernel_len", cfg.model.base_kernel_len);
    s.get("kernel_scales", cfg.model.kernel_scales);
    s.get("feedthrough_init", cfg.model.feedthrough_init);
    s.get("structured_init_std", cfg.model.structured_init_std);
    s.finish();
  }
  {
    detail::Section s(*root.sub("encoder"), "encoder");
    s.get("depth", cfg.model.depth);
    s.get("heads", cfg.model.heads);
    s.get("mlp_ratio", cfg.model.mlp_ratio);
    s.get("layer_scale_init", cfg.model.layer_scale_init);
    s.get("proj_hidden", cfg.model.proj_hidden);
    s.get("proj_dim", cfg.model.proj_dim);
    s.finish();
  }
  {
    detail::Section s(*root.sub("objective"), "objective");
    s.get("lambda_tok", cfg.objective.lambda_tok);
    s.get("lambda_ttr", cfg.objective.lambda_ttr);
    s.get("ttr_decay_fraction", cfg.objective.ttr_decay_fraction);
    s.get("epsilon", cfg.objective.epsilon);
    s.get("normalize_token_loss", cfg.objective.normalize_token_loss);
    s.finish();
  }
  {
    detail::Section s(*root.sub("trainer"), "trainer");
    s.get("base_lr", cfg.trainer.sched.base_lr);
    s.get("warmup_fraction", cfg.trainer.sched.warmup_fraction);
    s.get("weight_decay_start", cfg.trainer.sched.weight_decay_start);
    s.get("weight_decay_end", cfg.trainer.sched.weight_decay_end);
    s.get("teacher_momentum_start", cfg.trainer.sched.teacher_momentum_start);
    s.get("teacher_momentum_end", cfg.trainer.sched.teacher_momentum_end);
    s.get("epochs", cfg.trainer.epochs);
    s.get("batch_size", cfg.trainer.batch_size);
    s.get("beta1", cfg.trainer.beta1);
    s.get("beta2", cfg.trainer.beta2);
    s.get("adam_eps", cfg.trainer.adam_eps);
    s.get("grad_clip", cfg.trainer.grad_clip);
    s.get("checkpoint_every_epochs", cfg.trainer.checkpoint_every_epochs);
    s.get("pretraining_subset", cfg.trainer.pretraining_subset);
    s.get("workers", cfg.trainer.workers);
    s.finish();
  }
  {
    detail::Section s(*root.sub("eval"), "eval");
    s.get("n_crops", cfg.eval.n_crops);
    s.get("probe_epochs", cfg.eval.probe_epochs);
    s.get("probe_momentum", cfg.eval.probe_momentum);
    s.get("probe_lr_sweep", cfg.eval.probe_lr_sweep);
    s.get("split_train", cfg.eval.split_train);
    s.get("split_val", cfg.eval.split_val);
    s.get("split_test", cfg.eval.split_test);
    s.get("single_patch_position", cfg.eval.single_patch_position);
    s.finish();
  }
  root.finish();

  cfg.model.t_crop = cfg.views.t_crop;
  cfg.model.validate();
  cfg.objective.validate();
  cfg.trainer.sched.validate();
  cfg.views.aug.validate();
  mask_strategy_from_string(cfg.views.mask_strategy);
  return cfg;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["data"] = {
      {"pipeline", cfg.data.pipeline},
      {"bandpass_lo", cfg.data.bandpass_lo},
      {"bandpass_hi", cfg.data.bandpass_hi},
      {"target_dt", cfg.data.target_dt},
      {"synth",
       {{"n_scans", cfg.data.synth.n_scans},
        {"n_rois", cfg.data.synth.n_rois},
        {"n_networks", cfg.data.synth.n_networks},
        {"n_timepoints", cfg.data.synth.n_timepoints},
        {"dt", cfg.data.synth.dt},
        {"n_classes", cfg.data.synth.n_classes},
        {"effect_size", cfg.data.synth.effect_size},
        {"designated", cfg.data.synth.designated},
        {"coupling_mode", cfg.data.synth.coupling_mode},
        {"roi_coupling_jitter", cfg.data.synth.roi_coupling_jitter},
        {"noise_std", cfg.data.synth.noise_std}}}};
  j["views"] = {{"t_crop", cfg.views.t_crop},
                {"tau_c_max", cfg.views.aug.tau_c_max},
                {"tau_t_max", cfg.views.aug.tau_t_max},
                {"tau_sigma", cfg.views.aug.tau_sigma},
                {"tau_s_min", cfg.views.aug.tau_s_min},
                {"tau_s_max", cfg.views.aug.tau_s_max},
                {"augmentation", cfg.views.augmentation},
                {"physio_kind", cfg.views.physio_kind},
                {"physio_intensity", cfg.views.physio_intensity},
                {"mask_strategy", cfg.views.mask_strategy},
                {"mask_ratio_lo", cfg.views.mask_ratio_lo},
                {"mask_ratio_hi", cfg.views.mask_ratio_hi}};
  j["tokenizer"] = {{"type", cfg.model.tokenizer_type},
                    {"patch_len", cfg.model.patch_len},
                    {"embed_dim", cfg.model.embed_dim},
                    {"dense_kernel_len", cfg.model.dense_kernel_len},
                    {"base_kernel_len", cfg.model.base_kernel_len},
                    {"kernel_scales", cfg.model.kernel_scales},
                    {"feedthrough_init", cfg.model.feedthrough_init},
                    {"structured_init_std", cfg.model.structured_init_std}};
  j["encoder"] = {{"depth", cfg.model.depth},
                  {"heads", cfg.model.heads},
                  {"mlp_ratio", cfg.model.mlp_ratio},
                  {"layer_scale_init", cfg.model.layer_scale_init},
                  {"proj_hidden", cfg.model.proj_hidden},
                  {"proj_dim", cfg.model.proj_dim}};
  j["objective"] = {{"lambda_tok", cfg.objective.lambda_tok},
                    {"lambda_ttr", cfg.objective.lambda_ttr},
                    {"ttr_decay_fraction", cfg.objective.ttr_decay_fraction},
                    {"epsilon", cfg.objective.epsilon},
                    {"normalize_token_loss", cfg.objective.normalize_token_loss}};
  j["trainer"] = {{"base_lr", cfg.trainer.sched.base_lr},
                  {"warmup_fraction", cfg.trainer.sched.warmup_fraction},
                  {"weight_decay_start", cfg.trainer.sched.weight_decay_start},
                  {"weight_decay_end", cfg.trainer.sched.weight_decay_end},
                  {"teacher_momentum_start", cfg.trainer.sched.teacher_momentum_start},
                  {"teacher_momentum_end", cfg.trainer.sched.teacher_momentum_end},
                  {"epochs", cfg.trainer.epochs},
                  {"batch_size", cfg.trainer.batch_size},
                  {"beta1", cfg.trainer.beta1},
                  {"beta2", cfg.trainer.beta2},
                  {"adam_eps", cfg.trainer.adam_eps},
                  {"grad_clip", cfg.trainer.grad_clip},
                  {"checkpoint_every_epochs", cfg.trainer.checkpoint_every_epochs},
                  {"pretraining_subset", cfg.trainer.pretraining_subset},
                  {"workers", cfg.trainer.workers}};
  j["eval"] = {{"n_crops", cfg.eval.n_crops},
               {"probe_epochs", cfg.eval.probe_epochs},
               {"probe_momentum", cfg.eval.probe_momentum},
               {"probe_lr_sweep", cfg.eval.probe_lr_sweep},
               {"split_train", cfg.eval.split_train},
               {"split_val", cfg.eval.split_val},
               {"split_test", cfg.eval.split_test},
               {"single_patch_position", cfg.eval.single_patch_position}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// FNV-1a over the canonical re-serialization, so formatting and omitted
// defaults do not change the hash.
inline std::string config_hash(const RunConfig& cfg) {
  const std::string dump = config_to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// Applies the configured preprocessing pipeline in order.
inline ScanTimeSeries preprocess_scan(const ScanTimeSeries& scan, const DataConfig& cfg) {
  ScanTimeSeries out = scan;
  for (const std::string& stage : cfg.pipeline) {
    if (stage == "bandpass") {
      out = bandpass(out, cfg.bandpass_lo, cfg.bandpass_hi);
    } else if (stage == "resample") {
      out = resample(out, cfg.target_dt);
    } else if (stage == "zscore") {
      out = zscore_per_roi(out);
    } else {
      throw ConfigError("unknown preprocessing stage: " + stage);
    }
  }
  return out;
}

}  // namespace braintok
