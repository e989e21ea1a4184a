#pragma once

#include <cstdint>
#include <iostream>
#include <string>

#include "braintok/binio.hpp"
#include "braintok/model.hpp"

namespace braintok {

inline constexpr std::uint32_t kCheckpointMagic = 0x4b435342;  // "BSCK"
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
struct TrainState {
  Architecture<S> arch;
  ParamSet<S> student;
  ParamSet<S> teacher;
  std::uint64_t step = 0;
  std::uint64_t total_steps = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

namespace detail {

template <typename S>
void write_tensor(BinWriter& w, const std::string& name, const Mat<S>& m) {
  w.put_string(name);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      w.put<double>(static_cast<double>(m(i, j)));
}

template <typename S>
void read_tensor_into(BinReader& r, const std::string& expected_name, Mat<S>& m) {
  const std::string name = r.get_string();
  if (name != expected_name)
    throw IoError("checkpoint tensor order mismatch: expected '" + expected_name +
                  "', found '" + name + "'");
  const auto rows = r.get<std::uint32_t>();
  const auto cols = r.get<std::uint32_t>();
  if (rows != static_cast<std::uint32_t>(m.rows()) ||
      cols != static_cast<std::uint32_t>(m.cols()))
    throw IoError("checkpoint tensor shape mismatch for '" + expected_name + "'");
  for (std::uint32_t i = 0; i < rows; ++i)
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = static_cast<S>(r.get<double>());
}

}  // namespace detail

// Named-tensor checkpoint covering student values, teacher values, optimizer
// moments, step counter, and seed. All randomness in training is a pure
// function of (seed, step, sample index), so no generator state is stored.
template <typename S>
void checkpoint_save(const TrainState<S>& state, const std::string& path) {
  BinWriter w(path);
  w.put<std::uint32_t>(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(state.config_hash);
  w.put<std::uint64_t>(state.seed);
  w.put<std::uint64_t>(state.step);
  w.put<std::uint64_t>(state.total_steps);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(state.student.size()));
  for (std::size_t i = 0; i < state.student.size(); ++i)
    detail::write_tensor(w, "student/" + state.student[i].name, state.student[i].value);
  for (std::size_t i = 0; i < state.teacher.size(); ++i)
    detail::write_tensor(w, "teacher/" + state.teacher[i].name, state.teacher[i].value);
  for (std::size_t i = 0; i < state.student.size(); ++i) {
    detail::write_tensor(w, "adam_m/" + state.student[i].name, state.student[i].adam_m);
    detail::write_tensor(w, "adam_v/" + state.student[i].name, state.student[i].adam_v);
  }
  w.close();
}

// Loads a checkpoint for the given architecture. A config-hash mismatch is an
// error unless allow_hash_mismatch is set, in which case a warning is printed.
template <typename S>
TrainState<S> checkpoint_load(const std::string& path, const Architecture<S>& arch,
                              const std::string& expected_hash,
                              bool allow_hash_mismatch = false) {
  BinReader r(path);
  if (r.get<std::uint32_t>() != kCheckpointMagic)
    throw IoError("not a checkpoint file (bad magic): " + path);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);

  TrainState<S> state;
  state.arch = arch;
  state.config_hash = r.get_string();
  if (state.config_hash != expected_hash) {
    std::cerr << "warning: checkpoint config hash " << state.config_hash
              << " does not match current config " << expected_hash << "\n";
    if (!allow_hash_mismatch)
      throw ConfigError(
          "config hash mismatch; pass the explicit override flag to load anyway");
  }
  state.seed = r.get<std::uint64_t>();
  state.step = r.get<std::uint64_t>();
  state.total_steps = r.get<std::uint64_t>();

  Rng init_rng(0);  // overwritten below
  state.arch.build_params(state.student, init_rng);
  state.teacher = state.student.clone_values();
  state.student.init_moments();

  const auto count = r.get<std::uint32_t>();
  if (count != static_cast<std::uint32_t>(state.student.size()))
    throw IoError("checkpoint parameter count mismatch: " + path);
  for (std::size_t i = 0; i < state.student.size(); ++i)
    detail::read_tensor_into(r, "student/" + state.student[i].name,
                             state.student[i].value);
  for (std::size_t i = 0; i < state.teacher.size(); ++i)
    detail::read_tensor_into(r, "teacher/" + state.teacher[i].name,
                             state.teacher[i].value);
  for (std::size_t i = 0; i < state.student.size(); ++i) {
    detail::read_tensor_into(r, "adam_m/" + state.student[i].name,
                             state.student[i].adam_m);
    detail::read_tensor_into(r, "adam_v/" + state.student[i].name,
                             state.student[i].adam_v);
  }
  return state;
}

}  // namespace braintok
