#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "braintok/errors.hpp"
#include "braintok/tape.hpp"

namespace braintok {

// Named parameter tensors in a stable creation order. The order defines how
// optimizer updates, EMA sweeps, and checkpoints iterate, so student and
// teacher stores built from the same recipe stay aligned index-for-index.
template <typename S>
class ParamSet {
 public:
  ParamTensor<S>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                      bool decay) {
    if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
    auto pt = std::make_unique<ParamTensor<S>>();
    pt->name = name;
    pt->value = Mat<S>::Zero(rows, cols);
    pt->grad = Mat<S>::Zero(rows, cols);
    pt->decay = decay;
    index_[name] = items_.size();
    items_.push_back(std::move(pt));
    return *items_.back();
  }

  ParamTensor<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *items_[it->second];
  }
  const ParamTensor<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *items_[it->second];
  }

  std::size_t size() const { return items_.size(); }
  ParamTensor<S>& operator[](std::size_t i) { return *items_[i]; }
  const ParamTensor<S>& operator[](std::size_t i) const { return *items_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) p->grad.setZero();
  }

  void init_moments() {
    for (auto& p : items_) {
      p->adam_m = Mat<S>::Zero(p->value.rows(), p->value.cols());
      p->adam_v = Mat<S>::Zero(p->value.rows(), p->value.cols());
    }
  }

  // Deep copy of values only (the teacher carries no optimizer state).
  ParamSet clone_values() const {
    ParamSet out;
    for (const auto& p : items_) {
      auto& q = out.add(p->name, p->value.rows(), p->value.cols(), p->decay);
      q.value = p->value;
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<ParamTensor<S>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Binds parameters to tape nodes, one node per parameter per tape.
template <typename S>
class Binder {
 public:
  Binder(Tape<S>& tape, ParamSet<S>& params) : tape_(tape), params_(params) {}

  typename Tape<S>::Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    auto var = tape_.param(params_.at(name));
    cache_[name] = var;
    return var;
  }

  Tape<S>& tape() { return tape_; }
  ParamSet<S>& params() { return params_; }

 private:
  Tape<S>& tape_;
  ParamSet<S>& params_;
  std::unordered_map<std::string, typename Tape<S>::Var> cache_;
};

}  // namespace braintok
