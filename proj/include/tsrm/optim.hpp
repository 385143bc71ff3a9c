#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tsrm/tensor.hpp"

namespace tsrm {

/// A named trainable tensor. Frozen parameters are excluded from the graph
/// (requires_grad is off) and never touched by the optimizer.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> tensor;
  bool frozen = false;
};

/// Ordered, name-unique parameter collection.
template <typename Scalar>
class ParameterStore {
 public:
  Tensor<Scalar> add(const std::string& name, Shape shape,
                     Buffer<Scalar> init) {
    require(index_.find(name) == index_.end(), ErrorKind::Internal,
            "duplicate parameter name '" + name + "'");
    auto t = Tensor<Scalar>::from(std::move(shape), std::move(init), true);
    index_[name] = params_.size();
    params_.push_back({name, t, false});
    return t;
  }

  /// Replace the tensor stored under `name` (shape may change). Existing
  /// handles to the old tensor are not updated.
  Tensor<Scalar> replace(const std::string& name, Shape shape,
                         Buffer<Scalar> init) {
    auto& p = at(name);
    p.tensor = Tensor<Scalar>::from(std::move(shape), std::move(init),
                                    !p.frozen);
    return p.tensor;
  }

  Parameter<Scalar>& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::Internal,
            "unknown parameter '" + name + "'");
    return params_[it->second];
  }
  const Parameter<Scalar>& at(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->at(name);
  }
  bool contains(const std::string& name) const {
    return index_.count(name) > 0;
  }

  void set_frozen(const std::string& name, bool frozen) {
    auto& p = at(name);
    p.frozen = frozen;
    p.tensor.set_requires_grad(!frozen);
    p.tensor.zero_grad();
  }

  std::vector<Parameter<Scalar>>& all() { return params_; }
  const std::vector<Parameter<Scalar>>& all() const { return params_; }

  std::size_t count_values(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!trainable_only || !p.frozen) n += static_cast<std::size_t>(p.tensor.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter<Scalar>> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments, keyed by parameter name so the state survives parameter
/// replacement (e.g. a re-initialized classifier head restarts its moments).
template <typename Scalar>
struct AdamState {
  AdamConfig config;
  long step_count = 0;
  std::map<std::string, Buffer<Scalar>> first;
  std::map<std::string, Buffer<Scalar>> second;
};

/// One bias-corrected Adam update over all unfrozen parameters. Frozen
/// parameters are left bitwise unchanged and their grads zeroed.
template <typename Scalar>
void adam_step(ParameterStore<Scalar>& params, AdamState<Scalar>& state) {
  const auto& cfg = state.config;
  ++state.step_count;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step_count));
  for (auto& p : params.all()) {
    if (p.frozen) {
      p.tensor.zero_grad();
      continue;
    }
    require(p.tensor.has_grad(), ErrorKind::Internal,
            "adam_step: parameter '" + p.name + "' has no gradient");
    auto& m = state.first[p.name];
    auto& v = state.second[p.name];
    const Index n = p.tensor.size();
    if (m.size() != n) {
      m = Buffer<Scalar>::Zero(n);
      v = Buffer<Scalar>::Zero(n);
    }
    const auto& g = p.tensor.grad();
    m = Scalar(cfg.beta1) * m + Scalar(1 - cfg.beta1) * g;
    v = Scalar(cfg.beta2) * v + Scalar(1 - cfg.beta2) * g * g;
    p.tensor.value() -=
        Scalar(cfg.lr) * (m / Scalar(bc1)) /
        ((v / Scalar(bc2)).sqrt() + Scalar(cfg.eps));
  }
}

/// Scale all unfrozen grads so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(ParameterStore<Scalar>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params.all())
    if (!p.frozen && p.tensor.has_grad())
      sq += double(p.tensor.grad().square().sum());
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const Scalar f = Scalar(max_norm / norm);
    for (auto& p : params.all())
      if (!p.frozen && p.tensor.has_grad()) p.tensor.grad() *= f;
  }
  return norm;
}

}  // namespace tsrm
