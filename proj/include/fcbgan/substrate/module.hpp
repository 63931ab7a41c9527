#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fcbgan/substrate/autograd.hpp"
#include "fcbgan/substrate/ops.hpp"

namespace fcbgan {

/// Power-iteration estimates of the leading singular vectors of a weight
/// viewed as a [rows, rest] matrix. Both vectors are kept at unit norm.
struct SpectralState {
  Tensor u;  // [rows]
  Tensor v;  // [rest]
};

/// A trainable tensor with a name that is unique within its network.
class Param {
 public:
  Param(std::string name, Tensor value) : name_(std::move(name)), var_(std::move(value), true) {}

  const std::string& name() const { return name_; }
  const Var& var() const { return var_; }
  Var& var() { return var_; }
  const Tensor& value() const { return var_.value(); }
  Tensor& mutable_value() { return var_.mutable_value(); }
  std::int64_t numel() const { return var_.value().numel(); }

  std::optional<SpectralState>& spectral() { return spectral_; }
  const std::optional<SpectralState>& spectral() const { return spectral_; }

 private:
  std::string name_;
  Var var_;
  std::optional<SpectralState> spectral_;
};

struct NamedParam {
  std::string name;
  Param* param;
};

struct NamedStats {
  std::string name;
  BatchNormStats* stats;
};

/// Owner of parameters, batchnorm statistics and child modules. Names are
/// qualified with the child path ("blocks.0.body_conv1.weight").
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<NamedParam> named_parameters() const;
  std::vector<Param*> parameters() const;
  std::vector<NamedStats> named_stats() const;
  std::int64_t parameter_count() const;

  void zero_grad();
  void set_requires_grad(bool on);
  /// Train mode: batchnorm uses batch statistics and spectral norms run one
  /// power iteration per forward. Eval mode freezes both.
  void set_training(bool on);
  bool training() const { return training_; }
  /// In train mode, batchnorm still normalizes with batch statistics but
  /// stops updating its running statistics.
  void set_stats_frozen(bool on);
  bool stats_frozen() const { return stats_frozen_; }
  /// Converts every parameter, spectral state and statistic to `dtype`.
  void to(DType dtype);

  const std::vector<std::pair<std::string, Module*>>& children() const { return child_view_; }

 protected:
  Param& add_param(std::string name, Tensor value);
  void add_stats(std::string name, BatchNormStats& stats);
  template <class M>
  M& add_module(std::string name, std::unique_ptr<M> module) {
    M& ref = *module;
    child_view_.emplace_back(name, module.get());
    children_.emplace_back(std::move(name), std::move(module));
    return ref;
  }

 private:
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
  void collect_stats(const std::string& prefix, std::vector<NamedStats>& out) const;

  bool training_ = true;
  bool stats_frozen_ = false;
  std::vector<std::unique_ptr<Param>> params_;
  std::vector<std::pair<std::string, BatchNormStats*>> stats_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
  std::vector<std::pair<std::string, Module*>> child_view_;
};

}  // namespace fcbgan
