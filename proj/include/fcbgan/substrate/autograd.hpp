#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fcbgan/substrate/tensor.hpp"

namespace fcbgan {

struct Node;
struct VarImpl;

/// Reference-counted handle to a value that may take part in reverse-mode
/// differentiation. Copies share the underlying value and gradient.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Tensor& value() const;
  /// In-place access for optimizers and loaders. Never call on a Var that
  /// is part of a live graph.
  Tensor& mutable_value();

  const Shape& shape() const { return value().shape(); }
  DType dtype() const { return value().dtype(); }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  /// Accumulated gradient (leaves only); std::nullopt until a backward pass reaches it.
  const std::optional<Tensor>& grad() const;
  std::optional<Tensor>& mutable_grad();
  void zero_grad();

  /// Same value, cut from any graph.
  Var detach() const;

  const std::shared_ptr<Node>& grad_fn() const;
  VarImpl* impl() const { return impl_.get(); }

  static Var wrap(std::shared_ptr<VarImpl> impl);

 private:
  std::shared_ptr<VarImpl> impl_;
};

using BackwardFn = std::function<std::vector<Var>(const Var& grad_out, const std::vector<bool>& needs)>;

/// One recorded forward operation.
struct Node {
  const char* op = "";
  std::vector<Var> parents;
  BackwardFn backward;
  /// False for ops whose backward is not itself recorded (first-order only).
  bool differentiable_backward = true;
  bool released = false;
};

struct VarImpl {
  Tensor value;
  std::optional<Tensor> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

/// Thread-local switch that controls whether ops record graph nodes.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class GradModeGuard {
 public:
  explicit GradModeGuard(bool on) : prev_(GradMode::enabled()) { GradMode::set_enabled(on); }
  ~GradModeGuard() { GradMode::set_enabled(prev_); }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool prev_;
};

/// Wraps a freshly computed value into a Var, recording a Node when grad
/// mode is on and any parent requires a gradient. Checks the value is finite.
Var make_result(Tensor value, const char* op, std::vector<Var> parents, BackwardFn backward,
                bool differentiable_backward = true);

/// Raised on misuse of the graph: replaying a released graph, asking for the
/// gradient of something unreachable, or differentiating a first-order op twice.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct BackwardOptions {
  bool retain_graph = false;
  /// Record the backward computation itself so the returned gradients can be
  /// differentiated again. Implies retain_graph.
  bool create_graph = false;
  /// grad(): inputs the root does not depend on get a zero gradient instead
  /// of raising.
  bool allow_unused = false;
};

/// Accumulates d(root)/d(leaf) into every reachable leaf's grad. `root` must
/// hold a single element.
void backward(const Var& root, BackwardOptions opts = {});

/// Returns d(root)/d(x) for each x in `inputs` without touching leaf grads.
std::vector<Var> grad(const Var& root, const std::vector<Var>& inputs, BackwardOptions opts = {});

/// d(scalar)/d(x). With `double_backprop`, the result stays attached to the
/// graph and can be differentiated again (e.g. w.r.t. parameters).
Var input_gradient(const Var& scalar, const Var& x, bool double_backprop = true);

}  // namespace fcbgan
