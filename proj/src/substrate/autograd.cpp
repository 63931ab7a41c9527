#include "fcbgan/substrate/autograd.hpp"

#include <unordered_map>
#include <unordered_set>

#include "fcbgan/substrate/ops.hpp"

namespace fcbgan {

namespace {
thread_local bool g_grad_enabled = true;

const VarImpl& checked(const std::shared_ptr<VarImpl>& p) {
  if (!p) throw GraphError("use of an undefined Var");
  return *p;
}
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

Var::Var(Tensor value, bool requires_grad) : impl_(std::make_shared<VarImpl>()) {
  impl_->value = std::move(value);
  impl_->requires_grad = requires_grad;
}

Var Var::wrap(std::shared_ptr<VarImpl> impl) {
  Var v;
  v.impl_ = std::move(impl);
  return v;
}

const Tensor& Var::value() const { return checked(impl_).value; }
Tensor& Var::mutable_value() {
  checked(impl_);
  return impl_->value;
}
bool Var::requires_grad() const { return checked(impl_).requires_grad; }
void Var::set_requires_grad(bool on) {
  checked(impl_);
  if (impl_->grad_fn) throw GraphError("requires_grad can only be changed on leaves");
  impl_->requires_grad = on;
}
bool Var::is_leaf() const { return checked(impl_).grad_fn == nullptr; }
const std::optional<Tensor>& Var::grad() const { return checked(impl_).grad; }
std::optional<Tensor>& Var::mutable_grad() {
  checked(impl_);
  return impl_->grad;
}
void Var::zero_grad() {
  checked(impl_);
  impl_->grad.reset();
}
Var Var::detach() const { return Var(value(), false); }
const std::shared_ptr<Node>& Var::grad_fn() const { return checked(impl_).grad_fn; }

Var make_result(Tensor value, const char* op, std::vector<Var> parents, BackwardFn backward,
                bool differentiable_backward) {
  value.check_finite(op);
  bool track = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  auto impl = std::make_shared<VarImpl>();
  impl->value = std::move(value);
  if (track) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
    node->differentiable_backward = differentiable_backward;
    impl->requires_grad = true;
    impl->grad_fn = std::move(node);
  }
  return Var::wrap(std::move(impl));
}

namespace {

struct Traversal {
  std::vector<VarImpl*> postorder;  // parents before children
  std::unordered_map<VarImpl*, Var> handles;
};

// Iterative DFS over the graph below `root`, restricted to grad-requiring vars.
Traversal traverse(const Var& root) {
  Traversal t;
  std::unordered_set<VarImpl*> seen;
  struct Frame {
    VarImpl* v;
    std::size_t next;
  };
  std::vector<Frame> stack;
  seen.insert(root.impl());
  t.handles.emplace(root.impl(), root);
  stack.push_back({root.impl(), 0});
  while (!stack.empty()) {
    auto& f = stack.back();
    Node* node = f.v->grad_fn.get();
    if (node && node->released) {
      throw GraphError(std::string("backward through released graph at op '") + node->op +
                       "'; pass retain_graph to replay");
    }
    if (node && f.next < node->parents.size()) {
      const Var& p = node->parents[f.next++];
      if (p.defined() && p.requires_grad() && seen.insert(p.impl()).second) {
        t.handles.emplace(p.impl(), p);
        stack.push_back({p.impl(), 0});
      }
      continue;
    }
    t.postorder.push_back(f.v);
    stack.pop_back();
  }
  return t;
}

std::unordered_map<VarImpl*, Var> run(const Var& root, const std::unordered_set<VarImpl*>* targets,
                                      BackwardOptions opts) {
  if (!root.defined()) throw GraphError("backward from an undefined Var");
  if (!root.requires_grad()) throw GraphError("backward from a Var that does not require grad");
  if (root.value().numel() != 1) {
    throw GraphError("backward root must be a single element, got " + shape_str(root.shape()));
  }
  if (opts.create_graph) opts.retain_graph = true;

  Traversal t = traverse(root);

  // With explicit targets, only propagate along paths that reach one.
  std::unordered_set<VarImpl*> needed;
  for (VarImpl* v : t.postorder) {
    bool need = targets ? targets->count(v) > 0 : v->grad_fn == nullptr;
    if (!need && v->grad_fn) {
      for (const auto& p : v->grad_fn->parents) {
        if (p.defined() && needed.count(p.impl())) {
          need = true;
          break;
        }
      }
    }
    if (need) needed.insert(v);
  }

  std::unordered_map<VarImpl*, Var> grads;
  {
    NoGradGuard ng;
    grads.emplace(root.impl(), Var(Tensor::full(root.shape(), 1.0, root.dtype())));
  }

  GradModeGuard mode(opts.create_graph);
  for (auto it = t.postorder.rbegin(); it != t.postorder.rend(); ++it) {
    VarImpl* v = *it;
    Node* node = v->grad_fn.get();
    if (!node || !needed.count(v)) continue;
    auto g = grads.find(v);
    if (g == grads.end()) continue;

    std::vector<bool> needs(node->parents.size(), false);
    bool any = false;
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Var& p = node->parents[i];
      needs[i] = p.defined() && p.requires_grad() && needed.count(p.impl()) > 0;
      any = any || needs[i];
    }
    if (!any) continue;
    if (opts.create_graph && !node->differentiable_backward) {
      throw GraphError(std::string("op '") + node->op + "' supports first-order gradients only");
    }
    std::vector<Var> pg = node->backward(g->second, needs);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      if (!needs[i] || !pg[i].defined()) continue;
      VarImpl* p = node->parents[i].impl();
      auto existing = grads.find(p);
      if (existing == grads.end()) {
        grads.emplace(p, pg[i]);
      } else {
        existing->second = add(existing->second, pg[i]);
      }
    }
  }

  if (!opts.retain_graph) {
    for (VarImpl* v : t.postorder) {
      if (auto& node = v->grad_fn) {
        node->released = true;
        node->parents.clear();
        node->backward = nullptr;
      }
    }
  }
  return grads;
}

}  // namespace

void backward(const Var& root, BackwardOptions opts) {
  auto grads = run(root, nullptr, opts);
  for (auto& [impl, g] : grads) {
    if (impl->grad_fn) continue;
    if (impl->grad) {
      impl->grad->add_(g.value());
    } else {
      impl->grad = g.value();
    }
  }
}

std::vector<Var> grad(const Var& root, const std::vector<Var>& inputs, BackwardOptions opts) {
  std::unordered_set<VarImpl*> targets;
  for (const auto& x : inputs) {
    if (!x.defined() || !x.requires_grad()) throw GraphError("grad input does not require grad");
    targets.insert(x.impl());
  }
  auto grads = run(root, &targets, opts);
  std::vector<Var> out;
  out.reserve(inputs.size());
  for (const auto& x : inputs) {
    auto it = grads.find(x.impl());
    if (it == grads.end()) {
      if (!opts.allow_unused) throw GraphError("grad input is not part of the graph of the output");
      out.emplace_back(Tensor(x.shape(), x.dtype()));
      continue;
    }
    out.push_back(it->second);
  }
  return out;
}

Var input_gradient(const Var& scalar, const Var& x, bool double_backprop) {
  BackwardOptions opts;
  opts.create_graph = double_backprop;
  opts.retain_graph = true;
  return grad(scalar, {x}, opts).front();
}

}  // namespace fcbgan
