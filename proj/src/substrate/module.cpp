#include "fcbgan/substrate/module.hpp"

#include <stdexcept>
#include <unordered_set>

namespace fcbgan {

Param& Module::add_param(std::string name, Tensor value) {
  for (const auto& p : params_) {
    if (p->name() == name) throw std::logic_error("duplicate parameter name: " + name);
  }
  params_.push_back(std::make_unique<Param>(std::move(name), std::move(value)));
  return *params_.back();
}

void Module::add_stats(std::string name, BatchNormStats& stats) { stats_.emplace_back(std::move(name), &stats); }

void Module::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  for (const auto& p : params_) out.push_back({prefix + p->name(), p.get()});
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

void Module::collect_stats(const std::string& prefix, std::vector<NamedStats>& out) const {
  for (const auto& [name, s] : stats_) out.push_back({prefix + name, s});
  for (const auto& [name, child] : children_) child->collect_stats(prefix + name + ".", out);
}

std::vector<NamedParam> Module::named_parameters() const {
  std::vector<NamedParam> out;
  collect("", out);
  std::unordered_set<std::string> seen;
  for (const auto& np : out) {
    if (!seen.insert(np.name).second) throw std::logic_error("duplicate parameter id: " + np.name);
  }
  return out;
}

std::vector<Param*> Module::parameters() const {
  std::vector<Param*> out;
  for (const auto& np : named_parameters()) out.push_back(np.param);
  return out;
}

std::vector<NamedStats> Module::named_stats() const {
  std::vector<NamedStats> out;
  collect_stats("", out);
  return out;
}

std::int64_t Module::parameter_count() const {
  std::int64_t n = 0;
  for (const auto* p : parameters()) n += p->numel();
  return n;
}

void Module::zero_grad() {
  for (auto* p : parameters()) p->var().zero_grad();
}

void Module::set_requires_grad(bool on) {
  for (auto* p : parameters()) p->var().set_requires_grad(on);
}

void Module::set_training(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->set_training(on);
}

void Module::set_stats_frozen(bool on) {
  stats_frozen_ = on;
  for (auto& [name, child] : children_) child->set_stats_frozen(on);
}

void Module::to(DType dtype) {
  for (auto* p : parameters()) {
    p->mutable_value() = p->value().to(dtype);
    p->var().zero_grad();
    if (auto& s = p->spectral()) {
      s->u = s->u.to(dtype);
      s->v = s->v.to(dtype);
    }
  }
  for (auto& ns : named_stats()) {
    if (!ns.stats->running_mean.empty()) {
      ns.stats->running_mean = ns.stats->running_mean.to(dtype);
      ns.stats->running_var = ns.stats->running_var.to(dtype);
    }
  }
}

}  // namespace fcbgan
