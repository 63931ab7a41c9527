#include "fcbgan/harness/checks.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>

#include "fcbgan/blocks/blocks.hpp"
#include "fcbgan/losses/losses.hpp"
#include "fcbgan/networks/networks.hpp"
#include "fcbgan/substrate/gradcheck.hpp"
#include "fcbgan/substrate/spectral_norm.hpp"

namespace fcbgan {

namespace {

struct Instance {
  std::function<Var()> fn;
  std::vector<Var> inputs;
  std::vector<std::string> names;
  GradCheckOptions opts;
  std::shared_ptr<void> keep_alive;
};

using InstanceMaker = std::function<Instance(Rng&, std::uint64_t seed)>;

std::int64_t dim(Rng& r, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(r.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

Var rvar(Rng& r, const Shape& shape, double stddev = 1.0, bool requires_grad = true) {
  return Var(r.normal_tensor(shape, stddev, DType::f64), requires_grad);
}

Var positive_var(Rng& r, const Shape& shape) {
  Tensor t = r.normal_tensor(shape, 1.0, DType::f64);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, 0.5 + std::abs(t.at(i)));
  return Var(t, true);
}

Shape shape4(Rng& r, bool even_spatial = false) {
  std::int64_t h = dim(r, 1, 4), w = dim(r, 1, 4);
  if (even_spatial) {
    h = 2 * dim(r, 1, 3);
    w = 2 * dim(r, 1, 3);
  }
  return {dim(r, 1, 3), dim(r, 1, 4), h, w};
}

Shape any_shape(Rng& r) {
  Shape s;
  for (std::int64_t i = 0, rank = dim(r, 1, 4); i < rank; ++i) s.push_back(dim(r, 1, 4));
  return s;
}

/// Scalar view of a tensor-valued op: a fixed random projection, so every
/// output coordinate carries its own weight.
Var project(const Var& out, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Var w(rng.normal_tensor(out.shape(), 1.0, out.dtype()));
  return sum(mul(out, w));
}

/// Wraps an op into an instance that checks every input.
Instance op_instance(std::function<Var()> op, std::vector<Var> inputs, std::uint64_t seed, bool with_grad = false) {
  Instance in;
  in.fn = [op = std::move(op), seed] { return project(op(), seed); };
  in.inputs = std::move(inputs);
  in.opts.eval_with_grad = with_grad;
  if (with_grad) in.opts.step = 1e-5;
  return in;
}

void add_params(Instance& in, const Module& m, const std::string& prefix = "") {
  for (const auto& np : m.named_parameters()) {
    in.inputs.push_back(np.param->var());
    in.names.push_back(prefix + np.name);
  }
}

const std::map<std::string, InstanceMaker>& op_makers() {
  static const std::map<std::string, InstanceMaker> m = {
      {"add", [](Rng& r, std::uint64_t s) { auto sh = any_shape(r); auto a = rvar(r, sh), b = rvar(r, sh);
                                            return op_instance([=] { return add(a, b); }, {a, b}, s); }},
      {"sub", [](Rng& r, std::uint64_t s) { auto sh = any_shape(r); auto a = rvar(r, sh), b = rvar(r, sh);
                                            return op_instance([=] { return sub(a, b); }, {a, b}, s); }},
      {"mul", [](Rng& r, std::uint64_t s) { auto sh = any_shape(r); auto a = rvar(r, sh), b = rvar(r, sh);
                                            return op_instance([=] { return mul(a, b); }, {a, b}, s); }},
      {"scale", [](Rng& r, std::uint64_t s) { auto a = rvar(r, any_shape(r)); double c = r.normal();
                                              return op_instance([=] { return scale(a, c); }, {a}, s); }},
      {"add_scalar", [](Rng& r, std::uint64_t s) { auto a = rvar(r, any_shape(r)); double c = r.normal();
                                                   return op_instance([=] { return add_scalar(a, c); }, {a}, s); }},
      {"scale_by", [](Rng& r, std::uint64_t s) { auto a = rvar(r, any_shape(r)); auto k = rvar(r, {1});
                                                 return op_instance([=] { return scale_by(a, k); }, {a, k}, s); }},
      {"reciprocal", [](Rng& r, std::uint64_t s) { auto a = positive_var(r, any_shape(r));
                                                   return op_instance([=] { return reciprocal(a); }, {a}, s); }},
      {"relu", [](Rng& r, std::uint64_t s) { auto a = rvar(r, any_shape(r));
                                             return op_instance([=] { return relu(a); }, {a}, s); }},
      {"sigmoid", [](Rng& r, std::uint64_t s) { auto a = rvar(r, any_shape(r), 2.0);
                                                return op_instance([=] { return sigmoid(a); }, {a}, s); }},
      {"tanh", [](Rng& r, std::uint64_t s) { auto a = rvar(r, any_shape(r));
                                             return op_instance([=] { return fcbgan::tanh(a); }, {a}, s); }},
      {"softplus", [](Rng& r, std::uint64_t s) { auto a = rvar(r, any_shape(r), 3.0);
                                                 return op_instance([=] { return softplus(a); }, {a}, s); }},
      {"sum", [](Rng& r, std::uint64_t s) { auto a = rvar(r, any_shape(r));
                                            return op_instance([=] { return sum(mul(a, a)); }, {a}, s); }},
      {"mean", [](Rng& r, std::uint64_t s) { auto a = rvar(r, any_shape(r));
                                             return op_instance([=] { return mean(mul(a, a)); }, {a}, s); }},
      {"expand", [](Rng& r, std::uint64_t s) { auto k = rvar(r, {1}); auto sh = any_shape(r);
                                               return op_instance([=] { return expand(k, sh); }, {k}, s); }},
      {"reshape", [](Rng& r, std::uint64_t s) { auto a = rvar(r, shape4(r));
                                                return op_instance([=] { return reshape(a, {a.value().numel()}); }, {a}, s); }},
      {"transpose", [](Rng& r, std::uint64_t s) { auto a = rvar(r, {dim(r, 1, 5), dim(r, 1, 5)});
                                                  return op_instance([=] { return transpose(a); }, {a}, s); }},
      {"matmul", [](Rng& r, std::uint64_t s) { auto m = dim(r, 1, 4), k = dim(r, 1, 4), n = dim(r, 1, 4);
                                               auto a = rvar(r, {m, k}), b = rvar(r, {k, n});
                                               return op_instance([=] { return matmul(a, b); }, {a, b}, s); }},
      {"dense", [](Rng& r, std::uint64_t s) { auto n = dim(r, 1, 4), in = dim(r, 1, 5), out = dim(r, 1, 5);
                                              auto x = rvar(r, {n, in}), w = rvar(r, {out, in}), b = rvar(r, {out});
                                              return op_instance([=] { return dense(x, w, b); }, {x, w, b}, s); }},
      {"add_channel_bias", [](Rng& r, std::uint64_t s) { auto sh = shape4(r); auto x = rvar(r, sh), b = rvar(r, {sh[1]});
                                                         return op_instance([=] { return add_channel_bias(x, b); }, {x, b}, s); }},
      {"sum_to_channels", [](Rng& r, std::uint64_t s) { auto x = rvar(r, shape4(r));
                                                        return op_instance([=] { return sum_to_channels(x); }, {x}, s); }},
      {"broadcast_channels", [](Rng& r, std::uint64_t s) { auto sh = shape4(r); auto b = rvar(r, {sh[1]});
                                                           return op_instance([=] { return broadcast_channels(b, sh); }, {b}, s); }},
      {"concat_batch", [](Rng& r, std::uint64_t s) { auto sh = shape4(r); auto t = sh; t[0] = dim(r, 1, 3);
                                                     auto a = rvar(r, sh), b = rvar(r, t);
                                                     return op_instance([=] { return concat(a, b, 0); }, {a, b}, s); }},
      {"concat_channels", [](Rng& r, std::uint64_t s) { auto sh = shape4(r); auto t = sh; t[1] = dim(r, 1, 4);
                                                        auto a = rvar(r, sh), b = rvar(r, t);
                                                        return op_instance([=] { return concat_channels(a, b); }, {a, b}, s); }},
      {"slice", [](Rng& r, std::uint64_t s) { auto sh = shape4(r); sh[1] += 2; auto x = rvar(r, sh);
                                              auto start = dim(r, 0, 1), len = dim(r, 1, sh[1] - start);
                                              return op_instance([=] { return slice(x, 1, start, len); }, {x}, s); }},
      {"embed", [](Rng& r, std::uint64_t s) { auto sh = shape4(r); auto x = rvar(r, sh); auto start = dim(r, 0, 2);
                                              auto total = start + sh[1] + dim(r, 0, 2);
                                              return op_instance([=] { return embed(x, 1, start, total); }, {x}, s); }},
      {"upsample_nearest2x", [](Rng& r, std::uint64_t s) { auto x = rvar(r, shape4(r));
                                                           return op_instance([=] { return upsample_nearest2x(x); }, {x}, s); }},
      {"avgpool2x", [](Rng& r, std::uint64_t s) { auto x = rvar(r, shape4(r, true));
                                                  return op_instance([=] { return avgpool2x(x); }, {x}, s); }},
      {"global_sum_pool", [](Rng& r, std::uint64_t s) { auto x = rvar(r, shape4(r));
                                                        return op_instance([=] { return global_sum_pool(x); }, {x}, s); }},
      {"broadcast_spatial", [](Rng& r, std::uint64_t s) { auto x = rvar(r, {dim(r, 1, 3), dim(r, 1, 4)});
                                                          auto h = dim(r, 1, 4), w = dim(r, 1, 4);
                                                          return op_instance([=] { return broadcast_spatial(x, h, w); }, {x}, s); }},
      {"broadcast_batch", [](Rng& r, std::uint64_t s) { auto sh = shape4(r); sh[0] = 1; auto x = rvar(r, sh);
                                                        auto n = dim(r, 1, 4);
                                                        return op_instance([=] { return broadcast_batch(x, n); }, {x}, s); }},
      {"sum_batch", [](Rng& r, std::uint64_t s) { auto x = rvar(r, shape4(r));
                                                  return op_instance([=] { return sum_batch(x); }, {x}, s); }},
      {"batchnorm", [](Rng& r, std::uint64_t s) {
         auto sh = shape4(r);
         sh[0] = dim(r, 2, 4);
         auto x = rvar(r, sh), g = rvar(r, {sh[1]}), b = rvar(r, {sh[1]});
         auto stats = std::make_shared<BatchNormStats>();
         BatchNormOptions o;
         o.update_stats = false;
         Instance in = op_instance([=] { return batchnorm(x, g, b, *stats, o); }, {x, g, b}, s);
         in.keep_alive = stats;
         return in; }},
      {"conv2d", [](Rng& r, std::uint64_t s) {
         const int k = r.below(2) ? 3 : 1, stride = r.below(2) ? 2 : 1, pad = k == 3 ? static_cast<int>(r.below(2)) : 0;
         const std::int64_t size = dim(r, 3, 5);
         auto x = rvar(r, {dim(r, 1, 2), dim(r, 1, 3), size, size}), w = rvar(r, {dim(r, 1, 3), x.shape()[1], k, k});
         auto b = rvar(r, {w.shape()[0]});
         // output extent must be integral
         const std::int64_t span = size + 2 * pad - k;
         const int st = span % stride ? 1 : stride;
         return op_instance([=] { return conv2d(x, w, b, st, pad); }, {x, w, b}, s); }},
      {"conv2d_input_grad", [](Rng& r, std::uint64_t s) {
         const int stride = r.below(2) ? 2 : 1;
         const std::int64_t size = stride == 2 ? 5 : 4;
         auto x = rvar(r, {1, 2, size, size}, 1.0, false), w = rvar(r, {2, 2, 3, 3});
         auto go = rvar(r, conv2d(x, w, Var(), stride, 1).shape());
         const Shape xs = x.shape();
         return op_instance([=] { return conv2d_input_grad(go, w, xs, stride, 1); }, {go, w}, s); }},
      {"conv2d_weight_grad", [](Rng& r, std::uint64_t s) {
         const int stride = r.below(2) ? 2 : 1;
         const std::int64_t size = stride == 2 ? 5 : 4;
         auto x = rvar(r, {1, 2, size, size}), w = rvar(r, {2, 2, 3, 3}, 1.0, false);
         auto go = rvar(r, conv2d(x, w, Var(), stride, 1).shape());
         const Shape ws = w.shape();
         return op_instance([=] { return conv2d_weight_grad(x, go, ws, stride, 1); }, {x, go}, s); }},
      {"spectral_normalize", [](Rng& r, std::uint64_t s) {
         auto p = std::make_shared<Param>("w", r.normal_tensor({dim(r, 1, 6), dim(r, 1, 3), 3, 3}, 1.0, DType::f64));
         init_spectral_state(*p, r, 50);
         // Zero iterations keep u and v fixed while the weight is perturbed.
         Instance in = op_instance([p] { return spectral_normalize(*p, 0).weight; }, {p->var()}, s);
         in.keep_alive = p;
         return in; }},
      {"input_gradient", [](Rng& r, std::uint64_t s) {
         auto x = rvar(r, {2, 2, 4, 4}), w = rvar(r, {3, 2, 3, 3}, 0.5), b = rvar(r, {3});
         auto fn = [=] { return input_gradient(sum(softplus(conv2d(fcbgan::tanh(x), w, b, 1, 1))), x, true); };
         return op_instance(fn, {x, w, b}, s, true); }},
  };
  return m;
}

NetworkSpec width16(BlockKind kind, std::uint64_t seed) {
  NetworkSpec s;
  s.block_kind = kind;
  s.g_channels = 16;
  s.d_channels = 16;
  s.latent_dim = 16;
  s.seed = seed;
  return s;
}

const std::map<std::string, std::vector<std::pair<std::string, InstanceMaker>>>& component_makers() {
  static const std::map<std::string, std::vector<std::pair<std::string, InstanceMaker>>> m = {
      {"ffm",
       {{"ffm", [](Rng& r, std::uint64_t s) {
           const auto ct = dim(r, 1, 4), cs = dim(r, 1, 4), co = dim(r, 1, 4), hw = dim(r, 2, 4);
           auto ffm = std::make_shared<Ffm>(ct, cs, co, r);
           ffm->to(DType::f64);
           ffm->gate_conv().bias()->mutable_value() = r.normal_tensor({cs}, 1.0, DType::f64);
           Var ft = rvar(r, {2, ct, hw, hw}), fs = rvar(r, {2, cs, hw, hw});
           Instance in = op_instance([=] { return ffm->forward(ft, fs); }, {ft, fs}, s);
           in.names = {"f_t", "f_s"};
           add_params(in, *ffm);
           in.keep_alive = ffm;
           return in;
         }}}},
      {"fcb",
       {{"fcb", [](Rng& r, std::uint64_t s) {
           const auto cin = dim(r, 2, 4), cout = dim(r, 2, 4), hw = dim(r, 2, 3);
           auto fcb = std::make_shared<Fcb>(cin, cout, r.below(2) == 1, FusionKind::ffm, FusionKind::ffm, r);
           fcb->to(DType::f64);
           fcb->set_stats_frozen(true);
           Var fi = rvar(r, {2, cin, hw, hw}), fm = rvar(r, {2, cin, hw, hw});
           Instance in;
           in.fn = [=] {
             auto [oi, om] = fcb->forward(fi, fm);
             return add(project(oi, s), project(om, s + 1));
           };
           in.inputs = {fi, fm};
           in.names = {"f_i", "f_m"};
           add_params(in, *fcb);
           in.opts.max_coords = 40;
           in.keep_alive = fcb;
           return in;
         }}}},
      {"generator",
       {{"generator", [](Rng& r, std::uint64_t s) {
           const BlockKind kind = r.below(2) ? BlockKind::fcb : BlockKind::resblock;
           auto g = std::make_shared<Generator>(width16(kind, s));
           g->to(DType::f64);
           g->set_stats_frozen(true);
           Var z = rvar(r, {2, 16});
           Instance in = op_instance([=] { return g->forward(z); }, {z}, s);
           in.names = {"z"};
           add_params(in, *g);
           in.opts.max_coords = 3;
           in.keep_alive = g;
           return in;
         }}}},
      {"discriminator",
       {{"discriminator", [](Rng& r, std::uint64_t s) {
           auto d = std::make_shared<Discriminator>(width16(BlockKind::fcb, s));
           d->to(DType::f64);
           d->set_training(false);
           Var x = rvar(r, {2, 3, 32, 32});
           Instance in;
           in.fn = [=] { return project(d->forward(x), s); };
           in.inputs = {x};
           in.names = {"x"};
           add_params(in, *d);
           in.opts.max_coords = 3;
           in.keep_alive = d;
           return in;
         }},
        {"discriminator_r1", [](Rng& r, std::uint64_t s) {
           auto d = std::make_shared<Discriminator>(width16(BlockKind::fcb, s));
           d->to(DType::f64);
           d->set_training(false);
           Var x = rvar(r, {2, 3, 32, 32});
           Instance in;
           in.fn = [=] { return r1_penalty(d->forward(x), x, 1.0); };
           add_params(in, *d);
           in.opts.max_coords = 3;
           in.opts.eval_with_grad = true;
           in.opts.step = 1e-5;
           in.keep_alive = d;
           return in;
         }}}},
  };
  return m;
}

void run_instances(CheckOutcome& out, const InstanceMaker& make, std::uint64_t stream, int instances) {
  out.instances = instances;
  for (int i = 0; i < instances; ++i) {
    const auto seed = static_cast<std::uint64_t>(i);
    Rng r(Rng::derive(seed, stream));
    Instance in = make(r, seed);
    in.opts.seed = seed;
    // Inputs with an identically zero analytic gradient (unused, or absorbed
    // by a following batchnorm) are checked on absolute finite differences.
    BackwardOptions bo;
    bo.allow_unused = true;
    std::vector<Var> analytic = grad(in.fn(), in.inputs, bo);
    std::vector<Var> live;
    std::vector<std::string> live_names;
    for (std::size_t k = 0; k < in.inputs.size(); ++k) {
      double mx = 0;
      for (double v : analytic[k].value().to_vector()) mx = std::max(mx, std::abs(v));
      const std::string name = k < in.names.size() ? in.names[k] : "input " + std::to_string(k);
      if (mx < 1e-12) {
        ++out.zero_grad_params;
        auto eval = [&] {
          GradModeGuard mode(in.opts.eval_with_grad);
          return in.fn().value().at(0);
        };
        Var x = in.inputs[k];
        for (std::int64_t c = 0, probed = 0; c < x.value().numel() && probed < 3; ++c) {
          auto num = smooth_partial(eval, x, c, in.opts.step, in.opts.scale_floor);
          if (!num) {
            ++out.kinks_skipped;
            continue;
          }
          out.max_abs_numeric_on_zero = std::max(out.max_abs_numeric_on_zero, std::abs(*num));
          ++probed;
        }
        continue;
      }
      live.push_back(in.inputs[k]);
      live_names.push_back(name);
    }
    const GradCheckResult res = gradcheck(in.fn, live, live_names, in.opts);
    out.kinks_skipped += res.kinks_skipped;
    if (res.max_rel_error >= out.max_rel_error) {
      out.max_rel_error = res.max_rel_error;
      out.worst = "instance " + std::to_string(i) + ", " + res.worst_input;
    }
  }
}

}  // namespace

std::vector<std::string> gradcheck_groups() { return {"ops", "ffm", "fcb", "generator", "discriminator"}; }

std::vector<CheckOutcome> run_gradchecks(const std::string& group, int instances) {
  if (instances < 1) throw std::invalid_argument("gradcheck: instances must be >= 1");
  std::vector<CheckOutcome> out;
  if (group == "all") {
    for (const auto& g : gradcheck_groups()) {
      auto part = run_gradchecks(g, instances);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  if (group == "ops") {
    std::uint64_t stream = 1;
    for (const auto& [name, make] : op_makers()) {
      CheckOutcome o;
      o.name = name;
      o.tolerance = 1e-4;
      run_instances(o, make, stream++, instances);
      out.push_back(o);
    }
    return out;
  }
  auto it = component_makers().find(group);
  if (it == component_makers().end()) {
    throw std::invalid_argument("gradcheck: unknown group '" + group + "' (ops, ffm, fcb, generator, discriminator, all)");
  }
  std::uint64_t stream = 100;
  for (const auto& [name, make] : it->second) {
    CheckOutcome o;
    o.name = name;
    o.tolerance = group == "discriminator" ? 1e-3 : 1e-4;
    run_instances(o, make, stream++, instances);
    out.push_back(o);
  }
  return out;
}

}  // namespace fcbgan
