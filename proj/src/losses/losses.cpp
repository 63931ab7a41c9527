#include "fcbgan/losses/losses.hpp"

#include <stdexcept>
#include <utility>

#include "fcbgan/substrate/ops.hpp"

namespace fcbgan {

namespace {

const std::pair<LossKind, const char*> kLossNames[] = {
    {LossKind::vanilla, "vanilla"}, {LossKind::hinge, "hinge"}, {LossKind::ns_logistic_r1, "ns_logistic_r1"}};

void check_scores(const Var& scores, const char* what) {
  if (!scores.defined()) throw std::invalid_argument(std::string(what) + ": scores are undefined");
  if (scores.value().rank() != 1) {
    throw ShapeError(std::string(what) + ": scores must be [B], got " + shape_str(scores.shape()));
  }
  scores.value().check_finite(what);
}

}  // namespace

std::string to_string(LossKind kind) {
  for (const auto& [k, n] : kLossNames)
    if (k == kind) return n;
  return "?";
}

LossKind parse_loss_kind(const std::string& text) {
  for (const auto& [k, n] : kLossNames)
    if (text == n) return k;
  throw std::invalid_argument("unknown loss kind '" + text + "'");
}

void LossConfig::validate() const {
  if (!(gamma >= 0.0)) throw std::invalid_argument("loss: gamma must be >= 0");
  if (lazy_interval < 1) throw std::invalid_argument("loss: lazy_interval must be >= 1");
}

bool lazy_schedule(std::int64_t step, std::int64_t interval) {
  if (step < 0 || interval < 1) throw std::invalid_argument("lazy_schedule: need step >= 0 and interval >= 1");
  return step % interval == 0;
}

Var d_adversarial_loss(LossKind kind, const Var& real_scores, const Var& fake_scores) {
  check_scores(real_scores, "d_loss real");
  check_scores(fake_scores, "d_loss fake");
  switch (kind) {
    case LossKind::hinge:
      return add(mean(relu(add_scalar(scale(real_scores, -1.0), 1.0))), mean(relu(add_scalar(fake_scores, 1.0))));
    case LossKind::vanilla:
    case LossKind::ns_logistic_r1:
      // -log sigmoid(t) = softplus(-t); -log(1 - sigmoid(t)) = softplus(t)
      return add(mean(softplus(scale(real_scores, -1.0))), mean(softplus(fake_scores)));
  }
  throw std::invalid_argument("d_loss: bad loss kind");
}

Var g_loss(LossKind kind, const Var& fake_scores) {
  check_scores(fake_scores, "g_loss");
  switch (kind) {
    case LossKind::hinge: return scale(mean(fake_scores), -1.0);
    case LossKind::vanilla:
    case LossKind::ns_logistic_r1: return mean(softplus(scale(fake_scores, -1.0)));
  }
  throw std::invalid_argument("g_loss: bad loss kind");
}

Var r1_penalty(const Var& real_scores, const Var& x_real, double gamma) {
  check_scores(real_scores, "r1_penalty");
  const auto batch = static_cast<double>(real_scores.shape()[0]);
  Var g = input_gradient(sum(real_scores), x_real, /*double_backprop=*/true);
  return scale(sum(mul(g, g)), 0.5 * gamma / batch);
}

DLoss d_loss(const LossConfig& cfg, const Var& real_scores, const Var& fake_scores, const Var& x_real,
             std::int64_t step) {
  DLoss out;
  out.adversarial = d_adversarial_loss(cfg.kind, real_scores, fake_scores);
  out.total = out.adversarial;
  if (cfg.kind == LossKind::ns_logistic_r1 && lazy_schedule(step, cfg.lazy_interval)) {
    Var r1 = r1_penalty(real_scores, x_real, cfg.gamma);
    out.r1 = r1.value().at(0);
    out.total = add(out.total, scale(r1, static_cast<double>(cfg.lazy_interval)));
  }
  return out;
}

}  // namespace fcbgan
