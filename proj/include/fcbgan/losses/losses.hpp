#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "fcbgan/substrate/autograd.hpp"

namespace fcbgan {

enum class LossKind { vanilla, hinge, ns_logistic_r1 };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& text);

struct LossConfig {
  LossKind kind = LossKind::hinge;
  double gamma = 1.0;  // R1 weight, ns_logistic_r1 only
  std::int64_t lazy_interval = 16;

  void validate() const;
};

/// True on the steps where the lazy regularizer fires.
bool lazy_schedule(std::int64_t step, std::int64_t interval);

/// Discriminator objective without any regularizer. Scores are raw logits [B].
Var d_adversarial_loss(LossKind kind, const Var& real_scores, const Var& fake_scores);

/// Generator objective on the scores of generated samples.
Var g_loss(LossKind kind, const Var& fake_scores);

/// gamma / 2 * mean_i ||d score_i / d x_i||^2. `real_scores` must come from a
/// per-sample discriminator applied to `x_real`. The result stays
/// differentiable w.r.t. the discriminator's parameters.
Var r1_penalty(const Var& real_scores, const Var& x_real, double gamma);

struct DLoss {
  Var total;
  Var adversarial;
  /// Unscaled penalty gamma/2 * mean ||grad||^2, present on lazy steps.
  std::optional<double> r1;
};

/// Full discriminator loss for D step `step`. For ns_logistic_r1 the penalty
/// is added on lazy steps, multiplied by the lazy interval.
DLoss d_loss(const LossConfig& cfg, const Var& real_scores, const Var& fake_scores, const Var& x_real,
             std::int64_t step);

}  // namespace fcbgan
