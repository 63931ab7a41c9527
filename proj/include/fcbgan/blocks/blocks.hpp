#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>

#include "fcbgan/substrate/layers.hpp"

namespace fcbgan {

enum class FusionKind { ffm, sum, concat, none };

std::string to_string(FusionKind kind);
FusionKind parse_fusion_kind(const std::string& text);

/// Which branch a fusion writes: the image side feeds the block body, the
/// memory side produces the next memory feature.
enum class FusionSide { image, memory };

/// Merges a source feature map into a target feature map. Target and source
/// must agree in batch and spatial size; channel counts may differ.
class Fusion : public Module {
 public:
  virtual Var forward(const Var& target, const Var& source) = 0;
  virtual std::int64_t out_channels() const = 0;
};

/// Gated fusion: gate = sigmoid(conv1x1([target, source])) with one gate per
/// source channel, refined = source * gate,
/// out = (conv1x1(target) + conv1x1(refined)) / sqrt(2).
class Ffm : public Fusion {
 public:
  Ffm(std::int64_t target_channels, std::int64_t source_channels, std::int64_t out_channels, Rng& rng);

  Var forward(const Var& target, const Var& source) override;
  /// The gate map for the given pair, [B, Cs, H, W].
  Var gate(const Var& target, const Var& source);
  std::int64_t out_channels() const override { return out_; }

  Conv2d& gate_conv() { return *gate_conv_; }
  Conv2d& target_conv() { return *target_conv_; }
  Conv2d& refined_conv() { return *refined_conv_; }

 private:
  std::int64_t out_;
  Conv2d* gate_conv_;
  Conv2d* target_conv_;
  Conv2d* refined_conv_;
};

/// target + source, followed by a 1x1 projection when the channel count
/// differs from `out_channels`. On the memory side the target is projected
/// before the sum, since the source already has `out_channels`.
class SumFusion : public Fusion {
 public:
  SumFusion(FusionSide side, std::int64_t target_channels, std::int64_t source_channels,
            std::int64_t out_channels, Rng& rng);
  Var forward(const Var& target, const Var& source) override;
  std::int64_t out_channels() const override { return out_; }

 private:
  FusionSide side_;
  std::int64_t out_;
  Conv2d* projection_ = nullptr;
};

/// Channel concatenation. On the image side the concatenation is passed on
/// unchanged (the body widens to take it); on the memory side a 1x1 conv
/// maps it to `out_channels`.
class ConcatFusion : public Fusion {
 public:
  ConcatFusion(FusionSide side, std::int64_t target_channels, std::int64_t source_channels,
               std::int64_t out_channels, Rng& rng);
  Var forward(const Var& target, const Var& source) override;
  std::int64_t out_channels() const override { return out_; }

 private:
  std::int64_t out_;
  Conv2d* projection_ = nullptr;
};

/// Ignores the source: the target, projected by a 1x1 conv when its channel
/// count differs from `out_channels`. Memory side only.
class Passthrough : public Fusion {
 public:
  Passthrough(std::int64_t target_channels, std::int64_t out_channels, Rng& rng);
  Var forward(const Var& target, const Var& source) override;
  std::int64_t out_channels() const override { return out_; }

 private:
  std::int64_t out_;
  Conv2d* projection_ = nullptr;
};

/// Builds a fusion for one slot of a block. Lets callers plug in fusion
/// designs beyond the built-in kinds.
using FusionFactory = std::function<std::unique_ptr<Fusion>(
    FusionSide side, std::int64_t target_channels, std::int64_t source_channels, std::int64_t out_channels, Rng& rng)>;

/// Factory for a built-in kind. `none` on the image side raises std::invalid_argument.
FusionFactory builtin_fusion(FusionKind kind);

/// Two-branch generator block. Both branches are upsampled at entry, the
/// image side fuses the memory into the image, the residual body refines the
/// result, and the memory side fuses the new image feature back into memory.
class Fcb : public Module {
 public:
  Fcb(std::int64_t in_channels, std::int64_t out_channels, bool upsample, FusionKind image_side,
      FusionKind memory_side, Rng& rng);
  Fcb(std::int64_t in_channels, std::int64_t out_channels, bool upsample, const FusionFactory& image_side,
      const FusionFactory& memory_side, Rng& rng);

  /// Returns (f_i', f_m').
  std::pair<Var, Var> forward(const Var& image, const Var& memory);

  Fusion& fusion_in() { return *fusion_in_; }
  Fusion& fusion_out() { return *fusion_out_; }
  Conv2d& body_conv1() { return *conv1_; }
  Conv2d& body_conv2() { return *conv2_; }
  /// 1x1 conv around the body, present only when the fused width differs from C_out.
  Conv2d* shortcut() { return shortcut_; }

 private:
  std::int64_t in_, out_;
  bool upsample_;
  Fusion* fusion_in_;
  BatchNorm2d* bn1_;
  Conv2d* conv1_;
  BatchNorm2d* bn2_;
  Conv2d* conv2_;
  Conv2d* shortcut_ = nullptr;
  Fusion* fusion_out_;
};

/// Pre-activation residual block: BN, ReLU, [up], conv3x3, BN, ReLU, conv3x3,
/// plus a shortcut of [up] and a 1x1 conv when the width changes.
class ResidualBlock : public Module {
 public:
  ResidualBlock(std::int64_t in_channels, std::int64_t out_channels, bool upsample, Rng& rng);
  Var forward(const Var& x);

  Conv2d& conv2() { return *conv2_; }
  Conv2d* shortcut() { return shortcut_; }

 private:
  bool upsample_;
  BatchNorm2d* bn1_;
  Conv2d* conv1_;
  BatchNorm2d* bn2_;
  Conv2d* conv2_;
  Conv2d* shortcut_ = nullptr;
};

/// Spectrally normalized discriminator block. The input block (`first`)
/// skips the leading ReLU and uses avgpool then 1x1 conv on its shortcut;
/// other blocks are pre-activation with a 1x1 conv then [avgpool] shortcut
/// whenever the width changes or the block downsamples.
class DiscriminatorBlock : public Module {
 public:
  DiscriminatorBlock(std::int64_t in_channels, std::int64_t out_channels, bool downsample, bool first, Rng& rng);
  Var forward(const Var& x);

  Conv2d& conv1() { return *conv1_; }
  Conv2d& conv2() { return *conv2_; }
  Conv2d* shortcut() { return shortcut_; }

 private:
  bool downsample_;
  bool first_;
  Conv2d* conv1_;
  Conv2d* conv2_;
  Conv2d* shortcut_ = nullptr;
};

}  // namespace fcbgan
