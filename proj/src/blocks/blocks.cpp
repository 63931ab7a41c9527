#include "fcbgan/blocks/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace fcbgan {

namespace {

constexpr ConvOptions kPointwise{.kernel = 1, .stride = 1, .pad = 0, .bias = true, .spectral = false};

void require_aligned(const Var& a, const Var& b, const char* where) {
  const auto& s = a.shape();
  const auto& t = b.shape();
  if (s.size() != 4 || t.size() != 4 || s[0] != t[0] || s[2] != t[2] || s[3] != t[3]) {
    throw ShapeError(std::string(where) + ": batch/spatial mismatch between " + shape_str(s) + " and " +
                     shape_str(t));
  }
}

}  // namespace

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::ffm: return "ffm";
    case FusionKind::sum: return "sum";
    case FusionKind::concat: return "concat";
    case FusionKind::none: return "none";
  }
  return "?";
}

FusionKind parse_fusion_kind(const std::string& text) {
  for (auto k : {FusionKind::ffm, FusionKind::sum, FusionKind::concat, FusionKind::none}) {
    if (to_string(k) == text) return k;
  }
  throw std::invalid_argument("unknown fusion kind '" + text + "'");
}

Ffm::Ffm(std::int64_t target_channels, std::int64_t source_channels, std::int64_t out_channels, Rng& rng)
    : out_(out_channels) {
  gate_conv_ = &add_module("gate", std::make_unique<Conv2d>(target_channels + source_channels, source_channels,
                                                            rng, kPointwise));
  target_conv_ = &add_module("target", std::make_unique<Conv2d>(target_channels, out_channels, rng, kPointwise));
  refined_conv_ = &add_module("refined", std::make_unique<Conv2d>(source_channels, out_channels, rng, kPointwise));
}

Var Ffm::gate(const Var& target, const Var& source) {
  require_aligned(target, source, "ffm");
  return sigmoid(gate_conv_->forward(concat_channels(target, source)));
}

Var Ffm::forward(const Var& target, const Var& source) {
  Var refined = mul(source, gate(target, source));
  return scale(add(target_conv_->forward(target), refined_conv_->forward(refined)), 1.0 / std::sqrt(2.0));
}

SumFusion::SumFusion(FusionSide side, std::int64_t target_channels, std::int64_t source_channels,
                     std::int64_t out_channels, Rng& rng)
    : side_(side), out_(out_channels) {
  if (side == FusionSide::image) {
    if (target_channels != source_channels) {
      throw std::invalid_argument("sum fusion: image-side branches must have equal widths");
    }
    if (target_channels != out_channels) {
      projection_ = &add_module("projection", std::make_unique<Conv2d>(target_channels, out_channels, rng, kPointwise));
    }
  } else {
    if (source_channels != out_channels) {
      throw std::invalid_argument("sum fusion: memory-side source must already have the output width");
    }
    if (target_channels != out_channels) {
      projection_ = &add_module("projection", std::make_unique<Conv2d>(target_channels, out_channels, rng, kPointwise));
    }
  }
}

Var SumFusion::forward(const Var& target, const Var& source) {
  require_aligned(target, source, "sum fusion");
  if (side_ == FusionSide::image) {
    Var s = add(target, source);
    return projection_ ? projection_->forward(s) : s;
  }
  return add(projection_ ? projection_->forward(target) : target, source);
}

ConcatFusion::ConcatFusion(FusionSide side, std::int64_t target_channels, std::int64_t source_channels,
                           std::int64_t out_channels, Rng& rng) {
  if (side == FusionSide::image) {
    out_ = target_channels + source_channels;
  } else {
    out_ = out_channels;
    projection_ = &add_module("projection", std::make_unique<Conv2d>(target_channels + source_channels,
                                                                     out_channels, rng, kPointwise));
  }
}

Var ConcatFusion::forward(const Var& target, const Var& source) {
  require_aligned(target, source, "concat fusion");
  Var c = concat_channels(target, source);
  return projection_ ? projection_->forward(c) : c;
}

Passthrough::Passthrough(std::int64_t target_channels, std::int64_t out_channels, Rng& rng) : out_(out_channels) {
  if (target_channels != out_channels) {
    projection_ = &add_module("projection", std::make_unique<Conv2d>(target_channels, out_channels, rng, kPointwise));
  }
}

Var Passthrough::forward(const Var& target, const Var& source) {
  require_aligned(target, source, "passthrough");
  return projection_ ? projection_->forward(target) : target;
}

FusionFactory builtin_fusion(FusionKind kind) {
  return [kind](FusionSide side, std::int64_t ct, std::int64_t cs, std::int64_t cout,
                Rng& rng) -> std::unique_ptr<Fusion> {
    switch (kind) {
      case FusionKind::ffm: return std::make_unique<Ffm>(ct, cs, cout, rng);
      case FusionKind::sum: return std::make_unique<SumFusion>(side, ct, cs, cout, rng);
      case FusionKind::concat: return std::make_unique<ConcatFusion>(side, ct, cs, cout, rng);
      case FusionKind::none:
        if (side == FusionSide::image) {
          throw std::invalid_argument("fusion kind 'none' is only allowed on the memory side");
        }
        return std::make_unique<Passthrough>(ct, cout, rng);
    }
    throw std::invalid_argument("unknown fusion kind");
  };
}

Fcb::Fcb(std::int64_t in_channels, std::int64_t out_channels, bool upsample, FusionKind image_side,
         FusionKind memory_side, Rng& rng)
    : Fcb(in_channels, out_channels, upsample, builtin_fusion(image_side), builtin_fusion(memory_side), rng) {}

Fcb::Fcb(std::int64_t in_channels, std::int64_t out_channels, bool upsample, const FusionFactory& image_side,
         const FusionFactory& memory_side, Rng& rng)
    : in_(in_channels), out_(out_channels), upsample_(upsample) {
  fusion_in_ = &add_module("fusion_in", image_side(FusionSide::image, in_channels, in_channels, out_channels, rng));
  const std::int64_t fused = fusion_in_->out_channels();
  bn1_ = &add_module("bn1", std::make_unique<BatchNorm2d>(fused));
  conv1_ = &add_module("conv1", std::make_unique<Conv2d>(fused, out_channels, rng));
  bn2_ = &add_module("bn2", std::make_unique<BatchNorm2d>(out_channels));
  conv2_ = &add_module("conv2", std::make_unique<Conv2d>(out_channels, out_channels, rng));
  if (fused != out_channels) {
    shortcut_ = &add_module("shortcut", std::make_unique<Conv2d>(fused, out_channels, rng, kPointwise));
  }
  fusion_out_ =
      &add_module("fusion_out", memory_side(FusionSide::memory, in_channels, out_channels, out_channels, rng));
  if (fusion_out_->out_channels() != out_channels) {
    throw std::invalid_argument("fcb: memory-side fusion must produce " + std::to_string(out_channels) + " channels");
  }
}

std::pair<Var, Var> Fcb::forward(const Var& image, const Var& memory) {
  if (image.shape() != memory.shape()) {
    throw ShapeError("fcb: branch shapes differ, image " + shape_str(image.shape()) + " vs memory " +
                     shape_str(memory.shape()));
  }
  if (image.shape().size() != 4 || image.shape()[1] != in_) {
    throw ShapeError("fcb: expected " + std::to_string(in_) + " input channels, got " + shape_str(image.shape()));
  }
  Var u_i = upsample_ ? upsample_nearest2x(image) : image;
  Var u_m = upsample_ ? upsample_nearest2x(memory) : memory;
  Var h = fusion_in_->forward(u_i, u_m);
  Var t = conv1_->forward(relu(bn1_->forward(h)));
  t = conv2_->forward(relu(bn2_->forward(t)));
  Var f_i = add(shortcut_ ? shortcut_->forward(h) : h, t);
  Var f_m = fusion_out_->forward(u_m, f_i);
  return {f_i, f_m};
}

ResidualBlock::ResidualBlock(std::int64_t in_channels, std::int64_t out_channels, bool upsample, Rng& rng)
    : upsample_(upsample) {
  bn1_ = &add_module("bn1", std::make_unique<BatchNorm2d>(in_channels));
  conv1_ = &add_module("conv1", std::make_unique<Conv2d>(in_channels, out_channels, rng));
  bn2_ = &add_module("bn2", std::make_unique<BatchNorm2d>(out_channels));
  conv2_ = &add_module("conv2", std::make_unique<Conv2d>(out_channels, out_channels, rng));
  if (in_channels != out_channels) {
    shortcut_ = &add_module("shortcut", std::make_unique<Conv2d>(in_channels, out_channels, rng, kPointwise));
  }
}

Var ResidualBlock::forward(const Var& x) {
  Var h = relu(bn1_->forward(x));
  if (upsample_) h = upsample_nearest2x(h);
  h = conv2_->forward(relu(bn2_->forward(conv1_->forward(h))));
  Var s = upsample_ ? upsample_nearest2x(x) : x;
  if (shortcut_) s = shortcut_->forward(s);
  return add(s, h);
}

DiscriminatorBlock::DiscriminatorBlock(std::int64_t in_channels, std::int64_t out_channels, bool downsample,
                                       bool first, Rng& rng)
    : downsample_(downsample), first_(first) {
  const ConvOptions conv3{.kernel = 3, .stride = 1, .pad = 1, .bias = true, .spectral = true};
  ConvOptions conv1x1 = kPointwise;
  conv1x1.spectral = true;
  conv1_ = &add_module("conv1", std::make_unique<Conv2d>(in_channels, out_channels, rng, conv3));
  conv2_ = &add_module("conv2", std::make_unique<Conv2d>(out_channels, out_channels, rng, conv3));
  if (first || in_channels != out_channels || downsample) {
    shortcut_ = &add_module("shortcut", std::make_unique<Conv2d>(in_channels, out_channels, rng, conv1x1));
  }
}

Var DiscriminatorBlock::forward(const Var& x) {
  Var h = first_ ? x : relu(x);
  h = conv2_->forward(relu(conv1_->forward(h)));
  if (downsample_) h = avgpool2x(h);
  Var s = x;
  if (first_) {
    if (downsample_) s = avgpool2x(s);
    s = shortcut_->forward(s);
  } else if (shortcut_) {
    s = shortcut_->forward(s);
    if (downsample_) s = avgpool2x(s);
  }
  return add(s, h);
}

}  // namespace fcbgan
