#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fcbgan/blocks/blocks.hpp"

namespace fcbgan {

enum class BlockKind { resblock, fcb, fcb_s, fcb_c, fcb_dagger };

std::string to_string(BlockKind kind);
BlockKind parse_block_kind(const std::string& text);
/// Image-side and memory-side fusion for an FCB kind; resblock raises.
std::pair<FusionKind, FusionKind> fusion_kinds(BlockKind kind);

struct NetworkSpec {
  BlockKind block_kind = BlockKind::fcb;
  std::int64_t g_channels = 256;
  std::int64_t d_channels = 128;
  int depth = 3;  // generator up-blocks; output side is 4 * 2^depth
  std::int64_t latent_dim = 128;
  std::uint64_t seed = 0;

  std::int64_t resolution() const { return std::int64_t{4} << depth; }
  /// Same topology with both widths divided by `k`.
  NetworkSpec width_scaled(std::int64_t k) const;
  void validate() const;

  /// "key = value" lines, one per field, in a fixed order.
  std::string to_text() const;
  /// Reads the keys written by to_text; unknown keys raise unless `allow_unknown`,
  /// in which case they are ignored (used when the network keys are embedded in a larger config).
  static NetworkSpec from_text(const std::string& text, bool allow_unknown = false);

  bool operator==(const NetworkSpec&) const = default;
};

class Generator : public Module {
 public:
  explicit Generator(const NetworkSpec& spec);
  /// FCB generator whose fusions come from user factories (block kind is ignored).
  Generator(const NetworkSpec& spec, const FusionFactory& image_side, const FusionFactory& memory_side);

  /// z [B, latent_dim] -> images [B, 3, R, R] in [-1, 1].
  Var forward(const Var& z);
  const NetworkSpec& spec() const { return spec_; }
  bool has_memory() const { return image_constant_ != nullptr; }

 private:
  void build(const FusionFactory* image_side, const FusionFactory* memory_side);

  NetworkSpec spec_;
  Dense* stem_;
  Param* image_constant_ = nullptr;
  std::vector<ResidualBlock*> res_blocks_;
  std::vector<Fcb*> fcb_blocks_;
  BatchNorm2d* head_bn_;
  Conv2d* head_conv_;
};

class Discriminator : public Module {
 public:
  explicit Discriminator(const NetworkSpec& spec);

  /// x [B, 3, R, R] -> scores [B].
  Var forward(const Var& x);
  const NetworkSpec& spec() const { return spec_; }
  Dense& head() { return *head_; }

 private:
  NetworkSpec spec_;
  std::vector<DiscriminatorBlock*> blocks_;
  Dense* head_;
};

struct ParamRow {
  std::string name;
  std::int64_t count;
};

/// One row per top-level child or direct parameter, in registration order,
/// followed by a "total" row.
std::vector<ParamRow> count_parameters(const Module& net);
std::string format_param_table(const std::vector<ParamRow>& rows);

}  // namespace fcbgan
