#include "fcbgan/networks/networks.hpp"

#include <map>
#include <sstream>
#include <stdexcept>

namespace fcbgan {

namespace {

const std::pair<BlockKind, const char*> kBlockNames[] = {{BlockKind::resblock, "resblock"},
                                                         {BlockKind::fcb, "fcb"},
                                                         {BlockKind::fcb_s, "fcb_s"},
                                                         {BlockKind::fcb_c, "fcb_c"},
                                                         {BlockKind::fcb_dagger, "fcb_dagger"}};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty()) {
    throw std::invalid_argument("network spec: '" + key + "' expects an integer, got '" + value + "'");
  }
  return v;
}

}  // namespace

std::string to_string(BlockKind kind) {
  for (const auto& [k, n] : kBlockNames)
    if (k == kind) return n;
  return "?";
}

BlockKind parse_block_kind(const std::string& text) {
  for (const auto& [k, n] : kBlockNames)
    if (text == n) return k;
  throw std::invalid_argument("unknown block kind '" + text + "'");
}

std::pair<FusionKind, FusionKind> fusion_kinds(BlockKind kind) {
  switch (kind) {
    case BlockKind::fcb: return {FusionKind::ffm, FusionKind::ffm};
    case BlockKind::fcb_s: return {FusionKind::sum, FusionKind::sum};
    case BlockKind::fcb_c: return {FusionKind::concat, FusionKind::concat};
    case BlockKind::fcb_dagger: return {FusionKind::ffm, FusionKind::none};
    case BlockKind::resblock: break;
  }
  throw std::invalid_argument("resblock has no fusion");
}

NetworkSpec NetworkSpec::width_scaled(std::int64_t k) const {
  if (k < 1 || g_channels % k || d_channels % k) {
    throw std::invalid_argument("width scale " + std::to_string(k) + " does not divide the channel widths");
  }
  NetworkSpec s = *this;
  s.g_channels /= k;
  s.d_channels /= k;
  return s;
}

void NetworkSpec::validate() const {
  if (g_channels < 1 || d_channels < 1 || latent_dim < 1) {
    throw std::invalid_argument("network spec: widths and latent_dim must be positive");
  }
  if (depth < 1 || depth > 6) throw std::invalid_argument("network spec: depth must be in [1, 6]");
}

std::string NetworkSpec::to_text() const {
  std::ostringstream os;
  os << "block_kind = " << to_string(block_kind) << "\n"
     << "g_channels = " << g_channels << "\n"
     << "d_channels = " << d_channels << "\n"
     << "depth = " << depth << "\n"
     << "latent_dim = " << latent_dim << "\n"
     << "seed = " << seed << "\n";
  return os.str();
}

NetworkSpec NetworkSpec::from_text(const std::string& text, bool allow_unknown) {
  NetworkSpec s;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("network spec: expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "block_kind") {
      s.block_kind = parse_block_kind(value);
    } else if (key == "g_channels") {
      s.g_channels = parse_int(key, value);
    } else if (key == "d_channels") {
      s.d_channels = parse_int(key, value);
    } else if (key == "depth") {
      s.depth = static_cast<int>(parse_int(key, value));
    } else if (key == "latent_dim") {
      s.latent_dim = parse_int(key, value);
    } else if (key == "seed") {
      const auto v = parse_int(key, value);
      if (v < 0) throw std::invalid_argument("network spec: seed must be non-negative");
      s.seed = static_cast<std::uint64_t>(v);
    } else if (!allow_unknown) {
      throw std::invalid_argument("network spec: unknown key '" + key + "'");
    }
  }
  s.validate();
  return s;
}

Generator::Generator(const NetworkSpec& spec) : spec_(spec) {
  spec_.validate();
  if (spec_.block_kind == BlockKind::resblock) {
    build(nullptr, nullptr);
  } else {
    auto [in, mem] = fusion_kinds(spec_.block_kind);
    const FusionFactory a = builtin_fusion(in), b = builtin_fusion(mem);
    build(&a, &b);
  }
}

Generator::Generator(const NetworkSpec& spec, const FusionFactory& image_side, const FusionFactory& memory_side)
    : spec_(spec) {
  spec_.validate();
  build(&image_side, &memory_side);
}

void Generator::build(const FusionFactory* image_side, const FusionFactory* memory_side) {
  Rng rng(Rng::derive(spec_.seed, 1));
  const std::int64_t c = spec_.g_channels;
  stem_ = &add_module("stem", std::make_unique<Dense>(spec_.latent_dim, 16 * c, rng));
  if (image_side) image_constant_ = &add_param("image_constant", rng.normal_tensor({1, c, 4, 4}));
  for (int i = 0; i < spec_.depth; ++i) {
    const std::string name = "blocks." + std::to_string(i);
    if (image_side) {
      fcb_blocks_.push_back(&add_module(name, std::make_unique<Fcb>(c, c, true, *image_side, *memory_side, rng)));
    } else {
      res_blocks_.push_back(&add_module(name, std::make_unique<ResidualBlock>(c, c, true, rng)));
    }
  }
  head_bn_ = &add_module("head_bn", std::make_unique<BatchNorm2d>(c));
  head_conv_ = &add_module("head_conv", std::make_unique<Conv2d>(c, 3, rng));
}

Var Generator::forward(const Var& z) {
  if (z.shape().size() != 2 || z.shape()[1] != spec_.latent_dim) {
    throw ShapeError("generator: expected latent [B, " + std::to_string(spec_.latent_dim) + "], got " +
                     shape_str(z.shape()));
  }
  const std::int64_t b = z.shape()[0], c = spec_.g_channels;
  Var h = reshape(stem_->forward(z), {b, c, 4, 4});
  if (image_constant_) {
    Var image = broadcast_batch(image_constant_->var(), b);
    Var memory = h;
    for (Fcb* block : fcb_blocks_) std::tie(image, memory) = block->forward(image, memory);
    h = image;
  } else {
    for (ResidualBlock* block : res_blocks_) h = block->forward(h);
  }
  return fcbgan::tanh(head_conv_->forward(relu(head_bn_->forward(h))));
}

Discriminator::Discriminator(const NetworkSpec& spec) : spec_(spec) {
  spec_.validate();
  Rng rng(Rng::derive(spec_.seed, 2));
  const std::int64_t c = spec_.d_channels;
  blocks_.push_back(&add_module("blocks.0", std::make_unique<DiscriminatorBlock>(3, c, true, true, rng)));
  blocks_.push_back(&add_module("blocks.1", std::make_unique<DiscriminatorBlock>(c, c, true, false, rng)));
  blocks_.push_back(&add_module("blocks.2", std::make_unique<DiscriminatorBlock>(c, c, false, false, rng)));
  blocks_.push_back(&add_module("blocks.3", std::make_unique<DiscriminatorBlock>(c, c, false, false, rng)));
  head_ = &add_module("head", std::make_unique<Dense>(c, 1, rng, true));
}

Var Discriminator::forward(const Var& x) {
  const std::int64_t r = spec_.resolution();
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != r || s[3] != r) {
    throw ShapeError("discriminator: expected [B, 3, " + std::to_string(r) + ", " + std::to_string(r) + "], got " +
                     shape_str(s));
  }
  Var h = x;
  for (DiscriminatorBlock* block : blocks_) h = block->forward(h);
  Var scores = head_->forward(global_sum_pool(relu(h)));
  return reshape(scores, {s[0]});
}

std::vector<ParamRow> count_parameters(const Module& net) {
  std::vector<ParamRow> rows;
  std::map<std::string, std::size_t> index;
  std::int64_t total = 0;
  for (const auto& np : net.named_parameters()) {
    std::string group = np.name;
    // Group "blocks.N.*" by block, everything else by its first path component.
    auto dot = group.find('.');
    if (dot != std::string::npos && group.compare(0, dot, "blocks") == 0) dot = group.find('.', dot + 1);
    if (dot != std::string::npos) group.resize(dot);
    auto [it, fresh] = index.emplace(group, rows.size());
    if (fresh) rows.push_back({group, 0});
    rows[it->second].count += np.param->numel();
    total += np.param->numel();
  }
  rows.push_back({"total", total});
  return rows;
}

std::string format_param_table(const std::vector<ParamRow>& rows) {
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  std::ostringstream os;
  for (const auto& r : rows) {
    os << r.name << std::string(width - r.name.size() + 2, ' ') << r.count << "\n";
  }
  return os.str();
}

}  // namespace fcbgan
