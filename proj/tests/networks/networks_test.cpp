#include <gtest/gtest.h>

#include <algorithm>

#include "fcbgan/networks/networks.hpp"
#include "test_support.hpp"

using namespace fcbgan;
using fcbgan::testing::random_var;

namespace {

const BlockKind kAllKinds[] = {BlockKind::resblock, BlockKind::fcb, BlockKind::fcb_s, BlockKind::fcb_c,
                               BlockKind::fcb_dagger};

NetworkSpec tiny(BlockKind kind, std::uint64_t seed = 0) {
  NetworkSpec s;
  s.block_kind = kind;
  s.g_channels = 16;
  s.d_channels = 8;
  s.latent_dim = 8;
  s.seed = seed;
  return s;
}

std::int64_t total(const Module& m) { return count_parameters(m).back().count; }

}  // namespace

TEST(NetworkSpec, TextRoundTrip) {
  for (BlockKind k : kAllKinds) {
    NetworkSpec s = tiny(k, 1234567890123ULL);
    s.depth = 2;
    const std::string text = s.to_text();
    NetworkSpec back = NetworkSpec::from_text(text);
    EXPECT_EQ(back, s);
    EXPECT_EQ(back.to_text(), text);
  }
}

TEST(NetworkSpec, ParseErrors) {
  EXPECT_THROW(NetworkSpec::from_text("block_kind = grb\n"), std::invalid_argument);
  EXPECT_THROW(NetworkSpec::from_text("g_channels = 12x\n"), std::invalid_argument);
  EXPECT_THROW(NetworkSpec::from_text("colour = red\n"), std::invalid_argument);
  EXPECT_NO_THROW(NetworkSpec::from_text("colour = red\n", true));
  EXPECT_THROW(NetworkSpec::from_text("depth = 0\n"), std::invalid_argument);
  NetworkSpec s = NetworkSpec::from_text("# comment\n  g_channels=64   # trailing\n\n");
  EXPECT_EQ(s.g_channels, 64);
  EXPECT_EQ(s.block_kind, BlockKind::fcb);
}

TEST(NetworkSpec, WidthScaling) {
  NetworkSpec s;
  EXPECT_EQ(s.width_scaled(4).g_channels, 64);
  EXPECT_EQ(s.width_scaled(4).d_channels, 32);
  EXPECT_THROW(s.width_scaled(3), std::invalid_argument);
}

TEST(Generator, OutputShapeAndRange) {
  for (BlockKind k : kAllKinds) {
    Generator g(tiny(k));
    Rng r(1);
    Tensor y = g.forward(Var(r.normal_tensor({7, 8}, 3.0))).value();
    EXPECT_EQ(y.shape(), (Shape{7, 3, 32, 32})) << to_string(k);
    for (double v : y.to_vector()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Generator, RangeHoldsForExtremeParameters) {
  Generator g(tiny(BlockKind::fcb));
  for (auto* p : g.parameters()) {
    Tensor& t = p->mutable_value();
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, t.at(i) * 50.0);
  }
  Rng r(2);
  for (double v : g.forward(Var(r.normal_tensor({2, 8}))).value().to_vector()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Generator, ZeroLatentIsDeterministicInEval) {
  Generator g(tiny(BlockKind::fcb));
  Rng r(3);
  g.forward(Var(r.normal_tensor({4, 8})));
  g.set_training(false);
  Var z(Tensor::zeros({2, 8}));
  EXPECT_TRUE(g.forward(z).value().identical(g.forward(z).value()));
}

TEST(Generator, LatentMismatchRaises) {
  Generator g(tiny(BlockKind::fcb));
  EXPECT_THROW(g.forward(Var(Tensor::zeros({2, 9}))), ShapeError);
}

TEST(Generator, ResblockHasNoMemoryMachinery) {
  Generator res(tiny(BlockKind::resblock)), fcb(tiny(BlockKind::fcb));
  EXPECT_FALSE(res.has_memory());
  EXPECT_TRUE(fcb.has_memory());
  for (const auto& np : res.named_parameters()) EXPECT_EQ(np.name.find("image_constant"), std::string::npos);
}

TEST(Generator, MeanPixelGradcheckWrtLatent) {
  for (BlockKind k : kAllKinds) {
    NetworkSpec s = tiny(k);
    Generator g(s);
    g.to(DType::f64);
    g.set_stats_frozen(true);
    Rng r(4);
    Var z = random_var(r, {2, 8});
    auto res = gradcheck([&] { return mean(g.forward(z)); }, {z}, {"z"});
    EXPECT_LT(res.max_rel_error, 1e-4) << to_string(k);
  }
}

TEST(Discriminator, ScoresPerSample) {
  Discriminator d(tiny(BlockKind::fcb));
  Rng r(5);
  EXPECT_EQ(d.forward(Var(r.normal_tensor({5, 3, 32, 32}))).shape(), (Shape{5}));
  EXPECT_THROW(d.forward(Var(Tensor::zeros({2, 3, 16, 16}))), ShapeError);
  EXPECT_THROW(d.forward(Var(Tensor::zeros({2, 1, 32, 32}))), ShapeError);
}

TEST(Discriminator, ZeroWeightsRaiseInsteadOfDividing) {
  Discriminator d(tiny(BlockKind::fcb));
  for (auto* p : d.parameters()) p->mutable_value().fill(0.0);
  EXPECT_THROW(d.forward(Var(Tensor::zeros({2, 3, 32, 32}))), ZeroSpectrumError);
}

TEST(Discriminator, SilentFeaturesGiveHeadBias) {
  // Zero biases everywhere and a zero input leave every feature at zero, so
  // the score is exactly the head bias.
  Discriminator d(tiny(BlockKind::fcb));
  for (const auto& np : d.named_parameters()) {
    if (np.name.ends_with("bias")) np.param->mutable_value().fill(0.0);
  }
  d.head().bias().mutable_value().fill(0.75);
  for (double v : d.forward(Var(Tensor::zeros({3, 3, 32, 32}))).value().to_vector()) EXPECT_EQ(v, 0.75f);
}

TEST(Discriminator, BatchPermutationEquivariance) {
  Discriminator d(tiny(BlockKind::fcb));
  d.to(DType::f64);
  d.set_training(false);
  Rng r(6);
  Tensor x = r.normal_tensor({4, 3, 32, 32}, 1.0, DType::f64);
  const std::int64_t perm[] = {2, 0, 3, 1}, per = 3 * 32 * 32;
  Tensor xp(x.shape(), DType::f64);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < per; ++j) xp.set(i * per + j, x.at(perm[i] * per + j));
  Tensor a = d.forward(Var(x)).value(), b = d.forward(Var(xp)).value();
  for (std::int64_t i = 0; i < 4; ++i) EXPECT_EQ(b.at(i), a.at(perm[i]));
}

TEST(Discriminator, InputGradientMatchesFiniteDifferences) {
  Discriminator d(tiny(BlockKind::fcb));
  d.to(DType::f64);
  d.set_training(false);
  Rng r(7);
  Var x = random_var(r, {2, 3, 32, 32});
  GradCheckOptions o;
  o.max_coords = 200;
  EXPECT_LT(gradcheck([&] { return sum(d.forward(x)); }, {x}, {"x"}, o).max_rel_error, 1e-3);
}

TEST(CountParameters, ResblockVersusSumVariant) {
  NetworkSpec s;
  s.block_kind = BlockKind::resblock;
  Generator res(s);
  s.block_kind = BlockKind::fcb_s;
  Generator sum_g(s);
  s.block_kind = BlockKind::fcb;
  Generator fcb_g(s);
  EXPECT_EQ(total(sum_g) - total(res), 256 * 4 * 4);
  EXPECT_GT(total(fcb_g), total(sum_g));
  EXPECT_EQ(format_param_table(count_parameters(fcb_g)), format_param_table(count_parameters(fcb_g)));
}

TEST(CountParameters, TableRowsSumToTotal) {
  Generator g(tiny(BlockKind::fcb));
  auto rows = count_parameters(g);
  std::int64_t sum = 0;
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) sum += rows[i].count;
  EXPECT_EQ(sum, rows.back().count);
  EXPECT_EQ(rows.back().count, g.parameter_count());
  // Direct parameters come before child modules.
  EXPECT_EQ(rows.front().name, "image_constant");
  EXPECT_EQ(rows[1].name, "stem");
  EXPECT_EQ(rows[2].name, "blocks.0");
}

TEST(Networks, WidthScaledConfigsRun) {
  for (std::int64_t k : {16, 4, 1}) {
    for (BlockKind kind : kAllKinds) {
      NetworkSpec s;
      s.block_kind = kind;
      s = s.width_scaled(k);
      Generator g(s);
      Discriminator d(s);
      NoGradGuard ng;
      Rng r(8);
      Var img = g.forward(Var(r.normal_tensor({2, s.latent_dim})));
      EXPECT_EQ(d.forward(img).shape(), (Shape{2})) << k << " " << to_string(kind);
      if (k == 1) break;  // full width is slow; one kind suffices to show it builds and runs
    }
  }
}
