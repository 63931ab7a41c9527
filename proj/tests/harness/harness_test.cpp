#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "fcbgan/harness/checks.hpp"
#include "fcbgan/harness/harness.hpp"
#include "fcbgan/substrate/layers.hpp"

using namespace fcbgan;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("fcbgan_harness_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

RunConfig small_config(const std::string& extra = "", int iters = 3) {
  return RunConfig::from_text(
      "block_kind = fcb\n"
      "g_channels = 16\n"
      "d_channels = 8\n"
      "latent_dim = 8\n"
      "seed = 7\n"
      "batch_d = 4\n"
      "total_g_iters = " + std::to_string(iters) + "\n"
      "eval_n = 40\n"
      "data = gauss-blobs:4\n" +
      extra);
}

double checksum(const Module& m) {
  double s = 0;
  for (const auto& np : m.named_parameters()) {
    const Tensor& t = np.param->value();
    for (std::int64_t i = 0; i < t.numel(); ++i) s += t.at(i) * static_cast<double>(i % 13 + 1);
  }
  return s;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

}  // namespace

// ---- config ----------------------------------------------------------------

TEST(RunConfig, DefaultsFollowTrainingProtocol) {
  const RunConfig c = RunConfig::from_text("");
  EXPECT_DOUBLE_EQ(c.adam.lr, 2e-4);
  EXPECT_DOUBLE_EQ(c.adam.beta1, 0.0);
  EXPECT_DOUBLE_EQ(c.adam.beta2, 0.9);
  EXPECT_DOUBLE_EQ(c.adam.eps, 1e-8);
  EXPECT_EQ(c.n_dis, 5);
  EXPECT_EQ(c.batch_d, 64);
  EXPECT_EQ(c.batch_g, 128);
  EXPECT_EQ(c.loss.lazy_interval, 16);
  EXPECT_FALSE(c.batch_g_deviates());
}

TEST(RunConfig, GeneratorBatchDefaultsToTwiceDiscriminatorBatch) {
  EXPECT_EQ(RunConfig::from_text("batch_d = 32").batch_g, 64);
  const RunConfig c = RunConfig::from_text("batch_d = 32\nbatch_g = 32");
  EXPECT_EQ(c.batch_g, 32);
  EXPECT_TRUE(c.batch_g_deviates());
}

TEST(RunConfig, TextRoundTripKeepsTrajectoryHash) {
  const RunConfig a = small_config("loss = ns_logistic_r1\ngamma = 0.5\n");
  const RunConfig b = RunConfig::from_text(a.to_text());
  EXPECT_EQ(a.trajectory_hash(), b.trajectory_hash());
  EXPECT_EQ(a.to_text(), b.to_text());
  EXPECT_EQ(b.loss.kind, LossKind::ns_logistic_r1);
  EXPECT_NE(a.trajectory_hash(), small_config("lr = 1e-4\n").trajectory_hash());
}

TEST(RunConfig, CommentsAndWhitespaceAreIgnored) {
  const RunConfig c = RunConfig::from_text("  # header\n n_dis =  3   # fewer\n\n");
  EXPECT_EQ(c.n_dis, 3);
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(RunConfig::from_text("nope = 1"), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_text("n_dis = 1\nn_dis = 2"), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_text("n_dis = five"), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_text("n_dis = 0"), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_text("lr = -1"), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_text("beta2 = 1"), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_text("depth = 4"), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_text("embedder = inception"), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_text("loss = wasserstein"), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_text("just a line"), std::invalid_argument);
}

// ---- optimizer ---------------------------------------------------------------

TEST(Adam, MatchesHandComputedSteps) {
  struct P : Module {
    Param* p;
    P() { p = &add_param("w", Tensor::from({2}, {1.0, -2.0}, DType::f64)); }
  } m;
  AdamOptions o;
  o.lr = 0.1;
  o.beta1 = 0.5;
  o.beta2 = 0.9;
  o.eps = 1e-8;
  Adam opt(m.named_parameters(), o);
  const std::vector<std::vector<double>> grads = {{0.5, -1.0}, {0.25, 2.0}};
  std::vector<double> w = {1.0, -2.0}, mm = {0, 0}, vv = {0, 0};
  for (int t = 1; t <= 2; ++t) {
    m.p->var().mutable_grad() = Tensor::from({2}, grads[t - 1], DType::f64);
    const double norm = opt.step();
    EXPECT_NEAR(norm, std::hypot(grads[t - 1][0], grads[t - 1][1]), 1e-15);
    for (int j = 0; j < 2; ++j) {
      const double g = grads[t - 1][j];
      mm[j] = 0.5 * mm[j] + 0.5 * g;
      vv[j] = 0.9 * vv[j] + 0.1 * g * g;
      const double mh = mm[j] / (1 - std::pow(0.5, t)), vh = vv[j] / (1 - std::pow(0.9, t));
      w[j] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(m.p->value().at(j), w[j], 1e-12) << "t=" << t << " j=" << j;
    }
  }
  EXPECT_EQ(opt.steps(), 2);
}

TEST(Adam, SkipsParametersWithoutGradient) {
  struct P : Module {
    Param* p;
    P() { p = &add_param("w", Tensor::from({1}, {3.0}, DType::f64)); }
  } m;
  Adam opt(m.named_parameters(), AdamOptions{});
  EXPECT_EQ(opt.step(), 0.0);
  EXPECT_EQ(m.p->value().at(0), 3.0);
}

// ---- training loop -------------------------------------------------------------

TEST(Trainer, ThreeIterationsLogFifteenDiscriminatorAndThreeGeneratorRecords) {
  Trainer t(small_config());
  t.run();
  EXPECT_EQ(t.log().count("d"), 15);
  EXPECT_EQ(t.log().count("g"), 3);
  EXPECT_EQ(t.iterations_done(), 3);
  EXPECT_EQ(t.d_steps_done(), 15);
}

TEST(Trainer, StepNumbersAreMonotoneAndBatchSizesMatchConfig) {
  const RunConfig cfg = small_config("batch_g = 6\n");
  Trainer t(cfg);
  t.run();
  std::int64_t last = -1;
  for (const auto& r : t.log().records()) {
    const std::string kind = r["kind"];
    if (kind == "header") {
      EXPECT_TRUE(r["batch_g_deviation"].get<bool>());
      continue;
    }
    const std::int64_t step = r["step"];
    EXPECT_GT(step, last);
    last = step;
    if (kind == "d") {
      EXPECT_EQ(r["batch_real"].get<std::int64_t>(), cfg.batch_d);
      EXPECT_EQ(r["batch_z"].get<std::int64_t>(), cfg.batch_d);
    } else {
      EXPECT_EQ(r["batch_z"].get<std::int64_t>(), cfg.batch_g);
    }
  }
}

TEST(Trainer, SameSeedGivesIdenticalLogs) {
  Trainer a(small_config()), b(small_config());
  a.run();
  b.run();
  ASSERT_FALSE(a.log().deterministic_text().empty());
  EXPECT_EQ(a.log().deterministic_text(), b.log().deterministic_text());

  RunConfig other = small_config();
  other.net.seed = 8;
  Trainer d(other);
  d.run();
  EXPECT_NE(a.log().deterministic_text(), d.log().deterministic_text());
}

TEST(Trainer, DiscriminatorAndGeneratorStepsTouchDisjointParameters) {
  const RunConfig cfg = small_config();
  Generator g(cfg.net);
  Discriminator d(cfg.net);
  Adam opt_g(g.named_parameters(), cfg.adam), opt_d(d.named_parameters(), cfg.adam);
  auto data = open_dataset(cfg.data, 1);
  Rng rng(2);

  const double g0 = checksum(g), d0 = checksum(d);
  Tensor fake;
  {
    NoGradGuard ng;
    fake = g.forward(Var(rng.normal_tensor({4, cfg.net.latent_dim}))).value();
  }
  discriminator_step([&](const Var& x) { return d.forward(x); }, d, opt_d, cfg.loss, data->next_batch(4), fake, 0);
  const double d1 = checksum(d);
  EXPECT_EQ(checksum(g), g0);
  EXPECT_NE(d1, d0);

  generator_step(g, d, opt_g, cfg.loss.kind, rng.normal_tensor({8, cfg.net.latent_dim}));
  EXPECT_EQ(checksum(d), d1);
  EXPECT_NE(checksum(g), g0);
}

TEST(Trainer, LazyR1FiresOnCeilStepsOver16) {
  Trainer t(small_config("loss = ns_logistic_r1\n", 7));
  t.run();
  const std::int64_t steps = t.d_steps_done();
  ASSERT_EQ(steps, 35);
  std::int64_t fired = 0;
  for (const auto& r : t.log().records()) {
    if (r["kind"] != "d") continue;
    const bool has = r.contains("r1");
    EXPECT_EQ(has, r["d_step"].get<std::int64_t>() % 16 == 0);
    fired += has;
  }
  EXPECT_EQ(fired, (steps + 15) / 16);
}

TEST(Trainer, HingeRunLogsNoR1) {
  Trainer t(small_config());
  t.run();
  for (const auto& r : t.log().records()) EXPECT_FALSE(r.contains("r1"));
}

TEST(Trainer, ResumeReproducesUninterruptedRunBitForBit) {
  TempDir dir;
  RunConfig cfg = small_config("loss = ns_logistic_r1\nlazy_interval = 4\n", 4);
  Trainer full(cfg);
  full.run();

  Trainer first(cfg);
  first.run(2);
  save_checkpoint(first.checkpoint(), dir.file("mid.fcb"));
  Trainer second(cfg, load_checkpoint(dir.file("mid.fcb")));
  second.run();

  EXPECT_EQ(first.log().deterministic_text() + second.log().deterministic_text(), full.log().deterministic_text());
  const Checkpoint a = full.checkpoint(), b = second.checkpoint();
  for (const auto& [name, t] : a.tensors) EXPECT_TRUE(bit_equal(t, b.get_tensor(name))) << name;
  EXPECT_EQ(a.meta.at("z_rng"), b.meta.at("z_rng"));
  EXPECT_EQ(a.meta.at("data_state"), b.meta.at("data_state"));
}

TEST(Trainer, ResumeRejectsDifferentTrajectory) {
  Trainer t(small_config());
  t.run(1);
  EXPECT_THROW(Trainer(small_config("lr = 1e-3\n"), t.checkpoint()), std::invalid_argument);
}

TEST(Trainer, WritesLogCheckpointsAndSamples) {
  TempDir dir;
  Trainer t(small_config("eval_every = 1\nout_dir = " + dir.str() + "\n", 2));
  t.run();
  EXPECT_TRUE(fs::exists(dir.file("train_log.jsonl")));
  EXPECT_TRUE(fs::exists(dir.file("metrics.jsonl")));
  EXPECT_TRUE(fs::exists(dir.file("ckpt_1.fcb")));
  EXPECT_TRUE(fs::exists(dir.file("ckpt_2.fcb")));
  EXPECT_TRUE(fs::exists(dir.file("final.fcb")));
  EXPECT_TRUE(fs::exists(dir.file("samples_2.png")));
  EXPECT_EQ(t.reports().size(), 2u);
  const Checkpoint ck = load_checkpoint(dir.file("final.fcb"));
  EXPECT_EQ(ck.get_meta("r1_grad_mode"), "double_backprop");
  EXPECT_EQ(ck.get_meta("iter"), "2");
}

TEST(Trainer, NonFiniteLossAbortsWithDiagnosticCheckpoint) {
  TempDir dir;
  Trainer t(small_config("out_dir = " + dir.str() + "\n"));
  Param* p = t.discriminator().named_parameters().back().param;
  p->mutable_value().set(0, std::numeric_limits<double>::quiet_NaN());
  try {
    t.iteration();
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.checkpoint_path(), dir.file("diagnostic.fcb"));
  }
  const Checkpoint ck = load_checkpoint(dir.file("diagnostic.fcb"));
  EXPECT_FALSE(ck.get_meta("abort_reason").empty());
  EXPECT_EQ(t.log().count("abort"), 1);
}

// Frozen G emitting a point mass at -1, real data a point mass at +1, linear
// D(x) = a x + b. The regularized logistic objective in a is
// 2 softplus(-a) + gamma/2 a^2, whose minimizer gives the reference r1.
TEST(Trainer, LinearDiscriminatorR1ConvergesToOneDimensionalOptimum) {
  Rng rng(1);
  Dense d(1, 1, rng);
  d.to(DType::f64);
  AdamOptions ao;
  ao.lr = 2e-3;
  Adam opt(d.named_parameters(), ao);
  LossConfig lc;
  lc.kind = LossKind::ns_logistic_r1;
  lc.gamma = 1.0;
  lc.lazy_interval = 1;
  const Tensor real = Tensor::full({8, 1}, 1.0, DType::f64), fake = Tensor::full({8, 1}, -1.0, DType::f64);
  auto forward = [&](const Var& x) { return reshape(d.forward(x), {x.shape()[0]}); };
  double last_r1 = 0;
  for (int s = 0; s < 4000; ++s) {
    const DStepResult r = discriminator_step(forward, d, opt, lc, real, fake, s);
    ASSERT_TRUE(r.r1.has_value());
    last_r1 = *r.r1;
  }

  auto objective = [&](double a) { return 2.0 * std::log1p(std::exp(-a)) + 0.5 * lc.gamma * a * a; };
  double lo = 0, hi = 10;
  for (int i = 0; i < 300; ++i) {
    const double m1 = lo + (hi - lo) / 3, m2 = hi - (hi - lo) / 3;
    if (objective(m1) < objective(m2)) {
      hi = m2;
    } else {
      lo = m1;
    }
  }
  const double a_star = 0.5 * (lo + hi);
  const double r1_star = 0.5 * lc.gamma * a_star * a_star;
  EXPECT_NEAR(last_r1, r1_star, 0.1 * r1_star);
}

// ---- sampling and evaluation -------------------------------------------------------

TEST(Sample, SameSeedIdenticalDifferentSeedsDiffer) {
  Trainer t(small_config());
  t.run(1);
  const Checkpoint ck = t.checkpoint();
  const Tensor a = sample_images(ck, 5, 11), b = sample_images(ck, 5, 11), c = sample_images(ck, 5, 12);
  EXPECT_TRUE(bit_equal(a, b));
  double diff = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.at(i) - c.at(i)));
  EXPECT_GT(diff, 0.0);
  EXPECT_EQ(a.shape(), (Shape{5, 3, 32, 32}));
}

TEST(Sample, SixtyFourImagesMakeOneEightByEightGrid) {
  TempDir dir;
  Trainer t(small_config());
  t.run(1);
  const auto paths = write_sample_grids(sample_images(t.checkpoint(), 64, 3), dir.file("grid.png"));
  ASSERT_EQ(paths.size(), 1u);
  const RgbImage img = read_png(paths[0]);
  EXPECT_EQ(img.width, 8 * 32);
  EXPECT_EQ(img.height, 8 * 32);

  const auto more = write_sample_grids(sample_images(t.checkpoint(), 65, 3), dir.file("many.png"));
  ASSERT_EQ(more.size(), 2u);
  EXPECT_EQ(more[0], dir.file("many_0.png"));
}

TEST(Sample, UsesRunningStatisticsAfterTraining) {
  Trainer t(small_config());
  t.run(1);
  const Checkpoint ck = t.checkpoint();
  // One image alone must match the same latent inside a larger batch.
  const Tensor z = sample_latents(6, 8, 4);
  auto g = load_generator(ck);
  const Tensor all = generate(*g, z);
  const Tensor one = generate(*g, z, 1);
  double diff = 0;
  for (std::int64_t i = 0; i < all.numel(); ++i) diff = std::max(diff, std::abs(all.at(i) - one.at(i)));
  EXPECT_LT(diff, 1e-5);
  EXPECT_TRUE(g->training());
}

TEST(Evaluate, RealAgainstItselfIsPerfect) {
  auto emb = make_embedder("randconv");
  const FeatureSet f = emb->embed(draw_real("gauss-blobs:4", 60, 5));
  const MetricReport r = compare(f, f, 3);
  EXPECT_LT(std::abs(r.fid), 1e-6);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
}

TEST(Evaluate, ReportFieldsAreCompleteAndFinite) {
  Trainer t(small_config());
  t.run(1);
  const MetricReport r = evaluate(t.checkpoint(), "gauss-blobs:4", "randconv", 40, 9);
  EXPECT_TRUE(std::isfinite(r.fid));
  EXPECT_GE(r.fid, 0.0);
  EXPECT_GE(r.precision, 0.0);
  EXPECT_LE(r.precision, 1.0);
  EXPECT_GE(r.recall, 0.0);
  EXPECT_LE(r.recall, 1.0);
  EXPECT_EQ(r.n_real, 40);
  EXPECT_EQ(r.n_fake, 40);
  EXPECT_EQ(r.step, 1);
  EXPECT_EQ(r.embedder_id, "randconv:0");
  EXPECT_THROW(evaluate(t.checkpoint(), "gauss-blobs:4", "randconv", 1, 9), std::invalid_argument);
}

// ---- gradient checks -----------------------------------------------------------

TEST(GradChecks, CheapGroupsPass) {
  for (const std::string group : {"ops", "ffm", "fcb"}) {
    for (const auto& o : run_gradchecks(group, 20)) {
      EXPECT_TRUE(o.passed()) << o.name << " err=" << o.max_rel_error << " worst=" << o.worst;
      EXPECT_EQ(o.instances, 20);
    }
  }
  EXPECT_THROW(run_gradchecks("nope"), std::invalid_argument);
}

TEST(Evaluate, ExternalFeatureFiles) {
  TempDir dir;
  Rng rng(3);
  const Tensor real = rng.normal_tensor({50, 6}, 1.0, DType::f64), fake = rng.normal_tensor({40, 6}, 2.0, DType::f32);
  write_npy(real, dir.file("real.npy"));
  write_npy(fake, dir.file("fake.npy"));
  const MetricReport r = evaluate_features(dir.file("real.npy"), dir.file("fake.npy"), 3, 12);
  EXPECT_EQ(r.n_real, 50);
  EXPECT_EQ(r.n_fake, 40);
  EXPECT_EQ(r.step, 12);
  EXPECT_EQ(r.embedder_id, "external:real.npy");
  EXPECT_GT(r.fid, 0.0);
  const MetricReport same = evaluate_features(dir.file("real.npy"), dir.file("real.npy"));
  EXPECT_LT(std::abs(same.fid), 1e-6);
  EXPECT_EQ(same.precision, 1.0);

  write_npy(rng.normal_tensor({40, 5}, 1.0, DType::f64), dir.file("other.npy"));
  EXPECT_THROW(evaluate_features(dir.file("real.npy"), dir.file("other.npy")), std::invalid_argument);
  write_npy(rng.normal_tensor({4, 5, 2}, 1.0, DType::f64), dir.file("cube.npy"));
  EXPECT_THROW(evaluate_features(dir.file("cube.npy"), dir.file("real.npy")), IoError);
}
