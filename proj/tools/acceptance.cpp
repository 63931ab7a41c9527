// Acceptance checks, one PASS/FAIL line per criterion.
//
//   acceptance               every criterion
//   acceptance --only 3,4    a subset
//   acceptance --smoke-iters 200 --smoke-dir out/   shorter smoke, artifacts kept

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "fcbgan/blocks/blocks.hpp"
#include "fcbgan/harness/checks.hpp"
#include "fcbgan/harness/harness.hpp"
#include "fcbgan/losses/losses.hpp"
#include "fcbgan/metrics/metrics.hpp"
#include "fcbgan/networks/networks.hpp"
#include "fcbgan/substrate/layers.hpp"
#include "fcbgan/substrate/spectral_norm.hpp"

using namespace fcbgan;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

FeatureSet features(Eigen::MatrixXd m) { return external_features(std::move(m), "acceptance"); }

// ---- 1 ---------------------------------------------------------------------

Verdict gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto outcomes = run_gradchecks("all", 20);
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = secs < 300.0;
  std::string failed;
  double worst_ops = 0, worst_d = 0;
  for (const auto& o : outcomes) {
    if (!o.passed()) {
      v.pass = false;
      failed += " " + o.name + "(" + fmt("%.2g", o.max_rel_error) + ")";
    }
    double& worst = o.tolerance < 1e-3 ? worst_ops : worst_d;
    worst = std::max(worst, o.max_rel_error);
  }
  v.detail = fmt("%zu checks x 20 instances, max rel err %.2g (tol 1e-4), discriminator path %.2g (tol 1e-3), %.0fs (limit 300s)",
                 outcomes.size(), worst_ops, worst_d, secs);
  if (!failed.empty()) v.detail += "; failed:" + failed;
  return v;
}

// ---- 2 ---------------------------------------------------------------------

Verdict parameter_equality() {
  Verdict v{true, ""};
  for (std::int64_t c : {16, 64, 256}) {
    Rng r(c);
    ResidualBlock res(c, c, true, r);
    Fcb fcb_s(c, c, true, FusionKind::sum, FusionKind::sum, r);
    const auto a = fcb_s.parameter_count(), b = res.parameter_count();
    v.pass = v.pass && a == b;
    v.detail += fmt("%sC=%lld: %lld vs %lld", v.detail.empty() ? "" : ", ", static_cast<long long>(c),
                    static_cast<long long>(a), static_cast<long long>(b));
  }
  return v;
}

// ---- 3 ---------------------------------------------------------------------

/// n values whose sample mean is `mean` and sample standard deviation (1/(n-1)) is `sd`.
Eigen::MatrixXd with_moments(Rng& rng, int n, double mean, double sd) {
  Eigen::VectorXd x(n);
  for (int i = 0; i < n; ++i) x(i) = rng.normal();
  x.array() -= x.mean();
  x *= sd / std::sqrt(x.squaredNorm() / (n - 1));
  x.array() += mean;
  return x;
}

Eigen::MatrixXd gaussian(Rng& rng, int n, int d, double shift = 0.0) {
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal() + shift;
  return m;
}

Verdict fid_oracle() {
  Rng rng(3);
  const double a = fid(features(with_moments(rng, 500, 0, 1)), features(with_moments(rng, 700, 1, 1)));
  const double b = fid(features(with_moments(rng, 500, 0, 1)), features(with_moments(rng, 700, 0, 2)));
  const FeatureSet s = features(gaussian(rng, 300, 16));
  const double self = fid(s, s);
  double rot = 0;
  for (int t = 0; t < 10; ++t) {
    Eigen::MatrixXd x = gaussian(rng, 200, 16), y = gaussian(rng, 250, 16, 0.3);
    y.col(0) *= 2.0;
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(rng, 16, 16));
    const Eigen::MatrixXd q = qr.householderQ();
    rot = std::max(rot, std::abs(fid(features(x), features(y)) - fid(features(x * q), features(y * q))));
  }
  Verdict v;
  v.pass = std::abs(a - 1) <= 1e-6 && std::abs(b - 1) <= 1e-6 && std::abs(self) <= 1e-8 && rot <= 1e-6;
  v.detail = fmt("(0,1)v(1,1) %.10f, (0,1)v(0,2) %.10f (tol 1e-6); fid(S,S) %.2e (tol 1e-8); rotation diff %.2e (tol 1e-6)",
                 a, b, self, rot);
  return v;
}

// ---- 4 ---------------------------------------------------------------------

/// Direct double loop: x is in manifold(S) when |x - s| <= |s - NN_k(s)| for some s.
PrecisionRecall brute_force_pr(const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake, int k) {
  auto dist = [](const Eigen::MatrixXd& a, int i, const Eigen::MatrixXd& b, int j) {
    double s = 0;
    for (int c = 0; c < a.cols(); ++c) s += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
    return std::sqrt(s);
  };
  auto radii = [&](const Eigen::MatrixXd& s) {
    std::vector<double> r(s.rows());
    for (int i = 0; i < s.rows(); ++i) {
      std::vector<double> d;
      for (int j = 0; j < s.rows(); ++j)
        if (j != i) d.push_back(dist(s, i, s, j));
      std::sort(d.begin(), d.end());
      r[i] = d[k - 1];
    }
    return r;
  };
  auto coverage = [&](const Eigen::MatrixXd& pts, const Eigen::MatrixXd& s) {
    const auto r = radii(s);
    int inside = 0;
    for (int i = 0; i < pts.rows(); ++i) {
      for (int j = 0; j < s.rows(); ++j) {
        if (dist(pts, i, s, j) <= r[j]) {
          ++inside;
          break;
        }
      }
    }
    return static_cast<double>(inside) / static_cast<double>(pts.rows());
  };
  return {coverage(fake, real), coverage(real, fake)};
}

Verdict pr_oracle() {
  Rng rng(4);
  int mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    const int k = std::vector<int>{1, 3, 5}[rng.below(3)];
    const int d = 1 + static_cast<int>(rng.below(8));
    const int nr = k + 1 + static_cast<int>(rng.below(200 - k)), nf = k + 1 + static_cast<int>(rng.below(200 - k));
    const Eigen::MatrixXd real = gaussian(rng, nr, d), fake = gaussian(rng, nf, d, rng.uniform() * 1.5);
    const auto got = precision_recall(features(real), features(fake), k);
    const auto want = brute_force_pr(real, fake, k);
    mismatches += got.precision != want.precision || got.recall != want.recall;
  }
  const Eigen::MatrixXd s = gaussian(rng, 150, 6);
  const auto same = precision_recall(features(s), features(s), 3);
  const auto far = precision_recall(features(s), features(gaussian(rng, 150, 6, 1e3)), 3);
  Verdict v;
  v.pass = mismatches == 0 && same.precision == 1 && same.recall == 1 && far.precision == 0 && far.recall == 0;
  v.detail = fmt("%d/100 instances differ from brute force; identical sets (%g,%g); far sets (%g,%g)", mismatches,
                 same.precision, same.recall, far.precision, far.recall);
  return v;
}

// ---- 5 ---------------------------------------------------------------------

Verdict spectral_norm_accuracy() {
  Rng rng(5);
  double worst_sigma = 0, worst_top = 0, worst_rel = 0;
  std::string worst_shape;
  for (int t = 0; t < 50; ++t) {
    // Conv-weight shaped matrices [out, in * 3 * 3] at He scale; the last is the largest.
    const std::int64_t out = t == 49 ? 64 : 1 + static_cast<std::int64_t>(rng.below(64));
    const std::int64_t in = t == 49 ? 64 : 1 + static_cast<std::int64_t>(rng.below(64));
    Param p("w", rng.normal_tensor({out, in, 3, 3}, std::sqrt(2.0 / static_cast<double>(in * 9)), DType::f64));
    init_spectral_state(p, rng, 0);
    const SpectralResult res = spectral_normalize(p, 50);

    auto top = [](const Tensor& w) {
      Eigen::MatrixXd m(w.dim(0), w.numel() / w.dim(0));
      for (std::int64_t i = 0; i < m.rows(); ++i)
        for (std::int64_t j = 0; j < m.cols(); ++j) m(i, j) = w.at(i * m.cols() + j);
      return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
    };
    const double truth = top(p.value());
    const double err = std::abs(res.sigma - truth);
    if (err > worst_sigma) {
      worst_sigma = err;
      worst_rel = err / truth;
      worst_shape = fmt("%lldx%lld", static_cast<long long>(out), static_cast<long long>(in * 9));
    }
    worst_top = std::max(worst_top, top(res.weight.value()));
  }
  Verdict v;
  v.pass = worst_sigma <= 1e-3 && worst_top <= 1 + 1e-3;
  v.detail = fmt("50 matrices up to 64x576, 50 iterations: max |sigma_hat - sigma| %.2e (rel %.2e, at %s; tol 1e-3); "
                 "max normalized top singular value %.6f (limit 1.001)",
                 worst_sigma, worst_rel, worst_shape.c_str(), worst_top);
  return v;
}

// ---- 6 ---------------------------------------------------------------------

Verdict loss_analytics() {
  auto scores = [](std::vector<double> v) {
    return Var(Tensor::from({static_cast<std::int64_t>(v.size())}, v, DType::f64));
  };
  const double hinge = d_adversarial_loss(LossKind::hinge, scores({1.0, 1.5, 3.0}), scores({-1.0, -2.0, -7.5})).value().at(0);
  const double logistic =
      d_adversarial_loss(LossKind::ns_logistic_r1, scores({0, 0, 0, 0}), scores({0, 0, 0, 0})).value().at(0);

  // Linear D(x) = a.x + b with dyadic weights, so the penalty is exact in floating point.
  Rng rng(6);
  Dense lin(4, 1, rng);
  lin.to(DType::f64);
  lin.weight().mutable_value() = Tensor::from({1, 4}, {1.0, -2.0, 0.5, 0.25}, DType::f64);
  const double gamma = 2.0;
  Var x(rng.normal_tensor({8, 4}, 1.0, DType::f64), true);
  const double r1 = r1_penalty(reshape(lin.forward(x), {8}), x, gamma).value().at(0);
  const double want = gamma / 2 * (1.0 + 4.0 + 0.25 + 0.0625);

  int schedule_errors = 0;
  for (std::int64_t s = 0; s < 2000; ++s) schedule_errors += lazy_schedule(s, 16) != (s % 16 == 0);

  Verdict v;
  v.pass = hinge == 0.0 && std::abs(logistic - 2 * std::log(2.0)) <= 1e-12 && r1 == want && schedule_errors == 0;
  v.detail = fmt("hinge at satisfied margins %g; logistic at zero %.15f (2 ln 2 = %.15f); R1 %.17g vs gamma/2 |a|^2 %.17g; "
                 "lazy schedule mismatches %d/2000",
                 hinge, logistic, 2 * std::log(2.0), r1, want, schedule_errors);
  return v;
}

// ---- 7 ---------------------------------------------------------------------

Verdict training_smoke(std::int64_t iters, const std::string& dir) {
  std::ostringstream text;
  text << "block_kind = fcb\n"
       << "g_channels = 64\n"
       << "d_channels = 32\n"
       << "latent_dim = 128\n"
       << "seed = 0\n"
       << "loss = hinge\n"
       << "batch_d = 32\n"
       << "total_g_iters = " << iters << "\n"
       << "eval_at_start = true\n"
       << "eval_every = " << iters << "\n"
       << "eval_n = 2000\n"
       << "embedder = randconv\n"
       << "data = gauss-blobs\n"
       << "out_dir = " << dir << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    Trainer t(RunConfig::from_text(text.str()));
    t.set_listener([&](const nlohmann::ordered_json& r) {
      if (r.value("kind", "") == "g" && (r["iter"].get<std::int64_t>() + 1) % 100 == 0) {
        std::fprintf(stderr, "  smoke: iter %lld, %.0fs\n", static_cast<long long>(r["iter"].get<std::int64_t>() + 1),
                     seconds_since(t0));
      }
    });
    t.run();
    const double init = t.reports().front().fid, end = t.reports().back().fid;
    v.pass = std::isfinite(end) && end <= 0.5 * init && init > end;
    v.detail = fmt("%lld iterations without NaN; FID randconv n=2000 %.4f -> %.4f (ratio %.3f, limit 0.5); "
                   "precision %.3f recall %.3f; %.0f min",
                   static_cast<long long>(iters), init, end, end / init, t.reports().back().precision,
                   t.reports().back().recall, seconds_since(t0) / 60);
  } catch (const TrainingAborted& e) {
    v.detail = std::string("aborted: ") + e.what();
  }
  return v;
}

// ---- 8 ---------------------------------------------------------------------

Verdict determinism(const std::string& dir) {
  const RunConfig cfg = RunConfig::from_text(
      "block_kind = fcb\ng_channels = 16\nd_channels = 8\nlatent_dim = 16\nseed = 11\nloss = ns_logistic_r1\n"
      "batch_d = 4\ntotal_g_iters = 50\ndata = gauss-blobs\n");
  Trainer a(cfg), b(cfg);
  a.run();
  b.run();
  const bool identical = a.log().deterministic_text() == b.log().deterministic_text();

  Trainer first(cfg);
  first.run(25);
  const std::string path = (fs::path(dir) / "resume_25.fcb").string();
  save_checkpoint(first.checkpoint(), path);
  Trainer second(cfg, load_checkpoint(path));
  second.run();
  const bool resumed_log = first.log().deterministic_text() + second.log().deterministic_text() == a.log().deterministic_text();
  const bool resumed_weights = serialize_checkpoint(second.checkpoint()) == serialize_checkpoint(a.checkpoint());

  Verdict v;
  v.pass = identical && resumed_log && resumed_weights;
  v.detail = fmt("two seeded 50-iteration runs %s; resume at 25: log %s, final state %s", identical ? "identical" : "DIFFER",
                 resumed_log ? "identical" : "DIFFERS", resumed_weights ? "bit-identical" : "DIFFERS");
  return v;
}

// ---- 9 ---------------------------------------------------------------------

Verdict ablation_wiring() {
  double dagger_diff = 0;
  for (std::int64_t c : {16, 64}) {
    Rng r(c);
    Fcb fcb(c, c, true, FusionKind::ffm, FusionKind::none, r);
    fcb.to(DType::f64);
    fcb.set_stats_frozen(true);
    Var fm(r.normal_tensor({2, c, 4, 4}, 1.0, DType::f64));
    Var f1(r.normal_tensor({2, c, 4, 4}, 1.0, DType::f64)), f2(r.normal_tensor({2, c, 4, 4}, 5.0, DType::f64));
    const Tensor a = fcb.forward(f1, fm).second.value(), b = fcb.forward(f2, fm).second.value();
    for (std::int64_t i = 0; i < a.numel(); ++i) dagger_diff = std::max(dagger_diff, std::abs(a.at(i) - b.at(i)));
  }

  std::set<Shape> shapes;
  std::string listing;
  for (BlockKind kind : {BlockKind::resblock, BlockKind::fcb, BlockKind::fcb_s, BlockKind::fcb_c, BlockKind::fcb_dagger}) {
    NetworkSpec s;
    s.block_kind = kind;
    s.g_channels = 32;
    s.d_channels = 16;
    s.latent_dim = 16;
    Generator g(s);
    Rng r(9);
    const Shape sh = g.forward(Var(r.normal_tensor({3, 16}))).shape();
    shapes.insert(sh);
    listing += (listing.empty() ? "" : ", ") + to_string(kind) + " " + shape_str(sh);
  }
  Verdict v;
  v.pass = dagger_diff == 0.0 && shapes.size() == 1;
  v.detail = fmt("FCB-dagger memory output max abs diff under image perturbation %g; generator outputs: %s", dagger_diff,
                 listing.c_str());
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::int64_t smoke_iters = 2000;
  std::string smoke_dir;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--smoke-iters", smoke_iters, "generator iterations for criterion 7")->capture_default_str();
  app.add_option("--smoke-dir", smoke_dir, "keep criterion 7 artifacts here");
  CLI11_PARSE(app, argc, argv);

  const fs::path tmp = fs::temp_directory_path() / "fcbgan_acceptance";
  fs::create_directories(tmp);
  if (smoke_dir.empty()) smoke_dir = (tmp / "smoke").string();

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"FCB_S / residual block parameter equality", parameter_equality},
      {"FID oracle", fid_oracle},
      {"precision/recall oracle", pr_oracle},
      {"spectral normalization accuracy", spectral_norm_accuracy},
      {"loss analytics", loss_analytics},
      {"training smoke", [&] { return training_smoke(smoke_iters, smoke_dir); }},
      {"determinism and resume", [&] { return determinism(tmp.string()); }},
      {"ablation wiring", ablation_wiring},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("[%s] %d %s: %s\n", v.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
