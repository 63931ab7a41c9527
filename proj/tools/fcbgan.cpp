#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "fcbgan/harness/checks.hpp"
#include "fcbgan/harness/harness.hpp"

using namespace fcbgan;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;
constexpr int kNanAbort = 3;

int cmd_train(const std::string& config_path, const std::string& resume) {
  RunConfig cfg = RunConfig::from_file(config_path);
  std::unique_ptr<Trainer> t;
  if (resume.empty()) {
    t = std::make_unique<Trainer>(cfg);
  } else {
    t = std::make_unique<Trainer>(cfg, load_checkpoint(resume));
  }
  const std::int64_t every = std::max<std::int64_t>(1, cfg.total_g_iters / 100);
  t->set_listener([&](const nlohmann::ordered_json& r) {
    const std::string kind = r.value("kind", "");
    if (kind == "g" && (r["iter"].get<std::int64_t>() + 1) % every == 0) {
      std::fprintf(stderr, "iter %lld  g_loss %.4f  wall %.1fs\n", static_cast<long long>(r["iter"].get<std::int64_t>() + 1),
                   r["g_loss"].get<double>(), r["wall"].get<double>());
    } else if (kind == "eval" || kind == "header" || kind == "abort") {
      std::cout << r.dump() << std::endl;
    }
  });
  t->run();
  if (!cfg.out_dir.empty()) std::cerr << "wrote " << (fs::path(cfg.out_dir) / "final.fcb").string() << "\n";
  return kOk;
}

int cmd_sample(const std::string& ckpt, std::int64_t n, std::uint64_t seed, const std::string& out) {
  const Tensor images = sample_images(load_checkpoint(ckpt), n, seed);
  for (const auto& p : write_sample_grids(images, out)) std::cout << p << "\n";
  const std::string npy = fs::path(out).replace_extension(".npy").string();
  write_npy(images, npy);
  std::cout << npy << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& embedder, std::int64_t n,
             std::uint64_t seed, int k) {
  const Checkpoint ck = load_checkpoint(ckpt);
  if (embedder.rfind("external:", 0) == 0) {
    const std::string files = embedder.substr(9);
    const auto comma = files.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("--embedder external:<real.npy>,<fake.npy>");
    std::cout << evaluate_features(files.substr(0, comma), files.substr(comma + 1), k, std::stoll(ck.get_meta("iter")))
                     .to_json()
              << "\n";
    return kOk;
  }
  if (data.empty()) throw std::invalid_argument("--data is required unless the embedder is external");
  std::cout << evaluate(ck, data, embedder, n, seed, k).to_json() << "\n";
  return kOk;
}

int cmd_gradcheck(const std::string& group, int instances) {
  bool all_ok = true;
  for (const auto& o : run_gradchecks(group, instances)) {
    std::printf("%-20s %s  max_rel_err %.3g (tol %g)  instances %d  zero-grad inputs %d (max |numeric| %.2g)  kinks skipped %zu  worst: %s\n",
                o.name.c_str(), o.passed() ? "PASS" : "FAIL", o.max_rel_error, o.tolerance, o.instances,
                o.zero_grad_params, o.max_abs_numeric_on_zero, o.kinks_skipped, o.worst.c_str());
    all_ok = all_ok && o.passed();
  }
  return all_ok ? kOk : kRuntime;
}

int cmd_params(const std::string& config_path) {
  const RunConfig cfg = RunConfig::from_file(config_path);
  Generator g(cfg.net);
  Discriminator d(cfg.net);
  std::cout << "generator (" << to_string(cfg.net.block_kind) << ")\n"
            << format_param_table(count_parameters(g)) << "\ndiscriminator\n"
            << format_param_table(count_parameters(d));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-cycling GAN: training, sampling, evaluation and gradient checks"};
  app.require_subcommand(1);

  std::string config, resume, ckpt, out, data, embedder = "randconv", module = "all";
  std::int64_t n = 64;
  std::uint64_t seed = 0;
  int k = 3, instances = 20;

  auto* train = app.add_subcommand("train", "Train from a config file");
  train->add_option("--config", config, "key = value run config")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", resume, "training checkpoint to continue from")->check(CLI::ExistingFile);

  auto* sample = app.add_subcommand("sample", "Write generated images as PNG grid(s) and a .npy dump");
  sample->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  sample->add_option("--n", n)->required()->check(CLI::PositiveNumber);
  sample->add_option("--seed", seed)->required();
  sample->add_option("--out", out, "PNG path")->required();

  auto* eval = app.add_subcommand("eval", "FID and precision/recall of a checkpoint against a dataset");
  eval->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "gauss-blobs[:m], stripes[:m], cifar10:<dir>, cifar100:<dir>, png:<dir>");
  eval->add_option("--embedder", embedder, "pixel, randconv[:seed] or external:<real.npy>,<fake.npy> (features [N, d])")
      ->required();
  std::int64_t eval_n = 2000;
  eval->add_option("--n", eval_n, "samples per side")->capture_default_str()->check(CLI::Range(std::int64_t{2}, std::int64_t{1} << 40));
  eval->add_option("--seed", seed, "latent and data seed")->capture_default_str();
  eval->add_option("--k", k, "neighbourhood size for precision/recall")->capture_default_str();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--module", module, "ops, ffm, fcb, generator, discriminator or all")->capture_default_str();
  gradcheck->add_option("--instances", instances)->capture_default_str()->check(CLI::PositiveNumber);

  auto* params = app.add_subcommand("params", "Parameter counts of the configured networks");
  params->add_option("--config", config)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(config, resume);
    if (*sample) return cmd_sample(ckpt, n, seed, out);
    if (*eval) return cmd_eval(ckpt, data, embedder, eval_n, seed, k);
    if (*gradcheck) return cmd_gradcheck(module, instances);
    if (*params) return cmd_params(config);
  } catch (const TrainingAborted& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    if (!e.checkpoint_path().empty()) std::cerr << "diagnostic checkpoint: " << e.checkpoint_path() << "\n";
    return kNanAbort;
  } catch (const NonFiniteError& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return kNanAbort;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
