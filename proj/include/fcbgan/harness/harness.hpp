#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fcbgan/data_io/data_io.hpp"
#include "fcbgan/losses/losses.hpp"
#include "fcbgan/metrics/metrics.hpp"
#include "fcbgan/networks/networks.hpp"
#include "json.hpp"

namespace fcbgan {

// ---- configuration --------------------------------------------------------

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.9;
  double eps = 1e-8;
};

/// Everything a training run needs. Text form is flat "key = value" lines
/// with '#' comments; the network keys are those of NetworkSpec, and its
/// `seed` doubles as the run seed.
struct RunConfig {
  NetworkSpec net;
  LossConfig loss;
  AdamOptions adam;
  int n_dis = 5;
  std::int64_t batch_d = 64;
  std::int64_t batch_g = 128;
  std::int64_t total_g_iters = 50000;
  /// Evaluate (and checkpoint) every this many G iterations; 0 disables
  /// periodic evaluation. The final iteration is always checkpointed.
  std::int64_t eval_every = 0;
  /// Also evaluate the untrained generator before the first iteration.
  bool eval_at_start = false;
  std::int64_t eval_n = 2000;
  std::string embedder = "randconv";
  int pr_k = 3;
  bool determinism = true;
  std::string data = "gauss-blobs";
  /// Directory for logs, checkpoints and sample grids; empty keeps everything in memory.
  std::string out_dir;

  std::uint64_t seed() const { return net.seed; }
  bool batch_g_deviates() const { return batch_g != 2 * batch_d; }
  void validate() const;

  /// Every key, in a fixed order.
  std::string to_text() const;
  /// Unknown or repeated keys raise std::invalid_argument. batch_g defaults
  /// to 2 * batch_d when absent.
  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::string& path);

  /// FNV-1a over the keys that determine the training trajectory (network,
  /// loss, optimizer, batch sizes, seed, data source).
  std::uint64_t trajectory_hash() const;
};

std::string hex64(std::uint64_t v);

// ---- optimizer ------------------------------------------------------------

/// Adam with bias correction, moments kept in the parameter dtype.
class Adam {
 public:
  Adam(std::vector<NamedParam> params, AdamOptions opts);

  /// Applies one update from the current gradients; parameters without a
  /// gradient are skipped. Returns the global L2 norm of the gradients.
  double step();
  std::int64_t steps() const { return t_; }

  void export_state(const std::string& prefix, Checkpoint& ckpt) const;
  void import_state(const std::string& prefix, const Checkpoint& ckpt);

 private:
  std::vector<NamedParam> params_;
  AdamOptions opts_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

double grad_norm(const std::vector<Param*>& params);

// ---- single steps ---------------------------------------------------------

struct DStepResult {
  double loss = 0.0;
  double adversarial = 0.0;
  std::optional<double> r1;
  double grad_norm = 0.0;
  double real_score = 0.0;  // batch means
  double fake_score = 0.0;
};

/// One discriminator update. Real and fake batches go through a single
/// forward pass on their concatenation; `d_step_index` drives the lazy R1
/// schedule.
DStepResult discriminator_step(const std::function<Var(const Var&)>& d_forward, Module& d, Adam& opt,
                               const LossConfig& loss, const Tensor& real, const Tensor& fake,
                               std::int64_t d_step_index);

struct GStepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// One generator update through a frozen discriminator.
GStepResult generator_step(Generator& g, Discriminator& d, Adam& opt, LossKind kind, const Tensor& z);

// ---- sampling and evaluation ----------------------------------------------

/// Generator output for latents `z` without building a graph, in chunks. Uses
/// running batchnorm statistics once they exist, batch statistics before the
/// first training step. Restores the generator's mode afterwards.
Tensor generate(Generator& g, const Tensor& z, std::int64_t chunk = 100);

/// n x latent_dim standard normal latents from Rng(seed).
Tensor sample_latents(std::int64_t n, std::int64_t latent_dim, std::uint64_t seed);

/// First n images of a fresh dataset opened with `seed`.
Tensor draw_real(const std::string& source, std::int64_t n, std::uint64_t seed);

/// Generator rebuilt from a training checkpoint.
std::unique_ptr<Generator> load_generator(const Checkpoint& ckpt);

Tensor sample_images(const Checkpoint& ckpt, std::int64_t n, std::uint64_t seed);

/// Writes images as 8x8 PNG grids: to `path` when there are at most 64,
/// otherwise to `stem_0.png`, `stem_1.png`, ... Returns the paths written.
std::vector<std::string> write_sample_grids(const Tensor& images, const std::string& path);

/// n generated samples (latent seed `seed`) against n real images.
MetricReport evaluate(const Checkpoint& ckpt, const std::string& data, const std::string& embedder, std::int64_t n,
                      std::uint64_t seed, int k = 3);

/// Metrics on features computed elsewhere: two .npy files of shape [N, d].
MetricReport evaluate_features(const std::string& real_npy, const std::string& fake_npy, int k = 3,
                               std::int64_t step = 0);

// ---- training -------------------------------------------------------------

/// Raised when a loss or activation turns non-finite; a diagnostic checkpoint
/// has already been written when `checkpoint_path` is non-empty.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::string checkpoint_path)
      : std::runtime_error(what), checkpoint_path_(std::move(checkpoint_path)) {}
  const std::string& checkpoint_path() const { return checkpoint_path_; }

 private:
  std::string checkpoint_path_;
};

/// JSON-lines record stream. Kinds: "header", "d", "g", "eval".
class TrainLog {
 public:
  void open(const std::string& path, bool append);
  void add(nlohmann::ordered_json record);
  /// Called with every record after it is stored.
  void set_listener(std::function<void(const nlohmann::ordered_json&)> fn) { listener_ = std::move(fn); }

  const std::vector<nlohmann::ordered_json>& records() const { return records_; }
  std::int64_t count(const std::string& kind) const;
  /// Records of the given kinds with the wall-clock field removed, one per line.
  std::string deterministic_text(const std::vector<std::string>& kinds = {"d", "g", "eval"}) const;

 private:
  std::vector<nlohmann::ordered_json> records_;
  std::ofstream file_;
  std::function<void(const nlohmann::ordered_json&)> listener_;
};

class Trainer {
 public:
  explicit Trainer(RunConfig cfg);
  /// Continues from a checkpoint written by `checkpoint()`. `cfg` may change
  /// total_g_iters, evaluation settings and out_dir, but must have the
  /// checkpoint's trajectory hash.
  Trainer(RunConfig cfg, const Checkpoint& ckpt);

  /// Runs until `total_g_iters` iterations are done (or `until`, if given).
  void run(std::optional<std::int64_t> until = std::nullopt);
  /// n_dis discriminator steps then one generator step.
  void iteration();
  MetricReport evaluate_now();

  Checkpoint checkpoint() const;
  std::string save(const std::string& name) const;

  const RunConfig& config() const { return cfg_; }
  const TrainLog& log() const { return log_; }
  void set_listener(std::function<void(const nlohmann::ordered_json&)> fn) { log_.set_listener(std::move(fn)); }
  const std::vector<MetricReport>& reports() const { return reports_; }
  std::int64_t iterations_done() const { return iter_; }
  std::int64_t d_steps_done() const { return d_step_; }
  Generator& generator() { return *g_; }
  Discriminator& discriminator() { return *d_; }

 private:
  void setup();
  void write_header(std::optional<std::int64_t> resumed_from);
  [[noreturn]] void abort(const std::string& why);
  double elapsed() const;

  RunConfig cfg_;
  std::unique_ptr<Generator> g_;
  std::unique_ptr<Discriminator> d_;
  std::unique_ptr<Adam> opt_g_, opt_d_;
  std::unique_ptr<Dataset> data_;
  Rng z_rng_;
  std::int64_t iter_ = 0, d_step_ = 0, record_ = 0;
  TrainLog log_;
  std::vector<MetricReport> reports_;
  std::unique_ptr<Embedder> embedder_;
  std::optional<FeatureSet> real_features_;
  double start_time_ = 0.0;
};

}  // namespace fcbgan
