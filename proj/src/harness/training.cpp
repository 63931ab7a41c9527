#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iostream>

#include "fcbgan/harness/harness.hpp"

namespace fcbgan {

namespace fs = std::filesystem;

namespace {

// Sub-streams of the run seed.
constexpr std::uint64_t kDataStream = 0x101;
constexpr std::uint64_t kLatentStream = 0x102;
constexpr std::uint64_t kEvalDataStream = 0x103;
constexpr std::uint64_t kEvalLatentStream = 0x104;

constexpr const char* kR1GradMode = "double_backprop";

double scalar(const Var& v) { return v.value().at(0); }

double batch_mean(const Var& v) {
  double s = 0;
  for (std::int64_t i = 0; i < v.value().numel(); ++i) s += v.value().at(i);
  return s / static_cast<double>(v.value().numel());
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + " is not finite");
}

/// Rows [start, start + n) of a tensor along dim 0.
Tensor rows(const Tensor& t, std::int64_t start, std::int64_t n) {
  Shape s = t.shape();
  const std::int64_t per = t.numel() / s[0];
  s[0] = n;
  Tensor out = Tensor::uninitialized(s, t.dtype());
  dispatch(t.dtype(), [&]<class T>() {
    std::memcpy(out.data<T>().data(), t.data<T>().data() + start * per, static_cast<std::size_t>(n * per) * sizeof(T));
  });
  return out;
}

class FreezeGuard {
 public:
  explicit FreezeGuard(Module& m) : m_(m) { m_.set_requires_grad(false); }
  ~FreezeGuard() { m_.set_requires_grad(true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  Module& m_;
};

std::int64_t meta_int(const Checkpoint& ck, const std::string& key) {
  const std::string& v = ck.get_meta(key);
  try {
    return std::stoll(v);
  } catch (const std::exception&) {
    throw IoError("checkpoint metadata " + key + " = '" + v + "' is not an integer");
  }
}

}  // namespace

// ---- optimizer ------------------------------------------------------------

Adam::Adam(std::vector<NamedParam> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& np : params_) {
    m_.emplace_back(np.param->value().shape(), np.param->value().dtype());
    v_.emplace_back(np.param->value().shape(), np.param->value().dtype());
  }
}

double grad_norm(const std::vector<Param*>& params) {
  double sq = 0;
  for (const Param* p : params) {
    const auto& g = p->var().grad();
    if (!g) continue;
    dispatch(g->dtype(), [&]<class T>() {
      for (T x : g->data<T>()) sq += static_cast<double>(x) * static_cast<double>(x);
    });
  }
  return std::sqrt(sq);
}

double Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  double sq = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i].param;
    const auto& g = p.var().grad();
    if (!g) continue;
    dispatch(p.value().dtype(), [&]<class T>() {
      const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
      const T step_size = static_cast<T>(opts_.lr / bc1);
      const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
      const T eps = static_cast<T>(opts_.eps);
      auto gs = g->data<T>();
      auto ps = p.mutable_value().data<T>();
      auto ms = m_[i].data<T>();
      auto vs = v_[i].data<T>();
      for (std::size_t j = 0; j < ps.size(); ++j) {
        const T gj = gs[j];
        sq += static_cast<double>(gj) * static_cast<double>(gj);
        ms[j] = b1 * ms[j] + (T(1) - b1) * gj;
        vs[j] = b2 * vs[j] + (T(1) - b2) * gj * gj;
        ps[j] -= step_size * ms[j] / (std::sqrt(vs[j]) * inv_sqrt_bc2 + eps);
      }
    });
  }
  return std::sqrt(sq);
}

void Adam::export_state(const std::string& prefix, Checkpoint& ckpt) const {
  ckpt.meta[prefix + "t"] = std::to_string(t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ckpt.tensors[prefix + params_[i].name + ".m"] = m_[i];
    ckpt.tensors[prefix + params_[i].name + ".v"] = v_[i];
  }
}

void Adam::import_state(const std::string& prefix, const Checkpoint& ckpt) {
  const std::int64_t t = meta_int(ckpt, prefix + "t");
  std::vector<Tensor> m, v;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (auto [suffix, dst] : {std::pair{".m", &m}, std::pair{".v", &v}}) {
      const std::string key = prefix + params_[i].name + suffix;
      const Tensor& src = ckpt.get_tensor(key);
      if (src.shape() != m_[i].shape() || src.dtype() != m_[i].dtype()) {
        throw IoError("checkpoint entry '" + key + "' does not match parameter " + params_[i].name);
      }
      dst->push_back(src);
    }
  }
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---- single steps ---------------------------------------------------------

DStepResult discriminator_step(const std::function<Var(const Var&)>& d_forward, Module& d, Adam& opt,
                               const LossConfig& loss, const Tensor& real, const Tensor& fake,
                               std::int64_t d_step_index) {
  const bool r1_now = loss.kind == LossKind::ns_logistic_r1 && lazy_schedule(d_step_index, loss.lazy_interval);
  Var x_real(real, r1_now);
  Var x_fake(fake, false);
  const std::int64_t nr = real.dim(0), nf = fake.dim(0);
  Var scores = d_forward(concat(x_real, x_fake, 0));
  Var real_scores = slice(scores, 0, 0, nr), fake_scores = slice(scores, 0, nr, nf);
  DLoss dl = d_loss(loss, real_scores, fake_scores, x_real, d_step_index);

  DStepResult out;
  out.loss = scalar(dl.total);
  out.adversarial = scalar(dl.adversarial);
  out.r1 = dl.r1;
  out.real_score = batch_mean(real_scores);
  out.fake_score = batch_mean(fake_scores);
  require_finite(out.loss, "discriminator loss");
  d.zero_grad();
  backward(dl.total);
  out.grad_norm = opt.step();
  require_finite(out.grad_norm, "discriminator gradient");
  return out;
}

GStepResult generator_step(Generator& g, Discriminator& d, Adam& opt, LossKind kind, const Tensor& z) {
  FreezeGuard frozen(d);
  Var loss = g_loss(kind, d.forward(g.forward(Var(z))));
  GStepResult out;
  out.loss = scalar(loss);
  require_finite(out.loss, "generator loss");
  g.zero_grad();
  backward(loss);
  out.grad_norm = opt.step();
  require_finite(out.grad_norm, "generator gradient");
  return out;
}

// ---- sampling and evaluation ----------------------------------------------

Tensor generate(Generator& g, const Tensor& z, std::int64_t chunk) {
  if (chunk < 1) throw std::invalid_argument("generate: chunk must be >= 1");
  struct ModeRestore {
    Generator& g;
    bool training, frozen;
    ~ModeRestore() {
      g.set_training(training);
      g.set_stats_frozen(frozen);
    }
  } restore{g, g.training(), g.stats_frozen()};

  bool stats_ready = true;
  for (const auto& ns : g.named_stats()) stats_ready = stats_ready && ns.stats->initialized;
  if (stats_ready) {
    g.set_training(false);
  } else {
    g.set_training(true);
    g.set_stats_frozen(true);
  }
  NoGradGuard no_grad;
  const std::int64_t n = z.dim(0);
  Tensor out;
  for (std::int64_t start = 0; start < n; start += chunk) {
    const std::int64_t m = std::min(chunk, n - start);
    Tensor part = g.forward(Var(rows(z, start, m))).value();
    if (out.empty()) {
      Shape s = part.shape();
      s[0] = n;
      out = Tensor::uninitialized(s, part.dtype());
    }
    dispatch(part.dtype(), [&]<class T>() {
      auto src = part.data<T>();
      std::copy(src.begin(), src.end(), out.data<T>().begin() + static_cast<std::ptrdiff_t>(start * (part.numel() / m)));
    });
  }
  return out;
}

Tensor sample_latents(std::int64_t n, std::int64_t latent_dim, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor({n, latent_dim});
}

Tensor draw_real(const std::string& source, std::int64_t n, std::uint64_t seed) {
  return open_dataset(source, seed)->next_batch(n);
}

std::unique_ptr<Generator> load_generator(const Checkpoint& ckpt) {
  const RunConfig cfg = RunConfig::from_text(ckpt.get_meta("config"));
  auto g = std::make_unique<Generator>(cfg.net);
  import_module(*g, "G.", ckpt);
  return g;
}

Tensor sample_images(const Checkpoint& ckpt, std::int64_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  auto g = load_generator(ckpt);
  return generate(*g, sample_latents(n, g->spec().latent_dim, seed));
}

std::vector<std::string> write_sample_grids(const Tensor& images, const std::string& path) {
  const std::int64_t n = images.dim(0);
  if (n <= 64) {
    write_grid(images, path);
    return {path};
  }
  const fs::path p(path);
  std::vector<std::string> out;
  for (std::int64_t start = 0, i = 0; start < n; start += 64, ++i) {
    fs::path part = p.parent_path() / (p.stem().string() + "_" + std::to_string(i) + p.extension().string());
    write_grid(rows(images, start, std::min<std::int64_t>(64, n - start)), part.string());
    out.push_back(part.string());
  }
  return out;
}

MetricReport evaluate(const Checkpoint& ckpt, const std::string& data, const std::string& embedder, std::int64_t n,
                      std::uint64_t seed, int k) {
  if (n < 2) throw std::invalid_argument("evaluate: n must be >= 2");
  auto g = load_generator(ckpt);
  auto emb = make_embedder(embedder);
  const Tensor fake = generate(*g, sample_latents(n, g->spec().latent_dim, seed));
  const Tensor real = draw_real(data, n, seed);
  return compare(emb->embed(real), emb->embed(fake), k, meta_int(ckpt, "iter"));
}

MetricReport evaluate_features(const std::string& real_npy, const std::string& fake_npy, int k, std::int64_t step) {
  auto load = [](const std::string& path) {
    const Tensor t = read_npy(path);
    if (t.rank() != 2) throw IoError("feature file '" + path + "' must be 2-D [N, d], got " + shape_str(t.shape()));
    Eigen::MatrixXd m(t.dim(0), t.dim(1));
    for (std::int64_t i = 0; i < t.dim(0); ++i)
      for (std::int64_t j = 0; j < t.dim(1); ++j) m(i, j) = t.at(i * t.dim(1) + j);
    return external_features(std::move(m), fs::path(path).filename().string());
  };
  const FeatureSet real = load(real_npy), fake = load(fake_npy);
  if (real.dim() != fake.dim()) {
    throw std::invalid_argument("feature dimensions differ: " + std::to_string(real.dim()) + " vs " +
                                std::to_string(fake.dim()));
  }
  return compare(real, fake, k, step);
}

// ---- log ------------------------------------------------------------------

void TrainLog::open(const std::string& path, bool append) {
  file_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!file_) throw IoError("cannot open log '" + path + "'");
}

void TrainLog::add(nlohmann::ordered_json record) {
  if (file_.is_open()) {
    file_ << record.dump() << '\n';
    file_.flush();
  }
  records_.push_back(std::move(record));
  if (listener_) listener_(records_.back());
}

std::int64_t TrainLog::count(const std::string& kind) const {
  std::int64_t n = 0;
  for (const auto& r : records_) n += r.value("kind", "") == kind;
  return n;
}

std::string TrainLog::deterministic_text(const std::vector<std::string>& kinds) const {
  std::string out;
  for (const auto& r : records_) {
    if (std::find(kinds.begin(), kinds.end(), r.value("kind", "")) == kinds.end()) continue;
    auto copy = r;
    copy.erase("wall");
    out += copy.dump() + "\n";
  }
  return out;
}

// ---- trainer --------------------------------------------------------------

Trainer::Trainer(RunConfig cfg) : cfg_(std::move(cfg)) {
  setup();
  if (!cfg_.out_dir.empty()) log_.open((fs::path(cfg_.out_dir) / "train_log.jsonl").string(), false);
  write_header(std::nullopt);
}

Trainer::Trainer(RunConfig cfg, const Checkpoint& ckpt) : cfg_(std::move(cfg)) {
  if (ckpt.get_meta("kind") != "train") throw IoError("not a training checkpoint");
  const RunConfig saved = RunConfig::from_text(ckpt.get_meta("config"));
  if (saved.trajectory_hash() != cfg_.trajectory_hash()) {
    throw std::invalid_argument("config does not match the checkpoint (trajectory hash " + hex64(cfg_.trajectory_hash()) +
                                " vs " + hex64(saved.trajectory_hash()) + ")");
  }
  setup();
  import_module(*g_, "G.", ckpt);
  import_module(*d_, "D.", ckpt);
  opt_g_->import_state("adam_g.", ckpt);
  opt_d_->import_state("adam_d.", ckpt);
  iter_ = meta_int(ckpt, "iter");
  d_step_ = meta_int(ckpt, "d_step");
  record_ = meta_int(ckpt, "record");
  z_rng_.set_state(ckpt.get_meta("z_rng"));
  data_->set_state(ckpt.get_meta("data_state"));
  if (!cfg_.out_dir.empty()) log_.open((fs::path(cfg_.out_dir) / "train_log.jsonl").string(), true);
  write_header(iter_);
}

void Trainer::setup() {
  cfg_.validate();
  start_time_ = std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
  if (!cfg_.out_dir.empty()) fs::create_directories(cfg_.out_dir);
  g_ = std::make_unique<Generator>(cfg_.net);
  d_ = std::make_unique<Discriminator>(cfg_.net);
  opt_g_ = std::make_unique<Adam>(g_->named_parameters(), cfg_.adam);
  opt_d_ = std::make_unique<Adam>(d_->named_parameters(), cfg_.adam);
  data_ = open_dataset(cfg_.data, Rng::derive(cfg_.seed(), kDataStream));
  z_rng_ = Rng(Rng::derive(cfg_.seed(), kLatentStream));
  embedder_ = make_embedder(cfg_.embedder);
  if (cfg_.batch_g_deviates()) {
    std::cerr << "warning: batch_g = " << cfg_.batch_g << " is not 2 * batch_d = " << 2 * cfg_.batch_d << "\n";
  }
}

void Trainer::write_header(std::optional<std::int64_t> resumed_from) {
  nlohmann::ordered_json h;
  h["kind"] = "header";
  h["config_hash"] = hex64(cfg_.trajectory_hash());
  h["r1_grad_mode"] = kR1GradMode;
  h["batch_g_deviation"] = cfg_.batch_g_deviates();
  h["determinism"] = cfg_.determinism;
  h["data"] = data_->describe();
  if (resumed_from) h["resumed_from"] = *resumed_from;
  log_.add(std::move(h));
}

double Trainer::elapsed() const {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count() - start_time_;
}

void Trainer::iteration() {
  try {
    const auto d_forward = [&](const Var& x) { return d_->forward(x); };
    for (int k = 0; k < cfg_.n_dis; ++k) {
      const Tensor real = data_->next_batch(cfg_.batch_d);
      const Tensor z = z_rng_.normal_tensor({cfg_.batch_d, cfg_.net.latent_dim});
      Tensor fake;
      {
        NoGradGuard no_grad;
        fake = g_->forward(Var(z)).value();
      }
      const DStepResult r = discriminator_step(d_forward, *d_, *opt_d_, cfg_.loss, real, fake, d_step_);
      nlohmann::ordered_json rec;
      rec["kind"] = "d";
      rec["step"] = record_++;
      rec["iter"] = iter_;
      rec["d_step"] = d_step_;
      rec["d_loss"] = r.loss;
      rec["d_adv"] = r.adversarial;
      if (r.r1) rec["r1"] = *r.r1;
      rec["grad_norm"] = r.grad_norm;
      rec["real_score"] = r.real_score;
      rec["fake_score"] = r.fake_score;
      rec["batch_real"] = real.dim(0);
      rec["batch_z"] = z.dim(0);
      rec["wall"] = elapsed();
      log_.add(std::move(rec));
      ++d_step_;
    }
    const Tensor z = z_rng_.normal_tensor({cfg_.batch_g, cfg_.net.latent_dim});
    const GStepResult r = generator_step(*g_, *d_, *opt_g_, cfg_.loss.kind, z);
    nlohmann::ordered_json rec;
    rec["kind"] = "g";
    rec["step"] = record_++;
    rec["iter"] = iter_;
    rec["g_loss"] = r.loss;
    rec["grad_norm"] = r.grad_norm;
    rec["batch_z"] = z.dim(0);
    rec["wall"] = elapsed();
    log_.add(std::move(rec));
    ++iter_;
  } catch (const NonFiniteError& e) {
    abort(e.what());
  }
}

void Trainer::abort(const std::string& why) {
  std::string path;
  nlohmann::ordered_json rec;
  rec["kind"] = "abort";
  rec["iter"] = iter_;
  rec["d_step"] = d_step_;
  rec["reason"] = why;
  if (!cfg_.out_dir.empty()) {
    Checkpoint ck = checkpoint();
    ck.meta["abort_reason"] = why;
    path = (fs::path(cfg_.out_dir) / "diagnostic.fcb").string();
    save_checkpoint(ck, path);
    rec["checkpoint"] = path;
  }
  log_.add(std::move(rec));
  throw TrainingAborted("non-finite value at iteration " + std::to_string(iter_) + ": " + why, path);
}

MetricReport Trainer::evaluate_now() {
  if (!real_features_) {
    real_features_ = embedder_->embed(draw_real(cfg_.data, cfg_.eval_n, Rng::derive(cfg_.seed(), kEvalDataStream)));
  }
  const Tensor fake =
      generate(*g_, sample_latents(cfg_.eval_n, cfg_.net.latent_dim, Rng::derive(cfg_.seed(), kEvalLatentStream)));
  MetricReport rep = compare(*real_features_, embedder_->embed(fake), cfg_.pr_k, iter_);
  reports_.push_back(rep);
  auto rec = nlohmann::ordered_json::parse(rep.to_json());
  rec["kind"] = "eval";
  log_.add(std::move(rec));
  if (!cfg_.out_dir.empty()) {
    std::ofstream(fs::path(cfg_.out_dir) / "metrics.jsonl", std::ios::app) << rep.to_json() << '\n';
    write_grid(rows(fake, 0, std::min<std::int64_t>(64, fake.dim(0))),
               (fs::path(cfg_.out_dir) / ("samples_" + std::to_string(iter_) + ".png")).string());
  }
  return rep;
}

void Trainer::run(std::optional<std::int64_t> until) {
  const std::int64_t target = until.value_or(cfg_.total_g_iters);
  if (cfg_.eval_at_start && iter_ == 0 && reports_.empty()) evaluate_now();
  while (iter_ < target) {
    iteration();
    if (cfg_.eval_every > 0 && iter_ % cfg_.eval_every == 0) {
      evaluate_now();
      save("ckpt_" + std::to_string(iter_) + ".fcb");
    }
  }
  if (iter_ == cfg_.total_g_iters) save("final.fcb");
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.meta["kind"] = "train";
  ck.meta["config"] = cfg_.to_text();
  ck.meta["config_hash"] = hex64(cfg_.trajectory_hash());
  ck.meta["r1_grad_mode"] = kR1GradMode;
  ck.meta["iter"] = std::to_string(iter_);
  ck.meta["d_step"] = std::to_string(d_step_);
  ck.meta["record"] = std::to_string(record_);
  ck.meta["z_rng"] = z_rng_.state();
  ck.meta["data_state"] = data_->state();
  export_module(*g_, "G.", ck);
  export_module(*d_, "D.", ck);
  opt_g_->export_state("adam_g.", ck);
  opt_d_->export_state("adam_d.", ck);
  return ck;
}

std::string Trainer::save(const std::string& name) const {
  if (cfg_.out_dir.empty()) return "";
  const std::string path = (fs::path(cfg_.out_dir) / name).string();
  save_checkpoint(checkpoint(), path);
  return path;
}

}  // namespace fcbgan
