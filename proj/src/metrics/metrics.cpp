#include "fcbgan/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>
#include <vector>

#include <Eigen/Eigenvalues>

#include "fcbgan/substrate/ops.hpp"
#include "fcbgan/substrate/rng.hpp"
#include "json.hpp"

namespace fcbgan {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_pair(const FeatureSet& real, const FeatureSet& fake) {
  real.validate("real features");
  fake.validate("fake features");
  if (real.dim() != fake.dim()) {
    throw std::invalid_argument("feature dimension mismatch: " + std::to_string(real.dim()) + " vs " +
                                std::to_string(fake.dim()));
  }
}

void moments(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  cov = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double sq_dist(const RowMatrix& a, Eigen::Index i, const RowMatrix& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

// Squared distance from each row to its k-th nearest other row.
Eigen::VectorXd knn_radii_sq(const RowMatrix& x, int k) {
  const Eigen::Index n = x.rows();
  Eigen::VectorXd r(n);
  std::vector<double> buf(static_cast<std::size_t>(n - 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) buf[m++] = sq_dist(x, i, x, j);
    }
    std::nth_element(buf.begin(), buf.begin() + (k - 1), buf.end());
    r[i] = buf[static_cast<std::size_t>(k - 1)];
  }
  return r;
}

// Fraction of rows of `probe` inside the k-NN manifold of `support`.
double coverage(const RowMatrix& probe, const RowMatrix& support, const Eigen::VectorXd& radii_sq) {
  std::int64_t inside = 0;
  for (Eigen::Index i = 0; i < probe.rows(); ++i) {
    for (Eigen::Index j = 0; j < support.rows(); ++j) {
      if (sq_dist(probe, i, support, j) <= radii_sq[j]) {
        ++inside;
        break;
      }
    }
  }
  return static_cast<double>(inside) / static_cast<double>(probe.rows());
}

void check_k(const FeatureSet& a, const FeatureSet& b, int k) {
  if (k < 1 || k >= std::min(a.size(), b.size())) {
    throw std::invalid_argument("precision_recall: k = " + std::to_string(k) + " must lie in [1, " +
                                std::to_string(std::min(a.size(), b.size()) - 1) + "]");
  }
}

void check_images(const Tensor& images, const char* who) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != 32 || s[3] != 32) {
    throw ShapeError(std::string(who) + " embedder expects images [B, 3, 32, 32], got " + shape_str(s));
  }
  images.check_finite(who);
  for (std::int64_t i = 0; i < images.numel(); ++i) {
    const double v = images.at(i);
    if (v < -1.0 - 1e-6 || v > 1.0 + 1e-6) {
      throw std::invalid_argument(std::string(who) + " embedder expects values in [-1, 1], got " + std::to_string(v));
    }
  }
}

// Images [b0, b0 + n) as an f64 tensor.
Tensor batch_slice(const Tensor& images, std::int64_t b0, std::int64_t n) {
  const std::int64_t per = images.numel() / images.batch();
  Tensor out = Tensor::uninitialized({n, images.dim(1), images.dim(2), images.dim(3)}, DType::f64);
  auto o = out.data<double>();
  dispatch(images.dtype(), [&]<class T>() {
    auto src = images.data<T>();
    for (std::int64_t i = 0; i < n * per; ++i) o[static_cast<std::size_t>(i)] = src[static_cast<std::size_t>(b0 * per + i)];
  });
  return out;
}

}  // namespace

void FeatureSet::validate(const char* what) const {
  if (size() < 2) throw std::invalid_argument(std::string(what) + ": need at least 2 vectors");
  if (dim() < 1) throw std::invalid_argument(std::string(what) + ": empty feature dimension");
  if (!features.allFinite()) throw NonFiniteError(std::string(what) + ": non-finite feature");
}

double fid(const FeatureSet& real, const FeatureSet& fake) {
  check_pair(real, fake);
  if (real.size() < real.dim() || fake.size() < fake.dim()) {
    std::cerr << "warning: fid with fewer samples (" << std::min(real.size(), fake.size())
              << ") than feature dimensions (" << real.dim() << "); covariances are rank deficient\n";
  }
  Eigen::VectorXd mu_r, mu_g;
  Eigen::MatrixXd cov_r, cov_g;
  moments(real.features, mu_r, cov_r);
  moments(fake.features, mu_g, cov_g);

  // Tr (S_r S_g)^{1/2} = Tr (S_g^{1/2} S_r S_g^{1/2})^{1/2}; the inner matrix is symmetric PSD.
  const Eigen::MatrixXd root_g = psd_sqrt(cov_g);
  Eigen::MatrixXd inner = root_g * cov_r * root_g;
  inner = 0.5 * (inner + inner.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double d = (mu_r - mu_g).squaredNorm() + cov_r.trace() + cov_g.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

Eigen::VectorXd knn_radii(const FeatureSet& set, int k) {
  set.validate("features");
  if (k < 1 || k >= set.size()) throw std::invalid_argument("knn_radii: k out of range");
  return knn_radii_sq(RowMatrix(set.features), k).cwiseSqrt();
}

PrecisionRecall precision_recall(const FeatureSet& real, const FeatureSet& fake, int k) {
  check_pair(real, fake);
  check_k(real, fake, k);
  const RowMatrix r(real.features), f(fake.features);
  PrecisionRecall out;
  out.precision = coverage(f, r, knn_radii_sq(r, k));
  out.recall = coverage(r, f, knn_radii_sq(f, k));
  return out;
}

FeatureSet PixelEmbedder::embed(const Tensor& images) const {
  check_images(images, "pixel");
  const std::int64_t n = images.batch();
  FeatureSet out{Eigen::MatrixXd(n, 192), id()};
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t cy = 0; cy < 8; ++cy)
        for (std::int64_t cx = 0; cx < 8; ++cx) {
          double acc = 0.0;
          for (std::int64_t y = 0; y < 4; ++y)
            for (std::int64_t x = 0; x < 4; ++x) acc += images.at(((b * 3 + c) * 32 + cy * 4 + y) * 32 + cx * 4 + x);
          out.features(b, (c * 8 + cy) * 8 + cx) = acc / 16.0;
        }
  return out;
}

RandConvEmbedder::RandConvEmbedder(std::uint64_t seed) : seed_(seed) {
  Rng rng(Rng::derive(seed, 0x52434e));
  w1_ = rng.normal_tensor({32, 3, 3, 3}, std::sqrt(2.0 / 27.0), DType::f64);
  w2_ = rng.normal_tensor({64, 32, 3, 3}, std::sqrt(2.0 / 288.0), DType::f64);
  w3_ = rng.normal_tensor({128, 64, 3, 3}, std::sqrt(2.0 / 576.0), DType::f64);
}

std::string RandConvEmbedder::id() const { return "randconv:" + std::to_string(seed_); }

FeatureSet RandConvEmbedder::embed(const Tensor& images) const {
  check_images(images, "randconv");
  constexpr std::int64_t kChunk = 128;
  const std::int64_t n = images.batch();
  FeatureSet out{Eigen::MatrixXd(n, 128), id()};
  NoGradGuard ng;
  const Var w1(w1_), w2(w2_), w3(w3_);
  for (std::int64_t b0 = 0; b0 < n; b0 += kChunk) {
    const std::int64_t nb = std::min(kChunk, n - b0);
    Var h(batch_slice(images, b0, nb));
    h = avgpool2x(relu(conv2d(h, w1, Var(), 1, 1)));
    h = avgpool2x(relu(conv2d(h, w2, Var(), 1, 1)));
    h = relu(conv2d(h, w3, Var(), 1, 1));
    const Tensor pooled = global_sum_pool(h).value();  // [nb, 128]
    for (std::int64_t i = 0; i < nb; ++i)
      for (std::int64_t c = 0; c < 128; ++c) out.features(b0 + i, c) = pooled.at(i * 128 + c) / 64.0;
  }
  return out;
}

std::unique_ptr<Embedder> make_embedder(const std::string& id) {
  if (id == "pixel") return std::make_unique<PixelEmbedder>();
  if (id == "randconv") return std::make_unique<RandConvEmbedder>(0);
  if (id.rfind("randconv:", 0) == 0) {
    const std::string digits = id.substr(9);
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
      throw std::invalid_argument("bad randconv seed in embedder id '" + id + "'");
    }
    return std::make_unique<RandConvEmbedder>(std::stoull(digits));
  }
  throw std::invalid_argument("unknown embedder '" + id + "' (expected pixel, randconv or randconv:<seed>)");
}

FeatureSet external_features(Eigen::MatrixXd features, const std::string& source) {
  FeatureSet out{std::move(features), "external:" + source};
  out.validate("external features");
  return out;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["fid"] = fid;
  j["precision"] = precision;
  j["recall"] = recall;
  j["k"] = k;
  j["embedder_id"] = embedder_id;
  j["n_real"] = n_real;
  j["n_fake"] = n_fake;
  return j.dump();
}

MetricReport MetricReport::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricReport r;
  r.step = j.at("step").get<std::int64_t>();
  r.fid = j.at("fid").get<double>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.k = j.at("k").get<int>();
  r.embedder_id = j.at("embedder_id").get<std::string>();
  r.n_real = j.at("n_real").get<std::int64_t>();
  r.n_fake = j.at("n_fake").get<std::int64_t>();
  return r;
}

MetricReport compare(const FeatureSet& real, const FeatureSet& fake, int k, std::int64_t step) {
  MetricReport r;
  r.step = step;
  r.fid = fid(real, fake);
  const auto pr = precision_recall(real, fake, k);
  r.precision = pr.precision;
  r.recall = pr.recall;
  r.k = k;
  r.embedder_id = real.embedder_id;
  r.n_real = real.size();
  r.n_fake = fake.size();
  return r;
}

}  // namespace fcbgan
