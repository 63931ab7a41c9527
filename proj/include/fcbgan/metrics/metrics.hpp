#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include <Eigen/Core>

#include "fcbgan/substrate/tensor.hpp"

namespace fcbgan {

/// N embedding vectors of dimension d, one per row.
struct FeatureSet {
  Eigen::MatrixXd features;
  std::string embedder_id;

  std::int64_t size() const { return features.rows(); }
  std::int64_t dim() const { return features.cols(); }
  /// Throws unless N >= 2 and every entry is finite.
  void validate(const char* what) const;
};

/// Frechet distance between Gaussians fitted to the two sets:
/// ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}), covariances with
/// 1/(N-1). Never negative. Warns on stderr when N < d.
double fid(const FeatureSet& real, const FeatureSet& fake);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

/// k-NN manifold precision and recall. A point lies inside manifold(S) when
/// its distance to some s in S is at most the distance from s to its k-th
/// nearest neighbour in S (s itself excluded).
PrecisionRecall precision_recall(const FeatureSet& real, const FeatureSet& fake, int k = 3);

/// Distance from each point to its k-th nearest neighbour within the set.
Eigen::VectorXd knn_radii(const FeatureSet& set, int k);

/// Maps images [B, 3, 32, 32] in [-1, 1] to features, deterministically.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::string id() const = 0;
  virtual std::int64_t dim() const = 0;
  virtual FeatureSet embed(const Tensor& images) const = 0;
};

/// 4x4 average pooling down to 8x8, flattened channel-major: d = 192.
class PixelEmbedder : public Embedder {
 public:
  std::string id() const override { return "pixel"; }
  std::int64_t dim() const override { return 192; }
  FeatureSet embed(const Tensor& images) const override;
};

/// Frozen random network: three 3x3 conv + ReLU stages (3->32->64->128, 2x
/// average pooling after the first two), then global average pooling: d = 128.
class RandConvEmbedder : public Embedder {
 public:
  explicit RandConvEmbedder(std::uint64_t seed = 0);
  std::string id() const override;
  std::int64_t dim() const override { return 128; }
  FeatureSet embed(const Tensor& images) const override;

 private:
  std::uint64_t seed_;
  Tensor w1_, w2_, w3_;
};

/// "pixel", "randconv" or "randconv:<seed>".
std::unique_ptr<Embedder> make_embedder(const std::string& id);

/// Features computed elsewhere, e.g. loaded from a file.
FeatureSet external_features(Eigen::MatrixXd features, const std::string& source);

struct MetricReport {
  std::int64_t step = 0;
  double fid = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  int k = 3;
  std::string embedder_id;
  std::int64_t n_real = 0;
  std::int64_t n_fake = 0;

  /// One JSON object on a single line.
  std::string to_json() const;
  static MetricReport from_json(const std::string& line);
};

MetricReport compare(const FeatureSet& real, const FeatureSet& fake, int k, std::int64_t step = 0);

}  // namespace fcbgan
