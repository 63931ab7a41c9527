#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcbgan/substrate/module.hpp"
#include "fcbgan/substrate/rng.hpp"

namespace fcbgan {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public IoError {
 public:
  using IoError::IoError;
};

// ---- images ---------------------------------------------------------------

/// Pixel byte b <-> value b / 127.5 - 1.
double byte_to_unit(std::uint8_t b);
std::uint8_t unit_to_byte(double v);  // rounds, clamps to [0, 255]

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  std::int64_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

void write_png(const RgbImage& image, const std::string& path);
/// Gray, palette and alpha inputs are converted to 8-bit RGB.
RgbImage read_png(const std::string& path);

/// Tiles up to 64 images [B, 3, H, W] in [-1, 1] into one PNG, 8 per row;
/// unused cells of the last row stay black.
void write_grid(const Tensor& images, const std::string& path);
RgbImage make_grid(const Tensor& images);

// ---- npy ------------------------------------------------------------------

/// Little-endian float32/float64 arrays of rank 1..4 in C order.
void write_npy(const Tensor& t, const std::string& path);
Tensor read_npy(const std::string& path);

// ---- datasets -------------------------------------------------------------

constexpr std::int64_t kImageSide = 32;
constexpr std::int64_t kImageBytes = 3 * kImageSide * kImageSide;

/// Stream of [3, 32, 32] images in [-1, 1]. Iteration order is a function of
/// the seed and the saved state only.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::string describe() const = 0;
  /// [n, 3, 32, 32] float32.
  virtual Tensor next_batch(std::int64_t n) = 0;
  virtual std::string state() const = 0;
  virtual void set_state(const std::string& state) = 0;
};

/// Finite set of decoded images, visited in a fresh permutation every epoch.
class ImageDataset : public Dataset {
 public:
  /// `bytes` holds count * 3072 pixel bytes in [C, H, W] order per image.
  ImageDataset(std::string name, std::vector<std::uint8_t> bytes, std::uint64_t seed);

  std::string describe() const override;
  Tensor next_batch(std::int64_t n) override;
  std::string state() const override;
  void set_state(const std::string& state) override;

  std::int64_t size() const { return count_; }
  /// Image i in storage order, [1, 3, 32, 32].
  Tensor image(std::int64_t i) const;

 private:
  void shuffle();

  std::string name_;
  std::vector<std::uint8_t> bytes_;
  std::int64_t count_;
  std::uint64_t seed_;
  std::int64_t epoch_ = 0, cursor_ = 0;
  std::vector<std::int64_t> order_;
};

enum class CifarVariant { cifar10, cifar100 };

/// Decodes one binary batch file (records of label byte(s) + 3072 pixel
/// bytes); labels are dropped. Throws on a size that is not a whole number of
/// records.
std::vector<std::uint8_t> read_cifar_file(const std::string& path, CifarVariant variant);
/// The 50 000 training images of a standard binary distribution directory.
std::unique_ptr<ImageDataset> load_cifar(const std::string& dir, CifarVariant variant, std::uint64_t seed);
/// Every *.png in `dir` (sorted by name); each must be 32x32.
std::unique_ptr<ImageDataset> load_png_folder(const std::string& dir, std::uint64_t seed);

struct SyntheticSpec {
  enum class Kind { gauss_blobs, stripes } kind = Kind::gauss_blobs;
  /// gauss_blobs: number of bump positions on a square-ish grid.
  /// stripes: number of bar orientations.
  int modes = 16;

  /// "gauss-blobs", "gauss-blobs:<modes>", "stripes", "stripes:<modes>".
  static SyntheticSpec parse(const std::string& text);
  std::string to_string() const;
};

/// Procedurally generated, unbounded stream.
class SyntheticDataset : public Dataset {
 public:
  SyntheticDataset(SyntheticSpec spec, std::uint64_t seed);

  std::string describe() const override { return spec_.to_string(); }
  Tensor next_batch(std::int64_t n) override;
  std::string state() const override { return rng_.state(); }
  void set_state(const std::string& state) override { rng_.set_state(state); }

  /// Mode drawn for the most recent images, for tests.
  const std::vector<int>& last_modes() const { return last_modes_; }

 private:
  void render(float* out, int mode);

  SyntheticSpec spec_;
  Rng rng_;
  std::vector<int> last_modes_;
};

/// Opens a dataset from a source string: a synthetic spec, "cifar10:<dir>",
/// "cifar100:<dir>", "png:<dir>", or a bare directory (CIFAR-10 batches,
/// CIFAR-100 train.bin, or PNG files, detected in that order).
std::unique_ptr<Dataset> open_dataset(const std::string& source, std::uint64_t seed);

// ---- checkpoints ----------------------------------------------------------

/// Versioned container: string metadata plus named tensors. On disk:
/// magic "FCBGANCK", u32 version, u64 manifest length, JSON manifest, then the
/// raw little-endian tensor payloads in manifest order.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::map<std::string, std::string> meta;
  std::map<std::string, Tensor> tensors;

  const std::string& get_meta(const std::string& key) const;
  const Tensor& get_tensor(const std::string& key) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
/// Writes through a temporary file and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Stores parameters, spectral states and batchnorm statistics of `module`
/// under `prefix`.
void export_module(const Module& module, const std::string& prefix, Checkpoint& ckpt);
/// Inverse of export_module. Every entry must be present with matching shape
/// and dtype.
void import_module(Module& module, const std::string& prefix, const Checkpoint& ckpt);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace fcbgan
