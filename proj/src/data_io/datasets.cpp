#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <sstream>

#include "fcbgan/data_io/data_io.hpp"

namespace fcbgan {

namespace fs = std::filesystem;

// ---- finite image sets ----------------------------------------------------

ImageDataset::ImageDataset(std::string name, std::vector<std::uint8_t> bytes, std::uint64_t seed)
    : name_(std::move(name)), bytes_(std::move(bytes)), seed_(seed) {
  if (bytes_.empty() || bytes_.size() % kImageBytes) {
    throw IoError(name_ + ": " + std::to_string(bytes_.size()) + " bytes is not a whole number of 3x32x32 images");
  }
  count_ = static_cast<std::int64_t>(bytes_.size()) / kImageBytes;
  shuffle();
}

std::string ImageDataset::describe() const { return name_ + " (" + std::to_string(count_) + " images)"; }

void ImageDataset::shuffle() {
  order_.resize(static_cast<std::size_t>(count_));
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng(Rng::derive(seed_, static_cast<std::uint64_t>(epoch_)));
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
}

Tensor ImageDataset::next_batch(std::int64_t n) {
  if (n < 1) throw std::invalid_argument("next_batch: n must be >= 1");
  Tensor out = Tensor::uninitialized({n, 3, kImageSide, kImageSide}, DType::f32);
  auto o = out.data<float>();
  for (std::int64_t i = 0; i < n; ++i) {
    if (cursor_ == count_) {
      ++epoch_;
      cursor_ = 0;
      shuffle();
    }
    const std::uint8_t* src = bytes_.data() + order_[static_cast<std::size_t>(cursor_++)] * kImageBytes;
    for (std::int64_t j = 0; j < kImageBytes; ++j) o[static_cast<std::size_t>(i * kImageBytes + j)] = static_cast<float>(byte_to_unit(src[j]));
  }
  return out;
}

Tensor ImageDataset::image(std::int64_t i) const {
  if (i < 0 || i >= count_) throw std::out_of_range("image index " + std::to_string(i));
  Tensor out = Tensor::uninitialized({1, 3, kImageSide, kImageSide}, DType::f32);
  auto o = out.data<float>();
  for (std::int64_t j = 0; j < kImageBytes; ++j) o[static_cast<std::size_t>(j)] = static_cast<float>(byte_to_unit(bytes_[static_cast<std::size_t>(i * kImageBytes + j)]));
  return out;
}

std::string ImageDataset::state() const { return std::to_string(epoch_) + " " + std::to_string(cursor_); }

void ImageDataset::set_state(const std::string& state) {
  std::istringstream in(state);
  std::int64_t epoch = -1, cursor = -1;
  if (!(in >> epoch >> cursor) || epoch < 0 || cursor < 0 || cursor > count_) {
    throw std::invalid_argument(name_ + ": bad dataset state '" + state + "'");
  }
  epoch_ = epoch;
  cursor_ = cursor;
  shuffle();
}

// ---- CIFAR ----------------------------------------------------------------

std::vector<std::uint8_t> read_cifar_file(const std::string& path, CifarVariant variant) {
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t record = label_bytes + kImageBytes;
  const std::string raw = read_file(path);
  if (raw.empty() || raw.size() % record) {
    throw IoError("'" + path + "': size " + std::to_string(raw.size()) + " is not a whole number of " +
                  std::to_string(record) + "-byte records");
  }
  const std::size_t n = raw.size() / record;
  std::vector<std::uint8_t> out(n * kImageBytes);
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * kImageBytes, raw.data() + i * record + label_bytes, kImageBytes);
  }
  return out;
}

std::unique_ptr<ImageDataset> load_cifar(const std::string& dir, CifarVariant variant, std::uint64_t seed) {
  constexpr std::size_t kTrainImages = 50000;
  std::vector<std::string> files;
  if (variant == CifarVariant::cifar10) {
    for (int i = 1; i <= 5; ++i) files.push_back((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string());
  } else {
    files.push_back((fs::path(dir) / "train.bin").string());
  }
  std::vector<std::uint8_t> all;
  all.reserve(kTrainImages * kImageBytes);
  for (const auto& f : files) {
    auto part = read_cifar_file(f, variant);
    if (variant == CifarVariant::cifar10 && part.size() != 10000 * kImageBytes) {
      throw IoError("'" + f + "': expected 10000 records, found " + std::to_string(part.size() / kImageBytes));
    }
    all.insert(all.end(), part.begin(), part.end());
  }
  if (all.size() != kTrainImages * kImageBytes) {
    throw IoError("'" + dir + "': expected 50000 training images, found " + std::to_string(all.size() / kImageBytes));
  }
  const char* name = variant == CifarVariant::cifar10 ? "cifar10" : "cifar100";
  return std::make_unique<ImageDataset>(name, std::move(all), seed);
}

std::unique_ptr<ImageDataset> load_png_folder(const std::string& dir, std::uint64_t seed) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") paths.push_back(e.path());
  }
  if (paths.empty()) throw IoError("'" + dir + "' contains no .png files");
  std::sort(paths.begin(), paths.end());
  std::vector<std::uint8_t> all;
  all.reserve(paths.size() * kImageBytes);
  for (const auto& p : paths) {
    RgbImage img = read_png(p.string());
    if (img.width != kImageSide || img.height != kImageSide) {
      throw IoError("'" + p.string() + "' is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                    ", expected 32x32");
    }
    // interleaved RGB -> planar
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < kImageSide * kImageSide; ++i) all.push_back(img.pixels[static_cast<std::size_t>(i * 3 + c)]);
  }
  return std::make_unique<ImageDataset>("png:" + dir, std::move(all), seed);
}

// ---- synthetic ------------------------------------------------------------

SyntheticSpec SyntheticSpec::parse(const std::string& text) {
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  SyntheticSpec s;
  if (kind == "gauss-blobs") {
    s.kind = Kind::gauss_blobs;
  } else if (kind == "stripes") {
    s.kind = Kind::stripes;
    s.modes = 8;
  } else {
    throw std::invalid_argument("unknown synthetic dataset '" + kind + "' (expected gauss-blobs or stripes)");
  }
  if (colon != std::string::npos) {
    const std::string n = text.substr(colon + 1);
    if (n.empty() || n.size() > 4 || n.find_first_not_of("0123456789") != std::string::npos) {
      throw std::invalid_argument("bad mode count in '" + text + "'");
    }
    s.modes = std::stoi(n);
  }
  if (s.modes < 1 || s.modes > 64) throw std::invalid_argument("synthetic mode count must be in [1, 64]");
  return s;
}

std::string SyntheticSpec::to_string() const {
  return std::string(kind == Kind::gauss_blobs ? "gauss-blobs" : "stripes") + ":" + std::to_string(modes);
}

SyntheticDataset::SyntheticDataset(SyntheticSpec spec, std::uint64_t seed) : spec_(spec), rng_(seed) {}

void SyntheticDataset::render(float* out, int mode) {
  constexpr std::int64_t n = kImageSide;
  constexpr std::int64_t plane = n * n;
  if (spec_.kind == SyntheticSpec::Kind::gauss_blobs) {
    // Single white bump; modes sit on the cells of a g x g grid.
    const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec_.modes))));
    const double cell = static_cast<double>(n) / g;
    const double sigma = std::max(1.5, 0.4 * cell);
    const double cx = (mode % g + 0.5) * cell + (rng_.uniform() - 0.5);
    const double cy = (mode / g + 0.5) * cell + (rng_.uniform() - 0.5);
    const double amp = 0.75 + 0.25 * rng_.uniform();
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x) {
        const double r2 = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
        const auto v = static_cast<float>(-1.0 + 2.0 * amp * std::exp(-r2 / (2 * sigma * sigma)));
        for (int c = 0; c < 3; ++c) out[c * plane + y * n + x] = v;
      }
    return;
  }
  // Coloured bar at one of `modes` orientations with a random offset.
  const double theta = std::numbers::pi * mode / spec_.modes;
  const double nx = std::cos(theta), ny = std::sin(theta);
  const double offset = 16.0 * (rng_.uniform() - 0.5);
  const double half = 2.0;
  double color[3];
  for (double& c : color) c = 0.3 + 0.7 * rng_.uniform();
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x) {
      const double d = (x + 0.5 - n / 2.0) * nx + (y + 0.5 - n / 2.0) * ny - offset;
      const double mask = std::clamp(half + 0.5 - std::abs(d), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) out[c * plane + y * n + x] = static_cast<float>(-1.0 + 2.0 * color[c] * mask);
    }
}

Tensor SyntheticDataset::next_batch(std::int64_t n) {
  if (n < 1) throw std::invalid_argument("next_batch: n must be >= 1");
  Tensor out = Tensor::uninitialized({n, 3, kImageSide, kImageSide}, DType::f32);
  auto o = out.data<float>();
  last_modes_.assign(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const int mode = static_cast<int>(rng_.below(static_cast<std::uint64_t>(spec_.modes)));
    last_modes_[static_cast<std::size_t>(i)] = mode;
    render(o.data() + i * kImageBytes, mode);
  }
  return out;
}

// ---- source strings -------------------------------------------------------

std::unique_ptr<Dataset> open_dataset(const std::string& source, std::uint64_t seed) {
  auto starts = [&](const char* p) { return source.rfind(p, 0) == 0; };
  if (starts("gauss-blobs") || starts("stripes")) return std::make_unique<SyntheticDataset>(SyntheticSpec::parse(source), seed);
  if (starts("cifar10:")) return load_cifar(source.substr(8), CifarVariant::cifar10, seed);
  if (starts("cifar100:")) return load_cifar(source.substr(9), CifarVariant::cifar100, seed);
  if (starts("png:")) return load_png_folder(source.substr(4), seed);
  if (fs::is_directory(source)) {
    if (fs::exists(fs::path(source) / "data_batch_1.bin")) return load_cifar(source, CifarVariant::cifar10, seed);
    if (fs::exists(fs::path(source) / "train.bin")) return load_cifar(source, CifarVariant::cifar100, seed);
    return load_png_folder(source, seed);
  }
  throw std::invalid_argument("unknown data source '" + source + "'");
}

}  // namespace fcbgan
