#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "fcbgan/data_io/data_io.hpp"
#include "fcbgan/metrics/metrics.hpp"
#include "fcbgan/networks/networks.hpp"

using namespace fcbgan;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("fcbgan_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<std::uint8_t> pattern_image(int k) {
  std::vector<std::uint8_t> px(kImageBytes);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>((i * 7 + k * 31) % 256);
  return px;
}

/// Writes records of `label_bytes` label bytes followed by the image bytes.
void write_records(const std::string& path, const std::vector<std::vector<std::uint8_t>>& images, int label_bytes) {
  std::string raw;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (int l = 0; l < label_bytes; ++l) raw += static_cast<char>(i + l);
    raw.append(reinterpret_cast<const char*>(images[i].data()), images[i].size());
  }
  write_file(path, raw);
}

NetworkSpec small_spec() {
  NetworkSpec s;
  s.g_channels = 16;
  s.d_channels = 8;
  s.latent_dim = 8;
  s.seed = 3;
  return s;
}

/// Lloyd's k-means with deterministic farthest-point seeding; returns the inertia.
double kmeans_inertia(const Eigen::MatrixXd& x, int k) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd c(k, x.cols());
  c.row(0) = x.row(0);
  for (int j = 1; j < k; ++j) {
    Eigen::Index far = 0;
    double best = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      double d = std::numeric_limits<double>::infinity();
      for (int m = 0; m < j; ++m) d = std::min(d, (x.row(i) - c.row(m)).squaredNorm());
      if (d > best) best = d, far = i;
    }
    c.row(j) = x.row(far);
  }
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  double inertia = 0;
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    inertia = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int arg = 0;
      double best = std::numeric_limits<double>::infinity();
      for (int m = 0; m < k; ++m) {
        const double d = (x.row(i) - c.row(m)).squaredNorm();
        if (d < best) best = d, arg = m;
      }
      inertia += best;
      if (assign[static_cast<std::size_t>(i)] != arg) changed = true, assign[static_cast<std::size_t>(i)] = arg;
    }
    if (!changed) break;
    for (int m = 0; m < k; ++m) {
      Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(x.cols());
      int cnt = 0;
      for (Eigen::Index i = 0; i < n; ++i)
        if (assign[static_cast<std::size_t>(i)] == m) sum += x.row(i), ++cnt;
      if (cnt) c.row(m) = sum / cnt;
    }
  }
  return inertia;
}

}  // namespace

// ---- pixel mapping --------------------------------------------------------

TEST(PixelMap, Endpoints) {
  EXPECT_NEAR(byte_to_unit(0), -1.0, 1e-6);
  EXPECT_NEAR(byte_to_unit(255), 1.0, 1e-6);
  EXPECT_EQ(unit_to_byte(-1.0), 0);
  EXPECT_EQ(unit_to_byte(1.0), 255);
  EXPECT_EQ(unit_to_byte(-7.0), 0);
  EXPECT_EQ(unit_to_byte(7.0), 255);
}

TEST(PixelMap, RoundTripEveryByte) {
  for (int b = 0; b < 256; ++b) {
    const auto byte = static_cast<std::uint8_t>(b);
    EXPECT_EQ(unit_to_byte(byte_to_unit(byte)), byte);
    // float32 storage, as used by datasets
    EXPECT_EQ(unit_to_byte(static_cast<float>(byte_to_unit(byte))), byte);
  }
}

TEST(PixelMap, EncodeDecodeWithinOneLevel) {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    const double v = -1.0 + 2.0 * rng.uniform();
    EXPECT_LE(std::abs(byte_to_unit(unit_to_byte(v)) - v), 1.0 / 255.0 + 1e-12);
  }
}

// ---- CIFAR binary ---------------------------------------------------------

TEST(Cifar, TwoRecordFileDecodesExactly) {
  TempDir dir;
  const auto a = pattern_image(1), b = pattern_image(2);
  write_records(dir.file("batch.bin"), {a, b}, 1);
  const auto bytes = read_cifar_file(dir.file("batch.bin"), CifarVariant::cifar10);
  ASSERT_EQ(bytes.size(), 2u * kImageBytes);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), bytes.begin()));
  EXPECT_TRUE(std::equal(b.begin(), b.end(), bytes.begin() + kImageBytes));

  ImageDataset ds("two", bytes, 0);
  ASSERT_EQ(ds.size(), 2);
  const Tensor img = ds.image(1);
  EXPECT_EQ(img.shape(), (Shape{1, 3, 32, 32}));
  for (std::int64_t j = 0; j < kImageBytes; ++j) {
    ASSERT_EQ(img.data<float>()[static_cast<std::size_t>(j)], static_cast<float>(b[static_cast<std::size_t>(j)] / 127.5 - 1.0));
  }
}

TEST(Cifar, ChannelPlanesAreRowMajorRgb) {
  TempDir dir;
  std::vector<std::uint8_t> px(kImageBytes);
  px[0] = 255;                 // R at (0, 0)
  px[1024 + 33] = 255;         // G at (1, 1)
  px[2048 + 1023] = 255;       // B at (31, 31)
  write_records(dir.file("one.bin"), {px}, 1);
  ImageDataset ds("one", read_cifar_file(dir.file("one.bin"), CifarVariant::cifar10), 0);
  const Tensor img = ds.image(0);
  EXPECT_NEAR(img.at(0), 1.0, 1e-6);
  EXPECT_NEAR(img.at(1), -1.0, 1e-6);
  EXPECT_NEAR(img.at(1024 + 1 * 32 + 1), 1.0, 1e-6);
  EXPECT_NEAR(img.at(2048 + 31 * 32 + 31), 1.0, 1e-6);
}

TEST(Cifar, Cifar100RecordsCarryTwoLabelBytes) {
  TempDir dir;
  const auto a = pattern_image(4), b = pattern_image(9);
  write_records(dir.file("train.bin"), {a, b}, 2);
  const auto bytes = read_cifar_file(dir.file("train.bin"), CifarVariant::cifar100);
  ASSERT_EQ(bytes.size(), 2u * kImageBytes);
  EXPECT_TRUE(std::equal(b.begin(), b.end(), bytes.begin() + kImageBytes));
  // read as the wrong variant: 2 * 3074 is not a multiple of 3073
  EXPECT_THROW(read_cifar_file(dir.file("train.bin"), CifarVariant::cifar10), IoError);
}

TEST(Cifar, TruncatedFileRaises) {
  TempDir dir;
  write_records(dir.file("batch.bin"), {pattern_image(0), pattern_image(1)}, 1);
  std::string raw = read_file(dir.file("batch.bin"));
  raw.resize(raw.size() - 100);
  write_file(dir.file("batch.bin"), raw);
  EXPECT_THROW(read_cifar_file(dir.file("batch.bin"), CifarVariant::cifar10), IoError);
  write_file(dir.file("empty.bin"), "");
  EXPECT_THROW(read_cifar_file(dir.file("empty.bin"), CifarVariant::cifar10), IoError);
  EXPECT_THROW(read_cifar_file(dir.file("missing.bin"), CifarVariant::cifar10), IoError);
}

TEST(Cifar, DirectoryWithWrongRecordCountRaises) {
  TempDir dir;
  for (int i = 1; i <= 5; ++i) write_records(dir.file("data_batch_" + std::to_string(i) + ".bin"), {pattern_image(i)}, 1);
  EXPECT_THROW(load_cifar(dir.path().string(), CifarVariant::cifar10, 0), IoError);
  EXPECT_THROW(open_dataset(dir.path().string(), 0), IoError);
  write_records(dir.file("train.bin"), {pattern_image(0)}, 2);
  EXPECT_THROW(load_cifar(dir.path().string(), CifarVariant::cifar100, 0), IoError);
}

// ---- finite datasets ------------------------------------------------------

TEST(ImageDataset, EpochVisitsEveryImageOnce) {
  std::vector<std::uint8_t> bytes;
  for (int i = 0; i < 10; ++i) {
    std::vector<std::uint8_t> px(kImageBytes, static_cast<std::uint8_t>(i * 20));
    bytes.insert(bytes.end(), px.begin(), px.end());
  }
  ImageDataset ds("ten", bytes, 77);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<int> seen;
    for (int b = 0; b < 5; ++b) {
      const Tensor batch = ds.next_batch(2);
      for (int i = 0; i < 2; ++i) seen.insert(unit_to_byte(batch.at(i * kImageBytes)) / 20);
    }
    EXPECT_EQ(seen, (std::multiset<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
  }
}

TEST(ImageDataset, SameSeedSameOrderDifferentSeedDiffers) {
  std::vector<std::uint8_t> bytes;
  for (int i = 0; i < 50; ++i) {
    auto px = pattern_image(i);
    bytes.insert(bytes.end(), px.begin(), px.end());
  }
  ImageDataset a("a", bytes, 1), b("b", bytes, 1), c("c", bytes, 2);
  const Tensor ba = a.next_batch(120), bb = b.next_batch(120), bc = c.next_batch(120);
  EXPECT_TRUE(ba.identical(bb));
  EXPECT_FALSE(ba.identical(bc));
}

TEST(ImageDataset, StateRestoresPosition) {
  std::vector<std::uint8_t> bytes;
  for (int i = 0; i < 7; ++i) {
    auto px = pattern_image(i);
    bytes.insert(bytes.end(), px.begin(), px.end());
  }
  ImageDataset a("a", bytes, 9);
  a.next_batch(10);
  const std::string st = a.state();
  const Tensor want = a.next_batch(12);
  ImageDataset b("b", bytes, 9);
  b.set_state(st);
  EXPECT_TRUE(b.next_batch(12).identical(want));
  EXPECT_THROW(b.set_state("x"), std::invalid_argument);
  EXPECT_THROW(b.set_state("0 8"), std::invalid_argument);
}

TEST(ImageDataset, RejectsPartialImages) {
  EXPECT_THROW(ImageDataset("bad", std::vector<std::uint8_t>(kImageBytes + 1), 0), IoError);
  EXPECT_THROW(ImageDataset("bad", {}, 0), IoError);
}

TEST(PngFolder, LoadsSortedImages) {
  TempDir dir;
  for (int k : {2, 0, 1}) {
    RgbImage img{32, 32, std::vector<std::uint8_t>(32 * 32 * 3)};
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
      img.pixels[i] = static_cast<std::uint8_t>(k * 100);
      img.pixels[i + 1] = 10;
      img.pixels[i + 2] = 250;
    }
    write_png(img, dir.file("img" + std::to_string(k) + ".png"));
  }
  auto ds = load_png_folder(dir.path().string(), 0);
  ASSERT_EQ(ds->size(), 3);
  for (int k = 0; k < 3; ++k) {
    const Tensor t = ds->image(k);
    EXPECT_EQ(unit_to_byte(t.at(5)), k * 100);
    EXPECT_EQ(unit_to_byte(t.at(1024 + 5)), 10);
    EXPECT_EQ(unit_to_byte(t.at(2048 + 5)), 250);
  }
  write_png(RgbImage{16, 16, std::vector<std::uint8_t>(16 * 16 * 3)}, dir.file("small.png"));
  EXPECT_THROW(load_png_folder(dir.path().string(), 0), IoError);
}

// ---- synthetic ------------------------------------------------------------

TEST(Synthetic, ParseSpecs) {
  EXPECT_EQ(SyntheticSpec::parse("gauss-blobs").modes, 16);
  EXPECT_EQ(SyntheticSpec::parse("gauss-blobs:4").modes, 4);
  EXPECT_EQ(SyntheticSpec::parse("stripes:6").kind, SyntheticSpec::Kind::stripes);
  EXPECT_EQ(SyntheticSpec::parse("stripes:6").to_string(), "stripes:6");
  EXPECT_THROW(SyntheticSpec::parse("clouds"), std::invalid_argument);
  EXPECT_THROW(SyntheticSpec::parse("gauss-blobs:0"), std::invalid_argument);
  EXPECT_THROW(SyntheticSpec::parse("gauss-blobs:x"), std::invalid_argument);
  EXPECT_THROW(open_dataset("nothing-here", 0), std::invalid_argument);
}

TEST(Synthetic, SameSeedSameFirstHundred) {
  for (const char* spec : {"gauss-blobs:4", "stripes"}) {
    SyntheticDataset a(SyntheticSpec::parse(spec), 11), b(SyntheticSpec::parse(spec), 11), c(SyntheticSpec::parse(spec), 12);
    const Tensor ta = a.next_batch(100);
    EXPECT_TRUE(ta.identical(b.next_batch(100))) << spec;
    EXPECT_FALSE(ta.identical(c.next_batch(100))) << spec;
  }
}

TEST(Synthetic, ValuesInRangeAndFinite) {
  for (const char* spec : {"gauss-blobs", "gauss-blobs:1", "gauss-blobs:64", "stripes", "stripes:1", "stripes:32"}) {
    SyntheticDataset ds(SyntheticSpec::parse(spec), 3);
    for (int b = 0; b < 4; ++b) {
      const Tensor t = ds.next_batch(64);
      EXPECT_TRUE(t.all_finite());
      for (float v : t.data<float>()) {
        ASSERT_GE(v, -1.0f) << spec;
        ASSERT_LE(v, 1.0f) << spec;
      }
    }
  }
}

TEST(Synthetic, StateRestoresStream) {
  SyntheticDataset a(SyntheticSpec::parse("stripes"), 5);
  a.next_batch(17);
  const std::string st = a.state();
  const Tensor want = a.next_batch(9);
  SyntheticDataset b(SyntheticSpec::parse("stripes"), 999);
  b.set_state(st);
  EXPECT_TRUE(b.next_batch(9).identical(want));
}

TEST(Synthetic, GaussBlobsFourPositionsGiveFourClusters) {
  SyntheticDataset ds(SyntheticSpec::parse("gauss-blobs:4"), 21);
  const Tensor images = ds.next_batch(400);
  const FeatureSet f = PixelEmbedder().embed(images);
  std::set<int> modes(ds.last_modes().begin(), ds.last_modes().end());
  EXPECT_EQ(modes.size(), 4u);

  std::vector<double> inertia;
  for (int k = 1; k <= 6; ++k) inertia.push_back(kmeans_inertia(f.features, k));
  // Elbow at 4: each step up to 4 removes most of the remaining spread, later steps do not.
  EXPECT_LT(inertia[3], 0.1 * inertia[2]);
  EXPECT_GT(inertia[4], 0.5 * inertia[3]);
  EXPECT_GT(inertia[5], 0.5 * inertia[4]);
}

TEST(Synthetic, StripesModesAreSeparated) {
  SyntheticDataset ds(SyntheticSpec::parse("stripes:4"), 8);
  ds.next_batch(200);
  std::set<int> modes(ds.last_modes().begin(), ds.last_modes().end());
  EXPECT_EQ(modes.size(), 4u);
}

// ---- PNG and grids --------------------------------------------------------

TEST(Png, RoundTrip) {
  TempDir dir;
  RgbImage img{5, 3, {}};
  for (int i = 0; i < 5 * 3 * 3; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 5));
  write_png(img, dir.file("x.png"));
  const RgbImage back = read_png(dir.file("x.png"));
  EXPECT_EQ(back.width, 5);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(Grid, ConstantMinusOneIsAllZeroBytes) {
  TempDir dir;
  const Tensor imgs = Tensor::full({64, 3, 32, 32}, -1.0);
  write_grid(imgs, dir.file("g.png"));
  const RgbImage back = read_png(dir.file("g.png"));
  EXPECT_EQ(back.width, 256);
  EXPECT_EQ(back.height, 256);
  EXPECT_TRUE(std::all_of(back.pixels.begin(), back.pixels.end(), [](std::uint8_t b) { return b == 0; }));
}

TEST(Grid, TileOrderAndPadding) {
  Tensor imgs = Tensor::full({10, 3, 32, 32}, 1.0);
  imgs.set(9 * kImageBytes + 1024, -1.0);  // image 9, channel G, pixel (0, 0)
  const RgbImage g = make_grid(imgs);
  EXPECT_EQ(g.width, 256);
  EXPECT_EQ(g.height, 64);
  auto px = [&](std::int64_t x, std::int64_t y, int c) { return g.pixels[static_cast<std::size_t>((y * g.width + x) * 3 + c)]; };
  EXPECT_EQ(px(0, 0, 0), 255);
  EXPECT_EQ(px(32, 32, 0), 255);  // image 9 sits in row 1, column 1
  EXPECT_EQ(px(32, 32, 1), 0);
  EXPECT_EQ(px(64, 32, 0), 0);    // padded cells are black
  EXPECT_EQ(px(255, 63, 2), 0);
}

TEST(Grid, RejectsTooManyImages) {
  EXPECT_THROW(make_grid(Tensor::zeros({65, 3, 32, 32})), std::invalid_argument);
  EXPECT_THROW(make_grid(Tensor::zeros({4, 1, 32, 32})), ShapeError);
}

TEST(Png, UnwritablePathRaises) {
  EXPECT_THROW(write_png(RgbImage{1, 1, {0, 0, 0}}, "/nonexistent_dir/x.png"), IoError);
  EXPECT_THROW(read_png("/nonexistent_dir/x.png"), IoError);
}

// ---- npy ------------------------------------------------------------------

TEST(Npy, RoundTripBothDtypes) {
  TempDir dir;
  Rng rng(2);
  for (DType dt : {DType::f32, DType::f64}) {
    for (const Shape& s : {Shape{7}, Shape{3, 4}, Shape{2, 3, 5}, Shape{2, 3, 4, 5}}) {
      const Tensor t = rng.normal_tensor(s, 1.0, dt);
      write_npy(t, dir.file("t.npy"));
      const Tensor back = read_npy(dir.file("t.npy"));
      EXPECT_TRUE(back.identical(t)) << shape_str(s);
      const std::string raw = read_file(dir.file("t.npy"));
      const std::size_t header = raw.size() - static_cast<std::size_t>(t.numel()) * (dt == DType::f32 ? 4 : 8);
      EXPECT_EQ(header % 64, 0u);
    }
  }
  const std::string raw = [&] {
    write_npy(Tensor::zeros({3}), dir.file("v.npy"));
    return read_file(dir.file("v.npy"));
  }();
  EXPECT_NE(raw.find("'shape': (3,)"), std::string::npos);
}

TEST(Npy, RejectsUnsupported) {
  TempDir dir;
  write_file(dir.file("a.npy"), "not numpy");
  EXPECT_THROW(read_npy(dir.file("a.npy")), IoError);
  write_npy(Tensor::zeros({2, 2}), dir.file("b.npy"));
  std::string raw = read_file(dir.file("b.npy"));
  write_file(dir.file("c.npy"), raw.substr(0, raw.size() - 1));
  EXPECT_THROW(read_npy(dir.file("c.npy")), IoError);
  raw.replace(raw.find("<f4"), 3, "<i4");
  write_file(dir.file("d.npy"), raw);
  EXPECT_THROW(read_npy(dir.file("d.npy")), IoError);
}

// ---- checkpoints ----------------------------------------------------------

TEST(Checkpoint, ModuleRoundTripBitEqual) {
  TempDir dir;
  Generator g(small_spec());
  Discriminator d(small_spec());
  // put spectral and batchnorm state into a non-initial configuration
  Rng rng(1);
  g.forward(Var(rng.normal_tensor({4, 8}), false));
  d.forward(Var(rng.normal_tensor({4, 3, 32, 32}), false));

  Checkpoint ck;
  ck.meta["step"] = "12";
  export_module(g, "G.", ck);
  export_module(d, "D.", ck);
  save_checkpoint(ck, dir.file("c.ckpt"));

  NetworkSpec other = small_spec();
  other.seed = 99;
  Generator g2(other);
  Discriminator d2(other);
  const Checkpoint back = load_checkpoint(dir.file("c.ckpt"));
  EXPECT_EQ(back.get_meta("step"), "12");
  import_module(g2, "G.", back);
  import_module(d2, "D.", back);

  auto same = [](const Module& a, const Module& b) {
    const auto pa = a.named_parameters(), pb = b.named_parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      EXPECT_TRUE(pa[i].param->value().identical(pb[i].param->value())) << pa[i].name;
      ASSERT_EQ(pa[i].param->spectral().has_value(), pb[i].param->spectral().has_value());
      if (pa[i].param->spectral()) {
        EXPECT_TRUE(pa[i].param->spectral()->u.identical(pb[i].param->spectral()->u));
        EXPECT_TRUE(pa[i].param->spectral()->v.identical(pb[i].param->spectral()->v));
      }
    }
    const auto sa = a.named_stats(), sb = b.named_stats();
    ASSERT_EQ(sa.size(), sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
      EXPECT_TRUE(sa[i].stats->running_mean.identical(sb[i].stats->running_mean));
      EXPECT_TRUE(sa[i].stats->running_var.identical(sb[i].stats->running_var));
      EXPECT_EQ(sa[i].stats->initialized, sb[i].stats->initialized);
    }
  };
  same(g, g2);
  same(d, d2);

  g.set_training(false);
  g2.set_training(false);
  const Tensor z = rng.normal_tensor({3, 8});
  EXPECT_TRUE(g.forward(Var(z, false)).value().identical(g2.forward(Var(z, false)).value()));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir;
  Generator g(small_spec());
  Checkpoint ck;
  ck.meta["config"] = "a = 1\nb = 2\n";
  ck.tensors["extra.f64"] = Tensor::full({3}, 0.1, DType::f64);
  export_module(g, "G.", ck);
  save_checkpoint(ck, dir.file("a.ckpt"));
  save_checkpoint(load_checkpoint(dir.file("a.ckpt")), dir.file("b.ckpt"));
  EXPECT_EQ(read_file(dir.file("a.ckpt")), read_file(dir.file("b.ckpt")));
  EXPECT_FALSE(fs::exists(dir.file("a.ckpt.tmp")));
}

TEST(Checkpoint, BumpedVersionRaises) {
  Checkpoint ck;
  ck.tensors["x"] = Tensor::zeros({2});
  std::string raw = serialize_checkpoint(ck);
  raw[8] = static_cast<char>(Checkpoint::kVersion + 1);
  EXPECT_THROW(deserialize_checkpoint(raw), CheckpointVersionError);
  ck.version = Checkpoint::kVersion + 1;
  EXPECT_THROW(deserialize_checkpoint(serialize_checkpoint(ck)), CheckpointVersionError);
}

TEST(Checkpoint, CorruptInputRaises) {
  Checkpoint ck;
  ck.tensors["x"] = Tensor::zeros({2, 2});
  const std::string raw = serialize_checkpoint(ck);
  EXPECT_THROW(deserialize_checkpoint("garbage"), IoError);
  EXPECT_THROW(deserialize_checkpoint(raw.substr(0, raw.size() - 1)), IoError);
  EXPECT_THROW(deserialize_checkpoint(raw.substr(0, 14)), IoError);
  std::string bad = raw;
  bad[20] = '!';
  EXPECT_THROW(deserialize_checkpoint(bad), IoError);
}

TEST(Checkpoint, UnwritablePathRaises) {
  Checkpoint ck;
  EXPECT_THROW(save_checkpoint(ck, "/nonexistent_dir/c.ckpt"), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent_dir/c.ckpt"), IoError);
}

TEST(Checkpoint, ImportRejectsMismatchWithoutPartialWrite) {
  Generator g(small_spec());
  Checkpoint ck;
  export_module(g, "G.", ck);
  NetworkSpec wide = small_spec();
  wide.g_channels = 32;
  Generator g2(wide);
  const Tensor before = g2.named_parameters().front().param->value();
  EXPECT_THROW(import_module(g2, "G.", ck), IoError);
  EXPECT_TRUE(g2.named_parameters().front().param->value().identical(before));
  EXPECT_THROW(import_module(g, "X.", ck), IoError);
}
