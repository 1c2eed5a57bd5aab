#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "uadi/data.hpp"

using namespace uadi;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uadi_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool binary(const Image& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (m.data()[i] != 0.0 && m.data()[i] != 1.0) return false;
  return true;
}

}  // namespace

TEST_CASE("generator: class invariants and lesion geometry") {
  DatasetSpec spec;
  spec.image_size = 64;
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const Sample n = generate_sample(spec, kNormal, rng);
    CHECK(n.mask.sum() == 0.0);
    CHECK(n.image.minCoeff() >= 0.0);
    CHECK(n.image.maxCoeff() <= 1.0);
  }
  for (int i = 0; i < 30; ++i) {
    LesionShape shape;
    const Sample b = generate_sample(spec, kBenign, rng, &shape);
    CHECK(binary(b.mask));
    const double area = std::numbers::pi * shape.a * shape.b;
    CHECK(std::abs(b.mask.sum() - area) <= 0.10 * area);
  }
  for (int i = 0; i < 10; ++i) {
    const Sample m = generate_sample(spec, kMalignant, rng);
    CHECK(binary(m.mask));
    CHECK(m.mask.sum() > 0.0);
    CHECK(m.label == kMalignant);
  }
}

TEST_CASE("generator: determinism independent of thread count") {
  DatasetSpec spec;
  spec.n_samples = 12;
  spec.image_size = 32;
  spec.lesion_size_range_px = {3, 7};
  spec.seed = 42;
  const auto a = generate_dataset(spec, 1);
  const auto b = generate_dataset(spec, 3);
  REQUIRE(a.size() == 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].label == b[i].label);
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].mask == b[i].mask);
  }
  spec.seed = 43;
  const auto c = generate_dataset(spec, 1);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs = differs || a[i].image != c[i].image;
  CHECK(differs);
}

TEST_CASE("generator: class proportions by largest remainder") {
  DatasetSpec spec;
  spec.n_samples = 10;
  spec.image_size = 32;
  spec.lesion_size_range_px = {3, 7};
  const auto s = generate_dataset(spec, 1);
  int counts[3] = {0, 0, 0};
  for (const auto& x : s) ++counts[x.label];
  // 2, 4.5, 3.5 -> 2, 4 or 5, 4 or 3 summing to 10
  CHECK(counts[0] == 2);
  CHECK(counts[1] + counts[2] == 8);
  CHECK(std::abs(counts[1] - 4.5) == 0.5);
}

TEST_CASE("DatasetSpec validation") {
  DatasetSpec spec;
  spec.image_size = 32;  // default lesions up to 14 px do not fit
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.lesion_size_range_px = {3, 7};
  CHECK_NOTHROW(spec.validate());
  spec.class_proportions = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("stratified split") {
  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i < 20 ? 0 : i < 65 ? 1 : 2);
  const Split s = split_dataset(labels, {0.70, 0.15, 0.15}, 9);
  CHECK(s.train.size() == 70);
  CHECK(s.val.size() == 15);
  CHECK(s.test.size() == 15);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 100);
  const int totals[3] = {20, 45, 35};
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    const double frac = static_cast<double>(part->size()) / 100.0;
    for (int c = 0; c < 3; ++c) {
      int n = 0;
      for (auto i : *part) n += labels[i] == c;
      CHECK(std::abs(n - frac * totals[c]) <= 1.0);
    }
  }
  const Split again = split_dataset(labels, {0.70, 0.15, 0.15}, 9);
  CHECK(again.train == s.train);
  CHECK(again.val == s.val);
  CHECK(again.test == s.test);
  const Split other = split_dataset(labels, {0.70, 0.15, 0.15}, 10);
  CHECK(other.train != s.train);
}

TEST_CASE("augmentation") {
  DatasetSpec spec;
  Rng rng(2);
  const Sample s = generate_sample(spec, kBenign, rng);

  const Sample id = apply_augment(s, AugmentParams{});
  CHECK(id.image == s.image);
  CHECK(id.mask == s.mask);

  AugmentParams flip;
  flip.flip = true;
  const Sample twice = apply_augment(apply_augment(s, flip), flip);
  CHECK((twice.image - s.image).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(twice.mask == s.mask);

  Rng draws(3);
  std::vector<Sample> pool{s, generate_sample(spec, kMalignant, rng), generate_sample(spec, kNormal, rng)};
  for (int i = 0; i < 1000; ++i) {
    const Sample& in = pool[i % 3];
    const AugmentParams p = draw_augment(draws);
    REQUIRE(std::abs(p.angle_deg) <= kMaxRotationDeg);
    const Sample out = apply_augment(in, p);
    REQUIRE(binary(out.mask));
    REQUIRE(out.label == in.label);
    REQUIRE(out.image.rows() == in.image.rows());
    if (in.mask.sum() > 0) REQUIRE(out.mask.sum() > 0);
    else REQUIRE(out.mask.sum() == 0);
  }
}

TEST_CASE("PGM parsing") {
  const std::string bytes = std::string("P5\n2 2\n255\n") + std::string("\x00\xff\xff\x00", 4);
  const fs::path dir = scratch("pgm");
  {
    std::ofstream(dir / "m.pgm", std::ios::binary) << bytes;
  }
  const Image m = read_mask(dir / "m.pgm");
  REQUIRE(m.rows() == 2);
  CHECK(m(0, 0) == 0.0);
  CHECK(m(0, 1) == 1.0);
  CHECK(m(1, 0) == 1.0);
  CHECK(m(1, 1) == 0.0);

  const Gray8 g = parse_pgm(std::string("P5 # comment\n  3\t# w\n1\n# maxval next\n15\n") + std::string("\x00\x0f\x05", 3));
  CHECK(g.width == 3);
  CHECK(g.height == 1);
  CHECK(g.pixels[1] == 255);
  CHECK(g.pixels[2] == 85);

  CHECK_THROWS_AS(parse_pgm("P2\n1 1\n255\n0"), FormatError);
  CHECK_THROWS_AS(parse_pgm(std::string("P5\n2 2\n255\n") + std::string("\x00\x01", 2)), FormatError);
  CHECK_THROWS_AS(parse_pgm("P5\n2 x\n255\n"), FormatError);
  try {
    parse_pgm("P5\n2 2\n0\n");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
}

TEST_CASE("mask and image IO round trips") {
  const fs::path dir = scratch("io");
  Image m(5, 7);
  Rng rng(4);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  for (const char* ext : {".png", ".pgm"}) {
    write_mask(dir / (std::string("m") + ext), m);
    CHECK(read_mask(dir / (std::string("m") + ext)) == m);
  }
  Image bad = m;
  bad(0, 0) = 0.5;
  CHECK_THROWS(write_mask(dir / "bad.png", bad));

  Image im(4, 3);
  for (Eigen::Index i = 0; i < im.size(); ++i) im.data()[i] = rng.uniform();
  write_image(dir / "i.png", im);
  CHECK((read_image(dir / "i.png") - im).cwiseAbs().maxCoeff() <= 0.5 / 255 + 1e-12);
  CHECK_THROWS(read_gray8(dir / "missing.png"));
}

TEST_CASE("dataset directory round trip") {
  const fs::path dir = scratch("dataset");
  DatasetSpec spec;
  spec.n_samples = 6;
  spec.image_size = 32;
  spec.lesion_size_range_px = {3, 7};
  const auto samples = generate_dataset(spec, 1);
  save_dataset(dir, samples);
  CHECK(fs::exists(dir / "labels.csv"));
  const auto loaded = load_dataset(dir);
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].id == samples[i].id);
    CHECK(loaded[i].label == samples[i].label);
    CHECK(loaded[i].mask == samples[i].mask);
    CHECK((loaded[i].image - samples[i].image).cwiseAbs().maxCoeff() <= 0.5 / 255 + 1e-12);
  }
  const auto big = load_dataset(dir, 64);
  CHECK(big[0].image.rows() == 64);
  CHECK(binary(big[0].mask));
}

TEST_CASE("resizing") {
  Image a(2, 2);
  a << 0, 1, 1, 0;
  const Image n = resize_nearest(a, 4, 4);
  CHECK(n(0, 0) == 0.0);
  CHECK(n(0, 3) == 1.0);
  CHECK(n(3, 3) == 0.0);
  const Image b = resize_bilinear(Image::Constant(3, 5, 0.25), 7, 2);
  CHECK((b.array() - 0.25).abs().maxCoeff() < 1e-15);
}

TEST_CASE("batches and producer threads") {
  DatasetSpec spec;
  spec.n_samples = 4;
  spec.image_size = 32;
  spec.lesion_size_range_px = {3, 7};
  const auto s = generate_dataset(spec, 1);
  const Batch b = make_batch(s, {3, 1});
  CHECK(b.images.shape() == Shape{2, 32, 32, 1});
  CHECK(b.masks.shape() == Shape{2, 32, 32, 1});
  CHECK(b.labels == std::vector<int>{s[3].label, s[1].label});
  CHECK(b.images[5] == s[3].image(0, 5));

  setenv("UADI_THREADS", "3", 1);
  CHECK(producer_threads() == 3);
  unsetenv("UADI_THREADS");
  CHECK(producer_threads() >= 1);
  CHECK(parse_label("benign") == kBenign);
  CHECK(parse_label("2") == kMalignant);
  CHECK_THROWS_AS(parse_label("cyst"), std::invalid_argument);
}
