#include <doctest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "uadi/gradcheck.hpp"
#include "uadi/losses.hpp"

using namespace uadi;

namespace {

Tensor img(int H, int W, const std::vector<double>& v) { return Tensor::from({1, H, W, 1}, v); }

}  // namespace

TEST_CASE("focal Tversky reference cases") {
  const LossConfig cfg;
  Rng rng(1);
  const Tensor m = oracle::random_mask({2, 6, 6, 1}, rng);
  CHECK(focal_tversky(m, m, cfg).item() == 0.0);
  const Tensor z = Tensor::zeros({1, 4, 4, 1});
  CHECK(focal_tversky(z, z, cfg).item() == 0.0);

  const Tensor target = img(2, 2, {1, 1, 0, 0});
  const Tensor pred = img(2, 2, {1, 0, 0, 1});
  // TP = FP = FN = 1: TI = 2 / (1 + 0.3 + 0.7 + 1) = 2/3
  CHECK(focal_tversky(pred, target, cfg).item() == doctest::Approx(std::pow(1.0 / 3.0, 0.75)).epsilon(1e-15));
}

TEST_CASE("focal Tversky pools counts over the batch") {
  const LossConfig cfg;
  const Tensor target = Tensor::from({2, 1, 2, 1}, {1, 0, 0, 0});
  const Tensor pred = Tensor::from({2, 1, 2, 1}, {0.5, 0, 0, 0.5});
  // TP 0.5, FP 0.5, FN 0.5
  const double ti = 1.5 / (0.5 + 0.15 + 0.35 + 1.0);
  CHECK(focal_tversky(pred, target, cfg).item() == doctest::Approx(std::pow(1 - ti, 0.75)).epsilon(1e-15));
}

TEST_CASE("curvature kernel identities") {
  const Eigen::MatrixXd k = curvature_kernel(1.0, 7);
  const int h = 3;
  CHECK(k(h, h) == 0.0);
  for (int i = 0; i < 7; ++i) CHECK(k(i, i) == 0.0);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) CHECK(k(y, x) == -k(x, y));
  CHECK(k(h, h + 1) == std::exp(-0.5));  // K(x=1, y=0)
  CHECK(k(h + 1, h) == -std::exp(-0.5));
  double pairwise = 0.0;
  for (int y = 0; y < 7; ++y)
    for (int x = y + 1; x < 7; ++x) pairwise += k(y, x) + k(x, y);
  CHECK(pairwise == 0.0);
  CHECK(std::abs(k.sum()) < 1e-14);
  CHECK_THROWS_AS(curvature_kernel(1.0, 4), std::invalid_argument);
}

TEST_CASE("soft binarisation fixes 0 and 1 and crosses at the threshold") {
  const Tensor p = Tensor::from({4}, {0.0, 0.5, 1.0, 0.6});
  const Tensor b = soft_binarize(p, 0.5, 50.0);
  CHECK(b[0] == 0.0);
  CHECK(b[2] == 1.0);
  CHECK(b[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(b[3] > 0.99);
}

TEST_CASE("boundary loss reference cases") {
  const LossConfig cfg;
  Rng rng(2);
  const Tensor m = oracle::random_mask({2, 8, 8, 1}, rng);
  CHECK(boundary_loss(m, m, cfg).item() == 0.0);

  // all-zero target vs all-one prediction: only the border of K * 1 survives
  const Tensor zeros = Tensor::zeros({1, 8, 8, 1});
  const Tensor ones = Tensor::full({1, 8, 8, 1}, 1.0);
  const auto K = oracle::curvature(1.0, 7);
  const auto resp = oracle::filter(std::vector<double>(64, 1.0), 8, 8, K);
  double total = 0.0;
  for (double r : resp) total += std::abs(r);
  CHECK(boundary_loss(zeros, ones, cfg).item() == doctest::Approx(total / 64).epsilon(1e-13));
  // a 7x7 support fits only at (3..4, 3..4); there the response is the kernel sum
  for (int y = 3; y <= 4; ++y)
    for (int x = 3; x <= 4; ++x) CHECK(std::abs(resp[y * 8 + x]) < 1e-14);
}

TEST_CASE("boundary loss is translation consistent") {
  const LossConfig cfg;
  Rng rng(3);
  const int N = 20, P = 5;
  std::vector<double> pm(P * P), pp(P * P);
  for (int i = 0; i < P * P; ++i) {
    pm[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    pp[i] = rng.uniform(0.05, 0.95);
  }
  auto place = [&](int oy, int ox, const std::vector<double>& patch) {
    std::vector<double> v(N * N, 0.0);
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x) v[(oy + y) * N + ox + x] = patch[y * P + x];
    return img(N, N, v);
  };
  // the 7x7 kernel spreads 3 px; both placements keep the full response inside
  const double a = boundary_loss(place(3, 3, pm), place(3, 3, pp), cfg).item();
  const double b = boundary_loss(place(11, 8, pm), place(11, 8, pp), cfg).item();
  CHECK(std::abs(a - b) * N * N < 1e-10);
  CHECK(a > 0.0);
}

TEST_CASE("texture loss reference cases") {
  Rng rng(4);
  const Tensor m = oracle::random_mask({2, 8, 8, 1}, rng);
  CHECK(texture_loss(m, m).item() == 0.0);

  const Tensor c1 = Tensor::full({1, 6, 6, 1}, 1.0);
  const Tensor c2 = Tensor::full({1, 6, 6, 1}, 0.6);
  CHECK(texture_loss(c1, c1).item() == 0.0);
  // only the zero-padded border columns respond; the loss scales with the offset
  const double s_ones = oracle::pop_std(oracle::filter(std::vector<double>(36, 1.0), 6, 6, {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}}));
  CHECK(texture_loss(c1, c2).item() == doctest::Approx(0.4 * s_ones).epsilon(1e-13));

  // vertical edge (columns 2,3 set) vs the empty field: column response [0,1,1,-1]
  // times row weights [3,4,4,3]; mean 14/16, mean square 150/16
  const Tensor edge = img(4, 4, {0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1});
  const Tensor empty = Tensor::zeros({1, 4, 4, 1});
  const double expected = std::sqrt(150.0 / 16 - (14.0 / 16) * (14.0 / 16));
  CHECK(texture_loss(edge, empty).item() == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("focal cross-entropy reference cases") {
  const std::vector<int> l0{0};
  CHECK(focal_ce(Tensor::from({1, 3}, {1000, 0, 0}), l0, 2.0).item() == 0.0);
  CHECK(focal_ce(Tensor::from({1, 3}, {0.3, 0.3, 0.3}), l0, 0.0).item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK(focal_ce(Tensor::from({1, 3}, {std::numbers::ln2, 0, 0}), l0, 2.0).item() ==
        doctest::Approx(0.25 * std::numbers::ln2).epsilon(1e-14));
  const std::vector<int> bad{3};
  CHECK_THROWS_AS(focal_ce(Tensor::zeros({1, 3}), bad, 2.0), std::invalid_argument);
}

TEST_CASE("losses match the scalar oracles on random 8x8 inputs") {
  const LossConfig cfg;
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int H = 3 + static_cast<int>(rng.below(6)), W = 3 + static_cast<int>(rng.below(6));
    const Tensor m = oracle::random_mask({2, H, W, 1}, rng);
    const Tensor p = oracle::random_tensor({2, H, W, 1}, rng, 0.0, 1.0);
    CHECK(std::abs(focal_tversky(p, m, cfg).item() - oracle::focal_tversky(p, m, cfg)) < 1e-10);
    CHECK(std::abs(boundary_loss(m, p, cfg).item() - oracle::boundary(m, p, cfg)) < 1e-10);
    CHECK(std::abs(texture_loss(m, p).item() - oracle::texture(m, p)) < 1e-10);
    const Tensor logits = oracle::random_tensor({2, 3}, rng, -3, 3);
    const std::vector<int> labels{static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};
    CHECK(std::abs(focal_ce(logits, labels, 2.0).item() - oracle::focal_ce(oracle::values(logits), labels, 3, 2.0)) <
          1e-10);
  }
}

TEST_CASE("composite loss arithmetic") {
  const LossConfig cfg;
  CHECK(combine_losses(1, 0, 0, 1, cfg) == 1.0);
  CHECK(combine_losses(0, 0, 0, 0, cfg) == 0.0);
  CHECK(combine_losses(0, 1, 0, 0, cfg) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(combine_losses(0, 0, 1, 0, cfg) == doctest::Approx(0.12).epsilon(1e-15));

  Rng rng(6);
  const Tensor m = oracle::random_mask({2, 8, 8, 1}, rng);
  std::vector<double> v(m.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m[i] > 0 ? 1000.0 : -1000.0;
  const std::vector<int> labels{2, 0};
  const TotalLoss perfect =
      total_loss(Tensor::from(m.shape(), v), Tensor::from({2, 3}, {0, 0, 1000, 1000, 0, 0}), m, labels, cfg);
  CHECK(perfect.parts.total == 0.0);

  for (int trial = 0; trial < 10; ++trial) {
    const TotalLoss t = total_loss(oracle::random_tensor({2, 8, 8, 1}, rng, -3, 3),
                                   oracle::random_tensor({2, 3}, rng, -2, 2), m, labels, cfg);
    const auto& p = t.parts;
    CHECK(std::abs(combine_losses(p.focal_tversky, p.boundary, p.texture, p.clf, cfg) - p.total) < 1e-12);
    CHECK(std::abs(p.seg - (p.focal_tversky + 0.25 * p.boundary + 0.15 * p.texture)) < 1e-12);
  }
}

TEST_CASE("loss gradients match central differences") {
  const LossConfig cfg;
  Rng rng(7);
  const Tensor m = oracle::random_mask({2, 6, 6, 1}, rng);
  // keep predictions away from the binarisation threshold's steep region
  Tensor p = oracle::random_tensor({2, 6, 6, 1}, rng, 0.05, 0.35);
  for (auto& v : p.data())
    if (rng.bernoulli(0.5)) v += 0.6;
  CHECK(grad_check([&](const Tensor& x) { return boundary_loss(m, x, cfg); }, p, 1e-6) < 1e-4);
  CHECK(grad_check([&](const Tensor& x) { return texture_loss(m, x); }, p, 1e-6) < 1e-4);
  const std::vector<int> labels{1, 2};
  CHECK(grad_check([&](const Tensor& x) { return focal_ce(x, labels, 2.0); }, oracle::random_tensor({2, 3}, rng), 1e-6) <
        1e-4);
}

TEST_CASE("loss input validation") {
  const LossConfig cfg;
  const Tensor m = Tensor::zeros({1, 4, 4, 1});
  CHECK_THROWS_AS(focal_tversky(Tensor::full({1, 4, 4, 1}, 1.5), m, cfg), std::invalid_argument);
  CHECK_THROWS_AS(texture_loss(Tensor::full({1, 4, 4, 1}, 0.5), m), std::invalid_argument);
  CHECK_THROWS_AS(boundary_loss(m, Tensor::zeros({1, 4, 5, 1}), cfg), ShapeError);
  LossConfig bad = cfg;
  bad.curvature_support = 6;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
