#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "uadi/gradcheck_suite.hpp"
#include "uadi/trainer.hpp"

using namespace uadi;
namespace fs = std::filesystem;

namespace {

struct TinySet {
  std::vector<Sample> samples;
  Split split;
};

TinySet tiny_set(int n = 16, std::uint64_t seed = 3) {
  DatasetSpec spec;
  spec.n_samples = n;
  spec.image_size = 32;
  spec.lesion_size_range_px = {3, 7};
  spec.seed = seed;
  TinySet t;
  t.samples = generate_dataset(spec, 1);
  std::vector<int> labels;
  for (const auto& s : t.samples) labels.push_back(s.label);
  t.split = split_dataset(labels, {0.70, 0.15, 0.15}, seed);
  return t;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig c;
  c.model = tiny_model_config();
  c.epochs = epochs;
  c.batch_size = 4;
  c.lr0 = 1e-3;
  c.seed = 5;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uadi_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("cosine schedule endpoints") {
  TrainConfig c;
  CHECK(lr_schedule(0, c) == 3e-4);
  CHECK(lr_schedule(c.epochs - 1, c) == 1.5e-6);
  c.epochs = 101;
  CHECK(lr_schedule(50, c) == doctest::Approx((3e-4 + 1.5e-6) / 2).epsilon(1e-14));
  for (int e = 1; e < c.epochs; ++e) CHECK(lr_schedule(e, c) < lr_schedule(e - 1, c));
  CHECK_THROWS_AS(lr_schedule(c.epochs, c), std::out_of_range);
  CHECK_THROWS_AS(lr_schedule(-1, c), std::out_of_range);
  c.epochs = 1;
  CHECK(lr_schedule(0, c) == 3e-4);
}

TEST_CASE("Adam against a scalar reference") {
  Tensor x = Tensor::from({1}, {2.0}, true);
  Adam opt({{"x", x, true}});
  // zero gradient leaves the parameter alone
  opt.zero_grad();
  backward(mul(x, Tensor::from({1}, {0.0})));
  opt.step(0.1);
  CHECK(x[0] == 2.0);

  Tensor y = Tensor::from({2}, {1.0, -1.0}, true);
  Adam first({{"y", y, true}});
  backward(sum_all(mul(y, Tensor::from({2}, {3.0, -0.5}))));
  first.step(0.01);
  CHECK(y[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(-1.0 + 0.01).epsilon(1e-9));

  // f(w) = (w - 3)^2 / 2 + w^2 / 4, 100 steps
  Tensor w = Tensor::from({1}, {-1.0}, true);
  Adam a({{"w", w, true}});
  double rw = -1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    a.zero_grad();
    const Tensor d = affine(w, 1.0, -3.0);
    backward(add(affine(mul(d, d), 0.5, 0.0), affine(mul(w, w), 0.25, 0.0)));
    a.step(0.05);
    const double g = (rw - 3.0) + 0.5 * rw;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    rw -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    REQUIRE(std::abs(w[0] - rw) < 1e-10);
  }
  CHECK(a.steps() == 100);
}

TEST_CASE("Adam refuses non-finite gradients before touching parameters") {
  Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor b = Tensor::from({1}, {3.0}, true);
  Adam opt({{"a", a, true}, {"b", b, true}});
  backward(sum_all(a));
  backward(mul(b, Tensor::from({1}, {NAN})));
  CHECK_THROWS_AS(opt.step(0.1), NonFiniteError);
  CHECK(a[0] == 1.0);
  CHECK(a[1] == 2.0);
  CHECK(b[0] == 3.0);
}

TEST_CASE("config round trip and validation") {
  TrainConfig c = tiny_train(7);
  c.model.use_upa = false;
  c.loss.w_texture = 0.5;
  ConfigMap m;
  c.write(m);
  const TrainConfig r = TrainConfig::read(ConfigMap::parse(m.to_text()));
  CHECK(r.epochs == 7);
  CHECK(r.lr0 == 1e-3);
  CHECK(r.model.encoder_channels == c.model.encoder_channels);
  CHECK_FALSE(r.model.use_upa);
  CHECK(r.loss.w_texture == 0.5);
  TrainConfig bad = c;
  bad.lr_min = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.model.input_size = 40;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.model.use_tim = false;
  bad.model.use_upa = true;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("early stopping with a score that never improves") {
  const TinySet d = tiny_set();
  TrainConfig c = tiny_train(10);
  c.patience = 1;
  MultiTaskNet model(c.model);
  TrainHooks hooks;
  hooks.score = [](int, const EvalResult&) { return 0.0; };
  const TrainResult r = train(model, d.samples, d.split, c, {}, hooks);
  CHECK(r.history.size() == 2);
  CHECK(r.best_epoch == 0);
}

TEST_CASE("training is deterministic and restores the best weights") {
  const TinySet d = tiny_set();
  const TrainConfig c = tiny_train(3);
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  MultiTaskNet m1(c.model), m2(c.model);
  const TrainResult r1 = train(m1, d.samples, d.split, c, a);
  const TrainResult r2 = train(m2, d.samples, d.split, c, b);
  CHECK(r1.history_csv == r2.history_csv);
  CHECK(slurp(a / "history.csv") == r1.history_csv);
  CHECK(slurp(a / "best.ckpt") == slurp(b / "best.ckpt"));
  CHECK(std::count(r1.history_csv.begin(), r1.history_csv.end(), '\n') == 4);
  CHECK(checkpoint_text(m1) == slurp(a / "best.ckpt"));

  // loss descends on a fixed batch
  MultiTaskNet m(c.model);
  Adam opt(m.parameters());
  m.set_training(true);
  const Batch batch = make_batch(d.samples, d.split.train);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 8; ++i) {
    const ForwardOutput out = m.forward(batch.images);
    const TotalLoss tl = total_loss(out.seg_logits, out.clf_logits, batch.masks, batch.labels, c.loss);
    if (i == 0) first = tl.parts.total;
    last = tl.parts.total;
    opt.zero_grad();
    backward(tl.total);
    opt.step(1e-3);
  }
  CHECK(last < first);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig mc = tiny_model_config();
  mc.seed = 9;
  MultiTaskNet a(mc);
  Rng rng(1);
  oracle::randomize(a.named_tensors(), rng, 0.2);
  const fs::path p = scratch("ckpt");
  fs::create_directories(p);
  save_checkpoint(a, p / "m.ckpt");
  MultiTaskNet b = load_checkpoint(p / "m.ckpt");
  CHECK(checkpoint_text(b) == checkpoint_text(a));
  const Tensor x = oracle::random_tensor({1, 32, 32, 1}, rng, 0, 1);
  const ForwardOutput oa = a.forward(x), ob = b.forward(x);
  CHECK(oracle::max_abs_diff(oa.seg_logits.data(), ob.seg_logits.data()) == 0.0);
  CHECK(oracle::max_abs_diff(oa.clf_logits.data(), ob.clf_logits.data()) == 0.0);
  { std::ofstream(p / "broken.ckpt") << "not a checkpoint"; }
  CHECK_THROWS(load_checkpoint(p / "broken.ckpt"));
}

TEST_CASE("evaluation reports sample-weighted results") {
  const TinySet d = tiny_set();
  MultiTaskNet m(tiny_model_config());
  const EvalResult r = evaluate(m, d.samples, d.split.val, 2, LossConfig{});
  CHECK(r.probs.size() == 3 * d.split.val.size());
  CHECK(std::isfinite(r.loss.total));
  CHECK(r.seg.dice >= 0.0);
  CHECK(r.seg.dice <= 1.0);
  const EvalResult again = evaluate(m, d.samples, d.split.val, 5, LossConfig{});
  CHECK(oracle::max_abs_diff(r.probs, again.probs) < 1e-12);
}

TEST_CASE("ablation table") {
  const TinySet d = tiny_set();
  TrainConfig c = tiny_train(2);
  const fs::path out = scratch("ablate");
  const auto rows = ablation_run(c, d.samples, d.split, default_ablation_grid(), out);
  REQUIRE(rows.size() == 5);
  CHECK(rows.front().toggles.name == "none");
  CHECK(rows.back().parameter_count > rows.front().parameter_count);
  const std::string csv = slurp(out / "ablation.csv");
  CHECK(csv.rfind(kAblationHeader, 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
  const std::string first_row = csv.substr(csv.find('\n') + 1, csv.find('\n', csv.find('\n') + 1) - csv.find('\n') - 1);
  CHECK(std::count(first_row.begin(), first_row.end(), ',') == 9);
  for (const auto& r : rows) CHECK(fs::exists(out / r.toggles.name / "history.csv"));

  // the "none" row is a standalone baseline run with the same seed
  TrainConfig base = c;
  base.model.use_hmsf = base.model.use_tim = base.model.use_upa = false;
  MultiTaskNet m(base.model);
  const TrainResult alone = train(m, d.samples, d.split, base);
  CHECK(alone.history_csv == slurp(out / "none" / "history.csv"));
  CHECK(evaluate(m, d.samples, d.split.test, c.batch_size, c.loss).seg.dice == rows.front().test.seg.dice);
}

TEST_CASE("diagnostics on an untrained model with neutral gates") {
  const TinySet d = tiny_set();
  ModelConfig mc = tiny_model_config();
  mc.zero_init_tim_gates = true;
  MultiTaskNet m(mc);
  const DiagResult r = diagnose(m, d.samples, d.split.val, 2);
  REQUIRE(r.records.size() == 4 * d.split.val.size());
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    const DiagRecord& rec = r.records[i];
    CHECK(rec.level == static_cast<int>(i / d.split.val.size()) + 1);
    CHECK(rec.disp_seg2clf > 0.0);
    CHECK(rec.disp_clf2seg > 0.0);
    REQUIRE(rec.omega_seg.has_value());
    CHECK(std::abs(*rec.omega_seg + *rec.omega_clf - 1.0) < 1e-9);
  }
  const std::string disp = displacement_csv(r);
  CHECK(disp.rfind("level,sample,disp_seg2clf,disp_clf2seg\n", 0) == 0);
  CHECK(std::count(disp.begin(), disp.end(), '\n') == static_cast<long>(r.records.size() + 1));

  mc.use_tim = mc.use_upa = false;
  MultiTaskNet plain(mc);
  CHECK_THROWS_AS(diagnose(plain, d.samples, d.split.val), std::invalid_argument);
}
