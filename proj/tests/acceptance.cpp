// Acceptance criteria 1-9. One PASS/FAIL line per criterion; pass criterion
// numbers as arguments to run a subset. Exit status is 0 only if every
// selected criterion passes.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "uadi/gradcheck_suite.hpp"
#include "uadi/trainer.hpp"

using namespace uadi;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string num(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uadi_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Split split_of(const std::vector<Sample>& s, std::uint64_t seed) {
  std::vector<int> labels;
  for (const auto& x : s) labels.push_back(x.label);
  return split_dataset(labels, {0.70, 0.15, 0.15}, seed);
}

// 1 ------------------------------------------------------------------------

Outcome gradient_fidelity() {
  Clock clock;
  const auto entries = run_gradcheck_suite(SuiteOptions{});
  Outcome o;
  double worst_module = 0.0, worst_loss = 0.0;
  for (const auto& e : entries) {
    o.pass = o.pass && e.pass();
    (e.threshold < 1e-3 ? worst_loss : worst_module) =
        std::max(e.threshold < 1e-3 ? worst_loss : worst_module, e.max_error);
    if (!e.pass()) o.detail += e.component + " failed (" + num(e.max_error) + "); ";
  }
  const double t = clock.seconds();
  o.pass = o.pass && t < 300.0 && entries.size() >= 10;
  o.detail += std::to_string(entries.size()) + " components, worst module/model " + num(worst_module) +
              " (< 1e-3), worst isolated loss " + num(worst_loss) + " (< 1e-4), " + num(t, 3) + " s";
  return o;
}

// 2 ------------------------------------------------------------------------

Outcome invariants() {
  Outcome o;
  Rng rng(2024);
  constexpr int kDraws = 10000;

  double mu_lo = 2.0, mu_hi = 0.0;
  for (int i = 0; i < kDraws; i += 100) {
    TimLevelParams p(8, 16, rng);
    oracle::randomize([&] {
      ParamList l;
      p.collect("tim", l);
      return l;
    }(), rng, 3.0);
    for (int j = 0; j < 100; ++j) {
      const double scale = std::pow(10.0, rng.uniform(-2, 2));
      const Tensor d = oracle::random_tensor({1, 4, 4, 8}, rng, -scale, scale);
      const Tensor f = oracle::random_tensor({1, 16}, rng, -scale, scale);
      const Tensor mu = tim_modulation(d, f, p);
      for (double m : mu.data()) {
        mu_lo = std::min(mu_lo, m);
        mu_hi = std::max(mu_hi, m);
      }
    }
  }
  const bool mu_ok = mu_lo >= 1.0 && mu_hi <= 1.0 + kTimTau;

  double simplex = 0.0;
  bool nonneg = true;
  for (int i = 0; i < kDraws; i += 100) {
    UpaLevelParams p(rng);
    ParamList l;
    p.collect("upa", l);
    oracle::randomize(l, rng, 2.0);
    const Tensor us = oracle::random_tensor({100, 1}, rng, 0, 10), uc = oracle::random_tensor({100, 1}, rng, 0, 10);
    const Tensor w = upa_weights(us, uc, Tensor::full({1, 1}, rng.uniform(0.1, 3)),
                                 Tensor::full({1, 1}, rng.uniform(0.1, 3)), p);
    for (int b = 0; b < 100; ++b) {
      simplex = std::max(simplex, std::abs(w[2 * b] + w[2 * b + 1] - 1.0));
      nonneg = nonneg && w[2 * b] >= 0.0 && w[2 * b + 1] >= 0.0;
    }
  }
  const bool simplex_ok = simplex <= 1e-9 && nonneg;

  bool fuse_ok = true;
  for (int i = 0; i < 100; ++i) {
    const Tensor base = oracle::random_tensor({2, 3, 3, 4}, rng, -5, 5);
    const Tensor enh = oracle::random_tensor({2, 3, 3, 4}, rng, -5, 5);
    fuse_ok = fuse_ok && oracle::max_abs_diff(upa_fuse(base, enh, Tensor::zeros({2})).data(), base.data()) == 0.0 &&
              oracle::max_abs_diff(upa_fuse(base, enh, Tensor::full({2}, 1.0)).data(), enh.data()) == 0.0;
  }

  double alpha_err = 0.0;
  for (int i = 0; i < 50; ++i) {
    HmsfParams p(8, rng);
    const HmsfOutput out = hmsf_forward(oracle::random_tensor({3, 6, 6, 8}, rng, -3, 3), p);
    for (int b = 0; b < 3; ++b) alpha_err = std::max(alpha_err, std::abs(out.alpha[3 * b] + out.alpha[3 * b + 1] + out.alpha[3 * b + 2] - 1.0));
  }
  const bool alpha_ok = alpha_err < 1e-12;

  bool kernel_ok = true;
  double plain_sum = 0.0;
  for (double sigma : {0.5, 1.0, 2.0})
    for (int support : {3, 7, 11}) {
      const Eigen::MatrixXd k = curvature_kernel(sigma, support);
      double pairs = 0.0;
      for (int y = 0; y < support; ++y)
        for (int x = 0; x < support; ++x) {
          kernel_ok = kernel_ok && k(y, x) == -k(x, y);
          if (x > y) pairs += k(y, x) + k(x, y);
        }
      kernel_ok = kernel_ok && pairs == 0.0;
      plain_sum = std::max(plain_sum, std::abs(k.sum()));
    }

  o.pass = mu_ok && simplex_ok && fuse_ok && alpha_ok && kernel_ok;
  o.detail = "mu in [" + num(mu_lo, 6) + ", " + num(mu_hi, 6) + "] over " + std::to_string(kDraws) +
             " inputs; simplex err " + num(simplex) + "; fusion endpoints " + (fuse_ok ? "exact" : "INEXACT") +
             "; alpha sum err " + num(alpha_err) + "; kernel antisymmetric/pairwise zero-sum " +
             (kernel_ok ? "exact" : "INEXACT") + " (naive sum " + num(plain_sum) + ")";
  return o;
}

// 3 ------------------------------------------------------------------------

Outcome oracle_equivalence() {
  Rng rng(33);
  const LossConfig cfg;
  double conv = 0.0, sep = 0.0, tv = 0.0, bd = 0.0, tx = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int H = 1 + static_cast<int>(rng.below(8)), W = 1 + static_cast<int>(rng.below(8));
    const int ci = 1 + static_cast<int>(rng.below(4)), co = 1 + static_cast<int>(rng.below(4));
    const int k = rng.bernoulli(0.5) ? 3 : 1, stride = 1 + static_cast<int>(rng.below(2));
    const int dil = 1 + static_cast<int>(rng.below(3));
    const Tensor x = oracle::random_tensor({2, H, W, ci}, rng);
    const Tensor w = oracle::random_tensor({k, k, ci, co}, rng);
    const Tensor b = oracle::random_tensor({co}, rng);
    conv = std::max(conv, oracle::max_abs_diff(conv2d(x, w, b, stride, dil).data(),
                                               oracle::conv2d(x, w, oracle::values(b), stride, dil)));

    // dilated separable: depthwise with dilation, then 1x1
    Conv2d pw(1, ci, co, rng);
    const Tensor dw = oracle::random_tensor({3, 3, ci}, rng);
    const Tensor db = oracle::random_tensor({ci}, rng);
    const Tensor ours = pw(depthwise_conv2d(x, dw, db, dil));
    const auto ref = oracle::pointwise(oracle::depthwise(x, dw, oracle::values(db), dil), ci, pw);
    sep = std::max(sep, oracle::max_abs_diff(ours.data(), ref));

    const Tensor m = oracle::random_mask({2, H, W, 1}, rng);
    const Tensor p = oracle::random_tensor({2, H, W, 1}, rng, 0, 1);
    tv = std::max(tv, std::abs(focal_tversky(p, m, cfg).item() - oracle::focal_tversky(p, m, cfg)));
    bd = std::max(bd, std::abs(boundary_loss(m, p, cfg).item() - oracle::boundary(m, p, cfg)));
    tx = std::max(tx, std::abs(texture_loss(m, p).item() - oracle::texture(m, p)));
  }
  Outcome o;
  o.pass = std::max({conv, sep, tv, bd, tx}) < 1e-10;
  o.detail = "max |diff| over 200 random inputs up to 8x8: conv2d " + num(conv) + ", dilated separable " + num(sep) +
             ", Tversky " + num(tv) + ", boundary " + num(bd) + ", texture " + num(tx);
  return o;
}

// 4 ------------------------------------------------------------------------

Outcome loss_arithmetic() {
  const LossConfig cfg;
  Outcome o;
  const double unit = combine_losses(1, 0, 0, 1, cfg);

  Rng rng(44);
  const Tensor m = oracle::random_mask({2, 8, 8, 1}, rng);
  std::vector<double> v(m.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m[i] > 0 ? 1000.0 : -1000.0;
  const std::vector<int> labels{1, 2};
  const double perfect =
      total_loss(Tensor::from(m.shape(), v), Tensor::from({2, 3}, {0, 1000, 0, 0, 0, 1000}), m, labels, cfg)
          .parts.total;

  double recombine = 0.0;
  for (int i = 0; i < 100; ++i) {
    const TotalLoss t = total_loss(oracle::random_tensor({2, 8, 8, 1}, rng, -4, 4),
                                   oracle::random_tensor({2, 3}, rng, -3, 3), m, labels, cfg);
    const auto& p = t.parts;
    recombine = std::max(recombine, std::abs(combine_losses(p.focal_tversky, p.boundary, p.texture, p.clf, cfg) - p.total));
    recombine = std::max(recombine, std::abs(0.8 * (p.focal_tversky + 0.25 * p.boundary + 0.15 * p.texture) +
                                             0.2 * p.clf - p.total));
  }
  o.pass = unit == 1.0 && perfect == 0.0 && recombine < 1e-12;
  o.detail = "L(1,0,0,1) = " + num(unit, 17) + "; perfect prediction " + num(perfect, 17) +
             "; breakdown recombination err " + num(recombine);
  return o;
}

// 5 ------------------------------------------------------------------------

Outcome schedule_endpoints() {
  const TrainConfig c;
  const double first = lr_schedule(0, c), last = lr_schedule(c.epochs - 1, c);
  Outcome o;
  o.pass = first == 3e-4 && last == 1.5e-6;
  o.detail = "lr(0) = " + num(first, 17) + ", lr(" + std::to_string(c.epochs - 1) + ") = " + num(last, 17);
  return o;
}

// 6 ------------------------------------------------------------------------

Outcome overfit() {
  Clock clock;
  DatasetSpec ds;
  ds.n_samples = 16;
  ds.image_size = 64;
  ds.seed = 3;
  const auto samples = generate_dataset(ds);
  Split sp;
  for (std::size_t i = 0; i < samples.size(); ++i) sp.train.push_back(i);
  sp.val = sp.train;
  TrainConfig tc;  // full model at the 64 px desk widths
  tc.epochs = 200;
  tc.patience = 200;
  tc.augment = false;
  tc.seed = 1;
  tc.model.seed = 1;
  MultiTaskNet net(tc.model);
  HistoryRow reached;
  bool hit = false;
  TrainHooks h;
  h.stop = [&](const HistoryRow& r) {
    if (r.val_dice > 0.90 && r.val_acc == 1.0) {
      hit = true;
      reached = r;
    }
    return hit;
  };
  const TrainResult res = train(net, samples, sp, tc, {}, h);
  const double t = clock.seconds();
  Outcome o;
  o.pass = hit && t < 900.0;
  if (hit)
    o.detail = "training Dice " + num(reached.val_dice, 4) + ", accuracy " + num(reached.val_acc, 4) + " at epoch " +
               std::to_string(reached.epoch) + ", " + num(t, 3) + " s";
  else
    o.detail = "not reached in " + std::to_string(res.history.size()) + " epochs (last Dice " +
               num(res.history.back().val_dice, 4) + ", accuracy " + num(res.history.back().val_acc, 4) + ")";
  return o;
}

// 7 ------------------------------------------------------------------------

Outcome ablation_ordering() {
  Clock clock;
  DatasetSpec ds;
  ds.n_samples = 300;
  ds.image_size = 64;
  ds.seed = 11;
  const auto samples = generate_dataset(ds);
  const Split sp = split_of(samples, 11);
  const std::vector<ModuleToggles> grid = {
      {"none", false, false, false}, {"tim", false, true, false}, {"hmsf_tim_upa", true, true, true}};
  constexpr int kSeeds = 3;
  const int w = 8;
  std::array<double, 3> mean{};
  std::string per_seed;
  for (int s = 0; s < kSeeds; ++s) {
    TrainConfig tc;
    tc.epochs = 15;
    tc.patience = 15;
    tc.lr0 = 1e-3;
    tc.seed = tc.model.seed = 100 + s;
    tc.model.encoder_channels = {w, 2 * w, 4 * w, 8 * w, 16 * w};
    tc.model.decoder_channels = {8 * w, 4 * w, 2 * w, w};
    const auto rows = ablation_run(tc, samples, sp, grid);
    per_seed += " seed " + std::to_string(100 + s) + ":";
    for (std::size_t r = 0; r < rows.size(); ++r) {
      mean[r] += rows[r].val.seg.dice / kSeeds;
      per_seed += " " + rows[r].toggles.name + "=" + num(rows[r].val.seg.dice, 3);
    }
    std::cout << "  [7] seed " << 100 + s << " done at " << num(clock.seconds(), 4) << " s" << std::endl;
  }
  Outcome o;
  o.pass = mean[2] >= mean[1] && mean[1] >= mean[0];
  o.detail = "mean val Dice full " + num(mean[2], 3) + ", TIM " + num(mean[1], 3) + ", baseline " + num(mean[0], 3) +
             ";" + per_seed + "; " + num(clock.seconds(), 4) + " s";
  return o;
}

// 8 ------------------------------------------------------------------------

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

Outcome diagnostics() {
  DatasetSpec ds;
  ds.n_samples = 60;
  ds.image_size = 32;
  ds.lesion_size_range_px = {3, 7};
  ds.seed = 8;
  const auto samples = generate_dataset(ds);
  const Split sp = split_of(samples, 8);
  TrainConfig tc;
  tc.model = tiny_model_config();
  tc.epochs = 5;
  tc.batch_size = 4;
  tc.lr0 = 1e-3;
  tc.seed = 8;
  MultiTaskNet net(tc.model);
  train(net, samples, sp, tc);

  const DiagResult d = diagnose(net, samples, sp.val);
  const fs::path dir = scratch("diag");
  write_text_file(dir / "displacement.csv", displacement_csv(d));
  write_text_file(dir / "omega.csv", omega_csv(d));
  const auto disp = csv_rows(slurp(dir / "displacement.csv"));
  const auto omega = csv_rows(slurp(dir / "omega.csv"));

  std::set<int> levels;
  double min_s2c = INFINITY, min_c2s = INFINITY, simplex = 0.0;
  for (const auto& r : disp) {
    levels.insert(std::stoi(r.at(0)));
    min_s2c = std::min(min_s2c, std::stod(r.at(2)));
    min_c2s = std::min(min_c2s, std::stod(r.at(3)));
  }
  bool omega_nonneg = true;
  for (const auto& r : omega) {
    const double a = std::stod(r.at(2)), b = std::stod(r.at(3));
    simplex = std::max(simplex, std::abs(a + b - 1.0));
    omega_nonneg = omega_nonneg && a >= 0 && b >= 0;
  }
  const std::size_t expected = 4 * sp.val.size();
  Outcome o;
  o.pass = levels == std::set<int>{1, 2, 3, 4} && disp.size() == expected && omega.size() == expected &&
           simplex <= 1e-9 && omega_nonneg && min_s2c > 0.0 && min_c2s > 0.0;
  o.detail = std::to_string(disp.size()) + " displacement rows over " + std::to_string(levels.size()) + " levels, " +
             std::to_string(omega.size()) + " omega rows (simplex err " + num(simplex) + "); min displacement seg->clf " +
             num(min_s2c) + ", clf->seg " + num(min_c2s);
  return o;
}

// 9 ------------------------------------------------------------------------

Outcome determinism() {
  DatasetSpec ds;
  ds.n_samples = 40;
  ds.image_size = 32;
  ds.lesion_size_range_px = {3, 7};
  ds.seed = 9;
  const auto samples = generate_dataset(ds);
  const Split sp = split_of(samples, 9);
  TrainConfig tc;
  tc.model = tiny_model_config();
  tc.epochs = 4;
  tc.batch_size = 4;
  tc.lr0 = 1e-3;
  tc.seed = tc.model.seed = 9;
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  {
    MultiTaskNet m(tc.model);
    train(m, samples, sp, tc, a);
  }
  {
    // a different allocation history before the second run
    std::vector<std::vector<double>> noise;
    for (int i = 1; i < 50; ++i) noise.emplace_back(i * 37, 1.0);
    MultiTaskNet m(tc.model);
    train(m, samples, sp, tc, b);
  }
  const std::string ha = slurp(a / "history.csv"), hb = slurp(b / "history.csv");
  const std::string ca = slurp(a / "best.ckpt"), cb = slurp(b / "best.ckpt");
  Outcome o;
  o.pass = !ha.empty() && !ca.empty() && ha == hb && ca == cb;
  o.detail = "history.csv " + std::string(ha == hb ? "identical" : "DIFFERS") + " (" + std::to_string(ha.size()) +
             " bytes), best.ckpt " + (ca == cb ? "identical" : "DIFFERS") + " (" + std::to_string(ca.size()) + " bytes)";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity}, {"invariant suite", invariants},
      {"oracle equivalence", oracle_equivalence}, {"loss arithmetic", loss_arithmetic},
      {"schedule endpoints", schedule_endpoints}, {"overfit convergence", overfit},
      {"ablation ordering", ablation_ordering},   {"diagnostics", diagnostics},
      {"determinism", determinism}};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  return all ? 0 : 1;
}
