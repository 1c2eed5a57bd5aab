#include "uadi/gradcheck_suite.hpp"

#include <cmath>

#include "uadi/gradcheck.hpp"
#include "uadi/losses.hpp"

namespace uadi {

namespace {

constexpr double kModuleTol = 1e-3;
constexpr double kLossTol = 1e-4;

Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::size_t n = 1;
  for (int d : s) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(s, std::move(v), true);
}

// Random fixed projection so the checked scalar depends on every output entry differently.
Tensor project(const Tensor& y, const Tensor& r) { return sum_all(mul(y, r)); }

class Checker {
 public:
  Checker(const SuiteOptions& o, Rng& rng) : opts_(o), rng_(rng) {}

  /// Checks `f` against every tensor in `leaves`; leaves must require grad.
  SuiteEntry run(const std::string& component, double tol, const std::function<Tensor()>& f,
                 std::vector<std::pair<std::string, Tensor>> leaves, double step = 0.0) {
    SuiteEntry e;
    e.component = component;
    e.threshold = tol;
    for (auto& [name, t] : leaves) {
      const bool had = t.requires_grad();
      t.node()->requires_grad = true;
      const GradCheckResult r = grad_check_leaf(f, t, step > 0.0 ? step : opts_.step, opts_.entries_per_tensor, &rng_);
      t.node()->requires_grad = had;
      t.zero_grad();
      e.checked += r.checked;
      if (e.worst.empty() || r.max_relative_error > e.max_error) {
        e.max_error = r.max_relative_error;
        e.worst = name;
      }
    }
    return e;
  }

 private:
  const SuiteOptions& opts_;
  Rng& rng_;
};

std::vector<std::pair<std::string, Tensor>> leaves_of(const ParamList& params) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& p : params)
    if (p.trainable) out.emplace_back(p.name, p.tensor);
  return out;
}

}  // namespace

ModelConfig tiny_model_config() {
  ModelConfig m;
  m.input_size = 32;
  m.encoder_channels = {8, 8, 8, 8, 8};
  m.decoder_channels = {8, 8, 8, 8};
  m.clf_width = 16;
  return m;
}

std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& opts) {
  Rng rng(opts.seed);
  Checker check(opts, rng);
  std::vector<SuiteEntry> out;
  const int B = 3, H = 4, C = 8, K = 16;

  {  // TIM, segmentation -> classification
    TimLevelParams p(C, K, rng);
    Tensor d = random_tensor({B, H, H, C}, rng), f = random_tensor({B, K}, rng);
    const Tensor r = random_tensor({B, K}, rng);
    ParamList ps;
    p.collect("tim", ps);
    auto leaves = leaves_of(ps);
    leaves.emplace_back("d", d);
    leaves.emplace_back("f_clf", f);
    out.push_back(check.run("tim_seg_to_clf", kModuleTol, [&] { return project(tim_seg_to_clf(d, f, p, true), r); },
                            leaves));
  }
  {  // TIM, classification -> segmentation
    TimLevelParams p(C, K, rng);
    Tensor d = random_tensor({B, H, H, C}, rng), f = random_tensor({B, K}, rng);
    const Tensor r = random_tensor({B, H, H, C}, rng);
    ParamList ps;
    p.collect("tim", ps);
    auto leaves = leaves_of(ps);
    leaves.emplace_back("d", d);
    leaves.emplace_back("f_clf", f);
    out.push_back(check.run("tim_clf_to_seg", kModuleTol, [&] { return project(tim_clf_to_seg(d, f, p), r); },
                            leaves));
  }
  {  // UPA
    UpaLevelParams p(rng);
    Tensor d = random_tensor({B, H, H, C}, rng), de = random_tensor({B, H, H, C}, rng);
    Tensor f = random_tensor({B, K}, rng), fe = random_tensor({B, K}, rng);
    const Tensor r1 = random_tensor({B, H, H, C}, rng), r2 = random_tensor({B, K}, rng);
    ParamList ps;
    p.collect("upa", ps);
    auto leaves = leaves_of(ps);
    leaves.emplace_back("d", d);
    leaves.emplace_back("d_enh", de);
    leaves.emplace_back("f_clf", f);
    leaves.emplace_back("f_enh", fe);
    out.push_back(check.run("upa", kModuleTol,
                            [&] {
                              const UpaOutput u = upa_forward(d, de, f, fe, p, true);
                              return add(project(u.d_final, r1), project(u.f_final, r2));
                            },
                            leaves));
  }
  {  // HMSF
    HmsfParams p(C, rng);
    Tensor x = random_tensor({2, 8, 8, C}, rng);
    const Tensor r = random_tensor({2, 8, 8, C}, rng);
    ParamList ps;
    p.collect("hmsf", ps);
    auto leaves = leaves_of(ps);
    leaves.emplace_back("x", x);
    out.push_back(check.run("hmsf", kModuleTol, [&] { return project(hmsf_forward(x, p).y, r); }, leaves));
  }
  {  // attention gate
    AttentionGateParams p(C, 2 * C, rng);
    Tensor skip = random_tensor({2, 8, 8, C}, rng), gate = random_tensor({2, 8, 8, 2 * C}, rng);
    const Tensor r = random_tensor({2, 8, 8, C}, rng);
    ParamList ps;
    p.collect("gate", ps);
    auto leaves = leaves_of(ps);
    leaves.emplace_back("skip", skip);
    leaves.emplace_back("gate_signal", gate);
    out.push_back(
        check.run("attention_gate", kModuleTol, [&] { return project(attention_gate(skip, gate, p).gated, r); },
                  leaves));
  }

  // Losses on a random 2x8x8 mask. Boundary-loss predictions avoid the steep
  // band around the binarisation threshold.
  const LossConfig lc;
  std::vector<double> mv(2 * 8 * 8);
  for (double& v : mv) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  const Tensor mask = Tensor::from({2, 8, 8, 1}, mv);
  {
    Tensor pred = random_tensor({2, 8, 8, 1}, rng, 0.05, 0.95);
    out.push_back(check.run("loss_focal_tversky", kLossTol, [&] { return focal_tversky(pred, mask, lc); },
                            {{"pred", pred}}, opts.loss_step));
  }
  {
    std::vector<double> pv(mv.size());
    for (double& v : pv) v = rng.bernoulli(0.5) ? rng.uniform(0.35, 0.45) : rng.uniform(0.55, 0.65);
    Tensor pred = Tensor::from({2, 8, 8, 1}, pv, true);
    out.push_back(check.run("loss_boundary", kLossTol, [&] { return boundary_loss(mask, pred, lc); },
                            {{"pred", pred}}, opts.loss_step));
  }
  {
    Tensor pred = random_tensor({2, 8, 8, 1}, rng, 0.05, 0.95);
    out.push_back(check.run("loss_texture", kLossTol, [&] { return texture_loss(mask, pred); }, {{"pred", pred}}, opts.loss_step));
  }
  const std::vector<int> labels = {0, 2};
  {
    Tensor logits = random_tensor({2, 3}, rng, -2.0, 2.0);
    out.push_back(check.run("loss_focal_ce", kLossTol, [&] { return focal_ce(logits, labels, lc.focal_ce_gamma); },
                            {{"logits", logits}}, opts.loss_step));
  }
  {
    Tensor seg = random_tensor({2, 8, 8, 1}, rng, -3.0, 3.0);
    Tensor clf = random_tensor({2, 3}, rng, -2.0, 2.0);
    // Keep sigmoid(seg) out of the boundary surrogate's steep band.
    for (double& v : seg.data())
      if (std::abs(v) < 0.5) v = v < 0 ? -0.5 - std::abs(v) : 0.5 + v;
    out.push_back(check.run("loss_total", kLossTol,
                            [&] { return total_loss(seg, clf, mask, labels, lc).total; },
                            {{"seg_logits", seg}, {"clf_logits", clf}}, opts.loss_step));
  }

  {  // whole tiny model, training mode, dropout off so evaluations repeat exactly
    ModelConfig mc = opts.model;
    mc.dropout = 0.0;
    mc.seed = opts.seed;
    MultiTaskNet net(mc);
    net.set_training(true);
    // Zero biases on post-relu inputs put pre-activations exactly on the relu
    // kink; a small jitter moves the check to a smooth point.
    for (auto& p : net.parameters())
      if (p.name.ends_with(".bias"))
        for (double& v : p.tensor.data()) v += rng.uniform(-0.05, 0.05);
    const int n = mc.input_size;
    Tensor image = random_tensor({opts.batch, n, n, 1}, rng, 0.0, 1.0);
    std::vector<double> m(static_cast<std::size_t>(opts.batch) * n * n);
    for (int b = 0; b < opts.batch; ++b)
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const double dx = x - n / 2.0 + 3 * b, dy = y - n / 2.0;
          m[(static_cast<std::size_t>(b) * n + y) * n + x] = dx * dx + dy * dy < n * n / 10.0 ? 1.0 : 0.0;
        }
    const Tensor target = Tensor::from({opts.batch, n, n, 1}, m);
    std::vector<int> lab;
    for (int b = 0; b < opts.batch; ++b) lab.push_back(1 + b % 2);
    auto leaves = leaves_of(net.named_tensors());
    leaves.emplace_back("image", image);
    out.push_back(check.run("full_model", kModuleTol,
                            [&] {
                              const ForwardOutput o = net.forward(image);
                              return total_loss(o.seg_logits, o.clf_logits, target, lab, lc).total;
                            },
                            leaves));
  }
  return out;
}

}  // namespace uadi
