#include "uadi/modules.hpp"

#include <sstream>
#include <stdexcept>

namespace uadi {

namespace {

void require_channels(std::string_view op, const Tensor& t, int axis, int expected) {
  if (t.dim(axis) != expected) {
    std::ostringstream os;
    os << op << ": expected " << expected << " channels on axis " << axis << ", got "
       << shape_str(t.shape());
    throw ShapeError(os.str());
  }
}

/// (B) or (B,1) -> (B,1,...,1) with `rank` axes.
Tensor per_sample(const Tensor& w, int rank) {
  Shape s(rank, 1);
  s[0] = w.dim(0);
  if (w.numel() != static_cast<std::size_t>(w.dim(0)))
    throw ShapeError("per-sample weight must have one value per sample, got " + shape_str(w.shape()));
  return reshape(w, s);
}

}  // namespace

// ---------------------------------------------------------------------------

TimLevelParams::TimLevelParams(int channels_, int clf_width_, Rng& rng)
    : channels(channels_),
      clf_width(clf_width_),
      attention(1, channels_, channels_, rng),
      context(channels_, clf_width_, rng),
      context_bn(clf_width_),
      clf_gate(clf_width_, clf_width_, rng),
      clf_project(clf_width_, channels_, rng),
      seg_gate(channels_, channels_, rng) {}

void TimLevelParams::zero_gates() {
  clf_gate.zero();
  seg_gate.zero();
}

void TimLevelParams::collect(const std::string& prefix, ParamList& out) const {
  attention.collect(prefix + ".attention", out);
  context.collect(prefix + ".context", out);
  context_bn.collect(prefix + ".context_bn", out);
  clf_gate.collect(prefix + ".clf_gate", out);
  clf_project.collect(prefix + ".clf_project", out);
  seg_gate.collect(prefix + ".seg_gate", out);
}

Tensor tim_seg_to_clf(const Tensor& d, const Tensor& f_clf, TimLevelParams& p, bool training) {
  require_channels("tim_seg_to_clf", d, 3, p.channels);
  require_channels("tim_seg_to_clf", f_clf, 1, p.clf_width);
  const Tensor attn = relu(p.attention(d));
  const Tensor ctx = p.context_bn(p.context(global_avg_pool(attn)), training);
  const Tensor gate = sigmoid(p.clf_gate(ctx));
  return add(f_clf, mul(gate, ctx));
}

Tensor tim_modulation(const Tensor& d, const Tensor& f_clf, const TimLevelParams& p) {
  require_channels("tim_clf_to_seg", d, 3, p.channels);
  require_channels("tim_clf_to_seg", f_clf, 1, p.clf_width);
  const int B = d.dim(0), C = p.channels;
  const Tensor proj = sigmoid(p.clf_project(f_clf));
  const Tensor gate = sigmoid(p.seg_gate(global_avg_pool(d)));
  return reshape(affine(mul(gate, proj), kTimTau, 1.0), {B, 1, 1, C});
}

Tensor tim_clf_to_seg(const Tensor& d, const Tensor& f_clf, const TimLevelParams& p) {
  return mul(d, tim_modulation(d, f_clf, p));
}

// ---------------------------------------------------------------------------

UpaLevelParams::UpaLevelParams(Rng& rng)
    : hidden(2, kHidden, rng), output(kHidden, 2, rng), running_mean(Tensor::full({2}, 1.0)) {}

void UpaLevelParams::collect(const std::string& prefix, ParamList& out) const {
  hidden.collect(prefix + ".hidden", out);
  output.collect(prefix + ".output", out);
  out.push_back({prefix + ".running_mean", running_mean, false});
}

Uncertainty upa_uncertainty(const Tensor& d_enh, const Tensor& f_clf_enh) {
  if (d_enh.rank() != 4) throw ShapeError("upa_uncertainty: expected (B,H,W,C), got " + shape_str(d_enh.shape()));
  if (f_clf_enh.rank() != 2 || f_clf_enh.dim(0) != d_enh.dim(0))
    throw ShapeError("upa_uncertainty: batch mismatch " + shape_str(d_enh.shape()) + " vs " +
                     shape_str(f_clf_enh.shape()));
  const Tensor spatial = variance(d_enh, {1, 2});  // (B,C)
  return {mean(spatial, {1}, true), variance(f_clf_enh, {1}, true)};
}

Tensor upa_weights(const Tensor& u_seg, const Tensor& u_clf, const Tensor& mean_seg,
                   const Tensor& mean_clf, const UpaLevelParams& p) {
  const Tensor n_seg = div(u_seg, affine(mean_seg, 1.0, p.eps));
  const Tensor n_clf = div(u_clf, affine(mean_clf, 1.0, p.eps));
  const Tensor u = concat({n_seg, n_clf}, 1);
  return softmax(p.output(relu(p.hidden(u))));
}

Tensor upa_fuse(const Tensor& base, const Tensor& enhanced, const Tensor& omega) {
  if (base.shape() != enhanced.shape())
    throw ShapeError("upa_fuse: shape mismatch " + shape_str(base.shape()) + " vs " +
                     shape_str(enhanced.shape()));
  if (omega.dim(0) != base.dim(0))
    throw ShapeError("upa_fuse: batch mismatch " + shape_str(base.shape()) + " vs " +
                     shape_str(omega.shape()));
  const Tensor w = per_sample(omega, base.rank());
  return add(mul(base, affine(w, -1.0, 1.0)), mul(enhanced, w));
}

UpaOutput upa_forward(const Tensor& d, const Tensor& d_enh, const Tensor& f, const Tensor& f_enh,
                      UpaLevelParams& p, bool training) {
  const Uncertainty u = upa_uncertainty(d_enh, f_enh);
  Tensor mean_seg, mean_clf;
  if (training) {
    mean_seg = mean(u.seg, {0}, true);
    mean_clf = mean(u.clf, {0}, true);
    auto rm = p.running_mean.data();
    rm[0] = p.momentum * rm[0] + (1.0 - p.momentum) * mean_seg.item();
    rm[1] = p.momentum * rm[1] + (1.0 - p.momentum) * mean_clf.item();
  } else {
    mean_seg = Tensor::full({1, 1}, p.running_mean[0]);
    mean_clf = Tensor::full({1, 1}, p.running_mean[1]);
  }
  Tensor omega = upa_weights(u.seg, u.clf, mean_seg, mean_clf, p);
  return {upa_fuse(d, d_enh, slice(omega, 1, 0, 1)), upa_fuse(f, f_enh, slice(omega, 1, 1, 2)),
          omega};
}

// ---------------------------------------------------------------------------

HmsfParams::HmsfParams(int channels_, Rng& rng) : channels(channels_) {
  if (channels_ <= 0 || channels_ % 8 != 0)
    throw std::invalid_argument("hmsf: channel count " + std::to_string(channels_) +
                                " is not a positive multiple of 8");
  for (std::size_t i = 0; i < kDilations.size(); ++i) {
    depthwise[i] = DepthwiseConv2d(3, channels_, kDilations[i], rng);
    pointwise[i] = Conv2d(1, channels_, channels_, rng);
  }
  squeeze = Dense(channels_, channels_ / 8, rng);
  scale = Dense(channels_ / 8, 3, rng);
  fuse = Conv2d(1, channels_, channels_, rng);
}

void HmsfParams::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < kDilations.size(); ++i) {
    const std::string b = prefix + ".branch" + std::to_string(kDilations[i]);
    depthwise[i].collect(b + ".depthwise", out);
    pointwise[i].collect(b + ".pointwise", out);
  }
  squeeze.collect(prefix + ".squeeze", out);
  scale.collect(prefix + ".scale", out);
  fuse.collect(prefix + ".fuse", out);
}

HmsfOutput hmsf_forward(const Tensor& x, const HmsfParams& p) {
  require_channels("hmsf_forward", x, 3, p.channels);
  HmsfOutput out;
  out.alpha = softmax(p.scale(relu(p.squeeze(global_avg_pool(x)))));
  Tensor mix;
  for (std::size_t i = 0; i < 3; ++i) {
    out.branches[i] = p.pointwise[i](p.depthwise[i](x));
    const int k = static_cast<int>(i);
    const Tensor weighted = mul(out.branches[i], per_sample(slice(out.alpha, 1, k, k + 1), 4));
    mix = mix.defined() ? add(mix, weighted) : weighted;
  }
  out.y = p.fuse(mix);
  return out;
}

// ---------------------------------------------------------------------------

AttentionGateParams::AttentionGateParams(int skip_channels, int gate_channels, Rng& rng) {
  const int inter = std::max(1, skip_channels / 2);
  skip_project = Conv2d(1, skip_channels, inter, rng);
  gate_project = Conv2d(1, gate_channels, inter, rng);
  psi = Conv2d(1, inter, 1, rng);
}

void AttentionGateParams::collect(const std::string& prefix, ParamList& out) const {
  skip_project.collect(prefix + ".skip_project", out);
  gate_project.collect(prefix + ".gate_project", out);
  psi.collect(prefix + ".psi", out);
}

AttentionGateOutput attention_gate(const Tensor& skip, const Tensor& gate_signal,
                                   const AttentionGateParams& p) {
  const Tensor s = p.skip_project(skip);
  const Tensor g = p.gate_project(gate_signal);
  if (s.shape() != g.shape())
    throw ShapeError("attention_gate: projected skip " + shape_str(s.shape()) +
                     " does not match projected gate " + shape_str(g.shape()));
  AttentionGateOutput out;
  out.map = sigmoid(p.psi(relu(add(s, g))));
  out.gated = mul(skip, out.map);
  return out;
}

}  // namespace uadi
