#pragma once

#include <array>
#include <string>

#include "uadi/layers.hpp"

namespace uadi {

// ---------------------------------------------------------------------------
// Task interaction (segmentation <-> classification) at one decoder level.
//
//   seg -> clf:  a = relu(conv1x1(D)),  ctx = BN(Dense_256(GAP(a))),
//                f_enh = f + sigmoid(Dense(ctx)) * ctx
//   clf -> seg:  mu = 1 + tau * sigmoid(Dense_c(GAP(D))) * sigmoid(Dense_c(f)),
//                D_enh = D * mu
//
// Both factors of the modulation are sigmoid outputs, so mu lies in
// [1, 1 + tau] = [1, 1.7].

inline constexpr double kTimTau = 0.7;

struct TimLevelParams {
  int channels = 0;
  int clf_width = 0;
  Conv2d attention;   // 1x1, channels -> channels
  Dense context;      // channels -> clf_width
  BatchNorm context_bn;
  Dense clf_gate;     // clf_width -> clf_width
  Dense clf_project;  // clf_width -> channels
  Dense seg_gate;     // channels -> channels

  TimLevelParams() = default;
  TimLevelParams(int channels, int clf_width, Rng& rng);

  /// Zero weights and biases in both gate layers; every gate then reads 0.5.
  void zero_gates();
  void collect(const std::string& prefix, ParamList& out) const;
};

Tensor tim_seg_to_clf(const Tensor& d, const Tensor& f_clf, TimLevelParams& p, bool training);
/// Modulation factor mu, shape (B,1,1,C).
Tensor tim_modulation(const Tensor& d, const Tensor& f_clf, const TimLevelParams& p);
Tensor tim_clf_to_seg(const Tensor& d, const Tensor& f_clf, const TimLevelParams& p);

// ---------------------------------------------------------------------------
// Uncertainty proxy attention.

struct UpaLevelParams {
  static constexpr int kHidden = 32;
  Dense hidden;  // 2 -> 32
  Dense output;  // 32 -> 2
  /// Running batch means (u_seg, u_clf) used at inference.
  Tensor running_mean;
  double momentum = 0.9;
  double eps = 1e-8;

  UpaLevelParams() = default;
  explicit UpaLevelParams(Rng& rng);

  void collect(const std::string& prefix, ParamList& out) const;
};

struct Uncertainty {
  Tensor seg;  // (B,1)
  Tensor clf;  // (B,1)
};

/// u_seg: per-channel spatial (population) variance averaged over channels.
/// u_clf: variance across the feature vector.
Uncertainty upa_uncertainty(const Tensor& d_enh, const Tensor& f_clf_enh);

/// Softmax weights (B,2) = [omega_seg, omega_clf] from uncertainties
/// normalised by the per-task means `mean_seg`, `mean_clf` (shape (1,1)).
Tensor upa_weights(const Tensor& u_seg, const Tensor& u_clf, const Tensor& mean_seg,
                   const Tensor& mean_clf, const UpaLevelParams& p);

/// base + omega * (enhanced - base), omega per sample (shape (B) or (B,1)).
/// Evaluated as (1 - omega) * base + omega * enhanced so the endpoints
/// omega = 0 and omega = 1 reproduce base and enhanced exactly.
Tensor upa_fuse(const Tensor& base, const Tensor& enhanced, const Tensor& omega);

struct UpaOutput {
  Tensor d_final;
  Tensor f_final;
  Tensor omega;  // (B,2)
};

/// Full per-level step. Training mode normalises by the current batch mean
/// and folds it into the running mean; inference uses the running mean.
UpaOutput upa_forward(const Tensor& d, const Tensor& d_enh, const Tensor& f, const Tensor& f_enh,
                      UpaLevelParams& p, bool training);

// ---------------------------------------------------------------------------
// Hierarchical multi-scale fusion.

struct HmsfParams {
  static constexpr std::array<int, 3> kDilations{1, 2, 4};
  int channels = 0;
  std::array<DepthwiseConv2d, 3> depthwise;
  std::array<Conv2d, 3> pointwise;
  Dense squeeze;  // C -> C/8
  Dense scale;    // C/8 -> 3
  Conv2d fuse;    // 1x1

  HmsfParams() = default;
  /// Throws std::invalid_argument unless channels is a positive multiple of 8.
  HmsfParams(int channels, Rng& rng);

  void collect(const std::string& prefix, ParamList& out) const;
};

struct HmsfOutput {
  Tensor y;
  Tensor alpha;  // (B,3) scale attention
  std::array<Tensor, 3> branches;
};

HmsfOutput hmsf_forward(const Tensor& x, const HmsfParams& p);

// ---------------------------------------------------------------------------
// Additive attention gate on a skip connection.

struct AttentionGateParams {
  Conv2d skip_project;  // 1x1, skip -> inter
  Conv2d gate_project;  // 1x1, gate -> inter
  Conv2d psi;           // 1x1, inter -> 1

  AttentionGateParams() = default;
  /// Internal width is half the skip channel count.
  AttentionGateParams(int skip_channels, int gate_channels, Rng& rng);

  void collect(const std::string& prefix, ParamList& out) const;
};

struct AttentionGateOutput {
  Tensor gated;
  Tensor map;  // (B,H,W,1)
};

AttentionGateOutput attention_gate(const Tensor& skip, const Tensor& gate_signal,
                                   const AttentionGateParams& p);

}  // namespace uadi
