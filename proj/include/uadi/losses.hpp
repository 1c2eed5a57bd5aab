#pragma once

#include <span>
#include <string>

#include <Eigen/Dense>

#include "uadi/config.hpp"
#include "uadi/tensor.hpp"

namespace uadi {

struct LossConfig {
  double w_seg = 0.80;
  double w_clf = 0.20;
  double w_boundary = 0.25;
  double w_texture = 0.15;
  double tversky_alpha = 0.3;  // false-positive penalty
  double tversky_beta = 0.7;   // false-negative penalty
  double tversky_gamma = 0.75;
  double curvature_sigma = 1.0;
  int curvature_support = 7;
  double focal_ce_gamma = 2.0;
  double binarize_threshold = 0.5;
  /// Slope of the sigmoid standing in for hard binarisation of predictions.
  double binarize_slope = 50.0;
  double smooth = 1.0;

  void validate() const;
  void write(ConfigMap& cfg, const std::string& prefix = "loss.") const;
  static LossConfig read(const ConfigMap& cfg, const std::string& prefix = "loss.");
};

/// (1 - TI)^gamma with TI = (TP + s) / (TP + alpha FP + beta FN + s), soft
/// counts pooled over the whole batch.
Tensor focal_tversky(const Tensor& pred_prob, const Tensor& target, const LossConfig& cfg);

/// K(x, y) = (x^2 - y^2) exp(-(x^2 + y^2) / (2 sigma^2)) on a centred odd grid.
/// Row index is y, column index is x.
Eigen::MatrixXd curvature_kernel(double sigma, int support);

/// Steep-sigmoid binarisation rescaled so that 0 -> 0 and 1 -> 1 exactly.
Tensor soft_binarize(const Tensor& prob, double threshold, double slope);

/// Mean |K * M_bin - K * M^_bin| with "same" zero padding.
Tensor boundary_loss(const Tensor& mask, const Tensor& pred_prob, const LossConfig& cfg);

/// Batch mean of |std(S_x * M) - std(S_x * M^)| with the horizontal Sobel S_x.
Tensor texture_loss(const Tensor& mask, const Tensor& pred_prob);

/// Mean of (1 - p_t)^gamma * (-log p_t).
Tensor focal_ce(const Tensor& logits, std::span<const int> labels, double gamma);

struct LossBreakdown {
  double total = 0.0;
  double seg = 0.0;
  double focal_tversky = 0.0;
  double boundary = 0.0;
  double texture = 0.0;
  double clf = 0.0;
};

struct TotalLoss {
  Tensor total;
  LossBreakdown parts;
};

/// w_seg (FT + w_b boundary + w_t texture) + w_clf clf, as plain arithmetic.
double combine_losses(double focal_tversky, double boundary, double texture, double clf,
                      const LossConfig& cfg);

TotalLoss total_loss(const Tensor& seg_logits, const Tensor& clf_logits, const Tensor& mask,
                     std::span<const int> labels, const LossConfig& cfg);

}  // namespace uadi
