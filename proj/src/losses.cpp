#include "uadi/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace uadi {

namespace {

void check_pair(std::string_view op, const Tensor& target, const Tensor& pred) {
  if (target.shape() != pred.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(target.shape()) + " vs " +
                     shape_str(pred.shape()));
  if (target.rank() != 4 || target.dim(3) != 1)
    throw ShapeError(std::string(op) + ": expected (B,H,W,1), got " + shape_str(target.shape()));
  for (double v : pred.data())
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument(std::string(op) + ": prediction outside [0,1]");
  for (double v : target.data())
    if (v != 0.0 && v != 1.0) throw std::invalid_argument(std::string(op) + ": target must be binary");
}

Tensor constant(double v, int rank) { return Tensor::full(Shape(rank, 1), v); }

Tensor kernel_tensor(const Eigen::MatrixXd& k) {
  const int n = static_cast<int>(k.rows());
  std::vector<double> v(static_cast<std::size_t>(n) * n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) v[static_cast<std::size_t>(y) * n + x] = k(y, x);
  return Tensor::from({n, n, 1, 1}, std::move(v));
}

}  // namespace

void LossConfig::validate() const {
  for (double w : {w_seg, w_clf, w_boundary, w_texture, tversky_alpha, tversky_beta, tversky_gamma,
                   focal_ce_gamma, smooth})
    if (!(w >= 0.0)) throw ConfigError("loss: weights and exponents must be non-negative");
  if (!(curvature_sigma > 0.0)) throw ConfigError("loss: curvature_sigma must be positive");
  if (curvature_support < 3 || curvature_support % 2 == 0)
    throw ConfigError("loss: curvature_support must be odd and >= 3");
  if (!(binarize_threshold > 0.0 && binarize_threshold < 1.0))
    throw ConfigError("loss: binarize_threshold must lie in (0,1)");
  if (!(binarize_slope > 0.0)) throw ConfigError("loss: binarize_slope must be positive");
}

void LossConfig::write(ConfigMap& cfg, const std::string& p) const {
  cfg.set(p + "w_seg", format_double(w_seg));
  cfg.set(p + "w_clf", format_double(w_clf));
  cfg.set(p + "w_boundary", format_double(w_boundary));
  cfg.set(p + "w_texture", format_double(w_texture));
  cfg.set(p + "tversky_alpha", format_double(tversky_alpha));
  cfg.set(p + "tversky_beta", format_double(tversky_beta));
  cfg.set(p + "tversky_gamma", format_double(tversky_gamma));
  cfg.set(p + "curvature_sigma", format_double(curvature_sigma));
  cfg.set(p + "curvature_support", std::to_string(curvature_support));
  cfg.set(p + "focal_ce_gamma", format_double(focal_ce_gamma));
  cfg.set(p + "binarize_threshold", format_double(binarize_threshold));
  cfg.set(p + "binarize_slope", format_double(binarize_slope));
  cfg.set(p + "smooth", format_double(smooth));
}

LossConfig LossConfig::read(const ConfigMap& cfg, const std::string& p) {
  LossConfig c;
  c.w_seg = cfg.get_double(p + "w_seg", c.w_seg);
  c.w_clf = cfg.get_double(p + "w_clf", c.w_clf);
  c.w_boundary = cfg.get_double(p + "w_boundary", c.w_boundary);
  c.w_texture = cfg.get_double(p + "w_texture", c.w_texture);
  c.tversky_alpha = cfg.get_double(p + "tversky_alpha", c.tversky_alpha);
  c.tversky_beta = cfg.get_double(p + "tversky_beta", c.tversky_beta);
  c.tversky_gamma = cfg.get_double(p + "tversky_gamma", c.tversky_gamma);
  c.curvature_sigma = cfg.get_double(p + "curvature_sigma", c.curvature_sigma);
  c.curvature_support = static_cast<int>(cfg.get_int(p + "curvature_support", c.curvature_support));
  c.focal_ce_gamma = cfg.get_double(p + "focal_ce_gamma", c.focal_ce_gamma);
  c.binarize_threshold = cfg.get_double(p + "binarize_threshold", c.binarize_threshold);
  c.binarize_slope = cfg.get_double(p + "binarize_slope", c.binarize_slope);
  c.smooth = cfg.get_double(p + "smooth", c.smooth);
  return c;
}

// ---------------------------------------------------------------------------

Tensor focal_tversky(const Tensor& pred_prob, const Tensor& target, const LossConfig& cfg) {
  check_pair("focal_tversky", target, pred_prob);
  const Tensor tp = sum_all(mul(pred_prob, target));
  const Tensor fp = sum_all(mul(pred_prob, affine(target, -1.0, 1.0)));
  const Tensor fn = sum_all(mul(affine(pred_prob, -1.0, 1.0), target));
  const Tensor num = affine(tp, 1.0, cfg.smooth);
  const Tensor den = affine(add(add(tp, affine(fp, cfg.tversky_alpha, 0.0)), affine(fn, cfg.tversky_beta, 0.0)),
                            1.0, cfg.smooth);
  const Tensor index = div(num, den);
  return pow(affine(index, -1.0, 1.0), cfg.tversky_gamma);
}

Eigen::MatrixXd curvature_kernel(double sigma, int support) {
  if (support < 3 || support % 2 == 0)
    throw std::invalid_argument("curvature_kernel: support must be odd and >= 3, got " +
                                std::to_string(support));
  if (!(sigma > 0.0)) throw std::invalid_argument("curvature_kernel: sigma must be positive");
  const int h = support / 2;
  Eigen::MatrixXd k(support, support);
  for (int y = -h; y <= h; ++y)
    for (int x = -h; x <= h; ++x) {
      const double r2 = static_cast<double>(x * x + y * y);
      k(y + h, x + h) = static_cast<double>(x * x - y * y) * std::exp(-r2 / (2.0 * sigma * sigma));
    }
  return k;
}

Tensor soft_binarize(const Tensor& prob, double threshold, double slope) {
  const int r = prob.rank();
  const double lo = sigmoid(Tensor::scalar(-slope * threshold)).item();
  const double hi = sigmoid(Tensor::scalar(slope * (1.0 - threshold))).item();
  const Tensor s = sigmoid(affine(prob, slope, -slope * threshold));
  return div(sub(s, constant(lo, r)), constant(hi - lo, r));
}

Tensor boundary_loss(const Tensor& mask, const Tensor& pred_prob, const LossConfig& cfg) {
  check_pair("boundary_loss", mask, pred_prob);
  std::vector<double> hard(mask.numel());
  for (std::size_t i = 0; i < hard.size(); ++i) hard[i] = mask[i] >= cfg.binarize_threshold ? 1.0 : 0.0;
  const Tensor target_bin = Tensor::from(mask.shape(), std::move(hard));
  const Tensor pred_bin = soft_binarize(pred_prob, cfg.binarize_threshold, cfg.binarize_slope);
  const Tensor k = kernel_tensor(curvature_kernel(cfg.curvature_sigma, cfg.curvature_support));
  const Tensor none;
  return mean_all(abs(sub(conv2d(target_bin, k, none), conv2d(pred_bin, k, none))));
}

Tensor texture_loss(const Tensor& mask, const Tensor& pred_prob) {
  check_pair("texture_loss", mask, pred_prob);
  const Tensor sobel = Tensor::from({3, 3, 1, 1}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
  const Tensor none;
  const Tensor s_true = stddev(conv2d(mask, sobel, none), {1, 2, 3});
  const Tensor s_pred = stddev(conv2d(pred_prob, sobel, none), {1, 2, 3});
  return mean_all(abs(sub(s_true, s_pred)));
}

Tensor focal_ce(const Tensor& logits, std::span<const int> labels, double gamma) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size())
    throw ShapeError("focal_ce: logits " + shape_str(logits.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  const int B = logits.dim(0), K = logits.dim(1);
  std::vector<double> onehot(static_cast<std::size_t>(B) * K, 0.0);
  for (int b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= K)
      throw std::invalid_argument("focal_ce: label " + std::to_string(labels[b]) + " out of range");
    onehot[static_cast<std::size_t>(b) * K + labels[b]] = 1.0;
  }
  const Tensor logp_t = sum(mul(log_softmax(logits), Tensor::from({B, K}, std::move(onehot))), {1});
  const Tensor weight = pow(affine(exp(logp_t), -1.0, 1.0), gamma);
  return mean_all(mul(weight, neg(logp_t)));
}

double combine_losses(double ft, double boundary, double texture, double clf, const LossConfig& cfg) {
  const double seg = ft + cfg.w_boundary * boundary + cfg.w_texture * texture;
  return cfg.w_seg * seg + cfg.w_clf * clf;
}

TotalLoss total_loss(const Tensor& seg_logits, const Tensor& clf_logits, const Tensor& mask,
                     std::span<const int> labels, const LossConfig& cfg) {
  const Tensor prob = sigmoid(seg_logits);
  const Tensor ft = focal_tversky(prob, mask, cfg);
  const Tensor bd = boundary_loss(mask, prob, cfg);
  const Tensor tx = texture_loss(mask, prob);
  const Tensor ce = focal_ce(clf_logits, labels, cfg.focal_ce_gamma);
  const Tensor seg = add(add(ft, affine(bd, cfg.w_boundary, 0.0)), affine(tx, cfg.w_texture, 0.0));
  TotalLoss out;
  out.total = add(affine(seg, cfg.w_seg, 0.0), affine(ce, cfg.w_clf, 0.0));
  out.parts.total = out.total.item();
  out.parts.seg = seg.item();
  out.parts.focal_tversky = ft.item();
  out.parts.boundary = bd.item();
  out.parts.texture = tx.item();
  out.parts.clf = ce.item();
  return out;
}

}  // namespace uadi
