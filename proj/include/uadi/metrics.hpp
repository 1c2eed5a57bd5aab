#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace uadi {

struct SegCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

struct SegMetrics {
  double iou = 0.0;
  double dice = 0.0;
  double sensitivity = 0.0;
  double precision = 0.0;
};

struct ClfMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double macro_auc = 0.0;
  double macro_precision = 0.0;
  /// Classes absent from the labels; they are left out of the macro averages.
  std::vector<int> absent_classes;
};

/// Micro-aggregated pixel counts for one image (`pred_prob` and `target` are
/// row-major H*W). An image whose target and thresholded prediction are both
/// empty contributes nothing.
SegCounts seg_counts(std::span<const double> pred_prob, std::span<const double> target,
                     double threshold = 0.5);
SegMetrics seg_metrics_from_counts(const SegCounts& c);

/// Images are consecutive blocks of `pixels_per_image` values.
SegMetrics seg_metrics(std::span<const double> pred_prob, std::span<const double> target,
                       std::size_t pixels_per_image, double threshold = 0.5);

/// One-vs-rest AUC by the Mann-Whitney rank statistic; ties count 1/2.
double binary_auc(std::span<const double> scores, std::span<const int> positive);

/// `probs` is row-major (N, num_classes); rows must sum to 1 within 1e-6.
ClfMetrics clf_metrics(std::span<const double> probs, std::span<const int> labels, int num_classes);

/// "run_id,epoch,split,metric,value" rows.
void write_metric_rows(std::ostream& os, const std::string& run_id, int epoch, const std::string& split,
                       const SegMetrics& seg, const ClfMetrics& clf);

}  // namespace uadi
