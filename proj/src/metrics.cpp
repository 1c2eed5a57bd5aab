#include "uadi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "uadi/config.hpp"

namespace uadi {

namespace {

double ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

SegCounts seg_counts(std::span<const double> pred_prob, std::span<const double> target, double threshold) {
  if (pred_prob.size() != target.size()) throw std::invalid_argument("seg_counts: size mismatch");
  SegCounts c;
  for (std::size_t i = 0; i < pred_prob.size(); ++i) {
    const bool p = pred_prob[i] >= threshold;
    const bool t = target[i] >= 0.5;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  return c;
}

SegMetrics seg_metrics_from_counts(const SegCounts& c) {
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  SegMetrics m;
  if (c.tp + c.fp + c.fn == 0) {
    // Nothing to find and nothing predicted.
    m.iou = m.dice = m.sensitivity = m.precision = 1.0;
    return m;
  }
  m.iou = ratio(tp, tp + fp + fn);
  m.dice = ratio(2.0 * tp, 2.0 * tp + fp + fn);
  m.sensitivity = ratio(tp, tp + fn);
  m.precision = ratio(tp, tp + fp);
  return m;
}

SegMetrics seg_metrics(std::span<const double> pred_prob, std::span<const double> target,
                       std::size_t pixels_per_image, double threshold) {
  if (pred_prob.size() != target.size()) throw std::invalid_argument("seg_metrics: size mismatch");
  if (pixels_per_image == 0 || pred_prob.size() % pixels_per_image != 0)
    throw std::invalid_argument("seg_metrics: data is not a whole number of images");
  SegCounts total;
  for (std::size_t off = 0; off < pred_prob.size(); off += pixels_per_image) {
    const SegCounts c = seg_counts(pred_prob.subspan(off, pixels_per_image),
                                   target.subspan(off, pixels_per_image), threshold);
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
  }
  return seg_metrics_from_counts(total);
}

double binary_auc(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("binary_auc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tie groups, then U = R_pos - n_pos (n_pos + 1) / 2.
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (positive[order[k]]) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return 0.5;
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

ClfMetrics clf_metrics(std::span<const double> probs, std::span<const int> labels, int num_classes) {
  const std::size_t n = labels.size();
  if (probs.size() != n * static_cast<std::size_t>(num_classes))
    throw std::invalid_argument("clf_metrics: probs do not match labels");
  ClfMetrics m;
  if (n == 0) return m;
  std::vector<int> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = probs.subspan(i * num_classes, num_classes);
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("clf_metrics: probability row does not sum to 1");
    pred[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (labels[i] < 0 || labels[i] >= num_classes) throw std::invalid_argument("clf_metrics: label out of range");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += pred[i] == labels[i];
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  double f1_sum = 0.0, prec_sum = 0.0, auc_sum = 0.0;
  int present = 0;
  for (int k = 0; k < num_classes; ++k) {
    std::size_t tp = 0, fp = 0, fn = 0, support = 0;
    std::vector<double> scores(n);
    std::vector<int> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      const bool is_k = labels[i] == k, said_k = pred[i] == k;
      support += is_k;
      tp += is_k && said_k;
      fp += !is_k && said_k;
      fn += is_k && !said_k;
      scores[i] = probs[i * num_classes + k];
      pos[i] = is_k;
    }
    if (support == 0) {
      m.absent_classes.push_back(k);
      continue;
    }
    ++present;
    const double precision = ratio(static_cast<double>(tp), static_cast<double>(tp + fp));
    const double recall = ratio(static_cast<double>(tp), static_cast<double>(tp + fn));
    prec_sum += precision;
    f1_sum += ratio(2.0 * precision * recall, precision + recall);
    auc_sum += binary_auc(scores, pos);
  }
  if (!m.absent_classes.empty()) {
    std::cerr << "warning: clf_metrics: class";
    for (int k : m.absent_classes) std::cerr << ' ' << k;
    std::cerr << " absent from labels; excluded from macro averages\n";
  }
  if (present > 0) {
    m.macro_f1 = f1_sum / present;
    m.macro_precision = prec_sum / present;
    m.macro_auc = auc_sum / present;
  }
  return m;
}

void write_metric_rows(std::ostream& os, const std::string& run_id, int epoch, const std::string& split,
                       const SegMetrics& seg, const ClfMetrics& clf) {
  const std::pair<const char*, double> rows[] = {
      {"iou", seg.iou},           {"dice", seg.dice},           {"sensitivity", seg.sensitivity},
      {"seg_precision", seg.precision}, {"accuracy", clf.accuracy}, {"f1", clf.macro_f1},
      {"auc", clf.macro_auc},     {"clf_precision", clf.macro_precision}};
  for (const auto& [name, v] : rows)
    os << run_id << ',' << epoch << ',' << split << ',' << name << ',' << format_double(v) << '\n';
}

}  // namespace uadi
