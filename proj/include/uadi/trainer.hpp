#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uadi/data.hpp"
#include "uadi/losses.hpp"
#include "uadi/metrics.hpp"
#include "uadi/network.hpp"

namespace uadi {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;
  double lr0 = 3e-4;
  double lr_min = 1.5e-6;
  int patience = 10;
  std::uint64_t seed = 0;
  bool augment = true;
  LossConfig loss;
  ModelConfig model;

  void validate() const;
  /// Writes train.*, model.* and loss.* keys.
  void write(ConfigMap& cfg) const;
  static TrainConfig read(const ConfigMap& cfg);
};

/// lr(e) = lr_min + (lr0 - lr_min)(1 + cos(pi e / (epochs - 1))) / 2, per epoch.
double lr_schedule(int epoch, const TrainConfig& cfg);

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with bias correction over a fixed parameter list.
class Adam {
 public:
  explicit Adam(ParamList params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the accumulated gradients. A non-finite gradient
  /// entry throws NonFiniteError before any parameter changes.
  void step(double lr);
  void zero_grad();
  long long steps() const { return t_; }

 private:
  ParamList params_;
  std::vector<std::vector<double>> m_, v_;
  double b1_, b2_, eps_;
  long long t_ = 0;
};

struct EvalResult {
  SegMetrics seg;
  ClfMetrics clf;
  LossBreakdown loss;  // sample-weighted means
  std::vector<double> probs;  // (N, num_classes) softmax
};

/// Inference-mode evaluation over `indices` (no graph is recorded).
EvalResult evaluate(MultiTaskNet& model, const std::vector<Sample>& samples,
                    const std::vector<std::size_t>& indices, int batch_size, const LossConfig& loss);

struct HistoryRow {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown train_loss;
  double val_iou = 0, val_dice = 0, val_acc = 0, val_f1 = 0, val_auc = 0;
  double score = 0.0;
};

inline constexpr const char* kHistoryHeader =
    "epoch,lr,loss_total,loss_ft,loss_boundary,loss_texture,loss_clf,val_iou,val_dice,val_acc,val_f1,val_auc";
std::string history_csv_line(const HistoryRow& r);

struct TrainHooks {
  /// Replaces the validation score (Dice + accuracy) / 2 used for selection.
  std::function<double(int epoch, const EvalResult&)> score;
  /// Returning true stops training after the current epoch.
  std::function<bool(const HistoryRow&)> stop;
  std::function<void(const HistoryRow&)> on_epoch;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  int best_epoch = -1;
  double best_score = 0.0;
  std::string history_csv;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam + per-epoch cosine schedule + early stopping on the validation score.
/// Restores the best weights before returning. With a non-empty `out_dir`,
/// writes history.csv after every epoch and best.ckpt on every improvement.
/// A non-finite loss throws DivergenceError; files already written stay.
TrainResult train(MultiTaskNet& model, const std::vector<Sample>& samples, const Split& split,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir = {},
                  const TrainHooks& hooks = {});

// ---------------------------------------------------------------------------

struct ModuleToggles {
  std::string name;
  bool hmsf = false, tim = false, upa = false;
};

/// none, HMSF, TIM, TIM+UPA, HMSF+TIM+UPA.
std::vector<ModuleToggles> default_ablation_grid();

struct AblationRow {
  ModuleToggles toggles;
  std::size_t parameter_count = 0;
  int best_epoch = 0;
  EvalResult val;
  EvalResult test;
};

inline constexpr const char* kAblationHeader =
    "config,params,iou,dice,sensitivity,seg_precision,accuracy,f1,auc,clf_precision";

/// Trains each valid row from the same seed (rows run sequentially), writes
/// <out_dir>/<row>/{history.csv,best.ckpt} and <out_dir>/ablation.csv with
/// test-split metrics. Rows with UPA but no TIM are skipped with a warning.
std::vector<AblationRow> ablation_run(const TrainConfig& base, const std::vector<Sample>& samples,
                                      const Split& split, const std::vector<ModuleToggles>& grid,
                                      const std::filesystem::path& out_dir = {});
std::string ablation_csv(const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------------------

struct DiagRecord {
  std::size_t sample = 0;
  int level = 0;
  double disp_seg2clf = 0.0;  // |f_enh - f| / |f|
  double disp_clf2seg = 0.0;  // |D_enh - D| / |D|
  std::optional<double> omega_seg, omega_clf;
};

struct DiagResult {
  std::vector<DiagRecord> records;  // level-major: 4 levels x N samples
  std::array<double, kDecoderLevels> mean_seg2clf{}, mean_clf2seg{};
};

/// Requires TIM; omega columns are filled when UPA is on.
DiagResult diagnose(MultiTaskNet& model, const std::vector<Sample>& samples,
                    const std::vector<std::size_t>& indices, int batch_size = 8);
/// "level,sample,disp_seg2clf,disp_clf2seg"
std::string displacement_csv(const DiagResult& d);
/// "level,sample,omega_seg,omega_clf"; empty body without UPA.
std::string omega_csv(const DiagResult& d);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace uadi
