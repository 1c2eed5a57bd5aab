#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "uadi/config.hpp"
#include "uadi/layers.hpp"
#include "uadi/modules.hpp"

namespace uadi {

inline constexpr int kEncoderStages = 5;
inline constexpr int kDecoderLevels = 4;

struct ModelConfig {
  int input_size = 64;
  std::array<int, kEncoderStages> encoder_channels{16, 32, 64, 128, 256};
  std::array<int, kDecoderLevels> decoder_channels{128, 64, 32, 16};
  int num_classes = 3;
  int clf_width = 256;
  bool use_hmsf = true;
  bool use_tim = true;
  bool use_upa = true;
  double dropout = 0.3;
  std::uint64_t seed = 0;
  bool zero_init_tim_gates = false;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  void write(ConfigMap& cfg, const std::string& prefix = "model.") const;
  static ModelConfig read(const ConfigMap& cfg, const std::string& prefix = "model.");
};

struct LevelDiagnostics {
  Tensor d, d_enh, d_final;
  Tensor f_clf, f_enh, f_final;
  Tensor omega;  // (B,2); undefined unless UPA is active
};

struct ForwardOutput {
  Tensor seg_logits;  // (B,H,W,1), pre-sigmoid
  Tensor clf_logits;  // (B,num_classes)
  std::vector<LevelDiagnostics> levels;
};

struct DecoderLevelOutput {
  Tensor d_final;
  Tensor f_final;
  LevelDiagnostics diagnostics;
};

/// Test and analysis hooks. Each hook may replace the tensor it receives.
struct ForwardOptions {
  bool diagnostics = false;
  /// Called on D_l (levels 1..4) right after the decoder conv block.
  std::function<Tensor(int level, const Tensor&)> decoder_hook;
  /// Called on f_clf^l (levels 1..4) right after initialisation.
  std::function<Tensor(int level, const Tensor&)> clf_stream_hook;
  /// Replace GAP(deepest encoder features) by zeros in the classification head.
  bool zero_deepest_clf_path = false;
};

/// Five-stage encoder, four-level decoder with task interaction and
/// uncertainty-proxy fusion at every level, multi-scale fusion on encoder
/// features, attention-gated skips, and segmentation + classification heads.
class MultiTaskNet {
 public:
  explicit MultiTaskNet(const ModelConfig& cfg);
  // Tensors are shared handles, so a copy would alias the weights.
  MultiTaskNet(const MultiTaskNet&) = delete;
  MultiTaskNet& operator=(const MultiTaskNet&) = delete;
  MultiTaskNet(MultiTaskNet&&) = default;
  MultiTaskNet& operator=(MultiTaskNet&&) = default;

  const ModelConfig& config() const { return cfg_; }
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  Rng& dropout_rng() { return dropout_rng_; }

  /// Encoder features after optional multi-scale fusion, shallowest first.
  std::vector<Tensor> encoder_forward(const Tensor& image);
  /// `level` is 1-based.
  DecoderLevelOutput decoder_level_forward(int level, const Tensor& prev, const Tensor& skip,
                                           const Tensor& f_clf,
                                           const ForwardOptions& opts = {});
  Tensor classification_head_forward(const Tensor& deepest, const std::vector<Tensor>& streams,
                                     bool zero_deepest = false);
  ForwardOutput forward(const Tensor& image, const ForwardOptions& opts = {});

  /// Every parameter and buffer, in a fixed order.
  ParamList named_tensors() const;
  ParamList parameters() const;
  std::size_t parameter_count() const;

  TimLevelParams& tim(int level) { return tim_.at(level - 1); }
  UpaLevelParams& upa(int level) { return upa_.at(level - 1); }
  HmsfParams& hmsf(int stage) { return hmsf_.at(stage); }

 private:
  struct EncoderStage {
    ConvBnRelu down;
    ConvBnRelu conv;
  };
  struct DecoderLevel {
    ConvTranspose2x2 up;
    AttentionGateParams gate;
    ConvBnRelu conv1;
    ConvBnRelu conv2;
  };

  ModelConfig cfg_;
  bool training_ = false;
  Rng dropout_rng_;
  std::vector<EncoderStage> encoder_;
  std::vector<HmsfParams> hmsf_;
  std::vector<Dense> clf_init_;
  std::vector<DecoderLevel> decoder_;
  std::vector<TimLevelParams> tim_;
  std::vector<UpaLevelParams> upa_;
  Conv2d seg_head_;
  Dense clf_hidden_;
  Dense clf_out_;
};

/// Encoder stage feeding decoder level `level`'s skip connection (1-based level).
constexpr int skip_stage_for_level(int level) { return kEncoderStages - 1 - level; }

// ---------------------------------------------------------------------------
// Checkpoint: config echo followed by one tensor dump per named tensor.

void save_checkpoint(const MultiTaskNet& model, const std::filesystem::path& path);
std::string checkpoint_text(const MultiTaskNet& model);
MultiTaskNet load_checkpoint(const std::filesystem::path& path);
/// Copies tensor values from `src` into `dst` (same config required).
void copy_weights(const MultiTaskNet& src, MultiTaskNet& dst);

}  // namespace uadi
