#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "uadi/random.hpp"
#include "uadi/tensor.hpp"

namespace uadi {

using Image = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum Label : int { kNormal = 0, kBenign = 1, kMalignant = 2 };
inline constexpr int kNumLabels = 3;
const char* label_name(int label);
/// Accepts "0".."2" or the class names; throws std::invalid_argument otherwise.
int parse_label(const std::string& text);

struct Sample {
  std::string id;
  Image image;  // (H,W), values in [0,1]
  Image mask;   // (H,W), values in {0,1}
  int label = kNormal;
};

struct DatasetSpec {
  int n_samples = 300;
  int image_size = 64;
  /// normal, benign, malignant
  std::array<double, 3> class_proportions{0.2, 0.45, 0.35};
  /// Lesion radius range in pixels (ellipse semi-axes, polygon mean radius).
  std::array<double, 2> lesion_size_range_px{6.0, 14.0};
  double speckle_strength = 0.25;
  double shadow_probability = 0.6;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

/// Geometry drawn for a lesion; exposed for tests.
struct LesionShape {
  double cx = 0, cy = 0;
  double a = 0, b = 0, theta = 0;  // ellipse semi-axes and rotation
  double radius = 0;               // malignant mean radius
};

Sample generate_sample(const DatasetSpec& spec, int label, Rng& rng, LesionShape* shape = nullptr);

/// Class counts by largest remainder; labels shuffled with the seed; sample
/// `i` draws from its own stream so the result does not depend on `threads`.
std::vector<Sample> generate_dataset(const DatasetSpec& spec, int threads = 0);

/// Worker count: UADI_THREADS if set (>= 1), else hardware concurrency.
int producer_threads();
/// Runs body(i) for i in [0, n) on up to `threads` workers (0 = producer_threads()).
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Stratified, disjoint split. Overall sizes follow the ratios by largest
/// remainder; per-class shares stay within one sample of proportional.
Split split_dataset(const std::vector<int>& labels, std::array<double, 3> ratios = {0.70, 0.15, 0.15},
                    std::uint64_t seed = 0);

struct AugmentParams {
  double angle_deg = 0.0;
  bool flip = false;
  double elastic_magnitude = 0.0;  // px; 0 disables the elastic field
  double elastic_sigma = 8.0;
  std::uint64_t elastic_seed = 0;

  bool is_identity() const { return angle_deg == 0.0 && !flip && elastic_magnitude == 0.0; }
};

inline constexpr double kMaxRotationDeg = 25.0;
inline constexpr double kElasticSigma = 8.0;
inline constexpr double kElasticMagnitude = 6.0;

AugmentParams draw_augment(Rng& rng);
Sample apply_augment(const Sample& s, const AugmentParams& p);
inline Sample augment(const Sample& s, Rng& rng) { return apply_augment(s, draw_augment(rng)); }

// ---------------------------------------------------------------------------
// Image IO. 8-bit grayscale PGM (P5) and PNG.

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raw 8-bit pixels, row-major.
struct Gray8 {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

Gray8 parse_pgm(const std::string& bytes);
std::string encode_pgm(const Gray8& img);
Gray8 read_gray8(const std::filesystem::path& path);  // by extension: .pgm or .png
void write_gray8(const std::filesystem::path& path, const Gray8& img);

/// Read binarises at 128; write maps {0,1} to {0,255}.
Image read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const Image& mask);
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& image);

/// images/<id>.png, masks/<id>.png, labels.csv ("id,label").
void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);
/// Loads the same layout (PNG or PGM). Images whose size differs from
/// `size` are resampled (bilinear for images, nearest for masks); size 0 keeps them.
std::vector<Sample> load_dataset(const std::filesystem::path& dir, int size = 0);

Image resize_bilinear(const Image& src, int h, int w);
Image resize_nearest(const Image& src, int h, int w);

// ---------------------------------------------------------------------------

struct Batch {
  Tensor images;  // (B,H,W,1)
  Tensor masks;   // (B,H,W,1)
  std::vector<int> labels;
};

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

}  // namespace uadi
