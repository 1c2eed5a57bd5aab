#include "uadi/data.hpp"

#include <png.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>
#include <tuple>

#include "uadi/config.hpp"

namespace uadi {

namespace fs = std::filesystem;

const char* label_name(int label) {
  switch (label) {
    case kNormal: return "normal";
    case kBenign: return "benign";
    case kMalignant: return "malignant";
  }
  throw std::invalid_argument("label out of range: " + std::to_string(label));
}

int parse_label(const std::string& text) {
  for (int k = 0; k < kNumLabels; ++k)
    if (text == label_name(k) || text == std::to_string(k)) return k;
  throw std::invalid_argument("unknown label '" + text + "'");
}

void DatasetSpec::validate() const {
  if (n_samples <= 0) throw std::invalid_argument("dataset: n_samples must be positive");
  if (image_size < 8) throw std::invalid_argument("dataset: image_size must be >= 8");
  double total = 0.0;
  for (double p : class_proportions) {
    if (!(p >= 0.0)) throw std::invalid_argument("dataset: class proportions must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("dataset: class proportions must sum to 1");
  const auto [lo, hi] = lesion_size_range_px;
  if (!(lo > 0.0 && lo <= hi)) throw std::invalid_argument("dataset: lesion size range must satisfy 0 < min <= max");
  // Malignant outlines reach 1.6x the mean radius; the lesion must fit the
  // inscribed circle so that rotation keeps it in frame.
  if (2.0 * 1.6 * hi + 2.0 > image_size)
    throw std::invalid_argument("dataset: lesion larger than image (max radius " + format_double(hi) + " px)");
  if (!(speckle_strength >= 0.0 && speckle_strength < 1.0))
    throw std::invalid_argument("dataset: speckle_strength must lie in [0,1)");
  if (!(shadow_probability >= 0.0 && shadow_probability <= 1.0))
    throw std::invalid_argument("dataset: shadow_probability must lie in [0,1]");
}

namespace {

int mirror(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

Image gaussian_blur(const Image& src, double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= s;
  const int H = static_cast<int>(src.rows()), W = static_cast<int>(src.cols());
  Image tmp(H, W), out(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * src(y, mirror(x + i, W));
      tmp(y, x) = acc;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp(mirror(y + i, H), x);
      out(y, x) = acc;
    }
  return out;
}

double bilinear(const Image& img, double x, double y, bool zero_outside) {
  const int H = static_cast<int>(img.rows()), W = static_cast<int>(img.cols());
  if (zero_outside && (x < -1.0 || y < -1.0 || x > W || y > H)) return 0.0;
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto at = [&](int yy, int xx) {
    if (xx < 0 || yy < 0 || xx >= W || yy >= H) {
      if (zero_outside) return 0.0;
      xx = std::clamp(xx, 0, W - 1);
      yy = std::clamp(yy, 0, H - 1);
    }
    return img(yy, xx);
  };
  double v = (1 - fy) * ((1 - fx) * at(y0, x0) + (fx != 0.0 ? fx * at(y0, x0 + 1) : 0.0));
  if (fy != 0.0) v += fy * ((1 - fx) * at(y0 + 1, x0) + (fx != 0.0 ? fx * at(y0 + 1, x0 + 1) : 0.0));
  return v;
}

// Smooth echotexture with a mild depth gradient.
Image background(int n, Rng& rng) {
  Image bg(n, n);
  const double f1 = rng.uniform(0.05, 0.2), f2 = rng.uniform(0.05, 0.2);
  const double p1 = rng.uniform(0.0, 6.28), p2 = rng.uniform(0.0, 6.28);
  const double base = rng.uniform(0.5, 0.62);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      bg(y, x) = base + 0.06 * std::sin(f1 * x + p1) * std::cos(f2 * y + p2) + 0.1 * y / n;
  return bg;
}

void place_centre(int n, double extent, Rng& rng, double& cx, double& cy) {
  const double c = 0.5 * (n - 1);
  const double room = std::max(0.0, 0.5 * n - 1.0 - extent);
  const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double rad = room * std::sqrt(rng.uniform());
  cx = c + rad * std::cos(ang);
  cy = c + rad * std::sin(ang);
}

}  // namespace

Sample generate_sample(const DatasetSpec& spec, int label, Rng& rng, LesionShape* shape) {
  spec.validate();
  if (label < 0 || label >= kNumLabels) throw std::invalid_argument("generate_sample: label out of range");
  const int n = spec.image_size;
  Sample s;
  s.label = label;
  s.image = background(n, rng);
  s.mask = Image::Zero(n, n);
  LesionShape g;
  const auto [lo, hi] = spec.lesion_size_range_px;

  if (label == kBenign) {
    g.a = rng.uniform(lo, hi);
    g.b = rng.uniform(lo, hi);
    g.theta = rng.uniform(0.0, std::numbers::pi);
    place_centre(n, std::max(g.a, g.b), rng, g.cx, g.cy);
    const double ct = std::cos(g.theta), st = std::sin(g.theta);
    const double tone = rng.uniform(0.15, 0.25);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double dx = x - g.cx, dy = y - g.cy;
        const double u = (ct * dx + st * dy) / g.a, v = (-st * dx + ct * dy) / g.b;
        if (u * u + v * v <= 1.0) {
          s.mask(y, x) = 1.0;
          s.image(y, x) = tone;
        }
      }
  } else if (label == kMalignant) {
    g.radius = rng.uniform(lo, hi);
    constexpr int kHarmonics = 6;
    std::array<double, kHarmonics> amp{}, phase{};
    double total = 0.0;
    for (int k = 0; k < kHarmonics; ++k) {
      amp[k] = rng.uniform(0.0, 0.1);
      phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      total += amp[k];
    }
    place_centre(n, g.radius * (1.0 + total), rng, g.cx, g.cy);
    g.a = g.b = g.radius;
    const double tone = rng.uniform(0.08, 0.16);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double dx = x - g.cx, dy = y - g.cy;
        const double phi = std::atan2(dy, dx);
        double r = 1.0;
        for (int k = 0; k < kHarmonics; ++k) r += amp[k] * std::cos((k + 2) * phi + phase[k]);
        r = std::max(r, 0.4) * g.radius;
        if (dx * dx + dy * dy <= r * r) {
          s.mask(y, x) = 1.0;
          s.image(y, x) = tone + 0.2 * rng.uniform();  // heterogeneous interior
        }
      }
    if (rng.bernoulli(spec.shadow_probability)) {
      const double atten = rng.uniform(0.35, 0.6);
      for (int x = 0; x < n; ++x) {
        int bottom = -1;
        for (int y = 0; y < n; ++y)
          if (s.mask(y, x) > 0.0) bottom = y;
        for (int y = bottom + 1; bottom >= 0 && y < n; ++y) s.image(y, x) *= atten;
      }
    }
  }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      s.image(y, x) = std::clamp(s.image(y, x) * (1.0 + spec.speckle_strength * rng.normal()), 0.0, 1.0);
  if (shape) *shape = g;
  return s;
}

int producer_threads() {
  if (const char* env = std::getenv("UADI_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  if (threads <= 0) threads = producer_threads();
  threads = static_cast<int>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

namespace {

// Largest-remainder apportionment of `total` by `weights` (ties to lower index).
std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights) {
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double q = total * weights[i] / wsum;
    out[i] = static_cast<std::size_t>(std::floor(q + 1e-9));
    used += out[i];
    rem.push_back({q - out[i], i});
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++out[rem[k % rem.size()].second];
  return out;
}

}  // namespace

std::vector<Sample> generate_dataset(const DatasetSpec& spec, int threads) {
  spec.validate();
  const auto counts = apportion(spec.n_samples, {spec.class_proportions.begin(), spec.class_proportions.end()});
  std::vector<int> labels;
  for (int c = 0; c < kNumLabels; ++c) labels.insert(labels.end(), counts[c], c);
  Rng order(spec.seed);
  order.shuffle(labels.begin(), labels.end());
  std::vector<Sample> out(labels.size());
  parallel_for(labels.size(), threads, [&](std::size_t i) {
    Rng rng = Rng::stream(spec.seed, i);
    out[i] = generate_sample(spec, labels[i], rng);
    char id[16];
    std::snprintf(id, sizeof id, "s%05zu", i);
    out[i].id = id;
  });
  return out;
}

Split split_dataset(const std::vector<int>& labels, std::array<double, 3> ratios, std::uint64_t seed) {
  double rsum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw std::invalid_argument("split_dataset: ratios must be non-negative");
    rsum += r;
  }
  if (std::abs(rsum - 1.0) > 1e-9) throw std::invalid_argument("split_dataset: ratios must sum to 1");
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("split_dataset: negative label");
    max_label = std::max(max_label, l);
  }
  const int C = max_label + 1;
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (int c = 0; c < C; ++c)
    if (!by_class[c].empty() && by_class[c].size() < 3)
      throw std::invalid_argument("split_dataset: class " + std::to_string(c) + " has only " +
                                  std::to_string(by_class[c].size()) + " samples (need >= 3)");

  const std::vector<double> rv(ratios.begin(), ratios.end());
  const auto split_total = apportion(labels.size(), rv);
  // Per-cell floors, then hand out the remaining units by fractional part
  // while respecting both the class and the split totals.
  std::vector<std::array<std::size_t, 3>> cell(C);
  std::vector<std::size_t> class_left(C);
  std::array<std::size_t, 3> split_left = {split_total[0], split_total[1], split_total[2]};
  std::vector<std::tuple<double, int, int>> frac;
  for (int c = 0; c < C; ++c) {
    class_left[c] = by_class[c].size();
    for (int s = 0; s < 3; ++s) {
      const double q = by_class[c].size() * ratios[s];
      cell[c][s] = static_cast<std::size_t>(std::floor(q + 1e-9));
      class_left[c] -= cell[c][s];
      split_left[s] -= cell[c][s];
      frac.emplace_back(q - cell[c][s], c, s);
    }
  }
  std::stable_sort(frac.begin(), frac.end(), [](auto& a, auto& b) { return std::get<0>(a) > std::get<0>(b); });
  for (auto& [f, c, s] : frac)
    if (class_left[c] > 0 && split_left[s] > 0) {
      ++cell[c][s];
      --class_left[c];
      --split_left[s];
    }
  for (int c = 0; c < C; ++c)
    for (int s = 0; s < 3 && class_left[c] > 0; ++s)
      while (class_left[c] > 0 && split_left[s] > 0) {
        ++cell[c][s];
        --class_left[c];
        --split_left[s];
      }

  Rng rng(seed);
  Split out;
  std::array<std::vector<std::size_t>*, 3> dst = {&out.train, &out.val, &out.test};
  for (int c = 0; c < C; ++c) {
    auto idx = by_class[c];
    rng.shuffle(idx.begin(), idx.end());
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s)
      for (std::size_t k = 0; k < cell[c][s]; ++k) dst[s]->push_back(idx[pos++]);
  }
  for (auto* d : dst) std::sort(d->begin(), d->end());
  return out;
}

AugmentParams draw_augment(Rng& rng) {
  AugmentParams p;
  p.angle_deg = rng.uniform(-kMaxRotationDeg, kMaxRotationDeg);
  p.flip = rng.bernoulli(0.5);
  p.elastic_magnitude = kElasticMagnitude;
  p.elastic_sigma = kElasticSigma;
  p.elastic_seed = rng.next();
  return p;
}

Sample apply_augment(const Sample& s, const AugmentParams& p) {
  if (p.is_identity()) return s;
  const int H = static_cast<int>(s.image.rows()), W = static_cast<int>(s.image.cols());
  Image u = Image::Zero(H, W), v = Image::Zero(H, W);
  if (p.elastic_magnitude > 0.0) {
    Rng er(p.elastic_seed);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        u(y, x) = er.uniform(-1.0, 1.0);
        v(y, x) = er.uniform(-1.0, 1.0);
      }
    u = gaussian_blur(u, p.elastic_sigma);
    v = gaussian_blur(v, p.elastic_sigma);
    const double peak = (u.array().square() + v.array().square()).sqrt().maxCoeff();
    if (peak > 0.0) {
      u *= p.elastic_magnitude / peak;
      v *= p.elastic_magnitude / peak;
    }
  }
  const double th = p.angle_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  const double cx = 0.5 * (W - 1), cy = 0.5 * (H - 1);
  Sample out = s;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double qx = x + u(y, x), qy = y + v(y, x);
      if (p.flip) qx = (W - 1) - qx;
      const double dx = qx - cx, dy = qy - cy;
      const double sx = cx + ct * dx - st * dy, sy = cy + st * dx + ct * dy;
      out.image(y, x) = std::clamp(bilinear(s.image, sx, sy, false), 0.0, 1.0);
      out.mask(y, x) = bilinear(s.mask, sx, sy, true) >= 0.5 ? 1.0 : 0.0;
    }
  // A lesion pushed entirely out of frame would break the label/mask pairing.
  if (s.mask.sum() > 0.0 && out.mask.sum() == 0.0) return s;
  return out;
}

// ---------------------------------------------------------------------------

Gray8 parse_pgm(const std::string& b) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError("pgm: " + what + " at byte offset " + std::to_string(pos));
  };
  if (b.size() < 2 || b[0] != 'P' || b[1] != '5') throw fail("missing P5 magic");
  pos = 2;
  auto skip_space = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(b[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    const std::size_t start = pos;
    if (pos < b.size() && !std::isspace(static_cast<unsigned char>(b[pos])) && b[pos] != '#' && start == 2)
      throw fail("expected whitespace after magic");
    skip_space();
    if (pos >= b.size() || !std::isdigit(static_cast<unsigned char>(b[pos])))
      throw fail(std::string("expected ") + what);
    long v = 0;
    while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
      v = v * 10 + (b[pos] - '0');
      if (v > 1 << 20) throw fail(std::string(what) + " too large");
      ++pos;
    }
    return static_cast<int>(v);
  };
  Gray8 img;
  img.width = number("width");
  img.height = number("height");
  const int maxval = number("maxval");
  if (img.width <= 0 || img.height <= 0) throw fail("non-positive dimensions");
  if (maxval < 1 || maxval > 255) throw fail("maxval must lie in 1..255");
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos])))
    throw fail("expected single whitespace before raster");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(img.width) * img.height;
  if (b.size() - pos < need) {
    pos = b.size();
    throw fail("truncated raster (need " + std::to_string(need) + " bytes)");
  }
  img.pixels.resize(need);
  for (std::size_t i = 0; i < need; ++i) {
    const int raw = static_cast<unsigned char>(b[pos + i]);
    img.pixels[i] = static_cast<std::uint8_t>(maxval == 255 ? raw : (raw * 255 + maxval / 2) / maxval);
  }
  return img;
}

std::string encode_pgm(const Gray8& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

namespace {

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

Gray8 read_png(const fs::path& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str()))
    throw FormatError("png: " + path.string() + ": " + im.message);
  im.format = PNG_FORMAT_GRAY;
  Gray8 g;
  g.width = static_cast<int>(im.width);
  g.height = static_cast<int>(im.height);
  g.pixels.resize(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, g.pixels.data(), 0, nullptr)) {
    const std::string msg = im.message;
    png_image_free(&im);
    throw FormatError("png: " + path.string() + ": " + msg);
  }
  return g;
}

void write_png(const fs::path& path, const Gray8& g) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(g.width);
  im.height = static_cast<png_uint_32>(g.height);
  im.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&im, path.c_str(), 0, g.pixels.data(), 0, nullptr))
    throw std::runtime_error("png: cannot write " + path.string() + ": " + im.message);
}

Gray8 to_gray8(const Image& img, bool binary) {
  Gray8 g;
  g.height = static_cast<int>(img.rows());
  g.width = static_cast<int>(img.cols());
  g.pixels.resize(img.size());
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const double v = img.data()[i];
    if (binary) {
      if (v != 0.0 && v != 1.0) throw std::invalid_argument("write_mask: mask must be binary");
      g.pixels[i] = v == 1.0 ? 255 : 0;
    } else {
      g.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return g;
}

}  // namespace

Gray8 read_gray8(const fs::path& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_pgm(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_gray8(const fs::path& path, const Gray8& img) {
  if (lower_ext(path) == ".png") return write_png(path, img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << encode_pgm(img);
}

Image read_mask(const fs::path& path) {
  const Gray8 g = read_gray8(path);
  Image m(g.height, g.width);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) m.data()[i] = g.pixels[i] >= 128 ? 1.0 : 0.0;
  return m;
}

void write_mask(const fs::path& path, const Image& mask) { write_gray8(path, to_gray8(mask, true)); }

Image read_image(const fs::path& path) {
  const Gray8 g = read_gray8(path);
  Image m(g.height, g.width);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) m.data()[i] = g.pixels[i] / 255.0;
  return m;
}

void write_image(const fs::path& path, const Image& image) { write_gray8(path, to_gray8(image, false)); }

Image resize_bilinear(const Image& src, int h, int w) {
  Image out(h, w);
  const double sy = static_cast<double>(src.rows()) / h, sx = static_cast<double>(src.cols()) / w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out(y, x) = bilinear(src, std::max(0.0, (x + 0.5) * sx - 0.5), std::max(0.0, (y + 0.5) * sy - 0.5), false);
  return out;
}

Image resize_nearest(const Image& src, int h, int w) {
  Image out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out(y, x) = src(std::min<Eigen::Index>(src.rows() - 1, (y * src.rows()) / h),
                      std::min<Eigen::Index>(src.cols() - 1, (x * src.cols()) / w));
  return out;
}

void save_dataset(const fs::path& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream labels(dir / "labels.csv");
  if (!labels) throw std::runtime_error("cannot write " + (dir / "labels.csv").string());
  labels << "id,label\n";
  for (const Sample& s : samples) {
    write_image(dir / "images" / (s.id + ".png"), s.image);
    write_mask(dir / "masks" / (s.id + ".png"), s.mask);
    labels << s.id << ',' << label_name(s.label) << '\n';
  }
}

std::vector<Sample> load_dataset(const fs::path& dir, int size) {
  std::ifstream in(dir / "labels.csv");
  if (!in) throw std::runtime_error("dataset: missing " + (dir / "labels.csv").string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("id,label", 0) != 0)
    throw FormatError("dataset: labels.csv must start with header 'id,label'");
  auto find = [&](const char* sub, const std::string& id) -> fs::path {
    for (const char* ext : {".png", ".pgm", ".PNG"}) {
      fs::path p = dir / sub / (id + ext);
      if (fs::exists(p)) return p;
    }
    return {};
  };
  std::vector<Sample> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw FormatError("dataset: labels.csv line " + std::to_string(line_no) + ": expected 'id,label'");
    Sample s;
    s.id = line.substr(0, comma);
    s.label = parse_label(line.substr(comma + 1));
    const fs::path ip = find("images", s.id);
    if (ip.empty()) throw std::runtime_error("dataset: no image for id '" + s.id + "'");
    s.image = read_image(ip);
    const fs::path mp = find("masks", s.id);
    if (!mp.empty()) {
      s.mask = read_mask(mp);
    } else if (s.label == kNormal) {
      s.mask = Image::Zero(s.image.rows(), s.image.cols());
    } else {
      throw std::runtime_error("dataset: no mask for id '" + s.id + "'");
    }
    if (s.mask.rows() != s.image.rows() || s.mask.cols() != s.image.cols())
      s.mask = resize_nearest(s.mask, static_cast<int>(s.image.rows()), static_cast<int>(s.image.cols()));
    if (size > 0 && (s.image.rows() != size || s.image.cols() != size)) {
      s.image = resize_bilinear(s.image, size, size);
      s.mask = resize_nearest(s.mask, size, size);
    }
    if (s.label == kNormal && s.mask.sum() != 0.0)
      throw std::runtime_error("dataset: normal sample '" + s.id + "' has a non-empty mask");
    out.push_back(std::move(s));
  }
  return out;
}

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const int H = static_cast<int>(samples[indices[0]].image.rows());
  const int W = static_cast<int>(samples[indices[0]].image.cols());
  const int B = static_cast<int>(indices.size());
  std::vector<double> img, msk;
  img.reserve(static_cast<std::size_t>(B) * H * W);
  msk.reserve(img.capacity());
  Batch b;
  for (std::size_t i : indices) {
    const Sample& s = samples.at(i);
    if (s.image.rows() != H || s.image.cols() != W)
      throw ShapeError("make_batch: sample '" + s.id + "' has a different size");
    img.insert(img.end(), s.image.data(), s.image.data() + s.image.size());
    msk.insert(msk.end(), s.mask.data(), s.mask.data() + s.mask.size());
    b.labels.push_back(s.label);
  }
  b.images = Tensor::from({B, H, W, 1}, std::move(img));
  b.masks = Tensor::from({B, H, W, 1}, std::move(msk));
  return b;
}

}  // namespace uadi
