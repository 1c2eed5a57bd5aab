#include "uadi/network.hpp"

#include <fstream>
#include <sstream>

namespace uadi {

namespace {

constexpr const char* kCheckpointMagic = "uadi-checkpoint 1";

template <std::size_t N>
std::array<int, N> to_array(const std::vector<int>& v, const std::string& key) {
  if (v.size() != N)
    throw ConfigError("config: key '" + key + "' needs " + std::to_string(N) + " values, got " +
                      std::to_string(v.size()));
  std::array<int, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (input_size <= 0 || input_size % 32 != 0)
    throw ConfigError("model: input_size " + std::to_string(input_size) +
                      " must be a positive multiple of 32 (five stride-2 stages)");
  auto check_widths = [&](auto const& widths, const char* what) {
    for (int w : widths) {
      if (w <= 0) throw ConfigError(std::string("model: ") + what + " widths must be positive");
      if (use_hmsf && w % 8 != 0)
        throw ConfigError(std::string("model: ") + what + " width " + std::to_string(w) +
                          " must be divisible by 8 when use_hmsf is set");
    }
  };
  check_widths(encoder_channels, "encoder");
  check_widths(decoder_channels, "decoder");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (clf_width <= 0) throw ConfigError("model: clf_width must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
  if (use_upa && !use_tim)
    throw ConfigError("model: use_upa requires use_tim (UPA weights the TIM-enhanced features)");
}

void ModelConfig::write(ConfigMap& cfg, const std::string& p) const {
  cfg.set(p + "input_size", std::to_string(input_size));
  cfg.set(p + "encoder_channels", join_ints({encoder_channels.begin(), encoder_channels.end()}));
  cfg.set(p + "decoder_channels", join_ints({decoder_channels.begin(), decoder_channels.end()}));
  cfg.set(p + "num_classes", std::to_string(num_classes));
  cfg.set(p + "clf_width", std::to_string(clf_width));
  cfg.set(p + "use_hmsf", use_hmsf ? "true" : "false");
  cfg.set(p + "use_tim", use_tim ? "true" : "false");
  cfg.set(p + "use_upa", use_upa ? "true" : "false");
  cfg.set(p + "dropout", format_double(dropout));
  cfg.set(p + "seed", std::to_string(seed));
  cfg.set(p + "zero_init_tim_gates", zero_init_tim_gates ? "true" : "false");
}

ModelConfig ModelConfig::read(const ConfigMap& cfg, const std::string& p) {
  ModelConfig m;
  m.input_size = static_cast<int>(cfg.get_int(p + "input_size", m.input_size));
  m.encoder_channels = to_array<kEncoderStages>(
      cfg.get_ints(p + "encoder_channels", {m.encoder_channels.begin(), m.encoder_channels.end()}),
      p + "encoder_channels");
  m.decoder_channels = to_array<kDecoderLevels>(
      cfg.get_ints(p + "decoder_channels", {m.decoder_channels.begin(), m.decoder_channels.end()}),
      p + "decoder_channels");
  m.num_classes = static_cast<int>(cfg.get_int(p + "num_classes", m.num_classes));
  m.clf_width = static_cast<int>(cfg.get_int(p + "clf_width", m.clf_width));
  m.use_hmsf = cfg.get_bool(p + "use_hmsf", m.use_hmsf);
  m.use_tim = cfg.get_bool(p + "use_tim", m.use_tim);
  m.use_upa = cfg.get_bool(p + "use_upa", m.use_upa);
  m.dropout = cfg.get_double(p + "dropout", m.dropout);
  m.seed = static_cast<std::uint64_t>(cfg.get_int(p + "seed", static_cast<long long>(m.seed)));
  m.zero_init_tim_gates = cfg.get_bool(p + "zero_init_tim_gates", m.zero_init_tim_gates);
  return m;
}

// ---------------------------------------------------------------------------

MultiTaskNet::MultiTaskNet(const ModelConfig& cfg) : cfg_(cfg), dropout_rng_(Rng::stream(cfg.seed, 1)) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const auto& enc = cfg_.encoder_channels;
  const auto& dec = cfg_.decoder_channels;

  int in = 1;
  for (int s = 0; s < kEncoderStages; ++s) {
    encoder_.push_back({ConvBnRelu(in, enc[s], rng, 2), ConvBnRelu(enc[s], enc[s], rng)});
    in = enc[s];
  }
  if (cfg_.use_hmsf)
    for (int s = 0; s < kEncoderStages; ++s) hmsf_.emplace_back(enc[s], rng);

  for (int l = 1; l <= kDecoderLevels; ++l)
    clf_init_.emplace_back(enc[skip_stage_for_level(l)], cfg_.clf_width, rng);

  int prev = enc[kEncoderStages - 1];
  for (int l = 1; l <= kDecoderLevels; ++l) {
    const int c = dec[l - 1];
    const int skip = enc[skip_stage_for_level(l)];
    decoder_.push_back({ConvTranspose2x2(prev, c, rng), AttentionGateParams(skip, c, rng),
                        ConvBnRelu(c + skip, c, rng), ConvBnRelu(c, c, rng)});
    prev = c;
  }
  if (cfg_.use_tim) {
    for (int l = 1; l <= kDecoderLevels; ++l) {
      tim_.emplace_back(dec[l - 1], cfg_.clf_width, rng);
      if (cfg_.zero_init_tim_gates) tim_.back().zero_gates();
    }
  }
  if (cfg_.use_upa)
    for (int l = 1; l <= kDecoderLevels; ++l) upa_.emplace_back(rng);

  seg_head_ = Conv2d(1, dec[kDecoderLevels - 1], 1, rng);
  clf_hidden_ = Dense(enc[kEncoderStages - 1] + kDecoderLevels * cfg_.clf_width, 256, rng);
  clf_out_ = Dense(256, cfg_.num_classes, rng);
}

std::vector<Tensor> MultiTaskNet::encoder_forward(const Tensor& image) {
  if (image.rank() != 4 || image.dim(3) != 1 || image.dim(1) != image.dim(2))
    throw ShapeError("encoder_forward: expected square (B,H,W,1) image, got " + shape_str(image.shape()));
  if (image.dim(1) % 32 != 0)
    throw ShapeError("encoder_forward: image size " + std::to_string(image.dim(1)) +
                     " is not divisible by 32");
  std::vector<Tensor> feats;
  Tensor x = image;
  for (int s = 0; s < kEncoderStages; ++s) {
    x = encoder_[s].conv(encoder_[s].down(x, training_), training_);
    feats.push_back(cfg_.use_hmsf ? hmsf_forward(x, hmsf_[s]).y : x);
  }
  return feats;
}

DecoderLevelOutput MultiTaskNet::decoder_level_forward(int level, const Tensor& prev, const Tensor& skip,
                                                       const Tensor& f_clf, const ForwardOptions& opts) {
  DecoderLevel& dl = decoder_.at(level - 1);
  const Tensor up = dl.up(prev);
  const Tensor gated = attention_gate(skip, up, dl.gate).gated;
  Tensor d = dl.conv2(dl.conv1(concat({up, gated}, 3), training_), training_);
  if (opts.decoder_hook) d = opts.decoder_hook(level, d);

  DecoderLevelOutput out;
  LevelDiagnostics& diag = out.diagnostics;
  diag.d = d;
  diag.f_clf = f_clf;
  if (cfg_.use_tim) {
    TimLevelParams& tim = tim_[level - 1];
    diag.f_enh = tim_seg_to_clf(d, f_clf, tim, training_);
    diag.d_enh = tim_clf_to_seg(d, f_clf, tim);
    if (cfg_.use_upa) {
      UpaOutput fused = upa_forward(d, diag.d_enh, f_clf, diag.f_enh, upa_[level - 1], training_);
      diag.d_final = fused.d_final;
      diag.f_final = fused.f_final;
      diag.omega = fused.omega;
    } else {
      diag.d_final = diag.d_enh;
      diag.f_final = diag.f_enh;
    }
  } else {
    diag.d_enh = diag.d_final = d;
    diag.f_enh = diag.f_final = f_clf;
  }
  out.d_final = diag.d_final;
  out.f_final = diag.f_final;
  return out;
}

Tensor MultiTaskNet::classification_head_forward(const Tensor& deepest, const std::vector<Tensor>& streams,
                                                 bool zero_deepest) {
  if (streams.size() != static_cast<std::size_t>(kDecoderLevels))
    throw ShapeError("classification_head_forward: expected " + std::to_string(kDecoderLevels) +
                     " classification streams, got " + std::to_string(streams.size()));
  for (const auto& s : streams)
    if (!s.defined()) throw ShapeError("classification_head_forward: missing classification stream");
  Tensor pooled = global_avg_pool(deepest);
  if (zero_deepest) pooled = Tensor::zeros(pooled.shape());
  std::vector<Tensor> parts{pooled};
  parts.insert(parts.end(), streams.begin(), streams.end());
  const Tensor h = relu(clf_hidden_(concat(parts, 1)));
  return clf_out_(dropout(h, cfg_.dropout, dropout_rng_, training_));
}

ForwardOutput MultiTaskNet::forward(const Tensor& image, const ForwardOptions& opts) {
  const std::vector<Tensor> feats = encoder_forward(image);
  ForwardOutput out;
  std::vector<Tensor> streams;
  Tensor x = feats.back();
  for (int l = 1; l <= kDecoderLevels; ++l) {
    const Tensor& skip = feats[skip_stage_for_level(l)];
    Tensor f = clf_init_[l - 1](global_avg_pool(skip));
    if (opts.clf_stream_hook) f = opts.clf_stream_hook(l, f);
    DecoderLevelOutput lvl = decoder_level_forward(l, x, skip, f, opts);
    x = lvl.d_final;
    streams.push_back(lvl.f_final);
    if (opts.diagnostics) out.levels.push_back(std::move(lvl.diagnostics));
  }
  out.seg_logits = upsample_bilinear(seg_head_(x), 2);
  out.clf_logits = classification_head_forward(feats.back(), streams, opts.zero_deepest_clf_path);
  return out;
}

ParamList MultiTaskNet::named_tensors() const {
  ParamList out;
  for (int s = 0; s < kEncoderStages; ++s) {
    const std::string p = "encoder." + std::to_string(s);
    encoder_[s].down.collect(p + ".down", out);
    encoder_[s].conv.collect(p + ".conv", out);
  }
  for (std::size_t s = 0; s < hmsf_.size(); ++s) hmsf_[s].collect("hmsf." + std::to_string(s), out);
  for (int l = 1; l <= kDecoderLevels; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    clf_init_[l - 1].collect(p + ".clf_init", out);
    decoder_[l - 1].up.collect(p + ".up", out);
    decoder_[l - 1].gate.collect(p + ".gate", out);
    decoder_[l - 1].conv1.collect(p + ".conv1", out);
    decoder_[l - 1].conv2.collect(p + ".conv2", out);
    if (!tim_.empty()) tim_[l - 1].collect(p + ".tim", out);
    if (!upa_.empty()) upa_[l - 1].collect(p + ".upa", out);
  }
  seg_head_.collect("seg_head", out);
  clf_hidden_.collect("clf_head.hidden", out);
  clf_out_.collect("clf_head.out", out);
  return out;
}

ParamList MultiTaskNet::parameters() const {
  ParamList all = named_tensors();
  ParamList out;
  for (auto& nt : all)
    if (nt.trainable) out.push_back(std::move(nt));
  return out;
}

std::size_t MultiTaskNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

// ---------------------------------------------------------------------------

std::string checkpoint_text(const MultiTaskNet& model) {
  std::ostringstream os;
  os << kCheckpointMagic << "\n[config]\n";
  ConfigMap cfg;
  model.config().write(cfg);
  os << cfg.to_text() << "[tensors]\n";
  for (const auto& nt : model.named_tensors()) {
    os << "tensor " << nt.name << '\n';
    write_tensor(os, nt.tensor);
  }
  return os.str();
}

void save_checkpoint(const MultiTaskNet& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
    out << checkpoint_text(model);
  }
  std::filesystem::rename(tmp, path);
}

MultiTaskNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: file not found: " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kCheckpointMagic) throw std::runtime_error("checkpoint: bad header in " + path.string());
  std::getline(in, line);
  if (line != "[config]") throw std::runtime_error("checkpoint: missing [config] section");
  std::string cfg_text;
  while (std::getline(in, line) && line != "[tensors]") cfg_text += line + "\n";
  MultiTaskNet model(ModelConfig::read(ConfigMap::parse(cfg_text)));

  ParamList tensors = model.named_tensors();
  std::size_t loaded = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("tensor ", 0) != 0) throw std::runtime_error("checkpoint: unexpected line: " + line);
    const std::string name = line.substr(7);
    const Tensor t = read_tensor(in);
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& nt) { return nt.name == name; });
    if (it == tensors.end()) throw std::runtime_error("checkpoint: unknown tensor " + name);
    if (it->tensor.shape() != t.shape())
      throw ShapeError("checkpoint: tensor " + name + " has shape " + shape_str(t.shape()) +
                       ", model expects " + shape_str(it->tensor.shape()));
    std::copy(t.data().begin(), t.data().end(), it->tensor.data().begin());
    ++loaded;
  }
  if (loaded != tensors.size())
    throw std::runtime_error("checkpoint: expected " + std::to_string(tensors.size()) + " tensors, found " +
                             std::to_string(loaded));
  return model;
}

void copy_weights(const MultiTaskNet& src, MultiTaskNet& dst) {
  const ParamList a = src.named_tensors();
  ParamList b = dst.named_tensors();
  if (a.size() != b.size()) throw std::invalid_argument("copy_weights: models differ in structure");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape())
      throw std::invalid_argument("copy_weights: mismatch at " + a[i].name);
    std::copy(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin());
  }
}

}  // namespace uadi
