#include "uadi/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>
#include <sstream>

namespace uadi {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw ConfigError("train: lr0 must be positive");
  if (!(lr_min >= 0.0 && lr_min < lr0)) throw ConfigError("train: lr_min must satisfy 0 <= lr_min < lr0");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  model.validate();
  loss.validate();
}

void TrainConfig::write(ConfigMap& cfg) const {
  cfg.set("train.epochs", std::to_string(epochs));
  cfg.set("train.batch_size", std::to_string(batch_size));
  cfg.set("train.lr0", format_double(lr0));
  cfg.set("train.lr_min", format_double(lr_min));
  cfg.set("train.patience", std::to_string(patience));
  cfg.set("train.seed", std::to_string(seed));
  cfg.set("train.augment", augment ? "true" : "false");
  model.write(cfg);
  loss.write(cfg);
}

TrainConfig TrainConfig::read(const ConfigMap& cfg) {
  TrainConfig c;
  c.epochs = static_cast<int>(cfg.get_int("train.epochs", c.epochs));
  c.batch_size = static_cast<int>(cfg.get_int("train.batch_size", c.batch_size));
  c.lr0 = cfg.get_double("train.lr0", c.lr0);
  c.lr_min = cfg.get_double("train.lr_min", c.lr_min);
  c.patience = static_cast<int>(cfg.get_int("train.patience", c.patience));
  c.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", static_cast<long long>(c.seed)));
  c.augment = cfg.get_bool("train.augment", c.augment);
  c.model = ModelConfig::read(cfg);
  c.loss = LossConfig::read(cfg);
  return c;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw std::out_of_range("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(cfg.epochs) + ")");
  if (cfg.epochs == 1) return cfg.lr0;
  const double c = std::cos(std::numbers::pi * epoch / (cfg.epochs - 1));
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + c);
}

// ---------------------------------------------------------------------------

Adam::Adam(ParamList params, double beta1, double beta2, double eps)
    : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.node()->grad)
      if (!std::isfinite(g)) throw NonFiniteError("adam: non-finite gradient in " + p.name + "; step rejected");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& w = params_[i].tensor;
    if (!w.has_grad()) continue;
    const Buffer& g = w.node()->grad;
    auto val = w.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < g.size(); ++k) {
      m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
      val[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

// ---------------------------------------------------------------------------

EvalResult evaluate(MultiTaskNet& model, const std::vector<Sample>& samples,
                    const std::vector<std::size_t>& indices, int batch_size, const LossConfig& loss) {
  if (indices.empty()) throw std::invalid_argument("evaluate: empty split");
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  EvalResult r;
  std::vector<double> seg_prob, seg_true;
  std::vector<int> labels;
  std::size_t pixels = 0;
  for (std::size_t off = 0; off < indices.size(); off += batch_size) {
    const std::vector<std::size_t> idx(indices.begin() + off,
                                       indices.begin() + std::min(indices.size(), off + batch_size));
    const Batch b = make_batch(samples, idx);
    const ForwardOutput out = model.forward(b.images);
    const TotalLoss tl = total_loss(out.seg_logits, out.clf_logits, b.masks, b.labels, loss);
    const double w = static_cast<double>(idx.size());
    r.loss.total += w * tl.parts.total;
    r.loss.seg += w * tl.parts.seg;
    r.loss.focal_tversky += w * tl.parts.focal_tversky;
    r.loss.boundary += w * tl.parts.boundary;
    r.loss.texture += w * tl.parts.texture;
    r.loss.clf += w * tl.parts.clf;
    const Tensor p = sigmoid(out.seg_logits);
    seg_prob.insert(seg_prob.end(), p.data().begin(), p.data().end());
    seg_true.insert(seg_true.end(), b.masks.data().begin(), b.masks.data().end());
    const Tensor q = softmax(out.clf_logits);
    r.probs.insert(r.probs.end(), q.data().begin(), q.data().end());
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    pixels = b.masks.numel() / idx.size();
  }
  const double n = static_cast<double>(indices.size());
  r.loss.total /= n;
  r.loss.seg /= n;
  r.loss.focal_tversky /= n;
  r.loss.boundary /= n;
  r.loss.texture /= n;
  r.loss.clf /= n;
  r.seg = seg_metrics(seg_prob, seg_true, pixels);
  r.clf = clf_metrics(r.probs, labels, model.config().num_classes);
  model.set_training(was_training);
  return r;
}

std::string history_csv_line(const HistoryRow& r) {
  std::ostringstream os;
  os << r.epoch << ',' << format_double(r.lr) << ',' << format_double(r.train_loss.total) << ','
     << format_double(r.train_loss.focal_tversky) << ',' << format_double(r.train_loss.boundary) << ','
     << format_double(r.train_loss.texture) << ',' << format_double(r.train_loss.clf) << ','
     << format_double(r.val_iou) << ',' << format_double(r.val_dice) << ',' << format_double(r.val_acc) << ','
     << format_double(r.val_f1) << ',' << format_double(r.val_auc);
  return os.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

namespace {

using Snapshot = std::vector<std::vector<double>>;

Snapshot snapshot(const MultiTaskNet& model) {
  Snapshot s;
  for (const auto& nt : model.named_tensors()) s.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());
  return s;
}

void restore(MultiTaskNet& model, const Snapshot& s) {
  ParamList all = model.named_tensors();
  for (std::size_t i = 0; i < all.size(); ++i) std::copy(s[i].begin(), s[i].end(), all[i].tensor.data().begin());
}

}  // namespace

TrainResult train(MultiTaskNet& model, const std::vector<Sample>& samples, const Split& split,
                  const TrainConfig& cfg, const fs::path& out_dir, const TrainHooks& hooks) {
  cfg.validate();
  if (split.train.empty() || split.val.empty()) throw std::invalid_argument("train: empty train or validation split");
  Adam opt(model.parameters());
  Rng order_rng(Rng::splitmix64(cfg.seed ^ 0x6f72646572ULL));
  TrainResult res;
  res.history_csv = std::string(kHistoryHeader) + "\n";
  res.best_score = -std::numeric_limits<double>::infinity();
  Snapshot best;
  int wait = 0;
  const fs::path ckpt = out_dir.empty() ? fs::path() : out_dir / "best.ckpt";
  auto flush_history = [&] {
    if (!out_dir.empty()) write_text_file(out_dir / "history.csv", res.history_csv);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    std::vector<std::size_t> order = split.train;
    order_rng.shuffle(order.begin(), order.end());

    std::vector<Sample> epoch_samples;
    std::vector<std::size_t> local(order.size());
    epoch_samples.resize(order.size());
    parallel_for(order.size(), 0, [&](std::size_t i) {
      const Sample& s = samples.at(order[i]);
      if (cfg.augment) {
        Rng rng = Rng::stream(Rng::splitmix64(cfg.seed) + static_cast<std::uint64_t>(epoch), order[i]);
        epoch_samples[i] = augment(s, rng);
      } else {
        epoch_samples[i] = s;
      }
      local[i] = i;
    });

    HistoryRow row;
    row.epoch = epoch;
    row.lr = lr;
    model.set_training(true);
    for (std::size_t off = 0; off < local.size(); off += cfg.batch_size) {
      const std::vector<std::size_t> idx(local.begin() + off,
                                         local.begin() + std::min(local.size(), off + cfg.batch_size));
      const Batch b = make_batch(epoch_samples, idx);
      const ForwardOutput out = model.forward(b.images);
      const TotalLoss tl = total_loss(out.seg_logits, out.clf_logits, b.masks, b.labels, cfg.loss);
      auto diverge = [&](const std::string& why) {
        flush_history();
        throw DivergenceError("train: " + why + " at epoch " + std::to_string(epoch) +
                              (ckpt.empty() || res.best_epoch < 0 ? std::string()
                                                                  : "; last good checkpoint kept at " + ckpt.string()));
      };
      if (!std::isfinite(tl.parts.total)) diverge("non-finite loss");
      opt.zero_grad();
      backward(tl.total);
      try {
        opt.step(lr);
      } catch (const NonFiniteError& e) {
        diverge(e.what());
      }
      const double w = static_cast<double>(idx.size());
      row.train_loss.total += w * tl.parts.total;
      row.train_loss.seg += w * tl.parts.seg;
      row.train_loss.focal_tversky += w * tl.parts.focal_tversky;
      row.train_loss.boundary += w * tl.parts.boundary;
      row.train_loss.texture += w * tl.parts.texture;
      row.train_loss.clf += w * tl.parts.clf;
    }
    opt.zero_grad();
    const double n = static_cast<double>(local.size());
    row.train_loss.total /= n;
    row.train_loss.seg /= n;
    row.train_loss.focal_tversky /= n;
    row.train_loss.boundary /= n;
    row.train_loss.texture /= n;
    row.train_loss.clf /= n;

    const EvalResult val = evaluate(model, samples, split.val, cfg.batch_size, cfg.loss);
    row.val_iou = val.seg.iou;
    row.val_dice = val.seg.dice;
    row.val_acc = val.clf.accuracy;
    row.val_f1 = val.clf.macro_f1;
    row.val_auc = val.clf.macro_auc;
    row.score = hooks.score ? hooks.score(epoch, val) : 0.5 * (val.seg.dice + val.clf.accuracy);

    if (row.score > res.best_score) {
      res.best_score = row.score;
      res.best_epoch = epoch;
      best = snapshot(model);
      wait = 0;
      if (!ckpt.empty()) save_checkpoint(model, ckpt);
    } else {
      ++wait;
    }
    res.history.push_back(row);
    res.history_csv += history_csv_line(row) + "\n";
    flush_history();
    if (hooks.on_epoch) hooks.on_epoch(row);
    if (wait >= cfg.patience) break;
    if (hooks.stop && hooks.stop(row)) break;
  }
  if (!best.empty()) restore(model, best);
  model.set_training(false);
  return res;
}

// ---------------------------------------------------------------------------

std::vector<ModuleToggles> default_ablation_grid() {
  return {{"none", false, false, false},
          {"hmsf", true, false, false},
          {"tim", false, true, false},
          {"tim_upa", false, true, true},
          {"hmsf_tim_upa", true, true, true}};
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << kAblationHeader << '\n';
  for (const auto& r : rows) {
    const EvalResult& e = r.test;
    os << r.toggles.name << ',' << r.parameter_count << ',' << format_double(e.seg.iou) << ','
       << format_double(e.seg.dice) << ',' << format_double(e.seg.sensitivity) << ','
       << format_double(e.seg.precision) << ',' << format_double(e.clf.accuracy) << ','
       << format_double(e.clf.macro_f1) << ',' << format_double(e.clf.macro_auc) << ','
       << format_double(e.clf.macro_precision) << '\n';
  }
  return os.str();
}

std::vector<AblationRow> ablation_run(const TrainConfig& base, const std::vector<Sample>& samples,
                                      const Split& split, const std::vector<ModuleToggles>& grid,
                                      const fs::path& out_dir) {
  std::vector<AblationRow> rows;
  for (const ModuleToggles& t : grid) {
    if (t.upa && !t.tim) {
      std::cerr << "warning: ablation: skipping '" << t.name << "' (UPA requires TIM)\n";
      continue;
    }
    TrainConfig cfg = base;
    cfg.model.use_hmsf = t.hmsf;
    cfg.model.use_tim = t.tim;
    cfg.model.use_upa = t.upa;
    MultiTaskNet model(cfg.model);
    const TrainResult tr = train(model, samples, split, cfg, out_dir.empty() ? fs::path() : out_dir / t.name);
    AblationRow row;
    row.toggles = t;
    row.parameter_count = model.parameter_count();
    row.best_epoch = tr.best_epoch;
    row.val = evaluate(model, samples, split.val, cfg.batch_size, cfg.loss);
    row.test = evaluate(model, samples, split.test.empty() ? split.val : split.test, cfg.batch_size, cfg.loss);
    rows.push_back(std::move(row));
    if (!out_dir.empty()) write_text_file(out_dir / "ablation.csv", ablation_csv(rows));
  }
  return rows;
}

// ---------------------------------------------------------------------------

namespace {

double sample_norm(const Tensor& t, int b, int B) {
  const std::size_t n = t.numel() / B;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += t[b * n + i] * t[b * n + i];
  return std::sqrt(s);
}

double relative_displacement(const Tensor& base, const Tensor& enh, int b, int B) {
  const std::size_t n = base.numel() / B;
  double d = 0.0, r = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = enh[b * n + i] - base[b * n + i];
    d += diff * diff;
  }
  r = sample_norm(base, b, B);
  return r > 0.0 ? std::sqrt(d) / r : std::sqrt(d);
}

}  // namespace

DiagResult diagnose(MultiTaskNet& model, const std::vector<Sample>& samples,
                    const std::vector<std::size_t>& indices, int batch_size) {
  if (!model.config().use_tim) throw std::invalid_argument("diagnose: model was built without TIM");
  if (indices.empty()) throw std::invalid_argument("diagnose: empty split");
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  std::array<std::vector<DiagRecord>, kDecoderLevels> per_level;
  ForwardOptions opts;
  opts.diagnostics = true;
  for (std::size_t off = 0; off < indices.size(); off += batch_size) {
    const std::vector<std::size_t> idx(indices.begin() + off,
                                       indices.begin() + std::min(indices.size(), off + batch_size));
    const Batch batch = make_batch(samples, idx);
    const ForwardOutput out = model.forward(batch.images, opts);
    const int B = static_cast<int>(idx.size());
    for (int l = 0; l < kDecoderLevels; ++l) {
      const LevelDiagnostics& d = out.levels[l];
      for (int b = 0; b < B; ++b) {
        DiagRecord rec;
        rec.sample = idx[b];
        rec.level = l + 1;
        rec.disp_seg2clf = relative_displacement(d.f_clf, d.f_enh, b, B);
        rec.disp_clf2seg = relative_displacement(d.d, d.d_enh, b, B);
        if (d.omega.defined()) {
          rec.omega_seg = d.omega[2 * b];
          rec.omega_clf = d.omega[2 * b + 1];
        }
        per_level[l].push_back(rec);
      }
    }
  }
  DiagResult res;
  for (int l = 0; l < kDecoderLevels; ++l) {
    double a = 0.0, c = 0.0;
    for (const auto& r : per_level[l]) {
      a += r.disp_seg2clf;
      c += r.disp_clf2seg;
    }
    res.mean_seg2clf[l] = a / per_level[l].size();
    res.mean_clf2seg[l] = c / per_level[l].size();
    res.records.insert(res.records.end(), per_level[l].begin(), per_level[l].end());
  }
  model.set_training(was_training);
  return res;
}

std::string displacement_csv(const DiagResult& d) {
  std::ostringstream os;
  os << "level,sample,disp_seg2clf,disp_clf2seg\n";
  for (const auto& r : d.records)
    os << r.level << ',' << r.sample << ',' << format_double(r.disp_seg2clf) << ','
       << format_double(r.disp_clf2seg) << '\n';
  return os.str();
}

std::string omega_csv(const DiagResult& d) {
  std::ostringstream os;
  os << "level,sample,omega_seg,omega_clf\n";
  for (const auto& r : d.records)
    if (r.omega_seg)
      os << r.level << ',' << r.sample << ',' << format_double(*r.omega_seg) << ','
         << format_double(*r.omega_clf) << '\n';
  return os.str();
}

}  // namespace uadi
