#include "uadi/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "uadi/gradcheck_suite.hpp"
#include "uadi/manifest.hpp"

namespace uadi {

namespace fs = std::filesystem;

ConfigMap preset_config(const std::string& size) {
  ConfigMap c;
  if (size == "tiny") {
    c.set("model.input_size", "32");
    c.set("model.encoder_channels", "8,8,8,8,8");
    c.set("model.decoder_channels", "8,8,8,8");
    c.set("model.clf_width", "16");
    c.set("train.epochs", "3");
    c.set("train.batch_size", "4");
    c.set("data.n_samples", "40");
    c.set("data.image_size", "32");
    c.set("data.lesion_size_range", "3,7");
  } else if (size == "small") {
    c.set("model.input_size", "64");
    c.set("model.encoder_channels", "16,32,64,128,256");
    c.set("model.decoder_channels", "128,64,32,16");
    c.set("model.clf_width", "256");
    c.set("train.epochs", "30");
    c.set("train.batch_size", "8");
    c.set("data.n_samples", "300");
    c.set("data.image_size", "64");
    c.set("data.lesion_size_range", "6,14");
  } else if (size == "paper") {
    c.set("model.input_size", "224");
    c.set("model.encoder_channels", "32,64,128,256,512");
    c.set("model.decoder_channels", "256,128,64,32");
    c.set("model.clf_width", "256");
    c.set("train.epochs", "100");
    c.set("train.batch_size", "24");
    c.set("data.n_samples", "780");
    c.set("data.image_size", "224");
    c.set("data.lesion_size_range", "20,50");
  } else {
    throw ConfigError("unknown --size '" + size + "' (expected tiny, small or paper)");
  }
  return c;
}

DatasetSpec dataset_spec_from_config(const ConfigMap& cfg) {
  DatasetSpec s;
  s.n_samples = static_cast<int>(cfg.get_int("data.n_samples", s.n_samples));
  s.image_size = static_cast<int>(cfg.get_int("data.image_size", cfg.get_int("model.input_size", s.image_size)));
  const auto props = cfg.get_doubles("data.class_proportions",
                                     {s.class_proportions.begin(), s.class_proportions.end()});
  if (props.size() != 3) throw ConfigError("config: data.class_proportions needs 3 values (normal,benign,malignant)");
  std::copy(props.begin(), props.end(), s.class_proportions.begin());
  const auto range = cfg.get_doubles("data.lesion_size_range",
                                     {s.lesion_size_range_px.begin(), s.lesion_size_range_px.end()});
  if (range.size() != 2) throw ConfigError("config: data.lesion_size_range needs 2 values (min,max)");
  std::copy(range.begin(), range.end(), s.lesion_size_range_px.begin());
  s.speckle_strength = cfg.get_double("data.speckle_strength", s.speckle_strength);
  s.shadow_probability = cfg.get_double("data.shadow_probability", s.shadow_probability);
  s.seed = static_cast<std::uint64_t>(cfg.get_int("data.seed", static_cast<long long>(s.seed)));
  return s;
}

void write_dataset_spec(const DatasetSpec& s, ConfigMap& cfg) {
  cfg.set("data.n_samples", std::to_string(s.n_samples));
  cfg.set("data.image_size", std::to_string(s.image_size));
  cfg.set("data.class_proportions", format_double(s.class_proportions[0]) + "," +
                                        format_double(s.class_proportions[1]) + "," +
                                        format_double(s.class_proportions[2]));
  cfg.set("data.lesion_size_range",
          format_double(s.lesion_size_range_px[0]) + "," + format_double(s.lesion_size_range_px[1]));
  cfg.set("data.speckle_strength", format_double(s.speckle_strength));
  cfg.set("data.shadow_probability", format_double(s.shadow_probability));
  cfg.set("data.seed", std::to_string(s.seed));
}

std::vector<std::string> known_config_keys() {
  ConfigMap c;
  TrainConfig{}.write(c);
  write_dataset_spec(DatasetSpec{}, c);
  c.set("data.dir", "");
  std::vector<std::string> keys;
  for (const auto& [k, v] : c.entries()) keys.push_back(k);
  return keys;
}

ConfigMap resolve_config(const ConfigSources& src) {
  ConfigMap cfg = preset_config(src.size);
  if (!src.config_path.empty()) cfg.merge(ConfigMap::load(src.config_path));
  for (const std::string& kv : src.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (src.seed) {
    const std::string s = std::to_string(*src.seed);
    cfg.set("train.seed", s);
    cfg.set("model.seed", s);
    cfg.set("data.seed", s);
  }
  const auto known = known_config_keys();
  for (const auto& [k, v] : cfg.entries())
    if (!std::binary_search(known.begin(), known.end(), k)) throw ConfigError("config: unknown key '" + k + "'");
  // The generator follows the model's input size unless told otherwise.
  if (!cfg.contains("data.image_size") && cfg.contains("model.input_size"))
    cfg.set("data.image_size", *cfg.get("model.input_size"));
  return cfg;
}

LoadedData load_data(const ConfigMap& cfg) {
  LoadedData d;
  const DatasetSpec spec = dataset_spec_from_config(cfg);
  const std::string dir = cfg.get("data.dir").value_or("");
  if (!dir.empty()) {
    d.samples = load_dataset(dir, static_cast<int>(cfg.get_int("model.input_size", 64)));
  } else {
    d.samples = generate_dataset(spec);
  }
  std::vector<int> labels;
  for (const auto& s : d.samples) labels.push_back(s.label);
  d.split = split_dataset(labels, {0.70, 0.15, 0.15}, spec.seed);
  return d;
}

namespace {

struct Common {
  ConfigSources src;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->footer("Environment: UADI_THREADS caps the number of data-producer threads.");
  cmd->add_option("--config", c.src.config_path, "Config file (key = value lines)");
  c.seed_opt = cmd->add_option("--seed", c.seed, "Seed for data, model and training (overrides the config)");
  auto* o = cmd->add_option("--out", c.out, "Output directory");
  if (out_required) o->required();
  cmd->add_option("--size", c.src.size, "Preset bundle")
      ->check(CLI::IsMember({"tiny", "small", "paper"}))
      ->capture_default_str();
  cmd->add_option("--set", c.src.overrides, "Override a config key (key=value, repeatable)");
}

ConfigMap resolve(Common& c) {
  if (c.seed_opt->count() > 0) c.src.seed = c.seed;
  return resolve_config(c.src);
}

struct RunRecord {
  RunManifest m;
  std::string config_text;

  RunRecord(const std::string& command, const Common& c, const ConfigMap& cfg) {
    m.command = command;
    m.config_path = c.src.config_path;
    m.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 0));
    m.out_dir = c.out;
    m.started = utc_timestamp();
    config_text = cfg.to_text();
    m.effective_config_hash = git_blob_hash(config_text);
    if (!c.src.config_path.empty()) {
      std::ifstream in(c.src.config_path, std::ios::binary);
      std::ostringstream ss;
      ss << in.rdbuf();
      m.config_hash = git_blob_hash(ss.str());
    } else {
      m.config_hash = m.effective_config_hash;
    }
  }
  void finish() {
    if (m.out_dir.empty()) return;
    write_text_file(fs::path(m.out_dir) / "config.cfg", config_text);
    m.finished = utc_timestamp();
    m.write();
  }
};

std::string fixed(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string split_csv(const LoadedData& d) {
  std::vector<std::string> which(d.samples.size());
  for (auto i : d.split.train) which[i] = "train";
  for (auto i : d.split.val) which[i] = "val";
  for (auto i : d.split.test) which[i] = "test";
  std::string s = "id,split\n";
  for (std::size_t i = 0; i < d.samples.size(); ++i) s += d.samples[i].id + "," + which[i] + "\n";
  return s;
}

const std::vector<std::size_t>& pick_split(const Split& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  return s.test;
}

}  // namespace

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task breast-ultrasound segmentation/classification toolkit", "uadi"};
  app.require_subcommand(1);
  app.footer("Environment: UADI_THREADS caps the number of data-producer threads (default: hardware concurrency).");

  Common gen, tr, ev, ab, dg, gc;
  std::string ev_ckpt, ev_split = "test", dg_ckpt, dg_split = "test";

  auto* c_gen = app.add_subcommand("gen-data", "Write a synthetic dataset (images/, masks/, labels.csv)");
  add_common(c_gen, gen, true);
  auto* c_train = app.add_subcommand("train", "Train a model; writes history.csv and best.ckpt");
  add_common(c_train, tr, true);
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split; writes metrics.csv");
  add_common(c_eval, ev, true);
  c_eval->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  c_eval->add_option("--split", ev_split, "Split to evaluate")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  auto* c_ablate = app.add_subcommand("ablate", "Run the five-row module ablation; writes ablation.csv");
  add_common(c_ablate, ab, true);
  auto* c_diag = app.add_subcommand("diagnose", "Cross-task displacement and UPA weight CSVs for a checkpoint");
  add_common(c_diag, dg, true);
  c_diag->add_option("--checkpoint", dg_ckpt, "Checkpoint file (model built with TIM)")->required();
  c_diag->add_option("--split", dg_split, "Split to analyse")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite; prints max relative errors");
  gc.src.size = "tiny";
  add_common(c_gc, gc, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (c_gen->parsed()) {
      const ConfigMap cfg = resolve(gen);
      RunRecord rec("gen-data", gen, cfg);
      const DatasetSpec spec = dataset_spec_from_config(cfg);
      const auto samples = generate_dataset(spec);
      save_dataset(gen.out, samples);
      rec.finish();
      out << "wrote " << samples.size() << " samples to " << gen.out << "\n";
    } else if (c_train->parsed()) {
      const ConfigMap cfg = resolve(tr);
      const TrainConfig tc = TrainConfig::read(cfg);
      tc.validate();
      RunRecord rec("train", tr, cfg);
      const LoadedData data = load_data(cfg);
      write_text_file(fs::path(tr.out) / "split.csv", split_csv(data));
      MultiTaskNet model(tc.model);
      TrainHooks hooks;
      hooks.on_epoch = [&](const HistoryRow& r) {
        out << "epoch " << r.epoch << " lr " << format_double(r.lr) << " loss " << fixed(r.train_loss.total)
            << " val_dice " << fixed(r.val_dice) << " val_acc " << fixed(r.val_acc) << "\n";
      };
      const TrainResult res = train(model, data.samples, data.split, tc, tr.out, hooks);
      rec.finish();
      out << "best epoch " << res.best_epoch << " score " << fixed(res.best_score) << "; checkpoint "
          << (fs::path(tr.out) / "best.ckpt").string() << "\n";
    } else if (c_eval->parsed()) {
      const ConfigMap cfg = resolve(ev);
      RunRecord rec("eval", ev, cfg);
      MultiTaskNet model = load_checkpoint(ev_ckpt);
      const LoadedData data = load_data(cfg);
      const LossConfig lc = LossConfig::read(cfg);
      const EvalResult r = evaluate(model, data.samples, pick_split(data.split, ev_split),
                                    static_cast<int>(cfg.get_int("train.batch_size", 8)), lc);
      std::ostringstream csv;
      csv << "run_id,epoch,split,metric,value\n";
      const std::string run_id = fs::path(ev_ckpt).parent_path().filename().string();
      write_metric_rows(csv, run_id.empty() ? "checkpoint" : run_id, -1, ev_split, r.seg, r.clf);
      write_text_file(fs::path(ev.out) / "metrics.csv", csv.str());
      rec.finish();
      out << ev_split << ": iou " << fixed(r.seg.iou) << " dice " << fixed(r.seg.dice) << " acc "
          << fixed(r.clf.accuracy) << " f1 " << fixed(r.clf.macro_f1) << " auc " << fixed(r.clf.macro_auc) << "\n";
    } else if (c_ablate->parsed()) {
      const ConfigMap cfg = resolve(ab);
      const TrainConfig tc = TrainConfig::read(cfg);
      RunRecord rec("ablate", ab, cfg);
      const LoadedData data = load_data(cfg);
      const auto rows = ablation_run(tc, data.samples, data.split, default_ablation_grid(), ab.out);
      rec.finish();
      out << ablation_csv(rows);
    } else if (c_diag->parsed()) {
      const ConfigMap cfg = resolve(dg);
      RunRecord rec("diagnose", dg, cfg);
      MultiTaskNet model = load_checkpoint(dg_ckpt);
      const LoadedData data = load_data(cfg);
      const DiagResult d = diagnose(model, data.samples, pick_split(data.split, dg_split));
      write_text_file(fs::path(dg.out) / "displacement.csv", displacement_csv(d));
      write_text_file(fs::path(dg.out) / "omega.csv", omega_csv(d));
      std::ostringstream summary;
      summary << "level,mean_disp_seg2clf,mean_disp_clf2seg\n";
      for (int l = 0; l < kDecoderLevels; ++l)
        summary << l + 1 << ',' << format_double(d.mean_seg2clf[l]) << ',' << format_double(d.mean_clf2seg[l]) << '\n';
      write_text_file(fs::path(dg.out) / "displacement_summary.csv", summary.str());
      rec.finish();
      out << summary.str();
    } else if (c_gc->parsed()) {
      if (gc.src.size != "tiny") throw ConfigError("gradcheck runs on the tiny preset only (--size tiny)");
      const ConfigMap cfg = resolve(gc);
      SuiteOptions opts;
      opts.seed = gc.seed_opt->count() > 0 ? gc.seed : 7;
      opts.model = ModelConfig::read(cfg);
      const auto entries = run_gradcheck_suite(opts);
      bool ok = true;
      std::ostringstream csv;
      csv << "component,max_relative_error,threshold,checked,pass\n";
      for (const auto& e : entries) {
        ok = ok && e.pass();
        out << std::left << std::setw(20) << e.component << " max_rel_err " << std::scientific
            << std::setprecision(3) << e.max_error << " (< " << e.threshold << ")  " << std::defaultfloat
            << (e.pass() ? "ok" : "FAIL") << "\n";
        csv << e.component << ',' << format_double(e.max_error) << ',' << format_double(e.threshold) << ','
            << e.checked << ',' << (e.pass() ? "true" : "false") << '\n';
      }
      if (!gc.out.empty()) {
        RunRecord rec("gradcheck", gc, cfg);
        write_text_file(fs::path(gc.out) / "gradcheck.csv", csv.str());
        rec.finish();
      }
      out << (ok ? "all components passed\n" : "gradient check FAILED\n");
      return ok ? kExitOk : kExitRuntime;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace uadi
