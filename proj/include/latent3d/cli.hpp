#ifndef LATENT3D_CLI_HPP
#define LATENT3D_CLI_HPP

// Command-line front end. Every subcommand resolves its settings from
// defaults, an optional --config file (TOML or JSON) and explicit flags, in
// that order, and writes the resolved settings to <out>/config.toml before
// doing any work, so `latent3d <cmd> --config <out>/config.toml` repeats it.

#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "latent3d/checkpoint.hpp"
#include "latent3d/config.hpp"
#include "latent3d/latent_analysis.hpp"
#include "latent3d/metrics.hpp"
#include "latent3d/preprocess.hpp"
#include "latent3d/synthdata.hpp"
#include "latent3d/trainer.hpp"

namespace latent3d::cli {

using namespace latent3d::preprocess;

// ---------------------------------------------------------------- run log

class RunLog {
 public:
  RunLog(std::ostream& err, bool quiet) : err_(err), quiet_(quiet) {}
  void open(const fs::path& path) { file_.open(path, std::ios::trunc); }
  void info(const std::string& msg) {
    if (!quiet_) err_ << msg << '\n';
    if (file_) file_ << msg << '\n' << std::flush;
  }

 private:
  std::ostream& err_;
  bool quiet_;
  std::ofstream file_;
};

// ---------------------------------------------------------------- settings

/// One subcommand's options. Plain settings are written to the snapshot
/// under their key; struct sections are written as tables; override flags
/// only act when given on the command line (their effect is already part of
/// a section).
class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& help) : app_(parent.add_subcommand(name, help)) {
    app_->add_option("--config", config_path_, "Settings file (TOML or JSON), e.g. a previous run's config.toml");
  }

  CLI::App* app() const { return app_; }

  template <typename T>
  CLI::Option* setting(const std::string& flag, T& var, const std::string& help, bool required = false) {
    auto* o = app_->add_option("--" + flag, var, help + (required ? " (required)" : ""));
    if (!required) o->capture_default_str();
    const std::string key = key_of(flag);
    appliers_.push_back([o, &var, key](const nlohmann::json& j) {
      if (o->count() == 0 && j.contains(key)) var = j.at(key).get<T>();
    });
    dumpers_.push_back([&var, key](nlohmann::json& j) { j[key] = var; });
    if (required) required_.push_back({flag, [o, key, this] { return o->count() > 0 || loaded_.contains(key); }});
    known_.insert(key);
    return o;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    auto* o = app_->add_flag("--" + name, var, help);
    const std::string key = key_of(name);
    appliers_.push_back([o, &var, key](const nlohmann::json& j) {
      if (o->count() == 0 && j.contains(key)) var = j.at(key).get<bool>();
    });
    dumpers_.push_back([&var, key](nlohmann::json& j) { j[key] = var; });
    known_.insert(key);
    return o;
  }

  /// Applies `fn` after sections are resolved, only if the flag was given.
  template <typename T>
  CLI::Option* override_flag(const std::string& name, const std::string& help, std::function<void(const T&)> fn) {
    auto holder = std::make_shared<T>();
    auto* o = app_->add_option("--" + name, *holder, help);
    overrides_.push_back([o, holder, fn] {
      if (o->count() > 0) fn(*holder);
    });
    holders_.push_back(holder);
    return o;
  }

  /// A flag that only acts when given on the command line.
  CLI::Option* override_switch(const std::string& name, const std::string& help, std::function<void()> fn) {
    auto* o = app_->add_flag("--" + name, help);
    overrides_.push_back([o, fn] {
      if (o->count() > 0) fn();
    });
    return o;
  }

  /// Runs after plain settings are known and before sections are layered.
  void on_settings(std::function<void()> fn) { hooks_.push_back(std::move(fn)); }

  /// A struct-valued section with an optional file flag that overlays it.
  template <typename T>
  void section(const std::string& key, T& var, const std::string& file_flag, const std::string& help) {
    auto path = std::make_shared<std::string>();
    if (!file_flag.empty()) {
      auto* o = app_->add_option("--" + file_flag, *path, help);
      const std::string fkey = key_of(file_flag);
      appliers_.push_back([o, path, fkey](const nlohmann::json& j) {
        if (o->count() == 0 && j.contains(fkey)) *path = j.at(fkey).get<std::string>();
      });
      dumpers_.push_back([path, fkey](nlohmann::json& j) { j[fkey] = *path; });
      known_.insert(fkey);
      holders_.push_back(path);
    }
    sections_.push_back([&var, path, key](const nlohmann::json& j) {
      if (!path->empty()) var = config_from<T>(read_config_file(*path), var);
      if (j.contains(key)) var = config_from<T>(j.at(key), var);
    });
    dumpers_.push_back([&var, key](nlohmann::json& j) { j[key] = nlohmann::json(var); });
    known_.insert(key);
  }

  /// Loads --config, applies everything and checks required settings.
  void resolve() {
    if (!config_path_.empty()) {
      loaded_ = read_config_file(config_path_);
      if (!loaded_.is_object()) throw ValidationError("config file must hold a table");
      for (const auto& [k, _] : loaded_.items())
        if (!known_.count(k)) throw ValidationError("unknown setting '" + k + "' in " + config_path_);
    }
    try {
      for (auto& a : appliers_) a(loaded_);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("bad value in " + config_path_ + ": " + e.what());
    }
    for (auto& h : hooks_) h();
    for (auto& s : sections_) s(loaded_);
    for (auto& o : overrides_) o();
    for (const auto& [flag, ok] : required_)
      if (!ok()) throw ValidationError("--" + flag + " is required");
  }

  nlohmann::json snapshot() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& d : dumpers_) d(j);
    return j;
  }

 private:
  static std::string key_of(std::string flag) {
    for (auto& c : flag)
      if (c == '-') c = '_';
    return flag;
  }

  CLI::App* app_;
  std::string config_path_;
  nlohmann::json loaded_ = nlohmann::json::object();
  std::vector<std::function<void(const nlohmann::json&)>> appliers_;
  std::vector<std::function<void(const nlohmann::json&)>> sections_;
  std::vector<std::function<void()>> overrides_;
  std::vector<std::function<void()>> hooks_;
  std::vector<std::function<void(nlohmann::json&)>> dumpers_;
  std::vector<std::pair<std::string, std::function<bool()>>> required_;
  std::set<std::string> known_;
  std::vector<std::shared_ptr<void>> holders_;
};

inline void begin_run(const fs::path& out, const Command& cmd, RunLog& log, const std::string& name) {
  ensure_dir(out);
  write_file_atomic(out / "config.toml", "# latent3d " + name + "\n" + to_toml(cmd.snapshot()));
  log.open(out / "run.log");
  log.info("latent3d " + name + ": settings written to " + (out / "config.toml").string());
}

inline void check_device(const std::string& device) {
  if (device != "cpu") throw ValidationError("device '" + device + "' is not available (only cpu)");
}

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------- preprocess settings

struct PreprocessSettings {
  double clip_percentile = 99.5;
  std::size_t target_edge = 48;
  std::vector<std::string> steps;                 // enabled external steps
  std::map<std::string, std::string> commands;    // step -> command template with {in}/{out}
  double timeout_s = 600.0;
  bool allow_identity = false;

  PreprocessConfig to_config() const {
    PreprocessConfig c;
    c.clip_percentile = clip_percentile;
    c.target_shape = {target_edge, target_edge, target_edge};
    c.allow_identity = allow_identity;
    for (const auto& s : steps) c.enabled[parse_step_name(s)] = true;
    for (const auto& [name, cmd] : commands) c.external_steps.push_back({parse_step_name(name), cmd, timeout_s});
    c.validate();
    return c;
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PreprocessSettings, clip_percentile, target_edge, steps, commands,
                                                timeout_s, allow_identity)

inline ModelConfig preset(const std::string& name) {
  if (name == "desk48") return ModelConfig::desk48();
  if (name == "latent24") return ModelConfig::latent24();
  if (name == "latent12") return ModelConfig::latent12();
  if (name == "latent3") return ModelConfig::latent3();
  throw ValidationError("unknown preset '" + name + "' (desk48, latent24, latent12, latent3)");
}

inline std::vector<Volume> load_manifest_volumes(const Manifest& m, const fs::path& dir, RunLog& log) {
  std::vector<Volume> vols;
  for (const auto& r : m.records) vols.push_back(load_volume(resolve_volume_path(r, dir)));
  log.info("loaded " + std::to_string(vols.size()) + " volumes");
  return vols;
}

inline std::string group_value(const SubjectRecord& r, const std::string& by) {
  if (by == "group") return to_string(r.group);
  if (by == "ad_label") return r.group == Group::EU ? "EU" : to_string(r.ad_label);
  if (by == "id_label") return r.group == Group::EU ? "EU" : to_string(r.id_label);
  if (by == "source_dataset") return r.source_dataset;
  throw ValidationError("unknown --group-by '" + by + "' (group, ad_label, id_label, source_dataset)");
}

inline std::string csv_num(double v) { return std::isfinite(v) ? format_double(v) : std::string("NA"); }

// ---------------------------------------------------------------- report

/// Collects run directories (recursively) holding report.json, fidelity.json
/// or scatter.csv and writes table-shaped CSVs plus copies of the scatter
/// plots.
inline void write_report(const std::vector<std::string>& runs, const fs::path& out, RunLog& log) {
  std::vector<fs::path> dirs;
  for (const auto& r : runs) {
    if (!fs::is_directory(r)) throw ValidationError("run directory '" + r + "' does not exist");
    dirs.push_back(r);
    for (const auto& e : fs::recursive_directory_iterator(r))
      if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  dirs.erase(std::unique(dirs.begin(), dirs.end()), dirs.end());

  std::string fid = "run,latent_shape,ssim,ms_ssim,mse,feat_dist,cos_sim,n\n";
  std::map<std::string, std::string> cls;  // task -> csv body
  std::size_t n_fid = 0, n_cv = 0, n_sc = 0;
  for (const auto& d : dirs) {
    const std::string run = d.lexically_normal().generic_string();
    if (fs::exists(d / "fidelity.json")) {
      const auto j = nlohmann::json::parse(read_file(d / "fidelity.json"));
      const auto& m = j.at("mean");
      fid += run + "," + j.value("latent_shape", std::string("?")) + "," + csv_num(m.at("ssim")) + "," +
             csv_num(m.at("ms_ssim")) + "," + csv_num(m.at("mse")) + "," + csv_num(m.at("feat_dist")) + "," +
             csv_num(m.at("cos_sim")) + "," + std::to_string(j.at("per_volume").size()) + "\n";
      ++n_fid;
    }
    if (fs::exists(d / "report.json")) {
      const auto rep = cv_report_from_json(nlohmann::json::parse(read_file(d / "report.json")));
      const auto shape = rep.config.value("latent_shape", std::string("?"));
      std::vector<std::string> keys{"accuracy", "sensitivity", "specificity", "auc"};
      if (rep.n_classes > 2)
        for (const auto& c : rep.class_names) {
          keys.push_back("sensitivity_" + c);
          keys.push_back("specificity_" + c);
        }
      auto& body = cls[rep.task];
      if (body.empty()) {
        body = "run,latent_shape,features,k";
        for (const auto& k : keys) body += "," + k + "_mean," + k + "_std";
        body += "\n";
      }
      body += run + "," + shape + "," + rep.features + "," + std::to_string(rep.k);
      for (const auto& k : keys) {
        auto m = rep.mean.find(k), s = rep.std.find(k);
        body += "," + csv_num(m == rep.mean.end() ? NAN : m->second) + "," + csv_num(s == rep.std.end() ? NAN : s->second);
      }
      body += "\n";
      ++n_cv;
    }
    if (fs::exists(d / "scatter.svg")) {
      std::string name = run;
      while (!name.empty() && (name.front() == '/' || name.front() == '.')) name.erase(name.begin());
      std::replace(name.begin(), name.end(), '/', '_');
      std::replace(name.begin(), name.end(), '.', '_');
      if (name.empty()) name = "run";
      write_file_atomic(out / ("scatter_" + name + ".svg"), read_file(d / "scatter.svg"));
      ++n_sc;
    }
  }
  if (n_fid + n_cv + n_sc == 0) throw ValidationError("no run outputs (report.json, fidelity.json, scatter.svg) found");
  if (n_fid) write_file_atomic(out / "fidelity_table.csv", fid);
  for (const auto& [task, body] : cls) write_file_atomic(out / ("classification_" + task + ".csv"), body);
  log.info("report: " + std::to_string(n_fid) + " fidelity, " + std::to_string(n_cv) + " cross-validation, " +
           std::to_string(n_sc) + " scatter outputs");
}

// ---------------------------------------------------------------- dispatch

/// Runs one subcommand. Exit codes: 0 success, 1 invalid input or usage,
/// 2 runtime failure.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"latent3d: 3D VAE latent representations for volumetric classification", "latent3d"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only write logs to run.log");
  app.footer("Exit codes: 0 success, 1 invalid input, 2 runtime failure. Scratch files go to $LATENT3D_SCRATCH.");

  std::vector<std::unique_ptr<Command>> cmds;
  auto add = [&](const std::string& n, const std::string& h) {
    cmds.push_back(std::make_unique<Command>(app, n, h));
    return cmds.back().get();
  };

  // synth
  std::string s_out;
  CohortSpec s_spec;
  auto* synth = add("synth", "Generate a synthetic phantom cohort (volumes, manifest.csv, cohort.json)");
  synth->setting("out", s_out, "Output cohort directory", true);
  synth->section("cohort", s_spec, "spec", "Cohort spec file (TOML or JSON) overlaying the defaults");
  synth->override_flag<std::uint64_t>("seed", "Cohort seed", [&](auto v) { s_spec.seed = v; });
  synth->override_flag<std::size_t>("n-eu", "Number of EU subjects", [&](auto v) { s_spec.n_eu = v; });
  synth->override_flag<std::size_t>("n-ds", "Number of DS subjects", [&](auto v) { s_spec.n_ds = v; });
  synth->override_flag<std::size_t>("edge", "Volume edge length", [&](auto v) { s_spec.base.edge = v; });

  // preprocess
  std::string p_manifest, p_out;
  PreprocessSettings p_set;
  auto* prep = add("preprocess", "Normalise intensities and crop/pad volumes, running any configured external steps");
  prep->setting("manifest", p_manifest, "Input manifest.csv", true);
  prep->setting("out", p_out, "Output directory", true);
  prep->section("preprocess", p_set, "preprocess-config", "Preprocessing settings file");
  prep->override_flag<double>("clip", "Upper intensity percentile", [&](auto v) { p_set.clip_percentile = v; });
  prep->override_flag<std::size_t>("target-edge", "Output edge length", [&](auto v) { p_set.target_edge = v; });
  prep->override_flag<std::vector<std::string>>("step", "Enable an external step (repeatable)", [&](auto v) { p_set.steps = v; });
  prep->override_switch("allow-identity", "Pass volumes through unavailable external tools unchanged",
                        [&] { p_set.allow_identity = true; });

  // train-vae
  std::string v_manifest, v_out, v_preset = "desk48", v_device = "cpu";
  std::size_t v_steps = 0, v_ckpt_every = 0, v_warmup = 0;
  ModelConfig v_cfg;
  auto* tv = add("train-vae", "Train the VAE (and discriminator when lambda-adv > 0) on preprocessed volumes");
  tv->setting("manifest", v_manifest, "Manifest of preprocessed training volumes", true);
  tv->setting("out", v_out, "Run directory", true);
  tv->setting("preset", v_preset, "Base configuration: desk48, latent24, latent12, latent3");
  tv->setting("max-steps", v_steps, "Stop after this many steps (0: run all epochs)");
  tv->setting("checkpoint-every", v_ckpt_every, "Checkpoint cadence in steps (0: final and best only)");
  tv->setting("adv-warmup", v_warmup, "Steps over which lambda-adv ramps up from 0");
  tv->setting("device", v_device, "Compute device (cpu)");
  tv->on_settings([&] { v_cfg = preset(v_preset); });
  tv->section("model", v_cfg, "model-config", "Model settings file overlaying the preset");
  tv->override_flag<std::uint64_t>("seed", "Model seed", [&](auto v) { v_cfg.seed = v; });
  tv->override_flag<std::size_t>("epochs", "VAE epochs", [&](auto v) { v_cfg.epochs_vae = v; });
  tv->override_flag<double>("lr", "VAE learning rate", [&](auto v) { v_cfg.lr_vae = v; });
  tv->override_flag<std::size_t>("batch-size", "Batch size", [&](auto v) { v_cfg.batch_size = v; });
  tv->override_flag<double>("lambda-perc", "Perceptual loss weight", [&](auto v) { v_cfg.lambda_perc = v; });
  tv->override_flag<double>("lambda-adv", "Adversarial loss weight", [&](auto v) { v_cfg.lambda_adv = v; });
  tv->override_flag<double>("lambda-kl", "KL weight", [&](auto v) { v_cfg.lambda_kl = v; });

  // encode
  std::string e_ckpt, e_manifest, e_out;
  auto* enc = add("encode", "Encode every subject of a manifest into a latent store");
  enc->setting("checkpoint", e_ckpt, "VAE checkpoint", true);
  enc->setting("manifest", e_manifest, "Manifest of preprocessed volumes", true);
  enc->setting("out", e_out, "Latent store directory", true);

  // train-clf
  std::string c_latents, c_task, c_out, c_device = "cpu";
  std::size_t c_k = 5, c_fold = 0;
  std::uint64_t c_fold_seed = 0;
  ClassifierTrainConfig c_cfg;
  auto* tc = add("train-clf", "Train a classifier on one fold's training split and evaluate it on the fold's test split");
  tc->setting("latents", c_latents, "Latent store directory", true);
  tc->setting("task", c_task, "eu_vs_ds, ad_binary, ad_3class or id_binary", true);
  tc->setting("out", c_out, "Run directory", true);
  tc->setting("k", c_k, "Number of folds");
  tc->setting("fold", c_fold, "Fold index");
  tc->setting("fold-seed", c_fold_seed, "Fold assignment seed");
  tc->setting("device", c_device, "Compute device (cpu)");
  tc->section("classifier", c_cfg, "classifier-config", "Classifier settings file");
  tc->override_flag<std::uint64_t>("seed", "Classifier seed", [&](auto v) { c_cfg.seed = v; });
  tc->override_flag<double>("lr", "Learning rate", [&](auto v) { c_cfg.lr = v; });
  tc->override_flag<std::size_t>("epochs", "Epochs", [&](auto v) { c_cfg.epochs = v; });
  tc->override_flag<std::size_t>("batch-size", "Batch size", [&](auto v) { c_cfg.batch_size = v; });

  // run-cv
  std::string r_latents, r_task, r_out, r_device = "cpu";
  std::size_t r_k = 5, r_jobs = 1, r_pca = 0;
  std::uint64_t r_seed = 0;
  ClassifierTrainConfig r_cfg;
  auto* cv = add("run-cv", "Stratified k-fold cross-validation of the classifier on a latent store");
  cv->setting("latents", r_latents, "Latent store directory", true);
  cv->setting("task", r_task, "eu_vs_ds, ad_binary, ad_3class or id_binary", true);
  cv->setting("out", r_out, "Run directory (default: cv_<task>)");
  cv->setting("k", r_k, "Number of folds");
  cv->setting("seed", r_seed, "Fold assignment seed; per-fold classifier seeds derive from the classifier seed");
  cv->setting("jobs", r_jobs, "Folds trained in parallel");
  cv->setting("pca-components", r_pca, "Classify on this many per-fold principal components (0: full latents)");
  cv->setting("device", r_device, "Compute device (cpu)");
  cv->section("classifier", r_cfg, "classifier-config", "Classifier settings file");
  cv->override_flag<std::uint64_t>("clf-seed", "Classifier seed", [&](auto v) { r_cfg.seed = v; });
  cv->override_flag<double>("lr", "Learning rate", [&](auto v) { r_cfg.lr = v; });
  cv->override_flag<std::size_t>("epochs", "Epochs", [&](auto v) { r_cfg.epochs = v; });
  cv->override_flag<std::size_t>("batch-size", "Batch size", [&](auto v) { r_cfg.batch_size = v; });
  cv->override_switch("sample-z", "Train on sampled z = mu + sigma * eps instead of mu", [&] { r_cfg.sample_z = true; });

  // eval-fidelity
  std::string f_ckpt, f_manifest, f_out, f_pyr;
  auto* ef = add("eval-fidelity", "Reconstruction fidelity (SSIM, MS-SSIM, MSE, feature distance, cosine similarity)");
  ef->setting("checkpoint", f_ckpt, "VAE checkpoint", true);
  ef->setting("manifest", f_manifest, "Manifest of preprocessed volumes", true);
  ef->setting("out", f_out, "Output directory", true);
  ef->setting("feature-pyramid", f_pyr, "Feature extractor checkpoint (default: the built-in fixed pyramid)");

  // pca
  std::string a_latents, a_out, a_group = "group";
  std::size_t a_comp = 2;
  auto* pca = add("pca", "Fit PCA on latent means and export the 2D scatter (CSV + SVG)");
  pca->setting("latents", a_latents, "Latent store directory", true);
  pca->setting("out", a_out, "Output directory", true);
  pca->setting("components", a_comp, "Number of components (>= 2)");
  pca->setting("group-by", a_group, "Colouring: group, ad_label, id_label or source_dataset");

  // report
  std::vector<std::string> t_runs;
  std::string t_out;
  auto* rp = add("report", "Table-shaped CSVs and scatter plots from run directories");
  rp->setting("runs", t_runs, "Run directories to scan (recursively)", true);
  rp->setting("out", t_out, "Report directory", true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    std::string first;
    for (int i = 1; i < argc; ++i)
      if (argv[i][0] != '-') {
        first = argv[i];
        break;
      }
    if (app.get_subcommands().empty() && !first.empty())
      err << "error: unknown subcommand '" << first << "'\n\n";
    else
      err << "error: " << e.what() << "\n\n";
    const CLI::App* shown = &app;
    for (const auto* sub : app.get_subcommands()) shown = sub;
    err << shown->help();
    return 1;
  }

  RunLog log(err, quiet);
  try {
    if (synth->app()->parsed()) {
      synth->resolve();
      s_spec.validate();
      begin_run(s_out, *synth, log, "synth");
      const auto m = generate_cohort(s_spec, s_out);
      log.info("wrote " + std::to_string(m.records.size()) + " subjects to " + s_out);
    } else if (prep->app()->parsed()) {
      prep->resolve();
      const auto pc = p_set.to_config();
      begin_run(p_out, *prep, log, "preprocess");
      const fs::path mpath = p_manifest;
      const Manifest in = load_manifest(mpath);
      ensure_dir(fs::path(p_out) / "volumes");
      write_file_atomic(fs::path(p_out) / "provenance.jsonl", "");
      ProvenanceLog prov(fs::path(p_out) / "provenance.jsonl");
      Manifest outm = in;
      for (auto& r : outm.records) {
        StepContext ctx{default_scratch_dir(), pc.allow_identity, r.subject_id, &prov};
        const Volume v = preprocess_pipeline(load_volume(resolve_volume_path(r, mpath.parent_path())), pc, ctx);
        r.volume_path = "volumes/" + r.subject_id + ".vol";
        save_volume(v, fs::path(p_out) / r.volume_path);
      }
      save_manifest(outm, fs::path(p_out) / "manifest.csv");
      log.info("preprocessed " + std::to_string(outm.records.size()) + " volumes");
    } else if (tv->app()->parsed()) {
      tv->resolve();
      check_device(v_device);
      v_cfg.validate();
      begin_run(v_out, *tv, log, "train-vae");
      write_file_atomic(fs::path(v_out) / "config.json", dump_json(v_cfg));
      const fs::path mpath = v_manifest;
      const Manifest m = load_manifest(mpath);
      const auto vols = load_manifest_volumes(m, mpath.parent_path(), log);
      VaeTrainOptions opt;
      opt.max_steps = v_steps;
      opt.checkpoint_every = v_ckpt_every;
      opt.adv_warmup_steps = v_warmup;
      opt.run_dir = v_out;
      opt.on_step = [&](std::size_t step, const LossBreakdown& b, VaeModel<float>&) {
        if (step == 1 || step % 10 == 0) log.info("step " + std::to_string(step) + " " + to_json(b).dump());
        return true;
      };
      const auto res = train_vae(vols, v_cfg, opt);
      log.info("finished after " + std::to_string(res.steps) + " steps; final.ckpt written");
    } else if (enc->app()->parsed()) {
      enc->resolve();
      const fs::path mpath = e_manifest;
      const auto model = load_vae(e_ckpt);
      const Manifest m = load_manifest(mpath, false);
      begin_run(e_out, *enc, log, "encode");
      const auto store = encode_dataset(model, m, mpath.parent_path());
      store.save(e_out);
      log.info("encoded " + std::to_string(store.size()) + " subjects, latent " + latent_shape_str(store.latent_shape()));
    } else if (tc->app()->parsed()) {
      tc->resolve();
      check_device(c_device);
      const auto task = TaskSpec::make(c_task);
      const auto store = LatentStore::open(c_latents);
      const auto d = filter_task(store.manifest(), task);
      const auto plan = kfold_split(d, c_k, c_fold_seed);
      begin_run(c_out, *tc, log, "train-clf");
      write_file_atomic(fs::path(c_out) / "folds.json", dump_json(to_json(plan)));
      auto res = train_classifier(store, d, plan, c_fold, c_cfg);
      std::string hist;
      for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
        hist += nlohmann::json{{"epoch", e + 1}, {"loss", res.epoch_loss[e]}}.dump() + "\n";
      write_file_atomic(fs::path(c_out) / "history.jsonl", hist);
      save_classifier(res.model, fs::path(c_out) / "classifier.ckpt", res.epoch_loss.size(),
                      {{"task", c_task}, {"fold", c_fold}, {"latent_config_hash", store.config_hash()}});
      const auto& f = plan.folds.at(c_fold);
      std::vector<std::size_t> truth;
      for (auto i : f.test) truth.push_back(d.labels[i]);
      const auto probs = classify(res.model, latent_features(store, f.test_ids), Mode::Eval);
      const auto metrics = evaluate_predictions(probs, truth, task.n_classes);
      write_file_atomic(fs::path(c_out) / "metrics.json",
                        dump_json({{"fold", c_fold}, {"test_ids", f.test_ids}, {"metrics", to_json(metrics)},
                                   {"class_weights", res.class_weights}, {"class_weight_ids", res.class_weight_ids}}));
      log.info("fold " + std::to_string(c_fold) + " test accuracy " + format_double(metrics.accuracy));
    } else if (cv->app()->parsed()) {
      cv->resolve();
      check_device(r_device);
      if (r_out.empty()) r_out = "cv_" + r_task;
      const auto task = TaskSpec::make(r_task);
      const auto store = LatentStore::open(r_latents);
      const auto d = filter_task(store.manifest(), task);
      const auto plan = kfold_split(d, r_k, r_seed);
      begin_run(r_out, *cv, log, "run-cv");
      write_file_atomic(fs::path(r_out) / "folds.json", dump_json(to_json(plan)));
      CVReport rep = r_pca ? classify_on_projection(store, task, r_k, r_seed, r_pca, r_cfg, r_jobs)
                           : run_cv(store, task, r_k, r_seed, r_cfg, r_jobs);
      const auto leaks = audit_leakage(rep);
      if (!leaks.empty()) throw RuntimeFailure("leakage audit failed: " + leaks.front());
      write_file_atomic(fs::path(r_out) / "report.json", dump_json(to_json(rep)));
      write_file_atomic(fs::path(r_out) / "predictions.csv", predictions_csv(rep));
      log.info(r_task + " (" + rep.features + "): mean accuracy " + format_double(rep.mean.at("accuracy")) + ", mean AUC " +
               csv_num(rep.mean.at("auc")));
    } else if (ef->app()->parsed()) {
      ef->resolve();
      const fs::path mpath = f_manifest;
      const auto model = load_vae(f_ckpt);
      const Manifest m = load_manifest(mpath);
      begin_run(f_out, *ef, log, "eval-fidelity");
      std::unique_ptr<ConvPyramidExtractor<double>> fx;
      if (f_pyr.empty()) {
        fx = std::make_unique<ConvPyramidExtractor<double>>();
      } else {
        const auto f32 = load_feature_pyramid(f_pyr);
        fx = std::make_unique<ConvPyramidExtractor<double>>(f32.config(), f32.params().cast<double>());
      }
      FidelityReport rep;
      for (const auto& r : m.records) {
        const Volume x = load_volume(resolve_volume_path(r, mpath.parent_path()));
        const Volume y = decode(model, mean_code(encode(model, x)));
        rep.subject_ids.push_back(r.subject_id);
        rep.per_volume.push_back(fidelity_scores(x, y, *fx));
      }
      rep.mean = mean_scores(rep.per_volume);
      auto j = to_json(rep);
      j["latent_shape"] = latent_shape_str(model.latent_shape());
      j["config_hash"] = model.config_hash();
      write_file_atomic(fs::path(f_out) / "fidelity.json", dump_json(j));
      log.info("mean SSIM " + format_double(rep.mean.ssim) + ", MS-SSIM " + format_double(rep.mean.ms_ssim));
    } else if (pca->app()->parsed()) {
      pca->resolve();
      if (a_comp < 2) throw ValidationError("--components must be >= 2 for a scatter");
      const auto store = LatentStore::open(a_latents);
      std::vector<std::string> ids, groups;
      for (const auto& r : store.manifest().records) {
        ids.push_back(r.subject_id);
        groups.push_back(group_value(r, a_group));
      }
      begin_run(a_out, *pca, log, "pca");
      const auto rows = latent_features(store, ids);
      const auto model = fit_pca(rows, a_comp);
      save_pca(model, fs::path(a_out) / "pca.json");
      export_scatter(project(model, rows), ids, groups, fs::path(a_out) / "scatter");
      std::string ev = "component,explained_variance,ratio\n";
      for (std::size_t c = 0; c < model.n_components(); ++c)
        ev += std::to_string(c + 1) + "," + format_double(model.explained_variance[c]) + "," +
              format_double(model.explained_variance[c] / model.total_variance) + "\n";
      write_file_atomic(fs::path(a_out) / "explained_variance.csv", ev);
      log.info("PCA on " + std::to_string(rows.size()) + " subjects, dim " + std::to_string(model.dim()));
    } else if (rp->app()->parsed()) {
      rp->resolve();
      begin_run(t_out, *rp, log, "report");
      write_report(t_runs, t_out, log);
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeFailure& e) {
    err << "failure: " << e.what() << "\n";
    if (auto* x = dynamic_cast<const ExternalStepError*>(&e); x && !x->output().empty()) err << x->output() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace latent3d::cli

#endif
