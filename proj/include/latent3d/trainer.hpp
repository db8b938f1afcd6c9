#ifndef LATENT3D_TRAINER_HPP
#define LATENT3D_TRAINER_HPP

#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "latent3d/checkpoint.hpp"
#include "latent3d/classifier.hpp"
#include "latent3d/core_types.hpp"
#include "latent3d/discriminator.hpp"
#include "latent3d/features.hpp"
#include "latent3d/io.hpp"
#include "latent3d/latent_store.hpp"
#include "latent3d/losses.hpp"
#include "latent3d/metrics.hpp"
#include "latent3d/optim.hpp"
#include "latent3d/vae.hpp"

namespace latent3d {

// ---------------------------------------------------------------- tasks

enum class TaskName { EuVsDs, AdBinary, Ad3Class, IdBinary };

inline std::string to_string(TaskName t) {
  switch (t) {
    case TaskName::EuVsDs: return "eu_vs_ds";
    case TaskName::AdBinary: return "ad_binary";
    case TaskName::Ad3Class: return "ad_3class";
    case TaskName::IdBinary: return "id_binary";
  }
  return "?";
}

inline TaskName parse_task_name(const std::string& s) {
  for (auto t : {TaskName::EuVsDs, TaskName::AdBinary, TaskName::Ad3Class, TaskName::IdBinary})
    if (to_string(t) == s) return t;
  throw ValidationError("unknown task '" + s + "' (eu_vs_ds, ad_binary, ad_3class, id_binary)");
}

/// One of the four classification problems. `positive_class` is the class
/// whose sensitivity/specificity are reported as the headline binary values.
struct TaskSpec {
  TaskName name = TaskName::EuVsDs;
  std::size_t n_classes = 2;
  std::vector<std::string> class_names;
  std::size_t positive_class = 1;

  static TaskSpec make(TaskName t) {
    switch (t) {
      case TaskName::EuVsDs: return {t, 2, {"EU", "DS"}, 1};
      case TaskName::AdBinary: return {t, 2, {"NoDet", "AD_any"}, 1};
      case TaskName::Ad3Class: return {t, 3, {"NoDet", "ProdromalAD", "AD"}, 1};
      case TaskName::IdBinary: return {t, 2, {"Mild", "ModerateSevere"}, 0};
    }
    throw ValidationError("unknown task");
  }
  static TaskSpec make(const std::string& s) { return make(parse_task_name(s)); }

  /// Class index, or nullopt when the record is excluded from the task.
  std::optional<std::size_t> label(const SubjectRecord& r) const {
    switch (name) {
      case TaskName::EuVsDs: return r.group == Group::EU ? 0 : 1;
      case TaskName::AdBinary:
        if (r.group == Group::EU || r.ad_label == AdLabel::Missing) return std::nullopt;
        return r.ad_label == AdLabel::NoDet ? 0 : 1;
      case TaskName::Ad3Class:
        if (r.group == Group::EU || r.ad_label == AdLabel::Missing) return std::nullopt;
        return r.ad_label == AdLabel::NoDet ? 0 : r.ad_label == AdLabel::ProdromalAD ? 1 : 2;
      case TaskName::IdBinary:
        if (r.group == Group::EU || r.id_label == IdLabel::Missing) return std::nullopt;
        return r.id_label == IdLabel::Mild ? 0 : 1;
    }
    return std::nullopt;
  }
};

/// The records a task keeps, in manifest order.
struct TaskDataset {
  TaskSpec task;
  std::vector<std::size_t> record_index;
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  std::size_t excluded = 0;

  std::size_t size() const { return ids.size(); }
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(task.n_classes, 0);
    for (auto y : labels) ++c[y];
    return c;
  }
};

inline TaskDataset filter_task(const Manifest& m, const TaskSpec& task) {
  TaskDataset d{task, {}, {}, {}, 0};
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (auto y = task.label(m.records[i])) {
      d.record_index.push_back(i);
      d.ids.push_back(m.records[i].subject_id);
      d.labels.push_back(*y);
    } else {
      ++d.excluded;
    }
  }
  return d;
}

// ---------------------------------------------------------------- folds

struct Fold {
  std::vector<std::size_t> train;  // positions in the TaskDataset
  std::vector<std::size_t> test;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

struct FoldPlan {
  std::string task;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

inline nlohmann::json to_json(const FoldPlan& p) {
  nlohmann::json j{{"task", p.task}, {"k", p.k}, {"seed", p.seed}, {"folds", nlohmann::json::array()}};
  for (const auto& f : p.folds) j["folds"].push_back({{"train_ids", f.train_ids}, {"test_ids", f.test_ids}});
  return j;
}

/// Stratified split: each class is shuffled with its own derived seed and
/// dealt round-robin, the starting fold continuing from where the previous
/// class stopped so fold sizes stay within one of each other.
inline FoldPlan kfold_split(const TaskDataset& d, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("k must be >= 2");
  const auto counts = d.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] < k)
      throw ValidationError("class " + d.task.class_names[c] + " has " + std::to_string(counts[c]) +
                            " members, fewer than k=" + std::to_string(k));
  FoldPlan plan{to_string(d.task.name), k, seed, std::vector<Fold>(k)};
  std::vector<std::size_t> assign(d.size());
  std::size_t offset = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.labels[i] == c) members.push_back(i);
    Rng rng(derive_seed(seed, "fold-class-" + std::to_string(c)));
    rng.shuffle(members.begin(), members.end());
    for (std::size_t j = 0; j < members.size(); ++j) assign[members[j]] = (offset + j) % k;
    offset = (offset + members.size()) % k;
  }
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t f = 0; f < k; ++f) {
      auto& fold = plan.folds[f];
      if (assign[i] == f) {
        fold.test.push_back(i);
        fold.test_ids.push_back(d.ids[i]);
      } else {
        fold.train.push_back(i);
        fold.train_ids.push_back(d.ids[i]);
      }
    }
  return plan;
}

inline FoldPlan kfold_split(const Manifest& m, const TaskSpec& task, std::size_t k, std::uint64_t seed) {
  return kfold_split(filter_task(m, task), k, seed);
}

// ---------------------------------------------------------------- VAE training

struct VaeTrainOptions {
  std::size_t max_steps = 0;          // 0: epochs_vae full passes
  std::size_t checkpoint_every = 0;   // 0: only final and best
  std::size_t adv_warmup_steps = 0;   // linear ramp of λ_adv from 0
  fs::path run_dir;                   // empty: nothing is written
  DiscriminatorConfig discriminator;
  PyramidConfig pyramid;
  /// Called after every step; returning false stops training early.
  std::function<bool(std::size_t, const LossBreakdown&, VaeModel<float>&)> on_step;
};

struct VaeTrainResult {
  VaeModel<float> model;
  std::optional<DiscriminatorModel<float>> discriminator;
  std::vector<LossBreakdown> history;
  std::size_t steps = 0;
  double best_epoch_rec = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
};

inline nlohmann::json history_line(std::size_t step, const LossBreakdown& b) {
  auto j = to_json(b);
  j["step"] = step;
  return j;
}

/// Alternating generator/discriminator optimisation over preprocessed
/// volumes. Aborts with DivergenceError as soon as a loss is non-finite.
inline VaeTrainResult train_vae(const std::vector<Volume>& data, const ModelConfig& cfg, const VaeTrainOptions& opt = {}) {
  cfg.validate();
  if (data.empty()) throw ValidationError("train_vae: empty dataset");
  VaeTrainResult res{build_vae<float>(cfg, cfg.seed), std::nullopt, {}, 0};
  auto& model = res.model;
  for (const auto& v : data) check_model_input(model.arch, v);

  const LossWeights full = weights_from(cfg);
  std::optional<ConvPyramidExtractor<float>> pyramid;
  if (full.perc > 0) pyramid.emplace(opt.pyramid);
  if (full.adv > 0) res.discriminator = build_discriminator<float>(opt.discriminator, derive_seed(cfg.seed, "disc"));

  Adam<float> adam(cfg.lr_vae);
  Adam<float> adam_d(cfg.lr_vae);
  Rng order_rng(derive_seed(cfg.seed, "vae-batches"));
  Rng noise_rng(derive_seed(cfg.seed, "vae-noise"));

  const bool write = !opt.run_dir.empty();
  std::ofstream history;
  if (write) {
    ensure_dir(opt.run_dir / "checkpoints");
    history.open(opt.run_dir / "history.jsonl", std::ios::trunc);
    if (!history) throw IoError("cannot write " + (opt.run_dir / "history.jsonl").string());
  }
  const std::size_t bs = std::min(cfg.batch_size, data.size());
  const std::size_t per_epoch = (data.size() + bs - 1) / bs;
  const std::size_t total_steps = opt.max_steps ? opt.max_steps : cfg.epochs_vae * per_epoch;

  std::vector<std::size_t> order(data.size());
  std::size_t step = 0, epoch = 0;
  bool stop = false;
  while (step < total_steps && !stop) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order.begin(), order.end());
    double epoch_rec = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t b0 = 0; b0 < order.size() && step < total_steps && !stop; b0 += bs) {
      std::vector<const Volume*> batch;
      for (std::size_t i = b0; i < std::min(order.size(), b0 + bs); ++i) batch.push_back(&data[order[i]]);
      ad::Var<float> x(volumes_to_batch<float>(batch));

      LossWeights w = full;
      if (opt.adv_warmup_steps > 0) w.adv *= std::min(1.0, double(step + 1) / double(opt.adv_warmup_steps));

      model.params.zero_grad();
      auto enc = encode_forward(model, x);
      Tensor<float> eps(enc.mu.shape());
      for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = float(noise_rng.normal());
      auto z = ops::reparameterize(enc.mu, enc.log_var, eps);
      auto xhat = decode_forward(model, z);
      auto terms = vae_total_loss(x, xhat, enc.mu, enc.log_var, res.discriminator ? &*res.discriminator : nullptr,
                                  pyramid ? &*pyramid : nullptr, w);
      auto& bd = terms.breakdown;
      if (!std::isfinite(bd.total))
        throw DivergenceError("non-finite VAE loss at step " + std::to_string(step) + ": " + to_json(bd).dump());
      ad::backward(terms.total);
      adam.step(model.params);

      if (res.discriminator) {
        auto& d = *res.discriminator;
        d.params.zero_grad();
        auto dl = disc_loss(d, x, xhat);
        bd.adv_disc = double(dl.item());
        if (!std::isfinite(*bd.adv_disc))
          throw DivergenceError("non-finite discriminator loss at step " + std::to_string(step));
        ad::backward(dl);
        adam_d.step(d.params);
      }

      ++step;
      epoch_rec += bd.rec;
      ++epoch_batches;
      res.history.push_back(bd);
      if (write) history << history_line(step, bd).dump() << '\n' << std::flush;
      if (write && opt.checkpoint_every && step % opt.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%07zu.ckpt", step);
        save_vae(model, opt.run_dir / "checkpoints" / name, step);
      }
      if (opt.on_step && !opt.on_step(step, bd, model)) stop = true;
    }
    ++epoch;
    const double mean_rec = epoch_rec / double(std::max<std::size_t>(1, epoch_batches));
    if (mean_rec < res.best_epoch_rec) {
      res.best_epoch_rec = mean_rec;
      res.best_epoch = epoch;
      if (write) save_vae(model, opt.run_dir / "checkpoints" / "best_rec.ckpt", step, {{"epoch", epoch}, {"mean_rec", mean_rec}});
    }
  }
  res.steps = step;
  if (write) {
    save_vae(model, opt.run_dir / "checkpoints" / "final.ckpt", step);
    if (res.discriminator) save_discriminator(*res.discriminator, opt.run_dir / "checkpoints" / "discriminator.ckpt", step);
  }
  return res;
}

/// Mean L1 between each volume and its reconstruction from z = mu.
inline double mean_reconstruction_l1(const VaeModel<float>& m, const std::vector<Volume>& data) {
  double s = 0.0;
  for (const auto& v : data) s += l1_recon(v, decode(m, mean_code(encode(m, v))));
  return s / double(data.size());
}

// ---------------------------------------------------------------- encoding

/// Encodes every subject of the manifest. Volumes are read relative to
/// `manifest_dir`; a missing or mis-shaped volume is reported by subject id.
template <typename T>
LatentStore encode_dataset(const VaeModel<T>& m, const Manifest& manifest, const fs::path& manifest_dir) {
  manifest.validate();
  std::map<std::string, LatentDistribution> entries;
  for (const auto& r : manifest.records) {
    const fs::path p = resolve_volume_path(r, manifest_dir);
    if (!fs::exists(p)) throw ValidationError("subject '" + r.subject_id + "': volume not found at " + p.string());
    Volume v = load_volume(p);
    try {
      check_model_input(m.arch, v);
    } catch (const ValidationError& e) {
      throw ShapeMismatch("subject '" + r.subject_id + "': " + e.what());
    }
    entries.emplace(r.subject_id, encode(m, v));
  }
  return LatentStore(manifest, m.config_hash(), m.latent_shape(), std::move(entries));
}

/// Flattened mu (channel-last) for each id.
inline std::vector<std::vector<double>> latent_features(const LatentStore& store, const std::vector<std::string>& ids) {
  std::vector<std::vector<double>> rows;
  rows.reserve(ids.size());
  for (const auto& id : ids) rows.push_back(store.get(id).mu());
  return rows;
}

/// exp(0.5 log_var) rows matching latent_features.
inline std::vector<std::vector<double>> latent_sigmas(const LatentStore& store, const std::vector<std::string>& ids) {
  std::vector<std::vector<double>> rows;
  for (const auto& id : ids) {
    const auto& d = store.get(id);
    std::vector<double> s(d.shape().size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = d.sigma(i);
    rows.push_back(std::move(s));
  }
  return rows;
}

// ---------------------------------------------------------------- classifier training

struct ClassifierTrainConfig {
  double lr = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double focal_gamma = 2.0;
  double ce_weight = 0.7;
  double focal_weight = 0.3;
  bool class_weighting = true;
  bool sample_z = false;  // train on z = mu + sigma * eps (fresh eps each epoch) instead of mu
  std::uint64_t seed = 0;
  friend bool operator==(const ClassifierTrainConfig&, const ClassifierTrainConfig&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ClassifierTrainConfig, lr, epochs, batch_size, focal_gamma, ce_weight,
                                                focal_weight, class_weighting, sample_z, seed)

struct ClassifierTrainResult {
  ClassifierModel<float> model;
  std::vector<double> epoch_loss;
  std::vector<double> class_weights;
  std::vector<std::string> class_weight_ids;  // the ids whose labels set the weights
};

/// Batches of `bs` over a shuffled order; a trailing batch of one is folded
/// into the previous batch because batch norm needs two rows.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t bs) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += bs)
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + bs));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

/// Trains a fresh head on the given rows only. With cfg.sample_z, `sigma`
/// holds per-row standard deviations and each epoch sees a new sample.
inline ClassifierTrainResult fit_classifier(const std::vector<std::vector<double>>& rows,
                                            const std::vector<std::size_t>& labels, const std::vector<std::string>& ids,
                                            std::size_t n_classes, const ClassifierTrainConfig& cfg,
                                            const std::vector<std::vector<double>>* sigma = nullptr) {
  if (rows.size() != labels.size() || rows.size() != ids.size()) throw ValidationError("fit_classifier: length mismatch");
  if (rows.size() < 2) throw ValidationError("fit_classifier: need at least two training samples");
  if (cfg.batch_size < 2) throw ValidationError("classifier batch_size must be >= 2");
  const std::size_t dim = rows.front().size();
  for (const auto& r : rows)
    if (r.size() != dim) throw ShapeMismatch("fit_classifier: ragged feature rows");
  if (cfg.sample_z && (!sigma || sigma->size() != rows.size()))
    throw ValidationError("sample_z needs one sigma row per training row");

  ClassifierTrainResult res{build_classifier<float>(dim, n_classes, derive_seed(cfg.seed, "clf-init")), {}, {}, ids};
  res.class_weights = cfg.class_weighting ? class_weights_from(labels, n_classes) : std::vector<double>(n_classes, 1.0);
  if (!cfg.class_weighting)
    for (std::size_t c = 0; c < n_classes; ++c)
      if (std::count(labels.begin(), labels.end(), c) == 0)
        throw ValidationError("class " + std::to_string(c) + " is empty in the training split");
  ClassLossConfig lc{cfg.focal_gamma, {cfg.ce_weight, cfg.focal_weight}, res.class_weights};
  lc.validate(n_classes);

  Adam<float> adam(cfg.lr);
  Rng order_rng(derive_seed(cfg.seed, "clf-batches"));
  Rng drop_rng(derive_seed(cfg.seed, "clf-dropout"));
  Rng z_rng(derive_seed(cfg.seed, "clf-z"));
  std::vector<std::size_t> order(rows.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order.begin(), order.end());
    double sum = 0.0;
    std::size_t seen = 0;
    for (const auto& b : make_batches(order, cfg.batch_size)) {
      Tensor<float> x({b.size(), dim});
      std::vector<std::size_t> y(b.size());
      for (std::size_t r = 0; r < b.size(); ++r) {
        for (std::size_t j = 0; j < dim; ++j) {
          double v = rows[b[r]][j];
          if (cfg.sample_z) v += (*sigma)[b[r]][j] * z_rng.normal();
          x[r * dim + j] = float(v);
        }
        y[r] = labels[b[r]];
      }
      res.model.params.zero_grad();
      auto logits = classifier_forward(res.model, ad::Var<float>(std::move(x)), true, &drop_rng);
      auto loss = classifier_total_loss(logits, y, lc);
      const double lv = double(loss.item());
      if (!std::isfinite(lv)) throw DivergenceError("non-finite classifier loss in epoch " + std::to_string(e));
      ad::backward(loss);
      adam.step(res.model.params);
      sum += lv * double(b.size());
      seen += b.size();
    }
    res.epoch_loss.push_back(sum / double(seen));
  }
  return res;
}

/// Trains on the fold's training split of `d`, features taken from the store.
inline ClassifierTrainResult train_classifier(const LatentStore& store, const TaskDataset& d, const FoldPlan& plan,
                                              std::size_t fold, const ClassifierTrainConfig& cfg) {
  if (fold >= plan.folds.size()) throw ValidationError("fold index out of range");
  const auto& f = plan.folds[fold];
  std::vector<std::size_t> y;
  for (auto i : f.train) y.push_back(d.labels.at(i));
  const auto sig = latent_sigmas(store, f.train_ids);
  return fit_classifier(latent_features(store, f.train_ids), y, f.train_ids, d.task.n_classes, cfg, &sig);
}

// ---------------------------------------------------------------- cross-validation

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::vector<std::string> class_weight_ids;
  std::vector<std::string> feature_fit_ids;  // ids a per-fold feature map (e.g. PCA) was fitted on
  std::vector<double> class_weights;
  std::vector<double> epoch_loss;
  std::vector<std::size_t> truth;
  std::vector<std::vector<double>> probs;
  MetricsReport metrics;
};

struct CVReport {
  std::string task;
  std::string features = "latent_mu";
  std::size_t k = 0;
  std::size_t n_classes = 0;
  std::vector<std::string> class_names;
  std::size_t positive_class = 1;
  std::vector<FoldResult> folds;
  std::map<std::string, double> mean;
  std::map<std::string, double> std;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();
};

/// Scalar summary of one fold: accuracy, auc, headline sensitivity and
/// specificity (positive class for binary tasks, class average otherwise)
/// and per-class values.
inline std::map<std::string, double> fold_scalars(const MetricsReport& r, const std::vector<std::string>& names,
                                                  std::size_t positive) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> s;
  s["accuracy"] = r.accuracy;
  s["auc"] = r.auc ? *r.auc : nan;
  if (r.n_classes == 2) {
    s["sensitivity"] = r.sensitivity[positive];
    s["specificity"] = r.specificity[positive];
  } else {
    double se = 0, sp = 0;
    for (std::size_t c = 0; c < r.n_classes; ++c) {
      se += r.sensitivity[c];
      sp += r.specificity[c];
    }
    s["sensitivity"] = se / double(r.n_classes);
    s["specificity"] = sp / double(r.n_classes);
  }
  for (std::size_t c = 0; c < r.n_classes; ++c) {
    s["sensitivity_" + names[c]] = r.sensitivity[c];
    s["specificity_" + names[c]] = r.specificity[c];
  }
  return s;
}

/// Fills mean and sample standard deviation (n-1) of every fold scalar.
inline void aggregate(CVReport& rep) {
  rep.mean.clear();
  rep.std.clear();
  std::map<std::string, std::vector<double>> cols;
  for (const auto& f : rep.folds)
    for (const auto& [k, v] : fold_scalars(f.metrics, rep.class_names, rep.positive_class)) cols[k].push_back(v);
  for (const auto& [k, v] : cols) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= double(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    rep.mean[k] = m;
    rep.std[k] = v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0;
  }
}

inline nlohmann::json to_json(const CVReport& r) {
  nlohmann::json j;
  j["task"] = r.task;
  j["features"] = r.features;
  j["k"] = r.k;
  j["n_classes"] = r.n_classes;
  j["class_names"] = r.class_names;
  j["positive_class"] = r.positive_class;
  auto scalars = [](const std::map<std::string, double>& m) {
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [k, v] : m) o[k] = nan_to_null(v);
    return o;
  };
  j["mean"] = scalars(r.mean);
  j["std"] = scalars(r.std);
  j["folds"] = nlohmann::json::array();
  for (const auto& f : r.folds) {
    nlohmann::json fj{{"fold", f.fold},
                      {"metrics", to_json(f.metrics)},
                      {"train_ids", f.train_ids},
                      {"test_ids", f.test_ids},
                      {"class_weight_ids", f.class_weight_ids},
                      {"feature_fit_ids", f.feature_fit_ids},
                      {"class_weights", f.class_weights},
                      {"epoch_loss", f.epoch_loss},
                      {"truth", f.truth},
                      {"probs", f.probs}};
    j["folds"].push_back(std::move(fj));
  }
  j["config"] = r.config;
  j["seeds"] = r.seeds;
  return j;
}

inline CVReport cv_report_from_json(const nlohmann::json& j) {
  CVReport r;
  r.task = j.at("task");
  r.features = j.value("features", "latent_mu");
  r.k = j.at("k");
  r.n_classes = j.at("n_classes");
  r.class_names = j.at("class_names").get<std::vector<std::string>>();
  r.positive_class = j.at("positive_class");
  auto nn = [](const nlohmann::json& v) { return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>(); };
  for (const auto& fj : j.at("folds")) {
    FoldResult f;
    f.fold = fj.at("fold");
    f.train_ids = fj.at("train_ids").get<std::vector<std::string>>();
    f.test_ids = fj.at("test_ids").get<std::vector<std::string>>();
    f.class_weight_ids = fj.at("class_weight_ids").get<std::vector<std::string>>();
    f.feature_fit_ids = fj.at("feature_fit_ids").get<std::vector<std::string>>();
    f.class_weights = fj.at("class_weights").get<std::vector<double>>();
    f.epoch_loss = fj.at("epoch_loss").get<std::vector<double>>();
    f.truth = fj.at("truth").get<std::vector<std::size_t>>();
    f.probs = fj.at("probs").get<std::vector<std::vector<double>>>();
    const auto& m = fj.at("metrics");
    f.metrics.n_classes = m.at("n_classes");
    f.metrics.accuracy = m.at("accuracy");
    for (const auto& v : m.at("sensitivity")) f.metrics.sensitivity.push_back(nn(v));
    for (const auto& v : m.at("specificity")) f.metrics.specificity.push_back(nn(v));
    f.metrics.support = m.at("support").get<std::vector<std::size_t>>();
    f.metrics.confusion = m.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    if (!m.at("auc").is_null()) f.metrics.auc = m.at("auc").get<double>();
    if (m.contains("per_class_auc"))
      for (const auto& v : m.at("per_class_auc")) f.metrics.per_class_auc.push_back(nn(v));
    r.folds.push_back(std::move(f));
  }
  aggregate(r);
  r.config = j.value("config", nlohmann::json::object());
  r.seeds = j.value("seeds", nlohmann::json::object());
  return r;
}

/// Train and test feature rows for one fold, plus the ids any fitted feature
/// map saw.
struct FoldFeatures {
  std::vector<std::vector<double>> train;
  std::vector<std::vector<double>> test;
  std::vector<std::string> fit_ids;
  std::vector<std::vector<double>> train_sigma;  // only for sampled-z training
};

using FoldFeatureFn = std::function<FoldFeatures(const Fold&)>;

/// Per-fold train -> evaluate cycle. Folds may run on `jobs` threads; each
/// fold's seeds depend only on the fold index, so results do not depend on
/// scheduling.
inline CVReport run_cv_features(const TaskDataset& d, const FoldPlan& plan, const FoldFeatureFn& features,
                                const ClassifierTrainConfig& cfg, std::size_t jobs = 1) {
  CVReport rep;
  rep.task = to_string(d.task.name);
  rep.k = plan.k;
  rep.n_classes = d.task.n_classes;
  rep.class_names = d.task.class_names;
  rep.positive_class = d.task.positive_class;
  rep.folds.resize(plan.folds.size());
  rep.config = {{"classifier", cfg}};
  rep.seeds = {{"fold_plan", plan.seed}, {"classifier", cfg.seed}};

  auto run_fold = [&](std::size_t fi) {
    const auto& f = plan.folds[fi];
    auto feats = features(f);
    std::vector<std::size_t> ytr, yte;
    for (auto i : f.train) ytr.push_back(d.labels.at(i));
    for (auto i : f.test) yte.push_back(d.labels.at(i));
    ClassifierTrainConfig fc = cfg;
    fc.seed = derive_seed(cfg.seed, "fold-" + std::to_string(fi));
    auto tr = fit_classifier(feats.train, ytr, f.train_ids, d.task.n_classes, fc, &feats.train_sigma);
    auto probs = classify(tr.model, feats.test, Mode::Eval);
    FoldResult& out = rep.folds[fi];
    out.fold = fi;
    out.train_ids = f.train_ids;
    out.test_ids = f.test_ids;
    out.class_weight_ids = tr.class_weight_ids;
    out.feature_fit_ids = feats.fit_ids;
    out.class_weights = tr.class_weights;
    out.epoch_loss = tr.epoch_loss;
    out.truth = yte;
    out.metrics = evaluate_predictions(probs, yte, d.task.n_classes);
    out.probs = std::move(probs);
  };

  jobs = std::max<std::size_t>(1, std::min(jobs, plan.folds.size()));
  if (jobs == 1) {
    for (std::size_t fi = 0; fi < plan.folds.size(); ++fi) run_fold(fi);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(plan.folds.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t)
      pool.emplace_back([&] {
        for (std::size_t fi; (fi = next++) < plan.folds.size();) {
          try {
            run_fold(fi);
          } catch (...) {
            errors[fi] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  aggregate(rep);
  return rep;
}

/// Cross-validated classification on flattened latent means.
inline CVReport run_cv(const LatentStore& store, const TaskSpec& task, std::size_t k, std::uint64_t fold_seed,
                       const ClassifierTrainConfig& cfg, std::size_t jobs = 1) {
  const auto d = filter_task(store.manifest(), task);
  const auto plan = kfold_split(d, k, fold_seed);
  auto feats = [&](const Fold& f) {
    return FoldFeatures{latent_features(store, f.train_ids), latent_features(store, f.test_ids), {},
                        cfg.sample_z ? latent_sigmas(store, f.train_ids) : std::vector<std::vector<double>>{}};
  };
  auto rep = run_cv_features(d, plan, feats, cfg, jobs);
  rep.config["latent_config_hash"] = store.config_hash();
  rep.config["latent_shape"] = latent_shape_str(store.latent_shape());
  rep.config["k"] = k;
  return rep;
}

/// subject_id, fold, truth, p_<class>..., predicted, one row per test subject.
inline std::string predictions_csv(const CVReport& r) {
  std::string out = "subject_id,fold,truth";
  for (const auto& c : r.class_names) out += ",p_" + c;
  out += ",predicted\n";
  for (const auto& f : r.folds)
    for (std::size_t i = 0; i < f.test_ids.size(); ++i) {
      out += f.test_ids[i] + "," + std::to_string(f.fold) + "," + r.class_names[f.truth[i]];
      for (double p : f.probs[i]) out += "," + nlohmann::json(p).dump();
      out += "," + r.class_names[argmax(f.probs[i])] + "\n";
    }
  return out;
}

// ---------------------------------------------------------------- leakage audit

/// Every way a fold's test subjects could have reached its training side.
/// Empty means clean.
inline std::vector<std::string> audit_leakage(const CVReport& r) {
  std::vector<std::string> problems;
  std::set<std::string> seen_test;
  for (const auto& f : r.folds) {
    const std::set<std::string> test(f.test_ids.begin(), f.test_ids.end());
    auto check = [&](const std::vector<std::string>& ids, const char* what) {
      for (const auto& id : ids)
        if (test.count(id)) problems.push_back("fold " + std::to_string(f.fold) + ": test subject " + id + " in " + what);
    };
    check(f.train_ids, "training set");
    check(f.class_weight_ids, "class-weight computation");
    check(f.feature_fit_ids, "feature-map fit");
    for (const auto& id : f.test_ids)
      if (!seen_test.insert(id).second) problems.push_back("subject " + id + " appears in more than one test fold");
  }
  return problems;
}

}  // namespace latent3d

#endif
