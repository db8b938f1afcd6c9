// End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
// process exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

#include <unistd.h>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "latent3d/cli.hpp"
#include "latent3d/latent_analysis.hpp"
#include "latent3d/losses.hpp"
#include "latent3d/metrics.hpp"
#include "latent3d/synthdata.hpp"
#include "latent3d/trainer.hpp"
#include "latent3d/vae.hpp"
#include "oracles.hpp"

using namespace latent3d;
using check::gradcheck;
using check::random_leaf;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;
  std::vector<std::string> failures;

  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failures.push_back(what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

// Relative closeness; an expected value of exactly zero needs an exact-ish zero.
bool close_rel(double got, double want, double tol = 1e-6) {
  if (want == 0.0) return std::abs(got) <= 1e-12;
  return std::abs(got - want) <= tol * std::abs(want);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1. losses

Tensor<double> logits_for_p(double p) {
  Tensor<double> t({1, 2});
  t[0] = std::log(p);
  t[1] = std::log(1 - p);
  return t;
}

// -sum w_y log p_y (1-p_y)^gamma / sum w_y, straight from the softmax.
double ce_reference(const Tensor<double>& logits, const std::vector<std::size_t>& y, const std::vector<double>& w,
                    double gamma) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(logits[i * k + c]);
    const double p = std::exp(logits[i * k + y[i]]) / z;
    const double wi = w.empty() ? 1.0 : w[y[i]];
    num += -wi * std::pow(1 - p, gamma) * std::log(p);
    den += wi;
  }
  return num / den;
}

Outcome loss_oracles() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const double ln2 = std::numbers::ln2;
  Rng rng(101);

  auto x = oracle::random_volume({6, 6, 6}, rng), y = oracle::random_volume({6, 6, 6}, rng);
  o.expect(l1_recon(x, x) == 0.0, "l1_recon(x, x) != 0");
  o.expect(close_rel(l1_recon(Volume::filled({4, 4, 4}, 0.f), Volume::filled({4, 4, 4}, 0.5f)), 0.5),
           "l1_recon(0, 0.5) != 0.5");
  double brute = 0;
  for (std::size_t i = 0; i < x.size(); ++i) brute += std::abs(double(x[i]) - double(y[i]));
  o.expect(close_rel(l1_recon(x, y), brute / double(x.size())), "l1_recon differs from brute-force mean |d|");

  const LatentShape one{1, 1, 1, 1}, many{2, 2, 2, 3};
  o.expect(kl_divergence(LatentDistribution(many, std::vector<double>(many.size(), 0.0),
                                            std::vector<double>(many.size(), 0.0))) == 0.0,
           "KL(mu=0, sigma=1) != 0");
  o.expect(close_rel(kl_divergence(LatentDistribution(one, {1.0}, {0.0})), 0.5), "KL(mu=1, sigma=1) != 0.5");
  o.expect(close_rel(kl_divergence(LatentDistribution(one, {0.0}, {-2.0})), 0.5 * (std::exp(-2.0) + 2 - 1)),
           "KL(mu=0, log_var=-2) != 0.5(e^-2 + 1)");

  const auto half = logits_for_p(0.5);
  Tensor<double> sure({1, 2}, std::vector<double>{0.0, -800.0});
  o.expect(close_rel(weighted_ce(half, {0}, {2.0, 1.0}), ln2), "weighted_ce(p=0.5, w=2) != ln2");
  o.expect(close_rel(weighted_ce(sure, {0}, {1.0, 1.0}), 0.0), "weighted_ce(p=1) != 0");
  o.expect(close_rel(focal_loss(half, {0}, 2.0), 0.25 * ln2), "focal(p=0.5, gamma=2) != 0.25 ln2");
  o.expect(close_rel(focal_loss(sure, {0}, 2.0), 0.0), "focal(p=1) != 0");
  ClassLossConfig cfg;
  o.expect(close_rel(classifier_total_loss(half, {0}, cfg), 0.7 * ln2 + 0.3 * 0.25 * ln2),
           "total(p=0.5) != 0.7 ln2 + 0.3 * 0.25 ln2");
  o.expect(close_rel(classifier_total_loss(sure, {0}, cfg), 0.0), "total(p=1) != 0");

  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng.below(12), k = 2 + rng.below(3);
    Tensor<double> lg({n, k});
    for (auto& v : lg.values()) v = 3 * rng.normal();
    std::vector<std::size_t> lab(n);
    for (auto& l : lab) l = rng.below(k);
    std::vector<double> w(k), uniform(k, 1.0);
    for (auto& v : w) v = 0.2 + 2 * rng.uniform();
    const double gamma = 3 * rng.uniform();
    o.expect(close_rel(weighted_ce(lg, lab, uniform), ce_reference(lg, lab, {}, 0)), "uniform weighted_ce != CE");
    o.expect(close_rel(weighted_ce(lg, lab, w), ce_reference(lg, lab, w, 0)), "weighted_ce != reference");
    o.expect(close_rel(focal_loss(lg, lab, gamma), ce_reference(lg, lab, {}, gamma)), "focal != reference");
    o.expect(close_rel(focal_loss(lg, lab, 0.0), weighted_ce(lg, lab, uniform)), "focal(gamma=0) != CE");
    ClassLossConfig c;
    c.gamma = gamma;
    c.class_weights = w;
    o.expect(close_rel(classifier_total_loss(lg, lab, c),
                       0.7 * ce_reference(lg, lab, w, 0) + 0.3 * ce_reference(lg, lab, {}, gamma)),
             "total != 0.7 CE_w + 0.3 focal");
    c.mix = {1.0, 0.0};
    o.expect(close_rel(classifier_total_loss(lg, lab, c), weighted_ce(lg, lab, w)), "mix (1, 0) != weighted_ce");
  }
  o.expect(close_rel(combine_losses(1, 1.0, 1.0, 1).total, 1 + 2e-3 + 5e-3 + 1e-8), "combined total arithmetic");

  const double dt = seconds_since(t0);
  o.note("runtime " + fmt(dt, 3) + " s");
  o.expect(dt < 1.0, "runtime " + fmt(dt) + " s exceeds 1 s");
  return o;
}

// ------------------------------------------------------------- 2. gradients

Outcome gradient_checks() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  std::size_t total = 0;
  double worst = 0;
  auto record = [&](const char* name, const check::GradCheckResult& r) {
    total += r.checked;
    worst = std::max(worst, r.max_rel_error);
    o.expect(r.max_rel_error <= 1e-3, std::string(name) + ": " + r.worst);
  };

  auto a = random_leaf({2, 1, 8, 8, 8}, rng, 0.2, 0.5), b = random_leaf({2, 1, 8, 8, 8}, rng, 0.2, 0.5);
  record("l1", gradcheck([&] { return ops::l1_loss(a, b); }, {a, b}, 8, 1));
  record("mse", gradcheck([&] { return ops::mse_loss(a, b); }, {a, b}, 8, 2));
  auto mu = random_leaf({2, 3, 2, 2, 2}, rng), lv = random_leaf({2, 3, 2, 2, 2}, rng, 0.5);
  record("kl", gradcheck([&] { return ops::kl_loss(mu, lv); }, {mu, lv}, 8, 3));

  ConvPyramidExtractor<double> pyr(PyramidConfig{{2, 3}, 5});
  auto x1 = random_leaf({1, 1, 8, 8, 8}, rng, 0.2, 0.5), xh1 = random_leaf({1, 1, 8, 8, 8}, rng, 0.2, 0.5);
  record("perceptual", gradcheck([&] { return perceptual_loss(x1, xh1, pyr); }, {xh1}, 10, 4));
  auto disc = build_discriminator<double>(DiscriminatorConfig{{2, 2}, 3, 2, 0.2}, 6);
  record("adv_gen", gradcheck([&] { return gen_loss(disc, xh1); }, {xh1, disc.params["disc.l0.w"]}, 6, 5));
  record("adv_disc",
         gradcheck([&] { return disc_loss(disc, x1, xh1); }, {disc.params["disc.l1.w"], disc.params["disc.out.b"]}, 6, 6));

  auto lg = random_leaf({6, 3}, rng, 2.0);
  const std::vector<std::size_t> lab{0, 2, 1, 1, 0, 2};
  ClassLossConfig c;
  c.class_weights = {0.5, 2.0, 1.3};
  record("weighted_ce", gradcheck([&] { return ops::weighted_cross_entropy(lg, lab, c.class_weights); }, {lg}, 8, 7));
  record("focal", gradcheck([&] { return ops::focal_loss(lg, lab, 2.0); }, {lg}, 8, 8));
  record("classifier_total", gradcheck([&] { return classifier_total_loss(lg, lab, c); }, {lg}, 8, 9));

  // Two-stage micro-VAE on 8^3 input, every parameter tensor sampled.
  ModelConfig mc;
  mc.input_edge = 8;
  mc.stage_channels = {4, 8};
  mc.latent_edge = 4;
  mc.res_blocks_per_stage = 1;
  auto m = build_vae<double>(mc, 11);
  Tensor<double> x({2, 1, 8, 8, 8});
  for (auto& v : x.values()) v = rng.uniform();
  const auto ls = m.latent_shape();
  Tensor<double> eps({2, ls.c, ls.h, ls.w, ls.d});
  for (auto& v : eps.values()) v = rng.normal();
  const LossWeights w{0.3, 0.2, 0.1};
  auto vae_loss = [&] {
    ad::Var<double> xin(x);
    auto enc = encode_forward(m, xin);
    auto z = ops::reparameterize(enc.mu, enc.log_var, eps);
    auto xhat = decode_forward(m, z);
    return vae_total_loss(xin, xhat, enc.mu, enc.log_var, &disc, &pyr, w).total;
  };
  std::vector<ad::Var<double>> leaves;
  for (auto& [name, v] : m.params.params()) leaves.push_back(v);
  const std::size_t per_leaf = std::max<std::size_t>(2, (60 + leaves.size() - 1) / leaves.size());
  const auto rv = gradcheck(vae_loss, leaves, per_leaf, 12);
  record("micro-VAE", rv);
  o.expect(rv.checked >= 50, "micro-VAE checked only " + std::to_string(rv.checked) + " parameters");

  const double dt = seconds_since(t0);
  o.note(std::to_string(total) + " coordinates, " + std::to_string(rv.checked) + " VAE parameters, max rel err " +
         fmt(worst, 3) + ", runtime " + fmt(dt, 3) + " s");
  o.expect(dt < 120, "runtime " + fmt(dt) + " s exceeds 2 min");
  return o;
}

// ---------------------------------------------------------------- 3. shapes

Outcome shape_propagation() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const std::pair<const char*, LatentShape> want[] = {
      {"latent24", {24, 24, 24, 3}}, {"latent12", {12, 12, 12, 3}}, {"latent3", {3, 3, 3, 3}}};
  for (const auto& [name, shape] : want) {
    const auto cfg = cli::preset(name);
    o.expect(cfg.input_edge == 192, std::string(name) + " input edge is not 192");
    o.expect(latent_shape_for(cfg) == shape, std::string(name) + " latent shape mismatch");
  }
  const auto desk = ModelConfig::desk48();
  o.expect(desk.input_edge == 48 && desk.stages() == 4, "desk48 is not 48^3 with 4 stages");
  o.expect(latent_shape_for(desk) == (LatentShape{6, 6, 6, 3}), "desk48 latent shape is not (6,6,6,3)");
  const double meta = seconds_since(t0);
  o.expect(meta < 10, "metadata checks took " + fmt(meta) + " s");

  auto m = build_vae(desk, 7);
  Rng rng(4);
  const auto v = oracle::random_volume({48, 48, 48}, rng);
  const auto d = encode(m, v);
  o.expect(d.shape() == (LatentShape{6, 6, 6, 3}), "real 48^3 encode gave the wrong latent shape");
  const auto back = decode(m, mean_code(d));
  o.expect(back.shape() == (Dims3{48, 48, 48}), "decode did not return 48^3");
  const double dt = seconds_since(t0);
  o.note("metadata " + fmt(meta, 2) + " s, with forward pass " + fmt(dt, 3) + " s");
  o.expect(dt < 120, "runtime " + fmt(dt) + " s exceeds 2 min");
  return o;
}

// --------------------------------------------------------------- 4. overfit

Outcome overfit_sanity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  CohortSpec spec;
  spec.n_eu = 4;
  spec.n_ds = 4;
  spec.seed = 404;
  const auto cohort = generate_cohort_in_memory(spec);

  ModelConfig cfg;
  cfg.input_edge = 48;
  cfg.stage_channels = {8, 16};
  cfg.latent_edge = 24;
  cfg.res_blocks_per_stage = 2;
  cfg.batch_size = 8;
  cfg.lr_vae = 1e-3;
  cfg.lambda_perc = 0;
  cfg.lambda_adv = 0;
  cfg.seed = 4;

  const std::size_t max_steps = 2000, window = 50;
  std::vector<double> rec;
  std::optional<std::size_t> reached;
  double confirmed = std::numeric_limits<double>::quiet_NaN();
  VaeTrainOptions opt;
  opt.max_steps = max_steps;
  opt.on_step = [&](std::size_t step, const LossBreakdown& b, VaeModel<float>& model) {
    rec.push_back(b.rec);
    if (step % 50 == 0)
      std::cout << "    step " << step << " batch L1 " << fmt(b.rec) << " (" << fmt(seconds_since(t0), 4) << " s)"
                << std::endl;
    // The batch is the whole training set, so the batch L1 is the training
    // L1 under sampled z; confirm on posterior means before stopping.
    if (b.rec < 0.02 && step % 10 == 0) {
      const double l1 = mean_reconstruction_l1(model, cohort.volumes);
      if (l1 < 0.02) {
        reached = step;
        confirmed = l1;
        return false;
      }
    }
    return true;
  };
  auto res = train_vae(cohort.volumes, cfg, opt);
  const double final_l1 = reached ? confirmed : mean_reconstruction_l1(res.model, cohort.volumes);

  std::vector<double> means;
  for (std::size_t s = 0; s + window <= rec.size(); s += window)
    means.push_back(std::accumulate(rec.begin() + long(s), rec.begin() + long(s + window), 0.0) / double(window));
  std::string trace;
  for (std::size_t i = 0; i < means.size(); ++i) trace += (i ? " " : "") + fmt(means[i], 3);

  o.expect(reached.has_value(), "mean training L1 " + fmt(final_l1) + " after " + std::to_string(rec.size()) +
                                    " steps (need < 0.02 within " + std::to_string(max_steps) + ")");
  if (means.size() >= 2) o.expect(means.back() < means.front(), "training L1 did not decrease across windows");
  o.note("mean L1 " + fmt(final_l1) + " at step " + std::to_string(rec.size()) + "; 50-step window means: " + trace +
         "; runtime " + fmt(seconds_since(t0), 4) + " s");
  return o;
}

// --------------------------------------------------------------- 5. metrics

Outcome metric_oracles() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(505);

  o.expect(mse(Volume::filled({4, 4, 4}, 0.f), Volume::filled({4, 4, 4}, 0.5f)) == 0.25, "mse(0, 0.5) != 0.25");
  const double c1 = 1e-4;
  o.expect(close_rel(ssim3d(Volume::filled({7, 7, 7}, 0.f), Volume::filled({7, 7, 7}, 1.f)), c1 / (1 + c1)),
           "ssim(0, 1) != C1 / (1 + C1)");
  for (int t = 0; t < 6; ++t) {
    const std::size_t e = 7 + rng.below(3);
    auto x = oracle::random_volume({e, e, e}, rng), y = oracle::random_volume({e, e, e}, rng);
    double se = 0;
    for (std::size_t i = 0; i < x.size(); ++i) se += std::pow(double(x[i]) - double(y[i]), 2);
    o.expect(std::abs(mse(x, y) - se / double(x.size())) <= 1e-6, "mse differs from loop oracle");
    o.expect(mse(x, x) == 0.0 && mse(x, y) == mse(y, x), "mse identity/symmetry");
    o.expect(std::abs(ssim3d(x, y) - oracle::ssim_windows(x, y)) <= 1e-6, "ssim3d differs from window oracle");
    o.expect(std::abs(ssim3d(x, x) - 1.0) <= 1e-12, "ssim3d(x, x) != 1");
    o.expect(std::abs(ssim3d(x, y) - ssim3d(y, x)) <= 1e-12, "ssim3d asymmetric");
    o.expect(ms_ssim3d(x, y, 1) == ssim3d(x, y), "ms_ssim3d with one scale != ssim3d");
    o.expect(std::abs(ms_ssim3d(x, x) - 1.0) <= 1e-12, "ms_ssim3d(x, x) != 1");
  }
  auto big_x = oracle::random_volume({28, 28, 28}, rng), big_y = oracle::random_volume({28, 28, 28}, rng);
  o.expect(std::abs(ms_ssim3d(big_x, big_y, 3) - oracle::ms_ssim_reference(big_x, big_y, 3)) <= 1e-6,
           "3-scale ms_ssim3d differs from reference");
  o.expect(std::abs(ms_ssim3d(big_x, big_y, 3) - ms_ssim3d(big_y, big_x, 3)) <= 1e-12, "ms_ssim3d asymmetric");

  o.expect(roc_auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75, "AUC hand example != 0.75");
  o.expect(roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0, "separated AUC != 1");
  o.expect(roc_auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5, "all-tie AUC != 0.5");
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 4 + rng.below(40);
    std::vector<double> s(n);
    std::vector<int> truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(rng.below(8)) / 8.0;  // coarse grid forces ties
      truth[i] = int(i % 2 == 0 ? 0 : 1);
    }
    rng.shuffle(truth.begin(), truth.end());
    o.expect(roc_auc(s, truth) == oracle::auc_pairs(s, truth), "AUC differs from pair counting");
  }

  auto hand = confusion_metrics({0, 1, 1, 1}, {0, 0, 1, 1}, 2);
  o.expect(hand.accuracy == 0.75 && hand.sensitivity == std::vector<double>{0.5, 1.0} &&
               hand.specificity == std::vector<double>{1.0, 0.5},
           "confusion hand example");
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 5 + rng.below(40), k = 2 + rng.below(3);
    std::vector<std::size_t> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = i < k ? i : rng.below(k);
      p[i] = rng.below(k);
    }
    const auto r = confusion_metrics(p, y, k);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += p[i] == y[i];
    o.expect(std::abs(r.accuracy - double(hits) / double(n)) <= 1e-12, "confusion accuracy");
    for (std::size_t c = 0; c < k; ++c) {
      double tp = 0, fn = 0, tn = 0, fp = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (y[i] == c) (p[i] == c ? tp : fn) += 1;
        else (p[i] == c ? fp : tn) += 1;
      }
      o.expect(std::abs(r.sensitivity[c] - tp / (tp + fn)) <= 1e-12, "confusion sensitivity");
      if (tn + fp > 0) o.expect(std::abs(r.specificity[c] - tn / (tn + fp)) <= 1e-12, "confusion specificity");
    }
    const auto self = confusion_metrics(y, y, k);
    o.expect(self.accuracy == 1.0, "perfect predictions accuracy != 1");
  }
  const double dt = seconds_since(t0);
  o.note("runtime " + fmt(dt, 3) + " s");
  o.expect(dt < 60, "runtime " + fmt(dt) + " s exceeds 1 min");
  return o;
}

// ------------------------------------------------------ CLI-driven pipeline

struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string p(const fs::path& x) { return x.string(); }

void run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), {"latent3d", "--quiet"});
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  std::string line;
  for (const auto& a : args) line += a + " ";
  std::cout << "    $ " << line << std::endl;
  const int code = cli::run(int(argv.size()), argv.data(), out, err);
  if (code != 0) throw CliError("'" + line + "' exited " + std::to_string(code) + ": " + err.str());
}

const char* kPublicSpec = R"(n_eu = 24
n_ds = 0
seed = 101
id_prefix = "pub"
source_dataset = "synthetic-public"
)";

const char* kCohortSpec = R"(seed = 7
)";

const char* kStagedSpec = R"(n_eu = 10
n_ds = 90
ad_counts = [30, 30, 30]
id_counts = [30, 30, 30]
seed = 13
id_prefix = "stg"
)";

class Pipeline {
 public:
  Pipeline(fs::path work, bool reuse) : w_(std::move(work)), reuse_(reuse) {}

  const fs::path& work() const { return w_; }

  // Runs `args` unless `out` already holds a finished run and reuse is on.
  void stage(const fs::path& out, std::vector<std::string> args) {
    if (reuse_ && fs::exists(out / "config.toml") && fs::exists(out / "run.log")) return;
    if (fs::exists(out)) fs::remove_all(out);
    args.push_back("--out");
    args.push_back(p(out));
    run_cli(std::move(args));
  }

  void data() {
    if (data_done_) return;
    ensure_dir(w_);
    write_file_atomic(w_ / "public.toml", kPublicSpec);
    write_file_atomic(w_ / "cohort.toml", kCohortSpec);
    write_file_atomic(w_ / "staged.toml", kStagedSpec);
    stage(w_ / "public_raw", {"synth", "--spec", p(w_ / "public.toml")});
    stage(w_ / "cohort_raw", {"synth", "--spec", p(w_ / "cohort.toml")});
    stage(w_ / "public", {"preprocess", "--manifest", p(w_ / "public_raw/manifest.csv")});
    stage(w_ / "cohort", {"preprocess", "--manifest", p(w_ / "cohort_raw/manifest.csv")});
    data_done_ = true;
  }

  void vae() {
    if (vae_done_) return;
    data();
    stage(w_ / "vae", {"train-vae", "--manifest", p(w_ / "public/manifest.csv"), "--preset", "desk48", "--seed", "3"});
    stage(w_ / "cohort_latents", {"encode", "--checkpoint", p(ckpt()), "--manifest", p(w_ / "cohort/manifest.csv")});
    vae_done_ = true;
  }

  fs::path ckpt() const { return w_ / "vae/checkpoints/final.ckpt"; }

  void cv() {
    if (cv_done_) return;
    vae();
    const std::vector<std::string> common{"run-cv",    "--latents", p(w_ / "cohort_latents"), "--task", "eu_vs_ds",
                                          "--k",       "5",         "--seed",                  "11",     "--clf-seed",
                                          "5"};
    stage(w_ / "cv_full", common);
    auto pca = common;
    pca.insert(pca.end(), {"--pca-components", "2"});
    stage(w_ / "cv_pca2", pca);
    cv_done_ = true;
  }

  void staged() {
    if (staged_done_) return;
    vae();
    write_file_atomic(w_ / "staged.toml", kStagedSpec);
    stage(w_ / "staged_raw", {"synth", "--spec", p(w_ / "staged.toml")});
    stage(w_ / "staged", {"preprocess", "--manifest", p(w_ / "staged_raw/manifest.csv")});
    stage(w_ / "staged_latents", {"encode", "--checkpoint", p(ckpt()), "--manifest", p(w_ / "staged/manifest.csv")});
    stage(w_ / "cv_ad3", {"run-cv", "--latents", p(w_ / "staged_latents"), "--task", "ad_3class", "--k", "5", "--seed",
                          "11", "--clf-seed", "5"});
    staged_done_ = true;
  }

  nlohmann::json report(const std::string& run) const {
    return nlohmann::json::parse(read_file(w_ / run / "report.json"));
  }

 private:
  fs::path w_;
  bool reuse_;
  bool data_done_ = false, vae_done_ = false, cv_done_ = false, staged_done_ = false;
};

double num(const nlohmann::json& j) { return j.is_number() ? j.get<double>() : std::numeric_limits<double>::quiet_NaN(); }

// ------------------------------------------------- 6/7. EU vs DS and PCA

Outcome eu_vs_ds(Pipeline& pl) {
  Outcome o;
  pl.cv();
  const auto r = pl.report("cv_full");
  const double acc = num(r["mean"]["accuracy"]), auc = num(r["mean"]["auc"]);
  o.expect(r["folds"].size() == 5, "report does not have 5 folds");
  o.expect(acc >= 0.95, "mean accuracy " + fmt(acc) + " < 0.95");
  o.expect(auc >= 0.98, "mean AUC " + fmt(auc) + " < 0.98");
  o.note("full latents: accuracy " + fmt(acc) + ", AUC " + fmt(auc));
  return o;
}

Outcome pca_pipeline(Pipeline& pl) {
  Outcome o;
  pl.cv();
  const auto full = pl.report("cv_full"), pca = pl.report("cv_pca2");
  const double a_full = num(full["mean"]["accuracy"]), a_pca = num(pca["mean"]["accuracy"]);
  o.expect(pca["features"] == "pca2", "projected run does not report pca2 features");
  o.expect(a_pca >= a_full - 0.05, "pca2 accuracy " + fmt(a_pca) + " is more than 5 points below " + fmt(a_full));
  o.note("full " + fmt(a_full) + " vs pca2 " + fmt(a_pca) + " (AUC " + fmt(num(pca["mean"]["auc"])) + ")");
  return o;
}

// ------------------------------------------------------ 8. hard middle class

Outcome hard_middle(Pipeline& pl) {
  Outcome o;
  pl.staged();
  const auto r = pl.report("cv_ad3");
  const double nodet = num(r["mean"]["sensitivity_NoDet"]), prod = num(r["mean"]["sensitivity_ProdromalAD"]),
               ad = num(r["mean"]["sensitivity_AD"]);
  o.expect(prod < nodet && prod < ad, "ProdromalAD sensitivity is not the lowest");
  o.note("sensitivity NoDet " + fmt(nodet) + ", ProdromalAD " + fmt(prod) + ", AD " + fmt(ad) + "; accuracy " +
         fmt(num(r["mean"]["accuracy"])));
  return o;
}

// ---------------------------------------------------------- 9. no leakage

// Independent of audit_leakage: the training side of every fold must be the
// exact complement of its test side, and the class weights must be the ones
// implied by the training labels alone.
void check_folds(const CVReport& r, const TaskDataset& d, Outcome& o, const std::string& tag) {
  std::set<std::string> all(d.ids.begin(), d.ids.end()), covered;
  std::map<std::string, std::size_t> label;
  for (std::size_t i = 0; i < d.ids.size(); ++i) label[d.ids[i]] = d.labels[i];
  for (const auto& f : r.folds) {
    std::set<std::string> test(f.test_ids.begin(), f.test_ids.end()), train(f.train_ids.begin(), f.train_ids.end());
    for (const auto& id : test) o.expect(covered.insert(id).second, tag + ": " + id + " tested twice");
    std::set<std::string> complement;
    std::set_difference(all.begin(), all.end(), test.begin(), test.end(), std::inserter(complement, complement.end()));
    o.expect(train == complement, tag + ": fold " + std::to_string(f.fold) + " training set is not the complement");
    for (const auto* ids : {&f.train_ids, &f.class_weight_ids, &f.feature_fit_ids})
      for (const auto& id : *ids) o.expect(!test.count(id), tag + ": test subject " + id + " used for fitting");
    o.expect(std::set<std::string>(f.class_weight_ids.begin(), f.class_weight_ids.end()) == train,
             tag + ": class weights not computed on the training set");
    if (r.features != "latent_mu")
      o.expect(std::set<std::string>(f.feature_fit_ids.begin(), f.feature_fit_ids.end()) == train,
               tag + ": projection not fitted on the training set");
    std::vector<double> counts(r.n_classes, 0);
    for (const auto& id : f.train_ids) counts[label.at(id)] += 1;
    for (std::size_t c = 0; c < r.n_classes; ++c) {
      const double want = double(f.train_ids.size()) / (double(r.n_classes) * counts[c]);
      o.expect(close_rel(f.class_weights[c], want, 1e-12), tag + ": class weight differs from training counts");
    }
  }
  o.expect(covered == all, tag + ": test folds do not cover the task");
  const auto problems = audit_leakage(r);
  o.expect(problems.empty(), tag + ": audit reported " + (problems.empty() ? "" : problems.front()));
}

Outcome no_leakage(Pipeline& pl) {
  Outcome o;
  pl.cv();
  pl.staged();
  const auto t0 = std::chrono::steady_clock::now();
  const auto cohort = LatentStore::open(pl.work() / "cohort_latents");
  const auto staged = LatentStore::open(pl.work() / "staged_latents");

  std::size_t runs = 0;
  // Reports written by the CLI.
  for (const auto& [run, store] : {std::pair{"cv_full", &cohort}, {"cv_pca2", &cohort}, {"cv_ad3", &staged}}) {
    const auto rep = cv_report_from_json(pl.report(run));
    check_folds(rep, filter_task(store->manifest(), TaskSpec::make(rep.task)), o, run);
    ++runs;
  }
  // Every task, with raw and projected features, through the library.
  ClassifierTrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 9;
  for (auto task : {TaskName::EuVsDs, TaskName::AdBinary, TaskName::Ad3Class, TaskName::IdBinary}) {
    const auto spec = TaskSpec::make(task);
    const auto& store = task == TaskName::EuVsDs ? cohort : staged;
    const auto d = filter_task(store.manifest(), spec);
    check_folds(run_cv(store, spec, 5, 21, cfg), d, o, to_string(task));
    check_folds(classify_on_projection(store, spec, 5, 21, 2, cfg), d, o, to_string(task) + "/pca2");
    runs += 2;
  }
  // The audit must notice a planted leak.
  auto leaky = cv_report_from_json(pl.report("cv_pca2"));
  leaky.folds[1].feature_fit_ids.push_back(leaky.folds[1].test_ids.front());
  o.expect(!audit_leakage(leaky).empty(), "audit missed a test subject in the projection fit");
  leaky = cv_report_from_json(pl.report("cv_full"));
  leaky.folds[0].class_weight_ids.push_back(leaky.folds[0].test_ids.back());
  o.expect(!audit_leakage(leaky).empty(), "audit missed a test subject in the class weights");

  const double dt = seconds_since(t0);
  o.note(std::to_string(runs) + " cross-validation runs audited in " + fmt(dt, 3) + " s");
  o.expect(dt < 10, "audit runtime " + fmt(dt) + " s exceeds 10 s");
  return o;
}

// --------------------------------------------------------- 10. determinism

// Every file of two run directories, minus the log and the snapshot itself
// (the snapshot names its own output directory).
std::map<std::string, std::string> run_files(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "run.log" || rel == "config.toml") continue;
    files[rel] = read_file(e.path());
  }
  return files;
}

void expect_same_run(const fs::path& a, const fs::path& b, Outcome& o, std::size_t& compared) {
  const auto fa = run_files(a), fb = run_files(b);
  o.expect(!fa.empty(), a.filename().string() + " produced no files");
  for (const auto& [rel, bytes] : fa) {
    auto it = fb.find(rel);
    if (it == fb.end()) {
      o.expect(false, "replay of " + a.filename().string() + " lacks " + rel);
      continue;
    }
    o.expect(it->second == bytes, "replay of " + a.filename().string() + " differs in " + rel);
    ++compared;
  }
  for (const auto& [rel, bytes] : fb) o.expect(fa.count(rel), "replay of " + a.filename().string() + " adds " + rel);
}

Outcome determinism(Pipeline& pl) {
  Outcome o;
  pl.cv();
  pl.staged();
  const auto& w = pl.work();
  pl.stage(w / "vae_short", {"train-vae", "--manifest", p(w / "public/manifest.csv"), "--preset", "desk48", "--seed",
                             "5", "--max-steps", "3"});
  pl.stage(w / "pca", {"pca", "--latents", p(w / "cohort_latents"), "--group-by", "group"});
  pl.stage(w / "fidelity", {"eval-fidelity", "--checkpoint", p(pl.ckpt()), "--manifest", p(w / "public/manifest.csv")});
  pl.stage(w / "tables",
           {"report", "--runs", p(w / "cv_full"), p(w / "cv_pca2"), p(w / "cv_ad3"), p(w / "pca"), p(w / "fidelity")});

  const char* runs[] = {"cohort_raw", "cohort",   "vae_short", "cohort_latents", "cv_full",
                        "cv_pca2",    "cv_ad3",   "pca",       "fidelity",       "tables"};
  std::size_t compared = 0;
  for (const char* run : runs) {
    const fs::path replay = w / "replay" / run;
    if (fs::exists(replay)) fs::remove_all(replay);
    // The snapshot's header line names the subcommand that wrote it.
    std::istringstream head(read_file(w / run / "config.toml"));
    std::string hash, tool, command;
    head >> hash >> tool >> command;
    run_cli({command, "--config", p(w / run / "config.toml"), "--out", p(replay)});
    expect_same_run(w / run, replay, o, compared);
  }
  o.note(std::to_string(std::size(runs)) + " runs replayed, " + std::to_string(compared) + " files byte-identical");
  return o;
}

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the latent3d pipeline"};
  std::vector<int> only;
  std::string work;
  bool keep = false, reuse = false;
  app.add_option("--only", only, "Run only these criteria (1-10)");
  app.add_option("--work", work, "Working directory for pipeline artefacts (default: a fresh temporary directory)");
  app.add_flag("--keep", keep, "Keep the working directory afterwards");
  app.add_flag("--reuse", reuse, "Reuse finished pipeline stages found in --work");
  CLI11_PARSE(app, argc, argv);

  const bool temp = work.empty();
  const fs::path dir = temp ? fs::temp_directory_path() / ("latent3d-acceptance-" + std::to_string(::getpid())) : fs::path(work);
  Pipeline pl(dir, reuse);

  const std::vector<Criterion> all = {
      {1, "loss oracles", loss_oracles},
      {2, "gradient checks", gradient_checks},
      {3, "shape propagation", shape_propagation},
      {4, "overfit sanity", overfit_sanity},
      {5, "metric oracles", metric_oracles},
      {6, "synthetic EU vs DS pipeline", [&] { return eu_vs_ds(pl); }},
      {7, "PCA pipeline", [&] { return pca_pipeline(pl); }},
      {8, "3-class hard middle", [&] { return hard_middle(pl); }},
      {9, "no-leakage audit", [&] { return no_leakage(pl); }},
      {10, "determinism from snapshots", [&] { return determinism(pl); }},
  };

  std::vector<std::string> summary;
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    std::cout << "--- criterion " << c.id << ": " << c.name << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.expect(false, std::string("error: ") + e.what());
    }
    const double dt = seconds_since(t0);
    for (const auto& n : o.notes) std::cout << "    " << n << "\n";
    for (std::size_t i = 0; i < o.failures.size() && i < 10; ++i) std::cout << "    failed: " << o.failures[i] << "\n";
    if (o.failures.size() > 10) std::cout << "    (" << o.failures.size() - 10 << " more failures)\n";
    std::string line = std::string(o.pass ? "PASS" : "FAIL") + " [" + std::to_string(c.id) + "] " + c.name + " (" +
                       fmt(dt, 3) + " s)";
    std::cout << line << std::endl;
    summary.push_back(line);
    failed += !o.pass;
  }
  std::cout << "\n=== summary\n";
  for (const auto& s : summary) std::cout << s << "\n";
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  if (temp && !keep) fs::remove_all(dir);
  return failed ? 1 : 0;
}
