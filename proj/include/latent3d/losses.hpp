#ifndef LATENT3D_LOSSES_HPP
#define LATENT3D_LOSSES_HPP

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "json.hpp"

#include "latent3d/core_types.hpp"
#include "latent3d/discriminator.hpp"
#include "latent3d/features.hpp"
#include "latent3d/ops.hpp"

namespace latent3d {

// ---------------------------------------------------------------- graph level

/// Mean over levels of the per-level mean squared feature difference.
template <typename T>
ad::Var<T> perceptual_loss(const ad::Var<T>& x, const ad::Var<T>& xhat, const FeatureExtractor<T>& f) {
  const auto fx = [&] {
    ad::NoGradGuard ng;
    return f.features(x.detach());
  }();
  const auto fh = f.features(xhat);
  if (fx.size() != fh.size() || fx.empty()) throw ValidationError("feature extractor returned inconsistent levels");
  std::vector<ad::Var<T>> terms;
  for (std::size_t l = 0; l < fx.size(); ++l) terms.push_back(ops::mse_loss(fh[l], fx[l]));
  return ops::weighted_sum(terms, std::vector<double>(terms.size(), 1.0 / double(terms.size())));
}

/// Least-squares discriminator objective; x̂ is detached so only the
/// discriminator receives gradient.
template <typename T>
ad::Var<T> disc_loss(const DiscriminatorModel<T>& d, const ad::Var<T>& x, const ad::Var<T>& xhat) {
  auto real = ops::mse_to_constant(discriminate(d, x.detach()), T{1});
  auto fake = ops::mse_to_constant(discriminate(d, xhat.detach()), T{0});
  return ops::weighted_sum<T>({real, fake}, {0.5, 0.5});
}

/// Least-squares generator objective mean((D(x̂) - 1)^2).
template <typename T>
ad::Var<T> gen_loss(const DiscriminatorModel<T>& d, const ad::Var<T>& xhat) {
  return ops::mse_to_constant(discriminate(d, xhat), T{1});
}

struct LossWeights {
  double perc = 2e-3;
  double adv = 5e-3;
  double kl = 1e-8;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, perc, adv, kl)

inline LossWeights weights_from(const ModelConfig& c) { return {c.lambda_perc, c.lambda_adv, c.lambda_kl}; }

/// Scalar values of one VAE step. Terms with zero weight are not evaluated
/// and stay empty.
struct LossBreakdown {
  double rec = 0.0;
  std::optional<double> perc;
  std::optional<double> adv_gen;
  std::optional<double> adv_disc;
  double kl = 0.0;
  double total = 0.0;
  LossWeights weights;

  /// rec + λ_perc·perc + λ_adv·adv_gen + λ_KL·kl from the stored terms.
  double recomputed_total() const {
    return rec + weights.perc * perc.value_or(0.0) + weights.adv * adv_gen.value_or(0.0) + weights.kl * kl;
  }
};

inline nlohmann::json to_json(const LossBreakdown& b) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"rec", b.rec},         {"perc", opt(b.perc)}, {"adv_gen", opt(b.adv_gen)}, {"adv_disc", opt(b.adv_disc)},
          {"kl", b.kl},           {"total", b.total},    {"lambda_perc", b.weights.perc},
          {"lambda_adv", b.weights.adv}, {"lambda_kl", b.weights.kl}};
}

template <typename T>
struct VaeLossTerms {
  ad::Var<T> total;
  LossBreakdown breakdown;
};

/// rec + λ_perc·perc + λ_adv·adv_gen + λ_KL·kl over a batch. The
/// discriminator is only consulted when λ_adv > 0 and the extractor only when
/// λ_perc > 0.
template <typename T>
VaeLossTerms<T> vae_total_loss(const ad::Var<T>& x, const ad::Var<T>& xhat, const ad::Var<T>& mu,
                               const ad::Var<T>& log_var, const DiscriminatorModel<T>* disc,
                               const FeatureExtractor<T>* f, const LossWeights& w) {
  if (w.perc < 0 || w.adv < 0 || w.kl < 0) throw ValidationError("loss weights must be >= 0");
  VaeLossTerms<T> out;
  out.breakdown.weights = w;
  std::vector<ad::Var<T>> terms{ops::l1_loss(xhat, x)};
  std::vector<double> coeffs{1.0};
  out.breakdown.rec = double(terms[0].item());
  if (w.perc > 0) {
    if (!f) throw ValidationError("λ_perc > 0 needs a feature extractor");
    terms.push_back(perceptual_loss(x, xhat, *f));
    coeffs.push_back(w.perc);
    out.breakdown.perc = double(terms.back().item());
  }
  if (w.adv > 0) {
    if (!disc) throw ValidationError("λ_adv > 0 needs a discriminator");
    terms.push_back(gen_loss(*disc, xhat));
    coeffs.push_back(w.adv);
    out.breakdown.adv_gen = double(terms.back().item());
  }
  terms.push_back(ops::kl_loss(mu, log_var));
  coeffs.push_back(w.kl);
  out.breakdown.kl = double(terms.back().item());
  out.total = ops::weighted_sum(terms, coeffs);
  out.breakdown.total = double(out.total.item());
  return out;
}

// ---------------------------------------------------------------- classifier loss

struct ClassLossConfig {
  double gamma = 2.0;
  std::pair<double, double> mix{0.7, 0.3};
  std::vector<double> class_weights;  // empty means uniform

  void validate(std::size_t n_classes) const {
    if (gamma < 0) throw ValidationError("focal gamma must be >= 0");
    if (mix.first < 0 || mix.second < 0 || std::abs(mix.first + mix.second - 1.0) > 1e-12)
      throw ValidationError("loss mix components must be >= 0 and sum to 1");
    if (!class_weights.empty() && class_weights.size() != n_classes)
      throw ValidationError("class weight count does not match the number of classes");
  }
  std::vector<double> weights_for(std::size_t n_classes) const {
    return class_weights.empty() ? std::vector<double>(n_classes, 1.0) : class_weights;
  }
};

/// mix.first · weighted CE + mix.second · focal.
template <typename T>
ad::Var<T> classifier_total_loss(const ad::Var<T>& logits, const std::vector<std::size_t>& labels,
                                 const ClassLossConfig& cfg) {
  const std::size_t k = logits.shape().at(1);
  cfg.validate(k);
  auto ce = ops::weighted_cross_entropy(logits, labels, cfg.weights_for(k));
  auto fl = ops::focal_loss(logits, labels, cfg.gamma);
  return ops::weighted_sum<T>({ce, fl}, {cfg.mix.first, cfg.mix.second});
}

// ---------------------------------------------------------------- value level

/// Mean absolute voxel difference.
inline double l1_recon(const Volume& x, const Volume& xhat) {
  if (x.shape() != xhat.shape()) throw ShapeMismatch("l1_recon: " + dims_str(x.shape()) + " vs " + dims_str(xhat.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(double(x[i]) - double(xhat[i]));
  return acc / double(x.size());
}

/// 0.5 · Σ (μ² + exp(log_var) − log_var − 1) over every latent element.
inline double kl_divergence(const LatentDistribution& d) {
  double acc = 0.0;
  for (std::size_t i = 0; i < d.mu().size(); ++i) {
    const double m = d.mu()[i], lv = d.log_var()[i];
    acc += m * m + std::exp(lv) - lv - 1.0;
  }
  return 0.5 * acc;
}

inline double perceptual_loss(const Volume& x, const Volume& xhat, const FeatureExtractor<double>& f) {
  if (x.shape() != xhat.shape()) throw ShapeMismatch("perceptual_loss: shape mismatch");
  ad::NoGradGuard ng;
  return perceptual_loss(ad::Var<double>(x.as_tensor<double>()), ad::Var<double>(xhat.as_tensor<double>()), f).item();
}

struct AdversarialValues {
  double gen_loss;
  double disc_loss;
};

template <typename T>
AdversarialValues adversarial_losses(const Volume& x, const Volume& xhat, const DiscriminatorModel<T>& d) {
  if (x.shape() != xhat.shape()) throw ShapeMismatch("adversarial_losses: shape mismatch");
  ad::NoGradGuard ng;
  const ad::Var<T> vx(x.as_tensor<T>()), vh(xhat.as_tensor<T>());
  return {double(gen_loss(d, vh).item()), double(disc_loss(d, vx, vh).item())};
}

/// Composes a breakdown from already computed component values.
inline LossBreakdown combine_losses(double rec, std::optional<double> perc, std::optional<double> adv_gen, double kl,
                                    const LossWeights& w = {}) {
  LossBreakdown b{rec, perc, adv_gen, std::nullopt, kl, 0.0, w};
  b.total = b.recomputed_total();
  return b;
}

inline double weighted_ce(const Tensor<double>& logits, const std::vector<std::size_t>& labels,
                          const std::vector<double>& weights) {
  return ops::weighted_cross_entropy(ad::Var<double>(logits), labels, weights).item();
}

inline double focal_loss(const Tensor<double>& logits, const std::vector<std::size_t>& labels, double gamma = 2.0) {
  return ops::focal_loss(ad::Var<double>(logits), labels, gamma).item();
}

inline double classifier_total_loss(const Tensor<double>& logits, const std::vector<std::size_t>& labels,
                                    const ClassLossConfig& cfg) {
  return classifier_total_loss(ad::Var<double>(logits), labels, cfg).item();
}

}  // namespace latent3d

#endif
