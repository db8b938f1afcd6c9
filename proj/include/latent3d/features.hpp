#ifndef LATENT3D_FEATURES_HPP
#define LATENT3D_FEATURES_HPP

// Feature extractors used by the perceptual loss and the embedding-based
// fidelity metrics. The default is a fixed, seeded, untrained convolutional
// pyramid; pretrained weights can be supplied through a ParamStore with the
// same layer names.

#include <memory>
#include <string>
#include <vector>

#include "latent3d/ops.hpp"
#include "latent3d/params.hpp"

namespace latent3d {

template <typename T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  /// Feature maps for x: [N, 1, H, W, D], one entry per declared level.
  virtual std::vector<ad::Var<T>> features(const ad::Var<T>& x) const = 0;
  virtual std::string name() const = 0;
};

/// Single level equal to the input itself.
template <typename T>
class IdentityExtractor final : public FeatureExtractor<T> {
 public:
  std::vector<ad::Var<T>> features(const ad::Var<T>& x) const override { return {x}; }
  std::string name() const override { return "identity"; }
};

struct PyramidConfig {
  std::vector<std::size_t> channels{8, 16, 32};
  std::uint64_t seed = 0x5eed;
};

/// conv3(stride 1) -> SiLU, then (conv3 stride 2 -> SiLU) for every further
/// level. Level l has channels[l] maps at edge / 2^l.
template <typename T>
class ConvPyramidExtractor final : public FeatureExtractor<T> {
 public:
  explicit ConvPyramidExtractor(PyramidConfig cfg = {}) : cfg_(std::move(cfg)) {
    if (cfg_.channels.empty()) throw ValidationError("feature pyramid needs at least one level");
    std::size_t ci = 1;
    for (std::size_t l = 0; l < cfg_.channels.size(); ++l) {
      const std::size_t co = cfg_.channels[l], fan = ci * 27;
      params_.add_uniform(layer(l) + ".w", {co, ci, 3, 3, 3}, fan, cfg_.seed);
      params_.add_uniform(layer(l) + ".b", {co}, fan, cfg_.seed);
      // Untrained fan-in init shrinks activations level by level; rescale so
      // every level carries signal of comparable magnitude.
      for (auto& w : params_[layer(l) + ".w"].mutable_value().values()) w *= T(std::sqrt(3.0));
      ci = co;
    }
    freeze();
  }

  /// Pyramid with externally supplied weights; names must match
  /// "feat.l<k>.w" / "feat.l<k>.b".
  ConvPyramidExtractor(PyramidConfig cfg, ParamStore<T> weights) : cfg_(std::move(cfg)), params_(std::move(weights)) {
    std::size_t ci = 1;
    for (std::size_t l = 0; l < cfg_.channels.size(); ++l) {
      const auto& w = params_[layer(l) + ".w"];
      if (w.shape() != Shape{cfg_.channels[l], ci, 3, 3, 3})
        throw ShapeMismatch("feature weights " + layer(l) + " have shape " + shape_str(w.shape()));
      ci = cfg_.channels[l];
    }
    freeze();
  }

  std::vector<ad::Var<T>> features(const ad::Var<T>& x) const override {
    std::vector<ad::Var<T>> out;
    ad::Var<T> h = x;
    for (std::size_t l = 0; l < cfg_.channels.size(); ++l) {
      const ops::ConvSpec spec{3, l == 0 ? std::size_t{1} : std::size_t{2}, 1};
      h = ops::silu(ops::conv3d(h, params_[layer(l) + ".w"], params_[layer(l) + ".b"], spec));
      out.push_back(h);
    }
    return out;
  }

  std::string name() const override { return "conv_pyramid"; }
  const ParamStore<T>& params() const { return params_; }
  const PyramidConfig& config() const { return cfg_; }

  static std::string layer(std::size_t l) { return "feat.l" + std::to_string(l); }

 private:
  // Extractor weights are never trained.
  void freeze() {
    for (auto& [_, v] : params_.params()) v = ad::Var<T>(v.value(), false);
  }

  PyramidConfig cfg_;
  ParamStore<T> params_;
};

/// Concatenation of all levels of one sample, flattened.
template <typename T>
std::vector<double> embedding(const FeatureExtractor<T>& f, const Tensor<T>& x) {
  ad::NoGradGuard ng;
  std::vector<double> e;
  for (const auto& level : f.features(ad::Var<T>(x)))
    for (T v : level.value().values()) e.push_back(double(v));
  return e;
}

}  // namespace latent3d

#endif
