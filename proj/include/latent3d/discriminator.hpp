#ifndef LATENT3D_DISCRIMINATOR_HPP
#define LATENT3D_DISCRIMINATOR_HPP

#include <string>
#include <vector>

#include "json.hpp"

#include "latent3d/ops.hpp"
#include "latent3d/params.hpp"

namespace latent3d {

struct DiscriminatorConfig {
  std::vector<std::size_t> channels{32, 64, 128, 256};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  double slope = 0.2;
  friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiscriminatorConfig, channels, kernel, stride, slope)

/// Patch discriminator: strided conv + leaky activation per stage, then a
/// 1-channel patch-logit map.
template <typename T = float>
struct DiscriminatorModel {
  DiscriminatorConfig config;
  ParamStore<T> params;
};

using DiscriminatorParameters = DiscriminatorModel<float>;

inline std::string disc_layer(std::size_t l) { return "disc.l" + std::to_string(l); }

template <typename T = float>
DiscriminatorModel<T> build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  if (cfg.channels.empty()) throw ValidationError("discriminator needs at least one stage");
  if (cfg.kernel % 2 == 0) throw ValidationError("discriminator kernel must be odd");
  DiscriminatorModel<T> d{cfg, {}};
  std::size_t ci = 1;
  const std::size_t k = cfg.kernel, kk = k * k * k;
  for (std::size_t l = 0; l < cfg.channels.size(); ++l) {
    d.params.add_uniform(disc_layer(l) + ".w", {cfg.channels[l], ci, k, k, k}, ci * kk, seed);
    d.params.add_uniform(disc_layer(l) + ".b", {cfg.channels[l]}, ci * kk, seed);
    ci = cfg.channels[l];
  }
  d.params.add_uniform("disc.out.w", {1, ci, k, k, k}, ci * kk, seed);
  d.params.add_uniform("disc.out.b", {1}, ci * kk, seed);
  return d;
}

/// Patch logits for x: [N, 1, E, E, E].
template <typename T>
ad::Var<T> discriminate(const DiscriminatorModel<T>& d, const ad::Var<T>& x) {
  const auto& c = d.config;
  ad::Var<T> h = x;
  for (std::size_t l = 0; l < c.channels.size(); ++l) {
    h = ops::conv3d(h, d.params[disc_layer(l) + ".w"], d.params[disc_layer(l) + ".b"],
                    {c.kernel, c.stride, c.kernel / 2});
    h = ops::leaky_relu(h, T(c.slope));
  }
  return ops::conv3d(h, d.params["disc.out.w"], d.params["disc.out.b"], {c.kernel, 1, c.kernel / 2});
}

}  // namespace latent3d

#endif
