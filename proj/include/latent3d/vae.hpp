#ifndef LATENT3D_VAE_HPP
#define LATENT3D_VAE_HPP

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "latent3d/core_types.hpp"
#include "latent3d/ops.hpp"
#include "latent3d/params.hpp"

namespace latent3d {

struct StageSpec {
  std::size_t channels = 0;
  std::size_t res_blocks = 0;
  bool resample = false;  // downsample after this encoder stage / upsample after this decoder stage
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(StageSpec, channels, res_blocks, resample)

/// One entry of a shape trace: the tensor shape after a named layer.
struct LayerShape {
  std::string layer;
  std::size_t channels;
  std::size_t edge;
};

struct VaeArchitecture {
  std::size_t input_edge = 0;
  std::size_t latent_channels = 3;
  std::vector<StageSpec> encoder_stages;
  std::vector<StageSpec> decoder_stages;

  static std::size_t norm_groups(std::size_t channels) { return std::min<std::size_t>(32, channels); }

  static VaeArchitecture from(const ModelConfig& cfg) {
    cfg.validate();
    VaeArchitecture a;
    a.input_edge = cfg.input_edge;
    a.latent_channels = cfg.latent_channels;
    const std::size_t n = cfg.stage_channels.size();
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t c = cfg.stage_channels[s];
      if (c % norm_groups(c) != 0)
        throw ValidationError("stage width " + std::to_string(c) + " is not divisible by its " +
                              std::to_string(norm_groups(c)) + " normalisation groups");
      a.encoder_stages.push_back({c, cfg.res_blocks_per_stage, s + 1 < n});
    }
    for (std::size_t s = n; s-- > 0;) a.decoder_stages.push_back({cfg.stage_channels[s], cfg.res_blocks_per_stage, s > 0});
    return a;
  }

  std::size_t stages() const { return encoder_stages.size(); }
  std::size_t downsamplings() const {
    return static_cast<std::size_t>(std::count_if(encoder_stages.begin(), encoder_stages.end(),
                                                  [](const StageSpec& s) { return s.resample; }));
  }
  std::size_t latent_edge() const { return input_edge >> downsamplings(); }
  LatentShape latent_shape() const { return {latent_edge(), latent_edge(), latent_edge(), latent_channels}; }

  /// Shape after every layer of encoder then decoder, computed from the
  /// architecture alone (no tensors are allocated).
  std::vector<LayerShape> trace() const {
    std::vector<LayerShape> t;
    std::size_t edge = input_edge;
    t.push_back({"enc.conv_in", encoder_stages.front().channels, edge});
    for (std::size_t s = 0; s < encoder_stages.size(); ++s) {
      const auto& st = encoder_stages[s];
      for (std::size_t b = 0; b < st.res_blocks; ++b)
        t.push_back({"enc.s" + std::to_string(s) + ".b" + std::to_string(b), st.channels, edge});
      if (st.resample) {
        edge = ops::conv_out_edge(edge, {3, 2, 1});
        t.push_back({"enc.s" + std::to_string(s) + ".down", st.channels, edge});
      }
    }
    t.push_back({"enc.head", 2 * latent_channels, edge});
    t.push_back({"dec.conv_in", decoder_stages.front().channels, edge});
    for (std::size_t i = 0; i < decoder_stages.size(); ++i) {
      const auto& st = decoder_stages[i];
      const std::size_t s = decoder_stages.size() - 1 - i;
      for (std::size_t b = 0; b < st.res_blocks; ++b)
        t.push_back({"dec.s" + std::to_string(s) + ".b" + std::to_string(b), st.channels, edge});
      if (st.resample) {
        edge = ops::transpose_out_edge(edge, {3, 2, 1}, 1);
        t.push_back({"dec.s" + std::to_string(s) + ".up", st.channels, edge});
      }
    }
    t.push_back({"dec.conv_out", 1, edge});
    return t;
  }

  friend bool operator==(const VaeArchitecture&, const VaeArchitecture&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(VaeArchitecture, input_edge, latent_channels, encoder_stages, decoder_stages)

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string architecture_hash(const VaeArchitecture& a) { return hex64(fnv1a64(nlohmann::json(a).dump())); }

/// (h, w, d, c) with h = w = d = input_edge / 2^(stages - 1).
inline LatentShape latent_shape_for(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t e = cfg.input_edge >> (cfg.stages() - 1);
  return {e, e, e, cfg.latent_channels};
}

template <typename T = float>
struct VaeModel {
  ModelConfig config;
  VaeArchitecture arch;
  std::uint64_t seed = 0;
  ParamStore<T> params;

  std::string config_hash() const { return architecture_hash(arch); }
  LatentShape latent_shape() const { return arch.latent_shape(); }

  template <typename U>
  VaeModel<U> cast() const {
    return VaeModel<U>{config, arch, seed, params.template cast<U>()};
  }
};

using VaeParameters = VaeModel<float>;

namespace vae_detail {

template <typename T>
void add_conv(ParamStore<T>& p, const std::string& name, std::size_t ci, std::size_t co, std::size_t k,
              std::uint64_t seed) {
  const std::size_t fan = ci * k * k * k;
  p.add_uniform(name + ".w", {co, ci, k, k, k}, fan, seed);
  p.add_uniform(name + ".b", {co}, fan, seed);
}

template <typename T>
void add_conv_t(ParamStore<T>& p, const std::string& name, std::size_t ci, std::size_t co, std::size_t k,
                std::uint64_t seed) {
  const std::size_t fan = co * k * k * k;
  p.add_uniform(name + ".w", {ci, co, k, k, k}, fan, seed);
  p.add_uniform(name + ".b", {co}, fan, seed);
}

template <typename T>
void add_norm(ParamStore<T>& p, const std::string& name, std::size_t c) {
  p.add(name + ".g", {c}, T{1});
  p.add(name + ".b", {c}, T{0});
}

template <typename T>
void add_block(ParamStore<T>& p, const std::string& name, std::size_t ci, std::size_t co, std::uint64_t seed) {
  add_norm(p, name + ".norm1", ci);
  add_conv(p, name + ".conv1", ci, co, 3, seed);
  add_norm(p, name + ".norm2", co);
  add_conv(p, name + ".conv2", co, co, 3, seed);
  if (ci != co) add_conv(p, name + ".skip", ci, co, 1, seed);
}

template <typename T>
ad::Var<T> conv(const ParamStore<T>& p, const std::string& name, const ad::Var<T>& x, ops::ConvSpec spec) {
  return ops::conv3d(x, p[name + ".w"], p[name + ".b"], spec);
}

template <typename T>
ad::Var<T> norm_silu(const ParamStore<T>& p, const std::string& name, const ad::Var<T>& x) {
  const std::size_t c = x.shape()[1];
  return ops::silu(ops::group_norm(x, p[name + ".g"], p[name + ".b"], VaeArchitecture::norm_groups(c)));
}

template <typename T>
ad::Var<T> block(const ParamStore<T>& p, const std::string& name, const ad::Var<T>& x) {
  auto h = conv(p, name + ".conv1", norm_silu(p, name + ".norm1", x), {3, 1, 1});
  h = conv(p, name + ".conv2", norm_silu(p, name + ".norm2", h), {3, 1, 1});
  const auto skip = p.contains(name + ".skip.w") ? conv(p, name + ".skip", x, {1, 1, 0}) : x;
  return ops::add(skip, h);
}

inline std::string stage_name(const char* side, std::size_t s) { return std::string(side) + ".s" + std::to_string(s); }

}  // namespace vae_detail

/// Deterministic initialisation given (cfg, seed).
template <typename T = float>
VaeModel<T> build_vae(const ModelConfig& cfg, std::uint64_t seed) {
  using namespace vae_detail;
  VaeModel<T> m{cfg, VaeArchitecture::from(cfg), seed, {}};
  auto& p = m.params;
  const auto& enc = m.arch.encoder_stages;
  const std::size_t lc = m.arch.latent_channels;

  add_conv(p, "enc.conv_in", 1, enc.front().channels, 3, seed);
  std::size_t c = enc.front().channels;
  for (std::size_t s = 0; s < enc.size(); ++s) {
    for (std::size_t b = 0; b < enc[s].res_blocks; ++b) {
      add_block(p, stage_name("enc", s) + ".b" + std::to_string(b), c, enc[s].channels, seed);
      c = enc[s].channels;
    }
    if (enc[s].resample) add_conv(p, stage_name("enc", s) + ".down", c, c, 3, seed);
  }
  add_norm(p, "enc.norm_out", c);
  add_conv(p, "enc.head", c, 2 * lc, 1, seed);

  const auto& dec = m.arch.decoder_stages;
  c = dec.front().channels;
  add_conv(p, "dec.conv_in", lc, c, 3, seed);
  for (std::size_t i = 0; i < dec.size(); ++i) {
    const std::size_t s = dec.size() - 1 - i;
    for (std::size_t b = 0; b < dec[i].res_blocks; ++b) {
      add_block(p, stage_name("dec", s) + ".b" + std::to_string(b), c, dec[i].channels, seed);
      c = dec[i].channels;
    }
    if (dec[i].resample) add_conv_t(p, stage_name("dec", s) + ".up", c, c, 3, seed);
  }
  add_norm(p, "dec.norm_out", c);
  add_conv(p, "dec.conv_out", c, 1, 3, seed);
  return m;
}

template <typename T>
struct EncoderOutput {
  ad::Var<T> mu;       // [N, c, h, w, d]
  ad::Var<T> log_var;  // [N, c, h, w, d]
};

/// x: [N, 1, E, E, E].
template <typename T>
EncoderOutput<T> encode_forward(const VaeModel<T>& m, const ad::Var<T>& x) {
  using namespace vae_detail;
  const auto& xs = x.shape();
  const std::size_t e = m.arch.input_edge;
  if (xs.size() != 5 || xs[1] != 1 || xs[2] != e || xs[3] != e || xs[4] != e)
    throw ShapeMismatch("encoder expects [N,1," + std::to_string(e) + "," + std::to_string(e) + "," +
                        std::to_string(e) + "], got " + shape_str(xs));
  const auto& p = m.params;
  const auto& enc = m.arch.encoder_stages;
  auto h = conv(p, "enc.conv_in", x, {3, 1, 1});
  for (std::size_t s = 0; s < enc.size(); ++s) {
    for (std::size_t b = 0; b < enc[s].res_blocks; ++b) h = block(p, stage_name("enc", s) + ".b" + std::to_string(b), h);
    if (enc[s].resample) h = conv(p, stage_name("enc", s) + ".down", h, {3, 2, 1});
  }
  h = conv(p, "enc.head", norm_silu(p, "enc.norm_out", h), {1, 1, 0});
  const std::size_t lc = m.arch.latent_channels;
  return {ops::slice_channels(h, 0, lc), ops::slice_channels(h, lc, lc)};
}

/// z: [N, c, h, w, d] -> sigmoid output [N, 1, E, E, E].
template <typename T>
ad::Var<T> decode_forward(const VaeModel<T>& m, const ad::Var<T>& z) {
  using namespace vae_detail;
  const auto& zs = z.shape();
  const auto ls = m.latent_shape();
  if (zs.size() != 5 || zs[1] != ls.c || zs[2] != ls.h || zs[3] != ls.w || zs[4] != ls.d)
    throw ShapeMismatch("decoder expects latent [N," + std::to_string(ls.c) + "," + std::to_string(ls.h) + "," +
                        std::to_string(ls.w) + "," + std::to_string(ls.d) + "], got " + shape_str(zs));
  const auto& p = m.params;
  const auto& dec = m.arch.decoder_stages;
  auto h = conv(p, "dec.conv_in", z, {3, 1, 1});
  for (std::size_t i = 0; i < dec.size(); ++i) {
    const std::size_t s = dec.size() - 1 - i;
    for (std::size_t b = 0; b < dec[i].res_blocks; ++b) h = block(p, stage_name("dec", s) + ".b" + std::to_string(b), h);
    if (dec[i].resample) {
      const std::string n = stage_name("dec", s) + ".up";
      h = ops::conv_transpose3d(h, p[n + ".w"], p[n + ".b"], {3, 2, 1}, 1);
    }
  }
  h = conv(p, "dec.conv_out", norm_silu(p, "dec.norm_out", h), {3, 1, 1});
  return ops::sigmoid(h);
}

template <typename T>
Tensor<T> volumes_to_batch(const std::vector<const Volume*>& vols) {
  if (vols.empty()) throw ValidationError("empty batch");
  const Dims3 d = vols.front()->shape();
  const std::size_t nv = voxel_count(d);
  Tensor<T> t({vols.size(), 1, d[0], d[1], d[2]});
  for (std::size_t n = 0; n < vols.size(); ++n) {
    if (vols[n]->shape() != d) throw ShapeMismatch("batch volumes differ in shape");
    std::copy(vols[n]->data().begin(), vols[n]->data().end(), t.data() + n * nv);
  }
  return t;
}

inline void check_model_input(const VaeArchitecture& a, const Volume& v) {
  const std::size_t e = a.input_edge;
  if (v.shape() != Dims3{e, e, e})
    throw ShapeMismatch("volume shape " + dims_str(v.shape()) + " does not match model input " +
                        dims_str({e, e, e}));
  if (!v.in_unit_range()) throw ValidationError("model inputs must be preprocessed into [0,1]");
}

/// Posterior parameters for one volume.
template <typename T>
LatentDistribution encode(const VaeModel<T>& m, const Volume& v) {
  check_model_input(m.arch, v);
  ad::NoGradGuard ng;
  auto out = encode_forward(m, ad::Var<T>(v.as_tensor<T>()));
  return LatentDistribution(m.latent_shape(), detail::to_channel_last(out.mu.value()),
                            detail::to_channel_last(out.log_var.value()));
}

/// z = mu + exp(0.5 log_var) * eps with eps supplied explicitly (channel-last
/// order). Passing all zeros gives z = mu.
inline LatentCode reparameterize_with_noise(const LatentDistribution& d, const std::vector<double>& eps) {
  if (eps.size() != d.shape().size()) throw ShapeMismatch("noise size does not match latent shape");
  LatentCode code{d.shape(), std::vector<double>(eps.size()), std::make_shared<const LatentDistribution>(d), std::nullopt};
  for (std::size_t i = 0; i < eps.size(); ++i) code.z[i] = d.mu()[i] + d.sigma(i) * eps[i];
  return code;
}

/// Same noise seed gives the same z.
inline LatentCode reparameterize(const LatentDistribution& d, std::uint64_t noise_seed) {
  Rng rng(noise_seed);
  std::vector<double> eps(d.shape().size());
  for (auto& e : eps) e = rng.normal();
  auto code = reparameterize_with_noise(d, eps);
  code.noise_seed = noise_seed;
  return code;
}

/// The deterministic code z = mu.
inline LatentCode mean_code(const LatentDistribution& d) {
  return reparameterize_with_noise(d, std::vector<double>(d.shape().size(), 0.0));
}

template <typename T>
Volume decode(const VaeModel<T>& m, const LatentCode& z) {
  if (!(z.shape == m.latent_shape()))
    throw ShapeMismatch("latent shape " + latent_shape_str(z.shape) + " does not match model latent " +
                        latent_shape_str(m.latent_shape()));
  for (double v : z.z)
    if (!std::isfinite(v)) throw ValidationError("latent code contains non-finite values");
  ad::NoGradGuard ng;
  const auto out = decode_forward(m, ad::Var<T>(detail::to_channel_first<T>(z.z, z.shape)));
  Volume v = Volume::from_tensor(out.value());
  // A float sigmoid can round to exactly 0 or 1 for large logits; keep the
  // open-interval contract.
  std::vector<float> data(v.data().begin(), v.data().end());
  for (auto& x : data) x = std::clamp(x, FLT_MIN, std::nextafter(1.0f, 0.0f));
  return Volume(v.shape(), std::move(data), {}, std::pair{0.0, 1.0});
}

}  // namespace latent3d

#endif
