#ifndef LATENT3D_CHECKPOINT_HPP
#define LATENT3D_CHECKPOINT_HPP

// Checkpoint container: 8-byte magic, u32 version, u64 header length, JSON
// header (kind, config, config_hash, seed, step, tensor table), then float32
// little-endian tensor payloads in table order.

#include <cstring>
#include <string>

#include "json.hpp"

#include "latent3d/classifier.hpp"
#include "latent3d/discriminator.hpp"
#include "latent3d/features.hpp"
#include "latent3d/io.hpp"
#include "latent3d/params.hpp"
#include "latent3d/vae.hpp"

namespace latent3d {

inline constexpr char kCkptMagic[8] = {'L', '3', 'D', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCkptVersion = 1;

struct CheckpointMeta {
  std::string kind;
  nlohmann::json config;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  nlohmann::json extra = nlohmann::json::object();
};

inline std::string encode_checkpoint(const CheckpointMeta& meta, const ParamStore<float>& store) {
  nlohmann::json h{{"kind", meta.kind},         {"config", meta.config}, {"config_hash", meta.config_hash},
                   {"seed", meta.seed},         {"step", meta.step},     {"extra", meta.extra},
                   {"tensors", nlohmann::json::array()}};
  std::string payload;
  auto put = [&](const std::string& name, const Tensor<float>& t, const char* role) {
    h["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"role", role}});
    payload.append(reinterpret_cast<const char*>(t.data()), 4 * t.size());
  };
  for (const auto& [k, v] : store.params()) put(k, v.value(), "param");
  for (const auto& [k, b] : store.buffers()) put(k, b, "buffer");
  const std::string hs = h.dump();
  std::string out(8 + 4 + 8, '\0');
  std::memcpy(out.data(), kCkptMagic, 8);
  std::memcpy(out.data() + 8, &kCkptVersion, 4);
  const std::uint64_t len = hs.size();
  std::memcpy(out.data() + 12, &len, 8);
  return out + hs + payload;
}

inline std::pair<CheckpointMeta, ParamStore<float>> decode_checkpoint(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCkptMagic, 8) != 0)
    throw ValidationError("'" + name + "' is not a checkpoint");
  std::uint32_t version;
  std::uint64_t len;
  std::memcpy(&version, bytes.data() + 8, 4);
  std::memcpy(&len, bytes.data() + 12, 8);
  if (version != kCkptVersion) throw ValidationError("'" + name + "': unsupported checkpoint version " + std::to_string(version));
  if (20 + len > bytes.size()) throw ValidationError("'" + name + "': truncated checkpoint header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(20, len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("'" + name + "': corrupt checkpoint header: " + e.what());
  }
  CheckpointMeta meta{h.at("kind"), h.at("config"), h.at("config_hash"), h.at("seed"), h.at("step"), h.value("extra", nlohmann::json::object())};
  ParamStore<float> store;
  std::size_t off = 20 + len;
  for (const auto& t : h.at("tensors")) {
    const Shape shape = t.at("shape").get<Shape>();
    const std::size_t n = shape_size(shape);
    if (off + 4 * n > bytes.size()) throw ValidationError("'" + name + "': truncated tensor payload");
    Tensor<float> v(shape);
    std::memcpy(v.data(), bytes.data() + off, 4 * n);
    off += 4 * n;
    if (t.at("role") == "buffer")
      store.add_buffer(t.at("name"), shape) = std::move(v);
    else
      store.add(t.at("name"), shape).mutable_value() = std::move(v);
  }
  if (off != bytes.size()) throw ValidationError("'" + name + "': trailing bytes after tensor payload");
  return {std::move(meta), std::move(store)};
}

/// Copies every tensor of `loaded` into `target`, which must have exactly the
/// same names and shapes.
inline void assign_matching(ParamStore<float>& target, const ParamStore<float>& loaded, const std::string& name) {
  if (target.params().size() != loaded.params().size() || target.buffers().size() != loaded.buffers().size())
    throw ValidationError("'" + name + "': tensor table does not match the architecture");
  for (auto& [k, v] : target.params()) {
    const auto& src = loaded[k];
    if (src.shape() != v.shape()) throw ValidationError("'" + name + "': tensor " + k + " has the wrong shape");
    v.mutable_value() = src.value();
  }
  for (auto& [k, b] : target.buffers()) {
    const auto& src = loaded.buffer(k);
    if (src.shape() != b.shape()) throw ValidationError("'" + name + "': buffer " + k + " has the wrong shape");
    b = src;
  }
}

inline std::pair<CheckpointMeta, ParamStore<float>> read_checkpoint(const fs::path& path, const std::string& kind) {
  auto [meta, store] = decode_checkpoint(read_file(path), path.string());
  if (meta.kind != kind)
    throw ValidationError("'" + path.string() + "' holds a " + meta.kind + " checkpoint, expected " + kind);
  return {std::move(meta), std::move(store)};
}

// ---------------------------------------------------------------- typed wrappers

inline void save_vae(const VaeParameters& m, const fs::path& path, std::uint64_t step = 0,
                     nlohmann::json extra = nlohmann::json::object()) {
  write_file_atomic(path, encode_checkpoint({"vae", m.config, m.config_hash(), m.seed, step, std::move(extra)}, m.params));
}

/// Rebuilds the architecture from the stored config and rejects the file if
/// the stored hash disagrees with it.
inline VaeParameters load_vae(const fs::path& path, CheckpointMeta* meta_out = nullptr) {
  auto [meta, store] = read_checkpoint(path, "vae");
  const auto cfg = meta.config.get<ModelConfig>();
  auto m = build_vae<float>(cfg, meta.seed);
  if (m.config_hash() != meta.config_hash)
    throw ValidationError("'" + path.string() + "': config hash mismatch (stored " + meta.config_hash + ", computed " +
                          m.config_hash() + ")");
  assign_matching(m.params, store, path.string());
  if (meta_out) *meta_out = std::move(meta);
  return m;
}

inline void save_classifier(const ClassifierParameters& m, const fs::path& path, std::uint64_t step = 0,
                            nlohmann::json extra = nlohmann::json::object()) {
  write_file_atomic(path, encode_checkpoint({"classifier", m.arch, m.arch_hash(), m.seed, step, std::move(extra)}, m.params));
}

inline ClassifierParameters load_classifier(const fs::path& path, CheckpointMeta* meta_out = nullptr) {
  auto [meta, store] = read_checkpoint(path, "classifier");
  const auto arch = meta.config.get<ClassifierArchitecture>();
  auto m = build_classifier<float>(arch.input_dim, arch.n_classes, meta.seed, true);
  m.arch = arch;
  if (m.arch_hash() != meta.config_hash) throw ValidationError("'" + path.string() + "': architecture hash mismatch");
  assign_matching(m.params, store, path.string());
  if (meta_out) *meta_out = std::move(meta);
  return m;
}

inline void save_discriminator(const DiscriminatorParameters& d, const fs::path& path, std::uint64_t step = 0) {
  const nlohmann::json cfg = d.config;
  write_file_atomic(path, encode_checkpoint({"discriminator", cfg, hex64(fnv1a64(cfg.dump())), 0, step, {}}, d.params));
}

inline DiscriminatorParameters load_discriminator(const fs::path& path) {
  auto [meta, store] = read_checkpoint(path, "discriminator");
  if (hex64(fnv1a64(meta.config.dump())) != meta.config_hash)
    throw ValidationError("'" + path.string() + "': config hash mismatch");
  auto d = build_discriminator<float>(meta.config.get<DiscriminatorConfig>(), 0);
  assign_matching(d.params, store, path.string());
  return d;
}

/// Feature-pyramid weights from a checkpoint of kind "feature_pyramid" whose
/// config lists the level widths.
inline ConvPyramidExtractor<float> load_feature_pyramid(const fs::path& path) {
  auto [meta, store] = read_checkpoint(path, "feature_pyramid");
  PyramidConfig pc;
  pc.channels = meta.config.at("channels").get<std::vector<std::size_t>>();
  return ConvPyramidExtractor<float>(pc, std::move(store));
}

inline void save_feature_pyramid(const ConvPyramidExtractor<float>& f, const fs::path& path) {
  const nlohmann::json cfg{{"channels", f.config().channels}};
  write_file_atomic(path, encode_checkpoint({"feature_pyramid", cfg, hex64(fnv1a64(cfg.dump())), f.config().seed, 0, {}},
                                            f.params()));
}

}  // namespace latent3d

#endif
