#ifndef LATENT3D_CORE_TYPES_HPP
#define LATENT3D_CORE_TYPES_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "latent3d/errors.hpp"
#include "latent3d/tensor.hpp"

namespace latent3d {

inline std::size_t voxel_count(const Dims3& d) { return d[0] * d[1] * d[2]; }

inline std::string dims_str(const Dims3& d) {
  return "(" + std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]) + ")";
}

struct Spacing {
  double x = 1.0, y = 1.0, z = 1.0;
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// A 3D scalar grid indexed (i, j, k) over shape (H, W, D); element (i, j, k)
/// lives at (i*W + j)*D + k. Immutable once built.
class Volume {
 public:
  Volume() = default;
  Volume(Dims3 shape, std::vector<float> data, Spacing spacing = {},
         std::optional<std::pair<double, double>> intensity_range = std::nullopt)
      : shape_(shape), spacing_(spacing), data_(std::move(data)) {
    if (shape_[0] < 1 || shape_[1] < 1 || shape_[2] < 1)
      throw ValidationError("volume shape components must be >= 1, got " + dims_str(shape_));
    if (data_.size() != voxel_count(shape_))
      throw ShapeMismatch("volume payload of " + std::to_string(data_.size()) + " voxels does not match shape " +
                          dims_str(shape_));
    for (float v : data_)
      if (!std::isfinite(v)) throw ValidationError("volume contains non-finite intensities");
    if (intensity_range) {
      range_ = *intensity_range;
    } else {
      auto [lo, hi] = std::minmax_element(data_.begin(), data_.end());
      range_ = {*lo, *hi};
    }
  }

  static Volume filled(Dims3 shape, float value, Spacing spacing = {}) {
    return Volume(shape, std::vector<float>(voxel_count(shape), value), spacing);
  }

  const Dims3& shape() const { return shape_; }
  const Spacing& spacing() const { return spacing_; }
  std::pair<double, double> intensity_range() const { return range_; }
  std::size_t size() const { return data_.size(); }
  std::span<const float> data() const { return data_; }
  float operator[](std::size_t i) const { return data_[i]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return data_[index(i, j, k)]; }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return (i * shape_[1] + j) * shape_[2] + k; }

  bool in_unit_range() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  }

  /// [1, 1, H, W, D] network input.
  template <typename T>
  Tensor<T> as_tensor() const {
    return Tensor<T>({1, 1, shape_[0], shape_[1], shape_[2]}, std::vector<T>(data_.begin(), data_.end()));
  }

  /// Volume from sample `n` of an [N, 1, H, W, D] tensor.
  template <typename T>
  static Volume from_tensor(const Tensor<T>& t, std::size_t n = 0, Spacing spacing = {}) {
    if (t.rank() != 5 || t.dim(1) != 1) throw ShapeMismatch("expected [N,1,H,W,D], got " + shape_str(t.shape()));
    const Dims3 d{t.dim(2), t.dim(3), t.dim(4)};
    const std::size_t nv = voxel_count(d);
    std::vector<float> out(nv);
    for (std::size_t i = 0; i < nv; ++i) out[i] = static_cast<float>(t[n * nv + i]);
    return Volume(d, std::move(out), spacing);
  }

  friend bool operator==(const Volume& a, const Volume& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Dims3 shape_{1, 1, 1};
  Spacing spacing_{};
  std::pair<double, double> range_{0.0, 0.0};
  std::vector<float> data_;
};

/// Shape of a latent grid: (h, w, d, c).
struct LatentShape {
  std::size_t h = 0, w = 0, d = 0, c = 0;
  std::size_t size() const { return h * w * d * c; }
  std::array<std::size_t, 4> as_array() const { return {h, w, d, c}; }
  friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

inline std::string latent_shape_str(const LatentShape& s) {
  return "(" + std::to_string(s.h) + "," + std::to_string(s.w) + "," + std::to_string(s.d) + "," +
         std::to_string(s.c) + ")";
}

namespace detail {

/// [1, c, h, w, d] (network) -> channel-last (h, w, d, c) order.
template <typename T>
std::vector<double> to_channel_last(const Tensor<T>& t, std::size_t n = 0) {
  const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3), d = t.dim(4), sp = h * w * d;
  std::vector<double> out(sp * c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t v = 0; v < sp; ++v) out[v * c + ch] = double(t[(n * c + ch) * sp + v]);
  return out;
}

template <typename T>
Tensor<T> to_channel_first(const std::vector<double>& v, const LatentShape& s) {
  const std::size_t sp = s.h * s.w * s.d;
  Tensor<T> t({1, s.c, s.h, s.w, s.d});
  for (std::size_t ch = 0; ch < s.c; ++ch)
    for (std::size_t i = 0; i < sp; ++i) t[ch * sp + i] = T(v[i * s.c + ch]);
  return t;
}

}  // namespace detail

/// Per-element Gaussian posterior parameters, channel-last.
/// sigma = exp(0.5 * log_var).
class LatentDistribution {
 public:
  LatentDistribution() = default;
  LatentDistribution(LatentShape shape, std::vector<double> mu, std::vector<double> log_var)
      : shape_(shape), mu_(std::move(mu)), log_var_(std::move(log_var)) {
    if (mu_.size() != shape_.size() || log_var_.size() != shape_.size())
      throw ShapeMismatch("latent mu/log_var sizes do not match shape " + latent_shape_str(shape_));
    for (std::size_t i = 0; i < mu_.size(); ++i)
      if (!std::isfinite(mu_[i]) || !std::isfinite(log_var_[i]))
        throw ValidationError("latent distribution contains non-finite values");
  }

  const LatentShape& shape() const { return shape_; }
  const std::vector<double>& mu() const { return mu_; }
  const std::vector<double>& log_var() const { return log_var_; }
  double sigma(std::size_t i) const { return std::exp(0.5 * log_var_[i]); }

  friend bool operator==(const LatentDistribution&, const LatentDistribution&) = default;

 private:
  LatentShape shape_;
  std::vector<double> mu_, log_var_;
};

/// A sampled latent z with a record of how it was produced.
struct LatentCode {
  LatentShape shape;
  std::vector<double> z;
  std::shared_ptr<const LatentDistribution> source;
  std::optional<std::uint64_t> noise_seed;  // empty when the noise was supplied explicitly
};

// ---------------------------------------------------------------- subjects

enum class Group { EU, DS };
enum class AdLabel { NoDet, ProdromalAD, AD, Missing };
enum class IdLabel { Mild, Moderate, Severe, Missing };

inline std::string to_string(Group g) { return g == Group::EU ? "EU" : "DS"; }
inline std::string to_string(AdLabel a) {
  switch (a) {
    case AdLabel::NoDet: return "NoDet";
    case AdLabel::ProdromalAD: return "ProdromalAD";
    case AdLabel::AD: return "AD";
    default: return "";
  }
}
inline std::string to_string(IdLabel a) {
  switch (a) {
    case IdLabel::Mild: return "Mild";
    case IdLabel::Moderate: return "Moderate";
    case IdLabel::Severe: return "Severe";
    default: return "";
  }
}

inline Group parse_group(const std::string& s) {
  if (s == "EU") return Group::EU;
  if (s == "DS") return Group::DS;
  throw ValidationError("unknown group label '" + s + "' (expected EU or DS)");
}
inline bool is_missing_token(const std::string& s) { return s.empty() || s == "NA" || s == "missing"; }
inline AdLabel parse_ad_label(const std::string& s) {
  if (is_missing_token(s)) return AdLabel::Missing;
  if (s == "NoDet") return AdLabel::NoDet;
  if (s == "ProdromalAD") return AdLabel::ProdromalAD;
  if (s == "AD") return AdLabel::AD;
  throw ValidationError("unknown ad_label '" + s + "'");
}
inline IdLabel parse_id_label(const std::string& s) {
  if (is_missing_token(s)) return IdLabel::Missing;
  if (s == "Mild") return IdLabel::Mild;
  if (s == "Moderate") return IdLabel::Moderate;
  if (s == "Severe") return IdLabel::Severe;
  throw ValidationError("unknown id_label '" + s + "'");
}

struct SubjectRecord {
  std::string subject_id;
  std::string volume_path;
  Group group = Group::EU;
  AdLabel ad_label = AdLabel::Missing;
  IdLabel id_label = IdLabel::Missing;
  std::string source_dataset;

  void validate() const {
    if (subject_id.empty()) throw ValidationError("empty subject_id");
    if (group == Group::EU && (ad_label != AdLabel::Missing || id_label != IdLabel::Missing))
      throw ValidationError("subject " + subject_id + ": EU records cannot carry AD or ID labels");
  }
  friend bool operator==(const SubjectRecord&, const SubjectRecord&) = default;
};

struct Manifest {
  static constexpr int kSchemaVersion = 1;
  std::vector<SubjectRecord> records;
  int schema_version = kSchemaVersion;

  void validate() const {
    std::map<std::string, int> seen;
    for (const auto& r : records) {
      r.validate();
      if (seen[r.subject_id]++) throw ValidationError("duplicate subject_id '" + r.subject_id + "'");
    }
  }

  const SubjectRecord& find(const std::string& id) const {
    for (const auto& r : records)
      if (r.subject_id == id) return r;
    throw ValidationError("subject '" + id + "' not in manifest");
  }
};

// ---------------------------------------------------------------- model config

/// Architecture and optimisation hyperparameters for one VAE/classifier pair.
struct ModelConfig {
  std::size_t latent_edge = 24;
  std::vector<std::size_t> stage_channels{32, 64, 128, 128};
  std::size_t res_blocks_per_stage = 2;
  std::size_t latent_channels = 3;
  std::size_t input_edge = 192;
  double lambda_perc = 2e-3;
  double lambda_adv = 5e-3;
  double lambda_kl = 1e-8;
  double lr_vae = 5e-5;
  double lr_clf = 1e-4;
  std::size_t epochs_vae = 1000;
  std::size_t epochs_clf = 50;
  std::uint64_t seed = 0;
  std::size_t batch_size = 2;

  std::size_t stages() const { return stage_channels.size(); }

  void validate() const {
    if (stage_channels.empty()) throw ValidationError("stage_channels must not be empty");
    for (auto c : stage_channels)
      if (c == 0) throw ValidationError("stage channel counts must be positive");
    if (latent_channels == 0) throw ValidationError("latent_channels must be positive");
    if (res_blocks_per_stage == 0) throw ValidationError("res_blocks_per_stage must be >= 1");
    if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
    if (lambda_perc < 0 || lambda_adv < 0 || lambda_kl < 0) throw ValidationError("loss weights must be >= 0");
    if (!(lr_vae > 0) || !(lr_clf > 0)) throw ValidationError("learning rates must be > 0");
    const std::size_t halvings = stages() - 1;
    if (halvings >= 63 || input_edge == 0 || input_edge % (std::size_t{1} << halvings) != 0)
      throw ValidationError("input_edge " + std::to_string(input_edge) + " is not divisible by 2^" +
                            std::to_string(halvings));
    if (input_edge >> halvings != latent_edge)
      throw ValidationError("input_edge " + std::to_string(input_edge) + " with " + std::to_string(stages()) +
                            " stages gives latent edge " + std::to_string(input_edge >> halvings) + ", not " +
                            std::to_string(latent_edge));
    if (input_edge == 192 && latent_edge != 24 && latent_edge != 12 && latent_edge != 3)
      throw ValidationError("192^3 inputs support the 24^3, 12^3 and 3^3 latent configurations only");
  }

  static ModelConfig latent24() { return ModelConfig{}; }
  static ModelConfig latent12() {
    ModelConfig c;
    c.latent_edge = 12;
    c.stage_channels = {32, 64, 128, 256, 512};
    return c;
  }
  static ModelConfig latent3() {
    ModelConfig c;
    c.latent_edge = 3;
    c.stage_channels = {32, 64, 128, 256, 512, 512, 1024};
    return c;
  }
  /// Reduced-width variant at 48^3 with the 4-stage layout (6^3 latent).
  static ModelConfig desk48() {
    ModelConfig c;
    c.input_edge = 48;
    c.latent_edge = 6;
    c.stage_channels = {8, 16, 16, 16};
    c.res_blocks_per_stage = 1;
    c.batch_size = 8;
    c.epochs_vae = 40;
    c.lr_vae = 1e-3;
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, latent_edge, stage_channels, res_blocks_per_stage,
                                                latent_channels, input_edge, lambda_perc, lambda_adv, lambda_kl,
                                                lr_vae, lr_clf, epochs_vae, epochs_clf, seed, batch_size)

}  // namespace latent3d

#endif
