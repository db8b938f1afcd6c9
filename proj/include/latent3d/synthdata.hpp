#ifndef LATENT3D_SYNTHDATA_HPP
#define LATENT3D_SYNTHDATA_HPP

// Ellipsoidal phantoms with a bright core and a dark central cavity. Group
// and stage effects scale the body and the cavity so that downstream tasks
// have a known, controllable signal.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "latent3d/core_types.hpp"
#include "latent3d/io.hpp"
#include "latent3d/rng.hpp"

namespace latent3d {

struct PhantomSpec {
  std::size_t edge = 48;
  std::array<double, 3> semi_axes{18.0, 15.0, 13.0};  // voxels
  double axis_scale = 1.0;                            // multiplies all semi-axes
  double cavity_scale = 0.3;                          // cavity semi-axes relative to the body's
  double core_scale = 0.6;                            // bright core semi-axes relative to the body's
  double body_intensity = 0.55;
  double core_intensity = 0.85;
  double cavity_intensity = 0.08;
  double noise_sd = 0.02;
  double smoothing = 1.0;  // logistic edge width, voxels
  std::array<double, 3> center_offset{0.0, 0.0, 0.0};

  void validate() const {
    if (edge < 4) throw ValidationError("phantom edge must be >= 4");
    if (noise_sd < 0) throw ValidationError("noise_sd must be >= 0");
    if (!(smoothing > 0)) throw ValidationError("smoothing must be > 0");
    if (!(axis_scale > 0)) throw ValidationError("axis_scale must be > 0");
    if (cavity_scale < 0 || cavity_scale >= 1) throw ValidationError("cavity_scale must lie in [0, 1)");
    if (core_scale < 0 || core_scale >= 1) throw ValidationError("core_scale must lie in [0, 1)");
    for (int a = 0; a < 3; ++a) {
      const double r = semi_axes[a] * axis_scale;
      if (!(r > 0)) throw ValidationError("semi-axes must be positive");
      const double c = (double(edge) - 1.0) / 2.0;
      if (std::abs(center_offset[a]) + r + 2.0 * smoothing > c)
        throw ValidationError("phantom semi-axes do not fit inside a " + std::to_string(edge) + "^3 volume");
    }
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PhantomSpec, edge, semi_axes, axis_scale, cavity_scale, core_scale,
                                                body_intensity, core_intensity, cavity_intensity, noise_sd, smoothing,
                                                center_offset)

namespace synth_detail {

/// Soft indicator of an ellipsoid: ~1 inside, ~0 outside, logistic over an
/// approximate signed distance.
inline double soft_inside(double r, double min_axis, double width) {
  const double d = (r - 1.0) * min_axis;
  return 1.0 / (1.0 + std::exp(d / width));
}

}  // namespace synth_detail

/// Deterministic given (spec, subject_seed). Background voxels are exactly 0
/// and noise is only added inside the body.
inline Volume generate_phantom(const PhantomSpec& s, std::uint64_t subject_seed) {
  s.validate();
  const std::size_t e = s.edge;
  const double c = (double(e) - 1.0) / 2.0;
  std::array<double, 3> ax{};
  for (int a = 0; a < 3; ++a) ax[a] = s.semi_axes[a] * s.axis_scale;
  const double min_ax = std::min({ax[0], ax[1], ax[2]});
  Rng rng(subject_seed);
  std::vector<float> data(e * e * e, 0.0f);
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t j = 0; j < e; ++j)
      for (std::size_t k = 0; k < e; ++k) {
        const double x = double(i) - c - s.center_offset[0], y = double(j) - c - s.center_offset[1],
                     z = double(k) - c - s.center_offset[2];
        const double r = std::sqrt(x * x / (ax[0] * ax[0]) + y * y / (ax[1] * ax[1]) + z * z / (ax[2] * ax[2]));
        if ((r - 1.0) * min_ax > 6.0 * s.smoothing) continue;  // background stays exactly 0
        using synth_detail::soft_inside;
        const double body = soft_inside(r, min_ax, s.smoothing);
        const double core = s.core_scale > 0 ? soft_inside(r / s.core_scale, min_ax * s.core_scale, s.smoothing) : 0.0;
        const double cav =
            s.cavity_scale > 0 ? soft_inside(r / s.cavity_scale, min_ax * s.cavity_scale, s.smoothing) : 0.0;
        double v = s.body_intensity + (s.core_intensity - s.body_intensity) * core;
        v += (s.cavity_intensity - v) * cav;
        v *= body;
        // Draw unconditionally so the noise field does not depend on shape.
        const double n = rng.normal();
        if (body > 0.5) v += s.noise_sd * n;
        data[(i * e + j) * e + k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return Volume({e, e, e}, std::move(data), {}, std::pair{0.0, 1.0});
}

struct CohortSpec {
  PhantomSpec base;
  std::size_t n_eu = 40;
  std::size_t n_ds = 40;
  double ds_axis_factor = 0.92;
  double ds_cavity_factor = 1.3;
  // DS subjects are dealt into AD stages NoDet / ProdromalAD / AD in these
  // counts (after a seeded shuffle); the remainder keep a missing label.
  std::array<std::size_t, 3> ad_counts{0, 0, 0};
  std::array<double, 3> ad_cavity_factors{1.0, 1.1, 1.2};
  // Same for ID levels Mild / Moderate / Severe.
  std::array<std::size_t, 3> id_counts{0, 0, 0};
  std::array<double, 3> id_core_factors{1.0, 0.94, 0.88};
  double axis_jitter = 0.03;
  double cavity_jitter = 0.05;
  double intensity_jitter = 0.02;
  double center_jitter = 0.1;  // voxels, residual misalignment after registration
  std::uint64_t seed = 1;
  std::string id_prefix = "sub";
  std::string source_dataset = "synthetic";

  std::size_t total() const { return n_eu + n_ds; }

  void validate() const {
    base.validate();
    if (ad_counts[0] + ad_counts[1] + ad_counts[2] > n_ds) throw ValidationError("AD stage counts exceed n_ds");
    if (id_counts[0] + id_counts[1] + id_counts[2] > n_ds) throw ValidationError("ID level counts exceed n_ds");
    if (axis_jitter < 0 || cavity_jitter < 0 || intensity_jitter < 0 || center_jitter < 0)
      throw ValidationError("jitter values must be >= 0");
    if (!(ds_axis_factor > 0) || !(ds_cavity_factor > 0)) throw ValidationError("group factors must be > 0");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CohortSpec, base, n_eu, n_ds, ds_axis_factor, ds_cavity_factor,
                                                ad_counts, ad_cavity_factors, id_counts, id_core_factors, axis_jitter,
                                                cavity_jitter, intensity_jitter, center_jitter, seed, id_prefix,
                                                source_dataset)

struct SyntheticSubject {
  SubjectRecord record;
  PhantomSpec phantom;
  std::uint64_t noise_seed = 0;
};

/// Subject records and per-subject phantom specs; volumes are not rendered.
inline std::vector<SyntheticSubject> plan_cohort(const CohortSpec& spec) {
  spec.validate();
  const std::size_t n = spec.total();
  const int width = std::max<int>(3, int(std::to_string(n).size()));
  Rng stage_rng(derive_seed(spec.seed, "stages"));
  std::vector<std::size_t> ad_order(spec.n_ds), id_order(spec.n_ds);
  for (std::size_t i = 0; i < spec.n_ds; ++i) ad_order[i] = id_order[i] = i;
  stage_rng.shuffle(ad_order.begin(), ad_order.end());
  stage_rng.shuffle(id_order.begin(), id_order.end());
  std::vector<int> ad_of(spec.n_ds, -1), id_of(spec.n_ds, -1);
  for (std::size_t pos = 0, lvl = 0; lvl < 3; ++lvl)
    for (std::size_t q = 0; q < spec.ad_counts[lvl]; ++q) ad_of[ad_order[pos++]] = int(lvl);
  for (std::size_t pos = 0, lvl = 0; lvl < 3; ++lvl)
    for (std::size_t q = 0; q < spec.id_counts[lvl]; ++q) id_of[id_order[pos++]] = int(lvl);

  std::vector<SyntheticSubject> out;
  for (std::size_t s = 0; s < n; ++s) {
    SyntheticSubject sub;
    std::string num = std::to_string(s + 1);
    num.insert(0, std::size_t(std::max(0, width - int(num.size()))), '0');
    sub.record.subject_id = spec.id_prefix + "-" + num;
    sub.record.volume_path = "volumes/" + sub.record.subject_id + ".vol";
    sub.record.source_dataset = spec.source_dataset;
    const bool ds = s >= spec.n_eu;
    sub.record.group = ds ? Group::DS : Group::EU;

    PhantomSpec p = spec.base;
    Rng rng(derive_seed(spec.seed, s));
    if (ds) {
      const std::size_t d = s - spec.n_eu;
      p.axis_scale *= spec.ds_axis_factor;
      p.cavity_scale *= spec.ds_cavity_factor;
      if (ad_of[d] >= 0) {
        sub.record.ad_label = static_cast<AdLabel>(ad_of[d]);
        p.cavity_scale *= spec.ad_cavity_factors[ad_of[d]];
      }
      if (id_of[d] >= 0) {
        sub.record.id_label = static_cast<IdLabel>(id_of[d]);
        p.core_intensity = p.body_intensity + (p.core_intensity - p.body_intensity) * spec.id_core_factors[id_of[d]];
      }
    }
    p.axis_scale *= 1.0 + spec.axis_jitter * rng.normal();
    p.cavity_scale *= 1.0 + spec.cavity_jitter * rng.normal();
    const double gain = 1.0 + spec.intensity_jitter * rng.normal();
    p.body_intensity *= gain;
    p.core_intensity *= gain;
    p.cavity_intensity *= gain;
    for (auto& o : p.center_offset) o += spec.center_jitter * rng.normal();
    p.cavity_scale = std::clamp(p.cavity_scale, 0.0, 0.95);
    sub.phantom = p;
    sub.noise_seed = derive_seed(spec.seed, "noise/" + sub.record.subject_id);
    out.push_back(std::move(sub));
  }
  return out;
}

struct Cohort {
  Manifest manifest;
  std::vector<Volume> volumes;  // in manifest order
};

inline Cohort generate_cohort_in_memory(const CohortSpec& spec) {
  Cohort c;
  for (const auto& s : plan_cohort(spec)) {
    c.manifest.records.push_back(s.record);
    c.volumes.push_back(generate_phantom(s.phantom, s.noise_seed));
  }
  c.manifest.validate();
  return c;
}

/// Writes volumes/<id>.vol (raw format), manifest.csv and cohort.json under
/// `out_dir` and returns the manifest.
inline Manifest generate_cohort(const CohortSpec& spec, const fs::path& out_dir) {
  ensure_dir(out_dir / "volumes");
  Manifest m;
  for (const auto& s : plan_cohort(spec)) {
    save_volume(generate_phantom(s.phantom, s.noise_seed), out_dir / s.record.volume_path);
    m.records.push_back(s.record);
  }
  save_manifest(m, out_dir / "manifest.csv");
  write_file_atomic(out_dir / "cohort.json", nlohmann::json(spec).dump(2) + "\n");
  return m;
}

/// k-fold accuracy of a ridge-regression linear probe on raw voxels
/// (one-vs-rest targets, solved in the dual since voxels far outnumber
/// subjects). Folds are assigned round-robin per class; `ridge` is relative to
/// the mean training-kernel diagonal.
inline double linear_probe_accuracy(const std::vector<Volume>& vols, const std::vector<std::size_t>& labels,
                                    std::size_t k = 5, double ridge = 1e-2) {
  if (vols.size() != labels.size() || vols.empty()) throw ValidationError("probe: size mismatch");
  if (k < 2 || k > vols.size()) throw ValidationError("probe: k must lie in [2, n]");
  const std::size_t n = vols.size(), nc = *std::max_element(labels.begin(), labels.end()) + 1;
  const std::size_t nv = vols.front().size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(nv));
  for (std::size_t i = 0; i < n; ++i) {
    if (vols[i].size() != nv) throw ShapeMismatch("probe: volumes differ in size");
    for (std::size_t v = 0; v < nv; ++v) x(Eigen::Index(i), Eigen::Index(v)) = vols[i][v];
  }
  const Eigen::MatrixXd gram = x * x.transpose();

  std::vector<std::size_t> fold(n), seen(nc, 0);
  for (std::size_t i = 0; i < n; ++i) fold[i] = seen[labels[i]]++ % k;
  std::size_t correct = 0;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<Eigen::Index> tr, te;
    for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? te : tr).push_back(Eigen::Index(i));
    const Eigen::Index m = Eigen::Index(tr.size());
    // Double-centred training kernel, i.e. features centred on the training mean.
    Eigen::MatrixXd kt = gram(tr, tr);
    const Eigen::VectorXd row_mean = kt.rowwise().mean();
    const double all_mean = kt.mean();
    kt.colwise() -= row_mean;
    kt.rowwise() -= row_mean.transpose();
    kt.array() += all_mean;
    Eigen::MatrixXd t = Eigen::MatrixXd::Constant(m, Eigen::Index(nc), -1.0);
    for (Eigen::Index a = 0; a < m; ++a) t(a, Eigen::Index(labels[std::size_t(tr[std::size_t(a)])])) = 1.0;
    const Eigen::RowVectorXd t_mean = t.colwise().mean();
    t.rowwise() -= t_mean;
    const double lam = ridge * kt.trace() / double(m);
    const Eigen::MatrixXd alpha = (kt + lam * Eigen::MatrixXd::Identity(m, m)).ldlt().solve(t);
    for (auto i : te) {
      Eigen::RowVectorXd kr = gram(i, tr);
      const double km = kr.mean();
      kr.array() -= km;
      kr -= row_mean.transpose();
      kr.array() += all_mean;
      const Eigen::RowVectorXd score = kr * alpha + t_mean;
      Eigen::Index best = 0;
      score.maxCoeff(&best);
      correct += std::size_t(best) == labels[std::size_t(i)];
    }
  }
  return double(correct) / double(n);
}

}  // namespace latent3d

#endif
