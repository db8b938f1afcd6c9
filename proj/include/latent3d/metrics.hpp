#ifndef LATENT3D_METRICS_HPP
#define LATENT3D_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "json.hpp"

#include "latent3d/core_types.hpp"
#include "latent3d/features.hpp"

namespace latent3d {

// ---------------------------------------------------------------- fidelity

inline void require_same_volume_shape(const Volume& x, const Volume& y, const char* what) {
  if (x.shape() != y.shape())
    throw ShapeMismatch(std::string(what) + ": " + dims_str(x.shape()) + " vs " + dims_str(y.shape()));
}

inline double mse(const Volume& x, const Volume& y) {
  require_same_volume_shape(x, y, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = double(x[i]) - double(y[i]);
    acc += d * d;
  }
  return acc / double(x.size());
}

struct SsimOptions {
  std::size_t window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

namespace metrics_detail {

/// Sums over every fully contained window^3 box, separably; `a` is a dense
/// (H, W, D) grid and the result has shape (H-w+1, W-w+1, D-w+1).
inline std::vector<double> box_sums(const std::vector<double>& a, const Dims3& s, std::size_t w) {
  const Dims3 o{s[0] - w + 1, s[1] - w + 1, s[2] - w + 1};
  // along k
  std::vector<double> t1(s[0] * s[1] * o[2]);
  for (std::size_t ij = 0; ij < s[0] * s[1]; ++ij) {
    const double* row = a.data() + ij * s[2];
    double acc = 0.0;
    for (std::size_t k = 0; k < w; ++k) acc += row[k];
    t1[ij * o[2]] = acc;
    for (std::size_t k = 1; k < o[2]; ++k) {
      acc += row[k + w - 1] - row[k - 1];
      t1[ij * o[2] + k] = acc;
    }
  }
  // along j
  std::vector<double> t2(s[0] * o[1] * o[2]);
  for (std::size_t i = 0; i < s[0]; ++i)
    for (std::size_t j = 0; j < o[1]; ++j)
      for (std::size_t k = 0; k < o[2]; ++k) {
        double acc = 0.0;
        for (std::size_t q = 0; q < w; ++q) acc += t1[(i * s[1] + j + q) * o[2] + k];
        t2[(i * o[1] + j) * o[2] + k] = acc;
      }
  // along i
  std::vector<double> t3(o[0] * o[1] * o[2]);
  const std::size_t plane = o[1] * o[2];
  for (std::size_t i = 0; i < o[0]; ++i)
    for (std::size_t q = 0; q < w; ++q)
      for (std::size_t p = 0; p < plane; ++p) t3[i * plane + p] += t2[(i + q) * plane + p];
  return t3;
}

struct SsimMaps {
  double ssim;  // mean of l·cs
  double cs;    // mean of cs
};

/// Window statistics use the sample (n-1) covariance.
inline SsimMaps ssim_terms(const std::vector<double>& x, const std::vector<double>& y, const Dims3& s,
                           const SsimOptions& o) {
  const std::size_t w = o.window;
  if (s[0] < w || s[1] < w || s[2] < w)
    throw ValidationError("volume " + dims_str(s) + " is smaller than the " + std::to_string(w) + "^3 SSIM window");
  const std::size_t n = x.size();
  std::vector<double> xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto sx = box_sums(x, s, w), sy = box_sums(y, s, w), sxx = box_sums(xx, s, w), syy = box_sums(yy, s, w),
             sxy = box_sums(xy, s, w);
  const double np = double(w * w * w);
  const double c1 = std::pow(o.k1 * o.data_range, 2), c2 = std::pow(o.k2 * o.data_range, 2);
  double acc_ssim = 0.0, acc_cs = 0.0;
  for (std::size_t i = 0; i < sx.size(); ++i) {
    const double mx = sx[i] / np, my = sy[i] / np;
    const double vx = (sxx[i] - np * mx * mx) / (np - 1.0);
    const double vy = (syy[i] - np * my * my) / (np - 1.0);
    const double cxy = (sxy[i] - np * mx * my) / (np - 1.0);
    const double cs = (2.0 * cxy + c2) / (vx + vy + c2);
    const double l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
    acc_ssim += l * cs;
    acc_cs += cs;
  }
  return {acc_ssim / double(sx.size()), acc_cs / double(sx.size())};
}

inline std::vector<double> to_double(const Volume& v) { return {v.data().begin(), v.data().end()}; }

/// 2x2x2 mean pooling; a trailing odd slice is dropped.
inline std::vector<double> pool2(const std::vector<double>& a, const Dims3& s, Dims3& out_shape) {
  out_shape = {s[0] / 2, s[1] / 2, s[2] / 2};
  std::vector<double> out(voxel_count(out_shape));
  for (std::size_t i = 0; i < out_shape[0]; ++i)
    for (std::size_t j = 0; j < out_shape[1]; ++j)
      for (std::size_t k = 0; k < out_shape[2]; ++k) {
        double acc = 0.0;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj)
            for (std::size_t dk = 0; dk < 2; ++dk) acc += a[((2 * i + di) * s[1] + 2 * j + dj) * s[2] + 2 * k + dk];
        out[(i * out_shape[1] + j) * out_shape[2] + k] = acc / 8.0;
      }
  return out;
}

}  // namespace metrics_detail

/// Mean SSIM over all fully contained sliding windows.
inline double ssim3d(const Volume& x, const Volume& y, const SsimOptions& o = {}) {
  require_same_volume_shape(x, y, "ssim3d");
  return metrics_detail::ssim_terms(metrics_detail::to_double(x), metrics_detail::to_double(y), x.shape(), o).ssim;
}

inline const std::vector<double>& default_ms_ssim_weights() {
  static const std::vector<double> w{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  return w;
}

/// Number of scales whose downsampled volume still holds one window.
inline std::size_t max_ms_ssim_scales(const Dims3& s, std::size_t window = 7) {
  std::size_t n = 0;
  Dims3 d = s;
  while (d[0] >= window && d[1] >= window && d[2] >= window) {
    ++n;
    d = {d[0] / 2, d[1] / 2, d[2] / 2};
  }
  return n;
}

/// Π_{j<M} cs_j^{w_j} · ssim_M^{w_M}. `scales` = 0 picks as many scales as fit
/// (at most the number of weights). Weights are truncated to the scales used
/// and renormalised to sum to 1. With more than one scale, negative per-scale
/// terms are clamped to 0.
inline double ms_ssim3d(const Volume& x, const Volume& y, std::size_t scales = 0,
                        std::vector<double> weights = default_ms_ssim_weights(), const SsimOptions& o = {}) {
  require_same_volume_shape(x, y, "ms_ssim3d");
  const std::size_t fit = max_ms_ssim_scales(x.shape(), o.window);
  if (scales == 0) scales = std::min(fit, weights.size());
  if (scales == 0 || scales > fit)
    throw ValidationError("volume " + dims_str(x.shape()) + " supports only " + std::to_string(fit) +
                          " MS-SSIM scale(s), " + std::to_string(scales) + " requested");
  if (weights.size() < scales) throw ValidationError("fewer MS-SSIM weights than scales");
  weights.resize(scales);
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(wsum > 0)) throw ValidationError("MS-SSIM weights must have a positive sum");
  for (auto& w : weights) w /= wsum;

  auto a = metrics_detail::to_double(x), b = metrics_detail::to_double(y);
  Dims3 s = x.shape();
  double result = 1.0;
  for (std::size_t j = 0; j < scales; ++j) {
    const auto t = metrics_detail::ssim_terms(a, b, s, o);
    double term = j + 1 == scales ? t.ssim : t.cs;
    if (scales > 1) term = std::max(term, 0.0);
    result *= std::pow(term, weights[j]);
    if (j + 1 < scales) {
      Dims3 ns;
      a = metrics_detail::pool2(a, s, ns);
      b = metrics_detail::pool2(b, s, ns);
      s = ns;
    }
  }
  return result;
}

/// ||e_x - e_y||_2 / sqrt(n) over the concatenated embeddings.
template <typename T>
double feature_distance(const Volume& x, const Volume& y, const FeatureExtractor<T>& f) {
  require_same_volume_shape(x, y, "feature_distance");
  const auto ex = embedding(f, x.as_tensor<T>()), ey = embedding(f, y.as_tensor<T>());
  if (ex.size() != ey.size() || ex.empty()) throw ValidationError("feature extractor returned mismatched embeddings");
  double acc = 0.0;
  for (std::size_t i = 0; i < ex.size(); ++i) acc += (ex[i] - ey[i]) * (ex[i] - ey[i]);
  return std::sqrt(acc) / std::sqrt(double(ex.size()));
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw ValidationError("cosine: mismatched embeddings");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw ValidationError("cosine similarity of a zero embedding");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

template <typename T>
double cosine_similarity(const Volume& x, const Volume& y, const FeatureExtractor<T>& f) {
  require_same_volume_shape(x, y, "cosine_similarity");
  return cosine(embedding(f, x.as_tensor<T>()), embedding(f, y.as_tensor<T>()));
}

struct FidelityScores {
  double ssim = 0, ms_ssim = 0, mse = 0, feat_dist = 0, cos_sim = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FidelityScores, ssim, ms_ssim, mse, feat_dist, cos_sim)

struct FidelityReport {
  std::vector<std::string> subject_ids;
  std::vector<FidelityScores> per_volume;
  FidelityScores mean;
};

inline nlohmann::json to_json(const FidelityReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < r.per_volume.size(); ++i) {
    nlohmann::json e = r.per_volume[i];
    e["subject_id"] = i < r.subject_ids.size() ? r.subject_ids[i] : std::to_string(i);
    per.push_back(e);
  }
  return {{"per_volume", per}, {"mean", r.mean}};
}

template <typename T>
FidelityScores fidelity_scores(const Volume& x, const Volume& y, const FeatureExtractor<T>& f) {
  return {ssim3d(x, y), ms_ssim3d(x, y), mse(x, y), feature_distance(x, y, f), cosine_similarity(x, y, f)};
}

inline FidelityScores mean_scores(const std::vector<FidelityScores>& v) {
  FidelityScores m;
  if (v.empty()) return m;
  for (const auto& s : v) {
    m.ssim += s.ssim;
    m.ms_ssim += s.ms_ssim;
    m.mse += s.mse;
    m.feat_dist += s.feat_dist;
    m.cos_sim += s.cos_sim;
  }
  const double n = double(v.size());
  return {m.ssim / n, m.ms_ssim / n, m.mse / n, m.feat_dist / n, m.cos_sim / n};
}

// ---------------------------------------------------------------- classification

struct MetricsReport {
  std::size_t n_classes = 0;
  double accuracy = 0;
  std::vector<double> sensitivity;
  std::vector<double> specificity;
  std::vector<std::size_t> support;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][pred]
  std::optional<double> auc;                        // binary AUC or macro one-vs-rest AUC
  std::vector<double> per_class_auc;                // one-vs-rest, multiclass only
};

inline nlohmann::json nan_to_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["n_classes"] = r.n_classes;
  j["accuracy"] = r.accuracy;
  j["sensitivity"] = nlohmann::json::array();
  j["specificity"] = nlohmann::json::array();
  for (double v : r.sensitivity) j["sensitivity"].push_back(nan_to_null(v));
  for (double v : r.specificity) j["specificity"].push_back(nan_to_null(v));
  j["support"] = r.support;
  j["confusion"] = r.confusion;
  j["auc"] = r.auc ? nan_to_null(*r.auc) : nlohmann::json(nullptr);
  if (!r.per_class_auc.empty()) {
    j["per_class_auc"] = nlohmann::json::array();
    for (double v : r.per_class_auc) j["per_class_auc"].push_back(nan_to_null(v));
  }
  return j;
}

/// Per-class sensitivity TP/(TP+FN) and specificity TN/(TN+FP); a ratio with
/// an empty denominator is NaN.
inline MetricsReport confusion_metrics(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& truth,
                                       std::size_t n_classes) {
  if (preds.size() != truth.size()) throw ValidationError("confusion_metrics: length mismatch");
  if (preds.empty()) throw ValidationError("confusion_metrics: empty input");
  MetricsReport r;
  r.n_classes = n_classes;
  r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= n_classes || truth[i] >= n_classes) throw ValidationError("confusion_metrics: label out of range");
    ++r.confusion[truth[i]][preds[i]];
    correct += preds[i] == truth[i];
  }
  const std::size_t n = preds.size();
  r.accuracy = double(correct) / double(n);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::size_t tp = r.confusion[c][c], fn = 0, fp = 0;
    for (std::size_t o = 0; o < n_classes; ++o)
      if (o != c) {
        fn += r.confusion[c][o];
        fp += r.confusion[o][c];
      }
    const std::size_t tn = n - tp - fn - fp;
    r.support.push_back(tp + fn);
    r.sensitivity.push_back(tp + fn ? double(tp) / double(tp + fn) : std::numeric_limits<double>::quiet_NaN());
    r.specificity.push_back(tn + fp ? double(tn) / double(tn + fp) : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

/// Mann-Whitney AUC: P(s+ > s-) + 0.5 P(s+ = s-), via average ranks.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& truth) {
  if (scores.size() != truth.size()) throw ValidationError("roc_auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (auto t : truth) {
    if (t != 0 && t != 1) throw ValidationError("roc_auc: truth must be binary");
    pos += t == 1;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw ValidationError("roc_auc: truth contains a single class");
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * double(i + j) + 1.0;
    for (std::size_t q = i; q <= j; ++q)
      if (truth[idx[q]] == 1) rank_sum += avg_rank;
    i = j + 1;
  }
  return (rank_sum - double(pos) * double(pos + 1) / 2.0) / (double(pos) * double(neg));
}

/// Mean of per-class one-vs-rest AUCs; `per_class` receives each one.
inline double macro_auc_ovr(const std::vector<std::vector<double>>& probs, const std::vector<std::size_t>& truth,
                            std::size_t n_classes, std::vector<double>* per_class = nullptr) {
  if (probs.size() != truth.size()) throw ValidationError("macro_auc_ovr: length mismatch");
  double acc = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<double> s(probs.size());
    std::vector<int> t(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s[i] = probs[i].at(c);
      t[i] = truth[i] == c;
    }
    const double a = roc_auc(s, t);
    if (per_class) per_class->push_back(a);
    acc += a;
  }
  return acc / double(n_classes);
}

inline std::size_t argmax(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

/// Full report from class probabilities. Binary tasks report the AUC of the
/// class-1 probability; multiclass tasks the macro one-vs-rest AUC.
inline MetricsReport evaluate_predictions(const std::vector<std::vector<double>>& probs,
                                          const std::vector<std::size_t>& truth, std::size_t n_classes) {
  std::vector<std::size_t> preds;
  for (const auto& p : probs) preds.push_back(argmax(p));
  auto r = confusion_metrics(preds, truth, n_classes);
  const bool all_present = std::all_of(r.support.begin(), r.support.end(), [](auto s) { return s > 0; });
  if (!all_present) return r;
  if (n_classes == 2) {
    std::vector<double> s;
    std::vector<int> t;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s.push_back(probs[i][1]);
      t.push_back(truth[i] == 1);
    }
    r.auc = roc_auc(s, t);
  } else {
    r.auc = macro_auc_ovr(probs, truth, n_classes, &r.per_class_auc);
  }
  return r;
}

}  // namespace latent3d

#endif
