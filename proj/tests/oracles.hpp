#ifndef LATENT3D_TESTS_ORACLES_HPP
#define LATENT3D_TESTS_ORACLES_HPP

// Shared fixtures and brute-force reference implementations for the unit tests.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "latent3d/core_types.hpp"
#include "latent3d/rng.hpp"

namespace latent3d::oracle {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("latent3d_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline Volume random_volume(Dims3 shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::vector<float> d(voxel_count(shape));
  for (auto& v : d) v = float(rng.uniform(lo, hi));
  return Volume(shape, std::move(d));
}

inline std::vector<double> as_doubles(const Volume& v) { return {v.data().begin(), v.data().end()}; }

struct SsimPair {
  double ssim = 0;
  double cs = 0;  // contrast-structure part only
};

/// Mean SSIM and mean contrast-structure term over every valid `w`-edge
/// window, each window's statistics accumulated directly from its voxels.
inline SsimPair ssim_windows(const std::vector<double>& x, const std::vector<double>& y, const Dims3& s,
                             std::size_t w = 7, double k1 = 0.01, double k2 = 0.03, double L = 1.0) {
  const double c1 = (k1 * L) * (k1 * L), c2 = (k2 * L) * (k2 * L);
  const double n = double(w * w * w);
  auto at = [&](const std::vector<double>& v, std::size_t i, std::size_t j, std::size_t k) {
    return v[(i * s[1] + j) * s[2] + k];
  };
  SsimPair total;
  std::size_t count = 0;
  for (std::size_t a = 0; a + w <= s[0]; ++a)
    for (std::size_t b = 0; b + w <= s[1]; ++b)
      for (std::size_t c = 0; c + w <= s[2]; ++c) {
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < w; ++i)
          for (std::size_t j = 0; j < w; ++j)
            for (std::size_t k = 0; k < w; ++k) {
              mx += at(x, a + i, b + j, c + k);
              my += at(y, a + i, b + j, c + k);
            }
        mx /= n;
        my /= n;
        double vx = 0, vy = 0, cxy = 0;
        for (std::size_t i = 0; i < w; ++i)
          for (std::size_t j = 0; j < w; ++j)
            for (std::size_t k = 0; k < w; ++k) {
              const double dx = at(x, a + i, b + j, c + k) - mx, dy = at(y, a + i, b + j, c + k) - my;
              vx += dx * dx;
              vy += dy * dy;
              cxy += dx * dy;
            }
        vx /= n - 1;
        vy /= n - 1;
        cxy /= n - 1;
        const double cs = (2 * cxy + c2) / (vx + vy + c2);
        total.ssim += (2 * mx * my + c1) / (mx * mx + my * my + c1) * cs;
        total.cs += cs;
        ++count;
      }
  total.ssim /= double(count);
  total.cs /= double(count);
  return total;
}

inline double ssim_windows(const Volume& x, const Volume& y, std::size_t w = 7) {
  return ssim_windows(std::vector<double>(x.data().begin(), x.data().end()),
                      std::vector<double>(y.data().begin(), y.data().end()), x.shape(), w)
      .ssim;
}

/// 2x2x2 mean pooling, dropping a trailing odd plane.
inline std::vector<double> mean_pool2(const std::vector<double>& v, Dims3& s) {
  const Dims3 o{s[0] / 2, s[1] / 2, s[2] / 2};
  std::vector<double> out(voxel_count(o), 0.0);
  for (std::size_t i = 0; i < o[0]; ++i)
    for (std::size_t j = 0; j < o[1]; ++j)
      for (std::size_t k = 0; k < o[2]; ++k) {
        double acc = 0;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t c = 0; c < 2; ++c) acc += v[((2 * i + a) * s[1] + 2 * j + b) * s[2] + 2 * k + c];
        out[(i * o[1] + j) * o[2] + k] = acc / 8;
      }
  s = o;
  return out;
}

/// Multi-scale SSIM with renormalised weights, built on the window oracle.
inline double ms_ssim_reference(const Volume& x, const Volume& y, std::size_t scales) {
  std::vector<double> w{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  w.resize(scales);
  double ws = 0;
  for (double v : w) ws += v;
  std::vector<double> a(x.data().begin(), x.data().end()), b(y.data().begin(), y.data().end());
  Dims3 s = x.shape();
  double out = 1;
  for (std::size_t j = 0; j < scales; ++j) {
    const auto t = ssim_windows(a, b, s);
    double term = j + 1 == scales ? t.ssim : t.cs;
    if (scales > 1) term = std::max(term, 0.0);
    out *= std::pow(term, w[j] / ws);
    if (j + 1 < scales) {
      Dims3 s2 = s;
      a = mean_pool2(a, s2);
      b = mean_pool2(b, s);
    }
  }
  return out;
}

/// Mann-Whitney AUC by explicit pair counting.
inline double auc_pairs(const std::vector<double>& score, const std::vector<int>& truth) {
  double num = 0, pairs = 0;
  for (std::size_t i = 0; i < score.size(); ++i)
    for (std::size_t j = 0; j < score.size(); ++j)
      if (truth[i] == 1 && truth[j] == 0) {
        pairs += 1;
        num += score[i] > score[j] ? 1.0 : score[i] == score[j] ? 0.5 : 0.0;
      }
  return num / pairs;
}

/// Balanced class weights n / (K * n_c).
inline std::vector<double> balanced_weights(const std::vector<std::size_t>& counts) {
  double n = 0;
  for (auto c : counts) n += double(c);
  std::vector<double> w;
  for (auto c : counts) w.push_back(n / (double(counts.size()) * double(c)));
  return w;
}

}  // namespace latent3d::oracle

#endif
