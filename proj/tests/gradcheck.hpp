#ifndef LATENT3D_TESTS_GRADCHECK_HPP
#define LATENT3D_TESTS_GRADCHECK_HPP

// Central finite-difference gradient checking for double-precision graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "latent3d/autograd.hpp"
#include "latent3d/rng.hpp"

namespace latent3d::check {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Relative error with a floor on the denominator so that gradients which are
/// zero up to rounding do not blow the ratio up.
inline double rel_error(double analytic, double numeric, double floor = 1e-5) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares d loss / d leaf against central differences on up to
/// `per_leaf` randomly chosen coordinates of every leaf.
inline GradCheckResult gradcheck(const std::function<ad::Var<double>()>& loss,
                                 std::vector<ad::Var<double>> leaves, std::size_t per_leaf = 8,
                                 std::uint64_t seed = 1, double h = 1e-6) {
  for (auto& l : leaves) l.zero_grad();
  auto out = loss();
  ad::backward(out);
  std::vector<Tensor<double>> analytic;
  for (auto& l : leaves)
    analytic.push_back(l.grad().empty() ? Tensor<double>(l.shape()) : l.grad());

  Rng rng(seed);
  GradCheckResult r;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::size_t n = leaf.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(std::min(per_leaf, n));
    for (auto i : idx) {
      double& x = leaf.mutable_value()[i];
      const double keep = x;
      x = keep + h;
      const double fp = loss().item();
      x = keep - h;
      const double fm = loss().item();
      x = keep;
      const double numeric = (fp - fm) / (2 * h);
      const double e = rel_error(analytic[li][i], numeric);
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = "leaf " + std::to_string(li) + "[" + std::to_string(i) + "] analytic=" +
                  std::to_string(analytic[li][i]) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return r;
}

inline ad::Var<double> random_leaf(Shape shape, Rng& rng, double scale = 1.0, double offset = 0.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = offset + scale * rng.normal();
  return ad::Var<double>(std::move(t), true);
}

}  // namespace latent3d::check

#endif
