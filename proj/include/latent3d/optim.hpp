#ifndef LATENT3D_OPTIM_HPP
#define LATENT3D_OPTIM_HPP

#include <cmath>
#include <map>
#include <string>

#include "json.hpp"

#include "latent3d/params.hpp"

namespace latent3d {

/// Adam without weight decay. Moments are keyed by parameter name so that a
/// store can be checkpointed and resumed.
template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    if (!(lr > 0)) throw ValidationError("learning rate must be > 0");
  }

  /// One update from the gradients currently held by `store`; parameters
  /// without a gradient are left alone.
  void step(ParamStore<T>& store) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (auto& [name, v] : store.params()) {
      const auto& g = v.grad();
      if (g.empty()) continue;
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m = Tensor<T>(v.shape());
        st.v = Tensor<T>(v.shape());
      }
      auto& x = v.mutable_value();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double gi = g[i];
        const double m = b1_ * st.m[i] + (1.0 - b1_) * gi;
        const double s = b2_ * st.v[i] + (1.0 - b2_) * gi * gi;
        st.m[i] = T(m);
        st.v[i] = T(s);
        x[i] = T(x[i] - lr_ * (m / c1) / (std::sqrt(s / c2) + eps_));
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    Tensor<T> m, v;
  };
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace latent3d

#endif
