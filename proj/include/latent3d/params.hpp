#ifndef LATENT3D_PARAMS_HPP
#define LATENT3D_PARAMS_HPP

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "latent3d/autograd.hpp"
#include "latent3d/rng.hpp"
#include "latent3d/tensor.hpp"

namespace latent3d {

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics), keyed by layer path such as "enc.s0.b1.conv1.w".
template <typename T>
class ParamStore {
 public:
  ad::Var<T>& add(const std::string& name, Shape shape, T fill = T{0}) {
    auto [it, fresh] = params_.emplace(name, ad::Var<T>(Tensor<T>(std::move(shape), fill), true));
    if (!fresh) throw ValidationError("duplicate parameter '" + name + "'");
    return it->second;
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), seeded per parameter name so
  /// the values do not depend on construction order.
  ad::Var<T>& add_uniform(const std::string& name, Shape shape, std::size_t fan_in, std::uint64_t seed) {
    auto& v = add(name, std::move(shape));
    Rng rng(derive_seed(seed, name));
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (auto& x : v.mutable_value().values()) x = T(rng.uniform(-bound, bound));
    return v;
  }

  Tensor<T>& add_buffer(const std::string& name, Shape shape, T fill = T{0}) {
    auto [it, fresh] = buffers_.emplace(name, Tensor<T>(std::move(shape), fill));
    if (!fresh) throw ValidationError("duplicate buffer '" + name + "'");
    return it->second;
  }

  const ad::Var<T>& operator[](const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }
  ad::Var<T>& operator[](const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& buffer(const std::string& name) {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw ValidationError("unknown buffer '" + name + "'");
    return it->second;
  }
  const Tensor<T>& buffer(const std::string& name) const {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw ValidationError("unknown buffer '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  std::map<std::string, ad::Var<T>>& params() { return params_; }
  const std::map<std::string, ad::Var<T>>& params() const { return params_; }
  std::map<std::string, Tensor<T>>& buffers() { return buffers_; }
  const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

  /// Deep copy with a different scalar type (e.g. float -> double for
  /// gradient checks).
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [k, v] : params_) out.add(k, v.shape()).mutable_value() = v.value().template cast<U>();
    for (const auto& [k, b] : buffers_) out.add_buffer(k, b.shape()) = b.template cast<U>();
    return out;
  }

  /// Deep copy with the same type; the copy shares no nodes with this store.
  ParamStore clone() const { return cast<T>(); }

  bool same_values(const ParamStore& o) const {
    if (params_.size() != o.params_.size() || buffers_.size() != o.buffers_.size()) return false;
    for (const auto& [k, v] : params_) {
      auto it = o.params_.find(k);
      if (it == o.params_.end() || !(it->second.value() == v.value())) return false;
    }
    for (const auto& [k, b] : buffers_) {
      auto it = o.buffers_.find(k);
      if (it == o.buffers_.end() || !(it->second == b)) return false;
    }
    return true;
  }

 private:
  std::map<std::string, ad::Var<T>> params_;
  std::map<std::string, Tensor<T>> buffers_;
};

}  // namespace latent3d

#endif
