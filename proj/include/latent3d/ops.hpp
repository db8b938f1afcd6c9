#ifndef LATENT3D_OPS_HPP
#define LATENT3D_OPS_HPP

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <memory>
#include <string>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "latent3d/autograd.hpp"
#include "latent3d/rng.hpp"

namespace latent3d::ops {

using ad::Node;
using ad::Var;

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MapRM<T> mat(T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return MapRM<T>(p, Eigen::Index(rows), Eigen::Index(cols), Eigen::OuterStride<>(Eigen::Index(stride)));
}
template <typename T>
CMapRM<T> cmat(const T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return CMapRM<T>(p, Eigen::Index(rows), Eigen::Index(cols), Eigen::OuterStride<>(Eigen::Index(stride)));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeMismatch(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

// ---------------------------------------------------------------- elementwise

template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return ad::make_result<T>(std::move(y), {x}, [df](Node<T>& self) {
    auto* gx = ad::input_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  return unary(
      x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T{1} + v * (T{1} - s));
      });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(
      x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return unary(
      x, [slope](T v) { return v > T{0} ? v : slope * v; },
      [slope](T v, T) { return v > T{0} ? T{1} : slope; });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return unary(
      x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return ad::make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = ad::input_grad(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  auto y = x.value().reshaped(std::move(shape));
  return ad::make_result<T>(std::move(y), {x}, [](Node<T>& self) {
    if (auto* g = ad::input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

/// Channels [begin, begin+count) of an [N, C, ...] tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const auto& s = x.shape();
  if (s.size() < 2 || begin + count > s[1]) throw ShapeMismatch("slice_channels out of range");
  const std::size_t n = s[0], c = s[1], inner = shape_size(s) / (n * c);
  Shape os = s;
  os[1] = count;
  Tensor<T> y(os);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.value().data() + (i * c + begin) * inner, count * inner, y.data() + i * count * inner);
  return ad::make_result<T>(std::move(y), {x}, [n, c, inner, begin, count](Node<T>& self) {
    if (auto* g = ad::input_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) {
        T* dst = g->data() + (i * c + begin) * inner;
        const T* src = self.grad.data() + i * count * inner;
        for (std::size_t j = 0; j < count * inner; ++j) dst[j] += src[j];
      }
  });
}

// ---------------------------------------------------------------- convolution

struct ConvSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

inline std::size_t conv_out_edge(std::size_t in, const ConvSpec& s) {
  if (in + 2 * s.padding < s.kernel) throw ShapeMismatch("convolution input smaller than kernel");
  return (in + 2 * s.padding - s.kernel) / s.stride + 1;
}

inline Dims3 conv_out_dims(const Dims3& in, const ConvSpec& s) {
  return {conv_out_edge(in[0], s), conv_out_edge(in[1], s), conv_out_edge(in[2], s)};
}

inline std::size_t transpose_out_edge(std::size_t in, const ConvSpec& s, std::size_t output_padding) {
  return (in - 1) * s.stride + s.kernel + output_padding - 2 * s.padding;
}

namespace detail {

inline Dims3 spatial(const Shape& s) { return {s[2], s[3], s[4]}; }
inline std::size_t voxels(const Dims3& d) { return d[0] * d[1] * d[2]; }

/// col[(c*K^3 + kidx), o] = img[c, o*stride - pad + k] (zero outside).
template <typename T>
void im2col(const T* img, std::size_t channels, const Dims3& in, const Dims3& out, const ConvSpec& s,
            T* col) {
  const std::size_t k = s.kernel, k3 = k * k * k, no = voxels(out);
  const auto pad = static_cast<long>(s.padding);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = img + c * voxels(in);
    for (std::size_t kk = 0; kk < k3; ++kk) {
      const long kd = long(kk / (k * k)), kh = long((kk / k) % k), kw = long(kk % k);
      T* dst = col + (c * k3 + kk) * no;
      for (std::size_t od = 0; od < out[0]; ++od) {
        const long id = long(od * s.stride) - pad + kd;
        for (std::size_t oh = 0; oh < out[1]; ++oh) {
          const long ih = long(oh * s.stride) - pad + kh;
          T* row = dst + (od * out[1] + oh) * out[2];
          if (id < 0 || id >= long(in[0]) || ih < 0 || ih >= long(in[1])) {
            std::fill_n(row, out[2], T{0});
            continue;
          }
          const T* srow = src + (std::size_t(id) * in[1] + std::size_t(ih)) * in[2];
          for (std::size_t ow = 0; ow < out[2]; ++ow) {
            const long iw = long(ow * s.stride) - pad + kw;
            row[ow] = (iw < 0 || iw >= long(in[2])) ? T{0} : srow[iw];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates col back into img.
template <typename T>
void col2im(const T* col, std::size_t channels, const Dims3& in, const Dims3& out, const ConvSpec& s,
            T* img) {
  const std::size_t k = s.kernel, k3 = k * k * k, no = voxels(out);
  const auto pad = static_cast<long>(s.padding);
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = img + c * voxels(in);
    for (std::size_t kk = 0; kk < k3; ++kk) {
      const long kd = long(kk / (k * k)), kh = long((kk / k) % k), kw = long(kk % k);
      const T* src = col + (c * k3 + kk) * no;
      for (std::size_t od = 0; od < out[0]; ++od) {
        const long id = long(od * s.stride) - pad + kd;
        if (id < 0 || id >= long(in[0])) continue;
        for (std::size_t oh = 0; oh < out[1]; ++oh) {
          const long ih = long(oh * s.stride) - pad + kh;
          if (ih < 0 || ih >= long(in[1])) continue;
          const T* row = src + (od * out[1] + oh) * out[2];
          T* drow = dst + (std::size_t(id) * in[1] + std::size_t(ih)) * in[2];
          for (std::size_t ow = 0; ow < out[2]; ++ow) {
            const long iw = long(ow * s.stride) - pad + kw;
            if (iw >= 0 && iw < long(in[2])) drow[iw] += row[ow];
          }
        }
      }
    }
  }
}

/// Geometry of the zero-padded flat layout used by the 3x3x3/stride-1 path.
/// Output voxel (d,h,w) lives at q = d*P2 + h*P1 + w and reads padded input
/// at q + kd*P2 + kh*P1 + kw, so each kernel tap is one GEMM over a shifted
/// contiguous column window.
struct ShiftLayout {
  std::size_t p1, p2, nq, padded;
  explicit ShiftLayout(const Dims3& d)
      : p1(d[2] + 2), p2((d[1] + 2) * (d[2] + 2)), nq(d[0] * p2), padded((d[0] + 2) * p2 + 2 * p1 + 2) {}
  std::size_t tap_offset(std::size_t kk) const { return (kk / 9) * p2 + ((kk / 3) % 3) * p1 + kk % 3; }
};

template <typename T>
void pad_into(const T* src, std::size_t channels, const Dims3& d, const ShiftLayout& L, T* dst) {
  std::fill_n(dst, channels * L.padded, T{0});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t z = 0; z < d[0]; ++z)
      for (std::size_t y = 0; y < d[1]; ++y)
        std::copy_n(src + ((c * d[0] + z) * d[1] + y) * d[2], d[2],
                    dst + c * L.padded + (z + 1) * L.p2 + (y + 1) * L.p1 + 1);
}

template <typename T>
void tap_weights(const T* w, std::size_t co, std::size_t ci, std::size_t kk, MatRM<T>& out) {
  out.resize(Eigen::Index(co), Eigen::Index(ci));
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < ci; ++i) out(Eigen::Index(o), Eigen::Index(i)) = w[(o * ci + i) * 27 + kk];
}

template <typename T>
void conv3_forward_shift(const T* x, const T* w, std::size_t ci, std::size_t co, const Dims3& d, T* y) {
  const ShiftLayout L(d);
  std::vector<T> xp(ci * L.padded), yp(co * L.nq, T{0});
  pad_into(x, ci, d, L, xp.data());
  auto Y = mat(yp.data(), co, L.nq, L.nq);
  MatRM<T> wk;
  for (std::size_t kk = 0; kk < 27; ++kk) {
    tap_weights(w, co, ci, kk, wk);
    Y.noalias() += wk * cmat(xp.data() + L.tap_offset(kk), ci, L.nq, L.padded);
  }
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t z = 0; z < d[0]; ++z)
      for (std::size_t r = 0; r < d[1]; ++r)
        std::copy_n(yp.data() + o * L.nq + z * L.p2 + r * L.p1, d[2], y + ((o * d[0] + z) * d[1] + r) * d[2]);
}

template <typename T>
void conv3_backward_shift(const T* x, const T* w, const T* gy, std::size_t ci, std::size_t co,
                          const Dims3& d, T* gx, T* gw) {
  const ShiftLayout L(d);
  std::vector<T> gp(co * L.nq, T{0});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t z = 0; z < d[0]; ++z)
      for (std::size_t r = 0; r < d[1]; ++r)
        std::copy_n(gy + ((o * d[0] + z) * d[1] + r) * d[2], d[2], gp.data() + o * L.nq + z * L.p2 + r * L.p1);
  const auto G = cmat(gp.data(), co, L.nq, L.nq);
  std::vector<T> xp;
  if (gw) {
    xp.resize(ci * L.padded);
    pad_into(x, ci, d, L, xp.data());
    MatRM<T> gk(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(ci));
    for (std::size_t kk = 0; kk < 27; ++kk) {
      gk.noalias() = G * cmat(xp.data() + L.tap_offset(kk), ci, L.nq, L.padded).transpose();
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < ci; ++i) gw[(o * ci + i) * 27 + kk] += gk(Eigen::Index(o), Eigen::Index(i));
    }
  }
  if (gx) {
    std::vector<T> gxp(ci * L.padded, T{0});
    MatRM<T> wk;
    for (std::size_t kk = 0; kk < 27; ++kk) {
      tap_weights(w, co, ci, kk, wk);
      mat(gxp.data() + L.tap_offset(kk), ci, L.nq, L.padded).noalias() += wk.transpose() * G;
    }
    for (std::size_t i = 0; i < ci; ++i)
      for (std::size_t z = 0; z < d[0]; ++z)
        for (std::size_t r = 0; r < d[1]; ++r) {
          const T* src = gxp.data() + i * L.padded + (z + 1) * L.p2 + (r + 1) * L.p1 + 1;
          T* dst = gx + ((i * d[0] + z) * d[1] + r) * d[2];
          for (std::size_t c = 0; c < d[2]; ++c) dst[c] += src[c];
        }
  }
}

}  // namespace detail

/// 3D convolution. x: [N, Ci, D, H, W], w: [Co, Ci, k, k, k], b: [Co] or undefined.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, ConvSpec spec) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 5) throw ShapeMismatch("conv3d expects [N,C,D,H,W], got " + shape_str(xs));
  if (ws.size() != 5 || ws[1] != xs[1] || ws[2] != spec.kernel)
    throw ShapeMismatch("conv3d weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  const std::size_t n = xs[0], ci = xs[1], co = ws[0], k3 = spec.kernel * spec.kernel * spec.kernel;
  const Dims3 in = detail::spatial(xs);
  const Dims3 out = conv_out_dims(in, spec);
  const std::size_t nin = detail::voxels(in), nout = detail::voxels(out);
  const bool shift = spec.kernel == 3 && spec.stride == 1 && spec.padding == 1;
  const bool pointwise = spec.kernel == 1 && spec.stride == 1 && spec.padding == 0;

  Tensor<T> y({n, co, out[0], out[1], out[2]});
  std::vector<T> col;
  for (std::size_t s = 0; s < n; ++s) {
    const T* xn = x.value().data() + s * ci * nin;
    T* yn = y.data() + s * co * nout;
    if (shift) {
      detail::conv3_forward_shift(xn, w.value().data(), ci, co, in, yn);
    } else if (pointwise) {
      mat(yn, co, nout, nout).noalias() = cmat(w.value().data(), co, ci, ci) * cmat(xn, ci, nout, nin);
    } else {
      col.resize(ci * k3 * nout);
      detail::im2col(xn, ci, in, out, spec, col.data());
      mat(yn, co, nout, nout).noalias() =
          cmat(w.value().data(), co, ci * k3, ci * k3) * cmat(col.data(), ci * k3, nout, nout);
    }
    if (b.defined())
      for (std::size_t o = 0; o < co; ++o) {
        const T bo = b.value()[o];
        for (std::size_t v = 0; v < nout; ++v) yn[o * nout + v] += bo;
      }
  }
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return ad::make_result<T>(std::move(y), std::move(inputs), [=](Node<T>& self) {
    auto* gx = ad::input_grad(self, 0);
    auto* gw = ad::input_grad(self, 1);
    auto* gb = self.inputs.size() > 2 ? ad::input_grad(self, 2) : nullptr;
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    std::vector<T> col, gcol;
    for (std::size_t s = 0; s < n; ++s) {
      const T* xn = xv.data() + s * ci * nin;
      const T* gn = self.grad.data() + s * co * nout;
      if (gb)
        for (std::size_t o = 0; o < co; ++o) {
          T acc{0};
          for (std::size_t v = 0; v < nout; ++v) acc += gn[o * nout + v];
          (*gb)[o] += acc;
        }
      const auto G = cmat(gn, co, nout, nout);
      if (shift) {
        detail::conv3_backward_shift(xn, wv.data(), gn, ci, co, in, gx ? gx->data() + s * ci * nin : nullptr,
                                     gw ? gw->data() : nullptr);
      } else if (pointwise) {
        if (gw) mat(gw->data(), co, ci, ci).noalias() += G * cmat(xn, ci, nout, nin).transpose();
        if (gx) mat(gx->data() + s * ci * nin, ci, nin, nin).noalias() += cmat(wv.data(), co, ci, ci).transpose() * G;
      } else {
        const std::size_t rows = ci * k3;
        if (gw) {
          col.resize(rows * nout);
          detail::im2col(xn, ci, in, out, spec, col.data());
          mat(gw->data(), co, rows, rows).noalias() += G * cmat(col.data(), rows, nout, nout).transpose();
        }
        if (gx) {
          gcol.resize(rows * nout);
          mat(gcol.data(), rows, nout, nout).noalias() = cmat(wv.data(), co, rows, rows).transpose() * G;
          detail::col2im(gcol.data(), ci, in, out, spec, gx->data() + s * ci * nin);
        }
      }
    }
  });
}

/// Transposed 3D convolution (adjoint of conv3d with the same spec).
/// x: [N, Ci, D, H, W], w: [Ci, Co, k, k, k]. Output edge is
/// (in-1)*stride - 2*pad + k + output_padding.
template <typename T>
Var<T> conv_transpose3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, ConvSpec spec,
                        std::size_t output_padding) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 5) throw ShapeMismatch("conv_transpose3d expects [N,C,D,H,W]");
  if (ws.size() != 5 || ws[0] != xs[1] || ws[2] != spec.kernel)
    throw ShapeMismatch("conv_transpose3d weight " + shape_str(ws) + " incompatible with " + shape_str(xs));
  if (output_padding >= spec.stride) throw ValidationError("output_padding must be < stride");
  const std::size_t n = xs[0], ci = xs[1], co = ws[1], k3 = spec.kernel * spec.kernel * spec.kernel;
  const Dims3 in = detail::spatial(xs);
  const Dims3 out{transpose_out_edge(in[0], spec, output_padding), transpose_out_edge(in[1], spec, output_padding),
                  transpose_out_edge(in[2], spec, output_padding)};
  const std::size_t nin = detail::voxels(in), nout = detail::voxels(out), rows = co * k3;

  Tensor<T> y({n, co, out[0], out[1], out[2]});
  std::vector<T> col(rows * nin);
  for (std::size_t s = 0; s < n; ++s) {
    mat(col.data(), rows, nin, nin).noalias() =
        cmat(w.value().data(), ci, rows, rows).transpose() * cmat(x.value().data() + s * ci * nin, ci, nin, nin);
    T* yn = y.data() + s * co * nout;
    // im2col geometry runs from the (larger) output grid to the input grid.
    detail::col2im(col.data(), co, out, in, spec, yn);
    if (b.defined())
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t v = 0; v < nout; ++v) yn[o * nout + v] += b.value()[o];
  }
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return ad::make_result<T>(std::move(y), std::move(inputs), [=](Node<T>& self) {
    auto* gx = ad::input_grad(self, 0);
    auto* gw = ad::input_grad(self, 1);
    auto* gb = self.inputs.size() > 2 ? ad::input_grad(self, 2) : nullptr;
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    std::vector<T> gcol(rows * nin);
    for (std::size_t s = 0; s < n; ++s) {
      const T* gn = self.grad.data() + s * co * nout;
      if (gb)
        for (std::size_t o = 0; o < co; ++o) {
          T acc{0};
          for (std::size_t v = 0; v < nout; ++v) acc += gn[o * nout + v];
          (*gb)[o] += acc;
        }
      detail::im2col(gn, co, out, in, spec, gcol.data());
      const auto GC = cmat(gcol.data(), rows, nin, nin);
      if (gx) mat(gx->data() + s * ci * nin, ci, nin, nin).noalias() += cmat(wv.data(), ci, rows, rows) * GC;
      if (gw) mat(gw->data(), ci, rows, rows).noalias() += cmat(xv.data() + s * ci * nin, ci, nin, nin) * GC.transpose();
    }
  });
}

// ---------------------------------------------------------------- normalisation

/// Group normalisation over [N, C, ...] with per-channel affine.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups,
                  double eps = 1e-6) {
  const auto& s = x.shape();
  const std::size_t n = s[0], c = s[1];
  if (groups == 0 || c % groups != 0)
    throw ValidationError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
  if (gamma.size() != c || beta.size() != c) throw ShapeMismatch("group_norm affine size");
  const std::size_t inner = shape_size(s) / (n * c), cpg = c / groups, gsize = cpg * inner;
  std::vector<double> mean(n * groups), rstd(n * groups);
  Tensor<T> y(s);
  const T* xv = x.value().data();
  for (std::size_t i = 0; i < n * groups; ++i) {
    const T* p = xv + i * gsize;
    double m = 0.0;
    for (std::size_t j = 0; j < gsize; ++j) m += p[j];
    m /= double(gsize);
    double v = 0.0;
    for (std::size_t j = 0; j < gsize; ++j) v += (p[j] - m) * (p[j] - m);
    v /= double(gsize);
    mean[i] = m;
    rstd[i] = 1.0 / std::sqrt(v + eps);
    for (std::size_t cc = 0; cc < cpg; ++cc) {
      const std::size_t ch = (i % groups) * cpg + cc;
      const double ga = gamma.value()[ch], be = beta.value()[ch];
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t idx = i * gsize + cc * inner + j;
        y[idx] = T((xv[idx] - m) * rstd[i] * ga + be);
      }
    }
  }
  return ad::make_result<T>(std::move(y), {x, gamma, beta}, [=](Node<T>& self) {
    auto* gx = ad::input_grad(self, 0);
    auto* gg = ad::input_grad(self, 1);
    auto* gbeta = ad::input_grad(self, 2);
    const T* xv = self.inputs[0]->value.data();
    const auto& ga = self.inputs[1]->value;
    for (std::size_t i = 0; i < n * groups; ++i) {
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        const std::size_t ch = (i % groups) * cpg + cc;
        double sg = 0.0, sgx = 0.0;
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t idx = i * gsize + cc * inner + j;
          const double xh = (xv[idx] - mean[i]) * rstd[i];
          const double g = self.grad[idx];
          sg += g;
          sgx += g * xh;
        }
        if (gbeta) (*gbeta)[ch] += T(sg);
        if (gg) (*gg)[ch] += T(sgx);
        m1 += sg * double(ga[ch]);
        m2 += sgx * double(ga[ch]);
      }
      if (!gx) continue;
      m1 /= double(gsize);
      m2 /= double(gsize);
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        const std::size_t ch = (i % groups) * cpg + cc;
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t idx = i * gsize + cc * inner + j;
          const double xh = (xv[idx] - mean[i]) * rstd[i];
          (*gx)[idx] += T(rstd[i] * (self.grad[idx] * double(ga[ch]) - m1 - xh * m2));
        }
      }
    }
  });
}

/// Batch normalisation over [N, F]. In training mode the batch statistics are
/// used and the running buffers updated (unbiased variance, PyTorch-style);
/// in eval mode the running buffers are used.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, double momentum = 0.1, double eps = 1e-5) {
  const auto& s = x.shape();
  if (s.size() != 2) throw ShapeMismatch("batch_norm expects [N, F]");
  const std::size_t n = s[0], f = s[1];
  if (training && n < 2) throw ValidationError("batch_norm in training mode needs batch size >= 2");
  std::vector<double> mean(f), rstd(f);
  const T* xv = x.value().data();
  for (std::size_t j = 0; j < f; ++j) {
    double m, v;
    if (training) {
      m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += xv[i * f + j];
      m /= double(n);
      v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += (xv[i * f + j] - m) * (xv[i * f + j] - m);
      v /= double(n);
      running_mean[j] = T((1.0 - momentum) * running_mean[j] + momentum * m);
      running_var[j] = T((1.0 - momentum) * running_var[j] + momentum * v * double(n) / double(n - 1));
    } else {
      m = running_mean[j];
      v = running_var[j];
    }
    mean[j] = m;
    rstd[j] = 1.0 / std::sqrt(v + eps);
  }
  Tensor<T> y(s);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j)
      y[i * f + j] = T((xv[i * f + j] - mean[j]) * rstd[j] * gamma.value()[j] + beta.value()[j]);
  return ad::make_result<T>(std::move(y), {x, gamma, beta}, [=](Node<T>& self) {
    auto* gx = ad::input_grad(self, 0);
    auto* gg = ad::input_grad(self, 1);
    auto* gbeta = ad::input_grad(self, 2);
    const T* xv = self.inputs[0]->value.data();
    const auto& ga = self.inputs[1]->value;
    for (std::size_t j = 0; j < f; ++j) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double g = self.grad[i * f + j];
        sg += g;
        sgx += g * (xv[i * f + j] - mean[j]) * rstd[j];
      }
      if (gbeta) (*gbeta)[j] += T(sg);
      if (gg) (*gg)[j] += T(sgx);
      if (!gx) continue;
      const double gj = ga[j];
      for (std::size_t i = 0; i < n; ++i) {
        const double g = self.grad[i * f + j] * gj;
        if (training) {
          const double xh = (xv[i * f + j] - mean[j]) * rstd[j];
          (*gx)[i * f + j] += T(rstd[j] * (g - sg * gj / double(n) - xh * sgx * gj / double(n)));
        } else {
          (*gx)[i * f + j] += T(g * rstd[j]);
        }
      }
    }
  });
}

/// y = x W^T + b with x: [N, in], W: [out, in], b: [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 2 || ws.size() != 2 || ws[1] != xs[1])
    throw ShapeMismatch("linear: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const std::size_t n = xs[0], in = xs[1], out = ws[0];
  Tensor<T> y({n, out});
  auto Y = mat(y.data(), n, out, out);
  Y.noalias() = cmat(x.value().data(), n, in, in) * cmat(w.value().data(), out, in, in).transpose();
  if (b.defined())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out; ++o) y[i * out + o] += b.value()[o];
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return ad::make_result<T>(std::move(y), std::move(inputs), [=](Node<T>& self) {
    const auto G = cmat(self.grad.data(), n, out, out);
    if (auto* gx = ad::input_grad(self, 0))
      mat(gx->data(), n, in, in).noalias() += G * cmat(self.inputs[1]->value.data(), out, in, in);
    if (auto* gw = ad::input_grad(self, 1))
      mat(gw->data(), out, in, in).noalias() += G.transpose() * cmat(self.inputs[0]->value.data(), n, in, in);
    if (self.inputs.size() > 2)
      if (auto* gb = ad::input_grad(self, 2))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t o = 0; o < out; ++o) (*gb)[o] += self.grad[i * out + o];
  });
}

/// Inverted dropout; identity when not training or p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ValidationError("dropout rate must be < 1");
  auto mask = std::make_shared<std::vector<T>>(x.size());
  Tensor<T> y(x.shape());
  const T keep = T(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? T{0} : keep;
    y[i] = x.value()[i] * (*mask)[i];
  }
  return ad::make_result<T>(std::move(y), {x}, [mask](Node<T>& self) {
    if (auto* g = ad::input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (*mask)[i];
  });
}

/// z = mu + exp(0.5 * log_var) * eps, eps held constant.
template <typename T>
Var<T> reparameterize(const Var<T>& mu, const Var<T>& log_var, const Tensor<T>& eps) {
  require_same_shape(mu.shape(), log_var.shape(), "reparameterize");
  require_same_shape(mu.shape(), eps.shape(), "reparameterize noise");
  Tensor<T> z(mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = mu.value()[i] + std::exp(T(0.5) * log_var.value()[i]) * eps[i];
  return ad::make_result<T>(std::move(z), {mu, log_var}, [eps](Node<T>& self) {
    if (auto* g = ad::input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = ad::input_grad(self, 1)) {
      const auto& lv = self.inputs[1]->value;
      for (std::size_t i = 0; i < g->size(); ++i)
        (*g)[i] += self.grad[i] * T(0.5) * std::exp(T(0.5) * lv[i]) * eps[i];
    }
  });
}

// ---------------------------------------------------------------- reductions

/// mean |a - b|
template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "l1_loss");
  const std::size_t n = a.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(double(a.value()[i]) - double(b.value()[i]));
  return ad::make_result<T>(Tensor<T>({1}, T(acc / double(n))), {a, b}, [n](Node<T>& self) {
    const T g = self.grad[0] / T(n);
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    auto* ga = ad::input_grad(self, 0);
    auto* gb = ad::input_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = av[i] - bv[i];
      const T sg = d > T{0} ? g : (d < T{0} ? -g : T{0});
      if (ga) (*ga)[i] += sg;
      if (gb) (*gb)[i] -= sg;
    }
  });
}

/// mean (a - b)^2
template <typename T>
Var<T> mse_loss(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mse_loss");
  const std::size_t n = a.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = double(a.value()[i]) - double(b.value()[i]);
    acc += d * d;
  }
  return ad::make_result<T>(Tensor<T>({1}, T(acc / double(n))), {a, b}, [n](Node<T>& self) {
    const T g = T(2) * self.grad[0] / T(n);
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    auto* ga = ad::input_grad(self, 0);
    auto* gb = ad::input_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = g * (av[i] - bv[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

/// mean (a - target)^2 for a constant target.
template <typename T>
Var<T> mse_to_constant(const Var<T>& a, T target) {
  const std::size_t n = a.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = double(a.value()[i]) - double(target);
    acc += d * d;
  }
  return ad::make_result<T>(Tensor<T>({1}, T(acc / double(n))), {a}, [n, target](Node<T>& self) {
    if (auto* g = ad::input_grad(self, 0)) {
      const T s = T(2) * self.grad[0] / T(n);
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += s * (self.inputs[0]->value[i] - target);
    }
  });
}

/// 0.5 * sum(mu^2 + exp(lv) - lv - 1), summed per sample and averaged over
/// the leading batch dimension.
template <typename T>
Var<T> kl_loss(const Var<T>& mu, const Var<T>& log_var) {
  require_same_shape(mu.shape(), log_var.shape(), "kl_loss");
  const std::size_t batch = mu.shape().empty() ? 1 : mu.shape()[0];
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double m = mu.value()[i], lv = log_var.value()[i];
    acc += m * m + std::exp(lv) - lv - 1.0;
  }
  return ad::make_result<T>(Tensor<T>({1}, T(0.5 * acc / double(batch))), {mu, log_var}, [batch](Node<T>& self) {
    const T s = self.grad[0] / T(batch);
    if (auto* g = ad::input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.inputs[0]->value[i];
    if (auto* g = ad::input_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i)
        (*g)[i] += s * T(0.5) * (std::exp(self.inputs[1]->value[i]) - T{1});
  });
}

/// Row-wise log-softmax of an [N, K] value.
template <typename T>
std::vector<double> log_softmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, double(logits[i * k + j]));
    double se = 0.0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(double(logits[i * k + j]) - mx);
    const double lse = mx + std::log(se);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = double(logits[i * k + j]) - lse;
  }
  return out;
}

inline void check_labels(const std::vector<std::size_t>& labels, std::size_t n, std::size_t k) {
  if (labels.size() != n) throw ShapeMismatch("label count does not match logits batch");
  for (auto y : labels)
    if (y >= k) throw ValidationError("label " + std::to_string(y) + " out of range for " + std::to_string(k) + " classes");
}

/// sum_i w_{y_i} * (-log p_{i,y_i}) / sum_i w_{y_i}
template <typename T>
Var<T> weighted_cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& labels,
                              const std::vector<double>& weights) {
  const std::size_t n = logits.shape().at(0), k = logits.shape().at(1);
  check_labels(labels, n, k);
  if (weights.size() != k) throw ValidationError("class weight count does not match classes");
  for (double w : weights)
    if (!(w > 0.0)) throw ValidationError("class weights must be positive");
  const auto lsm = log_softmax_rows(logits.value());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    num += weights[labels[i]] * -lsm[i * k + labels[i]];
    den += weights[labels[i]];
  }
  return ad::make_result<T>(Tensor<T>({1}, T(num / den)), {logits}, [=](Node<T>& self) {
    auto* g = ad::input_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = double(self.grad[0]) * weights[labels[i]] / den;
      for (std::size_t j = 0; j < k; ++j)
        (*g)[i * k + j] += T(s * (std::exp(lsm[i * k + j]) - (j == labels[i] ? 1.0 : 0.0)));
    }
  });
}

/// mean_i -(1 - p_{y_i})^gamma * log p_{y_i}
template <typename T>
Var<T> focal_loss(const Var<T>& logits, const std::vector<std::size_t>& labels, double gamma) {
  if (gamma < 0.0) throw ValidationError("focal gamma must be >= 0");
  const std::size_t n = logits.shape().at(0), k = logits.shape().at(1);
  check_labels(labels, n, k);
  const auto lsm = log_softmax_rows(logits.value());
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lp = lsm[i * k + labels[i]];
    const double q = -std::expm1(lp);  // 1 - p, accurate near p = 1
    acc += -(gamma == 0.0 ? 1.0 : std::pow(q, gamma)) * lp;
  }
  return ad::make_result<T>(Tensor<T>({1}, T(acc / double(n))), {logits}, [=](Node<T>& self) {
    auto* g = ad::input_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < n; ++i) {
      const double lp = lsm[i * k + labels[i]];
      const double p = std::exp(lp), q = -std::expm1(lp);
      // d/dp of -(1-p)^g log p
      double dl_dp = -(gamma == 0.0 ? 1.0 : std::pow(q, gamma)) / p;
      if (gamma != 0.0 && q > 0.0) dl_dp += gamma * std::pow(q, gamma - 1.0) * lp;
      const double s = double(self.grad[0]) / double(n) * dl_dp * p;
      for (std::size_t j = 0; j < k; ++j)
        (*g)[i * k + j] += T(s * ((j == labels[i] ? 1.0 : 0.0) - std::exp(lsm[i * k + j])));
    }
  });
}

/// sum_i coeffs[i] * terms[i] over scalar terms.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<double>& coeffs) {
  if (terms.size() != coeffs.size()) throw ValidationError("weighted_sum arity mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].size() != 1) throw ShapeMismatch("weighted_sum needs scalar terms");
    acc += coeffs[i] * double(terms[i].item());
  }
  return ad::make_result<T>(Tensor<T>({1}, T(acc)), terms, [coeffs](Node<T>& self) {
    for (std::size_t i = 0; i < coeffs.size(); ++i)
      if (auto* g = ad::input_grad(self, i)) (*g)[0] += T(coeffs[i]) * self.grad[0];
  });
}

/// Row-wise softmax of an [N, K] value (no gradient).
template <typename T>
std::vector<double> softmax_rows(const Tensor<T>& logits) {
  auto out = log_softmax_rows(logits);
  for (auto& v : out) v = std::exp(v);
  return out;
}

}  // namespace latent3d::ops

#endif
