#ifndef LATENT3D_CLASSIFIER_HPP
#define LATENT3D_CLASSIFIER_HPP

#include <array>
#include <string>
#include <vector>

#include "json.hpp"

#include "latent3d/ops.hpp"
#include "latent3d/params.hpp"
#include "latent3d/vae.hpp"

namespace latent3d {

/// Fully connected head: stem -> hidden1 -> hidden2 -> hidden3 -> logits,
/// each pre-output layer being linear -> batch norm -> ReLU -> dropout, with
/// projected residual links hidden1 -> hidden2 and hidden2 -> hidden3.
struct ClassifierArchitecture {
  std::size_t input_dim = 0;
  std::size_t stem = 256;
  std::array<std::size_t, 3> hidden{256, 128, 64};
  std::size_t n_classes = 2;
  std::array<double, 4> dropout{0.4, 0.4, 0.3, 0.2};
  friend bool operator==(const ClassifierArchitecture&, const ClassifierArchitecture&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ClassifierArchitecture, input_dim, stem, hidden, n_classes, dropout)

template <typename T = float>
struct ClassifierModel {
  ClassifierArchitecture arch;
  std::uint64_t seed = 0;
  ParamStore<T> params;

  std::string arch_hash() const { return hex64(fnv1a64(nlohmann::json(arch).dump())); }
};

using ClassifierParameters = ClassifierModel<float>;

namespace clf_detail {
inline const std::array<const char*, 4> kLayers{"stem", "h1", "h2", "h3"};
}

/// n_classes must be 2 or 3 unless `allow_extended` is set.
template <typename T = float>
ClassifierModel<T> build_classifier(std::size_t input_dim, std::size_t n_classes, std::uint64_t seed,
                                    bool allow_extended = false) {
  if (input_dim < 1) throw ValidationError("classifier input_dim must be >= 1");
  if (n_classes < 2 || (n_classes > 3 && !allow_extended))
    throw ValidationError("unsupported class count " + std::to_string(n_classes) + " (2 or 3)");
  ClassifierModel<T> m{{}, seed, {}};
  m.arch.input_dim = input_dim;
  m.arch.n_classes = n_classes;
  const std::array<std::size_t, 5> widths{input_dim, m.arch.stem, m.arch.hidden[0], m.arch.hidden[1], m.arch.hidden[2]};
  auto& p = m.params;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::string n = clf_detail::kLayers[l];
    p.add_uniform(n + ".w", {widths[l + 1], widths[l]}, widths[l], seed);
    p.add_uniform(n + ".b", {widths[l + 1]}, widths[l], seed);
    p.add(n + ".bn.g", {widths[l + 1]}, T{1});
    p.add(n + ".bn.b", {widths[l + 1]}, T{0});
    p.add_buffer(n + ".bn.mean", {widths[l + 1]}, T{0});
    p.add_buffer(n + ".bn.var", {widths[l + 1]}, T{1});
  }
  p.add_uniform("res12.w", {widths[3], widths[2]}, widths[2], seed);
  p.add_uniform("res23.w", {widths[4], widths[3]}, widths[3], seed);
  p.add_uniform("out.w", {n_classes, widths[4]}, widths[4], seed);
  p.add_uniform("out.b", {n_classes}, widths[4], seed);
  return m;
}

/// Logits for x: [N, input_dim]. Training mode uses batch statistics (and
/// updates the running ones) and draws dropout masks from `rng`.
template <typename T>
ad::Var<T> classifier_forward(ClassifierModel<T>& m, const ad::Var<T>& x, bool training, Rng* rng = nullptr) {
  if (x.shape().size() != 2 || x.shape()[1] != m.arch.input_dim)
    throw ShapeMismatch("classifier expects [N," + std::to_string(m.arch.input_dim) + "], got " + shape_str(x.shape()));
  if (training && !rng) throw ValidationError("training-mode forward needs a dropout rng");
  auto& p = m.params;
  auto layer = [&](std::size_t l, const ad::Var<T>& in) {
    const std::string n = clf_detail::kLayers[l];
    auto h = ops::linear(in, p[n + ".w"], p[n + ".b"]);
    h = ops::batch_norm(h, p[n + ".bn.g"], p[n + ".bn.b"], p.buffer(n + ".bn.mean"), p.buffer(n + ".bn.var"), training);
    h = ops::relu(h);
    return training ? ops::dropout(h, m.arch.dropout[l], *rng, true) : h;
  };
  const ad::Var<T> none;
  auto s = layer(0, x);
  auto h1 = layer(1, s);
  auto h2 = ops::add(layer(2, h1), ops::linear(h1, p["res12.w"], none));
  auto h3 = ops::add(layer(3, h2), ops::linear(h2, p["res23.w"], none));
  return ops::linear(h3, p["out.w"], p["out.b"]);
}

enum class Mode { Train, Eval };

/// Per-class probabilities for each row of `z` (row-major [N, input_dim]).
/// Eval mode is deterministic; train mode needs N >= 2 and uses `dropout_seed`.
template <typename T>
std::vector<std::vector<double>> classify(ClassifierModel<T>& m, const std::vector<std::vector<double>>& z, Mode mode,
                                          std::uint64_t dropout_seed = 0) {
  if (z.empty()) throw ValidationError("classify: empty input");
  Tensor<T> x({z.size(), m.arch.input_dim});
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i].size() != m.arch.input_dim)
      throw ShapeMismatch("classify: vector length " + std::to_string(z[i].size()) + " != input_dim " +
                          std::to_string(m.arch.input_dim));
    for (std::size_t j = 0; j < z[i].size(); ++j) x[i * m.arch.input_dim + j] = T(z[i][j]);
  }
  ad::NoGradGuard ng;
  Rng rng(dropout_seed);
  const auto logits = classifier_forward(m, ad::Var<T>(std::move(x)), mode == Mode::Train, &rng);
  const auto flat = ops::softmax_rows(logits.value());
  const std::size_t k = m.arch.n_classes;
  std::vector<std::vector<double>> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i].assign(flat.begin() + i * k, flat.begin() + (i + 1) * k);
  return out;
}

template <typename T>
std::vector<double> classify(ClassifierModel<T>& m, const std::vector<double>& z) {
  return classify(m, std::vector<std::vector<double>>{z}, Mode::Eval).front();
}

/// w_c = N / (K · n_c).
inline std::vector<double> class_weights_from(const std::vector<std::size_t>& labels, std::size_t n_classes) {
  std::vector<std::size_t> counts(n_classes, 0);
  for (auto y : labels) {
    if (y >= n_classes) throw ValidationError("label " + std::to_string(y) + " out of range");
    ++counts[y];
  }
  std::vector<double> w(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (counts[c] == 0) throw ValidationError("class " + std::to_string(c) + " has no samples");
    w[c] = double(labels.size()) / (double(n_classes) * double(counts[c]));
  }
  return w;
}

}  // namespace latent3d

#endif
