#include <gtest/gtest.h>

#include "latent3d/checkpoint.hpp"
#include "latent3d/classifier.hpp"
#include "latent3d/trainer.hpp"
#include "oracles.hpp"

using namespace latent3d;

namespace {

std::vector<std::vector<double>> random_rows(std::size_t n, std::size_t d, Rng& rng) {
  std::vector<std::vector<double>> r(n, std::vector<double>(d));
  for (auto& row : r)
    for (auto& v : row) v = rng.normal();
  return r;
}

// relu(batchnorm_eval(W x + b)) with running statistics, by plain loops.
std::vector<double> dense_eval(const ParamStore<double>& p, const std::string& n, const std::vector<double>& x) {
  const auto& w = p[n + ".w"].value();
  const auto& b = p[n + ".b"].value();
  const auto& g = p[n + ".bn.g"].value();
  const auto& beta = p[n + ".bn.b"].value();
  const auto& rm = p.buffer(n + ".bn.mean");
  const auto& rv = p.buffer(n + ".bn.var");
  const std::size_t out = w.dim(0), in = w.dim(1);
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = b[o];
    for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[i];
    acc = (acc - rm[o]) / std::sqrt(rv[o] + 1e-5) * g[o] + beta[o];
    y[o] = std::max(acc, 0.0);
  }
  return y;
}

std::vector<double> matvec(const Tensor<double>& w, const std::vector<double>& x) {
  std::vector<double> y(w.dim(0), 0.0);
  for (std::size_t o = 0; o < w.dim(0); ++o)
    for (std::size_t i = 0; i < w.dim(1); ++i) y[o] += w[o * w.dim(1) + i] * x[i];
  return y;
}

void zero(ParamStore<double>& p, const std::string& name) {
  for (auto& v : p[name].mutable_value().values()) v = 0;
}

}  // namespace

TEST(BuildClassifier, LayerWidthsForPresetLatents) {
  auto a = build_classifier(24 * 24 * 24 * 3, 2, 1);
  EXPECT_EQ(a.arch.input_dim, 41472u);
  EXPECT_EQ(a.params["stem.w"].shape(), (Shape{256, 41472}));
  EXPECT_EQ(a.params["h1.w"].shape(), (Shape{256, 256}));
  EXPECT_EQ(a.params["h2.w"].shape(), (Shape{128, 256}));
  EXPECT_EQ(a.params["h3.w"].shape(), (Shape{64, 128}));
  EXPECT_EQ(a.params["res12.w"].shape(), (Shape{128, 256}));
  EXPECT_EQ(a.params["res23.w"].shape(), (Shape{64, 128}));
  auto b = build_classifier(3 * 3 * 3 * 3, 3, 1);
  EXPECT_EQ(b.params["out.w"].shape(), (Shape{3, 64}));
  EXPECT_EQ(b.arch.dropout, (std::array<double, 4>{0.4, 0.4, 0.3, 0.2}));
}

TEST(BuildClassifier, DeterministicAndValidated) {
  auto a = build_classifier(81, 3, 7), b = build_classifier(81, 3, 7), c = build_classifier(81, 3, 8);
  EXPECT_TRUE(a.params.same_values(b.params));
  EXPECT_FALSE(a.params.same_values(c.params));
  EXPECT_THROW(build_classifier(81, 4, 0), ValidationError);
  EXPECT_THROW(build_classifier(81, 1, 0), ValidationError);
  EXPECT_THROW(build_classifier(0, 2, 0), ValidationError);
  EXPECT_EQ(build_classifier(81, 5, 0, true).arch.n_classes, 5u);
}

TEST(Classify, EvalIsDeterministicAndNormalised) {
  Rng rng(1);
  auto m = build_classifier(30, 3, 2);
  const auto z = random_rows(9, 30, rng);
  const auto p1 = classify(m, z, Mode::Eval), p2 = classify(m, z, Mode::Eval);
  EXPECT_EQ(p1, p2);
  for (const auto& p : p1) {
    ASSERT_EQ(p.size(), 3u);
    EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-6);
  }
  // Batch composition only changes float rounding in eval mode.
  const auto single = classify(m, z[0]);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(single[c], p1[0][c], 1e-6);
  EXPECT_THROW(classify(m, std::vector<double>(29)), ShapeMismatch);
}

TEST(Classify, TrainModeIsReproducibleFromDropoutSeed) {
  Rng rng(2);
  auto z = random_rows(6, 12, rng);
  auto m1 = build_classifier(12, 2, 3), m2 = build_classifier(12, 2, 3);
  const auto a = classify(m1, z, Mode::Train, 99), b = classify(m2, z, Mode::Train, 99);
  EXPECT_EQ(a, b);
  auto m3 = build_classifier(12, 2, 3);
  EXPECT_NE(classify(m3, z, Mode::Train, 100), a);
}

TEST(Classify, ZeroFinalLayerGivesUniformProbabilities) {
  Rng rng(3);
  auto m = build_classifier(10, 3, 4);
  for (auto n : {"out.w", "out.b"})
    for (auto& v : m.params[n].mutable_value().values()) v = 0.f;
  for (const auto& p : classify(m, random_rows(5, 10, rng), Mode::Eval))
    for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
}

TEST(Classify, ResidualLinkCarriesHidden1WhenBranchIsZeroed) {
  Rng rng(4);
  auto m = build_classifier<double>(20, 2, 5);
  auto& p = m.params;
  // Non-trivial running statistics so the eval path is exercised.
  for (const char* l : {"stem", "h1"}) {
    for (auto& v : p.buffer(std::string(l) + ".bn.mean").values()) v = 0.1 * rng.normal();
    for (auto& v : p.buffer(std::string(l) + ".bn.var").values()) v = rng.uniform(0.5, 2);
  }
  const auto x = random_rows(1, 20, rng).front();
  const auto before = classify(m, x);
  for (const char* n : {"h2.w", "h2.b", "h2.bn.g", "h2.bn.b", "h3.w", "h3.b", "h3.bn.g", "h3.bn.b"}) zero(p, n);
  // hidden2 = res12 · hidden1, hidden3 = res23 · hidden2.
  const auto h1 = dense_eval(p, "h1", dense_eval(p, "stem", x));
  const auto h3 = matvec(p["res23.w"].value(), matvec(p["res12.w"].value(), h1));
  auto logits = matvec(p["out.w"].value(), h3);
  for (std::size_t c = 0; c < 2; ++c) logits[c] += p["out.b"].value()[c];
  const double e0 = std::exp(logits[0] - std::max(logits[0], logits[1])),
               e1 = std::exp(logits[1] - std::max(logits[0], logits[1]));
  const auto after = classify(m, x);
  EXPECT_NEAR(after[0], e0 / (e0 + e1), 1e-12);
  EXPECT_NE(after, before);
}

TEST(ClassWeights, Examples) {
  EXPECT_EQ(class_weights_from({0, 1, 0, 1}, 2), (std::vector<double>{1.0, 1.0}));
  std::vector<std::size_t> y(90, 0);
  y.insert(y.end(), 10, 1);
  auto w = class_weights_from(y, 2);
  EXPECT_NEAR(w[0], 100.0 / 180.0, 1e-12);
  EXPECT_NEAR(w[1], 5.0, 1e-12);
  std::vector<std::size_t> t;
  t.insert(t.end(), 218, 0);
  t.insert(t.end(), 36, 1);
  t.insert(t.end(), 108, 2);
  auto w3 = class_weights_from(t, 3);
  const auto ref = oracle::balanced_weights({218, 36, 108});
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(w3[c], ref[c], 1e-12);
  EXPECT_NEAR(w3[0], 0.554, 5e-4);
  EXPECT_NEAR(w3[1], 3.352, 5e-4);
  EXPECT_NEAR(w3[2], 1.117, 5e-4);
  EXPECT_THROW(class_weights_from({0, 0}, 2), ValidationError);
  EXPECT_THROW(class_weights_from({0, 2}, 2), ValidationError);
}

TEST(ClassWeights, SampleWeightedMeanIsOne) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 2 + rng.below(2);
    std::vector<std::size_t> y;
    for (std::size_t c = 0; c < k; ++c) y.insert(y.end(), 1 + rng.below(30), c);
    const auto w = class_weights_from(y, k);
    double s = 0;
    for (auto v : y) s += w[v];
    EXPECT_NEAR(s / double(y.size()), 1.0, 1e-12);
  }
}

TEST(Training, SeparatesTwoGaussianBlobs) {
  Rng rng(6);
  const std::size_t dim = 16, n = 200;
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> labels;
  std::vector<std::string> ids;
  // Centres 6 sigma apart along a random unit direction.
  std::vector<double> dir(dim);
  double norm = 0;
  for (auto& v : dir) norm += (v = rng.normal()) * v;
  for (auto& v : dir) v /= std::sqrt(norm);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % 2;
    std::vector<double> r(dim);
    for (std::size_t j = 0; j < dim; ++j) r[j] = rng.normal() + (y ? 3.0 : -3.0) * dir[j];
    rows.push_back(r);
    labels.push_back(y);
    ids.push_back("s" + std::to_string(i));
  }
  ClassifierTrainConfig cfg;
  cfg.seed = 1;
  auto res = fit_classifier(rows, labels, ids, 2, cfg);
  EXPECT_EQ(res.epoch_loss.size(), 50u);
  EXPECT_LT(res.epoch_loss.back(), res.epoch_loss.front());
  const auto probs = classify(res.model, rows, Mode::Eval);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += argmax(probs[i]) == labels[i];
  EXPECT_GE(double(correct) / double(n), 0.99);
}

TEST(Checkpoint, ClassifierRoundTrip) {
  oracle::TempDir dir("clf");
  auto m = build_classifier(33, 3, 9);
  Rng rng(7);
  for (auto& v : m.params.buffer("h1.bn.mean").values()) v = float(rng.normal());
  save_classifier(m, dir / "c.ckpt", 4, {{"task", "ad_3class"}});
  CheckpointMeta meta;
  auto back = load_classifier(dir / "c.ckpt", &meta);
  EXPECT_TRUE(back.params.same_values(m.params));
  EXPECT_EQ(back.arch, m.arch);
  EXPECT_EQ(meta.extra["task"], "ad_3class");
  const auto z = random_rows(3, 33, rng);
  EXPECT_EQ(classify(back, z, Mode::Eval), classify(m, z, Mode::Eval));
}
