#include <gtest/gtest.h>

#include "latent3d/io.hpp"
#include "latent3d/preprocess.hpp"
#include "oracles.hpp"

using namespace latent3d;
using namespace latent3d::preprocess;
using oracle::TempDir;

namespace {

Volume ramp(std::size_t n) {
  std::vector<float> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = float(i);
  return Volume({1, 1, n}, d);
}

// Percentile by sorting and interpolating between the two bracketing ranks.
double percentile_oracle(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const double pos = pct / 100.0 * double(v.size() - 1);
  const std::size_t lo = std::size_t(pos);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] * (1 - (pos - double(lo))) + v[lo + 1] * (pos - double(lo));
}

Volume ball(std::size_t edge, float value) {
  std::vector<float> d(edge * edge * edge);
  const double c = (double(edge) - 1) / 2, r = double(edge) / 3;
  for (std::size_t i = 0; i < edge; ++i)
    for (std::size_t j = 0; j < edge; ++j)
      for (std::size_t k = 0; k < edge; ++k) {
        const double q = (i - c) * (i - c) + (j - c) * (j - c) + (k - c) * (k - c);
        d[(i * edge + j) * edge + k] = q < r * r ? value : 0.f;
      }
  return Volume({edge, edge, edge}, d);
}

}  // namespace

TEST(NormalizeIntensity, ConstantVolumeBecomesOne) {
  auto out = normalize_intensity(Volume::filled({4, 4, 4}, 5.f), 99.5);
  for (float v : out.data()) EXPECT_EQ(v, 1.f);
}

TEST(NormalizeIntensity, UnitRangeWithMaxOneIsUnchangedAtClip100) {
  Rng rng(1);
  auto v = oracle::random_volume({5, 5, 5}, rng);
  std::vector<float> d(v.data().begin(), v.data().end());
  d[7] = 1.f;
  Volume in(v.shape(), d);
  EXPECT_EQ(normalize_intensity(in, 100.0), in);
}

TEST(NormalizeIntensity, RampMatchesDirectPercentile) {
  const auto v = ramp(101);
  std::vector<double> nz;
  for (int i = 1; i <= 100; ++i) nz.push_back(i);
  const double p = percentile_oracle(nz, 99.5);
  auto out = normalize_intensity(v, 99.5);
  for (std::size_t i = 0; i < 101; ++i) EXPECT_NEAR(out[i], std::min(double(i), p) / p, 1e-6);
  EXPECT_EQ(out[0], 0.f);

  // On a 1000-voxel nonzero ramp exactly the top 0.5% saturate.
  auto big = normalize_intensity(ramp(1001), 99.5);
  std::size_t sat = 0;
  for (float x : big.data()) sat += x == 1.f;
  EXPECT_EQ(sat, 5u);
}

TEST(NormalizeIntensity, OutputAlwaysInUnitRangeAndZerosStayZero) {
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    auto v = oracle::random_volume({3, 4, 5}, rng, -2, 50);
    std::vector<float> d(v.data().begin(), v.data().end());
    d[0] = 0.f;
    d[1] = 10.f;
    auto out = normalize_intensity(Volume(v.shape(), d), 50.0 + rng.uniform(1, 50));
    EXPECT_TRUE(out.in_unit_range());
    EXPECT_EQ(out[0], 0.f);
  }
}

TEST(NormalizeIntensity, AllZeroVolumeIsAnError) {
  EXPECT_THROW(normalize_intensity(Volume::filled({3, 3, 3}, 0.f)), ValidationError);
  EXPECT_THROW(normalize_intensity(Volume::filled({3, 3, 3}, 1.f), 40.0), ValidationError);
}

TEST(CropOrPad, SameShapeIsIdentity) {
  Rng rng(3);
  auto v = oracle::random_volume({9, 8, 7}, rng);
  EXPECT_EQ(crop_or_pad(v, {9, 8, 7}), v);
}

TEST(CropOrPad, LargeInputGivesCentreBlock) {
  Rng rng(4);
  auto v = oracle::random_volume({200, 200, 200}, rng);
  auto out = crop_or_pad(v, {192, 192, 192});
  ASSERT_EQ(out.shape(), (Dims3{192, 192, 192}));
  for (std::size_t t = 0; t < 5000; ++t) {
    const std::size_t i = rng.below(192), j = rng.below(192), k = rng.below(192);
    ASSERT_EQ(out.at(i, j, k), v.at(i + 4, j + 4, k + 4));
  }
}

TEST(CropOrPad, SmallInputGetsSixteenVoxelZeroBorder) {
  auto v = Volume::filled({160, 160, 160}, 1.f);
  auto out = crop_or_pad(v, {192, 192, 192});
  double border = 0, inner = 0;
  for (std::size_t i = 0; i < 192; ++i)
    for (std::size_t j = 0; j < 192; ++j)
      for (std::size_t k = 0; k < 192; ++k) {
        const bool in = i >= 16 && i < 176 && j >= 16 && j < 176 && k >= 16 && k < 176;
        (in ? inner : border) += out.at(i, j, k);
      }
  EXPECT_EQ(border, 0.0);
  EXPECT_EQ(inner, 160.0 * 160 * 160);
}

TEST(CropOrPad, MixedAxesMatchIndexOracleAndRoundTripOnOverlap) {
  Rng rng(5);
  for (int t = 0; t < 40; ++t) {
    Dims3 s{1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9)};
    Dims3 g{1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9)};
    auto v = oracle::random_volume(s, rng, 0.5, 1.0);
    auto out = crop_or_pad(v, g);
    for (std::size_t i = 0; i < g[0]; ++i)
      for (std::size_t j = 0; j < g[1]; ++j)
        for (std::size_t k = 0; k < g[2]; ++k) {
          // source coordinate = target coordinate + (s - g) / 2 computed with signed floor-free halves
          auto src = [&](int a, std::size_t x) {
            const long off = s[a] >= g[a] ? long((s[a] - g[a]) / 2) : -long((g[a] - s[a]) / 2);
            return long(x) + off;
          };
          const long a = src(0, i), b = src(1, j), c = src(2, k);
          const bool inside = a >= 0 && b >= 0 && c >= 0 && a < long(s[0]) && b < long(s[1]) && c < long(s[2]);
          ASSERT_EQ(out.at(i, j, k), inside ? v.at(a, b, c) : 0.f);
        }
    auto back = crop_or_pad(out, s);
    for (std::size_t i = 0; i < s[0]; ++i)
      for (std::size_t j = 0; j < s[1]; ++j)
        for (std::size_t k = 0; k < s[2]; ++k)
          if (back.at(i, j, k) != 0.f) ASSERT_EQ(back.at(i, j, k), v.at(i, j, k));
  }
}

TEST(ExternalStep, CopyCommandIsIdentity) {
  TempDir dir("ext");
  Rng rng(6);
  auto v = oracle::random_volume({6, 7, 8}, rng);
  ProvenanceLog log(dir / "prov.jsonl");
  StepContext ctx{dir.path(), false, "s1", &log};
  auto out = run_external_step(v, {StepName::SkullStrip, "cp {in} {out}", 30}, ctx);
  EXPECT_EQ(out, v);
  auto e = log.entries();
  ASSERT_EQ(e.size(), 1u);
  EXPECT_EQ(e[0]["step"], "skull_strip");
  EXPECT_EQ(e[0]["exit_status"], 0);
  EXPECT_EQ(e[0]["subject_id"], "s1");
  EXPECT_TRUE(e[0].contains("duration_s"));
  EXPECT_NE(read_file(dir / "prov.jsonl").find("skull_strip"), std::string::npos);
}

TEST(ExternalStep, NonzeroExitRaisesWithCapturedOutput) {
  TempDir dir("ext1");
  StepContext ctx{dir.path()};
  try {
    run_external_step(Volume::filled({2, 2, 2}, 1.f), {StepName::BiasCorrection, "sh -c 'echo boom >&2; exit 1'", 30}, ctx);
    FAIL();
  } catch (const ExternalStepError& e) {
    EXPECT_NE(e.output().find("boom"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("status 1"), std::string::npos);
  }
}

TEST(ExternalStep, TimeoutAndUnreadableOutputAreErrors) {
  TempDir dir("ext2");
  StepContext ctx{dir.path()};
  auto v = Volume::filled({2, 2, 2}, 1.f);
  EXPECT_THROW(run_external_step(v, {StepName::BiasCorrection, "sleep 5", 0.3}, ctx), ExternalStepError);
  EXPECT_THROW(run_external_step(v, {StepName::BiasCorrection, "sh -c 'echo x > \"$1\"' sh {out}", 30}, ctx),
               ExternalStepError);
}

TEST(ExternalStep, MissingToolFallsBackOnlyWhenAllowed) {
  auto v = Volume::filled({2, 2, 2}, 3.f);
  ExternalStepSpec spec{StepName::AffineHeadRegistration, "no_such_tool_latent3d {in} {out}", 30};
  EXPECT_THROW(run_external_step(v, spec), ExternalStepError);
  ProvenanceLog log;
  auto out = run_external_step(v, spec, StepContext{{}, true, "s2", &log});
  EXPECT_EQ(out, v);
  ASSERT_EQ(log.entries().size(), 1u);
  EXPECT_TRUE(log.entries()[0].contains("warning"));
}

TEST(Pipeline, PhantomWithExternalsDisabledIsNormalisedToTarget) {
  PreprocessConfig cfg;
  auto out = preprocess_pipeline(ball(192, 700.f), cfg);
  EXPECT_EQ(out.shape(), (Dims3{192, 192, 192}));
  EXPECT_TRUE(out.in_unit_range());
  EXPECT_EQ(out.at(96, 96, 96), 1.f);
}

TEST(Pipeline, SmallPhantomGetsZeroBorder) {
  PreprocessConfig cfg;
  auto out = preprocess_pipeline(ball(160, 3.f), cfg);
  EXPECT_EQ(out, crop_or_pad(normalize_intensity(ball(160, 3.f)), {192, 192, 192}));
  double border = 0;
  for (std::size_t j = 0; j < 192; ++j)
    for (std::size_t k = 0; k < 192; ++k)
      for (std::size_t i : {0, 15, 176, 191}) border += out.at(i, j, k);
  EXPECT_EQ(border, 0.0);
}

TEST(Pipeline, AllZeroInputFails) {
  EXPECT_THROW(preprocess_pipeline(Volume::filled({4, 4, 4}, 0.f), PreprocessConfig{}), ValidationError);
}

TEST(Pipeline, OutputInvariantAndDeterminismOnRandomInputs) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    PreprocessConfig cfg;
    cfg.target_shape = {1 + rng.below(10), 1 + rng.below(10), 1 + rng.below(10)};
    cfg.clip_percentile = rng.uniform(60, 100);
    auto v = oracle::random_volume({1 + rng.below(10), 1 + rng.below(10), 1 + rng.below(10)}, rng, 0, 1000);
    auto a = preprocess_pipeline(v, cfg), b = preprocess_pipeline(v, cfg);
    EXPECT_EQ(a.shape(), cfg.target_shape);
    EXPECT_TRUE(a.in_unit_range());
    EXPECT_EQ(a, b);
  }
}

TEST(Pipeline, EnabledStepsRunInCanonicalOrder) {
  TempDir dir("order");
  ProvenanceLog log;
  PreprocessConfig cfg;
  cfg.target_shape = {4, 4, 4};
  // Listed out of order on purpose.
  for (auto n : {StepName::AffineBrainRegistration, StepName::SkullStrip, StepName::BiasCorrection,
                 StepName::AffineHeadRegistration}) {
    cfg.external_steps.push_back({n, "cp {in} {out}", 30});
    cfg.enabled[n] = true;
  }
  preprocess_pipeline(Volume::filled({4, 4, 4}, 2.f), cfg, StepContext{dir.path(), false, "x", &log});
  std::vector<std::string> steps;
  for (auto& e : log.entries()) steps.push_back(e["step"]);
  EXPECT_EQ(steps, (std::vector<std::string>{"bias_correction", "affine_head_registration", "skull_strip",
                                              "affine_brain_registration"}));
  cfg.enabled[StepName::SkullStrip] = false;
  cfg.external_steps.erase(cfg.external_steps.begin() + 1);
  EXPECT_NO_THROW(preprocess_pipeline(Volume::filled({4, 4, 4}, 2.f), cfg, StepContext{dir.path()}));
  cfg.enabled[StepName::SkullStrip] = true;
  EXPECT_THROW(preprocess_pipeline(Volume::filled({4, 4, 4}, 2.f), cfg, StepContext{dir.path()}), ValidationError);
}

TEST(PreprocessConfig, ValidationRules) {
  PreprocessConfig c;
  c.clip_percentile = 50;
  EXPECT_THROW(c.validate(), ValidationError);
  c.clip_percentile = 99.5;
  EXPECT_NO_THROW(c.check_model(ModelConfig::latent24()));
  EXPECT_THROW(c.check_model(ModelConfig::desk48()), ValidationError);
  EXPECT_THROW(parse_step_name("denoise"), ValidationError);
}
