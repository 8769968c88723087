#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "support.hpp"
#include "xsite/errors.hpp"
#include "xsite/saliency.hpp"

using namespace xsite;

namespace {

ModelConfig tiny(NormKind norm = NormKind::kSharedBn) {
  ModelConfig c;
  c.input_h = c.input_w = 16;
  c.stem_channels = 4;
  c.upper_channels = {4, 6, 6, 8};
  c.lower_blocks = 1;
  c.layers_per_block = 2;
  c.growth = 4;
  c.transition_channels = 6;
  c.norm = norm;
  return c;
}

GrayImage noise_image(std::uint64_t seed, std::size_t size = 16) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  GrayImage g{size, size, std::vector<double>(size * size)};
  for (double& v : g.pixels) v = n(rng);
  return g;
}

}  // namespace

TEST(GradCam, MatchesClassifierWeightedFeatures) {
  // With GAP feeding a linear classifier, d logit_c / d A_k(i) = W[k,c] / HW, so the
  // channel weights are the classifier column divided by the spatial size.
  Model m(tiny(), 3);
  const GrayImage img = noise_image(1);
  for (int cls : {0, 1}) {
    const SaliencyMap map = grad_cam(m, img, std::nullopt, cls);
    const Tensor feats = m.forward(stack_images({&img}), std::nullopt, NormMode::kEval).features;
    const std::size_t k = feats.dim(1), hw = feats.dim(2) * feats.dim(3);
    ASSERT_EQ(map.cam.pixels.size(), hw);
    const auto w = m.classifier().weight.values();
    for (std::size_t i = 0; i < hw; ++i) {
      double v = 0.0;
      for (std::size_t c = 0; c < k; ++c) v += w[c * 2 + cls] / static_cast<double>(hw) * feats.at(c * hw + i);
      EXPECT_NEAR(map.cam.pixels[i], std::max(0.0, v), 1e-12);
    }
    for (double v : map.upsampled.pixels) EXPECT_GE(v, 0.0);
    EXPECT_EQ(map.upsampled.height, 16u);
  }
  for (const auto& [name, t] : m.parameters())
    if (t.has_grad())
      for (double g : t.grad()) EXPECT_EQ(g, 0.0) << name;
}

TEST(GradCam, NonNegativeAcrossModelsAndImages) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Model m(tiny(NormKind::kPerSiteDsbn), s);
    const SaliencyMap map = grad_cam(m, noise_image(100 + s), static_cast<SiteId>(s % 2), 1);
    for (double v : map.cam.pixels) EXPECT_GE(v, 0.0);
    for (double v : map.overlay.pixels) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  Model m(tiny(), 1);
  EXPECT_THROW(grad_cam(m, noise_image(1), std::nullopt, 2), ConfigError);
}

TEST(GradCam, ZeroClassifierColumnIsDegenerate) {
  Model m(tiny(), 4);
  Tensor& w = m.classifier().weight;
  for (std::size_t d = 0; d < w.dim(0); ++d) w.mutable_values()[d * 2 + 1] = 0.0;
  const SaliencyMap map = grad_cam(m, noise_image(2), std::nullopt, 1);
  EXPECT_TRUE(map.degenerate);
  for (double v : map.overlay.pixels) EXPECT_EQ(v, 0.0);
}

TEST(GradCam, DependsOnlyOnTheTargetLogit) {
  Model m(tiny(), 5);
  const GrayImage img = noise_image(3);
  const SaliencyMap before = grad_cam(m, img, std::nullopt, 1);
  Tensor& w = m.classifier().weight;
  for (std::size_t d = 0; d < w.dim(0); ++d) w.mutable_values()[d * 2] *= -3.0;
  m.classifier().bias.mutable_values()[0] += 7.0;
  const SaliencyMap after = grad_cam(m, img, std::nullopt, 1);
  EXPECT_EQ(before.cam.pixels, after.cam.pixels);
}

TEST(GradCam, UpsampledPeakStaysNearLowResPeak) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Model m(tiny(), 20 + s);
    const SaliencyMap map = grad_cam(m, noise_image(s), std::nullopt, 1);
    if (map.degenerate) continue;
    const auto& lo = map.cam.pixels;
    const auto& up = map.upsampled.pixels;
    const std::size_t li = std::max_element(lo.begin(), lo.end()) - lo.begin();
    const std::size_t ui = std::max_element(up.begin(), up.end()) - up.begin();
    const double scale = 16.0 / static_cast<double>(map.cam.width);
    const double uy = (static_cast<double>(ui / 16) + 0.5) / scale - 0.5;
    const double ux = (static_cast<double>(ui % 16) + 0.5) / scale - 0.5;
    EXPECT_LE(std::abs(uy - static_cast<double>(li / map.cam.width)), 1.0) << s;
    EXPECT_LE(std::abs(ux - static_cast<double>(li % map.cam.width)), 1.0) << s;
  }
}

TEST(LesionRatio, ExamplesAndErrors) {
  SaliencyMap map;
  map.upsampled = {2, 2, {4, 1, 1, 2}};
  GrayImage mask{2, 2, {1, 0, 0, 0}};
  EXPECT_DOUBLE_EQ(lesion_ratio(map, mask), 3.0);
  map.upsampled = {2, 2, {4, 0, 0, 0}};
  EXPECT_TRUE(std::isinf(lesion_ratio(map, mask)));
  EXPECT_THROW(lesion_ratio(map, GrayImage{2, 2, {1, 1, 1, 1}}), ShapeError);
  EXPECT_THROW(lesion_ratio(map, GrayImage{1, 1, {1}}), ShapeError);
}

TEST(Overlay, PixelRuleAndDeterminism) {
  const auto dir = oracle::scratch_dir("overlay");
  const GrayImage img{1, 3, {-1.0, 0.0, 1.0}};
  SaliencyMap flat;
  flat.overlay = {1, 3, {0, 0, 0}};
  export_overlay(flat, img, dir / "gray.ppm");
  const std::string header = "P6\n3 1\n255\n";
  std::string gray = oracle::slurp(dir / "gray.ppm");
  ASSERT_EQ(gray.size(), header.size() + 9);
  EXPECT_EQ(gray.substr(0, header.size()), header);
  const std::string px = gray.substr(header.size());
  const unsigned char want_gray[] = {0, 0, 0, 64, 64, 64, 128, 128, 128};
  for (int i = 0; i < 9; ++i) EXPECT_EQ(static_cast<unsigned char>(px[i]), want_gray[i]) << i;

  SaliencyMap hot;
  hot.overlay = {1, 3, {1, 1, 1}};
  export_overlay(hot, img, dir / "hot.ppm");
  const std::string hp = oracle::slurp(dir / "hot.ppm").substr(header.size());
  const unsigned char want_hot[] = {128, 0, 0, 191, 64, 64, 255, 128, 128};
  for (int i = 0; i < 9; ++i) EXPECT_EQ(static_cast<unsigned char>(hp[i]), want_hot[i]) << i;

  Model m(tiny(), 6);
  const GrayImage in = noise_image(4);
  export_overlay(grad_cam(m, in, std::nullopt, 1), in, dir / "a.ppm");
  export_overlay(grad_cam(m, in, std::nullopt, 1), in, dir / "b.ppm");
  EXPECT_EQ(oracle::slurp(dir / "a.ppm"), oracle::slurp(dir / "b.ppm"));
  EXPECT_THROW(export_overlay(hot, noise_image(1), dir / "c.ppm"), ShapeError);
  std::filesystem::remove_all(dir);
}

TEST(Overlay, MapCsv) {
  const auto dir = oracle::scratch_dir("mapcsv");
  SaliencyMap map;
  map.cam = {2, 3, {0, 0.5, 1, 2, 0.25, 0}};
  export_map_csv(map, dir / "m.csv");
  EXPECT_EQ(oracle::slurp(dir / "m.csv"), "0,0.5,1\n2,0.25,0\n");
  std::filesystem::remove_all(dir);
}
