#include <gtest/gtest.h>

#include "support.hpp"

using namespace fstest;

namespace {

// Identity pose with the principal point on pixel (cx, cy).
CameraView axis_view(int w, int h, double f = 40.0) {
  CameraView v;
  v.width = w;
  v.height = h;
  v.fx = v.fy = f;
  v.cx = w / 2;
  v.cy = h / 2;
  return v;
}

template <class T> Gaussian<T> on_axis(double z, double sigma, double opacity, Vec3<T> color, std::vector<T> feature) {
  Gaussian<T> g;
  g.position = Vec3<T>(0, 0, T(z));
  g.log_scale = Vec3<T>::Constant(T(std::log(sigma)));
  g.opacity_logit = logit(T(opacity));
  g.color = color;
  g.feature = std::move(feature);
  return g;
}

} // namespace

TEST(Render, EmptyCoverageShowsBackground) {
  GaussianCloud<float> c(2);
  c.push_back(on_axis<float>(-3.0, 0.1, 0.5, {1, 1, 1}, {1, 1})); // behind the camera
  RenderSettings rs;
  rs.background = Eigen::Vector3d(0.2, 0.4, 0.6);
  const auto r = render(c, axis_view(20, 20), rs);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) {
      EXPECT_FLOAT_EQ(r.output.image(y, x, 0), 0.2f);
      EXPECT_FLOAT_EQ(r.output.image(y, x, 2), 0.6f);
      EXPECT_EQ(r.output.feature_map(y, x, 0), 0.0f);
      EXPECT_EQ(r.output.alpha_map(y, x, 0), 0.0f);
      EXPECT_EQ(r.output.contributors[std::size_t(y) * 20 + x], 0);
    }
}

TEST(Render, SingleGaussianAtPixelCenter) {
  GaussianCloud<double> c(1);
  const Vec3<double> col(0.3, 0.6, 0.9);
  c.push_back(on_axis<double>(3.0, 0.05, 0.9, col, {2.0}));
  RenderSettings rs;
  rs.background = Eigen::Vector3d(1, 0.5, 0);
  const auto r = render(c, axis_view(21, 21), rs);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(r.output.image(10, 10, k), 0.9 * col[k] + 0.1 * rs.background[k], 1e-12);
  EXPECT_NEAR(r.output.feature_map(10, 10, 0), 1.8, 1e-12);
  EXPECT_NEAR(r.output.alpha_map(10, 10, 0), 0.9, 1e-12);
}

TEST(Render, TwoHalfOpaqueGaussians) {
  GaussianCloud<double> c(2);
  c.push_back(on_axis<double>(4.0, 0.05, 0.5, {0, 1, 0}, {0, 1})); // behind
  c.push_back(on_axis<double>(2.0, 0.05, 0.5, {1, 0, 0}, {1, 0})); // in front
  const auto r = render(c, axis_view(16, 16));
  EXPECT_NEAR(r.output.image(8, 8, 0), 0.5, 1e-12);
  EXPECT_NEAR(r.output.image(8, 8, 1), 0.25, 1e-12);
  EXPECT_NEAR(r.output.image(8, 8, 2), 0.0, 1e-12);
  EXPECT_NEAR(r.output.feature_map(8, 8, 0), 0.5, 1e-12);
  EXPECT_NEAR(r.output.feature_map(8, 8, 1), 0.25, 1e-12);
  EXPECT_EQ(r.output.contributors[8 * 16 + 8], 2);
}

TEST(Render, OpacityClampsAt099) {
  GaussianCloud<double> c(1);
  c.push_back(on_axis<double>(3.0, 0.05, 0.999, {1, 1, 1}, {1}));
  const auto r = render(c, axis_view(9, 9));
  EXPECT_NEAR(r.output.alpha_map(4, 4, 0), 0.99, 1e-12);
}

TEST(Render, StopsOnceTransmittanceIsNegligible) {
  GaussianCloud<double> c(1);
  for (int i = 0; i < 5; ++i) c.push_back(on_axis<double>(2.0 + i, 0.05, 0.999, {1, 1, 1}, {1}));
  const auto r = render(c, axis_view(9, 9));
  // 0.01^2 = 1e-4 is not below the threshold, 0.01^3 is
  EXPECT_EQ(r.output.contributors[4 * 9 + 4], 3);
}

TEST(Render, RejectsDimensionMismatchAndEmptyCloud) {
  Gen g(1);
  auto c = random_cloud<float>(g, 5, 4);
  RenderSettings rs;
  rs.expected_feature_dim = 6;
  EXPECT_THROW(render(c, axis_view(8, 8), rs), Error);
  rs.expected_feature_dim = 4;
  EXPECT_NO_THROW(render(c, axis_view(8, 8), rs));
  EXPECT_THROW(render(GaussianCloud<float>(4), axis_view(8, 8)), Error);
}

TEST(Render, CompositingInvariantsOnRandomScenes) {
  Gen g(2);
  for (int s = 0; s < 30; ++s) {
    auto c = random_cloud<float>(g, g.integer(1, 80), 3, {0.8, 0.05, 0.6, -1.0, 6.0});
    const auto r = render(c, random_view(g, 40, 30));
    const auto rep = check_compositing(r);
    EXPECT_TRUE(rep.monotone) << "scene " << s;
    EXPECT_LT(rep.max_sum_error, 1e-6) << "scene " << s;
    for (std::size_t p = 0; p < r.state.final_transmittance.size(); ++p) {
      EXPECT_FLOAT_EQ(r.output.alpha_map.data[p], 1.0f - r.state.final_transmittance[p]);
      EXPECT_LE(r.output.contributors[p], int(c.size()));
    }
  }
}

TEST(Render, MatchesBackToFrontReference) {
  Gen g(3);
  for (int s = 0; s < 20; ++s) {
    auto c = random_cloud<double>(g, g.integer(1, 60), 4, {0.8, 0.05, 0.6, -1.0, 6.0});
    const auto view = random_view(g, 36, 28);
    const Eigen::Vector3d bg(g.uniform(0, 1), g.uniform(0, 1), g.uniform(0, 1));
    RenderSettings rs;
    rs.background = bg;
    const auto r = render(c, view, rs);
    const auto ref = back_to_front(c, view, bg);
    EXPECT_LT(max_abs_diff(r.output.image, ref.image), 1e-6) << "scene " << s;
    EXPECT_LT(max_abs_diff(r.output.feature_map, ref.features), 1e-6) << "scene " << s;
    EXPECT_LT(max_abs_diff(r.output.alpha_map, ref.alpha), 1e-6) << "scene " << s;
  }
}

TEST(Render, ColorAndFeaturePathsShareContributors) {
  Gen g(4);
  for (int s = 0; s < 10; ++s) {
    auto c = random_cloud<float>(g, 50, 6);
    const auto view = random_view(g, 33, 27);
    RenderSettings rs;
    rs.record_signature = true;
    const auto both = render(c, view, rs);

    auto no_color = c;
    std::fill(no_color.data(Attribute::color).begin(), no_color.data(Attribute::color).end(), 0.0f);
    auto no_feature = c;
    std::fill(no_feature.data(Attribute::feature).begin(), no_feature.data(Attribute::feature).end(), 0.0f);
    const auto feat_only = render(no_color, view, rs);
    const auto color_only = render(no_feature, view, rs);

    EXPECT_EQ(both.output.feature_map.data, feat_only.output.feature_map.data);
    EXPECT_EQ(both.output.image.data, color_only.output.image.data);
    EXPECT_EQ(both.output.contributors, feat_only.output.contributors);
    EXPECT_EQ(both.output.contributors, color_only.output.contributors);
    EXPECT_EQ(both.output.signature, feat_only.output.signature);
    EXPECT_EQ(both.output.signature, color_only.output.signature);
  }
}

TEST(Render, ImageIndependentOfFeatureDim) {
  Gen g(5);
  for (int s = 0; s < 5; ++s) {
    auto c = random_cloud<float>(g, 60, 8);
    GaussianCloud<float> wide(16);
    for (std::size_t i = 0; i < c.size(); ++i) {
      auto gi = c.at(i);
      gi.feature.insert(gi.feature.end(), gi.feature.begin(), gi.feature.end());
      wide.push_back(gi);
    }
    const auto view = random_view(g, 30, 30);
    EXPECT_EQ(render(c, view).output.image.data, render(wide, view).output.image.data);
  }
}

TEST(Render, DeterministicAcrossRunsAndThreads) {
  Gen g(6);
  auto c = random_cloud<float>(g, 300, 8, {0.8, 0.02, 0.3});
  const auto view = random_view(g, 70, 50);
  RenderSettings one, many;
  many.threads = 4;
  const auto a = render(c, view, one), b = render(c, view, one), m = render(c, view, many);
  EXPECT_EQ(a.output.image.data, b.output.image.data);
  EXPECT_EQ(a.output.feature_map.data, b.output.feature_map.data);
  EXPECT_EQ(a.output.image.data, m.output.image.data);
  EXPECT_EQ(a.output.feature_map.data, m.output.feature_map.data);
  EXPECT_EQ(a.output.contributors, m.output.contributors);
}

TEST(RenderBackward, ZeroUpstreamGivesZero) {
  Gen g(7);
  auto c = random_cloud<double>(g, 10, 4);
  const auto view = random_view(g, 16, 16);
  const auto r = render(c, view);
  const auto grads =
      render_backward(c, r.state, Image<double>(16, 16, 3), FeatureMap<double>(16, 16, 4));
  for (Attribute a : kAllAttributes)
    for (double v : grads.data(a)) EXPECT_EQ(v, 0.0) << attribute_name(a);
}

TEST(RenderBackward, ColorGradientIsEffectiveOpacity) {
  GaussianCloud<double> c(1);
  c.push_back(on_axis<double>(3.0, 0.05, 0.7, {0.2, 0.3, 0.4}, {0.0}));
  const auto view = axis_view(9, 9);
  const auto r = render(c, view);
  for (int k = 0; k < 3; ++k) {
    Image<double> up(9, 9, 3);
    up(4, 4, k) = 1.0;
    const auto grads = render_backward(c, r.state, up, FeatureMap<double>(9, 9, 1));
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(grads.color[std::size_t(j)], j == k ? 0.7 : 0.0, 1e-12);
  }
}

TEST(RenderBackward, MatchesFiniteDifferences) {
  Gen g(8);
  FdReport all;
  for (int s = 0; s < 25; ++s) {
    auto c = random_cloud<double>(g, g.integer(1, 20), 4);
    const auto view = random_view(g, 8, 8);
    const auto dec = ChannelDecoder<double>::random(4, 3, 100 + s);
    all.merge(fd_check_render(c, view, s % 2 ? &dec : nullptr, g, 1e-4));
  }
  EXPECT_GT(all.checked, 2000u);
  EXPECT_LT(all.max_rel, 1e-3) << all.worst;
}

TEST(RenderBackward, ThreadCountOnlyReordersSums) {
  Gen g(9);
  auto c = random_cloud<double>(g, 200, 4, {0.8, 0.02, 0.3});
  const auto view = random_view(g, 64, 48);
  const auto wi = random_map<double>(g, 48, 64, 3);
  const auto wf = random_map<double>(g, 48, 64, 4);
  RenderSettings many;
  many.threads = 3;
  const auto a = render_backward(c, render(c, view).state, wi, wf);
  const auto b = render_backward(c, render(c, view, many).state, wi, wf);
  for (Attribute at : kAllAttributes)
    for (std::size_t k = 0; k < a.data(at).size(); ++k)
      EXPECT_NEAR(a.data(at)[k], b.data(at)[k], 1e-9 * (1 + std::abs(a.data(at)[k])));
}

TEST(RenderBackward, RejectsMismatchedState) {
  Gen g(10);
  auto c = random_cloud<double>(g, 10, 4);
  const auto view = random_view(g, 16, 16);
  const auto r = render(c, view);
  auto bigger = c;
  bigger.push_back(c.at(0));
  EXPECT_THROW(render_backward(bigger, r.state, Image<double>(16, 16, 3), FeatureMap<double>(16, 16, 4)), Error);
  EXPECT_THROW(render_backward(c, r.state, Image<double>(15, 16, 3), FeatureMap<double>(16, 16, 4)), Error);
  EXPECT_THROW(render_backward(c, r.state, Image<double>(16, 16, 3), FeatureMap<double>(16, 16, 5)), Error);
}

TEST(ViewSpaceGrad, NeverVisibleIsZero) {
  GaussianCloud<double> c(1);
  c.push_back(on_axis<double>(3.0, 0.05, 0.7, {1, 1, 1}, {1}));
  c.push_back(on_axis<double>(-3.0, 0.05, 0.7, {1, 1, 1}, {1}));
  const auto r = render(c, axis_view(9, 9));
  Image<double> up(9, 9, 3, 1.0);
  const auto grads = render_backward(c, r.state, up, FeatureMap<double>(9, 9, 1, 1.0));
  EXPECT_EQ(view_space_grad_norms(grads)[1], 0.0);
  EXPECT_EQ(grads.view_hits[1], 0);
}

TEST(ViewSpaceGrad, SingleContribution) {
  GradientBuffer<double> g(1, 0);
  g.view_grad_accum[0] = std::hypot(3.0, 4.0);
  g.view_hits[0] = 1;
  EXPECT_DOUBLE_EQ(view_space_grad_norms(g)[0], 5.0);
}

TEST(ViewSpaceGrad, AccumulatesAcrossRenders) {
  Gen g(11);
  auto c = random_cloud<double>(g, 30, 2);
  GradientBuffer<double> total(c.size(), 2);
  std::vector<double> sum(c.size(), 0.0);
  std::vector<int> seen(c.size(), 0);
  for (int v = 0; v < 3; ++v) {
    const auto view = random_view(g, 24, 24);
    const auto r = render(c, view);
    const auto grads = render_backward(c, r.state, random_map<double>(g, 24, 24, 3), random_map<double>(g, 24, 24, 2));
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double n = std::hypot(grads.mean2d[2 * i], grads.mean2d[2 * i + 1]);
      sum[i] += n;
      bool projected = false;
      for (const auto& p : r.state.projected) projected |= p.source_index == i;
      seen[i] += projected;
      EXPECT_EQ(grads.view_hits[i], int(projected));
    }
    total.accumulate_view_stats(grads);
  }
  const auto norms = view_space_grad_norms(total);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(norms[i], sum[i] / std::max(1, seen[i]), 1e-12);
}
