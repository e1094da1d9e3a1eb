#pragma once

// Generators and independent reference implementations shared by the unit
// tests and the acceptance runner. Nothing here calls into the rasterizer's
// internals; references are written from the compositing rules directly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "featsplat/featsplat.hpp"

namespace fstest {

using namespace featsplat;

class Gen {
public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double sigma = 1.0) { return std::normal_distribution<double>(0.0, sigma)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return uniform(0, 1) < p; }
  std::uint64_t bits() { return rng_(); }

  Eigen::Vector3d unit_vector() {
    Eigen::Vector3d v;
    do v = Eigen::Vector3d(normal(), normal(), normal());
    while (v.norm() < 1e-3);
    return v.normalized();
  }

  Eigen::Vector4d quaternion() {
    Eigen::Vector4d q;
    do q = Eigen::Vector4d(normal(), normal(), normal(), normal());
    while (q.norm() < 1e-3);
    return q.normalized();
  }

private:
  std::mt19937_64 rng_;
};

struct CloudShape {
  double radius = 0.8;                // positions inside this ball
  double scale_lo = 0.15, scale_hi = 0.5;
  double logit_lo = -2.0, logit_hi = 2.0;
};

template <class T> GaussianCloud<T> random_cloud(Gen& g, int count, int feature_dim, const CloudShape& shape = {}) {
  GaussianCloud<T> cloud{std::size_t(feature_dim)};
  for (int i = 0; i < count; ++i) {
    Gaussian<T> s;
    s.position = (g.unit_vector() * shape.radius * std::cbrt(g.uniform(0, 1))).template cast<T>();
    s.rotation = g.quaternion().template cast<T>();
    for (int c = 0; c < 3; ++c) s.log_scale[c] = T(std::log(g.uniform(shape.scale_lo, shape.scale_hi)));
    s.opacity_logit = T(g.uniform(shape.logit_lo, shape.logit_hi));
    for (int c = 0; c < 3; ++c) s.color[c] = T(g.uniform(0, 1));
    s.feature.resize(std::size_t(feature_dim));
    for (auto& f : s.feature) f = T(g.normal());
    cloud.push_back(s);
  }
  cloud.set_scene_extent(compute_scene_extent(cloud));
  return cloud;
}

/// Camera at a random direction and distance looking near the origin.
inline CameraView random_view(Gen& g, int width, int height, double dist_lo = 3.0, double dist_hi = 5.0,
                              double half_fov_deg = 30.0) {
  const Eigen::Vector3d eye = g.unit_vector() * g.uniform(dist_lo, dist_hi);
  const Eigen::Vector3d target(g.uniform(-0.2, 0.2), g.uniform(-0.2, 0.2), g.uniform(-0.2, 0.2));
  const double focal = 0.5 * width / std::tan(half_fov_deg * M_PI / 180.0);
  return look_at(eye, target, g.unit_vector(), width, height, focal);
}

template <class T> FeatureMap<T> random_map(Gen& g, int h, int w, int d, double lo = -1, double hi = 1) {
  FeatureMap<T> m(h, w, d);
  for (auto& v : m.data) v = T(g.uniform(lo, hi));
  return m;
}

// ---- independent projection ------------------------------------------------

struct RefFootprint {
  bool visible = false;
  double depth = 0;
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d cov = Eigen::Matrix2d::Identity();
};

/// Dense-matrix evaluation of the EWA projection: cov2d = J W Sigma W^T J^T + 0.3 I.
template <class T> RefFootprint ref_project(const GaussianCloud<T>& cloud, std::size_t i, const CameraView& view) {
  RefFootprint f;
  const Eigen::Matrix4d m = view.world_to_camera;
  const Eigen::Vector4d xh(double(cloud.position(i)[0]), double(cloud.position(i)[1]), double(cloud.position(i)[2]), 1.0);
  const Eigen::Vector4d cam = m * xh;
  if (cam.z() <= 0.01) return f;
  const auto q = cloud.rotation(i);
  const Eigen::Quaterniond quat{double(q[0]), double(q[1]), double(q[2]), double(q[3])};
  const Eigen::Matrix3d r = quat.normalized().toRotationMatrix();
  Eigen::Matrix3d s = Eigen::Matrix3d::Zero();
  for (int c = 0; c < 3; ++c) s(c, c) = std::exp(double(cloud.log_scale(i)[c]));
  const Eigen::Matrix3d sigma = r * s * s.transpose() * r.transpose();
  Eigen::Matrix<double, 2, 3> j;
  const double z = cam.z();
  j << view.fx / z, 0, -view.fx * cam.x() / (z * z), 0, view.fy / z, -view.fy * cam.y() / (z * z);
  const Eigen::Matrix3d w = m.topLeftCorner<3, 3>();
  f.cov = j * w * sigma * w.transpose() * j.transpose() + 0.3 * Eigen::Matrix2d::Identity();
  f.mean = Eigen::Vector2d(view.fx * cam.x() / z + view.cx, view.fy * cam.y() / z + view.cy);
  f.depth = z;
  f.visible = true;
  return f;
}

// ---- back-to-front reference -------------------------------------------------

struct BackToFront {
  FeatureMap<double> image, features, alpha;
};

/// Over-compositing from the farthest Gaussian forward. The set of Gaussians
/// composited per pixel is the same prefix a front-to-back renderer keeps
/// (it stops once transmittance would fall below 1e-4), found by a count-only scan.
template <class T>
BackToFront back_to_front(const GaussianCloud<T>& cloud, const CameraView& view,
                          const Eigen::Vector3d& background = Eigen::Vector3d::Zero()) {
  struct Item {
    double depth;
    std::size_t index;
    RefFootprint fp;
    Eigen::Matrix2d inv;
    double opacity;
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double op = 1.0 / (1.0 + std::exp(-double(cloud.opacity_logit(i))));
    if (!(op > 0)) continue;
    auto fp = ref_project(cloud, i, view);
    if (!fp.visible) continue;
    items.push_back({fp.depth, i, fp, fp.cov.inverse(), op});
  }
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.depth != b.depth ? a.depth < b.depth : a.index < b.index; });

  const int n = int(cloud.feature_dim());
  BackToFront out{FeatureMap<double>(view.height, view.width, 3), FeatureMap<double>(view.height, view.width, n),
                  FeatureMap<double>(view.height, view.width, 1)};
  std::vector<std::pair<std::size_t, double>> hits;
  for (int py = 0; py < view.height; ++py)
    for (int px = 0; px < view.width; ++px) {
      hits.clear();
      double t = 1.0;
      for (std::size_t k = 0; k < items.size(); ++k) {
        const Eigen::Vector2d d(px - items[k].fp.mean.x(), py - items[k].fp.mean.y());
        const double maha = d.dot(items[k].inv * d);
        if (maha > 9.0) continue;
        const double a = std::min(0.99, items[k].opacity * std::exp(-0.5 * maha));
        if (a < 1.0 / 255.0) continue;
        hits.emplace_back(k, a);
        t *= 1.0 - a;
        if (t < 1e-4) break;
      }
      Eigen::Vector3d c = background;
      Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
      double cover = 0;
      for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
        const auto& item = items[it->first];
        const double a = it->second;
        const auto col = cloud.color(item.index);
        const auto feat = cloud.feature(item.index);
        for (int k = 0; k < 3; ++k) c[k] = a * double(col[k]) + (1 - a) * c[k];
        for (int k = 0; k < n; ++k) f[k] = a * double(feat[k]) + (1 - a) * f[k];
        cover = a + (1 - a) * cover;
      }
      for (int k = 0; k < 3; ++k) out.image(py, px, k) = c[k];
      for (int k = 0; k < n; ++k) out.features(py, px, k) = f[k];
      out.alpha(py, px, 0) = cover;
    }
  return out;
}

template <class A, class B> double max_abs_diff(const FeatureMap<A>& a, const FeatureMap<B>& b) {
  if (a.height != b.height || a.width != b.width || a.dim != b.dim) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
  return m;
}

// ---- compositing invariants ------------------------------------------------

struct InvariantReport {
  std::size_t pixels = 0;
  bool monotone = true;
  double max_sum_error = 0; // |sum alpha' T - (1 - T_final)|
};

template <class T> InvariantReport check_compositing(const RenderResult<T>& r) {
  InvariantReport rep;
  const auto& st = r.state;
  for (int y = 0; y < st.view.height; ++y)
    for (int x = 0; x < st.view.width; ++x) {
      const auto trace = trace_pixel(st, x, y);
      double sum = 0;
      T prev = T(1);
      for (const auto& c : trace) {
        if (c.transmittance > prev) rep.monotone = false;
        prev = c.transmittance;
        sum += double(c.alpha) * double(c.transmittance);
      }
      const double t_final = double(st.final_transmittance[std::size_t(y) * st.view.width + x]);
      if (t_final > double(prev) || t_final < 0 || t_final > 1) rep.monotone = false;
      rep.max_sum_error = std::max(rep.max_sum_error, std::abs(sum - (1.0 - t_final)));
      ++rep.pixels;
    }
  return rep;
}

// ---- finite differences ----------------------------------------------------

struct FdReport {
  std::size_t checked = 0, skipped = 0;
  double max_rel = 0;
  std::string worst;

  void merge(const FdReport& o) {
    checked += o.checked;
    skipped += o.skipped;
    if (o.max_rel > max_rel) {
      max_rel = o.max_rel;
      worst = o.worst;
    }
  }
};

inline void fd_record(FdReport& rep, double analytic, double numeric, const std::string& what, double floor = 1e-6) {
  if (std::max(std::abs(analytic), std::abs(numeric)) <= floor) return;
  const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
  ++rep.checked;
  if (rel > rep.max_rel) {
    rep.max_rel = rel;
    rep.worst = what + " analytic " + std::to_string(analytic) + " numeric " + std::to_string(numeric);
  }
}

/// Linear probe loss L = <wi, image> + <wf, decode(features)> over a double render.
struct ProbeLoss {
  FeatureMap<double> wi, wf;

  ProbeLoss(Gen& g, const CameraView& view, int out_dim)
      : wi(random_map<double>(g, view.height, view.width, 3)), wf(random_map<double>(g, view.height, view.width, out_dim)) {}

  double value(const RenderOutput<double>& out, const ChannelDecoder<double>* dec) const {
    const FeatureMap<double> f = dec ? decode(out.feature_map, *dec) : out.feature_map;
    double l = 0;
    for (std::size_t i = 0; i < wi.data.size(); ++i) l += wi.data[i] * out.image.data[i];
    for (std::size_t i = 0; i < wf.data.size(); ++i) l += wf.data[i] * f.data[i];
    return l;
  }
};

/// Central differences of every cloud parameter (and decoder entry) against
/// render_backward. Perturbations that change any per-pixel compositing
/// decision (cutoff, clamp, skip, early stop) are not differentiable points
/// and are skipped.
inline FdReport fd_check_render(const GaussianCloud<double>& cloud, const CameraView& view,
                                const ChannelDecoder<double>* decoder, Gen& g, double h = 1e-3) {
  RenderSettings rs;
  rs.record_signature = true;
  const int out_dim = decoder ? decoder->out_dim : int(cloud.feature_dim());
  ProbeLoss probe(g, view, out_dim);

  auto base = render(cloud, view, rs);
  FeatureMap<double> d_feature;
  DecoderGradients<double> dg;
  if (decoder) {
    dg = decode_backward(probe.wf, base.output.feature_map, *decoder);
    d_feature = dg.d_input;
  } else {
    d_feature = probe.wf;
  }
  const auto grads = render_backward(cloud, base.state, probe.wi, d_feature);

  FdReport rep;
  GaussianCloud<double> work = cloud;
  for (Attribute a : kAllAttributes) {
    auto& data = work.data(a);
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double keep = data[k];
      data[k] = keep + h;
      const auto plus = render(work, view, rs);
      data[k] = keep - h;
      const auto minus = render(work, view, rs);
      data[k] = keep;
      if (plus.output.signature != base.output.signature || minus.output.signature != base.output.signature) {
        ++rep.skipped;
        continue;
      }
      const double numeric = (probe.value(plus.output, decoder) - probe.value(minus.output, decoder)) / (2 * h);
      fd_record(rep, grads.data(a)[k], numeric,
                std::string(attribute_name(a)) + "[" + std::to_string(k / cloud.stride(a)) + "][" +
                    std::to_string(k % cloud.stride(a)) + "]");
    }
  }
  if (decoder) {
    ChannelDecoder<double> dec = *decoder;
    auto probe_dec = [&](std::vector<double>& params, const std::vector<double>& analytic, const char* name) {
      for (std::size_t k = 0; k < params.size(); ++k) {
        const double keep = params[k];
        params[k] = keep + h;
        const double lp = probe.value(base.output, &dec);
        params[k] = keep - h;
        const double lm = probe.value(base.output, &dec);
        params[k] = keep;
        fd_record(rep, analytic[k], (lp - lm) / (2 * h), std::string(name) + "[" + std::to_string(k) + "]");
      }
    };
    probe_dec(dec.weights, dg.d_weights, "decoder.W");
    probe_dec(dec.bias, dg.d_bias, "decoder.b");
  }
  return rep;
}

/// project_backward against central differences of project() for the
/// probe L = <a, mean2d> + sum_ij G_ij cov2d_ij.
inline FdReport fd_check_projection(const GaussianCloud<double>& cloud, std::size_t i, const CameraView& view, Gen& g,
                                    double h = 1e-4) {
  FdReport rep;
  const Vec2<double> a(g.normal(), g.normal());
  Mat2<double> gm;
  const double off = g.normal();
  gm << g.normal(), off, off, g.normal();
  auto loss = [&](const GaussianCloud<double>& c) {
    auto p = project<double>(build_covariance<double>(c.rotation(i), c.scale(i)), c.position(i), view);
    if (!p) return std::numeric_limits<double>::quiet_NaN();
    return a.dot(p->mean2d) + (gm.array() * p->cov2d.array()).sum();
  };
  if (!std::isfinite(loss(cloud))) return rep;
  const auto pg = project_backward<double>(cloud.position(i), cloud.rotation(i), cloud.log_scale(i), view, a, gm);
  GaussianCloud<double> work = cloud;
  auto probe = [&](Attribute attr, int width, auto analytic) {
    for (int c = 0; c < width; ++c) {
      auto& v = work.data(attr)[i * std::size_t(width) + std::size_t(c)];
      const double keep = v;
      v = keep + h;
      const double lp = loss(work);
      v = keep - h;
      const double lm = loss(work);
      v = keep;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        ++rep.skipped;
        continue;
      }
      fd_record(rep, analytic(c), (lp - lm) / (2 * h), std::string(attribute_name(attr)) + "[" + std::to_string(c) + "]");
    }
  };
  probe(Attribute::position, 3, [&](int c) { return pg.position[c]; });
  probe(Attribute::rotation, 4, [&](int c) { return pg.rotation[c]; });
  probe(Attribute::log_scale, 3, [&](int c) { return pg.log_scale[c]; });
  return rep;
}

} // namespace fstest
