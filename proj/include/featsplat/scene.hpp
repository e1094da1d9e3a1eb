#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "featsplat/core.hpp"

namespace featsplat {

// Attribute groups of a Gaussian, in on-disk field order.
enum class Attribute { position, rotation, log_scale, opacity, color, feature };

inline constexpr Attribute kAllAttributes[] = {Attribute::position, Attribute::rotation, Attribute::log_scale,
                                               Attribute::opacity,  Attribute::color,    Attribute::feature};

inline const char* attribute_name(Attribute a) {
  switch (a) {
  case Attribute::position: return "position";
  case Attribute::rotation: return "rotation";
  case Attribute::log_scale: return "log_scale";
  case Attribute::opacity: return "opacity_logit";
  case Attribute::color: return "color";
  case Attribute::feature: return "feature";
  }
  return "?";
}

/// One Gaussian as a value. Rotation is (w, x, y, z); scale is stored as log.
template <class T> struct Gaussian {
  Vec3<T> position = Vec3<T>::Zero();
  Vec4<T> rotation{T(1), T(0), T(0), T(0)};
  Vec3<T> log_scale = Vec3<T>::Zero();
  T opacity_logit = T(0);
  Vec3<T> color = Vec3<T>::Zero();
  std::vector<T> feature;

  Vec3<T> scale() const { return log_scale.array().exp().matrix(); }
  T opacity() const { return sigmoid(opacity_logit); }
};

/// Structure-of-arrays Gaussian scene. Every attribute lives in one flat
/// array with a fixed per-Gaussian stride so optimizers and gradient
/// buffers can treat it uniformly.
template <class T> class GaussianCloud {
public:
  GaussianCloud() = default;
  explicit GaussianCloud(std::size_t feature_dim, T scene_extent = T(1))
      : feature_dim_(feature_dim), scene_extent_(scene_extent) {}

  std::size_t size() const { return opacity_.size(); }
  bool empty() const { return opacity_.empty(); }
  std::size_t feature_dim() const { return feature_dim_; }
  T scene_extent() const { return scene_extent_; }
  void set_scene_extent(T e) { scene_extent_ = e; }

  std::size_t stride(Attribute a) const {
    switch (a) {
    case Attribute::position: return 3;
    case Attribute::rotation: return 4;
    case Attribute::log_scale: return 3;
    case Attribute::opacity: return 1;
    case Attribute::color: return 3;
    case Attribute::feature: return feature_dim_;
    }
    return 0;
  }

  std::vector<T>& data(Attribute a) { return const_cast<std::vector<T>&>(std::as_const(*this).data(a)); }
  const std::vector<T>& data(Attribute a) const {
    switch (a) {
    case Attribute::position: return position_;
    case Attribute::rotation: return rotation_;
    case Attribute::log_scale: return log_scale_;
    case Attribute::opacity: return opacity_;
    case Attribute::color: return color_;
    case Attribute::feature: return feature_;
    }
    return opacity_;
  }

  Eigen::Map<Vec3<T>> position(std::size_t i) { return Eigen::Map<Vec3<T>>(&position_[3 * i]); }
  Eigen::Map<const Vec3<T>> position(std::size_t i) const { return Eigen::Map<const Vec3<T>>(&position_[3 * i]); }
  Eigen::Map<Vec4<T>> rotation(std::size_t i) { return Eigen::Map<Vec4<T>>(&rotation_[4 * i]); }
  Eigen::Map<const Vec4<T>> rotation(std::size_t i) const { return Eigen::Map<const Vec4<T>>(&rotation_[4 * i]); }
  Eigen::Map<Vec3<T>> log_scale(std::size_t i) { return Eigen::Map<Vec3<T>>(&log_scale_[3 * i]); }
  Eigen::Map<const Vec3<T>> log_scale(std::size_t i) const {
    return Eigen::Map<const Vec3<T>>(&log_scale_[3 * i]);
  }
  Eigen::Map<Vec3<T>> color(std::size_t i) { return Eigen::Map<Vec3<T>>(&color_[3 * i]); }
  Eigen::Map<const Vec3<T>> color(std::size_t i) const { return Eigen::Map<const Vec3<T>>(&color_[3 * i]); }
  T& opacity_logit(std::size_t i) { return opacity_[i]; }
  T opacity_logit(std::size_t i) const { return opacity_[i]; }
  T opacity(std::size_t i) const { return sigmoid(opacity_[i]); }
  Vec3<T> scale(std::size_t i) const { return log_scale(i).array().exp().matrix(); }
  std::span<T> feature(std::size_t i) { return {feature_.data() + feature_dim_ * i, feature_dim_}; }
  std::span<const T> feature(std::size_t i) const { return {feature_.data() + feature_dim_ * i, feature_dim_}; }

  void push_back(const Gaussian<T>& g) {
    if (g.feature.size() != feature_dim_) throw Error("feature dimension mismatch");
    position_.insert(position_.end(), g.position.data(), g.position.data() + 3);
    rotation_.insert(rotation_.end(), g.rotation.data(), g.rotation.data() + 4);
    log_scale_.insert(log_scale_.end(), g.log_scale.data(), g.log_scale.data() + 3);
    opacity_.push_back(g.opacity_logit);
    color_.insert(color_.end(), g.color.data(), g.color.data() + 3);
    feature_.insert(feature_.end(), g.feature.begin(), g.feature.end());
  }

  Gaussian<T> at(std::size_t i) const {
    Gaussian<T> g;
    g.position = position(i);
    g.rotation = rotation(i);
    g.log_scale = log_scale(i);
    g.opacity_logit = opacity_[i];
    g.color = color(i);
    auto f = feature(i);
    g.feature.assign(f.begin(), f.end());
    return g;
  }

  /// Keeps Gaussians whose mask entry is true, preserving order.
  void compact(const std::vector<bool>& keep) {
    for (Attribute a : kAllAttributes) compact_array(data(a), stride(a), keep);
  }

  void normalize_rotations() {
    for (std::size_t i = 0; i < size(); ++i) {
      auto q = rotation(i);
      T n = q.norm();
      if (n > T(0)) q /= n;
      else q = Vec4<T>(T(1), T(0), T(0), T(0));
    }
  }

  template <class U> GaussianCloud<U> cast() const {
    GaussianCloud<U> out(feature_dim_, static_cast<U>(scene_extent_));
    for (Attribute a : kAllAttributes) {
      const auto& src = data(a);
      out.data(a).assign(src.begin(), src.end());
    }
    return out;
  }

  friend bool operator==(const GaussianCloud& a, const GaussianCloud& b) {
    if (a.feature_dim_ != b.feature_dim_ || a.scene_extent_ != b.scene_extent_) return false;
    for (Attribute at : kAllAttributes)
      if (a.data(at) != b.data(at)) return false;
    return true;
  }

  template <class V> static void compact_array(std::vector<V>& v, std::size_t stride, const std::vector<bool>& keep) {
    std::size_t w = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (!keep[i]) continue;
      if (w != i) std::copy_n(v.begin() + i * stride, stride, v.begin() + w * stride);
      ++w;
    }
    v.resize(w * stride);
  }

private:
  std::size_t feature_dim_ = 0;
  T scene_extent_ = T(1);
  std::vector<T> position_, rotation_, log_scale_, opacity_, color_, feature_;
};

/// Pinhole camera. Pixel (px, py) has its center at integer coordinates.
struct CameraView {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;
  Mat4d world_to_camera = Mat4d::Identity();

  Eigen::Matrix3d rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
  Eigen::Vector3d translation() const { return world_to_camera.topRightCorner<3, 1>(); }
  Eigen::Vector3d camera_center() const { return -rotation().transpose() * translation(); }

  bool is_valid(double tol = 1e-5) const {
    if (!(fx > 0 && fy > 0 && width > 0 && height > 0)) return false;
    if (!world_to_camera.allFinite()) return false;
    Eigen::Matrix3d r = rotation();
    if (((r * r.transpose()) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    if (std::abs(r.determinant() - 1.0) > tol) return false;
    Eigen::RowVector4d last = world_to_camera.row(3);
    return last.isApprox(Eigen::RowVector4d(0, 0, 0, 1));
  }

  void validate() const {
    if (!is_valid()) throw Error("invalid camera: need fx, fy > 0 and an orthonormal rotation with det +1");
  }

  /// Same pose at a different resolution; intrinsics follow the image.
  CameraView resized(int new_width, int new_height) const {
    CameraView c = *this;
    double sx = double(new_width) / width, sy = double(new_height) / height;
    c.fx = fx * sx;
    c.fy = fy * sy;
    c.cx = (cx + 0.5) * sx - 0.5;
    c.cy = (cy + 0.5) * sy - 0.5;
    c.width = new_width;
    c.height = new_height;
    return c;
  }
};

/// Camera at `eye` looking at `target`; camera axes are x right, y down, z forward.
inline CameraView look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up,
                          int width, int height, double focal) {
  Eigen::Vector3d z = (target - eye).normalized();
  Eigen::Vector3d x = z.cross(up).normalized();
  if (!x.allFinite() || x.norm() < 0.5) x = z.unitOrthogonal();
  Eigen::Vector3d y = z.cross(x);
  CameraView cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = focal;
  cam.cx = (width - 1) * 0.5;
  cam.cy = (height - 1) * 0.5;
  Eigen::Matrix3d r;
  r.row(0) = x.transpose();
  r.row(1) = y.transpose();
  r.row(2) = z.transpose();
  cam.world_to_camera.setIdentity();
  cam.world_to_camera.topLeftCorner<3, 3>() = r;
  cam.world_to_camera.topRightCorner<3, 1>() = -r * eye;
  return cam;
}

/// Orbit pose around the origin; theta is azimuth, phi elevation (radians).
inline CameraView orbit_camera(double theta, double phi, double radius, int width, int height, double focal) {
  Eigen::Vector3d eye(radius * std::cos(phi) * std::sin(theta), -radius * std::sin(phi),
                      radius * std::cos(phi) * std::cos(theta));
  return look_at(eye, Eigen::Vector3d::Zero(), Eigen::Vector3d(0, -1, 0), width, height, focal);
}

/// Dense row-major H x W x D grid; used for RGB images (D = 3) and feature maps.
template <class T> struct FeatureMap {
  int height = 0, width = 0, dim = 0;
  std::vector<T> data;

  FeatureMap() = default;
  FeatureMap(int h, int w, int d, T fill = T(0))
      : height(h), width(w), dim(d), data(std::size_t(h) * std::size_t(w) * std::size_t(d), fill) {}

  std::size_t pixels() const { return std::size_t(height) * std::size_t(width); }
  T* at(int y, int x) { return data.data() + (std::size_t(y) * width + x) * dim; }
  const T* at(int y, int x) const { return data.data() + (std::size_t(y) * width + x) * dim; }
  T& operator()(int y, int x, int c) { return at(y, x)[c]; }
  T operator()(int y, int x, int c) const { return at(y, x)[c]; }
  bool same_shape(const FeatureMap& o) const { return height == o.height && width == o.width && dim == o.dim; }

  template <class U> FeatureMap<U> cast() const {
    FeatureMap<U> out(height, width, dim);
    std::copy(data.begin(), data.end(), out.data.begin());
    return out;
  }
};

template <class T> using Image = FeatureMap<T>;

/// Single-channel integer label grid.
struct LabelMap {
  int height = 0, width = 0;
  std::vector<int> labels;
  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0) : height(h), width(w), labels(std::size_t(h) * w, fill) {}
  int& operator()(int y, int x) { return labels[std::size_t(y) * width + x]; }
  int operator()(int y, int x) const { return labels[std::size_t(y) * width + x]; }
};

/// Radius of the bounding sphere of the positions around their centroid.
template <class T> T compute_scene_extent(const GaussianCloud<T>& cloud) {
  if (cloud.empty()) return T(1);
  Vec3<T> c = Vec3<T>::Zero();
  for (std::size_t i = 0; i < cloud.size(); ++i) c += cloud.position(i);
  c /= T(cloud.size());
  T r = T(0);
  for (std::size_t i = 0; i < cloud.size(); ++i) r = std::max(r, (cloud.position(i) - c).norm());
  return r > T(0) ? r : T(1);
}

/// Uniform cube initialization standing in for a structure-from-motion point cloud.
template <class T = float>
GaussianCloud<T> random_init(std::size_t count, std::size_t feature_dim, T extent, std::uint64_t seed) {
  if (count == 0) throw Error("random_init: count must be positive");
  // Features draw from their own stream so geometry does not depend on N.
  std::mt19937_64 rng(seed), feature_rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::uniform_real_distribution<double> pos(-double(extent), double(extent));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  GaussianCloud<T> cloud(feature_dim);
  T log_s = std::log(extent / std::cbrt(T(count)));
  T op = logit(T(0.1));
  Gaussian<T> g;
  g.feature.resize(feature_dim);
  for (std::size_t i = 0; i < count; ++i) {
    g.position = Vec3<T>(T(pos(rng)), T(pos(rng)), T(pos(rng)));
    g.rotation = Vec4<T>(T(1), T(0), T(0), T(0));
    g.log_scale = Vec3<T>::Constant(log_s);
    g.opacity_logit = op;
    g.color = Vec3<T>(T(unit(rng)), T(unit(rng)), T(unit(rng)));
    for (auto& f : g.feature) f = T(0.01 * normal(feature_rng));
    cloud.push_back(g);
  }
  cloud.set_scene_extent(compute_scene_extent(cloud));
  return cloud;
}

} // namespace featsplat
