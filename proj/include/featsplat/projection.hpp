#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "featsplat/core.hpp"
#include "featsplat/scene.hpp"

namespace featsplat {

inline constexpr int kTileSize = 16;
inline constexpr double kNearPlane = 0.01;
inline constexpr double kLowPass = 0.3;
inline constexpr double kSigmaCutoff = 3.0;

/// Rotation matrix of the quaternion (w, x, y, z), which must be unit.
template <class T> Mat3<T> quat_to_rotation(const Vec4<T>& q) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3<T> r;
  r << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
      T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
      T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
  return r;
}

/// Sigma = R S S^T R^T. The quaternion is normalized first.
template <class T> Mat3<T> build_covariance(const Vec4<T>& rotation, const Vec3<T>& scale) {
  Mat3<T> m = quat_to_rotation<T>(rotation.normalized()) * scale.asDiagonal();
  return m * m.transpose();
}

template <class T> struct ProjectedGaussian {
  Vec2<T> mean2d = Vec2<T>::Zero();
  Mat2<T> cov2d = Mat2<T>::Identity();
  Mat2<T> inv_cov2d = Mat2<T>::Identity();
  T depth = T(0);
  int radius = 0;
  std::uint32_t source_index = 0;
};

/// Screen-space footprint of one Gaussian, or nullopt when culled (behind the
/// near plane or with a 3-sigma disk that misses the image).
template <class T>
std::optional<ProjectedGaussian<T>> project(const Mat3<T>& cov3d, const Vec3<T>& position, const CameraView& view) {
  const Mat3<T> wr = view.rotation().cast<T>();
  const Vec3<T> t = wr * position + view.translation().cast<T>();
  if (!(t.z() > T(kNearPlane))) return std::nullopt;

  const T fx = T(view.fx), fy = T(view.fy);
  const T inv_z = T(1) / t.z();
  Mat23<T> j;
  j << fx * inv_z, T(0), -fx * t.x() * inv_z * inv_z, T(0), fy * inv_z, -fy * t.y() * inv_z * inv_z;
  const Mat23<T> tm = j * wr;
  Mat2<T> cov = tm * cov3d * tm.transpose();
  cov(0, 1) = cov(1, 0) = T(0.5) * (cov(0, 1) + cov(1, 0));
  cov(0, 0) += T(kLowPass);
  cov(1, 1) += T(kLowPass);

  const T det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
  if (!(det > T(0))) return std::nullopt;

  ProjectedGaussian<T> p;
  p.mean2d = Vec2<T>(fx * t.x() * inv_z + T(view.cx), fy * t.y() * inv_z + T(view.cy));
  p.cov2d = cov;
  p.inv_cov2d << cov(1, 1) / det, -cov(0, 1) / det, -cov(0, 1) / det, cov(0, 0) / det;
  p.depth = t.z();
  const T mid = T(0.5) * (cov(0, 0) + cov(1, 1));
  const T half_diff = T(0.5) * (cov(0, 0) - cov(1, 1));
  const T lambda_max = mid + std::sqrt(half_diff * half_diff + cov(0, 1) * cov(0, 1));
  p.radius = int(std::ceil(T(kSigmaCutoff) * std::sqrt(lambda_max)));

  // Disk vs. the rectangle of pixel centers [0, W-1] x [0, H-1].
  const double mx = double(p.mean2d.x()), my = double(p.mean2d.y());
  const double nx = std::clamp(mx, 0.0, double(view.width - 1));
  const double ny = std::clamp(my, 0.0, double(view.height - 1));
  const double r = p.radius;
  if ((mx - nx) * (mx - nx) + (my - ny) * (my - ny) > r * r) return std::nullopt;
  return p;
}

template <class T>
std::optional<ProjectedGaussian<T>> project_gaussian(const GaussianCloud<T>& cloud, std::size_t i,
                                                     const CameraView& view) {
  auto p = project<T>(build_covariance<T>(cloud.rotation(i), cloud.scale(i)), cloud.position(i), view);
  if (p) p->source_index = static_cast<std::uint32_t>(i);
  return p;
}

/// True when the closed disk (center, radius) touches the closed rectangle
/// of pixel centers [x0, x1] x [y0, y1].
inline bool disk_overlaps_rect(double cx, double cy, double radius, double x0, double y0, double x1, double y1) {
  const double nx = std::clamp(cx, x0, x1), ny = std::clamp(cy, y0, y1);
  return (cx - nx) * (cx - nx) + (cy - ny) * (cy - ny) <= radius * radius;
}

struct TileEntry {
  double depth;
  std::uint32_t source_index;
  std::uint32_t projected_index;
  friend bool operator<(const TileEntry& a, const TileEntry& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.source_index < b.source_index;
  }
};

struct TileBinning {
  int tiles_x = 0, tiles_y = 0;
  std::vector<std::vector<TileEntry>> tiles; // row-major, front-to-back

  const std::vector<TileEntry>& tile(int tx, int ty) const { return tiles[std::size_t(ty) * tiles_x + tx]; }
};

/// Assigns every projected Gaussian to each 16x16 tile its radius disk
/// overlaps, then sorts each tile by (depth, source index).
template <class T>
TileBinning bin_tiles(const std::vector<ProjectedGaussian<T>>& projected, const CameraView& view) {
  TileBinning b;
  b.tiles_x = (view.width + kTileSize - 1) / kTileSize;
  b.tiles_y = (view.height + kTileSize - 1) / kTileSize;
  b.tiles.resize(std::size_t(b.tiles_x) * b.tiles_y);
  for (std::size_t k = 0; k < projected.size(); ++k) {
    const auto& p = projected[k];
    const double mx = double(p.mean2d.x()), my = double(p.mean2d.y()), r = p.radius;
    const int tx0 = std::max(0, int(std::floor((mx - r) / kTileSize)));
    const int tx1 = std::min(b.tiles_x - 1, int(std::floor((mx + r) / kTileSize)));
    const int ty0 = std::max(0, int(std::floor((my - r) / kTileSize)));
    const int ty1 = std::min(b.tiles_y - 1, int(std::floor((my + r) / kTileSize)));
    for (int ty = ty0; ty <= ty1; ++ty)
      for (int tx = tx0; tx <= tx1; ++tx) {
        const double x0 = tx * kTileSize, y0 = ty * kTileSize;
        const double x1 = std::min(x0 + kTileSize - 1, double(view.width - 1));
        const double y1 = std::min(y0 + kTileSize - 1, double(view.height - 1));
        if (!disk_overlaps_rect(mx, my, r, x0, y0, x1, y1)) continue;
        b.tiles[std::size_t(ty) * b.tiles_x + tx].push_back(
            {double(p.depth), p.source_index, static_cast<std::uint32_t>(k)});
      }
  }
  for (auto& t : b.tiles) std::sort(t.begin(), t.end());
  return b;
}

template <class T> struct ProjectionGradients {
  Vec3<T> position = Vec3<T>::Zero();
  Vec4<T> rotation = Vec4<T>::Zero();
  Vec3<T> log_scale = Vec3<T>::Zero();
};

/// Chain rule through Sigma = R S S^T R^T and the EWA projection.
/// `d_cov2d` is the gradient w.r.t. the symmetric 2x2 matrix, with the
/// loss read as sum_ij G_ij * cov_ij (off-diagonal counted in both slots).
template <class T>
ProjectionGradients<T> project_backward(const Vec3<T>& position, const Vec4<T>& rotation, const Vec3<T>& log_scale,
                                        const CameraView& view, const Vec2<T>& d_mean2d, const Mat2<T>& d_cov2d) {
  ProjectionGradients<T> g;
  const Mat3<T> wr = view.rotation().cast<T>();
  const Vec3<T> t = wr * position + view.translation().cast<T>();
  const T fx = T(view.fx), fy = T(view.fy);
  const T iz = T(1) / t.z(), iz2 = iz * iz, iz3 = iz2 * iz;

  const T qn = rotation.norm();
  const Vec4<T> q = rotation / qn;
  const Mat3<T> r = quat_to_rotation<T>(q);
  const Vec3<T> s = log_scale.array().exp().matrix();
  const Mat3<T> m = r * s.asDiagonal();
  const Mat3<T> sigma = m * m.transpose();

  Mat23<T> j;
  j << fx * iz, T(0), -fx * t.x() * iz2, T(0), fy * iz, -fy * t.y() * iz2;
  const Mat23<T> tm = j * wr;

  const Mat2<T> gs = T(0.5) * (d_cov2d + d_cov2d.transpose());
  const Mat3<T> d_sigma = tm.transpose() * gs * tm;
  const Mat23<T> d_tm = T(2) * gs * tm * sigma;
  const Mat23<T> d_j = d_tm * wr.transpose();

  Vec3<T> d_t;
  d_t.x() = d_mean2d.x() * fx * iz + d_j(0, 2) * (-fx * iz2);
  d_t.y() = d_mean2d.y() * fy * iz + d_j(1, 2) * (-fy * iz2);
  d_t.z() = d_mean2d.x() * (-fx * t.x() * iz2) + d_mean2d.y() * (-fy * t.y() * iz2) + d_j(0, 0) * (-fx * iz2) +
            d_j(0, 2) * (T(2) * fx * t.x() * iz3) + d_j(1, 1) * (-fy * iz2) + d_j(1, 2) * (T(2) * fy * t.y() * iz3);
  g.position = wr.transpose() * d_t;

  const Mat3<T> d_m = T(2) * d_sigma * m;
  Vec3<T> d_s;
  for (int c = 0; c < 3; ++c) d_s[c] = d_m.col(c).dot(r.col(c));
  g.log_scale = d_s.cwiseProduct(s);

  const Mat3<T> d_r = d_m * s.asDiagonal();
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4<T> d_q;
  d_q[0] = T(2) * (-z * d_r(0, 1) + y * d_r(0, 2) + z * d_r(1, 0) - x * d_r(1, 2) - y * d_r(2, 0) + x * d_r(2, 1));
  d_q[1] = T(2) * (y * d_r(0, 1) + z * d_r(0, 2) + y * d_r(1, 0) - T(2) * x * d_r(1, 1) - w * d_r(1, 2) +
                   z * d_r(2, 0) + w * d_r(2, 1) - T(2) * x * d_r(2, 2));
  d_q[2] = T(2) * (-T(2) * y * d_r(0, 0) + x * d_r(0, 1) + w * d_r(0, 2) + x * d_r(1, 0) + z * d_r(1, 2) -
                   w * d_r(2, 0) + z * d_r(2, 1) - T(2) * y * d_r(2, 2));
  d_q[3] = T(2) * (-T(2) * z * d_r(0, 0) - w * d_r(0, 1) + x * d_r(0, 2) + w * d_r(1, 0) - T(2) * z * d_r(1, 1) +
                   y * d_r(1, 2) + x * d_r(2, 0) + y * d_r(2, 1));
  g.rotation = (d_q - q * q.dot(d_q)) / qn;
  return g;
}

} // namespace featsplat
