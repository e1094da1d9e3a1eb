#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "featsplat/core.hpp"
#include "featsplat/scene.hpp"

namespace featsplat {

/// Unit query embeddings standing in for text-encoder outputs.
struct Codebook {
  std::vector<std::string> labels;
  int dim = 0;
  std::vector<float> embeddings; // labels.size() x dim, unit rows
  int background_label = 0;

  std::size_t size() const { return labels.size(); }
  const float* embedding(std::size_t k) const { return embeddings.data() + k * std::size_t(dim); }
  std::vector<float> row(std::size_t k) const { return {embedding(k), embedding(k) + dim}; }

  int index_of(const std::string& label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    return it == labels.end() ? -1 : int(it - labels.begin());
  }

  friend bool operator==(const Codebook&, const Codebook&) = default;
};

inline std::string class_label(int k) {
  if (k < 26) return std::string("class") + char('A' + k);
  return "class" + std::to_string(k);
}

/// Orthonormal codebook: background first, then one entry per class.
inline Codebook make_codebook(int num_classes, int dim, std::uint64_t seed) {
  if (num_classes + 1 > dim) throw Error("codebook: dimension too small for the label count");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Codebook cb;
  cb.dim = dim;
  cb.background_label = 0;
  cb.labels.push_back("background");
  for (int k = 0; k < num_classes; ++k) cb.labels.push_back(class_label(k));
  std::vector<Eigen::VectorXd> basis;
  for (std::size_t k = 0; k < cb.labels.size(); ++k) {
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v[i] = normal(rng);
    for (const auto& b : basis) v -= b.dot(v) * b;
    v.normalize();
    basis.push_back(v);
    for (int i = 0; i < dim; ++i) cb.embeddings.push_back(float(v[i]));
  }
  return cb;
}

struct OracleScene {
  GaussianCloud<float> cloud;
  std::vector<int> labels; // codebook index per Gaussian
  Codebook codebook;
  std::vector<CameraView> views;
};

struct OracleOptions {
  int image_size = 64;
  int num_views = 20;
  double elevation = 55.0 * M_PI / 180.0;
  double camera_distance = 4.0;
  double half_fov = 25.0 * M_PI / 180.0;
  double ring_radius = 1.0;
  double blob_radius = 0.15;
};

inline Eigen::Vector3d hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = int(std::floor(h));
  const double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
  case 0: return {v, t, p};
  case 1: return {q, v, p};
  case 2: return {p, v, t};
  case 3: return {p, q, v};
  case 4: return {t, p, v};
  default: return {v, p, q};
  }
}

/// K blob clusters on a ring, each Gaussian's feature set to its class
/// embedding, seen by an orbit rig at fixed elevation.
inline OracleScene make_oracle_scene(int num_classes, int gaussians_per_class, int feature_dim, std::uint64_t seed,
                                     const OracleOptions& opt = {}) {
  if (num_classes < 2) throw Error("oracle scene: need at least 2 classes");
  if (feature_dim < 4 * num_classes) throw Error("oracle scene: feature dimension must be >= 4 * classes");
  if (gaussians_per_class < 1) throw Error("oracle scene: need at least one Gaussian per class");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  OracleScene scene;
  scene.codebook = make_codebook(num_classes, feature_dim, seed ^ 0xC0DEB00CULL);
  scene.cloud = GaussianCloud<float>(std::size_t(feature_dim));

  for (int k = 0; k < num_classes; ++k) {
    const double angle = 2.0 * M_PI * k / num_classes;
    const Eigen::Vector3d center(opt.ring_radius * std::cos(angle), 0.0, opt.ring_radius * std::sin(angle));
    const Eigen::Vector3d base = hsv_to_rgb(double(k) / num_classes, 0.75, 0.9);
    const int label = k + 1;
    for (int i = 0; i < gaussians_per_class; ++i) {
      Gaussian<float> g;
      Eigen::Vector3d offset;
      do {
        offset = Eigen::Vector3d(unit(rng), unit(rng), unit(rng)) * 2.0 - Eigen::Vector3d::Ones();
      } while (offset.squaredNorm() > 1.0);
      g.position = (center + opt.blob_radius * offset).cast<float>();
      Eigen::Vector4d q(normal(rng), normal(rng), normal(rng), normal(rng));
      g.rotation = q.normalized().cast<float>();
      for (int c = 0; c < 3; ++c) g.log_scale[c] = float(std::log(0.035 + 0.03 * unit(rng)));
      g.opacity_logit = float(logit(0.7 + 0.25 * unit(rng)));
      for (int c = 0; c < 3; ++c) g.color[c] = float(std::clamp(base[c] + 0.08 * (unit(rng) - 0.5), 0.0, 1.0));
      g.feature = scene.codebook.row(std::size_t(label));
      scene.cloud.push_back(g);
      scene.labels.push_back(label);
    }
  }
  scene.cloud.set_scene_extent(compute_scene_extent(scene.cloud));

  const double focal = 0.5 * opt.image_size / std::tan(opt.half_fov);
  for (int v = 0; v < opt.num_views; ++v) {
    const double theta = 2.0 * M_PI * v / opt.num_views;
    scene.views.push_back(
        orbit_camera(theta, opt.elevation, opt.camera_distance, opt.image_size, opt.image_size, focal));
  }
  return scene;
}

struct ReferenceComposite {
  FeatureMap<double> image;     // H x W x 3
  FeatureMap<double> features;  // H x W x N
  std::vector<double> transmittance;
};

/// Straightforward per-pixel compositor: every Gaussian is tested at every
/// pixel in global depth order. No tiles, no screen-space culling. It applies
/// the same compositing rules as the rasterizer (3-sigma support, alpha
/// clamp at 0.99, skip below 1/255, stop once transmittance < 1e-4) and
/// exists as an independent check of it.
inline ReferenceComposite reference_composite(const GaussianCloud<float>& cloud, const CameraView& view,
                                              const Eigen::Vector3d& background = Eigen::Vector3d::Zero()) {
  struct Footprint {
    double depth;
    std::size_t index;
    double u, v;            // mean in pixels
    double ia, ib, ic;      // inverse covariance
    double opacity;
  };
  const Eigen::Matrix3d rot = view.world_to_camera.topLeftCorner<3, 3>();
  const Eigen::Vector3d trans = view.world_to_camera.topRightCorner<3, 1>();
  std::vector<Footprint> fps;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d x = cloud.position(i).cast<double>();
    const Eigen::Vector3d cam = rot * x + trans;
    if (cam.z() <= 0.01) continue;
    const Eigen::Vector4d q = cloud.rotation(i).cast<double>().normalized();
    const Eigen::Matrix3d r = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
    const Eigen::Vector3d s = cloud.log_scale(i).cast<double>().array().exp();
    const Eigen::Matrix3d sigma = r * s.cwiseAbs2().asDiagonal() * r.transpose();
    Eigen::Matrix<double, 2, 3> jac;
    jac << view.fx / cam.z(), 0, -view.fx * cam.x() / (cam.z() * cam.z()), 0, view.fy / cam.z(),
        -view.fy * cam.y() / (cam.z() * cam.z());
    Eigen::Matrix2d cov = jac * rot * sigma * rot.transpose() * jac.transpose();
    cov += 0.3 * Eigen::Matrix2d::Identity();
    const Eigen::Matrix2d inv = cov.inverse();
    fps.push_back({cam.z(), i, view.fx * cam.x() / cam.z() + view.cx, view.fy * cam.y() / cam.z() + view.cy,
                   inv(0, 0), 0.5 * (inv(0, 1) + inv(1, 0)), inv(1, 1), 1.0 / (1.0 + std::exp(-double(cloud.opacity_logit(i))))});
  }
  std::sort(fps.begin(), fps.end(), [](const Footprint& a, const Footprint& b) {
    return a.depth != b.depth ? a.depth < b.depth : a.index < b.index;
  });

  const int n = int(cloud.feature_dim());
  ReferenceComposite out{FeatureMap<double>(view.height, view.width, 3), FeatureMap<double>(view.height, view.width, n),
                         std::vector<double>(std::size_t(view.width) * view.height, 1.0)};
  for (int py = 0; py < view.height; ++py)
    for (int px = 0; px < view.width; ++px) {
      double t = 1.0;
      double* col = out.image.at(py, px);
      double* feat = out.features.at(py, px);
      for (const auto& fp : fps) {
        const double dx = px - fp.u, dy = py - fp.v;
        const double maha = fp.ia * dx * dx + 2.0 * fp.ib * dx * dy + fp.ic * dy * dy;
        if (maha > 9.0) continue;
        const double a = std::min(0.99, fp.opacity * std::exp(-0.5 * maha));
        if (a < 1.0 / 255.0) continue;
        const auto c = cloud.color(fp.index);
        const auto f = cloud.feature(fp.index);
        for (int k = 0; k < 3; ++k) col[k] += double(c[k]) * a * t;
        for (int k = 0; k < n; ++k) feat[k] += double(f[k]) * a * t;
        t *= 1.0 - a;
        if (t < 1e-4) break;
      }
      for (int k = 0; k < 3; ++k) col[k] += t * background[k];
      out.transmittance[std::size_t(py) * view.width + px] = t;
    }
  return out;
}

struct TeacherFrame {
  Image<float> image;
  FeatureMap<float> features;
  LabelMap class_ids;
};

/// Ground-truth image, teacher feature map and class-id map for one view.
inline TeacherFrame teacher_render(const OracleScene& scene, const CameraView& view, double noise_sigma = 0.0,
                                   std::uint64_t noise_seed = 0) {
  const auto ref = reference_composite(scene.cloud, view);
  TeacherFrame fr;
  fr.image = ref.image.cast<float>();
  fr.features = ref.features.cast<float>();
  if (noise_sigma > 0) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> normal(0.0, noise_sigma);
    for (auto& v : fr.image.data) v = float(std::clamp(double(v) + normal(rng), 0.0, 1.0));
  }
  const auto& cb = scene.codebook;
  fr.class_ids = LabelMap(view.height, view.width, cb.background_label);
  for (int y = 0; y < view.height; ++y)
    for (int x = 0; x < view.width; ++x) {
      if (ref.transmittance[std::size_t(y) * view.width + x] > 0.5) continue;
      const double* f = ref.features.at(y, x);
      double norm = 0;
      for (int k = 0; k < cb.dim; ++k) norm += f[k] * f[k];
      norm = std::sqrt(norm);
      int best = 0;
      double best_score = -2;
      for (std::size_t c = 0; c < cb.size(); ++c) {
        const float* e = cb.embedding(c);
        double dot = 0;
        for (int k = 0; k < cb.dim; ++k) dot += f[k] * e[k];
        const double score = norm > 0 ? dot / norm : 0.0;
        if (score > best_score) {
          best_score = score;
          best = int(c);
        }
      }
      fr.class_ids(y, x) = best;
    }
  return fr;
}

} // namespace featsplat
