#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "featsplat/oracle.hpp"
#include "featsplat/rasterizer.hpp"
#include "featsplat/scene.hpp"

namespace featsplat {

struct PcaBasis {
  int dim = 0;
  Eigen::VectorXd mean;
  Eigen::Matrix<double, 3, Eigen::Dynamic> components; // rows are unit components
  std::array<double, 3> lo{}, hi{};
};

namespace viz_detail {

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const std::size_t i = std::size_t(std::floor(pos));
  const std::size_t j = std::min(i + 1, v.size() - 1);
  return v[i] + (pos - double(i)) * (v[j] - v[i]);
}

} // namespace viz_detail

/// PCA over every `stride`-th pixel; the display range of each component is
/// its 2nd to 98th percentile over the samples.
template <class T> PcaBasis fit_pca(const FeatureMap<T>& map, int stride = 3) {
  if (stride < 1) throw Error("fit_pca: stride must be >= 1");
  const int m = map.dim;
  std::vector<std::size_t> samples;
  for (std::size_t p = 0; p < map.pixels(); p += std::size_t(stride)) samples.push_back(p);
  if (m < 3 || samples.size() < 3) throw Error("degenerate feature map");

  Eigen::MatrixXd x(Eigen::Index(samples.size()), m);
  for (std::size_t s = 0; s < samples.size(); ++s)
    for (int k = 0; k < m; ++k) x(Eigen::Index(s), k) = double(map.data[samples[s] * std::size_t(m) + std::size_t(k)]);
  PcaBasis b;
  b.dim = m;
  b.mean = x.colwise().mean().transpose();
  x.rowwise() -= b.mean.transpose();
  const Eigen::MatrixXd cov = x.transpose() * x / double(samples.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw Error("fit_pca: eigen decomposition failed");
  const auto& ev = eig.eigenvalues(); // ascending
  const double top = ev[m - 1];
  if (!(top > 0) || ev[m - 3] <= 1e-10 * top) throw Error("degenerate feature map");

  b.components.resize(3, m);
  for (int c = 0; c < 3; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(m - 1 - c);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    b.components.row(c) = v.transpose();
  }
  const Eigen::MatrixXd proj = x * b.components.transpose();
  for (int c = 0; c < 3; ++c) {
    std::vector<double> vals(proj.col(c).data(), proj.col(c).data() + proj.rows());
    b.lo[c] = viz_detail::percentile(vals, 0.02);
    b.hi[c] = viz_detail::percentile(vals, 0.98);
    if (!(b.hi[c] > b.lo[c])) b.hi[c] = b.lo[c] + 1.0;
  }
  return b;
}

template <class T> Image<float> visualize_features(const FeatureMap<T>& map, const PcaBasis& basis) {
  if (map.dim != basis.dim)
    throw Error("visualize_features: map has " + std::to_string(map.dim) + " channels, basis expects " +
                std::to_string(basis.dim));
  Image<float> out(map.height, map.width, 3);
  Eigen::VectorXd f(map.dim);
  for (std::size_t p = 0; p < map.pixels(); ++p) {
    for (int k = 0; k < map.dim; ++k) f[k] = double(map.data[p * std::size_t(map.dim) + std::size_t(k)]);
    const Eigen::Vector3d y = basis.components * (f - basis.mean);
    for (int c = 0; c < 3; ++c)
      out.data[p * 3 + std::size_t(c)] = float(std::clamp((y[c] - basis.lo[c]) / (basis.hi[c] - basis.lo[c]), 0.0, 1.0));
  }
  return out;
}

/// Coverage level separating objects from background. Composited teacher
/// features have norm equal to coverage for a single class, so this matches
/// the teacher's transmittance > 0.5 background rule.
inline constexpr double kBackgroundNorm = 0.5;

/// Per-pixel cosine argmax over the codebook (ties to the lowest index).
/// Pixels whose feature norm is below `min_norm` are background.
template <class T>
LabelMap segment_features(const FeatureMap<T>& features, const Codebook& codebook, double min_norm = 0.0) {
  if (codebook.size() < 2) throw Error("segmentation needs a codebook with at least 2 labels");
  if (features.dim != codebook.dim)
    throw Error("segmentation: feature dimension " + std::to_string(features.dim) + " does not match codebook " +
                std::to_string(codebook.dim));
  LabelMap out(features.height, features.width, 0);
  for (int y = 0; y < features.height; ++y)
    for (int x = 0; x < features.width; ++x) {
      const T* f = features.at(y, x);
      double norm = 0;
      for (int k = 0; k < features.dim; ++k) norm += double(f[k]) * double(f[k]);
      norm = std::sqrt(norm);
      if (norm < min_norm) {
        out(y, x) = codebook.background_label;
        continue;
      }
      int best = 0;
      double best_score = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < codebook.size(); ++c) {
        const float* e = codebook.embedding(c);
        double dot = 0;
        for (int k = 0; k < features.dim; ++k) dot += double(f[k]) * double(e[k]);
        const double score = norm > 0 ? dot / norm : 0.0;
        if (score > best_score) {
          best_score = score;
          best = int(c);
        }
      }
      out(y, x) = best;
    }
  return out;
}

/// Stable color for a label name: FNV-1a hash mapped to a hue.
inline Eigen::Vector3f label_color(const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return hsv_to_rgb(double(h % 3600) / 3600.0, 0.65, 0.95).cast<float>();
}

inline Image<float> colorize_labels(const LabelMap& labels, const Codebook& codebook) {
  Image<float> out(labels.height, labels.width, 3);
  std::vector<Eigen::Vector3f> palette;
  for (const auto& l : codebook.labels) palette.push_back(label_color(l));
  for (std::size_t p = 0; p < labels.labels.size(); ++p) {
    const int l = labels.labels[p];
    const Eigen::Vector3f c = (l >= 0 && std::size_t(l) < palette.size()) ? palette[std::size_t(l)] : Eigen::Vector3f::Zero();
    for (int k = 0; k < 3; ++k) out.data[p * 3 + std::size_t(k)] = c[k];
  }
  return out;
}

/// Even blend of two equally sized RGB images.
inline Image<float> blend_half(const Image<float>& a, const Image<float>& b) {
  if (!a.same_shape(b)) throw Error("blend: image size mismatch");
  Image<float> out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = 0.5f * a.data[i] + 0.5f * b.data[i];
  return out;
}

struct SegmentationResult {
  LabelMap labels;
  Image<float> colors;
  Image<float> overlay;
};

/// Segmentation of a render: labels, palette image, and 50% overlay on the RGB.
/// `query_features` are the render's features in codebook space.
inline SegmentationResult segmentation_map(const Image<float>& rgb, const FeatureMap<float>& query_features,
                                           const Codebook& codebook, double min_norm = kBackgroundNorm) {
  SegmentationResult r;
  r.labels = segment_features(query_features, codebook, min_norm);
  r.colors = colorize_labels(r.labels, codebook);
  r.overlay = blend_half(rgb, r.colors);
  return r;
}

struct MiouResult {
  std::vector<double> iou; // NaN where the class is absent from both maps
  double mean = 0;
  int included = 0;
};

inline MiouResult miou(const LabelMap& pred, const LabelMap& gt, int num_classes) {
  if (pred.height != gt.height || pred.width != gt.width) throw Error("miou: label maps differ in size");
  std::vector<std::size_t> inter(std::size_t(num_classes), 0), uni(std::size_t(num_classes), 0);
  for (std::size_t p = 0; p < pred.labels.size(); ++p) {
    const int a = pred.labels[p], b = gt.labels[p];
    if (a < 0 || a >= num_classes || b < 0 || b >= num_classes) throw Error("miou: label out of range");
    if (a == b) {
      ++inter[std::size_t(a)];
      ++uni[std::size_t(a)];
    } else {
      ++uni[std::size_t(a)];
      ++uni[std::size_t(b)];
    }
  }
  MiouResult r;
  r.iou.assign(std::size_t(num_classes), std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  for (int k = 0; k < num_classes; ++k) {
    if (uni[std::size_t(k)] == 0) continue;
    r.iou[std::size_t(k)] = double(inter[std::size_t(k)]) / double(uni[std::size_t(k)]);
    sum += r.iou[std::size_t(k)];
    ++r.included;
  }
  r.mean = r.included > 0 ? sum / r.included : 0.0;
  return r;
}

/// Screen-space footprint of a Gaussian selection: selected Gaussians are
/// rendered white, the rest black, over a black background.
inline Image<float> selection_mask(const GaussianCloud<float>& cloud, const std::vector<bool>& selection,
                                   const CameraView& view, unsigned threads = 1) {
  if (selection.size() != cloud.size()) throw Error("selection_mask: selection length does not match cloud");
  GaussianCloud<float> tinted = cloud;
  for (std::size_t i = 0; i < tinted.size(); ++i)
    tinted.color(i) = Eigen::Vector3f::Constant(selection[i] ? 1.0f : 0.0f);
  RenderSettings rs;
  rs.threads = threads;
  const auto res = render(tinted, view, rs);
  Image<float> mask(view.height, view.width, 1);
  for (std::size_t p = 0; p < mask.pixels(); ++p) mask.data[p] = std::clamp(res.output.image.data[p * 3], 0.0f, 1.0f);
  return mask;
}

} // namespace featsplat
