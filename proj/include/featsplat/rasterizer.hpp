#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "featsplat/core.hpp"
#include "featsplat/projection.hpp"
#include "featsplat/scene.hpp"

namespace featsplat {

inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kMinAlpha = 1.0 / 255.0;
inline constexpr double kMinTransmittance = 1e-4;

struct RenderSettings {
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  unsigned threads = 1;
  int expected_feature_dim = -1; // -1 accepts the cloud's dimension
  bool record_signature = false; // hash of every per-pixel compositing decision
};

template <class T> struct RenderOutput {
  Image<T> image;          // H x W x 3
  FeatureMap<T> feature_map; // H x W x N, composited over a zero background
  FeatureMap<T> alpha_map; // H x W x 1, equals 1 - final transmittance
  std::vector<int> contributors; // per pixel
  std::uint64_t signature = 0;
};

template <class T> struct RenderState {
  CameraView view;
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  std::size_t cloud_size = 0;
  std::size_t feature_dim = 0;
  unsigned threads = 1;
  std::vector<ProjectedGaussian<T>> projected;
  std::vector<T> opacity; // per projected Gaussian
  TileBinning binning;
  std::vector<T> final_transmittance; // per pixel
  std::vector<int> last_entry;        // per pixel: tile-list entries consumed
};

template <class T> struct RenderResult {
  RenderOutput<T> output;
  RenderState<T> state;
};

namespace raster_detail {

template <class T> struct Splat {
  T alpha;  // effective opacity after clamping
  T gauss;  // exp(power)
  T dx, dy; // pixel center minus mean
  bool clamped;
};

// The single definition of a Gaussian's effective opacity at a pixel, shared
// by the forward and backward passes so both make identical decisions.
template <class T>
inline bool evaluate(const ProjectedGaussian<T>& p, T opacity, int px, int py, Splat<T>& s) {
  s.dx = T(px) - p.mean2d.x();
  s.dy = T(py) - p.mean2d.y();
  const T a = p.inv_cov2d(0, 0), b = p.inv_cov2d(0, 1), c = p.inv_cov2d(1, 1);
  const T maha = a * s.dx * s.dx + T(2) * b * s.dx * s.dy + c * s.dy * s.dy;
  if (!(maha <= T(kSigmaCutoff * kSigmaCutoff))) return false;
  s.gauss = std::exp(T(-0.5) * maha);
  const T raw = opacity * s.gauss;
  s.clamped = raw > T(kMaxAlpha);
  s.alpha = s.clamped ? T(kMaxAlpha) : raw;
  return s.alpha >= T(kMinAlpha);
}

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

} // namespace raster_detail

/// Fused tile rasterization of color and N-dim features in one front-to-back pass.
template <class T>
RenderResult<T> render(const GaussianCloud<T>& cloud, const CameraView& view, const RenderSettings& settings = {}) {
  if (cloud.empty()) throw Error("render: empty cloud");
  if (settings.expected_feature_dim >= 0 && std::size_t(settings.expected_feature_dim) != cloud.feature_dim())
    throw Error("render: requested feature dimension " + std::to_string(settings.expected_feature_dim) +
                " but cloud has " + std::to_string(cloud.feature_dim()));
  view.validate();

  RenderResult<T> result;
  auto& st = result.state;
  st.view = view;
  st.background = settings.background;
  st.cloud_size = cloud.size();
  st.feature_dim = cloud.feature_dim();
  st.threads = resolve_threads(settings.threads);

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const T op = cloud.opacity(i);
    if (!(op > T(0))) continue;
    if (auto p = project_gaussian(cloud, i, view)) {
      st.projected.push_back(*p);
      st.opacity.push_back(op);
    }
  }
  st.binning = bin_tiles(st.projected, view);

  const int w = view.width, h = view.height;
  const int n = int(cloud.feature_dim());
  auto& out = result.output;
  out.image = Image<T>(h, w, 3);
  out.feature_map = FeatureMap<T>(h, w, n);
  out.alpha_map = FeatureMap<T>(h, w, 1);
  out.contributors.assign(std::size_t(w) * h, 0);
  st.final_transmittance.assign(std::size_t(w) * h, T(1));
  st.last_entry.assign(std::size_t(w) * h, 0);

  const Vec3<T> bg = settings.background.cast<T>();
  const std::size_t num_tiles = st.binning.tiles.size();
  std::vector<std::uint64_t> tile_sig(num_tiles, 0);

  parallel_blocks(num_tiles, st.threads, [&](unsigned, std::size_t begin, std::size_t end) {
    std::vector<T> feat(n);
    for (std::size_t t = begin; t < end; ++t) {
      const int tx = int(t % st.binning.tiles_x), ty = int(t / st.binning.tiles_x);
      const auto& list = st.binning.tiles[t];
      std::uint64_t sig = 0;
      for (int py = ty * kTileSize; py < std::min(h, (ty + 1) * kTileSize); ++py)
        for (int px = tx * kTileSize; px < std::min(w, (tx + 1) * kTileSize); ++px) {
          T trans = T(1);
          Vec3<T> col = Vec3<T>::Zero();
          std::fill(feat.begin(), feat.end(), T(0));
          int used = 0, contributors = 0;
          for (std::size_t e = 0; e < list.size(); ++e) {
            const auto& entry = list[e];
            const auto& p = st.projected[entry.projected_index];
            raster_detail::Splat<T> s;
            if (!raster_detail::evaluate(p, st.opacity[entry.projected_index], px, py, s)) continue;
            const T weight = s.alpha * trans;
            col += weight * cloud.color(p.source_index);
            const auto f = cloud.feature(p.source_index);
            for (int k = 0; k < n; ++k) feat[k] += weight * f[k];
            trans *= (T(1) - s.alpha);
            ++contributors;
            used = int(e) + 1;
            if (settings.record_signature)
              sig = raster_detail::mix(sig, (std::uint64_t(p.source_index) << 1) | (s.clamped ? 1u : 0u));
            if (trans < T(kMinTransmittance)) break;
          }
          const std::size_t pix = std::size_t(py) * w + px;
          T* im = out.image.at(py, px);
          for (int c = 0; c < 3; ++c) im[c] = col[c] + trans * bg[c];
          std::copy(feat.begin(), feat.end(), out.feature_map.at(py, px));
          out.alpha_map.data[pix] = T(1) - trans;
          out.contributors[pix] = contributors;
          st.final_transmittance[pix] = trans;
          st.last_entry[pix] = used;
          if (settings.record_signature) sig = raster_detail::mix(sig, std::uint64_t(pix) * 131 + contributors);
        }
      tile_sig[t] = sig;
    }
  });
  if (settings.record_signature)
    for (auto s : tile_sig) out.signature = raster_detail::mix(out.signature, s);
  return result;
}

template <class T> struct Contribution {
  std::uint32_t source_index = 0;
  T alpha = T(0);         // effective opacity
  T transmittance = T(1); // before this Gaussian
};

/// Replays the front-to-back traversal of one pixel from a render state.
template <class T> std::vector<Contribution<T>> trace_pixel(const RenderState<T>& st, int px, int py) {
  if (px < 0 || py < 0 || px >= st.view.width || py >= st.view.height) throw Error("trace_pixel: outside the image");
  const auto& list = st.binning.tile(px / kTileSize, py / kTileSize);
  const int used = st.last_entry[std::size_t(py) * st.view.width + px];
  std::vector<Contribution<T>> out;
  T trans = T(1);
  for (int e = 0; e < used; ++e) {
    const auto& entry = list[std::size_t(e)];
    raster_detail::Splat<T> s;
    if (!raster_detail::evaluate(st.projected[entry.projected_index], st.opacity[entry.projected_index], px, py, s))
      continue;
    out.push_back({entry.source_index, s.alpha, trans});
    trans *= (T(1) - s.alpha);
  }
  return out;
}

/// Gradients mirroring the cloud layout, plus screen-space intermediates and
/// the per-Gaussian view-space statistics used for densification.
template <class T> struct GradientBuffer {
  std::size_t feature_dim = 0;
  std::vector<T> position, rotation, log_scale, opacity, color, feature;
  std::vector<T> mean2d; // 2 per Gaussian
  std::vector<T> cov2d;  // xx, xy, yy per Gaussian (symmetric-matrix gradient)
  std::vector<T> view_grad_accum; // sum of per-render |d mean2d|
  std::vector<int> view_hits;     // renders in which the Gaussian was projected
  std::vector<T> decoder_weights, decoder_bias;

  GradientBuffer() = default;
  GradientBuffer(std::size_t count, std::size_t n)
      : feature_dim(n), position(3 * count, T(0)), rotation(4 * count, T(0)), log_scale(3 * count, T(0)),
        opacity(count, T(0)), color(3 * count, T(0)), feature(n * count, T(0)), mean2d(2 * count, T(0)),
        cov2d(3 * count, T(0)), view_grad_accum(count, T(0)), view_hits(count, 0) {}

  std::size_t size() const { return opacity.size(); }

  std::vector<T>& data(Attribute a) {
    switch (a) {
    case Attribute::position: return position;
    case Attribute::rotation: return rotation;
    case Attribute::log_scale: return log_scale;
    case Attribute::opacity: return opacity;
    case Attribute::color: return color;
    case Attribute::feature: return feature;
    }
    return opacity;
  }
  const std::vector<T>& data(Attribute a) const { return const_cast<GradientBuffer*>(this)->data(a); }

  void accumulate_view_stats(const GradientBuffer& other) {
    if (other.size() != size()) throw Error("accumulate_view_stats: size mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      view_grad_accum[i] += other.view_grad_accum[i];
      view_hits[i] += other.view_hits[i];
    }
  }
};

/// Per-Gaussian |accumulated view-space gradient| / max(1, renders seen).
template <class T> std::vector<T> view_space_grad_norms(const GradientBuffer<T>& g) {
  std::vector<T> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g.view_grad_accum[i] / T(std::max(1, g.view_hits[i]));
  return out;
}

/// Exact gradients of the compositing, traversed back to front from the stored
/// final transmittance, then chained through the projection.
template <class T>
GradientBuffer<T> render_backward(const GaussianCloud<T>& cloud, const RenderState<T>& st, const Image<T>& d_image,
                                  const FeatureMap<T>& d_feature) {
  if (cloud.size() != st.cloud_size || cloud.feature_dim() != st.feature_dim)
    throw Error("render_backward: render state does not match the cloud");
  const CameraView& view = st.view;
  const int w = view.width, h = view.height, n = int(st.feature_dim);
  if (d_image.height != h || d_image.width != w || d_image.dim != 3)
    throw Error("render_backward: image gradient has the wrong shape");
  if (d_feature.height != h || d_feature.width != w || d_feature.dim != n)
    throw Error("render_backward: feature gradient has the wrong shape");

  const std::size_t np = st.projected.size();
  const std::size_t stride = 9 + std::size_t(n); // mean(2) conic(3) opacity(1) color(3) feature(n)
  const std::size_t num_tiles = st.binning.tiles.size();
  const unsigned workers = std::max(1u, std::min<unsigned>(st.threads, unsigned(std::max<std::size_t>(num_tiles, 1))));
  std::vector<std::vector<T>> partial(workers, std::vector<T>(np * stride, T(0)));
  const Vec3<T> bg = st.background.template cast<T>();

  parallel_blocks(num_tiles, workers, [&](unsigned worker, std::size_t begin, std::size_t end) {
    auto& acc = partial[worker];
    std::vector<T> suffix_f(n);
    for (std::size_t t = begin; t < end; ++t) {
      const int tx = int(t % st.binning.tiles_x), ty = int(t / st.binning.tiles_x);
      const auto& list = st.binning.tiles[t];
      for (int py = ty * kTileSize; py < std::min(h, (ty + 1) * kTileSize); ++py)
        for (int px = tx * kTileSize; px < std::min(w, (tx + 1) * kTileSize); ++px) {
          const std::size_t pix = std::size_t(py) * w + px;
          const T t_final = st.final_transmittance[pix];
          const T* dc = d_image.at(py, px);
          const T* df = d_feature.at(py, px);
          const T bg_term = dc[0] * bg[0] + dc[1] * bg[1] + dc[2] * bg[2];
          T trans = t_final;
          Vec3<T> suffix_c = Vec3<T>::Zero();
          std::fill(suffix_f.begin(), suffix_f.end(), T(0));
          for (int e = st.last_entry[pix] - 1; e >= 0; --e) {
            const auto& entry = list[std::size_t(e)];
            const auto& p = st.projected[entry.projected_index];
            raster_detail::Splat<T> s;
            if (!raster_detail::evaluate(p, st.opacity[entry.projected_index], px, py, s)) continue;
            const T one_minus = T(1) - s.alpha;
            const T t_before = trans / one_minus;
            const T weight = s.alpha * t_before;
            const auto c = cloud.color(p.source_index);
            const auto f = cloud.feature(p.source_index);
            T* g = acc.data() + std::size_t(entry.projected_index) * stride;

            T d_alpha = T(0);
            for (int k = 0; k < 3; ++k) {
              d_alpha += dc[k] * (c[k] * t_before - suffix_c[k] / one_minus);
              g[6 + k] += weight * dc[k];
              suffix_c[k] += c[k] * weight;
            }
            d_alpha -= t_final * bg_term / one_minus;
            for (int k = 0; k < n; ++k) {
              d_alpha += df[k] * (f[k] * t_before - suffix_f[k] / one_minus);
              g[9 + k] += weight * df[k];
              suffix_f[k] += f[k] * weight;
            }
            trans = t_before;
            if (s.clamped) continue;

            g[5] += s.gauss * d_alpha;
            const T d_power = s.alpha * d_alpha;
            const T a = p.inv_cov2d(0, 0), b = p.inv_cov2d(0, 1), cc = p.inv_cov2d(1, 1);
            g[0] += d_power * (a * s.dx + b * s.dy);
            g[1] += d_power * (b * s.dx + cc * s.dy);
            g[2] += T(-0.5) * s.dx * s.dx * d_power;
            g[3] += -s.dx * s.dy * d_power;
            g[4] += T(-0.5) * s.dy * s.dy * d_power;
          }
        }
    }
  });

  for (unsigned k = 1; k < workers; ++k)
    for (std::size_t i = 0; i < partial[0].size(); ++i) partial[0][i] += partial[k][i];
  const auto& acc = partial[0];

  GradientBuffer<T> grads(cloud.size(), st.feature_dim);
  for (std::size_t k = 0; k < np; ++k) {
    const auto& p = st.projected[k];
    const std::size_t i = p.source_index;
    const T* g = acc.data() + k * stride;
    const T op = st.opacity[k];
    grads.opacity[i] = g[5] * op * (T(1) - op);
    for (int c = 0; c < 3; ++c) grads.color[3 * i + c] = g[6 + c];
    for (int c = 0; c < n; ++c) grads.feature[std::size_t(n) * i + c] = g[9 + c];

    // Conic gradient -> covariance gradient: dL/dCov = -Q G Q.
    Mat2<T> gq;
    gq << g[2], T(0.5) * g[3], T(0.5) * g[3], g[4];
    const Mat2<T> gcov = -p.inv_cov2d * gq * p.inv_cov2d;
    const Vec2<T> gmean(g[0], g[1]);
    grads.mean2d[2 * i] = gmean.x();
    grads.mean2d[2 * i + 1] = gmean.y();
    grads.cov2d[3 * i] = gcov(0, 0);
    grads.cov2d[3 * i + 1] = gcov(0, 1);
    grads.cov2d[3 * i + 2] = gcov(1, 1);
    grads.view_grad_accum[i] = gmean.norm();
    grads.view_hits[i] = 1;

    const auto pg = project_backward<T>(cloud.position(i), cloud.rotation(i), cloud.log_scale(i), view, gmean, gcov);
    for (int c = 0; c < 3; ++c) {
      grads.position[3 * i + c] = pg.position[c];
      grads.log_scale[3 * i + c] = pg.log_scale[c];
    }
    for (int c = 0; c < 4; ++c) grads.rotation[4 * i + c] = pg.rotation[c];
  }
  return grads;
}

} // namespace featsplat
