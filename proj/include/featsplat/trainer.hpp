#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "featsplat/decoder.hpp"
#include "featsplat/loss.hpp"
#include "featsplat/rasterizer.hpp"
#include "featsplat/scene.hpp"

namespace featsplat {

struct TrainConfig {
  double gamma = 1.0;        // feature loss weight
  double lambda_dssim = 0.2; // D-SSIM share of the photometric loss
  double rgb_weight = 1.0;   // 0 switches the photometric term off entirely

  double lr_feature = 1e-3;
  double lr_decoder = 1e-4;
  double lr_position_init = 1.6e-4; // times scene extent
  double lr_position_final = 1.6e-6;
  double lr_rotation = 1e-3;
  double lr_scale = 5e-3;
  double lr_opacity = 5e-2;
  double lr_color = 2.5e-3;
  double lr_decay_ratio = 1.0; // rotation/scale/opacity/color lr at the end, relative to the start

  int iterations = 2000;
  int densify_interval = 100; // 0 disables refinement
  double densify_until = 0.6; // fraction of iterations
  double densify_grad_threshold = 2e-4;
  double size_threshold = 0.01;      // split vs clone, fraction of extent
  double max_scale_fraction = 0.5;   // prune when world scale exceeds this fraction of extent
  double opacity_prune_epsilon = 0.005;
  std::array<int, 2> resolution_steps{250, 500};

  std::uint64_t seed = 0;
  unsigned threads = 1;
  Eigen::Vector3d background = Eigen::Vector3d::Zero();

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0)) throw Error(std::string("train config: ") + name + " must be > 0");
    };
    if (!(gamma >= 0)) throw Error("train config: gamma must be >= 0");
    if (!(lambda_dssim >= 0 && lambda_dssim <= 1)) throw Error("train config: lambda must be in [0, 1]");
    if (!(rgb_weight >= 0)) throw Error("train config: rgb weight must be >= 0");
    positive(lr_feature, "lr_feature");
    positive(lr_decoder, "lr_decoder");
    positive(lr_position_init, "lr_position_init");
    positive(lr_position_final, "lr_position_final");
    positive(lr_rotation, "lr_rotation");
    positive(lr_scale, "lr_scale");
    positive(lr_opacity, "lr_opacity");
    positive(lr_color, "lr_color");
    positive(lr_decay_ratio, "lr_decay_ratio");
    if (iterations < 0) throw Error("train config: iterations must be >= 0");
    if (densify_interval < 0) throw Error("train config: densify interval must be >= 0");
  }

  double position_lr(int step, double extent) const {
    const double t = iterations > 0 ? std::clamp(double(step) / iterations, 0.0, 1.0) : 0.0;
    return extent * std::exp((1 - t) * std::log(lr_position_init) + t * std::log(lr_position_final));
  }

  double decay(int step) const {
    const double t = iterations > 0 ? std::clamp(double(step) / iterations, 0.0, 1.0) : 0.0;
    return std::exp(t * std::log(lr_decay_ratio));
  }

  double lr(Attribute a, int step, double extent) const {
    switch (a) {
    case Attribute::position: return position_lr(step, extent);
    case Attribute::rotation: return lr_rotation * decay(step);
    case Attribute::log_scale: return lr_scale * decay(step);
    case Attribute::opacity: return lr_opacity * decay(step);
    case Attribute::color: return lr_color * decay(step);
    case Attribute::feature: return lr_feature;
    }
    return 0;
  }
};

/// First/second moments mirroring every optimized array.
template <class T> struct AdamState {
  static constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int step = 0;
  std::array<std::vector<T>, 6> m, v;
  std::vector<T> m_dec_w, v_dec_w, m_dec_b, v_dec_b;

  static std::size_t slot(Attribute a) { return static_cast<std::size_t>(a); }

  void reset(const GaussianCloud<T>& cloud, const ChannelDecoder<T>* decoder) {
    step = 0;
    for (Attribute a : kAllAttributes) {
      m[slot(a)].assign(cloud.data(a).size(), T(0));
      v[slot(a)].assign(cloud.data(a).size(), T(0));
    }
    const std::size_t nw = decoder ? decoder->weights.size() : 0, nb = decoder ? decoder->bias.size() : 0;
    m_dec_w.assign(nw, T(0));
    v_dec_w.assign(nw, T(0));
    m_dec_b.assign(nb, T(0));
    v_dec_b.assign(nb, T(0));
  }

  bool matches(const GaussianCloud<T>& cloud) const {
    for (Attribute a : kAllAttributes)
      if (m[slot(a)].size() != cloud.data(a).size()) return false;
    return true;
  }
};

namespace train_detail {

template <class T>
void adam_update(std::vector<T>& param, const std::vector<T>& grad, std::vector<T>& m, std::vector<T>& v, double lr,
                 int step) {
  using A = AdamState<T>;
  const T b1 = T(A::beta1), b2 = T(A::beta2);
  const T c1 = T(1) - T(std::pow(A::beta1, step));
  const T c2 = T(1) - T(std::pow(A::beta2, step));
  const T step_size = T(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T mhat = m[i] / c1, vhat = v[i] / c2;
    param[i] -= step_size * mhat / (std::sqrt(vhat) + T(A::eps));
  }
}

} // namespace train_detail

struct StepMetrics {
  int iteration = 0;
  double total_loss = 0, rgb_loss = 0, feature_loss = 0, psnr = 0;
  std::size_t num_gaussians = 0;
};

class TrainingAborted : public Error {
public:
  using Error::Error;
};

/// One optimization step on one view: fused render, photometric + feature
/// losses, backward through resize/decoder/rasterizer, Adam on everything.
/// `gt_image` must match `view`'s resolution; `gt_features` may be larger.
template <class T>
StepMetrics train_step(GaussianCloud<T>& cloud, std::type_identity_t<ChannelDecoder<T>>* decoder, const CameraView& view,
                       const Image<T>& gt_image, const FeatureMap<T>& gt_features, const TrainConfig& config,
                       AdamState<T>& adam, GradientBuffer<T>* densify_stats = nullptr) {
  if (!adam.matches(cloud)) throw Error("train_step: optimizer state does not match the cloud");
  if (gt_image.height != view.height || gt_image.width != view.width || gt_image.dim != 3)
    throw Error("train_step: ground-truth image does not match the view");
  const int out_dim = decoder ? decoder->out_dim : int(cloud.feature_dim());
  if (decoder && decoder->in_dim != int(cloud.feature_dim()))
    throw Error("train_step: decoder input dimension does not match cloud features");
  if (gt_features.dim != out_dim)
    throw Error("train_step: teacher features have " + std::to_string(gt_features.dim) + " channels, expected " +
                std::to_string(out_dim));

  RenderSettings rs;
  rs.background = config.background;
  rs.threads = config.threads;
  auto res = render(cloud, view, rs);
  const auto& out = res.output;

  const T lambda = T(config.lambda_dssim), gamma = T(config.gamma), w_rgb = T(config.rgb_weight);
  auto rgb = photometric_loss(out.image, gt_image, lambda);
  const FeatureMap<T> decoded = decoder ? decode(out.feature_map, *decoder) : out.feature_map;
  const FeatureMap<T> student = resize_bilinear(decoded, gt_features.height, gt_features.width);
  auto feat = feature_loss(student, gt_features);

  const double total = double(w_rgb) * double(rgb.value) + double(gamma) * double(feat.value);
  if (!std::isfinite(total))
    throw TrainingAborted("non-finite loss at iteration " + std::to_string(adam.step + 1) +
                          " (rgb " + std::to_string(double(rgb.value)) + ", feature " +
                          std::to_string(double(feat.value)) + ")");

  Image<T> d_image(view.height, view.width, 3);
  if (w_rgb != T(0))
    for (std::size_t i = 0; i < d_image.data.size(); ++i) d_image.data[i] = w_rgb * rgb.gradient.data[i];

  FeatureMap<T> d_feature(view.height, view.width, int(cloud.feature_dim()));
  std::optional<DecoderGradients<T>> dec_grads;
  if (gamma != T(0)) {
    for (auto& g : feat.gradient.data) g *= gamma;
    FeatureMap<T> d_decoded = resize_bilinear_backward(feat.gradient, view.height, view.width);
    if (decoder) {
      dec_grads = decode_backward(d_decoded, out.feature_map, *decoder);
      d_feature = std::move(dec_grads->d_input);
    } else {
      d_feature = std::move(d_decoded);
    }
  }

  auto grads = render_backward(cloud, res.state, d_image, d_feature);

  adam.step += 1;
  const double extent = double(cloud.scene_extent());
  for (Attribute a : kAllAttributes)
    train_detail::adam_update(cloud.data(a), grads.data(a), adam.m[AdamState<T>::slot(a)],
                              adam.v[AdamState<T>::slot(a)], config.lr(a, adam.step, extent), adam.step);
  if (decoder) {
    std::vector<T> zw(decoder->weights.size(), T(0)), zb(decoder->bias.size(), T(0));
    const auto& gw = dec_grads ? dec_grads->d_weights : zw;
    const auto& gb = dec_grads ? dec_grads->d_bias : zb;
    train_detail::adam_update(decoder->weights, gw, adam.m_dec_w, adam.v_dec_w, config.lr_decoder, adam.step);
    train_detail::adam_update(decoder->bias, gb, adam.m_dec_b, adam.v_dec_b, config.lr_decoder, adam.step);
  }
  cloud.normalize_rotations();
  for (auto& c : cloud.data(Attribute::color)) c = std::clamp(c, T(0), T(1));

  if (densify_stats) densify_stats->accumulate_view_stats(grads);

  StepMetrics m;
  m.iteration = adam.step;
  m.total_loss = total;
  m.rgb_loss = double(rgb.value);
  m.feature_loss = double(feat.value);
  m.psnr = psnr(out.image, gt_image);
  m.num_gaussians = cloud.size();
  return m;
}

struct DensifyReport {
  std::size_t removed = 0, split = 0, cloned = 0;
};

/// Adaptive density control: prune transparent or oversized Gaussians, then
/// split large / clone small survivors whose view-space gradient exceeds the
/// threshold. New Gaussians start with zero Adam moments.
template <class T>
DensifyReport densify_and_prune(GaussianCloud<T>& cloud, const std::vector<T>& grad_norms, AdamState<T>& adam,
                                const TrainConfig& config, std::uint64_t seed) {
  if (grad_norms.size() != cloud.size()) throw Error("densify_and_prune: gradient statistics size mismatch");
  if (!adam.matches(cloud)) throw Error("densify_and_prune: optimizer state does not match the cloud");
  const std::size_t count = cloud.size();
  const T extent = cloud.scene_extent();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  DensifyReport report;
  std::vector<bool> keep(count, true);
  std::vector<Gaussian<T>> born;
  const T log_shrink = std::log(T(1.6));

  for (std::size_t i = 0; i < count; ++i) {
    const T max_scale = cloud.scale(i).maxCoeff();
    if (cloud.opacity(i) < T(config.opacity_prune_epsilon) || max_scale > T(config.max_scale_fraction) * extent) {
      keep[i] = false;
      ++report.removed;
      continue;
    }
    if (!(grad_norms[i] > T(config.densify_grad_threshold))) continue;
    const Gaussian<T> parent = cloud.at(i);
    if (max_scale > T(config.size_threshold) * extent) {
      const Mat3<T> r = quat_to_rotation<T>(parent.rotation.normalized());
      const Vec3<T> s = parent.scale();
      for (int child = 0; child < 2; ++child) {
        Gaussian<T> g = parent;
        const Vec3<T> z(T(normal(rng)), T(normal(rng)), T(normal(rng)));
        g.position = parent.position + r * s.cwiseProduct(z);
        g.log_scale = parent.log_scale.array() - log_shrink;
        born.push_back(std::move(g));
      }
      keep[i] = false;
      ++report.split;
    } else {
      born.push_back(parent);
      ++report.cloned;
    }
  }

  const std::size_t survivors = std::size_t(std::count(keep.begin(), keep.end(), true));
  if (survivors + born.size() == 0) throw Error("all Gaussians pruned");

  cloud.compact(keep);
  for (Attribute a : kAllAttributes) {
    const std::size_t s = cloud.stride(a);
    GaussianCloud<T>::compact_array(adam.m[AdamState<T>::slot(a)], s, keep);
    GaussianCloud<T>::compact_array(adam.v[AdamState<T>::slot(a)], s, keep);
  }
  for (const auto& g : born) cloud.push_back(g);
  for (Attribute a : kAllAttributes) {
    adam.m[AdamState<T>::slot(a)].resize(cloud.data(a).size(), T(0));
    adam.v[AdamState<T>::slot(a)].resize(cloud.data(a).size(), T(0));
  }
  return report;
}

template <class T> struct TrainingView {
  CameraView view;
  Image<T> image;
  FeatureMap<T> features;
};

template <class T> struct TrainResult {
  GaussianCloud<T> cloud;
  std::optional<ChannelDecoder<T>> decoder;
  std::vector<StepMetrics> log;
};

inline std::string metrics_csv_header() { return "iteration,total_loss,rgb_loss,feature_loss,psnr,num_gaussians\n"; }

inline std::string metrics_csv_row(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%zu\n", m.iteration, m.total_loss, m.rgb_loss,
                m.feature_loss, m.psnr, m.num_gaussians);
  return buf;
}

inline std::string metrics_csv(const std::vector<StepMetrics>& log) {
  std::string s = metrics_csv_header();
  for (const auto& m : log) s += metrics_csv_row(m);
  return s;
}

/// Render resolution for an iteration: quarter, then half, then full.
inline std::pair<int, int> scheduled_resolution(const TrainConfig& config, int iteration, int height, int width) {
  int div = 1;
  if (iteration < config.resolution_steps[0]) div = 4;
  else if (iteration < config.resolution_steps[1]) div = 2;
  return {std::max(1, height / div), std::max(1, width / div)};
}

struct TrainCallbacks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(int iteration, const GaussianCloud<float>&, const ChannelDecoder<float>*)> on_checkpoint;
  int checkpoint_interval = 0;
};

/// Full optimization loop over round-robin views.
template <class T>
TrainResult<T> run_training(const std::vector<TrainingView<T>>& dataset, GaussianCloud<T> cloud,
                            std::optional<std::type_identity_t<ChannelDecoder<T>>> decoder, const TrainConfig& config,
                            const TrainCallbacks& callbacks = {}) {
  config.validate();
  if (dataset.empty()) throw Error("run_training: need at least one training view");
  const int m = dataset.front().features.dim;
  for (const auto& v : dataset)
    if (v.features.dim != m) throw Error("run_training: teacher feature maps disagree on dimension");

  AdamState<T> adam;
  adam.reset(cloud, decoder ? &*decoder : nullptr);
  GradientBuffer<T> stats(cloud.size(), cloud.feature_dim());
  TrainResult<T> result;
  const int densify_stop = int(config.densify_until * config.iterations);

  for (int it = 0; it < config.iterations; ++it) {
    const auto& sample = dataset[std::size_t(it) % dataset.size()];
    const auto [h, w] = scheduled_resolution(config, it, sample.view.height, sample.view.width);
    const CameraView view = sample.view.resized(w, h);
    const Image<T> gt = downsample_area(sample.image, h, w);
    auto metrics =
        train_step(cloud, decoder ? &*decoder : nullptr, view, gt, sample.features, config, adam, &stats);
    result.log.push_back(metrics);
    if (callbacks.on_step) callbacks.on_step(metrics);

    const int done = it + 1;
    if (config.densify_interval > 0 && done % config.densify_interval == 0 && done <= densify_stop) {
      densify_and_prune(cloud, view_space_grad_norms(stats), adam, config, config.seed * 1000003ULL + done);
      stats = GradientBuffer<T>(cloud.size(), cloud.feature_dim());
    }
    if (callbacks.on_checkpoint && callbacks.checkpoint_interval > 0 && done % callbacks.checkpoint_interval == 0) {
      if constexpr (std::is_same_v<T, float>) callbacks.on_checkpoint(done, cloud, decoder ? &*decoder : nullptr);
    }
  }
  result.cloud = std::move(cloud);
  result.decoder = std::move(decoder);
  return result;
}

} // namespace featsplat
