#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "featsplat/core.hpp"
#include "featsplat/scene.hpp"

namespace featsplat {

template <class T> struct LossResult {
  T value = T(0);
  FeatureMap<T> gradient; // d value / d rendered
};

template <class T> struct PhotometricLoss {
  T value = T(0);
  T l1 = T(0);
  T dssim = T(0);
  Image<T> gradient;
};

namespace loss_detail {

inline constexpr int kWindow = 11;
inline constexpr double kWindowSigma = 1.5;
inline constexpr double kC1 = 0.01 * 0.01;
inline constexpr double kC2 = 0.03 * 0.03;

template <class T> std::array<T, kWindow> gaussian_kernel() {
  std::array<T, kWindow> k{};
  double sum = 0;
  std::array<double, kWindow> d{};
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    d[i] = std::exp(-x * x / (2 * kWindowSigma * kWindowSigma));
    sum += d[i];
  }
  for (int i = 0; i < kWindow; ++i) k[i] = T(d[i] / sum);
  return k;
}

// Separable zero-padded "same" filtering of one channel plane. The kernel is
// symmetric, so this is also its own adjoint.
template <class T> std::vector<T> filter(const std::vector<T>& src, int h, int w) {
  static const auto k = gaussian_kernel<T>();
  constexpr int r = kWindow / 2;
  std::vector<T> tmp(src.size(), T(0)), out(src.size(), T(0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T acc = T(0);
      for (int i = -r; i <= r; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < w) acc += k[i + r] * src[std::size_t(y) * w + xx];
      }
      tmp[std::size_t(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T acc = T(0);
      for (int i = -r; i <= r; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < h) acc += k[i + r] * tmp[std::size_t(yy) * w + x];
      }
      out[std::size_t(y) * w + x] = acc;
    }
  return out;
}

} // namespace loss_detail

/// Mean SSIM (11x11 Gaussian window, sigma 1.5) over all pixels and
/// channels, with its gradient w.r.t. `x` when `grad` is non-null.
template <class T> T ssim(const Image<T>& x, const Image<T>& y, Image<T>* grad = nullptr) {
  if (!x.same_shape(y)) throw Error("ssim: resolution mismatch");
  using namespace loss_detail;
  const int h = x.height, w = x.width, ch = x.dim;
  const std::size_t np = x.pixels();
  const T c1 = T(kC1), c2 = T(kC2);
  if (grad) *grad = Image<T>(h, w, ch);
  T total = T(0);
  std::vector<T> px(np), py(np), pxx(np), pyy(np), pxy(np);
  for (int c = 0; c < ch; ++c) {
    for (std::size_t p = 0; p < np; ++p) {
      const T a = x.data[p * ch + c], b = y.data[p * ch + c];
      px[p] = a;
      py[p] = b;
      pxx[p] = a * a;
      pyy[p] = b * b;
      pxy[p] = a * b;
    }
    const auto mx = filter(px, h, w), my = filter(py, h, w);
    const auto exx = filter(pxx, h, w), eyy = filter(pyy, h, w), exy = filter(pxy, h, w);
    std::vector<T> d_mu(np), d_exx(np), d_exy(np);
    for (std::size_t p = 0; p < np; ++p) {
      const T a1 = T(2) * mx[p] * my[p] + c1;
      const T a2 = T(2) * (exy[p] - mx[p] * my[p]) + c2;
      const T b1 = mx[p] * mx[p] + my[p] * my[p] + c1;
      const T b2 = (exx[p] - mx[p] * mx[p]) + (eyy[p] - my[p] * my[p]) + c2;
      const T s = a1 * a2 / (b1 * b2);
      total += s;
      if (!grad) continue;
      // Partial derivatives with the raw moments (mu_x, E[x^2], E[xy]) as inputs.
      d_mu[p] = (T(2) * my[p] * a2 - T(2) * my[p] * a1) / (b1 * b2) - s * (T(2) * mx[p] / b1 - T(2) * mx[p] / b2);
      d_exx[p] = -s / b2;
      d_exy[p] = T(2) * a1 / (b1 * b2);
    }
    if (!grad) continue;
    const auto g_mu = filter(d_mu, h, w), g_exx = filter(d_exx, h, w), g_exy = filter(d_exy, h, w);
    for (std::size_t p = 0; p < np; ++p)
      grad->data[p * ch + c] = g_mu[p] + T(2) * px[p] * g_exx[p] + py[p] * g_exy[p];
  }
  const T n = T(np * ch);
  if (grad)
    for (auto& g : grad->data) g /= n;
  return total / n;
}

/// (1 - lambda) * L1 + lambda * (1 - SSIM) / 2, with the gradient w.r.t. `rendered`.
template <class T> PhotometricLoss<T> photometric_loss(const Image<T>& rendered, const Image<T>& truth, T lambda) {
  if (!rendered.same_shape(truth)) throw Error("photometric_loss: resolution mismatch");
  PhotometricLoss<T> r;
  r.gradient = Image<T>(rendered.height, rendered.width, rendered.dim);
  const T n = T(rendered.data.size());
  T l1 = T(0);
  for (std::size_t i = 0; i < rendered.data.size(); ++i) {
    const T d = rendered.data[i] - truth.data[i];
    l1 += std::abs(d);
    r.gradient.data[i] = (d > T(0) ? T(1) : d < T(0) ? T(-1) : T(0)) * (T(1) - lambda) / n;
  }
  r.l1 = l1 / n;
  if (lambda > T(0)) {
    Image<T> g_ssim;
    const T s = ssim(rendered, truth, &g_ssim);
    r.dssim = (T(1) - s) / T(2);
    for (std::size_t i = 0; i < r.gradient.data.size(); ++i) r.gradient.data[i] -= lambda * T(0.5) * g_ssim.data[i];
  } else {
    r.dssim = (T(1) - ssim(rendered, truth)) / T(2);
  }
  r.value = (T(1) - lambda) * r.l1 + lambda * r.dssim;
  return r;
}

/// Mean absolute error over all H*W*M entries; subgradient 0 at ties.
template <class T> LossResult<T> feature_loss(const FeatureMap<T>& student, const FeatureMap<T>& teacher) {
  if (!student.same_shape(teacher)) throw Error("feature_loss: shape mismatch");
  LossResult<T> r;
  r.gradient = FeatureMap<T>(student.height, student.width, student.dim);
  const T n = T(student.data.size());
  T sum = T(0);
  for (std::size_t i = 0; i < student.data.size(); ++i) {
    const T d = student.data[i] - teacher.data[i];
    sum += std::abs(d);
    r.gradient.data[i] = d > T(0) ? T(1) / n : d < T(0) ? T(-1) / n : T(0);
  }
  r.value = sum / n;
  return r;
}

template <class T> double psnr(const Image<T>& a, const Image<T>& b) {
  if (!a.same_shape(b)) throw Error("psnr: resolution mismatch");
  double mse = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    mse += d * d;
  }
  mse /= double(a.data.size());
  if (mse <= 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

} // namespace featsplat
