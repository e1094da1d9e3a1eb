#pragma once

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "featsplat/core.hpp"
#include "featsplat/scene.hpp"

namespace featsplat {

/// Per-pixel linear channel map (a 1x1 convolution): out = W * in + b.
/// Lifts rendered N-dim features to the teacher's M dims.
template <class T> struct ChannelDecoder {
  int in_dim = 0;  // N
  int out_dim = 0; // M
  std::vector<T> weights; // M x N, row-major
  std::vector<T> bias;    // M

  ChannelDecoder() = default;
  ChannelDecoder(int n, int m) : in_dim(n), out_dim(m), weights(std::size_t(m) * n, T(0)), bias(m, T(0)) {}

  T& weight(int row, int col) { return weights[std::size_t(row) * in_dim + col]; }
  T weight(int row, int col) const { return weights[std::size_t(row) * in_dim + col]; }

  static ChannelDecoder identity(int n) {
    ChannelDecoder d(n, n);
    for (int i = 0; i < n; ++i) d.weight(i, i) = T(1);
    return d;
  }

  /// W ~ normal(0, 1/N), b = 0.
  static ChannelDecoder random(int n, int m, std::uint64_t seed) {
    ChannelDecoder d(n, m);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(n)));
    for (auto& w : d.weights) w = T(normal(rng));
    return d;
  }

  /// Decodes one vector; `out` must hold out_dim entries.
  void apply(const T* in, T* out) const {
    for (int r = 0; r < out_dim; ++r) {
      const T* row = weights.data() + std::size_t(r) * in_dim;
      T acc = bias[r];
      for (int c = 0; c < in_dim; ++c) acc += row[c] * in[c];
      out[r] = acc;
    }
  }

  template <class U> ChannelDecoder<U> cast() const {
    ChannelDecoder<U> d(in_dim, out_dim);
    std::copy(weights.begin(), weights.end(), d.weights.begin());
    std::copy(bias.begin(), bias.end(), d.bias.begin());
    return d;
  }

  friend bool operator==(const ChannelDecoder&, const ChannelDecoder&) = default;
};

template <class T> FeatureMap<T> decode(const FeatureMap<T>& map, const ChannelDecoder<T>& dec) {
  if (map.dim != dec.in_dim) throw Error("decode: feature map has " + std::to_string(map.dim) +
                                         " channels, decoder expects " + std::to_string(dec.in_dim));
  FeatureMap<T> out(map.height, map.width, dec.out_dim);
  for (std::size_t p = 0; p < map.pixels(); ++p)
    dec.apply(map.data.data() + p * map.dim, out.data.data() + p * dec.out_dim);
  return out;
}

template <class T> struct DecoderGradients {
  std::vector<T> d_weights; // M x N
  std::vector<T> d_bias;    // M
  FeatureMap<T> d_input;    // H x W x N
};

template <class T>
DecoderGradients<T> decode_backward(const FeatureMap<T>& upstream, const FeatureMap<T>& input,
                                    const ChannelDecoder<T>& dec) {
  if (upstream.dim != dec.out_dim || input.dim != dec.in_dim || upstream.height != input.height ||
      upstream.width != input.width)
    throw Error("decode_backward: shape mismatch");
  const int n = dec.in_dim, m = dec.out_dim;
  DecoderGradients<T> g{std::vector<T>(std::size_t(m) * n, T(0)), std::vector<T>(m, T(0)),
                        FeatureMap<T>(input.height, input.width, n)};
  for (std::size_t p = 0; p < input.pixels(); ++p) {
    const T* up = upstream.data.data() + p * m;
    const T* in = input.data.data() + p * n;
    T* din = g.d_input.data.data() + p * n;
    for (int r = 0; r < m; ++r) {
      const T u = up[r];
      if (u == T(0)) continue;
      g.d_bias[r] += u;
      T* dw = g.d_weights.data() + std::size_t(r) * n;
      const T* w = dec.weights.data() + std::size_t(r) * n;
      for (int c = 0; c < n; ++c) {
        dw[c] += u * in[c];
        din[c] += w[c] * u;
      }
    }
  }
  return g;
}

namespace detail {

struct BilinearTap {
  int i0, i1;
  double w; // weight of i1
};

// Corner-aligned sampling: output index 0 maps to input 0, last to last.
inline std::vector<BilinearTap> bilinear_taps(int in, int out) {
  std::vector<BilinearTap> taps(out);
  for (int o = 0; o < out; ++o) {
    double s = out > 1 ? double(o) * double(in - 1) / double(out - 1) : 0.0;
    int i0 = std::min(int(std::floor(s)), in - 1);
    int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, s - i0};
  }
  return taps;
}

} // namespace detail

template <class T> FeatureMap<T> resize_bilinear(const FeatureMap<T>& map, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw Error("resize_bilinear: target size must be positive");
  if (map.height == out_h && map.width == out_w) return map;
  auto ty = detail::bilinear_taps(map.height, out_h);
  auto tx = detail::bilinear_taps(map.width, out_w);
  FeatureMap<T> out(out_h, out_w, map.dim);
  for (int y = 0; y < out_h; ++y) {
    const T wy = T(ty[y].w);
    for (int x = 0; x < out_w; ++x) {
      const T wx = T(tx[x].w);
      const T* a = map.at(ty[y].i0, tx[x].i0);
      const T* b = map.at(ty[y].i0, tx[x].i1);
      const T* c = map.at(ty[y].i1, tx[x].i0);
      const T* d = map.at(ty[y].i1, tx[x].i1);
      T* o = out.at(y, x);
      for (int k = 0; k < map.dim; ++k) {
        // Difference form keeps constant maps exact.
        T top = a[k] + wx * (b[k] - a[k]);
        T bottom = c[k] + wx * (d[k] - c[k]);
        o[k] = top + wy * (bottom - top);
      }
    }
  }
  return out;
}

/// Transpose of resize_bilinear: scatters `upstream` back to an in_h x in_w grid.
template <class T> FeatureMap<T> resize_bilinear_backward(const FeatureMap<T>& upstream, int in_h, int in_w) {
  if (upstream.height == in_h && upstream.width == in_w) return upstream;
  auto ty = detail::bilinear_taps(in_h, upstream.height);
  auto tx = detail::bilinear_taps(in_w, upstream.width);
  FeatureMap<T> g(in_h, in_w, upstream.dim);
  for (int y = 0; y < upstream.height; ++y) {
    const T wy = T(ty[y].w);
    for (int x = 0; x < upstream.width; ++x) {
      const T wx = T(tx[x].w);
      const T* u = upstream.at(y, x);
      T* a = g.at(ty[y].i0, tx[x].i0);
      T* b = g.at(ty[y].i0, tx[x].i1);
      T* c = g.at(ty[y].i1, tx[x].i0);
      T* d = g.at(ty[y].i1, tx[x].i1);
      for (int k = 0; k < upstream.dim; ++k) {
        const T top = u[k] * (T(1) - wy);
        const T bottom = u[k] * wy;
        a[k] += top * (T(1) - wx);
        b[k] += top * wx;
        c[k] += bottom * (T(1) - wx);
        d[k] += bottom * wx;
      }
    }
  }
  return g;
}

/// Box-filter downsampling by an integer factor, falling back to bilinear
/// when the sizes do not divide.
template <class T> FeatureMap<T> downsample_area(const FeatureMap<T>& map, int out_h, int out_w) {
  if (map.height == out_h && map.width == out_w) return map;
  if (map.height % out_h != 0 || map.width % out_w != 0) return resize_bilinear(map, out_h, out_w);
  const int fy = map.height / out_h, fx = map.width / out_w;
  FeatureMap<T> out(out_h, out_w, map.dim);
  const T inv = T(1) / T(fy * fx);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      T* o = out.at(y, x);
      for (int dy = 0; dy < fy; ++dy)
        for (int dx = 0; dx < fx; ++dx) {
          const T* s = map.at(y * fy + dy, x * fx + dx);
          for (int k = 0; k < map.dim; ++k) o[k] += s[k];
        }
      for (int k = 0; k < map.dim; ++k) o[k] *= inv;
    }
  return out;
}

/// Decoder whose columns span the top-N principal directions (uncentered
/// second moment) of the teacher maps, sampled at every `stride`-th pixel.
template <class T>
ChannelDecoder<T> principal_decoder(const std::vector<FeatureMap<T>>& teacher, int n, int stride = 3) {
  if (teacher.empty()) throw Error("principal_decoder: no teacher maps");
  const int m = teacher.front().dim;
  if (n < 1 || n > m) throw Error("principal_decoder: need 1 <= N <= M");
  Eigen::MatrixXd moment = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd f(m);
  std::size_t count = 0;
  for (const auto& map : teacher) {
    if (map.dim != m) throw Error("principal_decoder: teacher maps disagree on dimension");
    for (std::size_t p = 0; p < map.pixels(); p += std::size_t(stride)) {
      for (int k = 0; k < m; ++k) f[k] = double(map.data[p * std::size_t(m) + std::size_t(k)]);
      moment.noalias() += f * f.transpose();
      ++count;
    }
  }
  moment /= double(std::max<std::size_t>(count, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(moment);
  ChannelDecoder<T> d(n, m);
  for (int c = 0; c < n; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(m - 1 - c);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    for (int r = 0; r < m; ++r) d.weight(r, c) = T(v[r]);
  }
  return d;
}

} // namespace featsplat
