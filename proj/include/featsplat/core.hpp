#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

namespace featsplat {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

template <class T> using Vec2 = Eigen::Matrix<T, 2, 1>;
template <class T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <class T> using Vec4 = Eigen::Matrix<T, 4, 1>;
template <class T> using Mat2 = Eigen::Matrix<T, 2, 2>;
template <class T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <class T> using Mat23 = Eigen::Matrix<T, 2, 3>;
using Mat4d = Eigen::Matrix<double, 4, 4, Eigen::RowMajor>;

template <class T> inline T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

template <class T> inline T logit(T p) { return std::log(p / (T(1) - p)); }

inline unsigned resolve_threads(unsigned requested) {
  if (requested != 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

// Static block partition of [0, count) over `threads` workers. The worker
// index passed to `fn` is stable, so per-worker reductions done in worker
// order are deterministic for a fixed thread count.
template <class Fn> void parallel_blocks(std::size_t count, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  if (threads == 1) {
    fn(0u, std::size_t{0}, count);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned w = 0; w < threads; ++w) {
    std::size_t begin = count * w / threads;
    std::size_t end = count * (w + 1) / threads;
    pool.emplace_back([&fn, w, begin, end] { fn(w, begin, end); });
  }
  for (auto& t : pool) t.join();
}

} // namespace featsplat
