#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "featsplat/decoder.hpp"
#include "featsplat/scene.hpp"

// GSPLAT layout (little-endian):
//   "GSPL" | version u32 = 1 | count u32 | feature_dim u32
//   count records of f32: position(3) rotation(4) log_scale(3) opacity_logit(1) color(3) feature(N)
//   optional trailer: "DEC1" | M u32 | N u32 | M*N weights f32 | M bias f32

namespace featsplat {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace io_detail {

inline void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
inline void put_f32(std::string& out, float v) { out.append(reinterpret_cast<const char*>(&v), 4); }

class Reader {
public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n) const {
    if (remaining() < n)
      throw Error("unexpected end of file at offset " + std::to_string(pos_) + " (need " + std::to_string(n) +
                  " bytes, have " + std::to_string(remaining()) + ")");
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  float f32() {
    need(4);
    float v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }

private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a sibling temp file and renames it into place, so a failure
// never leaves a partial file at `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw Error("write failed for " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error("cannot rename temp file onto " + path.string());
  }
}

} // namespace io_detail

struct LoadedCloud {
  GaussianCloud<float> cloud;
  std::optional<ChannelDecoder<float>> decoder;
};

inline std::string encode_gsplat(const GaussianCloud<float>& cloud, const ChannelDecoder<float>* decoder = nullptr) {
  if (cloud.empty()) throw Error("empty cloud");
  std::string out;
  const std::size_t n = cloud.feature_dim();
  out.reserve(16 + cloud.size() * (17 + n) * 4);
  out.append("GSPL", 4);
  io_detail::put_u32(out, 1);
  io_detail::put_u32(out, static_cast<std::uint32_t>(cloud.size()));
  io_detail::put_u32(out, static_cast<std::uint32_t>(n));
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (Attribute a : kAllAttributes) {
      const std::size_t s = cloud.stride(a);
      const float* src = cloud.data(a).data() + i * s;
      for (std::size_t k = 0; k < s; ++k) {
        if (!std::isfinite(src[k]))
          throw Error("record " + std::to_string(i) + ": non-finite " + attribute_name(a) +
                      " (compact edited clouds before saving)");
        io_detail::put_f32(out, src[k]);
      }
    }
  if (decoder) {
    if (std::size_t(decoder->in_dim) != n) throw Error("decoder input dimension does not match cloud feature_dim");
    out.append("DEC1", 4);
    io_detail::put_u32(out, static_cast<std::uint32_t>(decoder->out_dim));
    io_detail::put_u32(out, static_cast<std::uint32_t>(decoder->in_dim));
    for (float w : decoder->weights) io_detail::put_f32(out, w);
    for (float b : decoder->bias) io_detail::put_f32(out, b);
  }
  return out;
}

inline void save_cloud(const GaussianCloud<float>& cloud, const std::filesystem::path& path,
                       const ChannelDecoder<float>* decoder = nullptr) {
  io_detail::write_file_atomic(path, encode_gsplat(cloud, decoder));
}

inline LoadedCloud decode_gsplat(std::string_view bytes) {
  io_detail::Reader r(bytes);
  if (r.bytes(4) != "GSPL") throw Error("bad magic at offset 0 (expected \"GSPL\")");
  const std::uint32_t version = r.u32();
  if (version != 1) throw Error("unsupported GSPLAT version " + std::to_string(version) + " at offset 4");
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  if (count == 0) throw Error("empty cloud (count = 0 at offset 8)");

  LoadedCloud result{GaussianCloud<float>(dim), std::nullopt};
  auto& cloud = result.cloud;
  for (Attribute a : kAllAttributes) cloud.data(a).resize(std::size_t(count) * cloud.stride(a));

  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t record_offset = r.offset();
    auto fail = [&](const std::string& what) {
      throw Error("record " + std::to_string(i) + " (offset " + std::to_string(record_offset) + "): " + what);
    };
    for (Attribute a : kAllAttributes) {
      const std::size_t s = cloud.stride(a);
      float* dst = cloud.data(a).data() + std::size_t(i) * s;
      for (std::size_t k = 0; k < s; ++k) {
        dst[k] = r.f32();
        if (!std::isfinite(dst[k])) fail(std::string("non-finite ") + attribute_name(a));
      }
    }
    const float qn = cloud.rotation(i).norm();
    if (std::abs(qn - 1.0f) > 1e-4f) fail("rotation is not a unit quaternion (norm " + std::to_string(qn) + ")");
    const auto c = cloud.color(i);
    if ((c.array() < 0.0f).any() || (c.array() > 1.0f).any()) fail("color outside [0, 1]");
  }

  if (r.remaining() > 0) {
    const std::size_t trailer_offset = r.offset();
    if (r.bytes(4) != "DEC1") throw Error("unknown trailer at offset " + std::to_string(trailer_offset));
    const std::uint32_t m = r.u32();
    const std::uint32_t n = r.u32();
    if (n != dim)
      throw Error("decoder dimension mismatch at offset " + std::to_string(trailer_offset) + ": N = " +
                  std::to_string(n) + " but feature_dim = " + std::to_string(dim));
    ChannelDecoder<float> dec{int(n), int(m)};
    for (auto& w : dec.weights) {
      const std::size_t off = r.offset();
      w = r.f32();
      if (!std::isfinite(w)) throw Error("non-finite decoder weight at offset " + std::to_string(off));
    }
    for (auto& b : dec.bias) {
      const std::size_t off = r.offset();
      b = r.f32();
      if (!std::isfinite(b)) throw Error("non-finite decoder bias at offset " + std::to_string(off));
    }
    if (r.remaining() != 0) throw Error("trailing bytes after decoder at offset " + std::to_string(r.offset()));
    result.decoder = std::move(dec);
  }
  cloud.set_scene_extent(compute_scene_extent(cloud));
  return result;
}

inline LoadedCloud load_cloud(const std::filesystem::path& path) {
  try {
    return decode_gsplat(io_detail::read_file(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

} // namespace featsplat
