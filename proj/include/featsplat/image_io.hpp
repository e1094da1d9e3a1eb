#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "featsplat/gsplat_io.hpp"
#include "featsplat/oracle.hpp"
#include "featsplat/scene.hpp"

namespace featsplat {

inline std::uint8_t to_byte(float v) {
  if (!(v > 0.0f)) return 0;
  if (v >= 1.0f) return 255;
  return std::uint8_t(std::lround(v * 255.0f));
}

// ---- PNG -----------------------------------------------------------------

inline std::string encode_png_bytes(const std::vector<std::uint8_t>& pixels, int width, int height, int channels) {
  if (channels != 1 && channels != 3) throw Error("png: only gray and RGB images are supported");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(width);
  img.height = png_uint_32(height);
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data(), 0, nullptr))
    throw Error(std::string("png encode failed: ") + img.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, pixels.data(), 0, nullptr))
    throw Error(std::string("png encode failed: ") + img.message);
  out.resize(size);
  return out;
}

/// 8-bit PNG of a 1- or 3-channel image with values clamped to [0, 1].
inline std::string encode_png(const Image<float>& image) {
  std::vector<std::uint8_t> px(image.data.size());
  std::transform(image.data.begin(), image.data.end(), px.begin(), to_byte);
  return encode_png_bytes(px, image.width, image.height, image.dim);
}

inline std::string encode_label_png(const LabelMap& labels) {
  std::vector<std::uint8_t> px(labels.labels.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const int l = labels.labels[i];
    if (l < 0 || l > 255) throw Error("label png: label " + std::to_string(l) + " does not fit in 8 bits");
    px[i] = std::uint8_t(l);
  }
  return encode_png_bytes(px, labels.width, labels.height, 1);
}

struct RawPng {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

inline RawPng decode_png_raw(std::string_view bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw Error(std::string("png decode failed: ") + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  RawPng r{int(img.width), int(img.height), color ? 3 : 1, {}};
  r.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw Error(std::string("png decode failed: ") + img.message);
  }
  return r;
}

inline Image<float> decode_png(std::string_view bytes) {
  const RawPng raw = decode_png_raw(bytes);
  Image<float> out(raw.height, raw.width, raw.channels);
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) out.data[i] = float(raw.pixels[i]) / 255.0f;
  return out;
}

inline LabelMap decode_label_png(std::string_view bytes) {
  const RawPng raw = decode_png_raw(bytes);
  if (raw.channels != 1) throw Error("label png must be grayscale");
  LabelMap out(raw.height, raw.width);
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) out.labels[i] = raw.pixels[i];
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image<float>& image) {
  io_detail::write_file_atomic(path, encode_png(image));
}

inline Image<float> read_png(const std::filesystem::path& path) {
  try {
    return decode_png(io_detail::read_file(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

// ---- FTENS ---------------------------------------------------------------

/// "FTEN" | rank u32 | dims u32[rank] | f32 payload, row-major. Feature maps
/// are stored as rank 3 (H, W, C).
inline std::string encode_ftens(const FeatureMap<float>& map) {
  std::string out = "FTEN";
  io_detail::put_u32(out, 3);
  io_detail::put_u32(out, std::uint32_t(map.height));
  io_detail::put_u32(out, std::uint32_t(map.width));
  io_detail::put_u32(out, std::uint32_t(map.dim));
  out.append(reinterpret_cast<const char*>(map.data.data()), map.data.size() * sizeof(float));
  return out;
}

inline FeatureMap<float> decode_ftens(std::string_view bytes) {
  io_detail::Reader r(bytes);
  if (r.bytes(4) != "FTEN") throw Error("not an FTENS file (bad magic)");
  const std::uint32_t rank = r.u32();
  if (rank < 1 || rank > 3) throw Error("FTENS: unsupported rank " + std::to_string(rank));
  std::vector<std::uint32_t> dims;
  for (std::uint32_t i = 0; i < rank; ++i) dims.push_back(r.u32());
  while (dims.size() < 3) dims.push_back(1);
  const std::size_t n = std::size_t(dims[0]) * dims[1] * dims[2];
  if (r.remaining() != n * 4)
    throw Error("FTENS: payload holds " + std::to_string(r.remaining()) + " bytes, dims need " + std::to_string(n * 4));
  FeatureMap<float> out{int(dims[0]), int(dims[1]), int(dims[2])};
  for (auto& v : out.data) v = r.f32();
  return out;
}

// ---- text manifests ------------------------------------------------------

/// One line per view: index fx fy cx cy W H p00..p33 (world-to-camera, row-major).
inline std::string format_views(const std::vector<CameraView>& views) {
  std::string out;
  char buf[256];
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& v = views[i];
    std::snprintf(buf, sizeof buf, "%zu %.9g %.9g %.9g %.9g %d %d", i, v.fx, v.fy, v.cx, v.cy, v.width, v.height);
    out += buf;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        std::snprintf(buf, sizeof buf, " %.9g", v.world_to_camera(r, c));
        out += buf;
      }
    out += '\n';
  }
  return out;
}

inline std::vector<CameraView> parse_views(const std::string& text) {
  std::vector<CameraView> views;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ss(line);
    std::size_t index = 0;
    CameraView v;
    ss >> index >> v.fx >> v.fy >> v.cx >> v.cy >> v.width >> v.height;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) ss >> v.world_to_camera(r, c);
    if (!ss) throw Error("views.txt line " + std::to_string(lineno) + ": expected 23 fields");
    if (index != views.size()) throw Error("views.txt line " + std::to_string(lineno) + ": views out of order");
    if (!v.is_valid()) throw Error("views.txt line " + std::to_string(lineno) + ": invalid camera");
    views.push_back(v);
  }
  return views;
}

/// One line per entry: label followed by its embedding; the entry labelled
/// "background" (or the first one) is the background label.
inline std::string format_codebook(const Codebook& cb) {
  std::string out;
  char buf[32];
  for (std::size_t k = 0; k < cb.size(); ++k) {
    out += cb.labels[k];
    for (int i = 0; i < cb.dim; ++i) {
      std::snprintf(buf, sizeof buf, " %.9g", double(cb.embedding(k)[i]));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline Codebook parse_codebook(const std::string& text) {
  Codebook cb;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string label;
    if (!(ss >> label) || label[0] == '#') continue;
    std::vector<float> v;
    for (float x; ss >> x;) v.push_back(x);
    if (!ss.eof()) throw Error("codebook line " + std::to_string(lineno) + ": bad number");
    if (v.empty()) throw Error("codebook line " + std::to_string(lineno) + ": missing embedding");
    if (cb.dim == 0) cb.dim = int(v.size());
    if (int(v.size()) != cb.dim) throw Error("codebook line " + std::to_string(lineno) + ": dimension mismatch");
    if (cb.index_of(label) >= 0) throw Error("codebook line " + std::to_string(lineno) + ": duplicate label " + label);
    cb.labels.push_back(label);
    cb.embeddings.insert(cb.embeddings.end(), v.begin(), v.end());
  }
  if (cb.labels.empty()) throw Error("codebook is empty");
  cb.background_label = std::max(0, cb.index_of("background"));
  return cb;
}

inline std::string read_text(const std::filesystem::path& path) { return io_detail::read_file(path); }

// ---- dataset directories -------------------------------------------------

struct Dataset {
  std::vector<CameraView> views;
  std::vector<Image<float>> images;
  std::vector<FeatureMap<float>> features;
  std::vector<LabelMap> class_ids;
  std::optional<Codebook> codebook;
};

inline std::string frame_name(std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu.%s", i, ext);
  return buf;
}

/// views.txt, imgs/%04d.png, feats/%04d.ftens, classes/%04d.png and codebook.txt.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  for (const char* sub : {"imgs", "feats", "classes"}) fs::create_directories(dir / sub);
  io_detail::write_file_atomic(dir / "views.txt", format_views(ds.views));
  for (std::size_t i = 0; i < ds.views.size(); ++i) {
    write_png(dir / "imgs" / frame_name(i, "png"), ds.images.at(i));
    io_detail::write_file_atomic(dir / "feats" / frame_name(i, "ftens"), encode_ftens(ds.features.at(i)));
    if (i < ds.class_ids.size())
      io_detail::write_file_atomic(dir / "classes" / frame_name(i, "png"), encode_label_png(ds.class_ids[i]));
  }
  if (ds.codebook) io_detail::write_file_atomic(dir / "codebook.txt", format_codebook(*ds.codebook));
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(dir.string() + ": dataset directory not found");
  Dataset ds;
  ds.views = parse_views(io_detail::read_file(dir / "views.txt"));
  if (ds.views.empty()) throw Error(dir.string() + ": views.txt lists no views");
  for (std::size_t i = 0; i < ds.views.size(); ++i) {
    auto img = read_png(dir / "imgs" / frame_name(i, "png"));
    if (img.dim != 3 || img.width != ds.views[i].width || img.height != ds.views[i].height)
      throw Error(frame_name(i, "png") + ": image does not match its view");
    ds.images.push_back(std::move(img));
    const auto fpath = dir / "feats" / frame_name(i, "ftens");
    try {
      ds.features.push_back(decode_ftens(io_detail::read_file(fpath)));
    } catch (const Error& e) {
      throw Error(fpath.string() + ": " + e.what());
    }
    const auto cpath = dir / "classes" / frame_name(i, "png");
    if (fs::exists(cpath)) ds.class_ids.push_back(decode_label_png(io_detail::read_file(cpath)));
  }
  if (fs::exists(dir / "codebook.txt")) ds.codebook = parse_codebook(io_detail::read_file(dir / "codebook.txt"));
  return ds;
}

/// Teacher renders of every view of an oracle scene, as a dataset.
inline Dataset oracle_dataset(const OracleScene& scene, double noise_sigma = 0.0, std::uint64_t noise_seed = 0) {
  Dataset ds;
  ds.views = scene.views;
  ds.codebook = scene.codebook;
  for (std::size_t i = 0; i < scene.views.size(); ++i) {
    auto fr = teacher_render(scene, scene.views[i], noise_sigma, noise_seed + i);
    ds.images.push_back(std::move(fr.image));
    ds.features.push_back(std::move(fr.features));
    ds.class_ids.push_back(std::move(fr.class_ids));
  }
  return ds;
}

} // namespace featsplat
