#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "featsplat/decoder.hpp"
#include "featsplat/gsplat_io.hpp"
#include "featsplat/image_io.hpp"
#include "featsplat/oracle.hpp"
#include "featsplat/prompt_edit.hpp"
#include "featsplat/rasterizer.hpp"
#include "featsplat/viz.hpp"

namespace featsplat {

/// Immutable view of a model; cheap to copy, safe to read from any thread.
struct ModelSnapshot {
  std::shared_ptr<const GaussianCloud<float>> cloud;
  std::shared_ptr<const ChannelDecoder<float>> decoder; // may be null
  std::shared_ptr<const Codebook> codebook;

  const ChannelDecoder<float>* decoder_ptr() const { return decoder.get(); }
};

// ---- poses and views -----------------------------------------------------

inline constexpr double kDefaultHalfFov = 25.0 * M_PI / 180.0;

inline double default_focal(int width) { return 0.5 * width / std::tan(kDefaultHalfFov); }

/// 16 comma-separated row-major world-to-camera scalars.
inline Mat4d parse_pose(const std::string& text) {
  std::vector<double> v;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error("pose: bad number '" + item + "'");
    }
  }
  if (v.size() != 16) throw Error("pose: expected 16 comma-separated values, got " + std::to_string(v.size()));
  Mat4d m;
  for (int i = 0; i < 16; ++i) m(i / 4, i % 4) = v[std::size_t(i)];
  return m;
}

inline std::string format_pose(const Mat4d& m) {
  std::string out;
  char buf[32];
  for (int i = 0; i < 16; ++i) {
    std::snprintf(buf, sizeof buf, "%s%.9g", i ? "," : "", m(i / 4, i % 4));
    out += buf;
  }
  return out;
}

/// Pinhole view with the principal point at the image center; focal <= 0
/// selects the default field of view.
inline CameraView view_from_pose(const Mat4d& pose, int width, int height, double focal = 0.0) {
  if (width <= 0 || height <= 0 || width > 4096 || height > 4096) throw Error("view: image size out of range");
  CameraView v;
  v.width = width;
  v.height = height;
  v.fx = v.fy = focal > 0 ? focal : default_focal(width);
  v.cx = 0.5 * (width - 1);
  v.cy = 0.5 * (height - 1);
  v.world_to_camera = pose;
  v.validate();
  return v;
}

// ---- shared render products ----------------------------------------------

/// Rendered features mapped into codebook space.
inline FeatureMap<float> query_feature_map(const RenderOutput<float>& out, const ChannelDecoder<float>* decoder) {
  return decoder ? decode(out.feature_map, *decoder) : out.feature_map;
}

inline RenderOutput<float> render_model(const ModelSnapshot& m, const CameraView& view,
                                        const Eigen::Vector3d& background = Eigen::Vector3d::Zero(),
                                        unsigned threads = 1) {
  RenderSettings rs;
  rs.background = background;
  rs.threads = threads;
  return render(*m.cloud, view, rs).output;
}

struct RenderProducts {
  Image<float> rgb;
  Image<float> feature_viz;
  SegmentationResult segmentation;
};

/// Everything the CLI `render` command and the service endpoints emit for one pose.
inline RenderProducts render_products(const ModelSnapshot& m, const CameraView& view,
                                      const Eigen::Vector3d& background = Eigen::Vector3d::Zero(),
                                      unsigned threads = 1) {
  const auto out = render_model(m, view, background, threads);
  const auto feats = query_feature_map(out, m.decoder_ptr());
  RenderProducts p;
  p.rgb = out.image;
  try {
    p.feature_viz = visualize_features(feats, fit_pca(feats));
  } catch (const Error&) {
    p.feature_viz = Image<float>(view.height, view.width, 3); // nothing to show
  }
  p.segmentation = segmentation_map(out.image, feats, *m.codebook);
  return p;
}

// ---- prompts ---------------------------------------------------------------

struct PromptRequest {
  std::optional<std::array<int, 2>> point;
  std::optional<std::array<int, 4>> box; // x0, y0, x1, y1
  std::vector<std::string> labels;
  std::optional<CameraView> view; // required for point and box prompts
  SelectionMode mode = SelectionMode::hybrid;
  double threshold = 0.5;
};

/// Resolves a prompt to a Gaussian selection. Label prompts score against the
/// whole codebook; pixel prompts score the picked feature against the
/// complement of the cloud's features.
inline EditSelection run_prompt(const ModelSnapshot& m, const PromptRequest& req, unsigned threads = 1) {
  const int kinds = int(req.point.has_value()) + int(req.box.has_value()) + int(!req.labels.empty());
  if (kinds != 1) throw Error("prompt: give exactly one of point, box or labels");
  if (!req.labels.empty()) {
    const auto cols = resolve_labels(*m.codebook, req.labels);
    return select_labels(*m.cloud, m.decoder_ptr(), *m.codebook, cols, req.mode, req.threshold);
  }
  if (!req.view) throw Error("prompt: pixel prompts need a pose");
  const auto out = render_model(m, *req.view, Eigen::Vector3d::Zero(), threads);
  const auto feats = query_feature_map(out, m.decoder_ptr());
  const auto q = req.point ? point_query(feats, (*req.point)[0], (*req.point)[1])
                           : box_query(feats, (*req.box)[0], (*req.box)[1], (*req.box)[2], (*req.box)[3]);
  double n = 0;
  for (float v : q) n += double(v) * v;
  if (n == 0) throw Error("prompt: the picked pixel has no feature (empty space)");
  const auto scores = score_gaussians(*m.cloud, m.decoder_ptr(), {q, others_query(*m.cloud, m.decoder_ptr(), q)});
  return select(scores, {0}, req.mode, req.threshold);
}

// ---- session ---------------------------------------------------------------

/// The service's single working model: a copy-on-write cloud with a bounded
/// undo history. Reads take a snapshot; mutations are serialized.
class Session {
public:
  static constexpr std::size_t kUndoDepth = 32;

  Session(GaussianCloud<float> cloud, std::optional<ChannelDecoder<float>> decoder, Codebook codebook,
          std::filesystem::path checkpoint = {})
      : checkpoint_(std::move(checkpoint)) {
    const int qdim = decoder ? decoder->out_dim : int(cloud.feature_dim());
    if (qdim != codebook.dim)
      throw Error("codebook dimension " + std::to_string(codebook.dim) + " does not match the model's query space (" +
                  std::to_string(qdim) + ")");
    current_.cloud = std::make_shared<const GaussianCloud<float>>(std::move(cloud));
    if (decoder) current_.decoder = std::make_shared<const ChannelDecoder<float>>(std::move(*decoder));
    current_.codebook = std::make_shared<const Codebook>(std::move(codebook));
  }

  ModelSnapshot snapshot() const {
    std::lock_guard lock(state_mu_);
    return current_;
  }

  std::size_t undo_depth() const {
    std::lock_guard lock(state_mu_);
    return undo_.size();
  }

  const std::filesystem::path& checkpoint() const { return checkpoint_; }

  /// Applies `op` to the selection and pushes the previous cloud on the undo stack.
  EditSelection edit(const PromptRequest& target, const EditOp& op, unsigned threads = 1) {
    std::lock_guard serial(edit_mu_);
    const ModelSnapshot base = snapshot();
    EditSelection sel = run_prompt(base, target, threads);
    auto edited = std::make_shared<const GaussianCloud<float>>(apply_edit(*base.cloud, sel, op));
    std::lock_guard lock(state_mu_);
    undo_.push_back(current_.cloud);
    if (undo_.size() > kUndoDepth) undo_.pop_front();
    current_.cloud = std::move(edited);
    return sel;
  }

  /// Restores the cloud from before the last edit; false when there is none.
  bool undo() {
    std::lock_guard serial(edit_mu_);
    std::lock_guard lock(state_mu_);
    if (undo_.empty()) return false;
    current_.cloud = undo_.back();
    undo_.pop_back();
    return true;
  }

  /// Writes the working cloud (fully transparent Gaussians dropped) with its decoder.
  std::filesystem::path save(const std::filesystem::path& path = {}) const {
    const auto target = path.empty() ? checkpoint_ : path;
    if (target.empty()) throw Error("save: no output path");
    const ModelSnapshot m = snapshot();
    const auto compacted = compact_transparent(*m.cloud);
    if (compacted.empty()) throw Error("save: every Gaussian has been removed");
    save_cloud(compacted, target, m.decoder_ptr());
    return target;
  }

private:
  mutable std::mutex state_mu_;
  std::mutex edit_mu_;
  ModelSnapshot current_;
  std::deque<std::shared_ptr<const GaussianCloud<float>>> undo_;
  std::filesystem::path checkpoint_;
};

/// Codebook stored beside a checkpoint: `<stem>.codebook.txt`, else `codebook.txt`.
inline std::filesystem::path codebook_path_for(const std::filesystem::path& checkpoint) {
  auto sibling = checkpoint;
  sibling.replace_extension(".codebook.txt");
  if (std::filesystem::exists(sibling)) return sibling;
  return checkpoint.parent_path() / "codebook.txt";
}

} // namespace featsplat
