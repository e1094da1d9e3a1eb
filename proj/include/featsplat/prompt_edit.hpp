#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "featsplat/decoder.hpp"
#include "featsplat/oracle.hpp"
#include "featsplat/scene.hpp"

namespace featsplat {

/// Row-major |cloud| x C softmax probabilities over a label set.
struct ScoreMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> probs;
  double operator()(std::size_t i, std::size_t j) const { return probs[i * cols + j]; }
};

enum class SelectionMode { soft, hard, hybrid };

inline const char* to_string(SelectionMode m) {
  switch (m) {
  case SelectionMode::soft: return "soft";
  case SelectionMode::hard: return "hard";
  case SelectionMode::hybrid: return "hybrid";
  }
  return "?";
}

inline SelectionMode parse_selection_mode(const std::string& s) {
  if (s == "soft") return SelectionMode::soft;
  if (s == "hard") return SelectionMode::hard;
  if (s == "hybrid") return SelectionMode::hybrid;
  throw Error("unknown selection mode '" + s + "' (expected soft, hard or hybrid)");
}

struct EditSelection {
  std::vector<bool> mask;
  SelectionMode mode = SelectionMode::soft;
  double threshold = 0.5;

  std::size_t count() const { return std::size_t(std::count(mask.begin(), mask.end(), true)); }
};

/// Feature of Gaussian i in query space: through the decoder when present.
inline std::vector<double> query_space_feature(const GaussianCloud<float>& cloud, const ChannelDecoder<float>* decoder,
                                               std::size_t i) {
  const auto f = cloud.feature(i);
  if (!decoder) return {f.begin(), f.end()};
  std::vector<float> out(decoder->out_dim);
  decoder->apply(f.data(), out.data());
  return {out.begin(), out.end()};
}

/// Cosine similarity of each Gaussian against each query, softmaxed per row.
/// A zero-norm feature (or query) scores 0, so such rows are uniform.
inline ScoreMatrix score_gaussians(const GaussianCloud<float>& cloud, const ChannelDecoder<float>* decoder,
                                   const std::vector<std::vector<float>>& queries) {
  if (queries.size() < 2) throw Error("softmax requires a label set");
  const std::size_t dim = decoder ? std::size_t(decoder->out_dim) : cloud.feature_dim();
  std::vector<std::vector<double>> unit_q;
  for (const auto& q : queries) {
    if (q.size() != dim)
      throw Error("query dimension " + std::to_string(q.size()) + " does not match feature space " +
                  std::to_string(dim));
    double n = 0;
    for (float v : q) n += double(v) * v;
    n = std::sqrt(n);
    std::vector<double> u(dim, 0.0);
    if (n > 0)
      for (std::size_t k = 0; k < dim; ++k) u[k] = q[k] / n;
    unit_q.push_back(std::move(u));
  }

  ScoreMatrix s{cloud.size(), queries.size(), std::vector<double>(cloud.size() * queries.size())};
  std::vector<double> cos(queries.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto f = query_space_feature(cloud, decoder, i);
    double fn = 0;
    for (double v : f) fn += v * v;
    fn = std::sqrt(fn);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < queries.size(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < dim; ++k) dot += f[k] * unit_q[j][k];
      cos[j] = fn > 0 ? dot / fn : 0.0;
      mx = std::max(mx, cos[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < queries.size(); ++j) z += std::exp(cos[j] - mx);
    for (std::size_t j = 0; j < queries.size(); ++j) s.probs[i * s.cols + j] = std::exp(cos[j] - mx) / z;
  }
  return s;
}

inline void check_labels(const ScoreMatrix& s, const std::vector<int>& labels) {
  if (labels.empty()) throw Error("selection needs at least one label");
  for (int l : labels)
    if (l < 0 || std::size_t(l) >= s.cols) throw Error("label column " + std::to_string(l) + " out of range");
}

/// Threshold on the label column (max over the columns of a label set).
inline EditSelection select_soft(const ScoreMatrix& s, const std::vector<int>& labels, double th) {
  check_labels(s, labels);
  EditSelection sel{std::vector<bool>(s.rows, false), SelectionMode::soft, th};
  for (std::size_t i = 0; i < s.rows; ++i) {
    double best = -1;
    for (int l : labels) best = std::max(best, s(i, std::size_t(l)));
    sel.mask[i] = best >= th;
  }
  return sel;
}

/// Row argmax (ties to the lowest column) must be one of the labels.
inline EditSelection select_hard(const ScoreMatrix& s, const std::vector<int>& labels) {
  check_labels(s, labels);
  EditSelection sel{std::vector<bool>(s.rows, false), SelectionMode::hard, 0.0};
  for (std::size_t i = 0; i < s.rows; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < s.cols; ++j)
      if (s(i, j) > s(i, arg)) arg = j;
    sel.mask[i] = std::find(labels.begin(), labels.end(), int(arg)) != labels.end();
  }
  return sel;
}

inline EditSelection select_hybrid(const ScoreMatrix& s, const std::vector<int>& labels, double th) {
  auto soft = select_soft(s, labels, th);
  const auto hard = select_hard(s, labels);
  for (std::size_t i = 0; i < soft.mask.size(); ++i) soft.mask[i] = soft.mask[i] || hard.mask[i];
  soft.mode = SelectionMode::hybrid;
  return soft;
}

inline EditSelection select(const ScoreMatrix& s, const std::vector<int>& labels, SelectionMode mode, double th) {
  switch (mode) {
  case SelectionMode::soft: return select_soft(s, labels, th);
  case SelectionMode::hard: return select_hard(s, labels);
  case SelectionMode::hybrid: return select_hybrid(s, labels, th);
  }
  throw Error("bad selection mode");
}

enum class EditKind { extract, remove, recolor };

using RecolorFn = std::function<Eigen::Vector3f(const Eigen::Vector3f&)>;

struct EditOp {
  EditKind kind = EditKind::remove;
  RecolorFn recolor; // required for EditKind::recolor
  std::string recolor_spec;
};

/// Opacity logit marking an edited-out Gaussian; renders as alpha = 0.
inline constexpr float kTransparentLogit = -std::numeric_limits<float>::infinity();

/// Returns an edited copy; the input cloud is untouched. Only opacity (extract,
/// delete) or color (recolor) change.
inline GaussianCloud<float> apply_edit(const GaussianCloud<float>& cloud, const EditSelection& selection,
                                       const EditOp& op) {
  if (selection.mask.size() != cloud.size()) throw Error("apply_edit: selection length does not match cloud");
  GaussianCloud<float> out = cloud;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const bool sel = selection.mask[i];
    switch (op.kind) {
    case EditKind::extract:
      if (!sel) out.opacity_logit(i) = kTransparentLogit;
      break;
    case EditKind::remove:
      if (sel) out.opacity_logit(i) = kTransparentLogit;
      break;
    case EditKind::recolor:
      if (sel) {
        if (!op.recolor) throw Error("apply_edit: recolor needs a color function");
        const Eigen::Vector3f c = op.recolor(Eigen::Vector3f(cloud.color(i)));
        out.color(i) = c.cwiseMax(0.0f).cwiseMin(1.0f);
      }
      break;
    }
  }
  return out;
}

/// Physically removes Gaussians whose opacity is exactly zero.
inline GaussianCloud<float> compact_transparent(const GaussianCloud<float>& cloud) {
  std::vector<bool> keep(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) keep[i] = cloud.opacity(i) > 0.0f;
  GaussianCloud<float> out = cloud;
  out.compact(keep);
  return out;
}

// ---- prompts -------------------------------------------------------------

inline std::vector<float> normalized(std::vector<float> v) {
  double n = 0;
  for (float x : v) n += double(x) * x;
  n = std::sqrt(n);
  if (n > 0)
    for (auto& x : v) x = float(x / n);
  return v;
}

/// Query vector of a point prompt: the feature at pixel (x, y).
inline std::vector<float> point_query(const FeatureMap<float>& map, int x, int y) {
  if (x < 0 || y < 0 || x >= map.width || y >= map.height) throw Error("point prompt outside the image");
  const float* f = map.at(y, x);
  return normalized({f, f + map.dim});
}

/// Query vector of a box prompt: mean feature over the inclusive rectangle, unit-normalized.
inline std::vector<float> box_query(const FeatureMap<float>& map, int x0, int y0, int x1, int y1) {
  if (x0 > x1) std::swap(x0, x1);
  if (y0 > y1) std::swap(y0, y1);
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, map.width - 1);
  y1 = std::min(y1, map.height - 1);
  if (x0 > x1 || y0 > y1) throw Error("box prompt outside the image");
  std::vector<double> acc(map.dim, 0.0);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      for (int k = 0; k < map.dim; ++k) acc[k] += map(y, x, k);
  std::vector<float> out(map.dim);
  const double cnt = double(x1 - x0 + 1) * double(y1 - y0 + 1);
  for (int k = 0; k < map.dim; ++k) out[k] = float(acc[k] / cnt);
  return normalized(std::move(out));
}

/// Complement query for single-target prompts: the mean unit feature
/// direction of the cloud with the query component removed. Falls back to
/// the negated query when that is degenerate.
inline std::vector<float> others_query(const GaussianCloud<float>& cloud, const ChannelDecoder<float>* decoder,
                                       const std::vector<float>& query) {
  const std::vector<float> q = normalized(query);
  std::vector<double> mean(q.size(), 0.0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!(cloud.opacity(i) > 0.0f)) continue;
    auto f = query_space_feature(cloud, decoder, i);
    double n = 0;
    for (double v : f) n += v * v;
    n = std::sqrt(n);
    if (n == 0) continue;
    for (std::size_t k = 0; k < f.size(); ++k) mean[k] += f[k] / n;
  }
  double along = 0;
  for (std::size_t k = 0; k < q.size(); ++k) along += mean[k] * q[k];
  std::vector<float> o(q.size());
  double n = 0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    o[k] = float(mean[k] - along * q[k]);
    n += double(o[k]) * o[k];
  }
  if (std::sqrt(n) < 1e-6 * std::max<double>(1.0, double(cloud.size()))) {
    for (std::size_t k = 0; k < q.size(); ++k) o[k] = -q[k];
    return o;
  }
  return normalized(std::move(o));
}

// ---- edit scripts --------------------------------------------------------

struct EditCommand {
  EditOp op;
  std::vector<std::string> labels;
  SelectionMode mode = SelectionMode::hybrid;
  double threshold = 0.5;
};

/// Parses "recolor=r,g,b", "recolor=invert" or "recolor=gray".
inline EditOp parse_recolor(const std::string& spec) {
  EditOp op;
  op.kind = EditKind::recolor;
  op.recolor_spec = spec;
  if (spec == "invert") {
    op.recolor = [](const Eigen::Vector3f& c) -> Eigen::Vector3f { return Eigen::Vector3f::Ones() - c; };
  } else if (spec == "gray") {
    op.recolor = [](const Eigen::Vector3f& c) -> Eigen::Vector3f {
      return Eigen::Vector3f::Constant(0.299f * c[0] + 0.587f * c[1] + 0.114f * c[2]);
    };
  } else if (spec == "identity") {
    op.recolor = [](const Eigen::Vector3f& c) -> Eigen::Vector3f { return c; };
  } else {
    Eigen::Vector3f rgb;
    char c1 = 0, c2 = 0;
    std::istringstream ss(spec);
    if (!(ss >> rgb[0] >> c1 >> rgb[1] >> c2 >> rgb[2]) || c1 != ',' || c2 != ',')
      throw Error("bad recolor spec '" + spec + "' (expected r,g,b or invert, gray, identity)");
    op.recolor = [rgb](const Eigen::Vector3f&) -> Eigen::Vector3f { return rgb; };
  }
  return op;
}

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

/// `<op> <label[,label...]> [soft|hard|hybrid] [threshold]`, one per line;
/// blank lines and '#' comments are ignored.
inline std::vector<EditCommand> parse_edit_script(const std::string& text) {
  std::vector<EditCommand> cmds;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string op, labels, mode;
    if (!(ss >> op)) continue;
    auto fail = [&](const std::string& what) { throw Error("edit script line " + std::to_string(lineno) + ": " + what); };
    EditCommand cmd;
    if (op == "extract") cmd.op.kind = EditKind::extract;
    else if (op == "delete") cmd.op.kind = EditKind::remove;
    else if (op.rfind("recolor=", 0) == 0) {
      try {
        cmd.op = parse_recolor(op.substr(8));
      } catch (const Error& e) {
        fail(e.what());
      }
    } else fail("unknown operation '" + op + "'");
    if (!(ss >> labels)) fail("missing label");
    cmd.labels = split_commas(labels);
    if (cmd.labels.empty()) fail("missing label");
    if (ss >> mode) {
      try {
        cmd.mode = parse_selection_mode(mode);
      } catch (const Error& e) {
        fail(e.what());
      }
      if (std::string th; ss >> th) {
        try {
          std::size_t used = 0;
          cmd.threshold = std::stod(th, &used);
          if (used != th.size()) throw std::invalid_argument(th);
        } catch (const std::exception&) {
          fail("bad threshold '" + th + "'");
        }
      }
    }
    if (std::string extra; ss >> extra) fail("unexpected token '" + extra + "'");
    cmds.push_back(std::move(cmd));
  }
  return cmds;
}

/// Resolves label names against the codebook; "all-labels" expands to every entry.
inline std::vector<int> resolve_labels(const Codebook& codebook, const std::vector<std::string>& names) {
  std::vector<int> out;
  for (const auto& name : names) {
    if (name == "all-labels") {
      for (std::size_t k = 0; k < codebook.size(); ++k) out.push_back(int(k));
      continue;
    }
    const int idx = codebook.index_of(name);
    if (idx < 0) {
      std::string known;
      for (const auto& l : codebook.labels) known += (known.empty() ? "" : ", ") + l;
      throw Error("unknown label '" + name + "'; known labels: " + known);
    }
    out.push_back(idx);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline std::vector<std::vector<float>> codebook_queries(const Codebook& codebook) {
  std::vector<std::vector<float>> q;
  for (std::size_t k = 0; k < codebook.size(); ++k) q.push_back(codebook.row(k));
  return q;
}

/// Scores the cloud against the whole codebook and selects `labels`.
inline EditSelection select_labels(const GaussianCloud<float>& cloud, const ChannelDecoder<float>* decoder,
                                   const Codebook& codebook, const std::vector<int>& labels, SelectionMode mode,
                                   double th) {
  const auto scores = score_gaussians(cloud, decoder, codebook_queries(codebook));
  return select(scores, labels, mode, th);
}

inline GaussianCloud<float> run_edit_script(const GaussianCloud<float>& cloud, const ChannelDecoder<float>* decoder,
                                            const Codebook& codebook, const std::vector<EditCommand>& commands) {
  GaussianCloud<float> current = cloud;
  for (const auto& cmd : commands) {
    const auto labels = resolve_labels(codebook, cmd.labels);
    const auto sel = select_labels(current, decoder, codebook, labels, cmd.mode, cmd.threshold);
    current = apply_edit(current, sel, cmd.op);
  }
  return current;
}

} // namespace featsplat
