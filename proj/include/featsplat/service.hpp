#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "featsplat/image_io.hpp"
#include "featsplat/session.hpp"

namespace featsplat {

struct ServiceOptions {
  unsigned threads = 1;
  std::filesystem::path ui_dir; // static assets, optional
  std::function<void(const std::string&)> log;
};

namespace service_detail {

using json = nlohmann::json;

inline int int_param(const httplib::Request& req, const char* name, int fallback) {
  if (!req.has_param(name)) return fallback;
  const auto v = req.get_param_value(name);
  try {
    std::size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw Error(std::string("bad integer for '") + name + "': " + v);
  }
}

inline double double_param(const httplib::Request& req, const char* name, double fallback) {
  if (!req.has_param(name)) return fallback;
  const auto v = req.get_param_value(name);
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw Error(std::string("bad number for '") + name + "': " + v);
  }
}

inline Eigen::Vector3d parse_rgb(const std::string& s) {
  Eigen::Vector3d c;
  char a = 0, b = 0;
  std::istringstream ss(s);
  if (!(ss >> c[0] >> a >> c[1] >> b >> c[2]) || a != ',' || b != ',') throw Error("bad color '" + s + "'");
  return c;
}

inline CameraView view_from_query(const httplib::Request& req) {
  if (!req.has_param("pose")) throw Error("missing 'pose'");
  return view_from_pose(parse_pose(req.get_param_value("pose")), int_param(req, "w", 256), int_param(req, "h", 256),
                        double_param(req, "fx", 0.0));
}

inline std::string pose_text(const json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_array()) {
    std::string s;
    for (std::size_t i = 0; i < j.size(); ++i) s += (i ? "," : "") + j[i].dump();
    return s;
  }
  throw Error("'pose' must be a string or an array of 16 numbers");
}

inline PromptRequest prompt_from_json(const json& body) {
  PromptRequest p;
  if (body.contains("point")) {
    const auto& pt = body["point"];
    p.point = std::array<int, 2>{pt.at("x").get<int>(), pt.at("y").get<int>()};
  }
  if (body.contains("box")) {
    const auto& b = body["box"];
    p.box = std::array<int, 4>{b.at("x0").get<int>(), b.at("y0").get<int>(), b.at("x1").get<int>(),
                               b.at("y1").get<int>()};
  }
  if (body.contains("labels")) {
    const auto& l = body["labels"];
    if (l.is_string()) p.labels = split_commas(l.get<std::string>());
    else p.labels = l.get<std::vector<std::string>>();
  }
  if (body.contains("pose"))
    p.view = view_from_pose(parse_pose(pose_text(body["pose"])), body.value("w", 256), body.value("h", 256),
                            body.value("fx", 0.0));
  p.mode = parse_selection_mode(body.value("mode", std::string("hybrid")));
  p.threshold = body.value("th", 0.5);
  return p;
}

inline EditOp op_from_json(const json& body) {
  const auto op = body.at("op").get<std::string>();
  if (op == "delete") return EditOp{EditKind::remove, {}, {}};
  if (op == "extract") return EditOp{EditKind::extract, {}, {}};
  if (op == "recolor") return parse_recolor(body.value("color", std::string("invert")));
  throw Error("unknown op '" + op + "' (expected delete, extract or recolor)");
}

inline void send_png(httplib::Response& res, const Image<float>& img) {
  res.set_content(encode_png(img), "image/png");
}

inline void send_json(httplib::Response& res, const json& j) { res.set_content(j.dump(), "application/json"); }

} // namespace service_detail

/// Registers every endpoint on `server`. Handlers render from a snapshot
/// taken at request start; edits, undo and save go through the session.
inline void install_routes(httplib::Server& server, Session& session, const ServiceOptions& opt = {}) {
  using namespace service_detail;
  const unsigned threads = opt.threads;

  // httplib defaults to SO_REUSEPORT, which lets a second server share a busy port.
  server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });

  auto guarded = [opt](auto fn) {
    return [fn, opt](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const std::exception& e) {
        res.status = 400;
        send_json(res, json{{"error", e.what()}});
      }
      if (opt.log) opt.log(req.method + " " + req.path + " -> " + std::to_string(res.status));
    };
  };

  server.Get("/render", guarded([&session, threads](const httplib::Request& req, httplib::Response& res) {
    const auto view = view_from_query(req);
    const Eigen::Vector3d bg = req.has_param("bg") ? parse_rgb(req.get_param_value("bg")) : Eigen::Vector3d::Zero();
    send_png(res, render_model(session.snapshot(), view, bg, threads).image);
  }));

  server.Get("/feature_viz", guarded([&session, threads](const httplib::Request& req, httplib::Response& res) {
    send_png(res, render_products(session.snapshot(), view_from_query(req), Eigen::Vector3d::Zero(), threads).feature_viz);
  }));

  server.Get("/segmentation", guarded([&session, threads](const httplib::Request& req, httplib::Response& res) {
    const auto p = render_products(session.snapshot(), view_from_query(req), Eigen::Vector3d::Zero(), threads);
    send_png(res, int_param(req, "overlay", 0) ? p.segmentation.overlay : p.segmentation.colors);
  }));

  server.Get("/labels", guarded([&session](const httplib::Request&, httplib::Response& res) {
    const auto m = session.snapshot();
    json colors = json::array();
    for (const auto& l : m.codebook->labels) {
      const auto c = label_color(l);
      colors.push_back({c[0], c[1], c[2]});
    }
    send_json(res, json{{"labels", m.codebook->labels},
                        {"background", m.codebook->labels[std::size_t(m.codebook->background_label)]},
                        {"colors", colors}});
  }));

  server.Get("/orbit", guarded([](const httplib::Request& req, httplib::Response& res) {
    const double theta = double_param(req, "theta", 0.0), phi = double_param(req, "phi", 0.0),
                 r = double_param(req, "r", 4.0);
    const auto v = orbit_camera(theta, phi, r, 1, 1, 1.0);
    send_json(res, json{{"pose", format_pose(v.world_to_camera)}});
  }));

  server.Post("/prompt", guarded([&session, threads](const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body);
    const auto p = prompt_from_json(body);
    const auto m = session.snapshot();
    const auto sel = run_prompt(m, p, threads);
    json out{{"count", sel.count()}, {"total", sel.mask.size()}, {"mode", to_string(sel.mode)}};
    if (p.view) out["mask"] = httplib::detail::base64_encode(encode_png(selection_mask(*m.cloud, sel.mask, *p.view, threads)));
    send_json(res, out);
  }));

  server.Post("/edit", guarded([&session, threads](const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body);
    const auto sel = session.edit(prompt_from_json(body), op_from_json(body), threads);
    send_json(res, json{{"count", sel.count()}, {"undo_depth", session.undo_depth()}});
  }));

  server.Post("/undo", guarded([&session](const httplib::Request&, httplib::Response& res) {
    const bool undone = session.undo();
    send_json(res, json{{"undone", undone}, {"undo_depth", session.undo_depth()}});
  }));

  server.Post("/save", guarded([&session](const httplib::Request& req, httplib::Response& res) {
    std::filesystem::path path;
    if (!req.body.empty()) path = json::parse(req.body).value("path", std::string());
    send_json(res, json{{"path", session.save(path).string()}});
  }));

  if (!opt.ui_dir.empty() && !server.set_mount_point("/", opt.ui_dir.string()))
    throw Error("ui directory not found: " + opt.ui_dir.string());
}

} // namespace featsplat
