#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "featsplat/featsplat.hpp"
#include "featsplat/service.hpp"

namespace fs = std::filesystem;
using namespace featsplat;

namespace {

constexpr int kExitBadInput = 2;
constexpr int kExitTrainingAborted = 3;

struct Globals {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool verbose = false;
};

void log(const Globals& g, const std::string& msg) {
  if (g.verbose) std::fprintf(stderr, "%s\n", msg.c_str());
}

Eigen::Vector3d parse_triple(const std::string& s, const char* what) {
  Eigen::Vector3d c;
  char a = 0, b = 0;
  std::istringstream ss(s);
  if (!(ss >> c[0] >> a >> c[1] >> b >> c[2]) || a != ',' || b != ',')
    throw Error("bad " + std::string(what) + " '" + s + "' (expected three comma-separated numbers)");
  return c;
}

struct Model {
  LoadedCloud loaded;
  Codebook codebook;
};

Model load_model(const fs::path& checkpoint, const std::string& codebook_arg) {
  Model m{load_cloud(checkpoint), {}};
  const fs::path cb = codebook_arg.empty() ? codebook_path_for(checkpoint) : fs::path(codebook_arg);
  if (!fs::exists(cb)) throw Error("no codebook found (looked for " + cb.string() + "); pass --codebook");
  m.codebook = parse_codebook(read_text(cb));
  return m;
}

ModelSnapshot snapshot_of(const Model& m) {
  ModelSnapshot s;
  s.cloud = std::make_shared<const GaussianCloud<float>>(m.loaded.cloud);
  if (m.loaded.decoder) s.decoder = std::make_shared<const ChannelDecoder<float>>(*m.loaded.decoder);
  s.codebook = std::make_shared<const Codebook>(m.codebook);
  return s;
}

struct PoseArgs {
  std::string pose;
  std::string orbit; // theta,phi,r in degrees
  int width = 256, height = 256;
  double fx = 0;

  void add(CLI::App* app) {
    app->add_option("--pose", pose, "World-to-camera matrix, 16 comma-separated row-major values");
    app->add_option("--orbit", orbit, "Orbit pose as theta,phi,radius (degrees, degrees, units)");
    app->add_option("--width,-W", width, "Image width")->check(CLI::Range(1, 4096));
    app->add_option("--height,-H", height, "Image height")->check(CLI::Range(1, 4096));
    app->add_option("--fx", fx, "Focal length in pixels (default: 50 degree field of view)");
  }

  std::optional<CameraView> view() const {
    if (!pose.empty() && !orbit.empty()) throw Error("give either --pose or --orbit, not both");
    if (!pose.empty()) return view_from_pose(parse_pose(pose), width, height, fx);
    if (!orbit.empty()) {
      const auto v = parse_triple(orbit, "--orbit");
      const double d2r = M_PI / 180.0;
      return view_from_pose(orbit_camera(v[0] * d2r, v[1] * d2r, v[2], 1, 1, 1.0).world_to_camera, width, height, fx);
    }
    return std::nullopt;
  }
};

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data;
  int synthetic = 0;
  int per_class = 100;
  int teacher_dim = 32;
  int feature_dim = 8;
  int decoder_out = 0;
  std::string decoder_init = "pca";
  int iters = 2000;
  int init_count = 1000;
  double init_extent = 0;
  double gamma = 1.0, lambda = 0.2, rgb_weight = 1.0;
  int densify_interval = 100;
  int checkpoint_every = 0;
  std::string bg = "0,0,0";
  std::string out = "run";
};

int run_train(const TrainArgs& a, const Globals& g) {
  Dataset ds;
  if (a.synthetic > 0) {
    if (!a.data.empty()) throw Error("give either --data or --synthetic, not both");
    ds = oracle_dataset(make_oracle_scene(a.synthetic, a.per_class, a.teacher_dim, g.seed));
  } else {
    if (a.data.empty()) throw Error("need --data DIR or --synthetic K");
    ds = load_dataset(a.data);
  }
  const int m = ds.features.front().dim;
  const bool use_decoder = a.decoder_out > 0;
  if (use_decoder && a.decoder_out != m)
    throw Error("--decoder-out " + std::to_string(a.decoder_out) + " does not match teacher dimension " + std::to_string(m));
  if (!use_decoder && a.feature_dim != m)
    throw Error("--feature-dim " + std::to_string(a.feature_dim) + " differs from teacher dimension " +
                std::to_string(m) + "; add --decoder-out " + std::to_string(m));
  if (a.feature_dim < 1) throw Error("--feature-dim must be positive");

  std::vector<TrainingView<float>> views;
  for (std::size_t i = 0; i < ds.views.size(); ++i) views.push_back({ds.views[i], ds.images[i], ds.features[i]});

  double extent = a.init_extent;
  if (extent <= 0) {
    double d = 0;
    for (const auto& v : ds.views) d += v.camera_center().norm();
    extent = 0.33 * d / double(ds.views.size());
  }
  auto cloud = random_init<float>(std::size_t(a.init_count), std::size_t(a.feature_dim), float(extent), g.seed);
  std::optional<ChannelDecoder<float>> decoder;
  if (use_decoder) {
    if (a.decoder_init == "pca") {
      std::vector<FeatureMap<float>> maps;
      for (const auto& v : views) maps.push_back(v.features);
      decoder = principal_decoder(maps, a.feature_dim);
    } else if (a.decoder_init == "random") {
      decoder = ChannelDecoder<float>::random(a.feature_dim, m, g.seed + 1);
    } else {
      throw Error("--decoder-init must be pca or random");
    }
  }

  TrainConfig cfg;
  cfg.iterations = a.iters;
  cfg.gamma = a.gamma;
  cfg.lambda_dssim = a.lambda;
  cfg.rgb_weight = a.rgb_weight;
  cfg.densify_interval = a.densify_interval;
  cfg.seed = g.seed;
  cfg.threads = g.threads;
  cfg.background = parse_triple(a.bg, "--bg");
  cfg.validate();

  const fs::path out(a.out);
  fs::create_directories(out);
  if (ds.codebook) io_detail::write_file_atomic(out / "codebook.txt", format_codebook(*ds.codebook));

  std::string csv = metrics_csv_header();
  TrainCallbacks cb;
  cb.on_step = [&](const StepMetrics& s) {
    csv += metrics_csv_row(s);
    if (g.verbose && (s.iteration % 100 == 0 || s.iteration == a.iters))
      std::fprintf(stderr, "iter %5d  loss %.5f  rgb %.5f  feat %.5f  psnr %.2f  gaussians %zu\n", s.iteration,
                   s.total_loss, s.rgb_loss, s.feature_loss, s.psnr, s.num_gaussians);
  };
  cb.checkpoint_interval = a.checkpoint_every;
  cb.on_checkpoint = [&](int it, const GaussianCloud<float>& c, const ChannelDecoder<float>* d) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_%06d.gsplat", it);
    save_cloud(c, out / name, d);
  };
  const auto result = run_training(views, std::move(cloud), std::move(decoder), cfg, cb);
  save_cloud(result.cloud, out / "checkpoint.gsplat", result.decoder ? &*result.decoder : nullptr);
  io_detail::write_file_atomic(out / "metrics.csv", csv);
  if (!result.log.empty())
    std::printf("trained %d iterations: psnr %.2f, %zu gaussians -> %s\n", a.iters, result.log.back().psnr,
                result.cloud.size(), (out / "checkpoint.gsplat").string().c_str());
  else
    std::printf("wrote initial cloud (%zu gaussians) -> %s\n", result.cloud.size(),
                (out / "checkpoint.gsplat").string().c_str());
  return 0;
}

// ---- render / edit / query / viz -------------------------------------------------

int run_render(const std::string& checkpoint, const std::string& codebook, const PoseArgs& pose, const std::string& bg,
               const std::string& out_dir, const Globals& g) {
  const auto model = load_model(checkpoint, codebook);
  const auto view = pose.view();
  if (!view) throw Error("need --pose or --orbit");
  const auto p = render_products(snapshot_of(model), *view, parse_triple(bg, "--bg"), g.threads);
  const fs::path out(out_dir);
  fs::create_directories(out);
  write_png(out / "rgb.png", p.rgb);
  write_png(out / "features.png", p.feature_viz);
  write_png(out / "seg.png", p.segmentation.colors);
  write_png(out / "seg_overlay.png", p.segmentation.overlay);
  log(g, "wrote rgb.png, features.png, seg.png, seg_overlay.png to " + out.string());
  return 0;
}

int run_edit(const std::string& checkpoint, const std::string& codebook, const std::string& script,
             const std::string& out, const Globals& g) {
  const auto model = load_model(checkpoint, codebook);
  const auto commands = parse_edit_script(read_text(script));
  const auto* dec = model.loaded.decoder ? &*model.loaded.decoder : nullptr;
  const auto edited = run_edit_script(model.loaded.cloud, dec, model.codebook, commands);
  const auto compacted = compact_transparent(edited);
  if (compacted.empty()) throw Error("the edit removed every Gaussian; nothing to save");
  save_cloud(compacted, out, dec);
  const fs::path out_cb = fs::path(out).parent_path() / "codebook.txt";
  if (!fs::exists(out_cb)) io_detail::write_file_atomic(out_cb, format_codebook(model.codebook));
  log(g, std::to_string(commands.size()) + " edit(s) applied, " + std::to_string(compacted.size()) + " of " +
             std::to_string(model.loaded.cloud.size()) + " Gaussians kept");
  return 0;
}

struct QueryArgs {
  std::string labels, point, box, mode = "hybrid", mask;
  double th = 0.5;
};

int run_query(const std::string& checkpoint, const std::string& codebook, const PoseArgs& pose, const QueryArgs& q,
              const Globals& g) {
  const auto model = load_model(checkpoint, codebook);
  PromptRequest req;
  req.mode = parse_selection_mode(q.mode);
  req.threshold = q.th;
  req.view = pose.view();
  if (!q.labels.empty()) req.labels = split_commas(q.labels);
  if (!q.point.empty()) {
    int x = 0, y = 0;
    char c = 0;
    std::istringstream ss(q.point);
    if (!(ss >> x >> c >> y) || c != ',') throw Error("bad --point (expected x,y)");
    req.point = std::array<int, 2>{x, y};
  }
  if (!q.box.empty()) {
    std::array<int, 4> b{};
    char c1 = 0, c2 = 0, c3 = 0;
    std::istringstream ss(q.box);
    if (!(ss >> b[0] >> c1 >> b[1] >> c2 >> b[2] >> c3 >> b[3])) throw Error("bad --box (expected x0,y0,x1,y1)");
    req.box = b;
  }
  const auto snap = snapshot_of(model);
  const auto sel = run_prompt(snap, req, g.threads);
  std::printf("%zu of %zu Gaussians selected (%s, th %.3g)\n", sel.count(), sel.mask.size(), to_string(sel.mode), q.th);
  if (!q.mask.empty()) {
    if (!req.view) throw Error("--mask needs --pose or --orbit");
    write_png(q.mask, selection_mask(*snap.cloud, sel.mask, *req.view, g.threads));
  }
  return 0;
}

int run_viz(const std::string& ftens, const std::string& checkpoint, const PoseArgs& pose,
            const std::string& out, const Globals& g) {
  FeatureMap<float> map;
  if (!ftens.empty()) {
    map = decode_ftens(read_text(ftens));
  } else {
    if (checkpoint.empty()) throw Error("need --ftens FILE or --checkpoint with a pose");
    const auto view = pose.view();
    if (!view) throw Error("need --pose or --orbit");
    auto loaded = load_cloud(checkpoint);
    RenderSettings rs;
    rs.threads = g.threads;
    const auto r = render(loaded.cloud, *view, rs);
    map = query_feature_map(r.output, loaded.decoder ? &*loaded.decoder : nullptr);
  }
  write_png(out, visualize_features(map, fit_pca(map)));
  log(g, "wrote " + out);
  return 0;
}

int run_make_dataset(int classes, int per_class, int dim, int views, int size, double noise, const std::string& out,
                     const Globals& g) {
  OracleOptions opt;
  opt.num_views = views;
  opt.image_size = size;
  const auto scene = make_oracle_scene(classes, per_class, dim, g.seed, opt);
  write_dataset(out, oracle_dataset(scene, noise, g.seed));
  save_cloud(scene.cloud, fs::path(out) / "ground_truth.gsplat");
  std::printf("wrote %d views of a %d-class scene (%zu Gaussians) to %s\n", views, classes, scene.cloud.size(),
              out.c_str());
  return 0;
}

httplib::Server* g_server = nullptr;

void handle_signal(int) {
  if (g_server) g_server->stop();
}

int run_serve(const std::string& checkpoint, const std::string& codebook, const std::string& host, int port,
              const std::string& ui, const Globals& g) {
  auto model = load_model(checkpoint, codebook);
  Session session(std::move(model.loaded.cloud), std::move(model.loaded.decoder), std::move(model.codebook), checkpoint);
  httplib::Server server;
  ServiceOptions opt;
  opt.threads = g.threads;
  opt.ui_dir = ui;
  if (g.verbose) opt.log = [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); };
  install_routes(server, session, opt);
  if (!server.bind_to_port(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port) + " (port busy?)");
  g_server = &server;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  std::printf("serving %s on http://%s:%d\n", checkpoint.c_str(), host.c_str(), port);
  std::fflush(stdout);
  server.listen_after_bind();
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-field Gaussian splatting: train, render, query and edit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->capture_default_str();
  app.add_flag("--verbose,-v", g.verbose, "Progress output on stderr");

  auto* train = app.add_subcommand("train", "Optimize a cloud against a teacher dataset");
  TrainArgs ta;
  train->add_option("--data", ta.data, "Dataset directory (views.txt, imgs/, feats/)");
  train->add_option("--synthetic", ta.synthetic, "Generate a K-class oracle scene instead of loading data");
  train->add_option("--per-class", ta.per_class, "Gaussians per class for --synthetic")->capture_default_str();
  train->add_option("--teacher-dim", ta.teacher_dim, "Teacher feature dimension for --synthetic")->capture_default_str();
  train->add_option("--feature-dim", ta.feature_dim, "Rendered feature dimension N")->capture_default_str();
  train->add_option("--decoder-out", ta.decoder_out, "Decode rendered features to this many channels");
  train->add_option("--decoder-init", ta.decoder_init, "pca or random")->capture_default_str();
  train->add_option("--iters", ta.iters, "Iterations")->capture_default_str();
  train->add_option("--init-count", ta.init_count, "Initial Gaussian count")->capture_default_str();
  train->add_option("--init-extent", ta.init_extent, "Half-width of the initialization cube (default from cameras)");
  train->add_option("--gamma", ta.gamma, "Feature loss weight")->capture_default_str();
  train->add_option("--lambda", ta.lambda, "D-SSIM weight")->capture_default_str();
  train->add_option("--rgb-weight", ta.rgb_weight, "Photometric loss weight")->capture_default_str();
  train->add_option("--densify-interval", ta.densify_interval, "Iterations between densification (0 = off)")
      ->capture_default_str();
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Also save every K iterations");
  train->add_option("--bg", ta.bg, "Background color r,g,b")->capture_default_str();
  train->add_option("--out", ta.out, "Output directory")->capture_default_str();

  std::string checkpoint, codebook, bg = "0,0,0", out_dir = ".", script, out, host = "127.0.0.1", ui, ftens;
  int port = 8080;
  PoseArgs pose;

  auto* render_cmd = app.add_subcommand("render", "Render RGB, feature PCA and segmentation for a pose");
  render_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (.gsplat)")->required();
  render_cmd->add_option("--codebook", codebook, "Codebook file (default: next to the checkpoint)");
  render_cmd->add_option("--bg", bg, "Background color r,g,b")->capture_default_str();
  render_cmd->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
  pose.add(render_cmd);

  auto* edit_cmd = app.add_subcommand("edit", "Apply an edit script to a checkpoint");
  edit_cmd->add_option("--checkpoint", checkpoint, "Input checkpoint")->required();
  edit_cmd->add_option("--codebook", codebook, "Codebook file (default: next to the checkpoint)");
  edit_cmd->add_option("--script", script, "Edit script: <op> <labels> [mode] [th] per line")->required();
  edit_cmd->add_option("--out", out, "Output checkpoint")->required();

  auto* query_cmd = app.add_subcommand("query", "Select Gaussians by label or pixel prompt");
  QueryArgs qa;
  query_cmd->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  query_cmd->add_option("--codebook", codebook, "Codebook file (default: next to the checkpoint)");
  query_cmd->add_option("--labels", qa.labels, "Comma-separated labels");
  query_cmd->add_option("--point", qa.point, "Pixel prompt x,y (needs a pose)");
  query_cmd->add_option("--box", qa.box, "Box prompt x0,y0,x1,y1 (needs a pose)");
  query_cmd->add_option("--mode", qa.mode, "soft, hard or hybrid")->capture_default_str();
  query_cmd->add_option("--th", qa.th, "Probability threshold")->capture_default_str();
  query_cmd->add_option("--mask", qa.mask, "Write the selection's screen mask (PNG)");
  pose.add(query_cmd);

  auto* viz_cmd = app.add_subcommand("viz", "PCA visualization of a feature tensor or a rendered feature map");
  viz_cmd->add_option("--ftens", ftens, "FTENS feature map");
  viz_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to render instead");
  viz_cmd->add_option("--out", out, "Output PNG")->required();
  pose.add(viz_cmd);

  auto* make_cmd = app.add_subcommand("make-dataset", "Write an oracle teacher dataset");
  int classes = 5, per_class = 100, dim = 32, views = 20, size = 64;
  double noise = 0;
  make_cmd->add_option("--classes", classes, "Number of classes")->capture_default_str();
  make_cmd->add_option("--per-class", per_class, "Gaussians per class")->capture_default_str();
  make_cmd->add_option("--dim", dim, "Teacher feature dimension")->capture_default_str();
  make_cmd->add_option("--views", views, "Orbit views")->capture_default_str();
  make_cmd->add_option("--size", size, "Image size")->capture_default_str();
  make_cmd->add_option("--noise", noise, "Gaussian noise sigma added to images")->capture_default_str();
  make_cmd->add_option("--out", out, "Output directory")->required();

  auto* serve_cmd = app.add_subcommand("serve", "Serve render/prompt/edit endpoints over HTTP");
  serve_cmd->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  serve_cmd->add_option("--codebook", codebook, "Codebook file (default: next to the checkpoint)");
  serve_cmd->add_option("--host", host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", port, "Port")->capture_default_str();
  serve_cmd->add_option("--ui", ui, "Directory of static UI assets to mount at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    const auto used = app.get_subcommands();
    std::cerr << (used.empty() ? app.help() : used.back()->help());
    return kExitBadInput;
  }

  try {
    g.threads = resolve_threads(g.threads);
    if (*train) return run_train(ta, g);
    if (*render_cmd) return run_render(checkpoint, codebook, pose, bg, out_dir, g);
    if (*edit_cmd) return run_edit(checkpoint, codebook, script, out, g);
    if (*query_cmd) return run_query(checkpoint, codebook, pose, qa, g);
    if (*viz_cmd) return run_viz(ftens, checkpoint, pose, out, g);
    if (*make_cmd) return run_make_dataset(classes, per_class, dim, views, size, noise, out, g);
    if (*serve_cmd) return run_serve(checkpoint, codebook, host, port, ui, g);
  } catch (const TrainingAborted& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    return kExitTrainingAborted;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitBadInput;
  }
  return kExitBadInput;
}
