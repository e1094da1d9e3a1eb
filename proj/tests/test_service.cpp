#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "support.hpp"

#include "featsplat/service.hpp"

using namespace fstest;
using json = nlohmann::json;

namespace {

OracleScene small_scene() {
  OracleOptions opt;
  opt.image_size = 48;
  opt.num_views = 4;
  return make_oracle_scene(3, 30, 12, 5, opt);
}

class ServiceTest : public ::testing::Test {
protected:
  void SetUp() override {
    scene_ = small_scene();
    dir_ = std::filesystem::temp_directory_path() / ("featsplat_service_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
    checkpoint_ = dir_ / "model.gsplat";
    save_cloud(scene_.cloud, checkpoint_);
    on_disk_ = io_detail::read_file(checkpoint_);
    session_ = std::make_unique<Session>(scene_.cloud, std::nullopt, scene_.codebook, checkpoint_);
    install_routes(server_, *session_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    pose_ = format_pose(scene_.views[1].world_to_camera);
    view_ = view_from_pose(scene_.views[1].world_to_camera, 40, 32);
  }

  void TearDown() override {
    server_.stop();
    thread_.join();
    std::filesystem::remove_all(dir_);
  }

  httplib::Result get(const std::string& path) { return client_->Get(path); }
  httplib::Result post(const std::string& path, const json& body) {
    return client_->Post(path, body.dump(), "application/json");
  }
  std::string render_path(const std::string& endpoint) { return endpoint + "?pose=" + pose_ + "&w=40&h=32"; }

  OracleScene scene_;
  std::filesystem::path dir_, checkpoint_;
  std::string on_disk_;
  std::unique_ptr<Session> session_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::unique_ptr<httplib::Client> client_;
  std::string pose_;
  CameraView view_;
};

void expect_error(const httplib::Result& r, const std::string& fragment) {
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 400);
  const auto body = json::parse(r->body);
  EXPECT_NE(body.at("error").get<std::string>().find(fragment), std::string::npos) << body.dump();
}

} // namespace

TEST(Pose, ParseAndFormat) {
  Gen g(1);
  const auto v = random_view(g, 10, 10);
  const auto m = parse_pose(format_pose(v.world_to_camera));
  EXPECT_LT((m - v.world_to_camera).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_THROW(parse_pose("1,0,0"), Error);
  EXPECT_THROW(parse_pose("1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,x"), Error);
  EXPECT_THROW(parse_pose("1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1z"), Error);
  EXPECT_THROW(view_from_pose(parse_pose("2,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1"), 8, 8), Error);
  EXPECT_THROW(view_from_pose(Mat4d::Identity(), 0, 8), Error);
  const auto view = view_from_pose(Mat4d::Identity(), 9, 5);
  EXPECT_EQ(view.cx, 4.0);
  EXPECT_EQ(view.cy, 2.0);
  EXPECT_NEAR(view.fx, 4.5 / std::tan(25.0 * M_PI / 180.0), 1e-12);
}

TEST(SessionState, UndoRestoresBitExactAndIsBounded) {
  const auto scene = small_scene();
  Session s(scene.cloud, std::nullopt, scene.codebook);
  EXPECT_FALSE(s.undo());
  const auto before = *s.snapshot().cloud;
  PromptRequest p;
  p.labels = {"classB"};
  const auto sel = s.edit(p, EditOp{EditKind::remove, {}, {}});
  EXPECT_GT(sel.count(), 0u);
  EXPECT_FALSE(*s.snapshot().cloud == before);
  EXPECT_TRUE(s.undo());
  EXPECT_EQ(*s.snapshot().cloud, before);

  p.labels = {"classA"};
  std::vector<GaussianCloud<float>> history{*s.snapshot().cloud};
  for (int i = 0; i < 40; ++i) {
    s.edit(p, parse_recolor(std::to_string(i / 40.0) + ",0,0"));
    history.push_back(*s.snapshot().cloud);
  }
  EXPECT_EQ(s.undo_depth(), Session::kUndoDepth);
  for (std::size_t k = 0; k < Session::kUndoDepth; ++k) {
    ASSERT_TRUE(s.undo());
    EXPECT_EQ(*s.snapshot().cloud, history[history.size() - 2 - k]);
  }
  EXPECT_FALSE(s.undo());
}

TEST(SessionState, SnapshotsAreImmutable) {
  const auto scene = small_scene();
  Session s(scene.cloud, std::nullopt, scene.codebook);
  const auto snap = s.snapshot();
  const auto copy = *snap.cloud;
  PromptRequest p;
  p.labels = {"all-labels"};
  s.edit(p, EditOp{EditKind::remove, {}, {}});
  EXPECT_EQ(*snap.cloud, copy);
}

TEST(SessionState, RejectsMismatchedCodebook) {
  const auto scene = small_scene();
  EXPECT_THROW(Session(scene.cloud, ChannelDecoder<float>::identity(12), make_codebook(3, 8, 0)), Error);
  EXPECT_THROW(Session(scene.cloud, std::nullopt, make_codebook(3, 8, 0)), Error);
  Session ok(scene.cloud, ChannelDecoder<float>::random(12, 8, 1), make_codebook(3, 8, 0));
  EXPECT_THROW(ok.save(), Error); // no path
}

TEST(SessionState, PointPromptUsesThePickedFeature) {
  const auto scene = small_scene();
  const ModelSnapshot m{std::make_shared<const GaussianCloud<float>>(scene.cloud), nullptr,
                        std::make_shared<const Codebook>(scene.codebook)};
  const auto& view = scene.views[0];
  const auto fr = teacher_render(scene, view);
  int tested = 0;
  for (int y = 0; y < view.height && tested < 3; y += 3)
    for (int x = 0; x < view.width && tested < 3; x += 3) {
      const int cls = fr.class_ids(y, x);
      const auto* f = fr.features.at(y, x);
      double n = 0;
      for (int k = 0; k < 12; ++k) n += double(f[k]) * f[k];
      if (cls == 0 || std::sqrt(n) < 0.999) continue; // pure, fully covered pixels only
      PromptRequest p;
      p.point = std::array<int, 2>{x, y};
      p.view = view;
      p.mode = SelectionMode::hard;
      const auto sel = run_prompt(m, p);
      for (std::size_t i = 0; i < scene.cloud.size(); ++i) EXPECT_EQ(sel.mask[i], scene.labels[i] == cls);
      ++tested;
    }
  EXPECT_EQ(tested, 3);

  PromptRequest empty;
  empty.point = std::array<int, 2>{0, 0};
  empty.view = view;
  EXPECT_THROW(run_prompt(m, empty), Error);
  PromptRequest both = empty;
  both.labels = {"classA"};
  EXPECT_THROW(run_prompt(m, both), Error);
  PromptRequest no_view;
  no_view.point = std::array<int, 2>{1, 1};
  EXPECT_THROW(run_prompt(m, no_view), Error);
}

TEST_F(ServiceTest, RenderMatchesSharedCodePath) {
  const auto r = get(render_path("/render"));
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
  const auto products = render_products(session_->snapshot(), view_);
  EXPECT_EQ(r->body, encode_png(products.rgb));
  EXPECT_EQ(get(render_path("/render"))->body, r->body);

  const auto white = get(render_path("/render") + "&bg=1,1,1");
  EXPECT_EQ(white->body, encode_png(render_model(session_->snapshot(), view_, Eigen::Vector3d(1, 1, 1)).image));
  EXPECT_NE(white->body, r->body);

  EXPECT_EQ(get(render_path("/feature_viz"))->body, encode_png(products.feature_viz));
  EXPECT_EQ(get(render_path("/segmentation"))->body, encode_png(products.segmentation.colors));
  EXPECT_EQ(get(render_path("/segmentation") + "&overlay=1")->body, encode_png(products.segmentation.overlay));
  const auto decoded = decode_png(get(render_path("/segmentation"))->body);
  EXPECT_EQ(decoded.width, 40);
  EXPECT_EQ(decoded.height, 32);
}

TEST_F(ServiceTest, LabelsAndOrbit) {
  const auto labels = json::parse(get("/labels")->body);
  EXPECT_EQ(labels["labels"].get<std::vector<std::string>>(), scene_.codebook.labels);
  EXPECT_EQ(labels["background"], "background");
  ASSERT_EQ(labels["colors"].size(), scene_.codebook.size());
  EXPECT_FLOAT_EQ(labels["colors"][1][0].get<float>(), label_color("classA")[0]);

  const auto orbit = json::parse(get("/orbit?theta=0.5&phi=0.3&r=3")->body);
  const auto pose = parse_pose(orbit["pose"].get<std::string>());
  const auto v = view_from_pose(pose, 8, 8);
  EXPECT_NEAR(v.camera_center().norm(), 3.0, 1e-6);
  expect_error(get("/orbit?theta=abc"), "bad number");
}

TEST_F(ServiceTest, PromptReturnsCountAndMask) {
  const auto r = post("/prompt", {{"labels", "classB"}, {"mode", "soft"}, {"th", 0.5}, {"pose", pose_}, {"w", 40}, {"h", 32}});
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  const auto body = json::parse(r->body);
  const auto m = session_->snapshot();
  const auto sel = select_labels(*m.cloud, nullptr, *m.codebook, {2}, SelectionMode::soft, 0.5);
  EXPECT_EQ(body["count"].get<std::size_t>(), sel.count());
  EXPECT_EQ(body["total"].get<std::size_t>(), scene_.cloud.size());
  EXPECT_EQ(body["mode"], "soft");
  const auto mask_png = encode_png(selection_mask(*m.cloud, sel.mask, view_));
  EXPECT_EQ(body["mask"].get<std::string>(), httplib::detail::base64_encode(mask_png));
  EXPECT_EQ(decode_png(mask_png).dim, 1);

  const auto no_pose = json::parse(post("/prompt", {{"labels", {"classA", "classC"}}})->body);
  EXPECT_FALSE(no_pose.contains("mask"));
  std::size_t expected = 0;
  for (int l : scene_.labels) expected += (l == 1 || l == 3);
  EXPECT_EQ(no_pose["count"].get<std::size_t>(), expected);
}

TEST_F(ServiceTest, PointPromptMatchesLibrary) {
  PromptRequest p;
  p.view = view_;
  p.mode = SelectionMode::soft;
  const auto m = session_->snapshot();
  const auto feats = render_model(m, view_).feature_map;
  int x = -1, y = -1;
  for (int yy = 0; yy < view_.height && x < 0; ++yy)
    for (int xx = 0; xx < view_.width; ++xx)
      if (std::abs(feats(yy, xx, 0)) + std::abs(feats(yy, xx, 1)) > 0.1f) {
        x = xx;
        y = yy;
        break;
      }
  ASSERT_GE(x, 0);
  p.point = std::array<int, 2>{x, y};
  const auto sel = run_prompt(m, p);
  const auto body = json::parse(
      post("/prompt", {{"point", {{"x", x}, {"y", y}}}, {"mode", "soft"}, {"pose", pose_}, {"w", 40}, {"h", 32}})->body);
  EXPECT_EQ(body["count"].get<std::size_t>(), sel.count());
  EXPECT_EQ(body["mask"].get<std::string>(),
            httplib::detail::base64_encode(encode_png(selection_mask(*m.cloud, sel.mask, view_))));

  p.point.reset();
  p.box = std::array<int, 4>{0, 0, 39, 31};
  const auto box_sel = run_prompt(m, p);
  const auto box = json::parse(post("/prompt", {{"box", {{"x0", 0}, {"y0", 0}, {"x1", 39}, {"y1", 31}}},
                                                {"mode", "soft"},
                                                {"pose", pose_},
                                                {"w", 40},
                                                {"h", 32}})
                                   ->body);
  EXPECT_EQ(box["count"].get<std::size_t>(), box_sel.count());
}

TEST_F(ServiceTest, EditUndoRoundTrip) {
  const auto before = get(render_path("/render"))->body;
  const auto e = json::parse(post("/edit", {{"op", "delete"}, {"labels", "classA"}, {"mode", "hybrid"}, {"th", 0.5}})->body);
  std::size_t class_a = 0;
  for (int l : scene_.labels) class_a += l == 1;
  EXPECT_EQ(e["count"].get<std::size_t>(), class_a);
  EXPECT_EQ(e["undo_depth"], 1);
  const auto edited = get(render_path("/render"))->body;
  EXPECT_NE(edited, before);

  const auto u = json::parse(post("/undo", json::object())->body);
  EXPECT_TRUE(u["undone"].get<bool>());
  EXPECT_EQ(u["undo_depth"], 0);
  EXPECT_EQ(get(render_path("/render"))->body, before);
  EXPECT_FALSE(json::parse(post("/undo", json::object())->body)["undone"].get<bool>());

  post("/edit", {{"op", "recolor"}, {"color", "0,0,1"}, {"labels", "classC"}});
  post("/edit", {{"op", "extract"}, {"labels", "classC"}});
  EXPECT_EQ(session_->undo_depth(), 2u);
  EXPECT_EQ(io_detail::read_file(checkpoint_), on_disk_);
}

TEST_F(ServiceTest, SaveWritesCompactedCloud) {
  post("/edit", {{"op", "delete"}, {"labels", "classB"}});
  const auto target = dir_ / "edited.gsplat";
  const auto r = json::parse(post("/save", {{"path", target.string()}})->body);
  EXPECT_EQ(r["path"], target.string());
  const auto loaded = load_cloud(target);
  auto expected = compact_transparent(*session_->snapshot().cloud);
  expected.set_scene_extent(compute_scene_extent(expected)); // derived on load, not stored
  EXPECT_EQ(loaded.cloud, expected);
  std::size_t kept = 0;
  for (int l : scene_.labels) kept += l != 2;
  EXPECT_EQ(loaded.cloud.size(), kept);
  EXPECT_EQ(io_detail::read_file(checkpoint_), on_disk_);

  const auto in_place = client_->Post("/save", "", "application/json");
  ASSERT_EQ(in_place->status, 200);
  EXPECT_EQ(load_cloud(checkpoint_).cloud, loaded.cloud);
}

TEST_F(ServiceTest, BadRequestsAre400) {
  expect_error(get("/render"), "missing 'pose'");
  expect_error(get("/render?pose=1,2,3"), "expected 16");
  expect_error(get("/render?pose=2,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1"), "invalid camera");
  expect_error(get(render_path("/render") + "&bg=red"), "bad color");
  expect_error(get("/render?pose=" + pose_ + "&w=ten"), "bad integer");
  expect_error(get("/feature_viz"), "missing 'pose'");
  expect_error(get("/segmentation?pose=1"), "expected 16");
  expect_error(client_->Post("/prompt", "{not json", "application/json"), "parse");
  expect_error(post("/prompt", {{"labels", "sofa"}}), "unknown label 'sofa'");
  expect_error(post("/prompt", {{"labels", "classA"}, {"mode", "fuzzy"}}), "unknown selection mode");
  expect_error(post("/prompt", json::object()), "exactly one");
  expect_error(post("/prompt", {{"point", {{"x", 1000}, {"y", 0}}}, {"pose", pose_}, {"w", 40}, {"h", 32}}), "outside");
  expect_error(post("/prompt", {{"point", {{"x", 1}, {"y", 1}}}}), "need a pose");
  expect_error(post("/edit", {{"op", "explode"}, {"labels", "classA"}}), "unknown op");
  expect_error(post("/edit", {{"labels", "classA"}}), "op");
  expect_error(post("/edit", {{"op", "recolor"}, {"color", "1,2"}, {"labels", "classA"}}), "");
  EXPECT_EQ(session_->undo_depth(), 0u);
}
