#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <thread>

#include "dcedit/cli.hpp"
#include "test_support.hpp"

using namespace dcedit;
using testing_support::fixture;

namespace {

std::shared_ptr<const Models> fixture_models() {
  static const auto models = std::make_shared<const Models>(load_models(ModelPaths::in_directory(testing_support::fixture_dir())));
  return models;
}

std::string png_b64(const Image& img) { return base64_encode(encode_png(img)); }

Image scene_image(std::uint64_t seed) {
  nn::Rng rng(seed);
  return toy::render(toy::sample_scene(rng));
}

json session_body(const Image& img) { return {{"image_b64", png_b64(img)}}; }

json edit_body(const std::string& attr, double alpha, bool skip = false) {
  return {{"requests", json::array({{{"attribute", attr}, {"alpha", alpha}}})}, {"skip_deghost", skip}};
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dcedit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST(Service, SessionLifecycleAndDeterminism) {
  const auto root = testing_support::temp_dir("sessions");
  Service svc(fixture_models(), root);
  const Response created = svc.handle("POST", "/sessions", session_body(scene_image(1)).dump());
  ASSERT_EQ(created.status, 201) << created.body.dump();
  const std::string id = created.body.at("session_id");
  EXPECT_FALSE(created.body.at("inversion_b64").get<std::string>().empty());

  const Response attrs = svc.handle("GET", "/attributes", "");
  ASSERT_EQ(attrs.status, 200);
  ASSERT_EQ(attrs.body.at("attributes").size(), 4u);
  for (const auto& a : attrs.body.at("attributes")) EXPECT_LT(a.at("alpha_min").get<double>(), a.at("alpha_max").get<double>());

  const std::string body = edit_body("glasses", 2.0).dump();
  const Response a = svc.handle("POST", "/sessions/" + id + "/edit", body);
  const Response b = svc.handle("POST", "/sessions/" + id + "/edit", body);
  ASSERT_EQ(a.status, 200) << a.body.dump();
  EXPECT_EQ(a.body.dump(), b.body.dump());
  EXPECT_TRUE(a.body.at("deghosted").get<bool>());
  const Image out = decode_png(base64_decode(a.body.at("image_b64").get<std::string>()));
  EXPECT_EQ(out.height(), 64);
  EXPECT_FALSE(a.body.contains("intermediates"));

  json multi = {{"requests", json::array({{{"attribute", "glasses"}, {"alpha", 1.0}}, {{"attribute", "hair_tone"}, {"alpha", -1.0}}})},
                {"skip_deghost", true},
                {"intermediates", true}};
  const Response c = svc.handle("POST", "/sessions/" + id + "/edit", multi.dump());
  ASSERT_EQ(c.status, 200);
  EXPECT_FALSE(c.body.at("deghosted").get<bool>());
  for (const char* k : {"inversion", "edited_1", "edited_2", "mask_1", "mask_2", "fused", "output"})
    EXPECT_TRUE(c.body.at("intermediates").contains(k)) << k;

  const Response h = svc.handle("GET", "/sessions/" + id + "/history", "");
  ASSERT_EQ(h.status, 200);
  ASSERT_EQ(h.body.at("history").size(), 3u);
  EXPECT_EQ(h.body.at("history")[0].at("image_hash"), a.body.at("image_hash"));
  EXPECT_TRUE(std::filesystem::exists(root / id / "result_2.png"));
  std::filesystem::remove_all(root);
}

TEST(Service, ErrorContract) {
  const auto root = testing_support::temp_dir("sessions_err");
  Service svc(fixture_models(), root);
  const std::string id = svc.handle("POST", "/sessions", session_body(scene_image(2)).dump()).body.at("session_id");

  const Response unknown = svc.handle("POST", "/sessions/" + id + "/edit", edit_body("beard", 1.0).dump());
  EXPECT_EQ(unknown.status, 422);
  EXPECT_EQ(unknown.body.at("error").at("code"), "unknown_attribute");

  EXPECT_EQ(svc.handle("POST", "/sessions", "not json").status, 400);
  EXPECT_EQ(svc.handle("POST", "/sessions", "{}").status, 400);
  EXPECT_EQ(svc.handle("POST", "/sessions", json{{"image_b64", "@@@"}}.dump()).status, 422);
  const Response small = svc.handle("POST", "/sessions", session_body(Image(3, 32, 32)).dump());
  EXPECT_EQ(small.status, 422);
  EXPECT_EQ(small.body.at("error").at("code"), "shape_mismatch");
  EXPECT_EQ(svc.handle("POST", "/sessions/" + id + "/edit", R"({"requests": []})").status, 400);
  EXPECT_EQ(svc.handle("POST", "/sessions/" + id + "/edit", R"({"requests": [{"attribute": "glasses"}]})").status, 400);
  EXPECT_EQ(svc.handle("POST", "/sessions/ffffffffffffffff/edit", edit_body("glasses", 1.0).dump()).status, 404);
  EXPECT_EQ(svc.handle("GET", "/sessions/../../etc/history", "").status, 404);
  EXPECT_EQ(svc.handle("DELETE", "/sessions", "").status, 404);
  // Failed requests leave no history.
  EXPECT_EQ(svc.handle("GET", "/sessions/" + id + "/history", "").body.at("history").size(), 0u);
  std::filesystem::remove_all(root);
}

TEST(Service, SessionsPersistAndReplay) {
  const auto root = testing_support::temp_dir("sessions_persist");
  std::string id, hash;
  {
    Service svc(fixture_models(), root);
    id = svc.handle("POST", "/sessions", session_body(scene_image(3)).dump()).body.at("session_id");
    hash = svc.handle("POST", "/sessions/" + id + "/edit", edit_body("mouth_open", -1.5).dump()).body.at("image_hash");
    svc.handle("POST", "/sessions/" + id + "/edit", edit_body("brow_thickness", 2.0, true).dump());
  }
  Service fresh(fixture_models(), root);
  const Response h = fresh.handle("GET", "/sessions/" + id + "/history", "");
  ASSERT_EQ(h.status, 200);
  ASSERT_EQ(h.body.at("history").size(), 2u);
  EXPECT_EQ(h.body.at("history")[0].at("image_hash"), hash);
  EXPECT_TRUE(replay_history(*fresh.sessions().get(id, *fixture_models()), *fixture_models()));
  // Same request on the re-attached session reproduces the stored hash.
  EXPECT_EQ(fresh.handle("POST", "/sessions/" + id + "/edit", edit_body("mouth_open", -1.5).dump()).body.at("image_hash"), hash);
  std::filesystem::remove_all(root);
}

TEST(Service, ConcurrentSessions) {
  const auto root = testing_support::temp_dir("sessions_conc");
  Service svc(fixture_models(), root);
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(svc.handle("POST", "/sessions", session_body(scene_image(10 + i)).dump()).body.at("session_id"));
  std::vector<std::string> serial, parallel(6);
  for (int k = 0; k < 6; ++k)
    serial.push_back(svc.handle("POST", "/sessions/" + ids[k % 3] + "/edit", edit_body("glasses", 0.5 * k - 1.0).dump()).body.dump());
  std::vector<std::thread> threads;
  for (int k = 0; k < 6; ++k)
    threads.emplace_back([&, k] {
      parallel[k] = svc.handle("POST", "/sessions/" + ids[k % 3] + "/edit", edit_body("glasses", 0.5 * k - 1.0).dump()).body.dump();
    });
  for (auto& t : threads) t.join();
  EXPECT_EQ(parallel, serial);
  for (const auto& id : ids) EXPECT_EQ(svc.handle("GET", "/sessions/" + id + "/history", "").body.at("history").size(), 4u);
  std::filesystem::remove_all(root);
}

TEST(Http, RoutesOverSocket) {
  const auto root = testing_support::temp_dir("sessions_http");
  HttpServer server(std::make_shared<Service>(fixture_models(), root));
  const int port = server.bind("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  std::thread t([&] { server.run(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  const auto created = client.Post("/sessions", session_body(scene_image(4)).dump(), "application/json");
  ASSERT_TRUE(created);
  EXPECT_EQ(created->status, 201);
  const std::string id = json::parse(created->body).at("session_id");
  const auto attrs = client.Get("/attributes");
  ASSERT_TRUE(attrs);
  EXPECT_EQ(attrs->status, 200);
  EXPECT_EQ(attrs->get_header_value("Content-Type"), "application/json");
  const auto bad = client.Post("/sessions/" + id + "/edit", edit_body("nope", 1.0).dump(), "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 422);
  EXPECT_EQ(json::parse(bad->body).at("error").at("code"), "unknown_attribute");
  const auto ok = client.Post("/sessions/" + id + "/edit", edit_body("hair_tone", 1.0).dump(), "application/json");
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->status, 200);
  server.stop();
  t.join();
  std::filesystem::remove_all(root);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli({}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"--help"}).code, cli::kExitOk);
  const CliRun missing = run_cli({"edit", "--input", fixture("input.png").string(), "--out", "/tmp/x.png", "--attribute", "glasses",
                                  "--alpha", "1"});
  EXPECT_EQ(missing.code, cli::kExitUsage);
  EXPECT_NE(missing.err.find("--encoder"), std::string::npos);
  EXPECT_NE(missing.err.find("Usage"), std::string::npos);
  const CliRun absent = run_cli({"edit", "--input", fixture("input.png").string(), "--out", "/tmp/x.png", "--attribute", "glasses",
                                 "--alpha", "1", "--encoder", "/nonexistent/enc.ckpt", "--generator", fixture("generator.ckpt").string(),
                                 "--da", fixture("da.ckpt").string(), "--skip-deghost"});
  EXPECT_EQ(absent.code, cli::kExitUsage);
  const CliRun unpaired = run_cli({"edit", "--input", fixture("input.png").string(), "--out", "/tmp/x.png", "--attribute", "glasses",
                                   "--encoder", fixture("encoder.ckpt").string(), "--generator", fixture("generator.ckpt").string(),
                                   "--da", fixture("da.ckpt").string(), "--skip-deghost"});
  EXPECT_EQ(unpaired.code, cli::kExitUsage);
}

TEST(Cli, RuntimeErrorsExitOne) {
  const auto dir = testing_support::temp_dir("cli_err");
  const CliRun r = run_cli({"edit", "--input", (dir / "missing.png").string(), "--out", (dir / "o.png").string(), "--attribute",
                            "glasses", "--alpha", "1", "--encoder", fixture("encoder.ckpt").string(), "--generator",
                            fixture("generator.ckpt").string(), "--da", fixture("da.ckpt").string(), "--skip-deghost"});
  EXPECT_EQ(r.code, cli::kExitFailure);
  EXPECT_NE(r.err.find("not_found"), std::string::npos);
  const CliRun attr = run_cli({"edit", "--input", fixture("input.png").string(), "--out", (dir / "o.png").string(), "--attribute",
                               "beard", "--alpha", "1", "--encoder", fixture("encoder.ckpt").string(), "--generator",
                               fixture("generator.ckpt").string(), "--da", fixture("da.ckpt").string(), "--skip-deghost"});
  EXPECT_EQ(attr.code, cli::kExitFailure);
  EXPECT_NE(attr.err.find("unknown_attribute"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Cli, EditMatchesGoldenHash) {
  std::ifstream in(fixture("golden.json"));
  const json golden = json::parse(in);
  const auto dir = testing_support::temp_dir("cli_golden");
  const CliRun r = run_cli({"edit", "--input", fixture("input.png").string(), "--out", (dir / "out.png").string(), "--attribute",
                            golden.at("args").at("attribute"), "--alpha", std::to_string(golden.at("args").at("alpha").get<double>()),
                            "--encoder", fixture("encoder.ckpt").string(), "--generator", fixture("generator.ckpt").string(), "--da",
                            fixture("da.ckpt").string(), "--deghost", fixture("deghost.ckpt").string(), "--dump-intermediates",
                            (dir / "steps").string()});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const json result = json::parse(r.out);
  EXPECT_EQ(result.at("image_hash"), golden.at("image_hash"));
  EXPECT_EQ(result.at("mask_hash"), golden.at("mask_hash"));
  EXPECT_EQ(image_hash(read_png(dir / "out.png")), golden.at("image_hash").get<std::string>());
  EXPECT_TRUE(std::filesystem::exists(dir / "out_mask.png"));
  EXPECT_TRUE(std::filesystem::exists(dir / "out_mask.npy"));
  EXPECT_TRUE(std::filesystem::exists(dir / "steps" / "fused.png"));
  std::filesystem::remove_all(dir);
}
