#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "latentedit/error.hpp"
#include "latentedit/mapper.hpp"
#include "latentedit/objective.hpp"
#include "latentedit/service.hpp"
#include "latentedit/synthworld.hpp"

#include "httplib.h"

using namespace latentedit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("latentedit_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path make_checkpoint(const fs::path& dir) {
  const auto world = synth::world_of(synth::make_synthetic_bundle());
  MapperConfig mc;
  mc.num_layers = 1;
  mc.num_heads = 2;
  mc.model_width = 8;
  mc.latent_shape = world->latent_shape();
  mc.text_embedding_dim = world->embedding_dim();
  MapperState state = init_mapper(mc, 2);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& p : state.params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += n(rng);
  }
  save_mapper(state, dir / "mapper.ckpt");
  return dir / "mapper.ckpt";
}

ServiceConfig config_for(const fs::path& dir) {
  ServiceConfig c;
  c.checkpoint = make_checkpoint(dir);
  c.port = 0;
  return c;
}

HttpResponse post_edit(Service& s, const json& body) { return s.handle("POST", "/edit", {}, body.dump()); }

json body_of(const HttpResponse& r) { return json::parse(r.body); }

// Synthetic generator that takes a while per render.
class SlowGenerator : public Generator {
 public:
  explicit SlowGenerator(std::shared_ptr<const Generator> inner) : inner_(std::move(inner)) {}
  LatentShape latent_shape() const override { return inner_->latent_shape(); }
  ImageSize image_size() const override { return inner_->image_size(); }
  std::vector<double> sample_noise(std::uint64_t seed) const override { return inner_->sample_noise(seed); }
  LatentCode map_noise(std::span<const double> z) const override { return inner_->map_noise(z); }
  Image synthesize(const LatentCode& w) const override {
    std::this_thread::sleep_for(std::chrono::milliseconds(150));
    return inner_->synthesize(w);
  }
  LatentTensor synthesize_vjp(const LatentCode& w, const Image& g) const override { return inner_->synthesize_vjp(w, g); }

 private:
  std::shared_ptr<const Generator> inner_;
};

void register_slow_backend() {
  static const bool once = [] {
    register_backend("test-slow", [](const BackendConfig&) {
      BackendBundle b = synth::make_synthetic_bundle();
      b.name = "test-slow";
      b.generator = std::make_shared<SlowGenerator>(b.generator);
      return b;
    });
    return true;
  }();
  (void)once;
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("config validation, json and environment") {
  ServiceConfig c;
  c.checkpoint = "m.ckpt";
  CHECK_NOTHROW(c.validate());
  CHECK(ServiceConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(ServiceConfig::from_json({{"prot", 1}}), ParseError);
  for (auto mutate : std::vector<std::function<void(ServiceConfig&)>>{
           [](ServiceConfig& x) { x.max_concurrent_edits = 0; }, [](ServiceConfig& x) { x.max_body_bytes = 0; },
           [](ServiceConfig& x) { x.port = 70000; }, [](ServiceConfig& x) { x.checkpoint.clear(); },
           [](ServiceConfig& x) { x.session_capacity = 0; }, [](ServiceConfig& x) { x.log_page_size = 0; }}) {
    ServiceConfig bad = c;
    mutate(bad);
    CHECK_THROWS_AS(bad.validate(), ValidationError);
  }

  setenv("LATENTEDIT_BIND", "0.0.0.0", 1);
  setenv("LATENTEDIT_PORT", "9123", 1);
  setenv("LATENTEDIT_CHECKPOINT", "/tmp/other.ckpt", 1);
  setenv("LATENTEDIT_LOG", "/tmp/train_log.tsv", 1);
  c.apply_environment();
  CHECK(c.bind == "0.0.0.0");
  CHECK(c.port == 9123);
  CHECK(c.checkpoint == "/tmp/other.ckpt");
  CHECK(c.log_path == fs::path("/tmp/train_log.tsv"));
  setenv("LATENTEDIT_PORT", "eighty", 1);
  CHECK_THROWS_AS(c.apply_environment(), ValidationError);
  for (const char* v : {"LATENTEDIT_BIND", "LATENTEDIT_PORT", "LATENTEDIT_CHECKPOINT", "LATENTEDIT_LOG"}) unsetenv(v);

  const fs::path dir = temp_dir("service_cfg");
  {
    std::ofstream out(dir / "serve.json");
    out << R"({"checkpoint": "runs/m.ckpt", "port": 0, "max_concurrent_edits": 3})";
  }
  const auto loaded = ServiceConfig::load(dir / "serve.json");
  CHECK(loaded.checkpoint == dir / "runs/m.ckpt");
  CHECK(loaded.max_concurrent_edits == 3);
  fs::remove_all(dir);
}

TEST_CASE("requests during startup get 503") {
  const fs::path dir = temp_dir("service_startup");
  Service s(config_for(dir));
  CHECK(s.handle("GET", "/attributes", {}, "").status == 503);
  CHECK(s.handle("POST", "/edit", {}, "{}").status == 503);
  s.start_initialization();
  CHECK(s.wait_ready());
  CHECK(s.handle("GET", "/attributes", {}, "").status == 200);
  fs::remove_all(dir);
}

TEST_CASE("failed initialization keeps answering 503") {
  ServiceConfig c;
  c.checkpoint = "/nonexistent/mapper.ckpt";
  Service s(c);
  s.start_initialization();
  CHECK_FALSE(s.wait_ready());
  const auto r = s.handle("GET", "/attributes", {}, "");
  CHECK(r.status == 503);
  CHECK(body_of(r)["error"].get<std::string>().find("initialize") != std::string::npos);
}

TEST_CASE("attributes listing") {
  const fs::path dir = temp_dir("service_attrs");
  ServiceConfig c = config_for(dir);
  Service synthetic(c);
  synthetic.start_initialization();
  REQUIRE(synthetic.wait_ready());
  auto j = body_of(synthetic.handle("GET", "/attributes", {}, ""));
  CHECK(j["taxonomy"] == "synthetic");
  CHECK(j["attributes"].size() == 13);
  CHECK(j["attributes"][0]["id"] == "blond_hair");
  CHECK(j["attributes"][0]["group"] == "hair");

  c.taxonomy = "celeba40";
  Service celeba(c);
  celeba.start_initialization();
  REQUIRE(celeba.wait_ready());
  j = body_of(celeba.handle("GET", "/attributes", {}, ""));
  CHECK(j["attributes"].size() == 40);
  CHECK(j["groups"].size() == 5);
  CHECK(body_of(celeba.handle("GET", "/attributes", {}, "")) == j);
  CHECK(celeba.handle("POST", "/attributes", {}, "").status == 405);
  CHECK(celeba.handle("GET", "/nope", {}, "").status == 404);
  fs::remove_all(dir);
}

TEST_CASE("edit round trips") {
  const fs::path dir = temp_dir("service_edit");
  Service s(config_for(dir));
  s.start_initialization();
  REQUIRE(s.wait_ready());

  auto r = post_edit(s, {{"text", "the person wears red lipstick"}, {"alpha", 0.0}, {"source", {{"seed", 4}}}, {"request_id", 17}});
  REQUIRE(r.status == 200);
  auto j = body_of(r);
  CHECK(j["request_id"] == 17);
  CHECK(j["original"]["png_base64"] == j["edited"]["png_base64"]);
  CHECK(j["original"]["sha256"] == sha256_hex(base64_decode(j["original"]["png_base64"].get<std::string>())));

  const json body = {{"text", "the person is smiling"}, {"alpha", 0.7}, {"source", {{"seed", 8}}}};
  const auto a = body_of(post_edit(s, body)), b = body_of(post_edit(s, body));
  CHECK(a["edited"]["png_base64"] == b["edited"]["png_base64"]);
  CHECK(a["diagnostics"]["delta"] == b["diagnostics"]["delta"]);

  const std::string sid = a["session_id"];
  const auto w = a["diagnostics"]["w"].get<std::vector<double>>();
  const auto f = body_of(post_edit(s, {{"text", "the person is smiling"}, {"alpha", 0.25}, {"source", {{"latent_id", sid}}}}));
  CHECK(f["session_id"] == sid);
  CHECK(f["diagnostics"]["w"].get<std::vector<double>>() == w);
  const auto d = f["diagnostics"]["delta"].get<std::vector<double>>();
  const auto we = f["diagnostics"]["w_edited"].get<std::vector<double>>();
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(we[i] == w[i] + 0.25 * d[i]);
  CHECK(f["original"]["png_base64"] == a["original"]["png_base64"]);

  const auto img = body_of(post_edit(s, {{"text", "the person is smiling"}, {"alpha", 0.7}, {"source", {{"image", a["original"]["png_base64"]}}}}));
  CHECK(img["diagnostics"]["w"].size() == w.size());
  CHECK(img["edited"]["width"] == 64);
  fs::remove_all(dir);
}

TEST_CASE("edit errors") {
  const fs::path dir = temp_dir("service_errors");
  ServiceConfig c = config_for(dir);
  c.max_body_bytes = 2048;
  Service s(c);
  s.start_initialization();
  REQUIRE(s.wait_ready());
  const json seed = {{"seed", 1}};
  CHECK(s.handle("POST", "/edit", {}, "{not json").status == 400);
  CHECK(post_edit(s, json::array()).status == 400);
  CHECK(post_edit(s, {{"alpha", 1}, {"source", seed}}).status == 400);
  CHECK(post_edit(s, {{"text", "x"}, {"alpha", -1}, {"source", seed}}).status == 400);
  CHECK(post_edit(s, {{"text", "x"}, {"alpha", "big"}, {"source", seed}}).status == 400);
  CHECK(post_edit(s, {{"text", "x"}, {"source", {{"seed", 1}, {"latent_id", "a"}}}}).status == 400);
  CHECK(post_edit(s, {{"text", "x"}, {"source", {{"seed", -3}}}}).status == 400);
  CHECK(post_edit(s, {{"text", "x"}, {"source", {{"image", "!!!!"}}}}).status == 400);
  CHECK(post_edit(s, {{"text", "x"}, {"source", {{"image", base64_encode("not a png")}}}}).status == 400);
  CHECK(post_edit(s, {{"text", "  "}, {"source", seed}}).status == 422);
  CHECK(post_edit(s, {{"text", "x"}, {"source", {{"image", std::string(4000, 'A')}}}}).status == 413);

  Image noise(3, 64, 64);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& v : noise.data) v = u(rng);
  ServiceConfig big = c;
  big.max_body_bytes = 1 << 20;
  Service s2(big);
  s2.start_initialization();
  REQUIRE(s2.wait_ready());
  CHECK(post_edit(s2, {{"text", "x"}, {"source", {{"image", base64_encode(encode_png(noise))}}}}).status == 422);

  const auto expired = post_edit(s, {{"text", "x"}, {"source", {{"latent_id", "0123456789abcdef"}}}});
  CHECK(expired.status == 404);
  CHECK(body_of(expired).contains("hint"));
  fs::remove_all(dir);
}

TEST_CASE("a restarted service forgets session ids gracefully") {
  const fs::path dir = temp_dir("service_restart");
  const ServiceConfig c = config_for(dir);
  std::string sid;
  {
    Service s(c);
    s.start_initialization();
    REQUIRE(s.wait_ready());
    sid = body_of(post_edit(s, {{"text", "x"}, {"source", {{"seed", 1}}}}))["session_id"];
    CHECK(post_edit(s, {{"text", "x"}, {"source", {{"latent_id", sid}}}}).status == 200);
  }
  Service s(c);
  s.start_initialization();
  REQUIRE(s.wait_ready());
  CHECK(post_edit(s, {{"text", "x"}, {"source", {{"latent_id", sid}}}}).status == 404);
  fs::remove_all(dir);
}

TEST_CASE("session store evicts the least recently used id") {
  const fs::path dir = temp_dir("service_lru");
  ServiceConfig c = config_for(dir);
  c.session_capacity = 2;
  Service s(c);
  s.start_initialization();
  REQUIRE(s.wait_ready());
  auto open = [&](int seed) { return body_of(post_edit(s, {{"text", "x"}, {"source", {{"seed", seed}}}}))["session_id"].get<std::string>(); };
  auto reuse = [&](const std::string& id) { return post_edit(s, {{"text", "x"}, {"source", {{"latent_id", id}}}}).status; };
  const auto a = open(1), b = open(2);
  CHECK(reuse(a) == 200);
  const auto c3 = open(3);
  CHECK(reuse(b) == 404);
  CHECK(reuse(a) == 200);
  CHECK(reuse(c3) == 200);
  fs::remove_all(dir);
}

TEST_CASE("latest log pages") {
  const fs::path dir = temp_dir("service_log");
  ServiceConfig c = config_for(dir);
  c.log_path = dir / "train_log.tsv";
  c.log_page_size = 4;
  Service s(c);
  s.start_initialization();
  REQUIRE(s.wait_ready());
  CHECK(s.handle("GET", "/runs/latest-log", {}, "").status == 404);
  {
    LossLogWriter w(*c.log_path, false);
    for (int i = 1; i <= 10; ++i) w.write(LossReport{0.5, 0, 0, 0, 0, 0, 0.5, i, 0, "p"});
  }
  auto j = body_of(s.handle("GET", "/runs/latest-log", {{"since", "0"}}, ""));
  CHECK(j["records"].size() == 4);
  CHECK(j["more"] == true);
  CHECK(j["next_since"] == 4);
  j = body_of(s.handle("GET", "/runs/latest-log", {{"since", "8"}}, ""));
  CHECK(j["records"].size() == 2);
  CHECK(j["more"] == false);
  CHECK(j["records"][0]["step"] == 9);
  j = body_of(s.handle("GET", "/runs/latest-log", {{"since", "10"}}, ""));
  CHECK(j["records"].empty());
  CHECK(j["next_since"] == 10);
  CHECK(s.handle("GET", "/runs/latest-log", {{"since", "ten"}}, "").status == 400);

  {
    std::ofstream out(*c.log_path, std::ios::app);
    out << "11\t0\t0.1";
  }
  j = body_of(s.handle("GET", "/runs/latest-log", {{"since", "8"}}, ""));
  CHECK(j["records"].size() == 2);

  ServiceConfig big = c;
  big.log_page_size = 500;
  Service all(big);
  all.start_initialization();
  REQUIRE(all.wait_ready());
  CHECK(body_of(all.handle("GET", "/runs/latest-log", {{"since", "0"}}, ""))["records"].size() == 10);
  fs::remove_all(dir);
}

TEST_CASE("edits beyond the limit queue, overflow gets 429") {
  register_slow_backend();
  const fs::path dir = temp_dir("service_queue");
  ServiceConfig c = config_for(dir);
  c.backend = "test-slow";
  c.taxonomy = "synthetic";
  c.max_concurrent_edits = 4;  // clamped to 1: the slow generator is single-threaded
  c.max_queued_edits = 1;
  Service s(c);
  s.start_initialization();
  REQUIRE(s.wait_ready());
  const json body = {{"text", "x"}, {"source", {{"seed", 1}}}};
  int first = 0, second = 0, third = 0;
  std::thread a([&] { first = post_edit(s, body).status; });
  std::this_thread::sleep_for(std::chrono::milliseconds(60));
  std::thread b([&] { second = post_edit(s, body).status; });
  std::this_thread::sleep_for(std::chrono::milliseconds(60));
  third = post_edit(s, body).status;
  a.join();
  b.join();
  CHECK(first == 200);
  CHECK(second == 200);
  CHECK(third == 429);
  fs::remove_all(dir);
}

TEST_CASE("serves over http") {
  const fs::path dir = temp_dir("service_http");
  ServiceConfig c = config_for(dir);
  c.max_body_bytes = 4096;
  Service s(c);
  s.start_initialization();
  const int port = s.bind();
  REQUIRE(port > 0);
  std::thread server([&] { s.serve(); });
  REQUIRE(s.wait_ready());
  httplib::Client client("127.0.0.1", port);
  for (int i = 0; i < 50 && !client.Get("/attributes"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  auto res = client.Get("/attributes");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body)["attributes"].size() == 13);
  res = client.Post("/edit", json{{"text", "the person wears a hat"}, {"source", {{"seed", 3}}}}.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  res = client.Post("/edit", std::string(10000, ' '), "application/json");
  REQUIRE(res);
  CHECK(res->status == 413);
  res = client.Get("/runs/latest-log?since=0");
  REQUIRE(res);
  CHECK(res->status == 404);
  s.stop();
  server.join();
  fs::remove_all(dir);
}

}  // TEST_SUITE
