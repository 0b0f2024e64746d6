#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "latentedit/backends.hpp"
#include "latentedit/error.hpp"
#include "latentedit/synthworld.hpp"

using namespace latentedit;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("latentedit_test_" + name); }

class TinyGenerator : public Generator {
 public:
  LatentShape latent_shape() const override { return {1, 2}; }
  ImageSize image_size() const override { return {3, 4, 4}; }
  std::vector<double> sample_noise(std::uint64_t) const override { return {0.0, 0.0}; }
  LatentCode map_noise(std::span<const double> z) const override { return LatentCode({1, 2}, {z[0], z[1]}); }
  Image synthesize(const LatentCode&) const override { return Image(3, 4, 4); }
  LatentTensor synthesize_vjp(const LatentCode&, const Image&) const override { return LatentTensor({1, 2}); }
};

}  // namespace

TEST_SUITE("backends") {

TEST_CASE("builtin backends are registered") {
  const auto names = registered_backends();
  CHECK(std::find(names.begin(), names.end(), "synthetic") != names.end());
  CHECK(std::find(names.begin(), names.end(), "pretrained-faces") != names.end());
}

TEST_CASE("synthetic bundle is complete and concurrent") {
  const BackendBundle b = create_bundle("synthetic");
  CHECK(b.name == "synthetic");
  CHECK_NOTHROW(b.validate());
  CHECK(b.all_concurrent());
  CHECK(b.inverter != nullptr);
  CHECK(synth::world_of(b) != nullptr);
  CHECK(b.generator->latent_shape() == LatentShape{1, 16});
  CHECK(b.image_text_encoder->embedding_dim() == 27);
}

TEST_CASE("synthetic options reach the world") {
  BackendConfig cfg;
  auto spec = synth::SyntheticSpec::defaults();
  spec.threshold = 0.5;
  cfg.options = {{"world", spec.to_json()}};
  const auto world = synth::world_of(create_bundle(cfg));
  REQUIRE(world);
  CHECK(world->spec().threshold == 0.5);
}

TEST_CASE("pretrained-faces reports missing weights") {
  CHECK_THROWS_AS(create_bundle("pretrained-faces"), AssetMissingError);
  BackendConfig cfg;
  cfg.backend = "pretrained-faces";
  cfg.assets["generator"] = "/nonexistent/stylegan.pt";
  CHECK_THROWS_AS(create_bundle(cfg), AssetMissingError);
}

TEST_CASE("unknown backend and bad registrations") {
  CHECK_THROWS_AS(create_bundle("no-such-backend"), BackendError);
  CHECK_THROWS_AS(register_backend("synthetic", [](const BackendConfig&) { return BackendBundle{}; }), ValidationError);
  CHECK_THROWS_AS(register_backend("", [](const BackendConfig&) { return BackendBundle{}; }), ValidationError);
  CHECK_THROWS_AS(register_backend("null-factory", BackendFactory{}), ValidationError);
}

TEST_CASE("registered backend with mismatched members is rejected") {
  register_backend("test-mismatch", [](const BackendConfig&) {
    BackendBundle b = synth::make_synthetic_bundle();
    b.name = "test-mismatch";
    b.generator = std::make_shared<TinyGenerator>();
    return b;
  });
  CHECK_THROWS_AS(create_bundle("test-mismatch"), ValidationError);

  BackendBundle missing = synth::make_synthetic_bundle();
  missing.face_segmenter.reset();
  CHECK_THROWS_AS(missing.validate(), ValidationError);
  BackendBundle no_inverter = synth::make_synthetic_bundle();
  no_inverter.inverter.reset();
  CHECK_NOTHROW(no_inverter.validate());
}

TEST_CASE("backend config files") {
  const fs::path dir = temp_path("backend_cfg");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "b.json");
    out << R"({"backend": "pretrained-faces", "device": "cpu", "assets": {"generator": "weights/g.pt"}})";
  }
  const BackendConfig cfg = load_backend_config(dir / "b.json");
  CHECK(cfg.backend == "pretrained-faces");
  CHECK(cfg.assets.at("generator") == dir / "weights/g.pt");
  {
    std::ofstream out(dir / "bad.json");
    out << "{ nope";
  }
  CHECK_THROWS_AS(load_backend_config(dir / "bad.json"), ParseError);
  CHECK_THROWS_AS(load_backend_config(dir / "missing.json"), IoError);
  CHECK_THROWS_AS(parse_backend_config(nlohmann::json::array()), ParseError);
  CHECK_THROWS_AS(parse_backend_config({{"backend", ""}}), ValidationError);
  fs::remove_all(dir);
}

}  // TEST_SUITE
