#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "latentedit/editor.hpp"
#include "latentedit/error.hpp"
#include "latentedit/latent.hpp"
#include "latentedit/synthworld.hpp"

using namespace latentedit;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("latentedit_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// A small random mapper saved for the synthetic backend.
fs::path make_checkpoint(const fs::path& dir, std::uint64_t seed = 1) {
  const auto world = synth::world_of(synth::make_synthetic_bundle());
  MapperConfig mc;
  mc.num_layers = 1;
  mc.num_heads = 2;
  mc.model_width = 8;
  mc.latent_shape = world->latent_shape();
  mc.text_embedding_dim = world->embedding_dim();
  MapperState state = init_mapper(mc, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& p : state.params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += n(rng);
  }
  const fs::path path = dir / ("mapper_" + std::to_string(seed) + ".ckpt");
  save_mapper(state, path);
  return path;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_SUITE("editor") {

TEST_CASE("alpha zero reproduces the original exactly") {
  const fs::path dir = temp_dir("editor_alpha0");
  const Editor editor = Editor::load(make_checkpoint(dir), create_bundle("synthetic"));
  const auto r = editor.edit(NoiseSeed{5}, "the person wears red lipstick", 0.0);
  CHECK(r.edited == r.original);
  CHECK(encode_png(r.edited) == encode_png(r.original));
  CHECK(r.w_edited == r.w);
  CHECK(r.edited == editor.bundle().generator->synthesize(r.w));
  fs::remove_all(dir);
}

TEST_CASE("edited latent is w plus alpha delta and diagnostics match") {
  const fs::path dir = temp_dir("editor_linear");
  const Editor editor = Editor::load(make_checkpoint(dir), create_bundle("synthetic"));
  for (double alpha : {0.3, 0.6, 1.0, 1.7}) {
    const auto r = editor.edit(NoiseSeed{9}, "the person is smiling", alpha);
    for (std::size_t i = 0; i < r.w.size(); ++i) CHECK(r.w_edited[i] == r.w[i] + alpha * r.delta[i]);
    CHECK(r.edited == editor.bundle().generator->synthesize(r.w_edited));
    CHECK(r.diagnostics.norm == latent_norm_loss(r.delta));
    CHECK(r.diagnostics.entropy == entropy_loss(r.delta));
    CHECK(r.diagnostics.warnings.empty() == (alpha <= 1.0));
  }
  fs::remove_all(dir);
}

TEST_CASE("same request twice is bit-identical") {
  const fs::path dir = temp_dir("editor_det");
  const fs::path ckpt = make_checkpoint(dir);
  EditRequest req;
  req.source = NoiseSeed{3};
  req.text = "the person has blond hair";
  req.alpha = 0.8;
  req.checkpoint = ckpt;
  const auto a = edit(req), b = edit(req);
  CHECK(a.edited == b.edited);
  CHECK(a.delta == b.delta);
  fs::remove_all(dir);
}

TEST_CASE("source forms agree") {
  const fs::path dir = temp_dir("editor_sources");
  const Editor editor = Editor::load(make_checkpoint(dir), create_bundle("synthetic"));
  const std::string text = "the person wears eyeglasses";
  const auto from_seed = editor.edit(NoiseSeed{11}, text);
  const auto from_code = editor.edit(from_seed.w, text);
  CHECK(from_code.edited == from_seed.edited);

  const Image img = from_seed.original;
  const auto inverted = editor.bundle().inverter->invert(img);
  const auto from_image = editor.edit(img, text);
  const auto from_inverted = editor.edit(inverted, text);
  CHECK(from_image.edited == from_inverted.edited);

  write_png(dir / "src.png", img);
  const auto from_path = editor.edit(ImagePath{dir / "src.png"}, text);
  CHECK(from_path.w == editor.bundle().inverter->invert(read_png(dir / "src.png")));
  fs::remove_all(dir);
}

TEST_CASE("input validation happens before any backend work") {
  CHECK_THROWS_AS(validate_edit_inputs("   ", 1.0), ValidationError);
  CHECK_THROWS_AS(validate_edit_inputs("x", -0.1), ValidationError);
  CHECK_THROWS_AS(validate_edit_inputs("x", std::nan("")), ValidationError);
  CHECK_NOTHROW(validate_edit_inputs("x", 2.0));
  EditRequest req;
  req.text = "";
  req.backend = "no-such-backend";
  req.checkpoint = "/nonexistent.ckpt";
  CHECK_THROWS_AS(edit(req), ValidationError);
}

TEST_CASE("editor errors") {
  const fs::path dir = temp_dir("editor_errors");
  const fs::path ckpt = make_checkpoint(dir);
  BackendBundle no_inv = create_bundle("synthetic");
  no_inv.inverter.reset();
  const Editor editor(load_mapper(ckpt), no_inv);
  CHECK_THROWS_AS(editor.edit(Image(3, 64, 64), "the person is smiling"), BackendError);
  CHECK_THROWS_AS(editor.edit(LatentCode({2, 16}), "the person is smiling"), ShapeError);
  CHECK_THROWS_AS(Editor::load(dir / "missing.ckpt", create_bundle("synthetic")), IoError);

  MapperState state = load_mapper(ckpt);
  state.config.text_embedding_dim = 5;
  CHECK_THROWS_AS(Editor(state, create_bundle("synthetic")), ShapeError);

  const auto r = Editor(load_mapper(ckpt), create_bundle("synthetic")).edit(NoiseSeed{1}, "the person has purple antlers");
  CHECK_FALSE(r.diagnostics.warnings.empty());
  fs::remove_all(dir);
}

TEST_CASE("batch edits fail independently") {
  const fs::path dir = temp_dir("editor_batch");
  const fs::path ckpt = make_checkpoint(dir);
  const LatentCode w = Editor::load(ckpt, create_bundle("synthetic")).resolve(NoiseSeed{4});
  write_latent(dir / "w.latent", w);
  {
    std::ofstream out(dir / "requests.jsonl");
    out << R"({"id": "a", "seed": 1, "text": "the person is smiling", "alpha": 0.5})" << '\n';
    out << '\n';
    out << R"({"id": "b", "seed": 2, "text": "the person is smiling", "ckpt": "/nonexistent.ckpt"})" << '\n';
    out << nlohmann::json{{"id", "c"}, {"latent", (dir / "w.latent").string()}, {"text", "the person wears a hat"}}.dump() << '\n';
    out << R"({"id": "d", "text": "no source"})" << '\n';
    out << "not json\n";
  }
  BatchDefaults defaults;
  defaults.checkpoint = ckpt;
  const auto summary = edit_batch(dir / "requests.jsonl", dir / "out", defaults);
  CHECK(summary.succeeded == 2);
  CHECK(summary.failed == 3);
  CHECK(summary.exit_code() == 0);
  const auto manifest = read_json(dir / "out" / "manifest.json");
  CHECK(manifest == summary.manifest);
  REQUIRE(manifest["items"].size() == 5);
  CHECK(manifest["items"][0]["status"] == "ok");
  CHECK(manifest["items"][1]["status"] == "error");
  CHECK(manifest["items"][2]["status"] == "ok");
  CHECK(fs::exists(dir / "out" / "0_edited.png"));
  CHECK(fs::exists(dir / "out" / "2_original.png"));

  std::ifstream png(dir / "out" / "0_edited.png", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(png)), std::istreambuf_iterator<char>());
  CHECK(manifest["items"][0]["sha256"]["edited"] == sha256_hex(bytes));

  const auto again = edit_batch(dir / "requests.jsonl", dir / "out2", defaults);
  CHECK(again.manifest == summary.manifest);
  fs::remove_all(dir);
}

TEST_CASE("batch edge cases") {
  const fs::path dir = temp_dir("editor_batch_edges");
  { std::ofstream out(dir / "empty.jsonl"); }
  const auto empty = edit_batch(dir / "empty.jsonl", dir / "out");
  CHECK(empty.succeeded == 0);
  CHECK(empty.failed == 0);
  CHECK(empty.exit_code() == 0);
  CHECK(read_json(dir / "out" / "manifest.json")["items"].empty());
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"seed": 1, "text": "x"})" << '\n';
  }
  CHECK(edit_batch(dir / "bad.jsonl", dir / "out_bad").exit_code() == 1);
  CHECK_THROWS_AS(edit_batch(dir / "missing.jsonl", dir / "out3"), IoError);
  fs::remove_all(dir);
}

}  // TEST_SUITE
