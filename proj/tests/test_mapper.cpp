#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "latentedit/error.hpp"
#include "latentedit/mapper.hpp"

using namespace latentedit;
namespace fs = std::filesystem;

namespace {

MapperConfig small_config(int layers = 2, TextMemory memory = TextMemory::pooled) {
  MapperConfig c;
  c.num_layers = layers;
  c.num_heads = 4;
  c.model_width = 16;
  c.ffn_width = 24;
  c.latent_shape = {3, 5};
  c.text_embedding_dim = 6;
  c.memory = memory;
  return c;
}

LatentCode random_code(const LatentShape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  LatentCode w(shape);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = n(rng);
  return w;
}

std::vector<double> random_vec(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = d(rng);
  return v;
}

// Gives every parameter, including the zero head, a random value.
void randomize(MapperState& s, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& p : s.params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += n(rng);
  }
}

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("latentedit_test_" + name); }

}  // namespace

TEST_SUITE("mapper") {

TEST_CASE("fresh mapper emits the identity edit") {
  auto s = init_mapper(small_config(), 3);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    auto d = map_offsets(s, random_vec(6, rng), random_code({3, 5}, rng));
    for (double v : d.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("initialization is deterministic in the seed") {
  auto a = init_mapper(small_config(), 42), b = init_mapper(small_config(), 42), c = init_mapper(small_config(), 43);
  REQUIRE(a.params.size() == b.params.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].value == b.params[i].value);
    if (a.params[i].value != c.params[i].value) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("config validation") {
  MapperConfig c;
  c.num_heads = 7;
  c.model_width = 512;
  CHECK_THROWS_AS(init_mapper(c, 0), ValidationError);
  c = MapperConfig{};
  c.num_layers = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK_NOTHROW(MapperConfig{}.validate());
  CHECK(MapperConfig::from_json(small_config().to_json()) == small_config());
}

TEST_CASE("input shape errors") {
  auto s = init_mapper(small_config(), 3);
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(map_offsets(s, random_vec(5, rng), random_code({3, 5}, rng)), ShapeError);
  CHECK_THROWS_AS(map_offsets(s, random_vec(6, rng), random_code({2, 5}, rng)), ShapeError);
  auto w = random_code({3, 5}, rng);
  w[2] = std::nan("");
  CHECK_THROWS_AS(map_offsets(s, random_vec(6, rng), w), NonFiniteError);
}

TEST_CASE("backward matches finite differences on every parameter group") {
  for (auto memory : {TextMemory::pooled, TextMemory::per_coordinate}) {
    auto s = init_mapper(small_config(2, memory), 9);
    std::mt19937_64 rng(77);
    randomize(s, rng);
    auto text = random_vec(6, rng);
    auto w = random_code({3, 5}, rng);
    LatentTensor probe({3, 5});
    std::normal_distribution<double> nd(0, 1);
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = nd(rng);

    auto objective = [&](const MapperState& st) {
      auto d = map_offsets(st, text, w);
      double v = 0;
      for (std::size_t i = 0; i < d.size(); ++i) v += probe[i] * d[i];
      return v;
    };
    Gradients g = zero_gradients(s);
    {
      Mapper mapper(s);
      MapperTrace trace;
      mapper.forward(text, w, trace);
      mapper.backward(trace, probe, g);
    }
    // Check a few entries of every parameter tensor.
    for (std::size_t pi = 0; pi < s.params.size(); ++pi) {
      auto& value = s.params[pi].value;
      for (Eigen::Index k = 0; k < std::min<Eigen::Index>(value.size(), 3); ++k) {
        const Eigen::Index idx = (k * 7919) % value.size();
        const double keep = value.data()[idx];
        const double h = 1e-5;
        value.data()[idx] = keep + h;
        const double up = objective(s);
        value.data()[idx] = keep - h;
        const double down = objective(s);
        value.data()[idx] = keep;
        const double fd = (up - down) / (2 * h);
        const double an = g[pi].data()[idx];
        CHECK_MESSAGE(std::abs(an - fd) <= 1e-6 + 1e-4 * std::abs(fd), s.params[pi].name, " analytic ", an, " fd ", fd);
      }
    }
  }
}

TEST_CASE("every parameter receives gradient after a warm-up step") {
  auto s = init_mapper(small_config(2), 5);
  std::mt19937_64 rng(8);
  auto step = [&]() {
    Gradients g = zero_gradients(s);
    Mapper mapper(s);
    for (int b = 0; b < 4; ++b) {
      MapperTrace trace;
      auto text = random_vec(6, rng);
      auto w = random_code({3, 5}, rng);
      auto d = mapper.forward(text, w, trace);
      LatentTensor grad({3, 5});
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = d[i] - (i % 2 ? 1.0 : -0.5);
      mapper.backward(trace, grad, g);
    }
    return g;
  };
  adam_step(s, step(), AdamOptions{1e-2});
  auto g = step();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK_MESSAGE(g[i].norm() > 0.0, s.params[i].name);
}

TEST_CASE("batched call equals per-sample calls") {
  auto s = init_mapper(small_config(), 2);
  std::mt19937_64 rng(4);
  randomize(s, rng);
  std::vector<std::vector<double>> texts;
  std::vector<LatentCode> codes;
  for (int i = 0; i < 6; ++i) {
    texts.push_back(random_vec(6, rng));
    codes.push_back(random_code({3, 5}, rng));
  }
  auto batch = map_offsets(s, texts, codes);
  REQUIRE(batch.size() == 6);
  for (int i = 0; i < 6; ++i) {
    auto single = map_offsets(s, texts[i], codes[i]);
    for (std::size_t k = 0; k < single.size(); ++k) CHECK(std::abs(single[k] - batch[i][k]) < 1e-5);
  }
  codes.pop_back();
  CHECK_THROWS_AS(map_offsets(s, texts, codes), ShapeError);
}

TEST_CASE("the mapper is not invariant to permuting latent layers") {
  auto s = init_mapper(small_config(), 2);
  std::mt19937_64 rng(6);
  randomize(s, rng);
  auto text = random_vec(6, rng);
  auto w = random_code({3, 5}, rng);
  LatentCode swapped(w.shape());
  for (int d = 0; d < 5; ++d) {
    swapped.at(0, d) = w.at(2, d);
    swapped.at(1, d) = w.at(1, d);
    swapped.at(2, d) = w.at(0, d);
  }
  auto a = map_offsets(s, text, w), b = map_offsets(s, text, swapped);
  double diff = 0;
  for (int d = 0; d < 5; ++d) diff += std::abs(a.at(0, d) - b.at(2, d)) + std::abs(a.at(2, d) - b.at(0, d));
  CHECK(diff > 1e-6);
}

TEST_CASE("adam update matches a scalar reference") {
  MapperConfig c = small_config(1);
  auto s = init_mapper(c, 1);
  auto g = zero_gradients(s);
  const std::size_t pi = s.params.size() - 1;  // head.b
  g[pi].setConstant(0.5);
  const double before = s.params[pi].value(0, 0);
  AdamOptions o{0.01};
  adam_step(s, g, o);
  adam_step(s, g, o);
  // Two identical gradient steps: each bias-corrected update is lr * g/|g|.
  double m = 0, v = 0, x = before;
  for (int t = 1; t <= 2; ++t) {
    m = 0.9 * m + 0.1 * 0.5;
    v = 0.999 * v + 0.001 * 0.25;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  CHECK(s.params[pi].value(0, 0) == doctest::Approx(x).epsilon(1e-12));
  CHECK(s.step == 2);
}

TEST_CASE("checkpoint round trip reproduces outputs bit-exactly") {
  auto s = init_mapper(small_config(), 12);
  std::mt19937_64 rng(13);
  randomize(s, rng);
  auto g = zero_gradients(s);
  for (auto& x : g) x.setConstant(0.1);
  adam_step(s, g, AdamOptions{});
  auto path = temp_path("roundtrip.ckpt");
  save_mapper(s, path);
  auto back = load_mapper(path);
  CHECK(back.config == s.config);
  CHECK(back.step == s.step);
  REQUIRE(back.moments.has_value());
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    CHECK(back.params[i].value == s.params[i].value);
    CHECK(back.moments->m[i] == s.moments->m[i]);
    CHECK(back.moments->v[i] == s.moments->v[i]);
  }
  auto text = random_vec(6, rng);
  auto w = random_code({3, 5}, rng);
  CHECK(map_offsets(back, text, w) == map_offsets(s, text, w));
  fs::remove(path);
}

TEST_CASE("checkpoint errors") {
  auto s = init_mapper(small_config(), 12);
  auto path = temp_path("errors.ckpt");
  save_mapper(s, path);
  CHECK_THROWS_AS(load_mapper(path, LatentShape{1, 16}), ShapeError);
  CHECK_NOTHROW(load_mapper(path, LatentShape{3, 5}));

  auto size = fs::file_size(path);
  for (auto cut : {size - 1, size / 2, std::uintmax_t{10}}) {
    fs::copy_file(path, temp_path("trunc.ckpt"), fs::copy_options::overwrite_existing);
    fs::resize_file(temp_path("trunc.ckpt"), cut);
    CHECK_THROWS_AS(load_mapper(temp_path("trunc.ckpt")), CorruptFileError);
  }
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    std::uint32_t v = 99;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_AS(load_mapper(path), VersionError);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_mapper(path), CorruptFileError);
  CHECK_THROWS_AS(load_mapper(temp_path("does_not_exist.ckpt")), IoError);
  fs::remove(path);
  fs::remove(temp_path("trunc.ckpt"));
}

}  // TEST_SUITE
