#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "latentedit/error.hpp"
#include "latentedit/objective.hpp"
#include "latentedit/synthworld.hpp"

using namespace latentedit;
namespace fs = std::filesystem;

namespace {

Image random_image(std::mt19937_64& rng, int h = 8, int w = 8) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Image img(3, h, w);
  for (double& v : img.data) v = u(rng);
  return img;
}

Mask random_mask(std::mt19937_64& rng, int h = 8, int w = 8) {
  Mask m(h, w);
  for (auto& v : m.data) v = static_cast<std::uint8_t>(rng() % 2);
  return m;
}

// Pixel loop over the AND of two masks, every channel.
double masked_l2_oracle(const Image& a, const Image& b, const Mask& m1, const Mask& m2) {
  double s = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    for (int y = 0; y < a.height; ++y) {
      for (int x = 0; x < a.width; ++x) {
        if (m1.at(y, x) && m2.at(y, x)) {
          const double d = a.at(c, y, x) - b.at(c, y, x);
          s += d * d;
        }
      }
    }
  }
  return std::sqrt(s);
}

RegionMasks split_masks(const Mask& face) {
  RegionMasks r;
  r.face = face;
  r.background = Mask(face.height, face.width);
  for (std::size_t i = 0; i < face.data.size(); ++i) r.background.data[i] = face.data[i] ? 0 : 1;
  return r;
}

class FixedEmbedder : public IdentityEmbedder {
 public:
  ImageSize image_size() const override { return {3, 8, 8}; }
  std::vector<double> embed(const Image&) const override { return {0.3, -1.0, 2.0}; }
  Image embed_vjp(const Image& image, std::span<const double>) const override { return Image(image.channels, image.height, image.width); }
};

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("latentedit_test_" + name); }

}  // namespace

TEST_SUITE("objective") {

TEST_CASE("loss weights defaults and validation") {
  const LossWeights w;
  CHECK(w.id == 0.2);
  CHECK(w.bg == 1.0);
  CHECK(w.l2_img == 0.02);
  CHECK(w.l2_w == 0.1);
  CHECK(w.en == 0.2);
  CHECK(LossWeights::from_json(w.to_json()) == w);
  CHECK_THROWS_AS(LossWeights::from_json({{"idd", 0.1}}), ParseError);
  CHECK_THROWS_AS(LossWeights::from_json({{"id", "x"}}), ParseError);
  LossWeights neg;
  neg.bg = -1.0;
  CHECK_THROWS_AS(neg.validate(), ValidationError);
}

TEST_CASE("total_loss") {
  LossReport r;
  CHECK(total_loss(r, LossWeights{}) == 0.0);
  r = {1, 1, 1, 1, 1, 1};
  CHECK(total_loss(r, LossWeights{}) == doctest::Approx(2.52).epsilon(1e-12));
  CHECK(r.total == doctest::Approx(2.52).epsilon(1e-12));
  r = {0.7, 3, 4, 5, 6, 7};
  CHECK(total_loss(r, LossWeights{0, 0, 0, 0, 0}) == 0.7);
  r.bg = std::nan("");
  CHECK_THROWS_AS(total_loss(r, LossWeights{}), NonFiniteError);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int i = 0; i < 50; ++i) {
    LossReport q{u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
    LossWeights w{u(rng), u(rng), u(rng), u(rng), u(rng)};
    const double expect = q.clip + w.id * q.id + w.bg * q.bg + w.l2_img * q.l2_img + w.l2_w * q.l2_w + w.en * q.en;
    CHECK(std::abs(total_loss(q, w) - expect) < 1e-6);
  }
}

TEST_CASE("cosine based losses") {
  const std::vector<double> a{1.0, 2.0, -0.5}, b{0.0, 0.0, 1.0}, c{2.0, -1.0, 0.0};
  CHECK(std::abs(clip_alignment_loss(a, a)) < 1e-12);
  CHECK(clip_alignment_loss(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 3.0}) == doctest::Approx(1.0));
  CHECK(clip_alignment_loss(a, std::vector<double>{-1.0, -2.0, 0.5}) == doctest::Approx(2.0));
  CHECK(cosine_similarity(a, c) == doctest::Approx(0.0));
  CHECK_THROWS_AS(cosine_similarity(a, std::vector<double>{0, 0, 0}), ValidationError);
  CHECK_THROWS_AS(cosine_similarity(a, std::vector<double>{1, 2}), ShapeError);

  const auto g = cosine_distance_gradient(a, b);
  for (int i = 0; i < 3; ++i) {
    auto p = a, m = a;
    p[i] += 1e-6;
    m[i] -= 1e-6;
    const double fd = ((1 - cosine_similarity(p, b)) - (1 - cosine_similarity(m, b))) / 2e-6;
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("identity loss") {
  std::mt19937_64 rng(3);
  const Image x = random_image(rng), y = random_image(rng);
  const FixedEmbedder fixed;
  CHECK(std::abs(identity_loss(x, y, fixed)) < 1e-12);

  const auto bundle = synth::make_synthetic_bundle();
  const auto world = synth::world_of(bundle);
  LatentCode w(world->latent_shape());
  const Image base = world->render_image(w);
  CHECK(std::abs(identity_loss(base, base, *bundle.identity_embedder)) < 1e-12);
  LatentCode hair = w, shape = w;
  hair[static_cast<std::size_t>(world->controlling_dim("blond_hair"))] = 0.3;
  shape[static_cast<std::size_t>(world->controlling_dim("face_width"))] = 0.3;
  const double hair_loss = identity_loss(world->render_image(hair), base, *bundle.identity_embedder);
  const double shape_loss = identity_loss(world->render_image(shape), base, *bundle.identity_embedder);
  CHECK(hair_loss < shape_loss);
}

TEST_CASE("clip loss prefers the matching prompt") {
  const auto bundle = synth::make_synthetic_bundle();
  const auto world = synth::world_of(bundle);
  LatentCode w(world->latent_shape());
  w[static_cast<std::size_t>(world->controlling_dim("wearing_lipstick"))] = 3.0;
  const Image lips = world->render_image(w);
  const auto& enc = *bundle.image_text_encoder;
  CHECK(clip_alignment_loss(lips, "the person wears red lipstick", enc) < clip_alignment_loss(lips, "the person has wavy hair", enc));
}

TEST_CASE("combine_masks") {
  const Mask t(4, 4, true), f(4, 4, false);
  CHECK(combine_masks(t, t) == t);
  CHECK(combine_masks(t, f) == f);
  Mask checker(4, 4), inverse(4, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      checker.set(y, x, (x + y) % 2 == 0);
      inverse.set(y, x, (x + y) % 2 == 1);
    }
  }
  CHECK(combine_masks(checker, inverse) == f);
  CHECK_THROWS_AS(combine_masks(t, Mask(3, 4)), ShapeError);
}

TEST_CASE("region losses match the pixel-loop oracle") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 20; ++t) {
    const Image a = random_image(rng), b = random_image(rng);
    const RegionMasks ma = split_masks(random_mask(rng)), mb = split_masks(random_mask(rng));
    CHECK(std::abs(face_region_loss(a, b, ma, mb) - masked_l2_oracle(a, b, ma.face, mb.face)) < 1e-6);
    CHECK(std::abs(background_loss(a, b, ma, mb) - masked_l2_oracle(a, b, ma.background, mb.background)) < 1e-6);
    CHECK(background_loss(a, a, ma, mb) == 0.0);
    CHECK(face_region_loss(a, a, ma, mb) == 0.0);

    int count = 0;
    const Mask both = combine_masks(ma.face, mb.face);
    for (auto v : both.data) count += v;
    if (count > 0) {
      const double rms = face_region_loss(a, b, ma, mb, {true});
      CHECK(rms == doctest::Approx(masked_l2_oracle(a, b, ma.face, mb.face) / std::sqrt(3.0 * count)).epsilon(1e-12));
    }
  }
}

TEST_CASE("empty region gives zero loss") {
  std::mt19937_64 rng(1);
  const Image a = random_image(rng), b = random_image(rng);
  RegionMasks none{Mask(8, 8), Mask(8, 8)};
  CHECK(background_loss(a, b, none, none) == 0.0);
  CHECK(face_region_loss(a, b, none, none, {true}) == 0.0);
}

TEST_CASE("region losses on synthetic renders") {
  const auto world = synth::world_of(synth::make_synthetic_bundle());
  LatentCode w(world->latent_shape());
  const auto orig = world->render(w);
  LatentCode lip = w;
  lip[static_cast<std::size_t>(world->controlling_dim("wearing_lipstick"))] = 1.0;
  const auto edit = world->render(lip);
  CHECK(background_loss(edit.image, orig.image, edit.masks, orig.masks) == 0.0);
  CHECK(face_region_loss(edit.image, orig.image, edit.masks, orig.masks) > 0.0);
  CHECK(face_region_loss(edit.image, orig.image, edit.masks, orig.masks) ==
        doctest::Approx(masked_l2_oracle(edit.image, orig.image, edit.masks.face, orig.masks.face)).epsilon(1e-12));
}

TEST_CASE("masked_l2 gradient matches central differences") {
  std::mt19937_64 rng(6);
  const Image a = random_image(rng, 4, 4), b = random_image(rng, 4, 4);
  const Mask m = random_mask(rng, 4, 4);
  for (bool normalize : {false, true}) {
    const Image g = masked_l2_gradient(a, b, m, {normalize});
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      Image p = a, q = a;
      p.data[i] += 1e-6;
      q.data[i] -= 1e-6;
      const double fd = (masked_l2(p, b, m, {normalize}) - masked_l2(q, b, m, {normalize})) / 2e-6;
      CHECK(g.data[i] == doctest::Approx(fd).epsilon(1e-5).scale(1e-8));
    }
  }
  const Image zero = masked_l2_gradient(a, a, m);
  for (double v : zero.data) CHECK(v == 0.0);
}

TEST_CASE("training log round trip and partial records") {
  const fs::path path = temp_path("log.tsv");
  fs::remove(path);
  {
    LossLogWriter writer(path, false);
    for (int s = 1; s <= 10; ++s) {
      LossReport r{0.1 * s, 0.2, 1.0 / 3.0, 0.4, 0.5, 0.6, 0.0, s, 0, "tab\there, new\nline \\ slash"};
      r.total = 1.0 / s;
      writer.write(r);
    }
  }
  auto all = read_loss_log(path);
  REQUIRE(all.size() == 10);
  CHECK(all[2].bg == 1.0 / 3.0);
  CHECK(all[2].prompt == "tab\there, new\nline \\ slash");
  CHECK(read_loss_log(path, 0).size() == 10);
  CHECK(read_loss_log(path, 10).empty());
  CHECK(read_loss_log(path, 7).size() == 3);

  {
    std::ofstream out(path, std::ios::app);
    out << "11\t0\t0.5";
  }
  CHECK(read_loss_log(path).size() == 10);
  {
    LossLogWriter writer(path, true);
    (void)writer;
  }
  CHECK(parse_loss_record(format_loss_record(all[4])) == all[4]);
  CHECK_THROWS_AS(parse_loss_record("1\t2\t3"), ParseError);
  CHECK_THROWS_AS(read_loss_log(temp_path("missing.tsv")), IoError);
  {
    std::ofstream out(path);
    out << "not a header\n";
  }
  CHECK_THROWS_AS(read_loss_log(path), ParseError);
  fs::remove(path);
}

}  // TEST_SUITE
