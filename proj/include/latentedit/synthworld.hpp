#pragma once

#include <array>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "latentedit/backends.hpp"
#include "latentedit/image.hpp"
#include "latentedit/taxonomy.hpp"
#include "latentedit/tensor.hpp"

namespace latentedit::synth {

using Vec3 = std::array<double, 3>;

/// Axis-aligned region in normalized image coordinates, [x0, x1) x [y0, y1).
struct Rect {
  double x0, x1, y0, y1;
};

/// How one latent dimension shows up in pixels.
///
/// A feature adds `value * amplitude * pattern(x) * color` to every pixel of
/// its regions, where value = tanh(gain * w[dim]). `base` is a fixed colour
/// offset of the region relative to its layer, present at value 0.
struct Feature {
  std::string id;
  std::string family;
  int dim = 0;
  bool hair_layer = false;   // hair layer vs face layer
  bool whole_face = false;   // skin tone: applies to every face-layer pixel
  bool striped = false;      // zero-mean row stripes instead of a flat patch
  std::vector<Rect> regions;
  Vec3 color{};              // unit direction
  Vec3 base{};
  double amplitude = 0.3;
  double gain = 1.0;
  double target = 0.7;       // measurement a text mention asks for
  std::vector<std::string> keywords;
};

/// Families known to the renderer. Each fixes region geometry, colour,
/// pattern and amplitude; SyntheticSpec picks dim, gain and target per attribute.
std::vector<std::string> feature_families();
Feature make_feature(const std::string& family);

struct SyntheticSpec {
  int latent_dim = 16;
  int image_size = 64;
  std::string taxonomy = "synthetic";
  std::vector<Feature> attributes;   // taxonomy order
  std::vector<Feature> identity;     // skin tone, nose (face width handled by geometry)
  int face_width_dim = 13;
  double face_width_gain = 4.0;
  double noise_scale = 0.15;
  double kappa = 1.0;           // constant channel of the image/text embeddings
  double angle_scale = 1.5;     // measurement m is embedded as (cos, sin)(angle_scale * m)
  double identity_kappa = 1.0;  // constant channel of the identity embedding
  double threshold = 0.35;      // classifier: present iff measurement > threshold
  double invert_tolerance = 0.02;

  static SyntheticSpec defaults();
  static SyntheticSpec from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;

  /// Injective dims, identity dims disjoint from attribute dims, every dim in range.
  void validate() const;

  std::vector<int> identity_dims() const;
  int attribute_count() const { return static_cast<int>(attributes.size()); }
  std::optional<int> attribute_index(std::string_view id) const;
  LatentShape latent_shape() const { return {1, latent_dim}; }
};

struct Render {
  Image image;
  RegionMasks masks;
};

struct TextEmbedding {
  std::vector<double> embedding;
  std::vector<std::string> mentioned;
  std::vector<std::string> unknown_segments;  // text pieces matching no attribute
  bool warning() const { return !unknown_segments.empty(); }
};

/// The analytic world: renderer, matched encoders, inverter and segmenter.
/// Immutable after construction and safe for concurrent use.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(SyntheticSpec spec);

  const SyntheticSpec& spec() const { return spec_; }
  ImageSize image_size() const { return {3, spec_.image_size, spec_.image_size}; }
  LatentShape latent_shape() const { return spec_.latent_shape(); }
  const AttributeTaxonomy& taxonomy() const { return taxonomy_; }

  Render render(const LatentCode& w) const;
  Image render_image(const LatentCode& w) const;
  LatentTensor render_vjp(const LatentCode& w, const Image& grad_image) const;

  /// Normalized per-attribute measurements, taxonomy order. For renders this
  /// recovers tanh(gain * w[dim]) exactly.
  std::vector<double> measure_attributes(const Image& image) const;
  /// [face width, skin tone, nose] measurements.
  std::vector<double> measure_identity(const Image& image) const;

  std::vector<double> embed_image(const Image& image) const;
  Image embed_image_vjp(const Image& image, std::span<const double> grad_embedding) const;
  TextEmbedding embed_text_detailed(const std::string& text) const;
  std::vector<double> embed_text(const std::string& text) const { return embed_text_detailed(text).embedding; }
  int embedding_dim() const { return 2 * spec_.attribute_count() + 1; }

  std::vector<double> identity_embed(const Image& image) const;
  Image identity_embed_vjp(const Image& image, std::span<const double> grad_embedding) const;

  RegionMasks segment(const Image& image) const;

  /// Throws NotRenderableError when the re-rendered estimate differs from
  /// the input by more than `invert_tolerance` mean absolute pixel error.
  LatentCode invert(const Image& image) const;

  std::vector<bool> classify(const Image& image) const;
  std::vector<std::string> mentioned_attributes(const std::string& text) const;

  /// Latent dim controlling an attribute, identity feature or "face_width".
  int controlling_dim(std::string_view attribute_id) const;

  std::vector<double> sample_noise(std::uint64_t seed) const;
  LatentCode map_noise(std::span<const double> z) const;

  /// Pixels (y * size + x) belonging to each attribute's designated region.
  std::vector<int> region_pixels(std::string_view attribute_id) const;

 private:
  struct Contribution {
    int feature;     // index into features_
    double pattern;  // stripe weight (1 for flat patches)
  };
  struct Functional {
    // m = sum_k weight_k * <color, out[pixel_k]> + offset
    std::vector<std::pair<int, double>> terms;
    Vec3 color{};
    double offset = 0.0;
  };

  void build_layout();
  double face_rx(double width_value) const;
  double coverage(int pixel, double rx, double* d_rx) const;
  double band_coverage(double rx, double* d_rx) const;
  double measure_face_width(const Image& image, double* d_mean_over_coverage) const;
  std::vector<double> feature_values(const LatentCode& w) const;
  double apply_functional(const Functional& f, const Image& image) const;
  void add_functional_vjp(const Functional& f, double scale, Image& grad) const;

  SyntheticSpec spec_;
  AttributeTaxonomy taxonomy_;
  std::vector<Feature> features_;  // attributes then identity features
  int n_ = 0;                      // image side

  std::vector<std::uint8_t> hair_;   // per-pixel hair-layer flag
  std::vector<Vec3> layer_base_;     // hair0/skin0 plus feature bases
  std::vector<Vec3> background_;
  std::vector<std::vector<Contribution>> contribs_;
  std::vector<std::uint8_t> interior_;  // face pixels whose coverage is always 1
  std::vector<Functional> measures_;    // one per feature
  std::vector<int> band_;               // face-width measurement pixels
  std::vector<double> band_denominator_;
  Vec3 width_probe_{};
};

/// The bundle backing the "synthetic" backend name.
BackendBundle make_synthetic_bundle(std::shared_ptr<const SyntheticWorld> world);
BackendBundle make_synthetic_bundle(const SyntheticSpec& spec = SyntheticSpec::defaults());
/// The world behind a synthetic bundle; null for any other backend.
std::shared_ptr<const SyntheticWorld> world_of(const BackendBundle& bundle);

}  // namespace latentedit::synth
