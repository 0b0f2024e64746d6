#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "latentedit/image.hpp"
#include "latentedit/tensor.hpp"

namespace latentedit {

/// Whether an implementation tolerates concurrent calls on one instance.
enum class ThreadSafety : std::uint8_t { concurrent, single_threaded };

struct ImageSize {
  int channels = 3;
  int height = 0;
  int width = 0;
  bool operator==(const ImageSize&) const = default;
  std::string to_string() const;
};

// The five pretrained roles. Every role that sits on the training gradient
// path exposes a vector-Jacobian product so the trainer can push loss
// gradients back to the latent offset without knowing the model internals.

class Generator {
 public:
  virtual ~Generator() = default;
  virtual LatentShape latent_shape() const = 0;
  virtual ImageSize image_size() const = 0;
  virtual std::vector<double> sample_noise(std::uint64_t seed) const = 0;
  /// The mapping network Z -> W.
  virtual LatentCode map_noise(std::span<const double> z) const = 0;
  virtual Image synthesize(const LatentCode& w) const = 0;
  /// Returns d<grad_image, synthesize(w)>/dw.
  virtual LatentTensor synthesize_vjp(const LatentCode& w, const Image& grad_image) const = 0;
  virtual ThreadSafety thread_safety() const { return ThreadSafety::single_threaded; }
};

class ImageTextEncoder {
 public:
  virtual ~ImageTextEncoder() = default;
  virtual int embedding_dim() const = 0;
  virtual ImageSize image_size() const = 0;
  virtual std::vector<double> embed_image(const Image& image) const = 0;
  virtual std::vector<double> embed_text(const std::string& text) const = 0;
  /// Returns d<grad_embedding, embed_image(image)>/dimage.
  virtual Image embed_image_vjp(const Image& image, std::span<const double> grad_embedding) const = 0;
  virtual ThreadSafety thread_safety() const { return ThreadSafety::single_threaded; }
};

class IdentityEmbedder {
 public:
  virtual ~IdentityEmbedder() = default;
  virtual ImageSize image_size() const = 0;
  virtual std::vector<double> embed(const Image& image) const = 0;
  virtual Image embed_vjp(const Image& image, std::span<const double> grad_embedding) const = 0;
  virtual ThreadSafety thread_safety() const { return ThreadSafety::single_threaded; }
};

class FaceSegmenter {
 public:
  virtual ~FaceSegmenter() = default;
  virtual ImageSize image_size() const = 0;
  virtual RegionMasks segment(const Image& image) const = 0;
  virtual ThreadSafety thread_safety() const { return ThreadSafety::single_threaded; }
};

class LatentInverter {
 public:
  virtual ~LatentInverter() = default;
  virtual ImageSize image_size() const = 0;
  virtual LatentShape latent_shape() const = 0;
  virtual LatentCode invert(const Image& image) const = 0;
  virtual ThreadSafety thread_safety() const { return ThreadSafety::single_threaded; }
};

struct BackendBundle {
  std::string name;
  std::shared_ptr<const Generator> generator;
  std::shared_ptr<const ImageTextEncoder> image_text_encoder;
  std::shared_ptr<const IdentityEmbedder> identity_embedder;
  std::shared_ptr<const FaceSegmenter> face_segmenter;
  std::shared_ptr<const LatentInverter> inverter;  // optional for training

  /// Throws ValidationError unless every member is present (inverter
  /// excepted) and all agree on image size and latent shape.
  void validate() const;
  bool all_concurrent() const;
};

/// Backend config file (JSON):
///   { "backend": "synthetic" | "pretrained-faces" | <registered>,
///     "assets": { "generator": path, "image_text_encoder": path, "identity_embedder": path,
///                 "face_segmenter": path, "inverter": path },
///     "device": "cpu",
///     "options": { backend-specific } }
struct BackendConfig {
  std::string backend = "synthetic";
  std::map<std::string, std::filesystem::path> assets;
  std::string device = "cpu";
  nlohmann::json options = nlohmann::json::object();
};

BackendConfig parse_backend_config(const nlohmann::json& doc);
BackendConfig load_backend_config(const std::filesystem::path& path);

using BackendFactory = std::function<BackendBundle(const BackendConfig&)>;

/// Registers a factory under a unique name. Throws ValidationError if the
/// name is taken.
void register_backend(const std::string& name, BackendFactory factory);
std::vector<std::string> registered_backends();

/// Builds and validates a bundle. Throws BackendError for unknown names,
/// AssetMissingError for missing weight files, ValidationError on member
/// disagreement.
BackendBundle create_bundle(const BackendConfig& config);
BackendBundle create_bundle(const std::string& backend_name);

}  // namespace latentedit
