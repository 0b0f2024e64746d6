#include "latentedit/synthworld.hpp"

namespace latentedit::synth {

namespace {

class SynthGenerator final : public Generator {
 public:
  explicit SynthGenerator(std::shared_ptr<const SyntheticWorld> world) : world_(std::move(world)) {}
  LatentShape latent_shape() const override { return world_->latent_shape(); }
  ImageSize image_size() const override { return world_->image_size(); }
  std::vector<double> sample_noise(std::uint64_t seed) const override { return world_->sample_noise(seed); }
  LatentCode map_noise(std::span<const double> z) const override { return world_->map_noise(z); }
  Image synthesize(const LatentCode& w) const override { return world_->render_image(w); }
  const std::shared_ptr<const SyntheticWorld>& world() const { return world_; }
  LatentTensor synthesize_vjp(const LatentCode& w, const Image& grad_image) const override {
    return world_->render_vjp(w, grad_image);
  }
  ThreadSafety thread_safety() const override { return ThreadSafety::concurrent; }

 private:
  std::shared_ptr<const SyntheticWorld> world_;
};

class SynthEncoder final : public ImageTextEncoder {
 public:
  explicit SynthEncoder(std::shared_ptr<const SyntheticWorld> world) : world_(std::move(world)) {}
  int embedding_dim() const override { return world_->embedding_dim(); }
  ImageSize image_size() const override { return world_->image_size(); }
  std::vector<double> embed_image(const Image& image) const override { return world_->embed_image(image); }
  std::vector<double> embed_text(const std::string& text) const override { return world_->embed_text(text); }
  Image embed_image_vjp(const Image& image, std::span<const double> grad) const override {
    return world_->embed_image_vjp(image, grad);
  }
  ThreadSafety thread_safety() const override { return ThreadSafety::concurrent; }

 private:
  std::shared_ptr<const SyntheticWorld> world_;
};

class SynthIdentity final : public IdentityEmbedder {
 public:
  explicit SynthIdentity(std::shared_ptr<const SyntheticWorld> world) : world_(std::move(world)) {}
  ImageSize image_size() const override { return world_->image_size(); }
  std::vector<double> embed(const Image& image) const override { return world_->identity_embed(image); }
  Image embed_vjp(const Image& image, std::span<const double> grad) const override {
    return world_->identity_embed_vjp(image, grad);
  }
  ThreadSafety thread_safety() const override { return ThreadSafety::concurrent; }

 private:
  std::shared_ptr<const SyntheticWorld> world_;
};

class SynthSegmenter final : public FaceSegmenter {
 public:
  explicit SynthSegmenter(std::shared_ptr<const SyntheticWorld> world) : world_(std::move(world)) {}
  ImageSize image_size() const override { return world_->image_size(); }
  RegionMasks segment(const Image& image) const override { return world_->segment(image); }
  ThreadSafety thread_safety() const override { return ThreadSafety::concurrent; }

 private:
  std::shared_ptr<const SyntheticWorld> world_;
};

class SynthInverter final : public LatentInverter {
 public:
  explicit SynthInverter(std::shared_ptr<const SyntheticWorld> world) : world_(std::move(world)) {}
  ImageSize image_size() const override { return world_->image_size(); }
  LatentShape latent_shape() const override { return world_->latent_shape(); }
  LatentCode invert(const Image& image) const override { return world_->invert(image); }
  ThreadSafety thread_safety() const override { return ThreadSafety::concurrent; }

 private:
  std::shared_ptr<const SyntheticWorld> world_;
};

}  // namespace

BackendBundle make_synthetic_bundle(std::shared_ptr<const SyntheticWorld> world) {
  BackendBundle b;
  b.name = "synthetic";
  b.generator = std::make_shared<SynthGenerator>(world);
  b.image_text_encoder = std::make_shared<SynthEncoder>(world);
  b.identity_embedder = std::make_shared<SynthIdentity>(world);
  b.face_segmenter = std::make_shared<SynthSegmenter>(world);
  b.inverter = std::make_shared<SynthInverter>(world);
  b.validate();
  return b;
}

std::shared_ptr<const SyntheticWorld> world_of(const BackendBundle& bundle) {
  auto gen = std::dynamic_pointer_cast<const SynthGenerator>(bundle.generator);
  return gen ? gen->world() : nullptr;
}

BackendBundle make_synthetic_bundle(const SyntheticSpec& spec) {
  return make_synthetic_bundle(std::make_shared<const SyntheticWorld>(spec));
}

}  // namespace latentedit::synth
