#include "latentedit/backends.hpp"

#include <fstream>
#include <mutex>

#include "latentedit/error.hpp"
#include "latentedit/synthworld.hpp"

namespace latentedit {

namespace fs = std::filesystem;

std::string ImageSize::to_string() const {
  return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

void BackendBundle::validate() const {
  if (!generator) throw ValidationError("backend bundle '" + name + "' has no generator");
  if (!image_text_encoder) throw ValidationError("backend bundle '" + name + "' has no image-text encoder");
  if (!identity_embedder) throw ValidationError("backend bundle '" + name + "' has no identity embedder");
  if (!face_segmenter) throw ValidationError("backend bundle '" + name + "' has no face segmenter");
  const ImageSize size = generator->image_size();
  auto check = [&](const ImageSize& other, const char* role) {
    if (other != size) {
      throw ValidationError(std::string(role) + " expects " + other.to_string() + " images but the generator renders " +
                            size.to_string());
    }
  };
  check(image_text_encoder->image_size(), "image-text encoder");
  check(identity_embedder->image_size(), "identity embedder");
  check(face_segmenter->image_size(), "face segmenter");
  if (inverter) {
    check(inverter->image_size(), "inverter");
    if (inverter->latent_shape() != generator->latent_shape()) {
      throw ValidationError("inverter produces " + inverter->latent_shape().to_string() + " codes but the generator takes " +
                            generator->latent_shape().to_string());
    }
  }
  if (image_text_encoder->embedding_dim() < 1) throw ValidationError("image-text encoder has no embedding dimensions");
}

bool BackendBundle::all_concurrent() const {
  auto ok = [](const auto& p) { return !p || p->thread_safety() == ThreadSafety::concurrent; };
  return ok(generator) && ok(image_text_encoder) && ok(identity_embedder) && ok(face_segmenter) && ok(inverter);
}

BackendConfig parse_backend_config(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ParseError("backend config must be a JSON object");
  BackendConfig cfg;
  try {
    cfg.backend = doc.value("backend", cfg.backend);
    cfg.device = doc.value("device", cfg.device);
    if (doc.contains("assets")) {
      for (const auto& [role, path] : doc.at("assets").items()) cfg.assets[role] = path.get<std::string>();
    }
    if (doc.contains("options")) cfg.options = doc.at("options");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad backend config: ") + e.what());
  }
  if (cfg.backend.empty()) throw ValidationError("backend config names no backend");
  return cfg;
}

BackendConfig load_backend_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open backend config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  BackendConfig cfg = parse_backend_config(doc);
  // Relative asset paths are relative to the config file.
  for (auto& [role, asset] : cfg.assets) {
    if (asset.is_relative()) asset = path.parent_path() / asset;
  }
  return cfg;
}

namespace {

BackendBundle synthetic_factory(const BackendConfig& cfg) {
  auto spec = synth::SyntheticSpec::from_json(cfg.options.is_object() && cfg.options.contains("world") ? cfg.options["world"]
                                                                                                       : nlohmann::json());
  return synth::make_synthetic_bundle(spec);
}

// Adapters for external pretrained weights. This build carries no inference
// runtime, so after the asset check the factory reports what is missing.
BackendBundle pretrained_faces_factory(const BackendConfig& cfg) {
  static const char* const kRoles[] = {"generator", "image_text_encoder", "identity_embedder", "face_segmenter"};
  for (const char* role : kRoles) {
    auto it = cfg.assets.find(role);
    if (it == cfg.assets.end() || it->second.empty()) {
      throw AssetMissingError(std::string("pretrained-faces: no weight path configured for ") + role);
    }
    if (!fs::exists(it->second)) {
      throw AssetMissingError(std::string("pretrained-faces: ") + role + " weights not found at " + it->second.string());
    }
  }
  if (auto it = cfg.assets.find("inverter"); it != cfg.assets.end() && !fs::exists(it->second)) {
    throw AssetMissingError("pretrained-faces: inverter weights not found at " + it->second.string());
  }
  throw BackendError("pretrained-faces: weights found, but this build has no inference runtime for device '" + cfg.device +
                     "'; register an adapter with register_backend");
}

struct Registry {
  std::mutex mu;
  std::map<std::string, BackendFactory> factories;

  Registry() {
    factories.emplace("synthetic", synthetic_factory);
    factories.emplace("pretrained-faces", pretrained_faces_factory);
  }
};

Registry& registry() {
  static Registry r;
  return r;
}

}  // namespace

void register_backend(const std::string& name, BackendFactory factory) {
  if (name.empty()) throw ValidationError("backend name must not be empty");
  if (!factory) throw ValidationError("backend '" + name + "' registered without a factory");
  auto& r = registry();
  std::lock_guard lock(r.mu);
  if (!r.factories.emplace(name, std::move(factory)).second) {
    throw ValidationError("backend '" + name + "' is already registered");
  }
}

std::vector<std::string> registered_backends() {
  auto& r = registry();
  std::lock_guard lock(r.mu);
  std::vector<std::string> names;
  for (const auto& [name, f] : r.factories) names.push_back(name);
  return names;
}

BackendBundle create_bundle(const BackendConfig& config) {
  BackendFactory factory;
  {
    auto& r = registry();
    std::lock_guard lock(r.mu);
    auto it = r.factories.find(config.backend);
    if (it == r.factories.end()) throw BackendError("unknown backend '" + config.backend + "'");
    factory = it->second;
  }
  BackendBundle bundle = factory(config);
  if (bundle.name.empty()) bundle.name = config.backend;
  bundle.validate();
  return bundle;
}

BackendBundle create_bundle(const std::string& backend_name) {
  BackendConfig cfg;
  cfg.backend = backend_name;
  return create_bundle(cfg);
}

}  // namespace latentedit
