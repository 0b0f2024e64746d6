#include "latentedit/editor.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>

#include "latentedit/error.hpp"
#include "latentedit/synthworld.hpp"

namespace latentedit {

namespace fs = std::filesystem;

nlohmann::json EditDiagnostics::to_json() const {
  nlohmann::json j;
  j["norm"] = norm;
  j["entropy"] = entropy;
  j["near_zero_fraction"] = sparsity.near_zero_fraction;
  j["total_abs_mass"] = sparsity.total_abs_mass;
  j["near_zero_threshold"] = sparsity.threshold;
  j["warnings"] = warnings;
  return j;
}

void validate_edit_inputs(const std::string& text, double alpha) {
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw ValidationError("edit text is empty");
  if (!std::isfinite(alpha) || alpha < 0.0) throw ValidationError("alpha must be a finite value >= 0");
}

Editor::Editor(MapperState state, BackendBundle bundle) : state_(std::move(state)), bundle_(std::move(bundle)) {
  bundle_.validate();
  if (!(state_.config.latent_shape == bundle_.generator->latent_shape())) {
    throw ShapeError("mapper latent shape " + state_.config.latent_shape.to_string() + " does not match backend '" +
                     bundle_.name + "' (" + bundle_.generator->latent_shape().to_string() + ")");
  }
  if (state_.config.text_embedding_dim != bundle_.image_text_encoder->embedding_dim()) {
    throw ShapeError("mapper text dim " + std::to_string(state_.config.text_embedding_dim) + " does not match backend '" +
                     bundle_.name + "' (" + std::to_string(bundle_.image_text_encoder->embedding_dim()) + ")");
  }
}

Editor Editor::load(const fs::path& checkpoint, BackendBundle bundle) {
  auto shape = bundle.generator ? std::optional<LatentShape>(bundle.generator->latent_shape()) : std::nullopt;
  return Editor(load_mapper(checkpoint, shape), std::move(bundle));
}

LatentCode Editor::resolve(const EditSource& source) const {
  const Generator& gen = *bundle_.generator;
  if (const auto* seed = std::get_if<NoiseSeed>(&source)) return gen.map_noise(gen.sample_noise(seed->seed));
  if (const auto* code = std::get_if<LatentCode>(&source)) {
    if (!(code->shape() == gen.latent_shape())) {
      throw ShapeError("latent shape " + code->shape().to_string() + " does not match backend (" + gen.latent_shape().to_string() + ")");
    }
    return *code;
  }
  if (!bundle_.inverter) throw BackendError("backend '" + bundle_.name + "' has no inverter; image sources need one");
  if (const auto* path = std::get_if<ImagePath>(&source)) return bundle_.inverter->invert(read_png(path->path));
  return bundle_.inverter->invert(std::get<Image>(source));
}

EditResult Editor::edit(const EditSource& source, const std::string& text, double alpha) const {
  validate_edit_inputs(text, alpha);
  const auto start = std::chrono::steady_clock::now();
  EditResult r;
  r.alpha = alpha;
  r.w = resolve(source);
  r.delta = map_offsets(state_, bundle_.image_text_encoder->embed_text(text), r.w);
  r.w_edited = apply_offset(r.w, r.delta, alpha);
  r.original = bundle_.generator->synthesize(r.w);
  r.edited = bundle_.generator->synthesize(r.w_edited);

  r.diagnostics.norm = latent_norm_loss(r.delta);
  r.diagnostics.entropy = entropy_loss(r.delta);
  r.diagnostics.sparsity = sparsity_report(r.delta);
  if (alpha > 1.0) r.diagnostics.warnings.push_back("alpha > 1 extrapolates beyond the predicted offset");
  if (auto world = synth::world_of(bundle_)) {
    for (const auto& seg : world->embed_text_detailed(text).unknown_segments) {
      r.diagnostics.warnings.push_back("no attribute matches \"" + seg + "\"");
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

namespace {

BackendBundle bundle_for(const std::string& backend, const std::optional<fs::path>& config) {
  if (config) return create_bundle(load_backend_config(*config));
  return create_bundle(backend);
}

}  // namespace

EditResult edit(const EditRequest& request) {
  validate_edit_inputs(request.text, request.alpha);
  Editor editor = Editor::load(request.checkpoint, bundle_for(request.backend, request.backend_config));
  return editor.edit(request.source, request.text, request.alpha);
}

BatchSummary edit_batch(const fs::path& requests, const fs::path& out_dir, const BatchDefaults& defaults) {
  std::ifstream in(requests);
  if (!in) throw IoError("cannot open requests file " + requests.string());
  fs::create_directories(out_dir);

  std::map<std::string, BackendBundle> bundles;
  std::map<std::pair<std::string, std::string>, std::shared_ptr<Editor>> editors;
  auto editor_for = [&](const fs::path& ckpt, const std::string& backend) -> const Editor& {
    const auto key = std::make_pair(ckpt.string(), backend);
    auto it = editors.find(key);
    if (it != editors.end()) return *it->second;
    auto b = bundles.find(backend);
    if (b == bundles.end()) {
      const auto cfg = backend == defaults.backend ? defaults.backend_config : std::nullopt;
      b = bundles.emplace(backend, bundle_for(backend, cfg)).first;
    }
    auto e = std::make_shared<Editor>(Editor::load(ckpt, b->second));
    return *editors.emplace(key, std::move(e)).first->second;
  };

  BatchSummary summary;
  nlohmann::json items = nlohmann::json::array();
  std::string line;
  int line_no = 0, index = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json item;
    item["index"] = index;
    item["line"] = line_no;
    try {
      const auto doc = nlohmann::json::parse(line);
      if (!doc.is_object()) throw ParseError("request is not a JSON object");
      if (doc.contains("id")) item["id"] = doc["id"];
      const int sources = static_cast<int>(doc.contains("seed")) + static_cast<int>(doc.contains("latent")) +
                          static_cast<int>(doc.contains("image"));
      if (sources != 1) throw ValidationError("request needs exactly one of seed, latent, image");
      EditSource source;
      if (doc.contains("seed")) source = NoiseSeed{doc["seed"].get<std::uint64_t>()};
      else if (doc.contains("latent")) source = read_latent(doc["latent"].get<std::string>());
      else source = ImagePath{doc["image"].get<std::string>()};
      const std::string text = doc.value("text", std::string());
      const double alpha = doc.value("alpha", 1.0);
      item["text"] = text;
      item["alpha"] = alpha;
      validate_edit_inputs(text, alpha);
      std::optional<fs::path> ckpt = defaults.checkpoint;
      if (doc.contains("ckpt")) ckpt = fs::path(doc["ckpt"].get<std::string>());
      if (!ckpt) throw ValidationError("request has no checkpoint and no default was given");
      const std::string backend = doc.value("backend", defaults.backend);

      const EditResult r = editor_for(*ckpt, backend).edit(source, text, alpha);
      const std::string stem = std::to_string(index);
      const std::string original_png = encode_png(r.original), edited_png = encode_png(r.edited);
      for (const auto& [name, bytes] : {std::pair{stem + "_original.png", original_png}, std::pair{stem + "_edited.png", edited_png}}) {
        std::ofstream out(out_dir / name, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("cannot write " + (out_dir / name).string());
      }
      item["status"] = "ok";
      item["original"] = stem + "_original.png";
      item["edited"] = stem + "_edited.png";
      item["sha256"] = {{"original", sha256_hex(original_png)}, {"edited", sha256_hex(edited_png)}};
      item["diagnostics"] = r.diagnostics.to_json();
      ++summary.succeeded;
    } catch (const std::exception& e) {
      item["status"] = "error";
      item["error"] = e.what();
      ++summary.failed;
    }
    items.push_back(std::move(item));
    ++index;
  }
  summary.manifest = {{"items", items}, {"succeeded", summary.succeeded}, {"failed", summary.failed}};
  std::ofstream out(out_dir / "manifest.json");
  out << summary.manifest.dump(2) << '\n';
  if (!out) throw IoError("cannot write manifest in " + out_dir.string());
  return summary;
}

}  // namespace latentedit
