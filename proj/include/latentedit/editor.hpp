#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "latentedit/backends.hpp"
#include "latentedit/image.hpp"
#include "latentedit/latent.hpp"
#include "latentedit/mapper.hpp"

namespace latentedit {

struct ImagePath {
  std::filesystem::path path;
};
struct NoiseSeed {
  std::uint64_t seed = 0;
};

/// Where the latent code comes from: an image file or decoded image
/// (inverted), a latent code (used as is), or a noise seed (mapped).
using EditSource = std::variant<ImagePath, Image, LatentCode, NoiseSeed>;

struct EditDiagnostics {
  double norm = 0.0;
  double entropy = 0.0;
  SparsityStats sparsity;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

struct EditResult {
  Image original;
  Image edited;
  LatentCode w;
  OffsetDelta delta;
  LatentCode w_edited;  // exactly w + alpha * delta, the code that was synthesized
  double alpha = 1.0;
  EditDiagnostics diagnostics;
  double seconds = 0.0;
};

/// A loaded (checkpoint, backend) pair. Immutable; edit() may be called
/// concurrently when the backend declares itself concurrent.
class Editor {
 public:
  Editor(MapperState state, BackendBundle bundle);
  /// Throws ShapeError when the checkpoint does not fit the backend.
  static Editor load(const std::filesystem::path& checkpoint, BackendBundle bundle);

  /// Throws ValidationError for blank text or a negative / non-finite alpha
  /// (before touching the backend), BackendError when an image source meets a
  /// backend without an inverter.
  EditResult edit(const EditSource& source, const std::string& text, double alpha = 1.0) const;

  LatentCode resolve(const EditSource& source) const;
  const BackendBundle& bundle() const { return bundle_; }
  const MapperState& state() const { return state_; }

 private:
  MapperState state_;
  BackendBundle bundle_;
};

struct EditRequest {
  EditSource source = NoiseSeed{};
  std::string text;
  double alpha = 1.0;
  std::filesystem::path checkpoint;
  std::string backend = "synthetic";
  std::optional<std::filesystem::path> backend_config;
};

/// One-shot edit: builds the backend and loads the checkpoint.
EditResult edit(const EditRequest& request);

void validate_edit_inputs(const std::string& text, double alpha);

struct BatchDefaults {
  std::optional<std::filesystem::path> checkpoint;
  std::string backend = "synthetic";
  std::optional<std::filesystem::path> backend_config;
};

struct BatchSummary {
  nlohmann::json manifest;
  int succeeded = 0;
  int failed = 0;
  /// Nonzero only when there were items and none succeeded.
  int exit_code() const { return failed > 0 && succeeded == 0 ? 1 : 0; }
};

/// Requests file: one JSON object per line with exactly one of "seed",
/// "latent" (path) or "image" (path), plus "text", optional "alpha", "ckpt",
/// "backend", "id". Blank lines are ignored. Writes <n>_original.png,
/// <n>_edited.png and manifest.json into `out_dir`; a failing item is
/// recorded in the manifest and does not stop the others.
BatchSummary edit_batch(const std::filesystem::path& requests, const std::filesystem::path& out_dir,
                        const BatchDefaults& defaults = {});

}  // namespace latentedit
