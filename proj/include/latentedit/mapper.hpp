#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentedit/tensor.hpp"

namespace latentedit {

enum class TextMemory : std::uint8_t {
  pooled,          // the whole embedding projected to one memory token
  per_coordinate,  // one memory token per embedding coordinate
};

struct MapperConfig {
  int num_layers = 6;
  int num_heads = 8;
  int model_width = 512;
  int ffn_width = 0;  // 0 means 4 * model_width
  LatentShape latent_shape{18, 512};
  int text_embedding_dim = 512;
  TextMemory memory = TextMemory::pooled;

  int head_dim() const { return model_width / num_heads; }
  int ffn() const { return ffn_width > 0 ? ffn_width : 4 * model_width; }
  void validate() const;
  nlohmann::json to_json() const;
  static MapperConfig from_json(const nlohmann::json& doc);
  bool operator==(const MapperConfig&) const = default;
};

struct Parameter {
  std::string name;
  Eigen::MatrixXd value;
};

/// Adam first and second moments, one per parameter.
struct AdamMoments {
  std::vector<Eigen::MatrixXd> m;
  std::vector<Eigen::MatrixXd> v;
};

struct MapperState {
  MapperConfig config;
  std::vector<Parameter> params;
  std::int64_t step = 0;
  std::optional<AdamMoments> moments;

  const Eigen::MatrixXd& param(const std::string& name) const;
  std::size_t parameter_count() const;
};

using Gradients = std::vector<Eigen::MatrixXd>;

/// Deterministic in `seed`. The output head is zero so a fresh mapper emits
/// an all-zero offset.
MapperState init_mapper(const MapperConfig& config, std::uint64_t seed);

/// Zero gradients shaped like the state's parameters.
Gradients zero_gradients(const MapperState& state);

/// Intermediate values kept by a forward pass for backward().
class MapperTrace {
 public:
  MapperTrace();
  ~MapperTrace();
  MapperTrace(MapperTrace&&) noexcept;
  MapperTrace& operator=(MapperTrace&&) noexcept;

  struct Data;
  Data& data() { return *data_; }
  const Data& data() const { return *data_; }

 private:
  std::unique_ptr<Data> data_;
};

/// Pre-norm decoder: the L latent rows (plus learned positions) are the query
/// sequence; each block runs self-attention over them, cross-attention into
/// the text memory, and a ReLU feed-forward. Both attentions also see one
/// learned key/value pair, so a lone query still has something to weigh
/// against.
class Mapper {
 public:
  explicit Mapper(const MapperState& state);

  OffsetDelta forward(std::span<const double> text_embedding, const LatentCode& w) const;
  OffsetDelta forward(std::span<const double> text_embedding, const LatentCode& w, MapperTrace& trace) const;
  /// Accumulates d<grad_offset, forward(...)>/dparams into `grads`.
  void backward(const MapperTrace& trace, const LatentTensor& grad_offset, Gradients& grads) const;

 private:
  const MapperState& state_;
  std::vector<const Eigen::MatrixXd*> p_;  // parameters in layout order
};

OffsetDelta map_offsets(const MapperState& state, std::span<const double> text_embedding, const LatentCode& w);
std::vector<OffsetDelta> map_offsets(const MapperState& state, const std::vector<std::vector<double>>& text_embeddings,
                                     const std::vector<LatentCode>& codes);

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update; increments state.step.
void adam_step(MapperState& state, const Gradients& grads, const AdamOptions& opts);

double gradient_norm(const Gradients& grads);
void scale_gradients(Gradients& grads, double factor);

// Checkpoint: "LEMP" magic, u32 version, JSON config, step, named
// parameter tensors, optional Adam moments. Little-endian float64.
inline constexpr std::uint32_t kMapperFormatVersion = 1;

void save_mapper(const MapperState& state, const std::filesystem::path& path);
/// Throws VersionError, CorruptFileError, or ShapeError when `expected_shape`
/// is given and differs from the stored latent shape.
MapperState load_mapper(const std::filesystem::path& path, std::optional<LatentShape> expected_shape = std::nullopt);

}  // namespace latentedit
