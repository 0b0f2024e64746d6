#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "latentedit/backends.hpp"
#include "latentedit/mapper.hpp"
#include "latentedit/objective.hpp"
#include "latentedit/taxonomy.hpp"

namespace latentedit {

/// Training config. JSON keys mirror the field names; see README for the
/// schema. Unknown keys are rejected.
struct TrainingConfig {
  std::string backend = "synthetic";
  std::optional<std::filesystem::path> backend_config;  // overrides `backend` when set
  std::string taxonomy;                                 // empty: "synthetic" for the synthetic backend, else "celeba40"

  int batch_size = 16;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int epochs = 30;
  int steps_per_epoch = 0;  // 0: 100 for the synthetic backend, 1000 otherwise
  std::uint64_t seed = 0;

  SamplingStrategy strategy;
  /// Pick random or group sampling afresh for every prompt (50/50).
  bool strategy_mix = false;

  LossWeights weights;
  /// The entropy term is switched off for this many initial steps, then its
  /// weight rises linearly to `weights.en` over `entropy_ramp_steps`.
  int entropy_warmup_steps = 0;
  int entropy_ramp_steps = 0;
  bool normalize_region_losses = false;

  /// Clip the global gradient norm to this value; 0 disables clipping.
  double grad_clip = 0.0;

  /// Checkpoint every N steps; 0 means once per epoch.
  int checkpoint_every = 0;

  /// Mapper architecture; latent shape and text dim are taken from the backend.
  MapperConfig mapper;

  void validate() const;
  int resolved_steps_per_epoch() const;
  std::string resolved_taxonomy() const;
  std::int64_t total_steps() const { return static_cast<std::int64_t>(epochs) * resolved_steps_per_epoch(); }
  /// Loss weights in effect for the step that follows `completed_steps`.
  LossWeights weights_at(std::int64_t completed_steps) const;

  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& doc);
  static TrainingConfig load(const std::filesystem::path& path);
};

/// Backend + taxonomy + text-embedding cache shared by the steps of one run.
struct TrainingContext {
  BackendBundle bundle;
  AttributeTaxonomy taxonomy;
  /// Directory for non-finite diagnostics; empty disables dumps.
  std::filesystem::path dump_dir;
};

TrainingContext make_training_context(const TrainingConfig& config);

/// Mapper config completed with the backend's latent shape and embedding dim.
MapperConfig resolve_mapper_config(const TrainingConfig& config, const BackendBundle& bundle);

/// The weighted objective for one sample: edited = synthesize(w + delta),
/// original = synthesize(w). When `grad_delta` is given it receives
/// d total / d delta (segmentation masks are treated as constants).
LossReport sample_objective(const BackendBundle& bundle, const LossWeights& weights, RegionLossOptions region,
                            const LatentCode& w, const OffsetDelta& delta, std::span<const double> text_embedding,
                            LatentTensor* grad_delta);

/// One optimizer step on a fresh batch. The batch is drawn from an rng seeded
/// by (config.seed, state.step), so a resumed run sees the same batches as an
/// uninterrupted one. Returns the batch-mean report.
LossReport train_step(MapperState& state, const TrainingContext& ctx, const TrainingConfig& config);

struct TrainRunRecord {
  std::vector<LossReport> reports;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path final_checkpoint;
  std::filesystem::path log_path;
  nlohmann::json config_snapshot;
  double wall_clock_seconds = 0.0;
};

struct TrainOptions {
  std::filesystem::path output_dir;
  /// Continue from this checkpoint (its step counter and optimizer state).
  std::optional<std::filesystem::path> resume_from;
  /// Called after every step.
  std::function<void(const LossReport&)> on_step;
};

/// Runs epochs x steps_per_epoch steps, writing `train_log.tsv`,
/// `config.json` and `step_<n>.ckpt` files into the output directory.
TrainRunRecord train(const TrainingConfig& config, const TrainOptions& options);
/// Same, with an already-built context (lets callers share a bundle).
TrainRunRecord train(const TrainingConfig& config, const TrainingContext& ctx, const TrainOptions& options);

}  // namespace latentedit
