#include "latentedit/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "latentedit/error.hpp"
#include "latentedit/latent.hpp"

namespace latentedit {

namespace fs = std::filesystem;

void TrainingConfig::validate() const {
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("Adam betas must be in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ValidationError("adam_epsilon must be positive");
  if (epochs < 1) throw ValidationError("epochs must be positive");
  if (steps_per_epoch < 0) throw ValidationError("steps_per_epoch must be positive (or 0 for the backend default)");
  if (strategy.attribute_count < 1) throw ValidationError("attribute_count must be at least 1");
  if (grad_clip < 0.0 || !std::isfinite(grad_clip)) throw ValidationError("grad_clip must be >= 0");
  if (entropy_warmup_steps < 0) throw ValidationError("entropy_warmup_steps must be >= 0");
  if (entropy_ramp_steps < 0) throw ValidationError("entropy_ramp_steps must be >= 0");
  if (checkpoint_every < 0) throw ValidationError("checkpoint_every must be >= 0");
  weights.validate();
}

int TrainingConfig::resolved_steps_per_epoch() const {
  if (steps_per_epoch > 0) return steps_per_epoch;
  return backend == "synthetic" && !backend_config ? 100 : 1000;
}

LossWeights TrainingConfig::weights_at(std::int64_t completed_steps) const {
  LossWeights w = weights;
  if (completed_steps < entropy_warmup_steps) {
    w.en = 0.0;
  } else if (completed_steps < entropy_warmup_steps + entropy_ramp_steps) {
    w.en *= static_cast<double>(completed_steps - entropy_warmup_steps + 1) / entropy_ramp_steps;
  }
  return w;
}

std::string TrainingConfig::resolved_taxonomy() const {
  if (!taxonomy.empty()) return taxonomy;
  return backend == "synthetic" ? "synthetic" : "celeba40";
}

nlohmann::json TrainingConfig::to_json() const {
  nlohmann::json j;
  j["backend"] = backend;
  if (backend_config) j["backend_config"] = backend_config->string();
  j["taxonomy"] = resolved_taxonomy();
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_epsilon"] = adam_epsilon;
  j["epochs"] = epochs;
  j["steps_per_epoch"] = resolved_steps_per_epoch();
  j["seed"] = seed;
  j["strategy"] = {{"kind", std::string(sampling_kind_name(strategy.kind))}, {"attribute_count", strategy.attribute_count}};
  j["strategy_mix"] = strategy_mix;
  j["weights"] = weights.to_json();
  j["entropy_warmup_steps"] = entropy_warmup_steps;
  j["entropy_ramp_steps"] = entropy_ramp_steps;
  j["normalize_region_losses"] = normalize_region_losses;
  j["grad_clip"] = grad_clip;
  j["checkpoint_every"] = checkpoint_every;
  j["mapper"] = mapper.to_json();
  return j;
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ParseError("training config must be a JSON object");
  static const std::vector<std::string> known = {
      "backend",  "backend_config", "taxonomy", "batch_size",   "learning_rate", "beta1",
      "beta2",    "adam_epsilon",   "epochs",   "steps_per_epoch", "seed",      "strategy",
      "strategy_mix", "weights", "entropy_warmup_steps", "entropy_ramp_steps", "normalize_region_losses", "grad_clip", "checkpoint_every", "mapper"};
  for (const auto& [key, value] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ParseError("unknown training config key '" + key + "'");
  }
  TrainingConfig c;
  try {
    c.backend = doc.value("backend", c.backend);
    if (doc.contains("backend_config")) c.backend_config = doc["backend_config"].get<std::string>();
    c.taxonomy = doc.value("taxonomy", c.taxonomy);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.beta1 = doc.value("beta1", c.beta1);
    c.beta2 = doc.value("beta2", c.beta2);
    c.adam_epsilon = doc.value("adam_epsilon", c.adam_epsilon);
    c.epochs = doc.value("epochs", c.epochs);
    c.steps_per_epoch = doc.value("steps_per_epoch", c.steps_per_epoch);
    c.seed = doc.value("seed", c.seed);
    if (doc.contains("strategy")) {
      const auto& s = doc["strategy"];
      if (s.contains("kind")) {
        auto kind = parse_sampling_kind(s["kind"].get<std::string>());
        if (!kind) throw ParseError("unknown sampling strategy '" + s["kind"].get<std::string>() + "'");
        c.strategy.kind = *kind;
      }
      c.strategy.attribute_count = s.value("attribute_count", c.strategy.attribute_count);
    }
    c.strategy_mix = doc.value("strategy_mix", c.strategy_mix);
    if (doc.contains("weights")) c.weights = LossWeights::from_json(doc["weights"]);
    c.entropy_warmup_steps = doc.value("entropy_warmup_steps", c.entropy_warmup_steps);
    c.entropy_ramp_steps = doc.value("entropy_ramp_steps", c.entropy_ramp_steps);
    c.normalize_region_losses = doc.value("normalize_region_losses", c.normalize_region_losses);
    c.grad_clip = doc.value("grad_clip", c.grad_clip);
    c.checkpoint_every = doc.value("checkpoint_every", c.checkpoint_every);
    if (doc.contains("mapper")) c.mapper = MapperConfig::from_json(doc["mapper"]);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainingConfig TrainingConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open training config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  auto c = from_json(doc);
  if (c.backend_config && c.backend_config->is_relative()) c.backend_config = path.parent_path() / *c.backend_config;
  return c;
}

TrainingContext make_training_context(const TrainingConfig& config) {
  config.validate();
  BackendConfig bc;
  if (config.backend_config) {
    bc = load_backend_config(*config.backend_config);
  } else {
    bc.backend = config.backend;
  }
  TrainingContext ctx{create_bundle(bc), load_taxonomy(config.resolved_taxonomy()), {}};
  if (config.strategy.kind == SamplingKind::random && config.strategy.attribute_count > static_cast<int>(ctx.taxonomy.size())) {
    throw ValidationError("attribute_count exceeds the taxonomy size");
  }
  return ctx;
}

MapperConfig resolve_mapper_config(const TrainingConfig& config, const BackendBundle& bundle) {
  MapperConfig m = config.mapper;
  m.latent_shape = bundle.generator->latent_shape();
  m.text_embedding_dim = bundle.image_text_encoder->embedding_dim();
  m.validate();
  return m;
}

LossReport sample_objective(const BackendBundle& bundle, const LossWeights& weights, RegionLossOptions region,
                            const LatentCode& w, const OffsetDelta& delta, std::span<const double> text_embedding,
                            LatentTensor* grad_delta) {
  const Generator& gen = *bundle.generator;
  const LatentCode w_edit = apply_offset(w, delta);
  const Image edited = gen.synthesize(w_edit);
  const Image original = gen.synthesize(w);
  const RegionMasks m_edit = bundle.face_segmenter->segment(edited);
  const RegionMasks m_orig = bundle.face_segmenter->segment(original);
  const Mask bg = combine_masks(m_edit.background, m_orig.background);
  const Mask face = combine_masks(m_edit.face, m_orig.face);
  const auto id_orig = bundle.identity_embedder->embed(original);

  LossReport r;
  r.clip = clip_alignment_loss(bundle.image_text_encoder->embed_image(edited), text_embedding);
  r.id = 1.0 - cosine_similarity(bundle.identity_embedder->embed(edited), id_orig);
  r.bg = masked_l2(edited, original, bg, region);
  r.l2_img = masked_l2(edited, original, face, region);
  r.l2_w = latent_norm_loss(delta);
  r.en = entropy_loss(delta);
  total_loss(r, weights);
  if (!grad_delta) return r;

  Image g = clip_alignment_gradient(edited, text_embedding, *bundle.image_text_encoder);
  auto accumulate = [&](const Image& part, double scale) {
    if (scale == 0.0) return;
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += scale * part.data[i];
  };
  if (weights.id != 0.0) accumulate(identity_loss_gradient(edited, id_orig, *bundle.identity_embedder), weights.id);
  if (weights.bg != 0.0) accumulate(masked_l2_gradient(edited, original, bg, region), weights.bg);
  if (weights.l2_img != 0.0) accumulate(masked_l2_gradient(edited, original, face, region), weights.l2_img);
  LatentTensor gd = gen.synthesize_vjp(w_edit, g);
  if (weights.l2_w != 0.0) {
    auto gn = latent_norm_loss_gradient(delta);
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += weights.l2_w * gn[i];
  }
  if (weights.en != 0.0) {
    auto ge = entropy_loss_gradient(delta);
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += weights.en * ge[i];
  }
  *grad_delta = std::move(gd);
  return r;
}

namespace {

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step) {
  const auto s = static_cast<std::uint64_t>(step);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(s),
                    static_cast<std::uint32_t>(s >> 32)};
  return std::mt19937_64(seq);
}

void dump_nonfinite(const fs::path& dir, std::int64_t step, const std::string& prompt, const LatentCode& w,
                    const OffsetDelta& delta, const LossReport& r) {
  if (dir.empty()) return;
  nlohmann::json j;
  j["step"] = step;
  j["prompt"] = prompt;
  j["w"] = w.vector();
  j["delta"] = delta.vector();
  j["losses"] = {{"clip", r.clip}, {"id", r.id}, {"bg", r.bg}, {"l2_img", r.l2_img}, {"l2_w", r.l2_w}, {"en", r.en}};
  std::ofstream out(dir / ("nonfinite_step_" + std::to_string(step) + ".json"));
  // nlohmann serializes NaN/inf as null, which is what a reader needs to see.
  out << j.dump(2) << '\n';
}

}  // namespace

LossReport train_step(MapperState& state, const TrainingContext& ctx, const TrainingConfig& config) {
  const BackendBundle& bundle = ctx.bundle;
  auto rng = step_rng(config.seed, state.step);
  const RegionLossOptions region{config.normalize_region_losses};
  Gradients grads = zero_gradients(state);
  LossReport mean;
  mean.step = state.step + 1;
  Mapper mapper(state);
  const double inv_b = 1.0 / config.batch_size;
  const LossWeights weights = config.weights_at(state.step);

  for (int b = 0; b < config.batch_size; ++b) {
    const std::uint64_t noise_seed = rng();
    SamplingStrategy strategy = config.strategy;
    if (config.strategy_mix) strategy.kind = (rng() & 1u) ? SamplingKind::group : SamplingKind::random;
    const Prompt prompt = sample_prompt(ctx.taxonomy, strategy, rng);
    const LatentCode w = bundle.generator->map_noise(bundle.generator->sample_noise(noise_seed));
    const auto text = bundle.image_text_encoder->embed_text(prompt.text);

    MapperTrace trace;
    const OffsetDelta delta = mapper.forward(text, w, trace);
    LatentTensor grad(delta.shape());
    LossReport r;
    try {
      r = sample_objective(bundle, weights, region, w, delta, text, &grad);
    } catch (const NonFiniteError&) {
      dump_nonfinite(ctx.dump_dir, mean.step, prompt.text, w, delta, r);
      throw NonFiniteError("non-finite loss at step " + std::to_string(mean.step) + " for prompt \"" + prompt.text + "\"");
    }
    bool finite = std::isfinite(r.total);
    for (double g : grad.values()) finite = finite && std::isfinite(g);
    if (!finite) {
      dump_nonfinite(ctx.dump_dir, mean.step, prompt.text, w, delta, r);
      throw NonFiniteError("non-finite loss gradient at step " + std::to_string(mean.step) + " for prompt \"" + prompt.text + "\"");
    }
    for (double& g : grad.values()) g *= inv_b;
    mapper.backward(trace, grad, grads);

    mean.clip += r.clip * inv_b;
    mean.id += r.id * inv_b;
    mean.bg += r.bg * inv_b;
    mean.l2_img += r.l2_img * inv_b;
    mean.l2_w += r.l2_w * inv_b;
    mean.en += r.en * inv_b;
    if (b == 0) mean.prompt = prompt.text;
  }
  total_loss(mean, weights);

  if (config.grad_clip > 0.0) {
    const double n = gradient_norm(grads);
    if (n > config.grad_clip) scale_gradients(grads, config.grad_clip / n);
  }
  adam_step(state, grads, AdamOptions{config.learning_rate, config.beta1, config.beta2, config.adam_epsilon});
  return mean;
}

TrainRunRecord train(const TrainingConfig& config, const TrainOptions& options) {
  return train(config, make_training_context(config), options);
}

TrainRunRecord train(const TrainingConfig& config, const TrainingContext& base_ctx, const TrainOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  if (options.output_dir.empty()) throw ValidationError("training needs an output directory");
  fs::create_directories(options.output_dir);
  TrainingContext ctx = base_ctx;
  if (ctx.dump_dir.empty()) ctx.dump_dir = options.output_dir;

  TrainRunRecord record;
  record.config_snapshot = config.to_json();
  record.log_path = options.output_dir / "train_log.tsv";
  {
    std::ofstream snap(options.output_dir / "config.json");
    snap << record.config_snapshot.dump(2) << '\n';
  }

  const MapperConfig mcfg = resolve_mapper_config(config, ctx.bundle);
  MapperState state;
  bool resuming = false;
  if (options.resume_from) {
    state = load_mapper(*options.resume_from, mcfg.latent_shape);
    if (!(state.config == mcfg)) throw ValidationError("checkpoint architecture does not match the training config");
    resuming = true;
    // Keep only the log records the checkpoint has already absorbed.
    if (fs::exists(record.log_path)) {
      for (auto& r : read_loss_log(record.log_path)) {
        if (r.step <= state.step) record.reports.push_back(std::move(r));
      }
    }
    LossLogWriter rewrite(record.log_path, false);
    for (const auto& r : record.reports) rewrite.write(r);
  } else {
    state = init_mapper(mcfg, config.seed);
  }
  LossLogWriter log(record.log_path, resuming);

  const int spe = config.resolved_steps_per_epoch();
  const std::int64_t total = config.total_steps();
  const std::int64_t cadence = config.checkpoint_every > 0 ? config.checkpoint_every : spe;
  auto checkpoint = [&]() {
    std::ostringstream name;
    name << "step_" << std::setw(7) << std::setfill('0') << state.step << ".ckpt";
    auto path = options.output_dir / name.str();
    save_mapper(state, path);
    record.checkpoints.push_back(path);
    record.final_checkpoint = path;
  };

  while (state.step < total) {
    LossReport r = train_step(state, ctx, config);
    r.epoch = static_cast<int>((r.step - 1) / spe) + 1;
    log.write(r);
    if (options.on_step) options.on_step(r);
    record.reports.push_back(std::move(r));
    if (state.step % cadence == 0 || state.step == total) checkpoint();
  }
  if (record.final_checkpoint.empty()) checkpoint();

  record.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record;
}

}  // namespace latentedit
