#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "latentedit/ablation.hpp"
#include "latentedit/editor.hpp"
#include "latentedit/error.hpp"
#include "latentedit/evalsuite.hpp"
#include "latentedit/service.hpp"
#include "latentedit/trainer.hpp"

namespace fs = std::filesystem;
using namespace latentedit;

namespace {

Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

BackendBundle make_bundle(const std::string& backend, const std::string& backend_config) {
  if (!backend_config.empty()) return create_bundle(load_backend_config(backend_config));
  return create_bundle(backend);
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

int run_train(const std::string& config_path, const std::string& backend, std::optional<std::uint64_t> seed, const std::string& out,
              const std::string& resume) {
  TrainingConfig config = config_path.empty() ? TrainingConfig{} : TrainingConfig::load(config_path);
  if (!backend.empty()) {
    config.backend = backend;
    config.backend_config.reset();
  }
  if (seed) config.seed = *seed;
  TrainOptions options;
  options.output_dir = out;
  if (!resume.empty()) options.resume_from = fs::path(resume);
  const std::int64_t total = config.total_steps();
  const std::int64_t every = std::max<std::int64_t>(1, config.resolved_steps_per_epoch() / 10);
  options.on_step = [&](const LossReport& r) {
    if (r.step % every == 0 || r.step == total) {
      std::fprintf(stderr, "step %lld/%lld epoch %d total %.5f clip %.5f en %.5f\n", static_cast<long long>(r.step),
                   static_cast<long long>(total), r.epoch, r.total, r.clip, r.en);
    }
  };
  const TrainRunRecord record = train(config, options);
  std::cout << "checkpoint " << record.final_checkpoint.string() << "\nlog " << record.log_path.string() << "\nseconds "
            << record.wall_clock_seconds << '\n';
  return 0;
}

int run_edit(const std::string& text, const std::string& image, std::optional<std::uint64_t> seed, const std::string& latent, double alpha,
             const std::string& ckpt, const std::string& out, const std::string& backend, const std::string& backend_config) {
  EditSource source;
  if (!image.empty()) source = ImagePath{image};
  else if (!latent.empty()) source = read_latent(latent);
  else source = NoiseSeed{*seed};
  validate_edit_inputs(text, alpha);
  const Editor editor = Editor::load(ckpt, make_bundle(backend, backend_config));
  const EditResult r = editor.edit(source, text, alpha);
  fs::create_directories(out);
  const std::string original = encode_png(r.original), edited = encode_png(r.edited);
  write_file(fs::path(out) / "original.png", original);
  write_file(fs::path(out) / "edited.png", edited);
  write_latent(fs::path(out) / "w.latent", r.w);
  write_latent(fs::path(out) / "delta.latent", r.delta, r.w.space());
  nlohmann::json summary = {{"text", text},
                            {"alpha", alpha},
                            {"sha256", {{"original", sha256_hex(original)}, {"edited", sha256_hex(edited)}}},
                            {"diagnostics", r.diagnostics.to_json()},
                            {"seconds", r.seconds}};
  write_file(fs::path(out) / "edit.json", summary.dump(2) + "\n");
  for (const auto& w : r.diagnostics.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int run_eval(const std::string& protocol_path, const std::string& ckpt, const std::string& backend, const std::string& backend_config,
             const std::string& taxonomy, const std::string& out) {
  const EvalProtocol protocol = EvalProtocol::load(protocol_path);
  BackendBundle bundle = make_bundle(backend, backend_config);
  const std::string tax = !taxonomy.empty() ? taxonomy : (bundle.name == "synthetic" ? "synthetic" : "celeba40");
  const MapperState state = load_mapper(ckpt, bundle.generator->latent_shape());
  EvalOptions options;
  if (!out.empty()) options.report_path = fs::path(out);
  const MetricReport report = evaluate(protocol, state, bundle, load_taxonomy(tax), options);
  std::cout << report.to_json().dump(2) << '\n';
  for (const auto& [metric, status] : report.status) {
    if (status != "ok" && status != "off") return 1;
  }
  return 0;
}

int run_serve(const std::string& config_path, std::optional<int> port) {
  ServiceConfig config = config_path.empty() ? ServiceConfig{} : ServiceConfig::load(config_path);
  config.apply_environment();
  if (port) config.port = *port;
  Service service(config);
  service.start_initialization();
  const int bound = service.bind();
  std::cerr << "listening on http://" << config.bind << ':' << bound << " (initializing)\n";
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  service.serve();
  g_service = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-driven multi-attribute latent editing"};
  app.require_subcommand(1);

  std::string config, backend, backend_config, out, resume, grid, protocol, ckpt, text, image, latent, requests, taxonomy;
  std::optional<std::uint64_t> seed;
  std::optional<int> port;
  double alpha = 1.0;

  auto* train_cmd = app.add_subcommand("train", "Train a mapper");
  train_cmd->add_option("--config", config, "Training config (JSON)")->check(CLI::ExistingFile);
  train_cmd->add_option("--backend", backend, "Backend name, overrides the config")->check(CLI::IsMember({"synthetic", "pretrained-faces"}));
  train_cmd->add_option("--seed", seed, "Seed, overrides the config");
  train_cmd->add_option("--out", out, "Run directory")->required();
  train_cmd->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  auto* ablate_cmd = app.add_subcommand("ablate", "Strategy x attribute-count ablation");
  ablate_cmd->add_option("--grid", grid, "e.g. random,group:1-5")->required();
  ablate_cmd->add_option("--config", config, "Base training config (JSON)")->check(CLI::ExistingFile);
  ablate_cmd->add_option("--protocol", protocol, "Evaluation protocol (JSON)")->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", out, "Output directory")->required();

  auto* edit_cmd = app.add_subcommand("edit", "Edit one image, latent or seed");
  edit_cmd->add_option("--text", text, "Edit prompt")->required();
  auto* src_image = edit_cmd->add_option("--image", image, "PNG to invert")->check(CLI::ExistingFile);
  auto* src_seed = edit_cmd->add_option("--seed", seed, "Noise seed");
  auto* src_latent = edit_cmd->add_option("--latent", latent, "Latent file")->check(CLI::ExistingFile);
  src_image->excludes(src_seed, src_latent);
  src_seed->excludes(src_latent);
  edit_cmd->add_option("--alpha", alpha, "Offset scale")->default_val(1.0);
  edit_cmd->add_option("--ckpt", ckpt, "Mapper checkpoint")->required()->check(CLI::ExistingFile);
  edit_cmd->add_option("--out", out, "Output directory")->required();
  edit_cmd->add_option("--backend", backend, "Backend name")->default_val("synthetic");
  edit_cmd->add_option("--backend-config", backend_config, "Backend config (JSON)")->check(CLI::ExistingFile);

  auto* batch_cmd = app.add_subcommand("edit-batch", "Edit every request in a JSON-lines file");
  batch_cmd->add_option("--requests", requests, "Requests file")->required()->check(CLI::ExistingFile);
  batch_cmd->add_option("--out", out, "Output directory")->required();
  batch_cmd->add_option("--ckpt", ckpt, "Default checkpoint")->check(CLI::ExistingFile);
  batch_cmd->add_option("--backend", backend, "Default backend")->default_val("synthetic");
  batch_cmd->add_option("--backend-config", backend_config, "Backend config (JSON)")->check(CLI::ExistingFile);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--protocol", protocol, "Evaluation protocol (JSON)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--ckpt", ckpt, "Mapper checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--backend", backend, "Backend name")->default_val("synthetic");
  eval_cmd->add_option("--backend-config", backend_config, "Backend config (JSON)")->check(CLI::ExistingFile);
  eval_cmd->add_option("--taxonomy", taxonomy, "Taxonomy name or file");
  eval_cmd->add_option("--out", out, "Report path (JSON)");

  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("--config", config, "Service config (JSON)")->check(CLI::ExistingFile);
  serve_cmd->add_option("--port", port, "Port, overrides config and environment");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(config, backend, seed, out, resume);
    if (*ablate_cmd) {
      const TrainingConfig base = config.empty() ? TrainingConfig{} : TrainingConfig::load(config);
      EvalProtocol proto;
      if (!protocol.empty()) {
        proto = EvalProtocol::load(protocol);
      } else {
        proto.seed_count = 500;
      }
      const AblationTable table = run_ablation(parse_grid(grid), base, proto, out);
      std::cout << table.to_markdown();
      for (const auto& c : table.cells) {
        if (c.error) return 1;
      }
      return 0;
    }
    if (*edit_cmd) {
      if (image.empty() && latent.empty() && !seed) throw ValidationError("edit needs one of --image, --seed, --latent");
      return run_edit(text, image, seed, latent, alpha, ckpt, out, backend, backend_config);
    }
    if (*batch_cmd) {
      BatchDefaults defaults;
      if (!ckpt.empty()) defaults.checkpoint = fs::path(ckpt);
      defaults.backend = backend;
      if (!backend_config.empty()) defaults.backend_config = fs::path(backend_config);
      const BatchSummary summary = edit_batch(requests, out, defaults);
      std::cout << "succeeded " << summary.succeeded << " failed " << summary.failed << '\n';
      return summary.exit_code();
    }
    if (*eval_cmd) return run_eval(protocol, ckpt, backend, backend_config, taxonomy, out);
    if (*serve_cmd) return run_serve(config, port);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
