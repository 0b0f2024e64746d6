#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

namespace latentedit {

/// Service settings. JSON keys mirror the field names. Environment
/// variables LATENTEDIT_BIND, LATENTEDIT_PORT, LATENTEDIT_CHECKPOINT and
/// LATENTEDIT_LOG override bind, port, checkpoint and log_path.
struct ServiceConfig {
  std::string bind = "127.0.0.1";
  int port = 8080;
  std::filesystem::path checkpoint;
  std::string backend = "synthetic";
  std::optional<std::filesystem::path> backend_config;
  std::string taxonomy;  // empty: "synthetic" for the synthetic backend, else "celeba40"
  std::optional<std::filesystem::path> log_path;  // training log served by /runs/latest-log

  int max_concurrent_edits = 2;
  int max_queued_edits = 16;
  std::size_t max_body_bytes = 8u << 20;
  int session_capacity = 256;
  int log_page_size = 500;

  void validate() const;
  std::string resolved_taxonomy() const;
  void apply_environment();
  nlohmann::json to_json() const;
  static ServiceConfig from_json(const nlohmann::json& doc);
  static ServiceConfig load(const std::filesystem::path& path);
};

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// Endpoints: GET /attributes, POST /edit, GET /runs/latest-log?since=<step>.
///
/// Initialization (backend, checkpoint, taxonomy) runs on a background
/// thread; until it completes every endpoint answers 503.
class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void start_initialization();
  /// Blocks until initialization finished; returns false if it failed.
  bool wait_ready();
  bool ready() const;

  /// Routes one request; used by the HTTP server and directly by tests.
  HttpResponse handle(const std::string& method, const std::string& path, const std::map<std::string, std::string>& query,
                      const std::string& body);

  /// Binds (port 0 picks a free port) and returns the bound port.
  int bind();
  /// Serves on the bound socket until stop().
  void serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace latentedit
