#include "latentedit/service.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <list>
#include <mutex>
#include <random>
#include <thread>
#include <unordered_map>

#include "latentedit/editor.hpp"
#include "latentedit/error.hpp"
#include "latentedit/objective.hpp"
#include "latentedit/taxonomy.hpp"

// After Eigen: <resolv.h> defines _res as a macro.
#include "httplib.h"

namespace latentedit {

namespace fs = std::filesystem;
using nlohmann::json;

void ServiceConfig::validate() const {
  if (bind.empty()) throw ValidationError("bind address is empty");
  if (port < 0 || port > 65535) throw ValidationError("port must be in [0, 65535]");
  if (checkpoint.empty()) throw ValidationError("checkpoint path is required");
  if (backend.empty() && !backend_config) throw ValidationError("backend name is empty");
  if (max_concurrent_edits < 1) throw ValidationError("max_concurrent_edits must be >= 1");
  if (max_queued_edits < 0) throw ValidationError("max_queued_edits must be >= 0");
  if (max_body_bytes == 0) throw ValidationError("max_body_bytes must be > 0");
  if (session_capacity < 1) throw ValidationError("session_capacity must be >= 1");
  if (log_page_size < 1) throw ValidationError("log_page_size must be >= 1");
}

std::string ServiceConfig::resolved_taxonomy() const {
  if (!taxonomy.empty()) return taxonomy;
  return backend == "synthetic" ? "synthetic" : "celeba40";
}

void ServiceConfig::apply_environment() {
  if (const char* v = std::getenv("LATENTEDIT_BIND"); v && *v) bind = v;
  if (const char* v = std::getenv("LATENTEDIT_PORT"); v && *v) {
    try {
      port = std::stoi(v);
    } catch (const std::exception&) {
      throw ValidationError(std::string("LATENTEDIT_PORT is not a number: ") + v);
    }
  }
  if (const char* v = std::getenv("LATENTEDIT_CHECKPOINT"); v && *v) checkpoint = v;
  if (const char* v = std::getenv("LATENTEDIT_LOG"); v && *v) log_path = fs::path(v);
}

json ServiceConfig::to_json() const {
  json j = {{"bind", bind},
            {"port", port},
            {"checkpoint", checkpoint.string()},
            {"backend", backend},
            {"taxonomy", taxonomy},
            {"max_concurrent_edits", max_concurrent_edits},
            {"max_queued_edits", max_queued_edits},
            {"max_body_bytes", max_body_bytes},
            {"session_capacity", session_capacity},
            {"log_page_size", log_page_size}};
  if (backend_config) j["backend_config"] = backend_config->string();
  if (log_path) j["log_path"] = log_path->string();
  return j;
}

ServiceConfig ServiceConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw ParseError("service config must be a JSON object");
  static const std::vector<std::string> known = {"bind", "port", "checkpoint", "backend", "backend_config", "taxonomy", "log_path",
                                                 "max_concurrent_edits", "max_queued_edits", "max_body_bytes", "session_capacity",
                                                 "log_page_size"};
  for (const auto& [key, _] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ParseError("unknown service config key '" + key + "'");
  }
  ServiceConfig c;
  try {
    c.bind = doc.value("bind", c.bind);
    c.port = doc.value("port", c.port);
    if (doc.contains("checkpoint")) c.checkpoint = doc["checkpoint"].get<std::string>();
    c.backend = doc.value("backend", c.backend);
    if (doc.contains("backend_config")) c.backend_config = fs::path(doc["backend_config"].get<std::string>());
    c.taxonomy = doc.value("taxonomy", c.taxonomy);
    if (doc.contains("log_path")) c.log_path = fs::path(doc["log_path"].get<std::string>());
    c.max_concurrent_edits = doc.value("max_concurrent_edits", c.max_concurrent_edits);
    c.max_queued_edits = doc.value("max_queued_edits", c.max_queued_edits);
    c.max_body_bytes = doc.value("max_body_bytes", c.max_body_bytes);
    c.session_capacity = doc.value("session_capacity", c.session_capacity);
    c.log_page_size = doc.value("log_page_size", c.log_page_size);
  } catch (const json::exception& e) {
    throw ParseError(std::string("service config: ") + e.what());
  }
  return c;
}

ServiceConfig ServiceConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open service config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  ServiceConfig c = from_json(doc);
  const fs::path base = path.parent_path();
  auto rebase = [&](fs::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  rebase(c.checkpoint);
  if (c.backend_config) rebase(*c.backend_config);
  if (c.log_path) rebase(*c.log_path);
  return c;
}

namespace {

HttpResponse json_response(int status, const json& body) { return {status, body.dump(), "application/json"}; }

HttpResponse error_response(int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  return json_response(status, extra);
}

std::string random_hex(std::mt19937_64& rng, int bytes) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (int i = 0; i < bytes; ++i) {
    const auto b = static_cast<unsigned>(rng() & 0xFF);
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 0xF]);
  }
  return out;
}

json loss_record_json(const LossReport& r) {
  return {{"step", r.step},   {"epoch", r.epoch}, {"prompt", r.prompt}, {"clip", r.clip}, {"id", r.id},     {"bg", r.bg},
          {"l2_img", r.l2_img}, {"l2_w", r.l2_w}, {"en", r.en},         {"total", r.total}};
}

json image_payload(const Image& image) {
  const std::string png = encode_png(image);
  return {{"png_base64", base64_encode(png)}, {"sha256", sha256_hex(png)}, {"width", image.width}, {"height", image.height}};
}

// Least-recently-used map from session id to latent code.
class SessionStore {
 public:
  explicit SessionStore(std::size_t capacity) : capacity_(capacity) {}

  std::string insert(LatentCode w) {
    std::lock_guard lock(mu_);
    std::string id = random_hex(rng_, 16);
    order_.push_front(id);
    entries_[id] = {std::move(w), order_.begin()};
    while (entries_.size() > capacity_) {
      entries_.erase(order_.back());
      order_.pop_back();
    }
    return id;
  }

  std::optional<LatentCode> find(const std::string& id) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(id);
    if (it == entries_.end()) return std::nullopt;
    order_.splice(order_.begin(), order_, it->second.position);
    return it->second.w;
  }

 private:
  struct Entry {
    LatentCode w;
    std::list<std::string>::iterator position;
  };
  std::size_t capacity_;
  std::mutex mu_;
  std::list<std::string> order_;
  std::unordered_map<std::string, Entry> entries_;
  std::mt19937_64 rng_{std::random_device{}()};
};

// Bounded admission: `limit` edits run at once, `queue` more may wait.
class EditSlots {
 public:
  EditSlots(int limit, int queue) : limit_(limit), queue_(queue) {}

  bool acquire() {
    std::unique_lock lock(mu_);
    if (active_ < limit_) {
      ++active_;
      return true;
    }
    if (waiting_ >= queue_) return false;
    ++waiting_;
    cv_.wait(lock, [&] { return active_ < limit_; });
    --waiting_;
    ++active_;
    return true;
  }

  void release() {
    {
      std::lock_guard lock(mu_);
      --active_;
    }
    cv_.notify_one();
  }

 private:
  int limit_, queue_;
  int active_ = 0, waiting_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
};

struct ClientError : Error {
  int status;
  ClientError(int s, const std::string& m) : Error(m), status(s) {}
};

}  // namespace

struct Service::Impl {
  ServiceConfig config;
  std::optional<Editor> editor;
  std::optional<AttributeTaxonomy> taxonomy;
  std::optional<fs::path> log_path;
  std::optional<std::string> init_error;

  std::atomic<bool> ready{false};
  std::mutex init_mu;
  std::condition_variable init_cv;
  bool init_done = false;
  std::thread init_thread;

  SessionStore sessions;
  std::unique_ptr<EditSlots> slots;
  std::mt19937_64 diag_rng{std::random_device{}()};
  std::mutex diag_mu;

  httplib::Server server;
  int bound_port = -1;

  explicit Impl(ServiceConfig c) : config(std::move(c)), sessions(static_cast<std::size_t>(config.session_capacity)) {}

  void initialize() {
    try {
      BackendBundle bundle = config.backend_config ? create_bundle(load_backend_config(*config.backend_config)) : create_bundle(config.backend);
      const int limit = bundle.all_concurrent() ? config.max_concurrent_edits : 1;
      slots = std::make_unique<EditSlots>(limit, config.max_queued_edits);
      editor.emplace(Editor::load(config.checkpoint, std::move(bundle)));
      taxonomy.emplace(load_taxonomy(config.resolved_taxonomy()));
      if (config.log_path) log_path = config.log_path;
      else log_path = config.checkpoint.parent_path() / "train_log.tsv";
      ready = true;
    } catch (const std::exception& e) {
      init_error = e.what();
      std::cerr << "latentedit serve: initialization failed: " << e.what() << '\n';
    }
    {
      std::lock_guard lock(init_mu);
      init_done = true;
    }
    init_cv.notify_all();
  }

  std::string diagnostic_id() {
    std::lock_guard lock(diag_mu);
    return random_hex(diag_rng, 6);
  }

  HttpResponse attributes() const {
    json groups = json::array();
    for (Group g : taxonomy->groups()) groups.push_back({{"name", std::string(group_name(g))}, {"members", taxonomy->members(g)}});
    json attrs = json::array();
    for (const auto& a : taxonomy->attributes()) {
      attrs.push_back({{"id", a.id}, {"group", std::string(group_name(a.group))}, {"phrase", a.phrase}});
    }
    return json_response(200, {{"taxonomy", taxonomy->name()}, {"groups", groups}, {"attributes", attrs}});
  }

  HttpResponse latest_log(const std::map<std::string, std::string>& query) const {
    std::int64_t since = 0;
    if (auto it = query.find("since"); it != query.end()) {
      try {
        std::size_t used = 0;
        since = std::stoll(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        return error_response(400, "since must be an integer step");
      }
    }
    if (!log_path || !fs::exists(*log_path)) return error_response(404, "no training log");
    std::vector<LossReport> records;
    try {
      records = read_loss_log(*log_path, since);
    } catch (const std::exception& e) {
      return error_response(500, std::string("cannot read training log: ") + e.what());
    }
    const std::size_t page = static_cast<std::size_t>(config.log_page_size);
    const bool more = records.size() > page;
    if (more) records.resize(page);
    json out = json::array();
    for (const auto& r : records) out.push_back(loss_record_json(r));
    const std::int64_t next = records.empty() ? since : records.back().step;
    return json_response(200, {{"records", out}, {"next_since", next}, {"more", more}});
  }

  HttpResponse edit(const std::string& body) {
    if (body.size() > config.max_body_bytes) return error_response(413, "request body exceeds " + std::to_string(config.max_body_bytes) + " bytes");
    json doc;
    try {
      doc = json::parse(body);
    } catch (const json::exception&) {
      return error_response(400, "body is not valid JSON");
    }
    json echo = json::object();
    if (doc.is_object() && doc.contains("request_id")) echo["request_id"] = doc["request_id"];

    try {
      if (!doc.is_object()) throw ClientError(400, "body must be a JSON object");
      if (!doc.contains("text") || !doc["text"].is_string()) throw ClientError(400, "text must be a string");
      const std::string text = doc["text"].get<std::string>();
      double alpha = 1.0;
      if (doc.contains("alpha")) {
        if (!doc["alpha"].is_number()) throw ClientError(400, "alpha must be a number");
        alpha = doc["alpha"].get<double>();
      }
      if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw ClientError(422, "text is empty");
      try {
        validate_edit_inputs(text, alpha);
      } catch (const ValidationError& e) {
        throw ClientError(400, e.what());
      }
      if (!doc.contains("source") || !doc["source"].is_object()) throw ClientError(400, "source must be an object");
      const json& src = doc["source"];
      const int kinds = static_cast<int>(src.contains("seed")) + static_cast<int>(src.contains("image")) + static_cast<int>(src.contains("latent_id"));
      if (kinds != 1) throw ClientError(400, "source needs exactly one of seed, image, latent_id");

      std::optional<std::string> session_id;
      EditSource source;
      if (src.contains("seed")) {
        if (!src["seed"].is_number_unsigned()) throw ClientError(400, "seed must be a non-negative integer");
        source = NoiseSeed{src["seed"].get<std::uint64_t>()};
      } else if (src.contains("latent_id")) {
        if (!src["latent_id"].is_string()) throw ClientError(400, "latent_id must be a string");
        const std::string id = src["latent_id"].get<std::string>();
        auto w = sessions.find(id);
        if (!w) {
          return error_response(404, "unknown or expired latent id", {{"hint", "re-upload the image or resend the seed to get a new latent id"}});
        }
        source = std::move(*w);
        session_id = id;
      } else {
        if (!src["image"].is_string()) throw ClientError(400, "image must be a base64 PNG string");
        Image image;
        try {
          image = decode_png(base64_decode(src["image"].get<std::string>()));
        } catch (const Error& e) {
          throw ClientError(400, std::string("cannot decode image: ") + e.what());
        }
        if (!editor->bundle().inverter) throw ClientError(422, "backend '" + editor->bundle().name + "' cannot invert images");
        source = std::move(image);
      }

      if (!slots->acquire()) return error_response(429, "too many concurrent edits", echo);
      EditResult r;
      try {
        r = editor->edit(source, text, alpha);
      } catch (...) {
        slots->release();
        throw;
      }
      slots->release();

      if (!session_id) session_id = sessions.insert(r.w);
      json diag = r.diagnostics.to_json();
      diag["delta"] = r.delta.vector();
      diag["w"] = r.w.vector();
      diag["w_edited"] = r.w_edited.vector();
      diag["latent_shape"] = {r.w.shape().layers, r.w.shape().dims};
      json out = echo;
      out["session_id"] = *session_id;
      out["text"] = text;
      out["alpha"] = alpha;
      out["original"] = image_payload(r.original);
      out["edited"] = image_payload(r.edited);
      out["diagnostics"] = std::move(diag);
      out["seconds"] = r.seconds;
      return json_response(200, out);
    } catch (const ClientError& e) {
      return error_response(e.status, e.what(), echo);
    } catch (const ShapeError& e) {
      return error_response(422, e.what(), echo);
    } catch (const NotRenderableError& e) {
      return error_response(422, e.what(), echo);
    } catch (const json::exception& e) {
      return error_response(400, e.what(), echo);
    } catch (const std::exception& e) {
      const std::string id = diagnostic_id();
      std::cerr << "latentedit serve: edit failed [" << id << "]: " << e.what() << '\n';
      echo["diagnostic_id"] = id;
      return error_response(500, "edit failed", echo);
    }
  }
};

Service::Service(ServiceConfig config) {
  config.validate();
  impl_ = std::make_unique<Impl>(std::move(config));
}

Service::~Service() {
  stop();
  if (impl_->init_thread.joinable()) impl_->init_thread.join();
}

void Service::start_initialization() {
  if (impl_->init_thread.joinable()) return;
  impl_->init_thread = std::thread([this] { impl_->initialize(); });
}

bool Service::wait_ready() {
  std::unique_lock lock(impl_->init_mu);
  impl_->init_cv.wait(lock, [&] { return impl_->init_done; });
  return impl_->ready;
}

bool Service::ready() const { return impl_->ready; }

HttpResponse Service::handle(const std::string& method, const std::string& path, const std::map<std::string, std::string>& query,
                             const std::string& body) {
  const bool known = path == "/attributes" || path == "/edit" || path == "/runs/latest-log";
  if (!known) return error_response(404, "no such endpoint: " + path);
  const bool post = path == "/edit";
  if (method != (post ? "POST" : "GET")) return error_response(405, "method not allowed");
  if (!impl_->ready) {
    if (impl_->init_error) return error_response(503, "service failed to initialize: " + *impl_->init_error);
    return error_response(503, "service is initializing");
  }
  if (path == "/attributes") return impl_->attributes();
  if (path == "/runs/latest-log") return impl_->latest_log(query);
  return impl_->edit(body);
}

int Service::bind() {
  auto& server = impl_->server;
  server.set_payload_max_length(impl_->config.max_body_bytes);
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    const HttpResponse r = handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get("/.*", route);
  server.Post("/.*", route);
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      res.set_content(json{{"error", "http status " + std::to_string(res.status)}}.dump(), "application/json");
    }
  });
  const int requested = impl_->config.port;
  if (requested == 0) {
    impl_->bound_port = server.bind_to_any_port(impl_->config.bind);
  } else {
    impl_->bound_port = server.bind_to_port(impl_->config.bind, requested) ? requested : -1;
  }
  if (impl_->bound_port < 0) {
    throw IoError("cannot bind " + impl_->config.bind + ":" + std::to_string(requested));
  }
  return impl_->bound_port;
}

void Service::serve() {
  if (impl_->bound_port < 0) bind();
  impl_->server.listen_after_bind();
}

void Service::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace latentedit
