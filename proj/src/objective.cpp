#include "latentedit/objective.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "latentedit/error.hpp"

namespace latentedit {

namespace {

void require_weight(double v, const char* name) {
  if (!std::isfinite(v) || v < 0.0) throw ValidationError(std::string("loss weight ") + name + " must be finite and >= 0");
}

void require_same(const Image& a, const Image& b) {
  if (!a.same_size(b)) throw ShapeError("image sizes differ");
}

void require_mask(const Image& img, const Mask& m) {
  if (m.height != img.height || m.width != img.width) {
    throw ShapeError("mask " + std::to_string(m.height) + "x" + std::to_string(m.width) + " does not match image " +
                     std::to_string(img.height) + "x" + std::to_string(img.width));
  }
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '\t') out += "\\t";
    else if (c == '\n') out += "\\n";
    else if (c == '\r') out += "\\r";
    else out += c;
  }
  return out;
}

std::string unescape(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out += s[i];
      continue;
    }
    char n = s[++i];
    out += n == 't' ? '\t' : n == 'n' ? '\n' : n == 'r' ? '\r' : n;
  }
  return out;
}

}  // namespace

void LossWeights::validate() const {
  require_weight(id, "id");
  require_weight(bg, "bg");
  require_weight(l2_img, "l2_img");
  require_weight(l2_w, "l2_w");
  require_weight(en, "en");
}

nlohmann::json LossWeights::to_json() const {
  return {{"id", id}, {"bg", bg}, {"l2_img", l2_img}, {"l2_w", l2_w}, {"en", en}};
}

LossWeights LossWeights::from_json(const nlohmann::json& doc) {
  LossWeights w;
  if (doc.is_null()) return w;
  if (!doc.is_object()) throw ParseError("loss weights must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (!value.is_number()) throw ParseError("loss weight '" + key + "' is not a number");
    double v = value.get<double>();
    if (key == "id") w.id = v;
    else if (key == "bg") w.bg = v;
    else if (key == "l2_img") w.l2_img = v;
    else if (key == "l2_w") w.l2_w = v;
    else if (key == "en") w.en = v;
    else throw ParseError("unknown loss weight '" + key + "'");
  }
  w.validate();
  return w;
}

double total_loss(LossReport& r, const LossWeights& w) {
  for (double v : {r.clip, r.id, r.bg, r.l2_img, r.l2_w, r.en}) {
    if (!std::isfinite(v)) throw NonFiniteError("loss component is not finite");
  }
  r.total = r.clip + w.id * r.id + w.bg * r.bg + w.l2_img * r.l2_img + w.l2_w * r.l2_w + w.en * r.en;
  return r.total;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("embedding sizes differ");
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw ValidationError("zero-norm embedding");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / std::max(na * nb, kCosineEpsilon);
}

std::vector<double> cosine_distance_gradient(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("embedding sizes differ");
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw ValidationError("zero-norm embedding");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  std::vector<double> g(a.size());
  const double denom = na * nb;
  if (denom < kCosineEpsilon) {
    for (std::size_t i = 0; i < a.size(); ++i) g[i] = -b[i] / kCosineEpsilon;
    return g;
  }
  // d cos/da = b/(|a||b|) - cos * a/|a|^2
  const double cos = dot / denom;
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = -(b[i] / denom - cos * a[i] / (na * na));
  return g;
}

double clip_alignment_loss(std::span<const double> image_embedding, std::span<const double> text_embedding) {
  return 1.0 - cosine_similarity(image_embedding, text_embedding);
}

double clip_alignment_loss(const Image& edited, const std::string& prompt, const ImageTextEncoder& encoder) {
  return clip_alignment_loss(encoder.embed_image(edited), encoder.embed_text(prompt));
}

Image clip_alignment_gradient(const Image& edited, std::span<const double> text_embedding, const ImageTextEncoder& encoder) {
  auto e = encoder.embed_image(edited);
  return encoder.embed_image_vjp(edited, cosine_distance_gradient(e, text_embedding));
}

double identity_loss(const Image& edited, const Image& original, const IdentityEmbedder& embedder) {
  return 1.0 - cosine_similarity(embedder.embed(edited), embedder.embed(original));
}

Image identity_loss_gradient(const Image& edited, std::span<const double> original_embedding, const IdentityEmbedder& embedder) {
  auto e = embedder.embed(edited);
  return embedder.embed_vjp(edited, cosine_distance_gradient(e, original_embedding));
}

Mask combine_masks(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("mask sizes differ");
  Mask out(a.height, a.width);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = (a.data[i] && b.data[i]) ? 1 : 0;
  return out;
}

double masked_l2(const Image& edited, const Image& original, const Mask& mask, RegionLossOptions opts) {
  require_same(edited, original);
  require_mask(edited, mask);
  const std::size_t plane = edited.plane();
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    if (!mask.data[p]) continue;
    for (int c = 0; c < edited.channels; ++c) {
      double d = edited.data[c * plane + p] - original.data[c * plane + p];
      sq += d * d;
    }
    count += static_cast<std::size_t>(edited.channels);
  }
  if (opts.normalize_by_count) return count == 0 ? 0.0 : std::sqrt(sq / static_cast<double>(count));
  return std::sqrt(sq);
}

Image masked_l2_gradient(const Image& edited, const Image& original, const Mask& mask, RegionLossOptions opts) {
  const double n = masked_l2(edited, original, mask, RegionLossOptions{});
  Image g(edited.channels, edited.height, edited.width);
  if (n == 0.0) return g;
  double scale = 1.0 / n;
  if (opts.normalize_by_count) {
    std::size_t count = mask.count() * static_cast<std::size_t>(edited.channels);
    scale /= std::sqrt(static_cast<double>(count));
  }
  const std::size_t plane = edited.plane();
  for (std::size_t p = 0; p < plane; ++p) {
    if (!mask.data[p]) continue;
    for (int c = 0; c < edited.channels; ++c) {
      g.data[c * plane + p] = (edited.data[c * plane + p] - original.data[c * plane + p]) * scale;
    }
  }
  return g;
}

double background_loss(const Image& edited, const Image& original, const RegionMasks& me, const RegionMasks& mo,
                       RegionLossOptions opts) {
  return masked_l2(edited, original, combine_masks(me.background, mo.background), opts);
}

double face_region_loss(const Image& edited, const Image& original, const RegionMasks& me, const RegionMasks& mo,
                        RegionLossOptions opts) {
  return masked_l2(edited, original, combine_masks(me.face, mo.face), opts);
}

std::string loss_log_header() { return "step\tepoch\tclip\tid\tbg\tl2_img\tl2_w\ten\ttotal\tprompt"; }

std::string format_loss_record(const LossReport& r) {
  std::string line = std::to_string(r.step) + "\t" + std::to_string(r.epoch);
  for (double v : {r.clip, r.id, r.bg, r.l2_img, r.l2_w, r.en, r.total}) line += "\t" + fmt(v);
  line += "\t" + escape(r.prompt);
  return line;
}

LossReport parse_loss_record(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  if (fields.size() != 10) throw ParseError("training log record has " + std::to_string(fields.size()) + " fields, expected 10");
  LossReport r;
  try {
    std::size_t used = 0;
    r.step = std::stoll(fields[0], &used);
    if (used != fields[0].size()) throw std::invalid_argument("step");
    r.epoch = std::stoi(fields[1], &used);
    if (used != fields[1].size()) throw std::invalid_argument("epoch");
    double* slots[] = {&r.clip, &r.id, &r.bg, &r.l2_img, &r.l2_w, &r.en, &r.total};
    for (int i = 0; i < 7; ++i) {
      *slots[i] = std::stod(fields[2 + i], &used);
      if (used != fields[2 + i].size()) throw std::invalid_argument("value");
    }
  } catch (const std::exception&) {
    throw ParseError("malformed training log record: " + line.substr(0, 80));
  }
  r.prompt = unescape(fields[9]);
  return r;
}

LossLogWriter::LossLogWriter(const std::filesystem::path& path, bool append) : path_(path) {
  const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw IoError("cannot open training log " + path.string());
  if (fresh) {
    out_ << loss_log_header() << '\n';
    out_.flush();
  }
}

void LossLogWriter::write(const LossReport& report) {
  std::lock_guard lock(mu_);
  out_ << format_loss_record(report) << '\n';
  out_.flush();
  if (!out_) throw IoError("write to training log " + path_.string() + " failed");
}

std::vector<LossReport> read_loss_log(const std::filesystem::path& path, std::optional<std::int64_t> since) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open training log " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  std::vector<LossReport> out;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;  // partial trailing record
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (header) {
      if (line != loss_log_header()) throw ParseError(path.string() + " is not a training log (bad header)");
      header = false;
      continue;
    }
    if (line.empty()) continue;
    auto r = parse_loss_record(line);
    if (!since || r.step > *since) out.push_back(std::move(r));
  }
  return out;
}

}  // namespace latentedit
