#include "latentedit/synthworld.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "latentedit/error.hpp"

namespace latentedit::synth {

namespace {

// Face oval geometry in normalized coordinates.
constexpr double kFaceCx = 0.5;
constexpr double kFaceCy = 0.58;
constexpr double kFaceRy = 0.36;
constexpr double kFaceRx = 0.28;
constexpr double kFaceWidthSwing = 0.2;  // rx = kFaceRx * (1 + swing * value)
constexpr double kEdgeSoftness = 0.08;

constexpr Vec3 kSkin = {0.55, 0.15, -0.10};
constexpr Vec3 kHair = {-0.35, -0.45, -0.55};
constexpr Vec3 kBackgroundTop = {-0.65, -0.35, 0.55};
constexpr Vec3 kBackgroundBottom = {-0.45, -0.25, 0.35};

// Reference skin patch on the forehead; no feature touches it.
constexpr Rect kReferencePatch = {0.45, 0.55, 0.38, 0.42};
// Rows below the mouth used to read face width off the jaw line.
constexpr double kBandY0 = 0.76;
constexpr double kBandY1 = 0.82;

constexpr double kMaxValue = 1.0 - 1e-9;

Vec3 unit(Vec3 v) {
  double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }

std::vector<Rect> mirrored(Rect left) { return {left, Rect{1.0 - left.x1, 1.0 - left.x0, left.y0, left.y1}}; }

bool inside(const Rect& r, double u, double v) { return u >= r.x0 && u < r.x1 && v >= r.y0 && v < r.y1; }

const Vec3 kGray = unit({1, 1, 1});
const Vec3 kDark = unit({-1, -1, -1});

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

bool contains_sequence(const std::vector<std::string>& tokens, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > tokens.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= tokens.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) return true;
  }
  return false;
}

bool mentions(const Feature& f, const std::vector<std::string>& tokens) {
  for (const auto& kw : f.keywords) {
    if (contains_sequence(tokens, tokenize(kw))) return true;
  }
  return false;
}

double clamp_value(double v) { return std::clamp(v, -kMaxValue, kMaxValue); }

}  // namespace

std::vector<std::string> feature_families() {
  return {"hair_color", "hair_waves", "bangs",     "eye_aperture", "eye_bags",     "brow_arch", "lip_color",  "mouth_corners",
          "mustache",   "glasses",    "hat",       "cheek_volume", "cheek_blush",  "skin_tone", "nose"};
}

Feature make_feature(const std::string& family) {
  Feature f;
  f.family = family;
  if (family == "hair_color") {
    f.hair_layer = true;
    f.regions = {{0.16, 0.84, 0.14, 0.30}};
    f.color = unit({0.6, 0.45, -0.66});
    f.amplitude = 0.45;
    f.keywords = {"blond", "blonde"};
  } else if (family == "hair_waves") {
    f.hair_layer = true;
    f.striped = true;
    f.regions = {{0.16, 0.84, 0.14, 0.30}};
    f.color = kGray;
    f.amplitude = 0.3;
    f.keywords = {"wavy"};
  } else if (family == "bangs") {
    f.regions = {{0.42, 0.58, 0.30, 0.35}};
    f.color = kDark;
    f.amplitude = 0.4;
    f.keywords = {"bangs"};
  } else if (family == "eye_aperture") {
    f.regions = mirrored({0.34, 0.44, 0.46, 0.52});
    f.base = {-0.6, -0.55, -0.4};
    f.color = kGray;
    f.amplitude = 0.35;
    f.keywords = {"narrow"};
  } else if (family == "eye_bags") {
    f.regions = mirrored({0.34, 0.44, 0.53, 0.56});
    f.color = unit({-0.3, -0.5, 0.1});
    f.amplitude = 0.35;
    f.keywords = {"bags"};
  } else if (family == "brow_arch") {
    f.regions = mirrored({0.34, 0.44, 0.40, 0.44});
    f.base = {-0.4, -0.4, -0.35};
    f.color = kDark;
    f.amplitude = 0.35;
    f.keywords = {"arched"};
  } else if (family == "lip_color") {
    f.regions = {{0.42, 0.58, 0.70, 0.74}};
    f.base = {0.1, -0.2, -0.1};
    f.color = unit({0.8, -0.45, -0.35});
    f.amplitude = 0.5;
    f.keywords = {"lipstick"};
  } else if (family == "mouth_corners") {
    f.regions = mirrored({0.37, 0.41, 0.66, 0.70});
    f.color = kGray;
    f.amplitude = 0.4;
    f.keywords = {"smiling", "smile", "smiles"};
  } else if (family == "mustache") {
    f.regions = {{0.43, 0.57, 0.66, 0.70}};
    f.color = kDark;
    f.amplitude = 0.45;
    f.keywords = {"mustache", "moustache"};
  } else if (family == "glasses") {
    f.regions = {{0.45, 0.55, 0.47, 0.49}};
    auto rims = mirrored({0.34, 0.44, 0.445, 0.46});
    f.regions.insert(f.regions.end(), rims.begin(), rims.end());
    f.color = kDark;
    f.amplitude = 0.5;
    f.keywords = {"glasses", "eyeglasses"};
  } else if (family == "hat") {
    f.hair_layer = true;
    f.regions = {{0.16, 0.84, 0.06, 0.14}};
    f.base = {0.25, 0.05, 0.2};
    f.color = unit({0.7, -0.2, -0.68});
    f.amplitude = 0.45;
    f.keywords = {"hat"};
  } else if (family == "cheek_volume") {
    f.regions = mirrored({0.36, 0.43, 0.60, 0.66});
    f.color = kGray;
    f.amplitude = 0.3;
    f.keywords = {"chubby"};
  } else if (family == "cheek_blush") {
    f.regions = mirrored({0.36, 0.43, 0.60, 0.66});
    f.color = unit({2, -1, -1});
    f.amplitude = 0.35;
    f.keywords = {"rosy"};
  } else if (family == "skin_tone") {
    f.whole_face = true;
    f.regions = {kReferencePatch};
    f.color = kGray;
    f.amplitude = 0.2;
  } else if (family == "nose") {
    f.regions = {{0.47, 0.53, 0.54, 0.62}};
    f.color = kGray;
    f.amplitude = 0.3;
  } else {
    throw ValidationError("unknown synthetic feature family '" + family + "'");
  }
  return f;
}

SyntheticSpec SyntheticSpec::defaults() {
  struct Row {
    const char* id;
    const char* family;
    double gain;
  };
  // Mouth edits are easy (steep response), cheek edits hard (shallow).
  const Row rows[] = {
      {"blond_hair", "hair_color", 6.0},      {"wavy_hair", "hair_waves", 6.0},   {"bangs", "bangs", 6.0},
      {"narrow_eyes", "eye_aperture", 4.0},   {"bags_under_eyes", "eye_bags", 4.0}, {"arched_eyebrows", "brow_arch", 4.0},
      {"wearing_lipstick", "lip_color", 8.0}, {"smiling", "mouth_corners", 8.0},  {"mustache", "mustache", 8.0},
      {"eyeglasses", "glasses", 6.0},         {"wearing_hat", "hat", 6.0},
      {"chubby", "cheek_volume", 2.4},        {"rosy_cheeks", "cheek_blush", 2.4},
  };
  SyntheticSpec spec;
  int dim = 0;
  for (const auto& r : rows) {
    Feature f = make_feature(r.family);
    f.id = r.id;
    f.dim = dim++;
    f.gain = r.gain;
    spec.attributes.push_back(std::move(f));
  }
  spec.face_width_dim = dim++;
  Feature tone = make_feature("skin_tone");
  tone.id = "skin_tone";
  tone.dim = dim++;
  tone.gain = 4.0;
  Feature nose = make_feature("nose");
  nose.id = "nose";
  nose.dim = dim++;
  nose.gain = 4.0;
  spec.identity = {tone, nose};
  return spec;
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& doc) {
  SyntheticSpec spec = defaults();
  if (doc.is_null()) return spec;
  if (!doc.is_object()) throw ParseError("synthetic spec must be a JSON object");
  spec.latent_dim = doc.value("latent_dim", spec.latent_dim);
  spec.image_size = doc.value("image_size", spec.image_size);
  spec.taxonomy = doc.value("taxonomy", spec.taxonomy);
  spec.noise_scale = doc.value("noise_scale", spec.noise_scale);
  spec.kappa = doc.value("kappa", spec.kappa);
  spec.angle_scale = doc.value("angle_scale", spec.angle_scale);
  spec.identity_kappa = doc.value("identity_kappa", spec.identity_kappa);
  spec.threshold = doc.value("threshold", spec.threshold);
  spec.invert_tolerance = doc.value("invert_tolerance", spec.invert_tolerance);
  if (doc.contains("face_width")) {
    spec.face_width_dim = doc["face_width"].value("dim", spec.face_width_dim);
    spec.face_width_gain = doc["face_width"].value("gain", spec.face_width_gain);
  }
  auto read_features = [](const nlohmann::json& arr, const std::vector<Feature>& fallback) {
    std::vector<Feature> out;
    for (const auto& item : arr) {
      std::string id = item.at("id").get<std::string>();
      auto prior = std::find_if(fallback.begin(), fallback.end(), [&](const Feature& f) { return f.id == id; });
      std::string family = item.contains("family") ? item["family"].get<std::string>()
                                                   : (prior != fallback.end() ? prior->family : std::string());
      Feature f = make_feature(family);
      f.id = id;
      f.dim = item.value("dim", prior != fallback.end() ? prior->dim : 0);
      f.gain = item.value("gain", prior != fallback.end() ? prior->gain : 1.0);
      f.target = item.value("target", prior != fallback.end() ? prior->target : f.target);
      f.amplitude = item.value("amplitude", f.amplitude);
      if (item.contains("keywords")) f.keywords = item["keywords"].get<std::vector<std::string>>();
      out.push_back(std::move(f));
    }
    return out;
  };
  try {
    if (doc.contains("attributes")) spec.attributes = read_features(doc["attributes"], spec.attributes);
    if (doc.contains("identity")) spec.identity = read_features(doc["identity"], spec.identity);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad synthetic spec: ") + e.what());
  }
  return spec;
}

nlohmann::json SyntheticSpec::to_json() const {
  nlohmann::json doc;
  doc["latent_dim"] = latent_dim;
  doc["image_size"] = image_size;
  doc["taxonomy"] = taxonomy;
  doc["noise_scale"] = noise_scale;
  doc["kappa"] = kappa;
  doc["angle_scale"] = angle_scale;
  doc["identity_kappa"] = identity_kappa;
  doc["threshold"] = threshold;
  doc["invert_tolerance"] = invert_tolerance;
  doc["face_width"] = {{"dim", face_width_dim}, {"gain", face_width_gain}};
  auto dump = [](const std::vector<Feature>& fs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& f : fs) {
      arr.push_back({{"id", f.id}, {"family", f.family}, {"dim", f.dim}, {"gain", f.gain}, {"target", f.target},
                     {"amplitude", f.amplitude}, {"keywords", f.keywords}});
    }
    return arr;
  };
  doc["attributes"] = dump(attributes);
  doc["identity"] = dump(identity);
  return doc;
}

void SyntheticSpec::validate() const {
  if (latent_dim < 1) throw ValidationError("synthetic latent_dim must be positive");
  if (image_size < 32) throw ValidationError("synthetic image_size must be at least 32");
  if (attributes.empty()) throw ValidationError("synthetic spec has no attributes");
  std::set<int> used;
  auto claim = [&](int dim, const std::string& who) {
    if (dim < 0 || dim >= latent_dim) throw ValidationError("dim " + std::to_string(dim) + " of '" + who + "' is out of range");
    if (!used.insert(dim).second) throw ValidationError("dim " + std::to_string(dim) + " of '" + who + "' is already mapped");
  };
  for (const auto& f : attributes) {
    if (f.gain <= 0.0) throw ValidationError("gain of '" + f.id + "' must be positive");
    if (f.whole_face) throw ValidationError("'" + f.id + "' uses an identity-only family");
    claim(f.dim, f.id);
  }
  claim(face_width_dim, "face_width");
  for (const auto& f : identity) claim(f.dim, f.id);
  if (!(kappa > 0.0) || !(identity_kappa > 0.0)) throw ValidationError("embedding constants must be positive");
  if (!(angle_scale > 0.0) || angle_scale > std::numbers::pi) throw ValidationError("angle_scale must be in (0, pi]");
}

std::vector<int> SyntheticSpec::identity_dims() const {
  std::vector<int> dims{face_width_dim};
  for (const auto& f : identity) dims.push_back(f.dim);
  return dims;
}

std::optional<int> SyntheticSpec::attribute_index(std::string_view id) const {
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    if (attributes[i].id == id) return static_cast<int>(i);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

SyntheticWorld::SyntheticWorld(SyntheticSpec spec) : spec_(std::move(spec)), taxonomy_(load_taxonomy(spec_.taxonomy)) {
  spec_.validate();
  if (taxonomy_.size() != spec_.attributes.size()) {
    throw ValidationError("synthetic spec maps " + std::to_string(spec_.attributes.size()) + " attributes but taxonomy '" +
                          taxonomy_.name() + "' has " + std::to_string(taxonomy_.size()));
  }
  // Keep attributes in taxonomy order so measurement vectors line up with it.
  std::vector<Feature> ordered;
  for (const auto& a : taxonomy_.attributes()) {
    auto idx = spec_.attribute_index(a.id);
    if (!idx) throw ValidationError("taxonomy attribute '" + a.id + "' has no synthetic mapping");
    ordered.push_back(spec_.attributes[static_cast<std::size_t>(*idx)]);
  }
  spec_.attributes = std::move(ordered);
  features_ = spec_.attributes;
  features_.insert(features_.end(), spec_.identity.begin(), spec_.identity.end());
  n_ = spec_.image_size;
  build_layout();
}

double SyntheticWorld::face_rx(double width_value) const { return kFaceRx * (1.0 + kFaceWidthSwing * width_value); }

double SyntheticWorld::coverage(int pixel, double rx, double* d_rx) const {
  const double u = (pixel % n_ + 0.5) / n_;
  const double v = (pixel / n_ + 0.5) / n_;
  const double dx = (u - kFaceCx) / rx;
  const double dy = (v - kFaceCy) / kFaceRy;
  const double r = std::sqrt(dx * dx + dy * dy);
  const double s = std::clamp((1.0 - r) / kEdgeSoftness, 0.0, 1.0);
  if (d_rx) {
    // dr/drx = -dx^2 / (rx r); dF/ds = 6 s (1 - s); ds/dr = -1/softness.
    *d_rx = (s > 0.0 && s < 1.0 && r > 0.0) ? 6.0 * s * (1.0 - s) / kEdgeSoftness * (dx * dx) / (rx * r) : 0.0;
  }
  return s * s * (3.0 - 2.0 * s);
}

double SyntheticWorld::band_coverage(double rx, double* d_rx) const {
  double sum = 0.0;
  double dsum = 0.0;
  for (int p : band_) {
    double d = 0.0;
    sum += coverage(p, rx, &d);
    dsum += d;
  }
  if (d_rx) *d_rx = dsum / static_cast<double>(band_.size());
  return sum / static_cast<double>(band_.size());
}

void SyntheticWorld::build_layout() {
  const int total = n_ * n_;
  hair_.assign(total, 0);
  interior_.assign(total, 0);
  layer_base_.assign(total, kSkin);
  background_.resize(total);
  contribs_.assign(total, {});

  for (int p = 0; p < total; ++p) {
    double v = (p / n_ + 0.5) / n_;
    for (int c = 0; c < 3; ++c) background_[p][c] = kBackgroundTop[c] + (kBackgroundBottom[c] - kBackgroundTop[c]) * v;
  }

  // Region membership and stripe weights per feature.
  std::vector<std::vector<std::pair<int, double>>> members(features_.size());
  for (std::size_t fi = 0; fi < features_.size(); ++fi) {
    const Feature& f = features_[fi];
    for (const Rect& r : f.regions) {
      // Row index within the rect drives the stripe sign; an odd trailing row
      // gets weight 0 so the pattern sums to exactly zero per column.
      std::vector<int> rows;
      for (int y = 0; y < n_; ++y) {
        double vv = (y + 0.5) / n_;
        if (vv >= r.y0 && vv < r.y1) rows.push_back(y);
      }
      const std::size_t even_rows = rows.size() - rows.size() % 2;
      for (std::size_t ri = 0; ri < rows.size(); ++ri) {
        for (int x = 0; x < n_; ++x) {
          double uu = (x + 0.5) / n_;
          if (!inside(r, uu, (rows[ri] + 0.5) / n_)) continue;
          double pattern = 1.0;
          if (f.striped) pattern = ri >= even_rows ? 0.0 : (ri % 2 == 0 ? 1.0 : -1.0);
          members[fi].push_back({rows[ri] * n_ + x, pattern});
        }
      }
    }
    if (members[fi].empty()) throw ValidationError("feature '" + f.id + "' covers no pixels at this image size");
  }

  for (std::size_t fi = 0; fi < features_.size(); ++fi) {
    const Feature& f = features_[fi];
    for (auto [p, pattern] : members[fi]) {
      if (f.hair_layer) hair_[p] = 1;
    }
  }
  for (int p = 0; p < total; ++p) {
    if (hair_[p]) layer_base_[p] = kHair;
  }
  for (std::size_t fi = 0; fi < features_.size(); ++fi) {
    const Feature& f = features_[fi];
    if (f.whole_face) {
      for (auto [p, pattern] : members[fi]) interior_[p] = 1;
      continue;
    }
    for (auto [p, pattern] : members[fi]) {
      if (!f.hair_layer && hair_[p]) throw ValidationError("face feature '" + f.id + "' overlaps the hair layer");
      layer_base_[p] = add(layer_base_[p], f.base);
      if (pattern != 0.0) contribs_[p].push_back({static_cast<int>(fi), pattern});
      if (!f.hair_layer) interior_[p] = 1;
    }
  }

  // Interior pixels must stay fully inside the face for every width value.
  const double rx_min = face_rx(-1.0);
  for (int p = 0; p < total; ++p) {
    if (interior_[p] && coverage(p, rx_min, nullptr) < 1.0) {
      throw ValidationError("face feature pixel leaves the face oval at the narrowest width");
    }
  }

  // Reference patch pixels.
  std::vector<int> reference;
  for (int p = 0; p < total; ++p) {
    double u = (p % n_ + 0.5) / n_, v = (p / n_ + 0.5) / n_;
    if (inside(kReferencePatch, u, v)) reference.push_back(p);
  }
  for (int p : reference) {
    if (!contribs_[p].empty() || hair_[p]) throw ValidationError("reference patch overlaps a feature");
  }

  // Linear measurement functionals.
  measures_.clear();
  for (std::size_t fi = 0; fi < features_.size(); ++fi) {
    const Feature& f = features_[fi];
    Functional m;
    m.color = f.color;
    double base_term = 0.0;
    if (f.striped) {
      double norm = 0.0;
      for (auto [p, pattern] : members[fi]) norm += pattern * pattern;
      for (auto [p, pattern] : members[fi]) {
        if (pattern == 0.0) continue;
        double wgt = pattern / (norm * f.amplitude);
        m.terms.push_back({p, wgt});
        base_term += wgt * dot(f.color, layer_base_[p]);
      }
    } else {
      const double wgt = 1.0 / (static_cast<double>(members[fi].size()) * f.amplitude);
      for (auto [p, pattern] : members[fi]) {
        m.terms.push_back({p, wgt});
        base_term += wgt * dot(f.color, layer_base_[p]);
      }
      if (!f.hair_layer && !f.whole_face) {
        // Subtract the local skin so skin tone cancels.
        const double rw = 1.0 / (static_cast<double>(reference.size()) * f.amplitude);
        for (int p : reference) {
          m.terms.push_back({p, -rw});
          base_term -= rw * dot(f.color, layer_base_[p]);
        }
      }
    }
    m.offset = -base_term;
    measures_.push_back(std::move(m));
  }

  // Face width band: pixels on the jaw rows, free of features.
  band_.clear();
  band_denominator_.clear();
  width_probe_ = unit({1, 0, -1});
  for (const auto& f : features_) {
    if (f.whole_face && std::abs(dot(f.color, width_probe_)) > 1e-12) {
      throw ValidationError("skin tone colour must be orthogonal to the width probe");
    }
  }
  for (int p = 0; p < total; ++p) {
    double v = (p / n_ + 0.5) / n_;
    if (v < kBandY0 || v >= kBandY1) continue;
    if (hair_[p] || interior_[p] || !contribs_[p].empty()) continue;
    band_.push_back(p);
    band_denominator_.push_back(dot(width_probe_, kSkin) - dot(width_probe_, background_[p]));
  }
  if (band_.empty()) throw ValidationError("face width band is empty");
}

std::vector<double> SyntheticWorld::feature_values(const LatentCode& w) const {
  if (w.shape() != latent_shape()) {
    throw ShapeError("synthetic world expects latent " + latent_shape().to_string() + ", got " + w.shape().to_string());
  }
  if (!w.all_finite()) throw NonFiniteError("latent code contains non-finite entries");
  std::vector<double> values(features_.size() + 1);
  for (std::size_t fi = 0; fi < features_.size(); ++fi) {
    values[fi] = std::tanh(features_[fi].gain * w[static_cast<std::size_t>(features_[fi].dim)]);
  }
  values.back() = std::tanh(spec_.face_width_gain * w[static_cast<std::size_t>(spec_.face_width_dim)]);
  return values;
}

Render SyntheticWorld::render(const LatentCode& w) const {
  const auto values = feature_values(w);
  const double rx = face_rx(values.back());
  const int total = n_ * n_;
  Render out{Image(3, n_, n_), RegionMasks{Mask(n_, n_), Mask(n_, n_)}};
  Vec3 tone{};
  for (std::size_t fi = 0; fi < features_.size(); ++fi) {
    const Feature& f = features_[fi];
    if (!f.whole_face) continue;
    for (int c = 0; c < 3; ++c) tone[c] += values[fi] * f.amplitude * f.color[c];
  }
  for (int p = 0; p < total; ++p) {
    const int y = p / n_, x = p % n_;
    Vec3 col = layer_base_[p];
    for (const auto& ct : contribs_[p]) {
      const Feature& f = features_[static_cast<std::size_t>(ct.feature)];
      const double k = values[static_cast<std::size_t>(ct.feature)] * f.amplitude * ct.pattern;
      for (int c = 0; c < 3; ++c) col[c] += k * f.color[c];
    }
    if (!hair_[p]) {
      for (int c = 0; c < 3; ++c) col[c] += tone[c];
      const double cov = coverage(p, rx, nullptr);
      if (cov < 1.0) {
        for (int c = 0; c < 3; ++c) col[c] = (1.0 - cov) * background_[p][c] + cov * col[c];
      }
      if (cov >= 0.5) {
        out.masks.face.set(y, x, true);
      } else {
        out.masks.background.set(y, x, true);
      }
    }
    for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = col[c];
  }
  return out;
}

Image SyntheticWorld::render_image(const LatentCode& w) const { return render(w).image; }

LatentTensor SyntheticWorld::render_vjp(const LatentCode& w, const Image& grad_image) const {
  if (grad_image.channels != 3 || grad_image.height != n_ || grad_image.width != n_) {
    throw ShapeError("image gradient does not match render size");
  }
  const auto values = feature_values(w);
  const double rx = face_rx(values.back());
  std::vector<double> grad_values(values.size(), 0.0);
  Vec3 tone{};
  for (std::size_t fi = 0; fi < features_.size(); ++fi) {
    const Feature& f = features_[fi];
    if (!f.whole_face) continue;
    for (int c = 0; c < 3; ++c) tone[c] += values[fi] * f.amplitude * f.color[c];
  }
  double grad_rx = 0.0;
  const int total = n_ * n_;
  const std::size_t plane = static_cast<std::size_t>(total);
  for (int p = 0; p < total; ++p) {
    const Vec3 g = {grad_image.data[p], grad_image.data[plane + p], grad_image.data[2 * plane + p]};
    double cov = 1.0;
    double dcov = 0.0;
    if (!hair_[p]) cov = coverage(p, rx, &dcov);
    if (cov == 0.0 && dcov == 0.0) continue;
    Vec3 layer = layer_base_[p];
    for (const auto& ct : contribs_[p]) {
      const Feature& f = features_[static_cast<std::size_t>(ct.feature)];
      grad_values[static_cast<std::size_t>(ct.feature)] += cov * f.amplitude * ct.pattern * dot(f.color, g);
      if (dcov != 0.0) {
        const double k = values[static_cast<std::size_t>(ct.feature)] * f.amplitude * ct.pattern;
        for (int c = 0; c < 3; ++c) layer[c] += k * f.color[c];
      }
    }
    if (hair_[p]) continue;
    for (std::size_t fi = 0; fi < features_.size(); ++fi) {
      const Feature& f = features_[fi];
      if (f.whole_face) grad_values[fi] += cov * f.amplitude * dot(f.color, g);
    }
    if (dcov != 0.0) {
      for (int c = 0; c < 3; ++c) layer[c] += tone[c];
      double diff = 0.0;
      for (int c = 0; c < 3; ++c) diff += (layer[c] - background_[p][c]) * g[c];
      grad_rx += diff * dcov;
    }
  }
  grad_values.back() = grad_rx * kFaceRx * kFaceWidthSwing;

  LatentTensor grad(latent_shape());
  for (std::size_t fi = 0; fi < features_.size(); ++fi) {
    const Feature& f = features_[fi];
    grad[static_cast<std::size_t>(f.dim)] += grad_values[fi] * f.gain * (1.0 - values[fi] * values[fi]);
  }
  const double vw = values.back();
  grad[static_cast<std::size_t>(spec_.face_width_dim)] += grad_values.back() * spec_.face_width_gain * (1.0 - vw * vw);
  return grad;
}

double SyntheticWorld::apply_functional(const Functional& f, const Image& image) const {
  const std::size_t plane = image.plane();
  double sum = f.offset;
  for (auto [p, wgt] : f.terms) {
    sum += wgt * (f.color[0] * image.data[p] + f.color[1] * image.data[plane + p] + f.color[2] * image.data[2 * plane + p]);
  }
  return sum;
}

void SyntheticWorld::add_functional_vjp(const Functional& f, double scale, Image& grad) const {
  if (scale == 0.0) return;
  const std::size_t plane = grad.plane();
  for (auto [p, wgt] : f.terms) {
    for (int c = 0; c < 3; ++c) grad.data[c * plane + p] += scale * wgt * f.color[c];
  }
}

namespace {
void check_size(const Image& image, int n) {
  if (image.channels != 3 || image.height != n || image.width != n) {
    throw ShapeError("synthetic world expects 3x" + std::to_string(n) + "x" + std::to_string(n) + " images, got " +
                     std::to_string(image.channels) + "x" + std::to_string(image.height) + "x" + std::to_string(image.width));
  }
}
}  // namespace

std::vector<double> SyntheticWorld::measure_attributes(const Image& image) const {
  check_size(image, n_);
  std::vector<double> m(spec_.attributes.size());
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = apply_functional(measures_[k], image);
  return m;
}

double SyntheticWorld::measure_face_width(const Image& image, double* d_mean_over_coverage) const {
  const std::size_t plane = image.plane();
  double mean = 0.0;
  for (std::size_t i = 0; i < band_.size(); ++i) {
    const int p = band_[i];
    double probe = 0.0;
    for (int c = 0; c < 3; ++c) probe += width_probe_[c] * (image.data[c * plane + p] - background_[p][c]);
    mean += probe / band_denominator_[i];
  }
  mean /= static_cast<double>(band_.size());
  // Solve band_coverage(rx) == mean over the admissible width range.
  double lo = face_rx(-1.0), hi = face_rx(1.0);
  const double cov_lo = band_coverage(lo, nullptr), cov_hi = band_coverage(hi, nullptr);
  double rx;
  if (mean <= cov_lo) {
    rx = lo;
  } else if (mean >= cov_hi) {
    rx = hi;
  } else {
    for (int it = 0; it < 80; ++it) {
      double mid = 0.5 * (lo + hi);
      if (band_coverage(mid, nullptr) < mean) lo = mid; else hi = mid;
    }
    rx = 0.5 * (lo + hi);
  }
  if (d_mean_over_coverage) {
    double slope = 0.0;
    band_coverage(rx, &slope);
    *d_mean_over_coverage = slope > 0.0 ? 1.0 / (slope * kFaceRx * kFaceWidthSwing) : 0.0;
  }
  return (rx / kFaceRx - 1.0) / kFaceWidthSwing;
}

std::vector<double> SyntheticWorld::measure_identity(const Image& image) const {
  check_size(image, n_);
  std::vector<double> m;
  m.push_back(measure_face_width(image, nullptr));
  for (std::size_t i = spec_.attributes.size(); i < features_.size(); ++i) m.push_back(apply_functional(measures_[i], image));
  return m;
}

std::vector<double> SyntheticWorld::embed_image(const Image& image) const {
  auto m = measure_attributes(image);
  const double c = spec_.angle_scale;
  std::vector<double> e(2 * m.size() + 1);
  e[0] = spec_.kappa;
  for (std::size_t k = 0; k < m.size(); ++k) {
    e[2 * k + 1] = std::cos(c * m[k]);
    e[2 * k + 2] = std::sin(c * m[k]);
  }
  // Every attribute channel pair has unit length, so the norm is constant.
  const double norm = std::sqrt(spec_.kappa * spec_.kappa + static_cast<double>(m.size()));
  for (double& x : e) x /= norm;
  return e;
}

Image SyntheticWorld::embed_image_vjp(const Image& image, std::span<const double> grad_embedding) const {
  auto m = measure_attributes(image);
  if (grad_embedding.size() != 2 * m.size() + 1) throw ShapeError("embedding gradient has the wrong size");
  const double c = spec_.angle_scale;
  const double norm = std::sqrt(spec_.kappa * spec_.kappa + static_cast<double>(m.size()));
  Image grad(3, n_, n_);
  for (std::size_t k = 0; k < m.size(); ++k) {
    const double g_m = c * (-std::sin(c * m[k]) * grad_embedding[2 * k + 1] + std::cos(c * m[k]) * grad_embedding[2 * k + 2]) / norm;
    add_functional_vjp(measures_[k], g_m, grad);
  }
  return grad;
}

TextEmbedding SyntheticWorld::embed_text_detailed(const std::string& text) const {
  TextEmbedding out;
  const auto tokens = tokenize(text);
  std::vector<double> raw(2 * spec_.attributes.size() + 1, 0.0);
  raw[0] = spec_.kappa;
  for (std::size_t k = 0; k < spec_.attributes.size(); ++k) {
    if (mentions(spec_.attributes[k], tokens)) {
      raw[2 * k + 1] = std::cos(spec_.angle_scale * spec_.attributes[k].target);
      raw[2 * k + 2] = std::sin(spec_.angle_scale * spec_.attributes[k].target);
      out.mentioned.push_back(spec_.attributes[k].id);
    }
  }
  // Segments are split on punctuation; a leading "and" is dropped.
  {
    std::string cur;
    auto flush = [&]() {
      auto toks = tokenize(cur);
      if (!toks.empty() && toks.front() == "and") toks.erase(toks.begin());
      if (!toks.empty()) {
        bool known = std::any_of(spec_.attributes.begin(), spec_.attributes.end(),
                                 [&](const Feature& f) { return mentions(f, toks); });
        if (!known) {
          std::string joined;
          for (const auto& t : toks) joined += (joined.empty() ? "" : " ") + t;
          out.unknown_segments.push_back(joined);
        }
      }
      cur.clear();
    };
    for (char ch : text) {
      if (ch == ',' || ch == ';' || ch == '.') flush(); else cur.push_back(ch);
    }
    flush();
  }
  double norm = std::sqrt(std::inner_product(raw.begin(), raw.end(), raw.begin(), 0.0));
  for (double& x : raw) x /= norm;
  out.embedding = std::move(raw);
  return out;
}

std::vector<double> SyntheticWorld::identity_embed(const Image& image) const {
  auto m = measure_identity(image);
  std::vector<double> e{spec_.identity_kappa};
  e.insert(e.end(), m.begin(), m.end());
  return e;
}

Image SyntheticWorld::identity_embed_vjp(const Image& image, std::span<const double> grad_embedding) const {
  check_size(image, n_);
  if (grad_embedding.size() != spec_.identity.size() + 2) throw ShapeError("identity gradient has the wrong size");
  Image grad(3, n_, n_);
  double dm_dmean = 0.0;
  measure_face_width(image, &dm_dmean);
  const double g_width = grad_embedding[1] * dm_dmean;
  // Only differentiable while the width estimate is inside its range.
  if (g_width != 0.0) {
    const std::size_t plane = grad.plane();
    const double inv_n = 1.0 / static_cast<double>(band_.size());
    for (std::size_t i = 0; i < band_.size(); ++i) {
      for (int c = 0; c < 3; ++c) grad.data[c * plane + band_[i]] += g_width * inv_n * width_probe_[c] / band_denominator_[i];
    }
  }
  for (std::size_t i = 0; i < spec_.identity.size(); ++i) {
    add_functional_vjp(measures_[spec_.attributes.size() + i], grad_embedding[i + 2], grad);
  }
  return grad;
}

RegionMasks SyntheticWorld::segment(const Image& image) const {
  check_size(image, n_);
  RegionMasks masks{Mask(n_, n_), Mask(n_, n_)};
  const std::size_t plane = image.plane();
  const double skin_probe = dot(width_probe_, kSkin);
  for (int p = 0; p < n_ * n_; ++p) {
    if (hair_[p]) continue;
    bool face = interior_[p] != 0;
    if (!face) {
      double probe = 0.0, bg = dot(width_probe_, background_[p]);
      for (int c = 0; c < 3; ++c) probe += width_probe_[c] * image.data[c * plane + p];
      face = (probe - bg) / (skin_probe - bg) >= 0.5;
    }
    if (face) masks.face.set(p / n_, p % n_, true); else masks.background.set(p / n_, p % n_, true);
  }
  return masks;
}

LatentCode SyntheticWorld::invert(const Image& image) const {
  check_size(image, n_);
  LatentCode w(latent_shape());
  auto attrs = measure_attributes(image);
  auto ident = measure_identity(image);
  for (std::size_t k = 0; k < attrs.size(); ++k) {
    const Feature& f = spec_.attributes[k];
    w[static_cast<std::size_t>(f.dim)] = std::atanh(clamp_value(attrs[k])) / f.gain;
  }
  w[static_cast<std::size_t>(spec_.face_width_dim)] = std::atanh(clamp_value(ident[0])) / spec_.face_width_gain;
  for (std::size_t i = 0; i < spec_.identity.size(); ++i) {
    const Feature& f = spec_.identity[i];
    w[static_cast<std::size_t>(f.dim)] = std::atanh(clamp_value(ident[i + 1])) / f.gain;
  }
  Image again = render_image(w);
  double err = 0.0;
  for (std::size_t i = 0; i < again.data.size(); ++i) err += std::abs(again.data[i] - image.data[i]);
  err /= static_cast<double>(again.data.size());
  if (!(err <= spec_.invert_tolerance)) {
    std::ostringstream msg;
    msg << "image is not renderable by the synthetic family (mean reconstruction error " << err << ")";
    throw NotRenderableError(msg.str());
  }
  return w;
}

std::vector<bool> SyntheticWorld::classify(const Image& image) const {
  auto m = measure_attributes(image);
  std::vector<bool> labels(m.size());
  for (std::size_t k = 0; k < m.size(); ++k) labels[k] = m[k] > spec_.threshold;
  return labels;
}

std::vector<std::string> SyntheticWorld::mentioned_attributes(const std::string& text) const {
  return embed_text_detailed(text).mentioned;
}

int SyntheticWorld::controlling_dim(std::string_view attribute_id) const {
  if (attribute_id == "face_width") return spec_.face_width_dim;
  for (const auto& f : features_) {
    if (f.id == attribute_id) return f.dim;
  }
  throw ValidationError("unknown synthetic feature '" + std::string(attribute_id) + "'");
}

std::vector<double> SyntheticWorld::sample_noise(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(static_cast<std::size_t>(spec_.latent_dim));
  for (double& x : z) x = normal(rng);
  return z;
}

LatentCode SyntheticWorld::map_noise(std::span<const double> z) const {
  if (z.size() != static_cast<std::size_t>(spec_.latent_dim)) throw ShapeError("noise vector has the wrong length");
  LatentCode w(latent_shape());
  for (std::size_t i = 0; i < z.size(); ++i) w[i] = spec_.noise_scale * z[i];
  return w;
}

std::vector<int> SyntheticWorld::region_pixels(std::string_view attribute_id) const {
  for (std::size_t fi = 0; fi < features_.size(); ++fi) {
    if (features_[fi].id != attribute_id) continue;
    std::vector<int> out;
    const Feature& f = features_[fi];
    for (int p = 0; p < n_ * n_; ++p) {
      double u = (p % n_ + 0.5) / n_, v = (p / n_ + 0.5) / n_;
      if (f.whole_face) {
        if (!hair_[p]) out.push_back(p);
        continue;
      }
      for (const Rect& r : f.regions) {
        if (inside(r, u, v)) {
          out.push_back(p);
          break;
        }
      }
    }
    return out;
  }
  throw ValidationError("unknown synthetic feature '" + std::string(attribute_id) + "'");
}

}  // namespace latentedit::synth
