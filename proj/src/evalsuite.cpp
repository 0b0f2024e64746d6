#include "latentedit/evalsuite.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

#include "latentedit/error.hpp"
#include "latentedit/latent.hpp"
#include "latentedit/synthworld.hpp"

namespace latentedit {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && ws(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && ws(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c) != 0; });
}

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw ShapeError("feature rows have different lengths");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& mean) {
  Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

// Eigenvalues of a symmetric PSD matrix, clipped to >= 0 within tolerance.
Eigen::VectorXd psd_eigenvalues(const Eigen::MatrixXd& m, Eigen::MatrixXd* vectors, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) throw ValidationError(std::string("eigendecomposition failed for ") + what);
  Eigen::VectorXd ev = solver.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-6) throw ValidationError(std::string(what) + " is not positive semi-definite (eigenvalue " + std::to_string(ev(i)) + ")");
    ev(i) = std::max(ev(i), 0.0);
  }
  if (vectors) *vectors = solver.eigenvectors();
  return ev;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("embedding sizes differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ValidationError("zero-norm identity embedding");
  return dot / std::sqrt(na * nb);
}

class SyntheticClassifier final : public AttributeClassifier {
 public:
  explicit SyntheticClassifier(std::shared_ptr<const synth::SyntheticWorld> world) : world_(std::move(world)) {}
  std::vector<std::string> attribute_ids() const override {
    std::vector<std::string> ids;
    for (const auto& a : world_->taxonomy().attributes()) ids.push_back(a.id);
    return ids;
  }
  std::vector<bool> predict(const Image& image) const override { return world_->classify(image); }

 private:
  std::shared_ptr<const synth::SyntheticWorld> world_;
};

}  // namespace

std::vector<std::string> load_eval_captions(const fs::path& dir, int count) {
  if (count < 1) throw ValidationError("caption count must be positive");
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("caption directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  const bool numeric = std::all_of(files.begin(), files.end(), [](const fs::path& p) { return all_digits(p.stem().string()); });
  std::sort(files.begin(), files.end(), [numeric](const fs::path& a, const fs::path& b) {
    if (numeric) {
      const auto sa = a.stem().string(), sb = b.stem().string();
      const auto ta = sa.find_first_not_of('0'), tb = sb.find_first_not_of('0');
      const auto va = ta == std::string::npos ? std::string("0") : sa.substr(ta);
      const auto vb = tb == std::string::npos ? std::string("0") : sb.substr(tb);
      if (va.size() != vb.size()) return va.size() < vb.size();
      if (va != vb) return va < vb;
    }
    return a.filename().string() < b.filename().string();
  });
  if (files.size() < static_cast<std::size_t>(count)) {
    throw IoError("caption directory " + dir.string() + " has " + std::to_string(files.size()) + " text files, " +
                  std::to_string(count) + " needed");
  }
  std::vector<std::string> captions;
  captions.reserve(static_cast<std::size_t>(count));
  for (auto it = files.end() - count; it != files.end(); ++it) {
    std::ifstream in(*it);
    if (!in) throw IoError("cannot read caption file " + it->string());
    std::string line;
    std::getline(in, line);
    line = trim(line);
    if (line.empty()) throw ParseError("caption file " + it->string() + " has an empty first line");
    captions.push_back(std::move(line));
  }
  return captions;
}

double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw ShapeError("FID needs at least 2 samples per set");
  if (a.cols() != b.cols()) throw ShapeError("FID feature dimensions differ: " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  const Eigen::VectorXd mu_a = a.colwise().mean().transpose();
  const Eigen::VectorXd mu_b = b.colwise().mean().transpose();
  const Eigen::MatrixXd cov_a = covariance(a, mu_a);
  const Eigen::MatrixXd cov_b = covariance(b, mu_b);

  // Tr((A B)^1/2) = Tr((A^1/2 B A^1/2)^1/2), and the inner matrix is symmetric.
  Eigen::MatrixXd va;
  const Eigen::VectorXd ea = psd_eigenvalues(cov_a, &va, "covariance");
  const Eigen::MatrixXd sqrt_a = va * ea.cwiseSqrt().asDiagonal() * va.transpose();
  Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  const Eigen::VectorXd ei = psd_eigenvalues(inner, nullptr, "covariance product");

  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * ei.cwiseSqrt().sum();
  return std::max(d, 0.0);
}

double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  return fid(to_matrix(a), to_matrix(b));
}

IdSimilarity id_similarity(std::span<const Image> originals, std::span<const Image> edited, const IdentityEmbedder& embedder) {
  if (originals.size() != edited.size()) throw ShapeError("id_similarity needs as many originals as edits");
  if (originals.empty()) throw ValidationError("id_similarity needs at least one pair");
  IdSimilarity out;
  double sum = 0.0;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    try {
      sum += cosine(embedder.embed(originals[i]), embedder.embed(edited[i]));
      ++out.scored;
    } catch (const Error&) {
      ++out.failures;
    }
  }
  out.score = out.scored > 0 ? 100.0 * sum / out.scored : 0.0;
  return out;
}

std::shared_ptr<const AttributeClassifier> synthetic_classifier(const BackendBundle& bundle) {
  auto world = synth::world_of(bundle);
  if (!world) return nullptr;
  return std::make_shared<SyntheticClassifier>(std::move(world));
}

AccuracyReport attribute_accuracy(std::span<const Image> edited, std::span<const Image> originals,
                                  const std::vector<std::vector<std::string>>& mentioned,
                                  const AttributeClassifier& classifier) {
  if (mentioned.size() != edited.size()) throw ShapeError("one mentioned-attribute list per edited image is required");
  if (!originals.empty() && originals.size() != edited.size()) throw ShapeError("originals and edits differ in count");
  const auto ids = classifier.attribute_ids();
  AccuracyReport r;
  int hits = 0, kept = 0;
  for (std::size_t i = 0; i < edited.size(); ++i) {
    const auto labels = classifier.predict(edited[i]);
    if (labels.size() != ids.size()) throw ShapeError("classifier returned the wrong number of labels");
    std::vector<bool> is_mentioned(ids.size(), false);
    for (const auto& m : mentioned[i]) {
      auto it = std::find(ids.begin(), ids.end(), m);
      if (it == ids.end()) {
        ++r.skipped;
        continue;
      }
      const auto k = static_cast<std::size_t>(it - ids.begin());
      if (is_mentioned[k]) continue;
      is_mentioned[k] = true;
      ++r.mentioned_pairs;
      if (labels[k]) ++hits;
    }
    if (originals.empty()) continue;
    const auto before = classifier.predict(originals[i]);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (is_mentioned[k]) continue;
      ++r.unmentioned_pairs;
      if (labels[k] == before[k]) ++kept;
    }
  }
  r.acc = r.mentioned_pairs > 0 ? 100.0 * hits / r.mentioned_pairs : 0.0;
  r.preservation = r.unmentioned_pairs > 0 ? 100.0 * kept / r.unmentioned_pairs : 0.0;
  return r;
}

std::vector<std::string> mentioned_attributes(const AttributeTaxonomy& taxonomy, const std::string& text) {
  const std::string t = lower(text);
  std::vector<std::string> out;
  for (const auto& a : taxonomy.attributes()) {
    std::string id = a.id;
    std::replace(id.begin(), id.end(), '_', ' ');
    if (t.find(lower(a.phrase)) != std::string::npos || t.find(lower(id)) != std::string::npos) out.push_back(a.id);
  }
  return out;
}

void EvalProtocol::validate() const {
  if (seed_count < 1) throw ValidationError("seed_count must be positive");
  if (!std::isfinite(alpha) || alpha < 0.0) throw ValidationError("alpha must be a finite value >= 0");
  if (prompt_strategy.attribute_count < 1) throw ValidationError("prompt attribute_count must be at least 1");
}

nlohmann::json EvalProtocol::to_json() const {
  nlohmann::json j;
  j["seed_count"] = seed_count;
  j["seed_base"] = seed_base;
  if (captions_dir) j["captions_dir"] = captions_dir->string();
  j["prompt_strategy"] = {{"kind", std::string(sampling_kind_name(prompt_strategy.kind))},
                          {"attribute_count", prompt_strategy.attribute_count}};
  j["prompt_seed"] = prompt_seed;
  j["alpha"] = alpha;
  j["metrics"] = {{"fid", fid}, {"id", id}, {"acc", acc}, {"sparsity", sparsity}};
  return j;
}

EvalProtocol EvalProtocol::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ParseError("eval protocol must be a JSON object");
  EvalProtocol p;
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key == "seed_count") p.seed_count = value.get<int>();
      else if (key == "seed_base") p.seed_base = value.get<std::uint64_t>();
      else if (key == "captions_dir") p.captions_dir = value.get<std::string>();
      else if (key == "prompt_seed") p.prompt_seed = value.get<std::uint64_t>();
      else if (key == "alpha") p.alpha = value.get<double>();
      else if (key == "prompt_strategy") {
        if (value.contains("kind")) {
          auto kind = parse_sampling_kind(value["kind"].get<std::string>());
          if (!kind) throw ParseError("unknown sampling strategy '" + value["kind"].get<std::string>() + "'");
          p.prompt_strategy.kind = *kind;
        }
        p.prompt_strategy.attribute_count = value.value("attribute_count", p.prompt_strategy.attribute_count);
      } else if (key == "metrics") {
        p.fid = value.value("fid", p.fid);
        p.id = value.value("id", p.id);
        p.acc = value.value("acc", p.acc);
        p.sparsity = value.value("sparsity", p.sparsity);
      } else {
        throw ParseError("unknown eval protocol key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad eval protocol: ") + e.what());
  }
  p.validate();
  return p;
}

EvalProtocol EvalProtocol::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open eval protocol " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  auto p = from_json(doc);
  if (p.captions_dir && p.captions_dir->is_relative()) p.captions_dir = path.parent_path() / *p.captions_dir;
  return p;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["sample_count"] = sample_count;
  auto opt = [&](const char* key, const std::optional<double>& v) { j[key] = v ? nlohmann::json(*v) : nlohmann::json(); };
  opt("fid", fid);
  opt("id_similarity", id_similarity);
  j["id_failures"] = id_failures;
  opt("acc", acc);
  opt("preservation", preservation);
  opt("mean_overshoot", mean_overshoot);
  if (sparsity) {
    nlohmann::json s{{"mean_norm", sparsity->mean_norm},
                     {"mean_entropy", sparsity->mean_entropy},
                     {"mean_near_zero_fraction", sparsity->mean_near_zero_fraction}};
    s["mean_off_mask_fraction"] = sparsity->mean_off_mask_fraction ? nlohmann::json(*sparsity->mean_off_mask_fraction) : nlohmann::json();
    j["sparsity"] = s;
  } else {
    j["sparsity"] = nullptr;
  }
  j["status"] = status;
  return j;
}

MetricReport evaluate(const EvalProtocol& protocol, const MapperState& mapper, const BackendBundle& bundle,
                      const AttributeTaxonomy& taxonomy, const EvalOptions& options) {
  protocol.validate();
  const auto world = synth::world_of(bundle);
  const Generator& gen = *bundle.generator;

  std::vector<std::string> texts;
  std::vector<std::vector<std::string>> mentioned;
  if (protocol.captions_dir) {
    texts = load_eval_captions(*protocol.captions_dir, protocol.seed_count);
    for (const auto& t : texts) mentioned.push_back(world ? world->mentioned_attributes(t) : mentioned_attributes(taxonomy, t));
  } else {
    std::mt19937_64 rng(protocol.prompt_seed);
    for (int i = 0; i < protocol.seed_count; ++i) {
      Prompt p = sample_prompt(taxonomy, protocol.prompt_strategy, rng);
      texts.push_back(p.text);
      mentioned.push_back(p.attribute_ids);
    }
  }

  MetricReport report;
  report.sample_count = protocol.seed_count;
  std::vector<Image> originals, edits;
  std::vector<OffsetDelta> deltas;
  originals.reserve(texts.size());
  edits.reserve(texts.size());
  const Mapper net(mapper);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const LatentCode w = gen.map_noise(gen.sample_noise(protocol.seed_base + i));
    OffsetDelta delta = net.forward(bundle.image_text_encoder->embed_text(texts[i]), w);
    originals.push_back(gen.synthesize(w));
    edits.push_back(gen.synthesize(apply_offset(w, delta, protocol.alpha)));
    deltas.push_back(std::move(delta));
  }

  auto run = [&](const char* name, bool enabled, const std::function<void()>& body) {
    if (!enabled) {
      report.status[name] = "off";
      return;
    }
    try {
      body();
      report.status[name] = "ok";
    } catch (const std::exception& e) {
      report.status[name] = e.what();
    }
  };

  run("fid", protocol.fid, [&] {
    std::vector<std::vector<double>> fa, fb;
    for (std::size_t i = 0; i < edits.size(); ++i) {
      if (world) {
        auto a = world->measure_attributes(originals[i]), ai = world->measure_identity(originals[i]);
        auto b = world->measure_attributes(edits[i]), bi = world->measure_identity(edits[i]);
        a.insert(a.end(), ai.begin(), ai.end());
        b.insert(b.end(), bi.begin(), bi.end());
        fa.push_back(std::move(a));
        fb.push_back(std::move(b));
      } else {
        fa.push_back(bundle.image_text_encoder->embed_image(originals[i]));
        fb.push_back(bundle.image_text_encoder->embed_image(edits[i]));
      }
    }
    report.fid = fid(fa, fb);
  });

  run("id", protocol.id, [&] {
    auto r = id_similarity(originals, edits, *bundle.identity_embedder);
    report.id_similarity = r.score;
    report.id_failures = r.failures;
  });

  run("acc", protocol.acc, [&] {
    auto classifier = options.classifier ? options.classifier : synthetic_classifier(bundle);
    if (!classifier) throw BackendError("no attribute classifier for backend '" + bundle.name + "'");
    auto r = attribute_accuracy(edits, originals, mentioned, *classifier);
    report.acc = r.acc;
    report.preservation = r.preservation;
  });

  run("sparsity", protocol.sparsity, [&] {
    SparsitySummary s;
    double off = 0.0;
    int off_count = 0;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      const auto& d = deltas[i];
      s.mean_norm += latent_norm_loss(d);
      s.mean_entropy += entropy_loss(d);
      std::unique_ptr<bool[]> mask;
      std::optional<std::span<const bool>> span;
      if (world && !mentioned[i].empty()) {
        mask = std::make_unique<bool[]>(d.size());
        const int dims = d.shape().dims;
        for (const auto& id : mentioned[i]) {
          const int dim = world->controlling_dim(id);
          for (int l = 0; l < d.shape().layers; ++l) mask[static_cast<std::size_t>(l * dims + dim)] = true;
        }
        span = std::span<const bool>(mask.get(), d.size());
      }
      const auto stats = sparsity_report(d, span);
      s.mean_near_zero_fraction += stats.near_zero_fraction;
      if (stats.in_mask_mass_fraction) {
        off += 1.0 - *stats.in_mask_mass_fraction;
        ++off_count;
      }
    }
    const double n = static_cast<double>(deltas.size());
    s.mean_norm /= n;
    s.mean_entropy /= n;
    s.mean_near_zero_fraction /= n;
    if (off_count > 0) s.mean_off_mask_fraction = off / off_count;
    report.sparsity = s;
  });

  if (world) {
    double over = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < edits.size(); ++i) {
      const auto m = world->measure_attributes(edits[i]);
      for (const auto& id : mentioned[i]) {
        const auto k = world->spec().attribute_index(id);
        if (!k) continue;
        over += std::abs(m[*k] - world->spec().attributes[*k].target);
        ++count;
      }
    }
    if (count > 0) report.mean_overshoot = over / count;
  }

  if (options.report_path) {
    std::ofstream out(*options.report_path);
    if (!out) throw IoError("cannot write report " + options.report_path->string());
    out << report.to_json().dump(2) << '\n';
  }
  return report;
}

}  // namespace latentedit
