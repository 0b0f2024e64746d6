#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentedit/backends.hpp"
#include "latentedit/image.hpp"
#include "latentedit/mapper.hpp"
#include "latentedit/taxonomy.hpp"

namespace latentedit {

/// First line of each of the last `count` caption files in `dir`.
///
/// Files are `*.txt`, ordered by numeric stem when every stem is a number
/// (`0.txt`, `1.txt`, ... `29999.txt`) and lexicographically otherwise.
/// Throws IoError when the directory is missing or holds fewer than `count`
/// files, ParseError naming the file when a first line is empty.
std::vector<std::string> load_eval_captions(const std::filesystem::path& dir, int count = 5000);

/// Frechet distance between Gaussians fitted to two feature sets (one sample
/// per row). Throws ShapeError on dimension mismatch or < 2 samples and
/// ValidationError when a covariance product has an eigenvalue below -1e-6.
double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

struct IdSimilarity {
  double score = 0.0;  // mean cosine x 100 over the scored pairs
  int scored = 0;
  int failures = 0;    // pairs whose embedding threw or had zero norm
};

IdSimilarity id_similarity(std::span<const Image> originals, std::span<const Image> edited, const IdentityEmbedder& embedder);

/// Binary per-attribute predictor used for the accuracy metric.
class AttributeClassifier {
 public:
  virtual ~AttributeClassifier() = default;
  virtual std::vector<std::string> attribute_ids() const = 0;
  /// One label per attribute_ids() entry.
  virtual std::vector<bool> predict(const Image& image) const = 0;
};

/// Thresholded measurements of the synthetic world. Null for other backends.
std::shared_ptr<const AttributeClassifier> synthetic_classifier(const BackendBundle& bundle);

struct AccuracyReport {
  double acc = 0.0;           // % of (image, mentioned attribute) pairs predicted present
  double preservation = 0.0;  // % of (image, unmentioned attribute) pairs whose label matches the original's
  int mentioned_pairs = 0;
  int unmentioned_pairs = 0;
  int skipped = 0;            // mentioned attributes the classifier does not know
};

/// `originals` may be empty, in which case preservation is not computed.
AccuracyReport attribute_accuracy(std::span<const Image> edited, std::span<const Image> originals,
                                  const std::vector<std::vector<std::string>>& mentioned,
                                  const AttributeClassifier& classifier);

/// Attributes of `taxonomy` named by `text`: an attribute counts when its
/// phrase, or its id with underscores read as spaces, occurs in the text.
std::vector<std::string> mentioned_attributes(const AttributeTaxonomy& taxonomy, const std::string& text);

struct EvalProtocol {
  int seed_count = 5000;
  std::uint64_t seed_base = 0;
  /// Captions directory; when absent prompts are sampled from the taxonomy.
  std::optional<std::filesystem::path> captions_dir;
  SamplingStrategy prompt_strategy;
  std::uint64_t prompt_seed = 0;
  double alpha = 1.0;
  bool fid = true;
  bool id = true;
  bool acc = true;
  bool sparsity = true;

  void validate() const;
  nlohmann::json to_json() const;
  static EvalProtocol from_json(const nlohmann::json& doc);
  static EvalProtocol load(const std::filesystem::path& path);
};

struct SparsitySummary {
  double mean_norm = 0.0;
  double mean_entropy = 0.0;
  double mean_near_zero_fraction = 0.0;
  std::optional<double> mean_off_mask_fraction;  // synthetic world only
};

struct MetricReport {
  int sample_count = 0;
  std::optional<double> fid;
  std::optional<double> id_similarity;
  int id_failures = 0;
  std::optional<double> acc;
  std::optional<double> preservation;
  std::optional<SparsitySummary> sparsity;
  /// Mean |measurement - target| over mentioned attributes (synthetic world only).
  std::optional<double> mean_overshoot;
  /// "ok", "off", or an error message per metric.
  std::map<std::string, std::string> status;

  nlohmann::json to_json() const;
};

struct EvalOptions {
  /// Overrides the synthetic classifier; required for accuracy on other backends.
  std::shared_ptr<const AttributeClassifier> classifier;
  /// Write the report here as JSON.
  std::optional<std::filesystem::path> report_path;
};

/// Edits the protocol's seeds with the mapper and computes the toggled
/// metrics. A failing metric is reported in `status` and the others are kept.
/// FID compares originals with edits on the synthetic measurements, or on the
/// image-text encoder's image embedding for other backends.
MetricReport evaluate(const EvalProtocol& protocol, const MapperState& mapper, const BackendBundle& bundle,
                      const AttributeTaxonomy& taxonomy, const EvalOptions& options = {});

}  // namespace latentedit
