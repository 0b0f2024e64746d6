#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentedit/backends.hpp"
#include "latentedit/image.hpp"

namespace latentedit {

/// Denominator floor of every embedding cosine.
inline constexpr double kCosineEpsilon = 1e-8;

struct LossWeights {
  double id = 0.2;
  double bg = 1.0;
  double l2_img = 0.02;
  double l2_w = 0.1;
  double en = 0.2;

  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& doc);
  bool operator==(const LossWeights&) const = default;
};

struct LossReport {
  double clip = 0.0;
  double id = 0.0;
  double bg = 0.0;
  double l2_img = 0.0;
  double l2_w = 0.0;
  double en = 0.0;
  double total = 0.0;

  std::int64_t step = 0;
  int epoch = 0;
  std::string prompt;

  bool operator==(const LossReport&) const = default;
};

/// clip + w.id*id + w.bg*bg + w.l2_img*l2_img + w.l2_w*l2_w + w.en*en.
/// Stores the result in report.total. Throws NonFiniteError on any
/// non-finite component.
double total_loss(LossReport& report, const LossWeights& weights);

/// a.b / max(|a||b|, eps). Throws ValidationError on a zero-norm vector.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
/// d(1 - cos(a, b))/da.
std::vector<double> cosine_distance_gradient(std::span<const double> a, std::span<const double> b);

double clip_alignment_loss(const Image& edited, const std::string& prompt, const ImageTextEncoder& encoder);
double clip_alignment_loss(std::span<const double> image_embedding, std::span<const double> text_embedding);
/// d clip_alignment_loss / d edited.
Image clip_alignment_gradient(const Image& edited, std::span<const double> text_embedding, const ImageTextEncoder& encoder);

double identity_loss(const Image& edited, const Image& original, const IdentityEmbedder& embedder);
/// d identity_loss / d edited with the original image held fixed.
Image identity_loss_gradient(const Image& edited, std::span<const double> original_embedding, const IdentityEmbedder& embedder);

/// Elementwise AND.
Mask combine_masks(const Mask& a, const Mask& b);

struct RegionLossOptions {
  /// Divide the norm by sqrt(#masked values), i.e. report the RMS difference.
  bool normalize_by_count = false;
};

/// || (edited - original) restricted to mask ||_2 over all channels.
double masked_l2(const Image& edited, const Image& original, const Mask& mask, RegionLossOptions opts = {});
/// d masked_l2 / d edited; zero where the difference vanishes.
Image masked_l2_gradient(const Image& edited, const Image& original, const Mask& mask, RegionLossOptions opts = {});

double background_loss(const Image& edited, const Image& original, const RegionMasks& masks_edited,
                       const RegionMasks& masks_original, RegionLossOptions opts = {});
double face_region_loss(const Image& edited, const Image& original, const RegionMasks& masks_edited,
                        const RegionMasks& masks_original, RegionLossOptions opts = {});

// Training log: tab-separated text, one header line then one record per step.
//   step epoch clip id bg l2_img l2_w en total prompt
// Numbers use %.17g so a log round-trips exactly. Tabs, newlines and
// backslashes in the prompt are escaped as \t, \n and \\.

std::string loss_log_header();
std::string format_loss_record(const LossReport& report);
LossReport parse_loss_record(const std::string& line);

/// Append-only writer; each record is flushed as one complete line.
class LossLogWriter {
 public:
  /// `append` keeps existing records (resume); otherwise the file is truncated.
  LossLogWriter(const std::filesystem::path& path, bool append);
  void write(const LossReport& report);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mu_;
};

/// Reads complete records with step > since (all when unset). A trailing line
/// without a newline is a record still being written and is skipped.
std::vector<LossReport> read_loss_log(const std::filesystem::path& path, std::optional<std::int64_t> since = std::nullopt);

}  // namespace latentedit
