#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "latentedit/evalsuite.hpp"
#include "latentedit/taxonomy.hpp"
#include "latentedit/trainer.hpp"

namespace latentedit {

struct AblationGrid {
  std::vector<SamplingKind> kinds;
  std::vector<int> attribute_counts;

  void validate() const;
  std::size_t cell_count() const { return kinds.size() * attribute_counts.size(); }
};

/// Grid spec: "<kinds>:<counts>", kinds comma-separated ("random,group"),
/// counts comma-separated with ranges ("1-5", "1,3,5"). Example:
/// "random,group:1-5".
AblationGrid parse_grid(const std::string& spec);

struct AblationCell {
  SamplingKind kind = SamplingKind::group;
  int attribute_count = 1;
  std::optional<MetricReport> metrics;
  std::optional<std::string> error;
  std::filesystem::path run_dir;
  double train_seconds = 0.0;
};

struct AblationTable {
  std::vector<AblationCell> cells;

  nlohmann::json to_json() const;
  /// One row per (strategy, metric), one column per attribute count.
  std::string to_markdown() const;
};

/// Trains one mapper per (kind, count) cell with `base` otherwise unchanged
/// (same seed for every cell) and evaluates it with `protocol`. A failing cell
/// records its error and the remaining cells still run. ablation.json and
/// ablation.md in `out_dir` are rewritten after every cell.
AblationTable run_ablation(const AblationGrid& grid, const TrainingConfig& base, const EvalProtocol& protocol,
                           const std::filesystem::path& out_dir);

}  // namespace latentedit
