#include "latentedit/ablation.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "latentedit/error.hpp"

namespace latentedit {

namespace fs = std::filesystem;
using nlohmann::json;

void AblationGrid::validate() const {
  if (kinds.empty() || attribute_counts.empty()) throw ValidationError("ablation grid is empty");
  for (int n : attribute_counts) {
    if (n < 1) throw ValidationError("attribute counts must be >= 1");
  }
  if (std::set(kinds.begin(), kinds.end()).size() != kinds.size()) throw ValidationError("ablation grid repeats a strategy");
  if (std::set(attribute_counts.begin(), attribute_counts.end()).size() != attribute_counts.size()) {
    throw ValidationError("ablation grid repeats an attribute count");
  }
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(item);
  return out;
}

int parse_count(const std::string& s, const std::string& spec) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ParseError("bad attribute count '" + s + "' in grid '" + spec + "'");
  return v;
}

std::string cell_name(SamplingKind kind, int n) { return std::string(sampling_kind_name(kind)) + "_n" + std::to_string(n); }

void write_outputs(const AblationTable& table, const fs::path& out_dir) {
  {
    std::ofstream out(out_dir / "ablation.json");
    out << table.to_json().dump(2) << '\n';
    if (!out) throw IoError("cannot write " + (out_dir / "ablation.json").string());
  }
  std::ofstream md(out_dir / "ablation.md");
  md << table.to_markdown();
  if (!md) throw IoError("cannot write " + (out_dir / "ablation.md").string());
}

}  // namespace

AblationGrid parse_grid(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw ParseError("grid '" + spec + "' must look like <kinds>:<counts>, e.g. random,group:1-5");
  AblationGrid grid;
  for (const auto& name : split(spec.substr(0, colon), ',')) {
    auto kind = parse_sampling_kind(name);
    if (!kind) throw ParseError("unknown sampling strategy '" + name + "' in grid '" + spec + "'");
    grid.kinds.push_back(*kind);
  }
  for (const auto& part : split(spec.substr(colon + 1), ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      grid.attribute_counts.push_back(parse_count(part, spec));
      continue;
    }
    const int lo = parse_count(part.substr(0, dash), spec), hi = parse_count(part.substr(dash + 1), spec);
    if (hi < lo) throw ParseError("empty range '" + part + "' in grid '" + spec + "'");
    for (int n = lo; n <= hi; ++n) grid.attribute_counts.push_back(n);
  }
  grid.validate();
  return grid;
}

json AblationTable::to_json() const {
  json cells_json = json::array();
  for (const auto& c : cells) {
    json j = {{"strategy", std::string(sampling_kind_name(c.kind))},
              {"attribute_count", c.attribute_count},
              {"run_dir", c.run_dir.string()},
              {"train_seconds", c.train_seconds}};
    if (c.metrics) j["metrics"] = c.metrics->to_json();
    if (c.error) j["error"] = *c.error;
    cells_json.push_back(std::move(j));
  }
  return {{"cells", cells_json}};
}

std::string AblationTable::to_markdown() const {
  std::vector<SamplingKind> kinds;
  std::vector<int> counts;
  for (const auto& c : cells) {
    if (std::find(kinds.begin(), kinds.end(), c.kind) == kinds.end()) kinds.push_back(c.kind);
    if (std::find(counts.begin(), counts.end(), c.attribute_count) == counts.end()) counts.push_back(c.attribute_count);
  }
  std::sort(counts.begin(), counts.end());
  auto fmt = [](std::optional<double> v) {
    if (!v) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "| Strategy | Metric |";
  for (int n : counts) out << " N_a=" << n << " |";
  out << "\n|---|---|";
  for (std::size_t i = 0; i < counts.size(); ++i) out << "---|";
  out << '\n';
  const std::vector<std::pair<std::string, std::optional<double> MetricReport::*>> metrics = {
      {"Acc", &MetricReport::acc}, {"Preservation", &MetricReport::preservation}, {"FID", &MetricReport::fid}, {"ID", &MetricReport::id_similarity}};
  for (SamplingKind k : kinds) {
    for (const auto& [label, member] : metrics) {
      out << "| " << sampling_kind_name(k) << " | " << label << " |";
      for (int n : counts) {
        auto it = std::find_if(cells.begin(), cells.end(), [&](const AblationCell& c) { return c.kind == k && c.attribute_count == n; });
        std::string v = "";
        if (it != cells.end()) v = it->error ? "error" : it->metrics ? fmt((*it->metrics).*member) : "-";
        out << ' ' << v << " |";
      }
      out << '\n';
    }
  }
  return out.str();
}

AblationTable run_ablation(const AblationGrid& grid, const TrainingConfig& base, const EvalProtocol& protocol, const fs::path& out_dir) {
  grid.validate();
  base.validate();
  protocol.validate();
  fs::create_directories(out_dir);
  const TrainingContext ctx = make_training_context(base);

  AblationTable table;
  for (SamplingKind kind : grid.kinds) {
    for (int n : grid.attribute_counts) {
      AblationCell cell;
      cell.kind = kind;
      cell.attribute_count = n;
      cell.run_dir = out_dir / cell_name(kind, n);
      try {
        TrainingConfig config = base;
        config.strategy = {kind, n};
        const auto start = std::chrono::steady_clock::now();
        const TrainRunRecord record = train(config, ctx, TrainOptions{cell.run_dir, std::nullopt, {}});
        cell.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const MapperState state = load_mapper(record.final_checkpoint, ctx.bundle.generator->latent_shape());
        EvalOptions options;
        options.report_path = cell.run_dir / "metrics.json";
        cell.metrics = evaluate(protocol, state, ctx.bundle, ctx.taxonomy, options);
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      table.cells.push_back(std::move(cell));
      write_outputs(table, out_dir);
    }
  }
  return table;
}

}  // namespace latentedit
