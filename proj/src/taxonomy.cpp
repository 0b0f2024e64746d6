#include "latentedit/taxonomy.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <numeric>

#include "latentedit/error.hpp"

namespace latentedit {

namespace builtin {
extern const std::string_view kCeleba40;
extern const std::string_view kSynthetic;
}  // namespace builtin

using nlohmann::json;

std::string_view group_name(Group g) {
  switch (g) {
    case Group::hair: return "hair";
    case Group::eye: return "eye";
    case Group::mouth: return "mouth";
    case Group::fashion: return "fashion";
    case Group::others: return "others";
  }
  return "others";
}

std::optional<Group> parse_group(std::string_view name) {
  for (Group g : kAllGroups) {
    if (group_name(g) == name) return g;
  }
  return std::nullopt;
}

AttributeTaxonomy::AttributeTaxonomy(std::string name, std::vector<Attribute> attributes)
    : name_(std::move(name)), attributes_(std::move(attributes)) {
  if (attributes_.empty()) throw ValidationError("taxonomy '" + name_ + "' has no attributes");
  for (std::size_t i = 0; i < attributes_.size(); ++i) {
    const auto& a = attributes_[i];
    if (a.id.empty()) throw ValidationError("attribute with empty id in taxonomy '" + name_ + "'");
    if (a.phrase.empty()) throw ValidationError("attribute '" + a.id + "' has an empty phrase");
    auto [it, inserted] = index_.emplace(a.id, i);
    if (!inserted) {
      throw ValidationError("attribute '" + a.id + "' is assigned to more than one group (listed twice)");
    }
    members_[static_cast<std::size_t>(a.group)].push_back(a.id);
  }
  for (Group g : kAllGroups) {
    if (!members_[static_cast<std::size_t>(g)].empty()) groups_.push_back(g);
  }
}

const std::vector<std::string>& AttributeTaxonomy::members(Group g) const { return members_[static_cast<std::size_t>(g)]; }

const Attribute* AttributeTaxonomy::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &attributes_[it->second];
}

const Attribute& AttributeTaxonomy::at(std::string_view id) const {
  if (const auto* a = find(id)) return *a;
  throw ValidationError("unknown attribute id '" + std::string(id) + "'");
}

std::optional<std::size_t> AttributeTaxonomy::index_of(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

AttributeTaxonomy parse_taxonomy(std::string_view json_text, std::string_view origin) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError("cannot parse taxonomy " + std::string(origin) + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("attributes") || !doc["attributes"].is_array()) {
    throw ParseError("taxonomy " + std::string(origin) + " needs an 'attributes' array");
  }
  std::string name = doc.value("name", std::string(origin));
  std::vector<Attribute> attributes;
  for (const auto& item : doc["attributes"]) {
    if (!item.is_object() || !item.contains("id") || !item["id"].is_string()) {
      throw ParseError("taxonomy " + std::string(origin) + ": attribute entry without a string 'id'");
    }
    Attribute a;
    a.id = item["id"].get<std::string>();
    if (!item.contains("group") || !item["group"].is_string() || item["group"].get<std::string>().empty()) {
      throw ValidationError("attribute '" + a.id + "' is not assigned to any group");
    }
    auto group_str = item["group"].get<std::string>();
    auto group = parse_group(group_str);
    if (!group) throw ValidationError("attribute '" + a.id + "' names unknown group '" + group_str + "'");
    a.group = *group;
    if (!item.contains("phrase") || !item["phrase"].is_string()) {
      throw ParseError("attribute '" + a.id + "' has no 'phrase'");
    }
    a.phrase = item["phrase"].get<std::string>();
    attributes.push_back(std::move(a));
  }
  return AttributeTaxonomy(std::move(name), std::move(attributes));
}

std::vector<std::string> builtin_taxonomies() { return {"celeba40", "synthetic"}; }

AttributeTaxonomy load_taxonomy(std::string_view source) {
  if (source == "celeba40") return parse_taxonomy(builtin::kCeleba40, "celeba40");
  if (source == "synthetic") return parse_taxonomy(builtin::kSynthetic, "synthetic");
  std::ifstream in{std::string(source)};
  if (!in) throw IoError("taxonomy source '" + std::string(source) + "' is neither a builtin name nor a readable file");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_taxonomy(text, source);
}

std::string taxonomy_to_json(const AttributeTaxonomy& taxonomy) {
  json doc;
  doc["name"] = taxonomy.name();
  doc["attributes"] = json::array();
  for (const auto& a : taxonomy.attributes()) {
    doc["attributes"].push_back({{"id", a.id}, {"group", group_name(a.group)}, {"phrase", a.phrase}});
  }
  return doc.dump(2);
}

std::string_view sampling_kind_name(SamplingKind k) { return k == SamplingKind::random ? "random" : "group"; }

std::optional<SamplingKind> parse_sampling_kind(std::string_view name) {
  if (name == "random") return SamplingKind::random;
  if (name == "group") return SamplingKind::group;
  return std::nullopt;
}

namespace {

// Partial Fisher-Yates: the first `count` entries of `pool` become a uniform
// draw without replacement.
std::vector<std::string> draw_distinct(std::vector<std::string> pool, std::size_t count, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace

Prompt sample_prompt(const AttributeTaxonomy& taxonomy, const SamplingStrategy& strategy, std::mt19937_64& rng) {
  if (strategy.attribute_count < 1) throw ValidationError("attribute_count must be >= 1");
  Prompt prompt;
  prompt.requested_count = strategy.attribute_count;
  auto want = static_cast<std::size_t>(strategy.attribute_count);
  if (strategy.kind == SamplingKind::random) {
    if (want > taxonomy.size()) {
      throw ValidationError("cannot draw " + std::to_string(want) + " distinct attributes from a taxonomy of " +
                            std::to_string(taxonomy.size()));
    }
    std::vector<std::string> pool;
    pool.reserve(taxonomy.size());
    for (const auto& a : taxonomy.attributes()) pool.push_back(a.id);
    prompt.attribute_ids = draw_distinct(std::move(pool), want, rng);
  } else {
    const auto& groups = taxonomy.groups();
    std::uniform_int_distribution<std::size_t> pick_group(0, groups.size() - 1);
    Group g = groups[pick_group(rng)];
    const auto& members = taxonomy.members(g);
    if (want > members.size()) {
      want = members.size();
      prompt.clamped = true;
    }
    prompt.group = g;
    prompt.attribute_ids = draw_distinct(members, want, rng);
  }
  prompt.text = render_text(prompt.attribute_ids, taxonomy);
  return prompt;
}

std::string render_text(std::span<const std::string> attribute_ids, const AttributeTaxonomy& taxonomy) {
  if (attribute_ids.empty()) throw ValidationError("cannot render a prompt from zero attributes");
  std::string text;
  for (std::size_t i = 0; i < attribute_ids.size(); ++i) {
    const auto& phrase = taxonomy.at(attribute_ids[i]).phrase;
    if (i > 0) text += (i + 1 == attribute_ids.size()) ? ", and " : ", ";
    text += phrase;
  }
  return text;
}

}  // namespace latentedit
