#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace latentedit {

enum class Group : std::uint8_t { hair = 0, eye = 1, mouth = 2, fashion = 3, others = 4 };

inline constexpr std::array<Group, 5> kAllGroups = {Group::hair, Group::eye, Group::mouth, Group::fashion, Group::others};

std::string_view group_name(Group g);
std::optional<Group> parse_group(std::string_view name);

struct Attribute {
  std::string id;
  Group group = Group::others;
  std::string phrase;
};

/// Immutable attribute vocabulary partitioned into the five groups.
///
/// Construction validates the partition: ids are unique, phrases are
/// non-empty, every attribute sits in exactly one group. Only groups with at
/// least one member appear in `groups()`.
class AttributeTaxonomy {
 public:
  AttributeTaxonomy(std::string name, std::vector<Attribute> attributes);

  const std::string& name() const { return name_; }
  const std::vector<Attribute>& attributes() const { return attributes_; }
  std::size_t size() const { return attributes_.size(); }

  /// Non-empty groups in canonical order (hair, eye, mouth, fashion, others).
  const std::vector<Group>& groups() const { return groups_; }
  const std::vector<std::string>& members(Group g) const;

  const Attribute* find(std::string_view id) const;
  const Attribute& at(std::string_view id) const;
  std::optional<std::size_t> index_of(std::string_view id) const;

 private:
  std::string name_;
  std::vector<Attribute> attributes_;
  std::vector<Group> groups_;
  std::array<std::vector<std::string>, 5> members_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Loads a builtin taxonomy ("celeba40", "synthetic") or a JSON file.
///
/// File schema:
///   { "name": "...", "attributes": [ {"id": "...", "group": "hair|eye|mouth|fashion|others", "phrase": "..."}, ... ] }
/// An id listed twice is an attribute assigned to two groups and is rejected.
AttributeTaxonomy load_taxonomy(std::string_view source);
AttributeTaxonomy parse_taxonomy(std::string_view json_text, std::string_view origin = "<memory>");
std::string taxonomy_to_json(const AttributeTaxonomy& taxonomy);

/// Names of the embedded taxonomies.
std::vector<std::string> builtin_taxonomies();

enum class SamplingKind : std::uint8_t { random = 0, group = 1 };

std::string_view sampling_kind_name(SamplingKind k);
std::optional<SamplingKind> parse_sampling_kind(std::string_view name);

struct SamplingStrategy {
  SamplingKind kind = SamplingKind::group;
  int attribute_count = 3;
};

struct Prompt {
  std::vector<std::string> attribute_ids;
  std::string text;
  std::optional<Group> group;
  // Set when the sampled group had fewer members than requested.
  bool clamped = false;
  int requested_count = 0;

  bool operator==(const Prompt&) const = default;
};

/// Decoupling prompt sampler.
///
/// group: pick one non-empty group uniformly, then `attribute_count` distinct
/// members of it (clamped to the group size). random: `attribute_count`
/// distinct attributes from the whole taxonomy.
Prompt sample_prompt(const AttributeTaxonomy& taxonomy, const SamplingStrategy& strategy, std::mt19937_64& rng);

/// Joins attribute phrases: "a", "a, and b", "a, b, and c".
std::string render_text(std::span<const std::string> attribute_ids, const AttributeTaxonomy& taxonomy);

}  // namespace latentedit
