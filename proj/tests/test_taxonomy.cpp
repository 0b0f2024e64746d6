#include <doctest.h>

#include <cmath>
#include <set>

#include "latentedit/error.hpp"
#include "latentedit/taxonomy.hpp"

using namespace latentedit;

namespace {

double choose(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace

TEST_SUITE("taxonomy") {

TEST_CASE("builtin celeba40 has 40 attributes in 5 groups") {
  const auto t = load_taxonomy("celeba40");
  CHECK(t.size() == 40);
  CHECK(t.groups().size() == 5);
  std::size_t total = 0;
  for (Group g : t.groups()) total += t.members(g).size();
  CHECK(total == 40);
  CHECK(t.find("smiling") != nullptr);
  CHECK(t.at("smiling").group == Group::mouth);
}

TEST_CASE("builtin synthetic taxonomy") {
  const auto t = load_taxonomy("synthetic");
  CHECK(t.size() == 13);
  CHECK(t.groups().size() == 5);
  const auto names = builtin_taxonomies();
  CHECK(std::set<std::string>(names.begin(), names.end()) == std::set<std::string>{"celeba40", "synthetic"});
}

TEST_CASE("one attribute in one group is a valid taxonomy") {
  const auto t = parse_taxonomy(R"({"name":"mini","attributes":[{"id":"smiling","group":"mouth","phrase":"the person is smiling"}]})");
  CHECK(t.size() == 1);
  CHECK(t.groups() == std::vector<Group>{Group::mouth});
  CHECK(t.members(Group::hair).empty());
}

TEST_CASE("taxonomy errors") {
  CHECK_THROWS_AS(parse_taxonomy(R"({"attributes":[{"id":"smiling","group":"mouth","phrase":"a"},{"id":"smiling","group":"eye","phrase":"b"}]})"),
                  ValidationError);
  CHECK_THROWS_AS(parse_taxonomy(R"({"attributes":[{"id":"x","group":"feet","phrase":"a"}]})"), ValidationError);
  CHECK_THROWS_AS(parse_taxonomy(R"({"attributes":[{"id":"x","phrase":"a"}]})"), ValidationError);
  CHECK_THROWS_AS(parse_taxonomy(R"({"attributes":[{"id":"x","group":"eye","phrase":""}]})"), ValidationError);
  CHECK_THROWS_AS(parse_taxonomy(R"({"attributes":[]})"), ValidationError);
  CHECK_THROWS_AS(parse_taxonomy("{"), ParseError);
  CHECK_THROWS_AS(parse_taxonomy(R"({"name":"x"})"), ParseError);
  CHECK_THROWS_AS(load_taxonomy("/nonexistent/taxonomy.json"), IoError);
  CHECK_THROWS_AS(load_taxonomy("celeba40").at("nope"), ValidationError);
}

TEST_CASE("json round trip") {
  const auto t = load_taxonomy("celeba40");
  const auto back = parse_taxonomy(taxonomy_to_json(t));
  CHECK(back.name() == t.name());
  REQUIRE(back.size() == t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(back.attributes()[i].id == t.attributes()[i].id);
    CHECK(back.attributes()[i].group == t.attributes()[i].group);
    CHECK(back.attributes()[i].phrase == t.attributes()[i].phrase);
  }
}

TEST_CASE("group names") {
  for (Group g : {Group::hair, Group::eye, Group::mouth, Group::fashion, Group::others}) CHECK(parse_group(group_name(g)) == g);
  CHECK_FALSE(parse_group("feet"));
  CHECK(parse_sampling_kind("random") == SamplingKind::random);
  CHECK(parse_sampling_kind("group") == SamplingKind::group);
  CHECK_FALSE(parse_sampling_kind("mixed"));
}

TEST_CASE("group sampling is group-pure") {
  const auto t = load_taxonomy("celeba40");
  std::mt19937_64 rng(7);
  const auto p = sample_prompt(t, {SamplingKind::group, 3}, rng);
  REQUIRE(p.attribute_ids.size() == 3);
  REQUIRE(p.group);
  for (const auto& id : p.attribute_ids) CHECK(t.at(id).group == *p.group);

  for (int n = 1; n <= 5; ++n) {
    for (int i = 0; i < 500; ++i) {
      const auto q = sample_prompt(t, {SamplingKind::group, n}, rng);
      REQUIRE(q.group);
      std::set<std::string> distinct(q.attribute_ids.begin(), q.attribute_ids.end());
      CHECK(distinct.size() == q.attribute_ids.size());
      for (const auto& id : q.attribute_ids) CHECK(t.at(id).group == *q.group);
      CHECK(q.text == render_text(q.attribute_ids, t));
    }
  }
}

TEST_CASE("single-attribute group prompt") {
  const auto t = load_taxonomy("celeba40");
  std::mt19937_64 rng(123);
  const auto p = sample_prompt(t, {SamplingKind::group, 1}, rng);
  CHECK(p.attribute_ids.size() == 1);
  CHECK(p.group.has_value());
  CHECK_FALSE(p.clamped);
}

TEST_CASE("group sampling clamps to the group size") {
  const auto t = load_taxonomy("synthetic");
  std::mt19937_64 rng(3);
  bool saw_clamp = false;
  for (int i = 0; i < 200; ++i) {
    const auto p = sample_prompt(t, {SamplingKind::group, 3}, rng);
    const auto size = t.members(*p.group).size();
    CHECK(p.attribute_ids.size() == std::min<std::size_t>(3, size));
    CHECK(p.clamped == (size < 3));
    CHECK(p.requested_count == 3);
    saw_clamp = saw_clamp || p.clamped;
  }
  CHECK(saw_clamp);
}

TEST_CASE("random sampling multi-group frequency matches the combinatorial expectation") {
  const auto t = load_taxonomy("celeba40");
  double same = 0.0;
  for (Group g : t.groups()) same += choose(static_cast<int>(t.members(g).size()), 5);
  const double expected = 1.0 - same / choose(static_cast<int>(t.size()), 5);

  std::mt19937_64 rng(2024);
  int multi = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto p = sample_prompt(t, {SamplingKind::random, 5}, rng);
    CHECK_FALSE(p.group.has_value());
    std::set<Group> groups;
    for (const auto& id : p.attribute_ids) groups.insert(t.at(id).group);
    if (groups.size() >= 2) ++multi;
  }
  CHECK(std::abs(static_cast<double>(multi) / draws - expected) <= 0.02);
}

TEST_CASE("sampling is deterministic in the seed") {
  const auto t = load_taxonomy("celeba40");
  for (auto kind : {SamplingKind::group, SamplingKind::random}) {
    std::mt19937_64 a(99), b(99);
    for (int i = 0; i < 100; ++i) CHECK(sample_prompt(t, {kind, 2}, a) == sample_prompt(t, {kind, 2}, b));
  }
}

TEST_CASE("sampling errors") {
  const auto t = load_taxonomy("synthetic");
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(sample_prompt(t, {SamplingKind::group, 0}, rng), ValidationError);
  CHECK_THROWS_AS(sample_prompt(t, {SamplingKind::random, 14}, rng), ValidationError);
}

TEST_CASE("render_text") {
  const auto t = load_taxonomy("celeba40");
  const std::vector<std::string> one{"wavy_hair"};
  CHECK(render_text(one, t) == "the person has wavy hair");
  const std::vector<std::string> two{"wavy_hair", "blond_hair"};
  CHECK(render_text(two, t) == "the person has wavy hair, and the person has blond hair");
  const std::vector<std::string> three{"wavy_hair", "blond_hair", "bangs"};
  CHECK(render_text(three, t) == "the person has wavy hair, the person has blond hair, and the person has bangs");
  CHECK_THROWS_AS(render_text(std::vector<std::string>{}, t), ValidationError);
  CHECK_THROWS_AS(render_text(std::vector<std::string>{"nope"}, t), ValidationError);
}

}  // TEST_SUITE
