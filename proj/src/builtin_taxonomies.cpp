// Embedded taxonomy tables.
//
// celeba40: the 40 CelebA attributes in five groups. The group assignment is
// ours; override it with a taxonomy file if you have a different table.
//
// synthetic: the 13 attributes rendered by the synthetic world, grouped the
// same way.

#include <string_view>

namespace latentedit::builtin {

extern const std::string_view kCeleba40 = R"json({
  "name": "celeba40",
  "attributes": [
    {"id": "bald",                "group": "hair",    "phrase": "the person is bald"},
    {"id": "bangs",               "group": "hair",    "phrase": "the person has bangs"},
    {"id": "black_hair",          "group": "hair",    "phrase": "the person has black hair"},
    {"id": "blond_hair",          "group": "hair",    "phrase": "the person has blond hair"},
    {"id": "brown_hair",          "group": "hair",    "phrase": "the person has brown hair"},
    {"id": "gray_hair",           "group": "hair",    "phrase": "the person has gray hair"},
    {"id": "receding_hairline",   "group": "hair",    "phrase": "the person has a receding hairline"},
    {"id": "straight_hair",       "group": "hair",    "phrase": "the person has straight hair"},
    {"id": "wavy_hair",           "group": "hair",    "phrase": "the person has wavy hair"},
    {"id": "sideburns",           "group": "hair",    "phrase": "the person has sideburns"},

    {"id": "arched_eyebrows",     "group": "eye",     "phrase": "the person has arched eyebrows"},
    {"id": "bags_under_eyes",     "group": "eye",     "phrase": "the person has bags under the eyes"},
    {"id": "bushy_eyebrows",      "group": "eye",     "phrase": "the person has bushy eyebrows"},
    {"id": "narrow_eyes",         "group": "eye",     "phrase": "the person has narrow eyes"},

    {"id": "big_lips",            "group": "mouth",   "phrase": "the person has big lips"},
    {"id": "mouth_slightly_open", "group": "mouth",   "phrase": "the person has a slightly open mouth"},
    {"id": "smiling",             "group": "mouth",   "phrase": "the person is smiling"},
    {"id": "wearing_lipstick",    "group": "mouth",   "phrase": "the person wears red lipstick"},
    {"id": "mustache",            "group": "mouth",   "phrase": "the person has a mustache"},
    {"id": "goatee",              "group": "mouth",   "phrase": "the person has a goatee"},
    {"id": "five_o_clock_shadow", "group": "mouth",   "phrase": "the person has a five o'clock shadow"},
    {"id": "no_beard",            "group": "mouth",   "phrase": "the person has no beard"},

    {"id": "eyeglasses",          "group": "fashion", "phrase": "the person wears eyeglasses"},
    {"id": "heavy_makeup",        "group": "fashion", "phrase": "the person wears heavy makeup"},
    {"id": "wearing_earrings",    "group": "fashion", "phrase": "the person wears earrings"},
    {"id": "wearing_hat",         "group": "fashion", "phrase": "the person wears a hat"},
    {"id": "wearing_necklace",    "group": "fashion", "phrase": "the person wears a necklace"},
    {"id": "wearing_necktie",     "group": "fashion", "phrase": "the person wears a necktie"},

    {"id": "attractive",          "group": "others",  "phrase": "the person is attractive"},
    {"id": "big_nose",            "group": "others",  "phrase": "the person has a big nose"},
    {"id": "blurry",              "group": "others",  "phrase": "the photo is blurry"},
    {"id": "chubby",              "group": "others",  "phrase": "the person is chubby"},
    {"id": "double_chin",         "group": "others",  "phrase": "the person has a double chin"},
    {"id": "high_cheekbones",     "group": "others",  "phrase": "the person has high cheekbones"},
    {"id": "male",                "group": "others",  "phrase": "the person is a man"},
    {"id": "oval_face",           "group": "others",  "phrase": "the person has an oval face"},
    {"id": "pale_skin",           "group": "others",  "phrase": "the person has pale skin"},
    {"id": "pointy_nose",         "group": "others",  "phrase": "the person has a pointy nose"},
    {"id": "rosy_cheeks",         "group": "others",  "phrase": "the person has rosy cheeks"},
    {"id": "young",               "group": "others",  "phrase": "the person is young"}
  ]
})json";

extern const std::string_view kSynthetic = R"json({
  "name": "synthetic",
  "attributes": [
    {"id": "blond_hair",       "group": "hair",    "phrase": "the person has blond hair"},
    {"id": "wavy_hair",        "group": "hair",    "phrase": "the person has wavy hair"},
    {"id": "bangs",            "group": "hair",    "phrase": "the person has bangs"},

    {"id": "narrow_eyes",      "group": "eye",     "phrase": "the person has narrow eyes"},
    {"id": "bags_under_eyes",  "group": "eye",     "phrase": "the person has bags under the eyes"},
    {"id": "arched_eyebrows",  "group": "eye",     "phrase": "the person has arched eyebrows"},

    {"id": "wearing_lipstick", "group": "mouth",   "phrase": "the person wears red lipstick"},
    {"id": "smiling",          "group": "mouth",   "phrase": "the person is smiling"},
    {"id": "mustache",         "group": "mouth",   "phrase": "the person has a mustache"},

    {"id": "eyeglasses",       "group": "fashion", "phrase": "the person wears eyeglasses"},
    {"id": "wearing_hat",      "group": "fashion", "phrase": "the person wears a hat"},

    {"id": "chubby",           "group": "others",  "phrase": "the person is chubby"},
    {"id": "rosy_cheeks",      "group": "others",  "phrase": "the person has rosy cheeks"}
  ]
})json";

}  // namespace latentedit::builtin
