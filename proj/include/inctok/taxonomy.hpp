#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "inctok/detail/sha256.hpp"
#include "inctok/detail/strings.hpp"
#include "inctok/error.hpp"
#include "inctok/resources.hpp"

namespace inctok {

enum class AttributeId { gender, race, age };

inline const char* attribute_name(AttributeId id) {
  switch (id) {
    case AttributeId::gender: return "gender";
    case AttributeId::race: return "race";
    case AttributeId::age: return "age";
  }
  return "unknown";
}

inline AttributeId attribute_from_name(const std::string& s) {
  if (s == "gender") return AttributeId::gender;
  if (s == "race") return AttributeId::race;
  if (s == "age") return AttributeId::age;
  fail(Errc::invalid_taxonomy, "unknown attribute: " + s);
}

struct AttributeClass {
  std::string label;        // stable key used in manifests and reports
  std::string prompt_word;  // word(s) substituted into anchor prompts
};

struct SensitiveAttribute {
  AttributeId id = AttributeId::gender;
  std::string placeholder;  // reserved single-word token, e.g. "<i_g>"
  std::vector<AttributeClass> classes;

  int class_index(const std::string& label) const {
    for (size_t i = 0; i < classes.size(); ++i)
      if (classes[i].label == label) return int(i);
    fail(Errc::invalid_taxonomy,
         std::string("unknown class '") + label + "' for " + attribute_name(id));
  }
};

struct PromptTemplate {
  std::string pattern;  // contains {attribute} and {occupation} exactly once
};

struct ConceptSet {
  std::vector<std::string> train_occupations;
  std::vector<std::string> test_occupations;
};

class Taxonomy {
 public:
  std::vector<SensitiveAttribute> attributes;
  ConceptSet concepts;
  std::vector<PromptTemplate> templates;
  std::string templates_version = std::string(resources::kTemplatesVersion);
  std::string init_word = std::string(resources::kDefaultInitWord);

  const SensitiveAttribute& attribute(AttributeId id) const {
    for (const auto& a : attributes)
      if (a.id == id) return a;
    fail(Errc::invalid_taxonomy,
         std::string("taxonomy does not define attribute ") + attribute_name(id));
  }

  const SensitiveAttribute* attribute_by_placeholder(const std::string& word) const {
    for (const auto& a : attributes)
      if (a.placeholder == word) return &a;
    return nullptr;
  }

  bool is_placeholder_word(const std::string& word) const {
    return attribute_by_placeholder(word) != nullptr;
  }

  std::vector<std::string> placeholder_words() const {
    std::vector<std::string> out;
    for (const auto& a : attributes) out.push_back(a.placeholder);
    return out;
  }

  bool has_occupation(const std::string& occ) const {
    auto in = [&](const std::vector<std::string>& v) {
      return std::find(v.begin(), v.end(), occ) != v.end();
    };
    return in(concepts.train_occupations) || in(concepts.test_occupations);
  }

  // Canonical JSON form; also what the config file stores.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["init_word"] = init_word;
    j["templates_version"] = templates_version;
    j["attributes"] = nlohmann::json::array();
    for (const auto& a : attributes) {
      nlohmann::json ja;
      ja["id"] = attribute_name(a.id);
      ja["placeholder"] = a.placeholder;
      ja["classes"] = nlohmann::json::array();
      for (const auto& c : a.classes)
        ja["classes"].push_back({{"label", c.label}, {"prompt_word", c.prompt_word}});
      j["attributes"].push_back(std::move(ja));
    }
    j["occupations"] = {{"train", concepts.train_occupations},
                        {"test", concepts.test_occupations}};
    j["templates"] = nlohmann::json::array();
    for (const auto& t : templates) j["templates"].push_back(t.pattern);
    return j;
  }

  static Taxonomy from_json(const nlohmann::json& j) {
    Taxonomy t;
    try {
      t.init_word = j.value("init_word", t.init_word);
      t.templates_version = j.value("templates_version", t.templates_version);
      for (const auto& ja : j.at("attributes")) {
        SensitiveAttribute a;
        a.id = attribute_from_name(ja.at("id").get<std::string>());
        a.placeholder = ja.at("placeholder").get<std::string>();
        for (const auto& jc : ja.at("classes"))
          a.classes.push_back({jc.at("label").get<std::string>(),
                               jc.at("prompt_word").get<std::string>()});
        t.attributes.push_back(std::move(a));
      }
      t.concepts.train_occupations =
          j.at("occupations").at("train").get<std::vector<std::string>>();
      t.concepts.test_occupations =
          j.at("occupations").at("test").get<std::vector<std::string>>();
      for (const auto& jt : j.at("templates"))
        t.templates.push_back({jt.get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::invalid_taxonomy, std::string("taxonomy parse failed: ") + e.what());
    }
    t.validate();
    return t;
  }

  static Taxonomy load(const std::filesystem::path& path) {
    std::ifstream f(path);
    require(f.good(), Errc::io, "cannot open taxonomy file: " + path.string());
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::invalid_taxonomy, std::string("taxonomy parse failed: ") + e.what());
    }
    return from_json(j);
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), Errc::io, "cannot open taxonomy file for write: " + path.string());
    f << to_json().dump(2) << "\n";
  }

  std::string hash() const { return detail::sha256_hex(to_json().dump()); }

  void validate() const {
    require(!attributes.empty(), Errc::invalid_taxonomy, "no attributes defined");
    std::set<std::string> seen_placeholders;
    std::set<std::string> seen_ids;
    for (const auto& a : attributes) {
      require(seen_ids.insert(attribute_name(a.id)).second, Errc::invalid_taxonomy,
              "duplicate attribute id");
      require(!a.placeholder.empty(), Errc::invalid_taxonomy, "empty placeholder");
      require(detail::split_whitespace(a.placeholder).size() == 1, Errc::invalid_taxonomy,
              "placeholder must be a single word: " + a.placeholder);
      require(seen_placeholders.insert(a.placeholder).second, Errc::invalid_taxonomy,
              "duplicate placeholder: " + a.placeholder);
      size_t expected = (a.id == AttributeId::race) ? 6 : 2;
      require(a.classes.size() == expected, Errc::invalid_taxonomy,
              std::string(attribute_name(a.id)) + " must define " +
                  std::to_string(expected) + " classes");
      std::set<std::string> labels;
      for (const auto& c : a.classes) {
        require(!c.label.empty() && !c.prompt_word.empty(), Errc::invalid_taxonomy,
                "class label and prompt_word must be non-empty");
        require(labels.insert(c.label).second, Errc::invalid_taxonomy,
                "duplicate class label: " + c.label);
      }
    }

    require(!concepts.train_occupations.empty() && !concepts.test_occupations.empty(),
            Errc::invalid_taxonomy, "occupation lists must be non-empty");
    std::set<std::string> train(concepts.train_occupations.begin(),
                                concepts.train_occupations.end());
    require(train.size() == concepts.train_occupations.size(), Errc::invalid_taxonomy,
            "duplicate training occupation");
    for (const auto& occ : concepts.test_occupations)
      require(!train.count(occ), Errc::invalid_taxonomy,
              "occupation in both train and test: " + occ);

    require(!templates.empty(), Errc::invalid_taxonomy, "no templates");
    for (const auto& t : templates) {
      require(detail::count_occurrences(t.pattern, "{attribute}") == 1,
              Errc::invalid_taxonomy, "template needs exactly one {attribute}: " + t.pattern);
      require(detail::count_occurrences(t.pattern, "{occupation}") == 1,
              Errc::invalid_taxonomy, "template needs exactly one {occupation}: " + t.pattern);
    }

    // Placeholders are reserved words: they may not occur in occupations or
    // template text, otherwise substitution positions become ambiguous.
    for (const auto& a : attributes) {
      for (const auto& occ : concepts.train_occupations)
        require(occ.find(a.placeholder) == std::string::npos, Errc::invalid_taxonomy,
                "placeholder collides with occupation: " + occ);
      for (const auto& occ : concepts.test_occupations)
        require(occ.find(a.placeholder) == std::string::npos, Errc::invalid_taxonomy,
                "placeholder collides with occupation: " + occ);
      for (const auto& t : templates)
        require(t.pattern.find(a.placeholder) == std::string::npos, Errc::invalid_taxonomy,
                "placeholder collides with template: " + t.pattern);
    }
  }

  // Default taxonomy: three sensitive attributes over the standard
  // occupation split and template pool.
  static Taxonomy builtin_default() {
    Taxonomy t;
    t.attributes = {
        {AttributeId::gender, "<i_g>", {{"male", "male"}, {"female", "female"}}},
        {AttributeId::race,
         "<i_r>",
         {{"white", "White"},
          {"black", "Black"},
          {"asian", "Asian"},
          {"middle_eastern", "Middle Eastern"},
          {"indian", "Indian"},
          {"latino_hispanic", "Latino Hispanic"}}},
        {AttributeId::age, "<i_a>", {{"young", "young"}, {"old", "old"}}},
    };
    for (auto s : resources::kTrainOccupations)
      t.concepts.train_occupations.emplace_back(s);
    for (auto s : resources::kTestOccupations)
      t.concepts.test_occupations.emplace_back(s);
    for (auto s : resources::kTrainingTemplates) t.templates.push_back({std::string(s)});
    t.validate();
    return t;
  }

  // Miniature taxonomy matching the toy backbone's vocabulary. Same shape
  // rules as the default; invented words so distributions are controlled.
  static Taxonomy builtin_toy() {
    Taxonomy t;
    t.attributes = {
        {AttributeId::gender, "<i_g>", {{"sunlit", "sunlit"}, {"moonlit", "moonlit"}}},
        {AttributeId::race,
         "<i_r>",
         {{"ruby", "ruby"},
          {"ash", "ash"},
          {"jade", "jade"},
          {"ochre", "ochre"},
          {"azure", "azure"},
          {"plum", "plum"}}},
        {AttributeId::age, "<i_a>", {{"dawnlit", "dawnlit"}, {"dusklit", "dusklit"}}},
    };
    t.concepts.train_occupations = {"lumin", "verdo", "quill", "bryn"};
    t.concepts.test_occupations = {"coral", "slate", "ember", "frost"};
    for (auto s : resources::kTrainingTemplates) t.templates.push_back({std::string(s)});
    t.init_word = "someone";
    t.validate();
    return t;
  }
};

// Renders a template with the attribute slot holding the given placeholder
// words (space-joined, in the given order) and the occupation slot holding
// the occupation. Every placeholder must belong to the taxonomy.
inline std::string build_inclusive_prompt(const Taxonomy& tax, const PromptTemplate& tmpl,
                                          std::span<const std::string> placeholders,
                                          const std::string& occupation) {
  require(!placeholders.empty(), Errc::invalid_taxonomy, "no placeholders given");
  std::vector<std::string> words;
  for (const auto& p : placeholders) {
    require(tax.is_placeholder_word(p), Errc::invalid_taxonomy,
            "unknown placeholder: " + p);
    words.push_back(p);
  }
  std::string s = detail::replace_first(tmpl.pattern, "{attribute}",
                                        detail::join(words, " "));
  s = detail::replace_first(s, "{occupation}", occupation);
  return s;
}

// Rewrites an inclusive prompt into its anchor form: the one placeholder of
// `attr` is replaced by the class's prompt word. Zero or several occurrences
// make the anchor ambiguous and are rejected.
inline std::string build_anchor_prompt(const std::string& inclusive_prompt,
                                       const SensitiveAttribute& attr,
                                       const AttributeClass& cls) {
  attr.class_index(cls.label);  // rejects classes from a different attribute
  auto words = detail::split_whitespace(inclusive_prompt);
  int hits = 0;
  for (auto& w : words) {
    if (w == attr.placeholder) ++hits;
  }
  require(hits == 1, Errc::ambiguous_anchor,
          "prompt must contain the placeholder exactly once, found " +
              std::to_string(hits) + ": " + inclusive_prompt);
  for (auto& w : words) {
    if (w == attr.placeholder) w = cls.prompt_word;
  }
  return detail::join(words, " ");
}

}  // namespace inctok
