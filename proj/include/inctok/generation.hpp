#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "inctok/interfaces.hpp"
#include "inctok/mapping_network.hpp"
#include "inctok/sampler.hpp"
#include "inctok/version.hpp"

namespace inctok {

struct GenerationConfig {
  int images_per_concept = 8;
  int steps = 25;
  double guidance = 7.5;
  uint64_t seed_base = 0;
  double face_threshold = 0.5;        // below this, a sample is retried
  int retry_multiplier = 3;           // attempt budget = multiplier * images
  std::map<AttributeId, int> delays;  // adapted-token injection delay per attribute

  nlohmann::json to_json() const {
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [id, v] : delays) d[attribute_name(id)] = v;
    return {{"images_per_concept", images_per_concept},
            {"steps", steps},
            {"guidance", guidance},
            {"seed_base", seed_base},
            {"face_threshold", face_threshold},
            {"retry_multiplier", retry_multiplier},
            {"delays", d}};
  }
};

struct GeneratedSample {
  std::string occupation;
  uint64_t seed = 0;
  std::string prompt;
  std::filesystem::path png_path;
};

struct ConceptGenerationResult {
  std::vector<GeneratedSample> samples;
  int attempts = 0;
  int rejected = 0;
};

using MappingSet = std::map<AttributeId, const MappingNetwork*>;

// The evaluation prompt for a concept: placeholders of the adapted
// attributes fill the attribute slot (template order), or the slot is
// removed entirely when no attribute is active.
inline std::string generation_prompt(const Taxonomy& tax,
                                     const std::vector<AttributeId>& active,
                                     const std::string& occupation) {
  std::string pattern = std::string(resources::kEvalTemplate);
  std::string filled;
  if (!active.empty()) {
    std::vector<std::string> words;
    for (AttributeId id : active) words.push_back(tax.attribute(id).placeholder);
    filled = detail::join(words, " ");
  }
  std::string s = detail::replace_first(pattern, "{attribute}", filled);
  s = detail::replace_first(s, "{occupation}", occupation);
  return detail::collapse_spaces(s);
}

// Transformed conditioning for one activation subset: the prompt carries
// only the active placeholders, and each is substituted with its mapping's
// concept-adapted rows before the frozen text transform runs.
inline Mat conditioning_for_subset(const Backbone& bb, const Taxonomy& tax,
                                   const MappingSet& mappings,
                                   const std::vector<AttributeId>& active,
                                   const std::string& occupation) {
  std::string prompt = generation_prompt(tax, active, occupation);
  if (active.empty()) return encode_plain(bb, prompt);

  PromptLayout layout = analyze_prompt(bb, tax, prompt, occupation);
  Mat concept_rows = concept_embedding(bb, layout);
  Tape tape;
  std::map<AttributeId, Var> subs;
  for (AttributeId id : active) {
    auto it = mappings.find(id);
    require(it != mappings.end() && it->second != nullptr, Errc::contract,
            std::string("no mapping for attribute ") + attribute_name(id));
    BoundParams p = it->second->bind(tape, false);
    subs.emplace(id, it->second->adapt(tape, p, concept_rows));
  }
  return tape.val(encode_with_substitution(tape, bb, layout, subs));
}

// Generates images for one occupation. Samples failing the face check are
// retried with fresh seeds until the attempt budget runs out; every accepted
// image lands under run_dir/<occupation>/<seed>.png with a JSON sidecar.
// Falling short of the request is an error, raised only after everything
// accepted has been written.
inline ConceptGenerationResult generate_for_concept(
    const Backbone& bb, const Taxonomy& tax, const MappingSet& mappings,
    const std::string& occupation, const GenerationConfig& cfg,
    const std::filesystem::path& run_dir, const FaceDetector* face = nullptr) {
  require(cfg.images_per_concept >= 1, Errc::config, "images_per_concept must be >= 1");
  require(cfg.retry_multiplier >= 1, Errc::config, "retry_multiplier must be >= 1");
  require(!mappings.empty(), Errc::config, "no mappings given");

  std::vector<std::pair<AttributeId, int>> delays;
  std::vector<AttributeId> attrs;
  for (const auto& [id, m] : mappings) {
    require(m != nullptr, Errc::contract, "null mapping");
    auto it = cfg.delays.find(id);
    delays.emplace_back(id, it == cfg.delays.end() ? 0 : it->second);
    attrs.push_back(id);
  }
  InjectionPlan plan = build_injection_plan(cfg.steps, delays);

  std::vector<Mat> conditionings;
  for (const auto& active : plan.source_active)
    conditionings.push_back(
        conditioning_for_subset(bb, tax, mappings, active, occupation));

  std::string full_prompt = generation_prompt(tax, attrs, occupation);
  std::filesystem::path dir = run_dir / occupation;
  std::filesystem::create_directories(dir);

  ConceptGenerationResult result;
  int budget = cfg.retry_multiplier * cfg.images_per_concept;
  for (int draw = 0; draw < budget && int(result.samples.size()) < cfg.images_per_concept;
       ++draw) {
    SamplerConfig scfg;
    scfg.steps = cfg.steps;
    scfg.guidance = cfg.guidance;
    scfg.seed = cfg.seed_base + uint64_t(draw);
    ++result.attempts;

    Image img = sample_image(bb, conditionings, plan.schedule, scfg);
    if (face != nullptr && face->face_confidence(img) < cfg.face_threshold) {
      ++result.rejected;
      continue;
    }

    GeneratedSample sample;
    sample.occupation = occupation;
    sample.seed = scfg.seed;
    sample.prompt = full_prompt;
    sample.png_path = dir / (std::to_string(scfg.seed) + ".png");
    write_image_png(sample.png_path, img);

    nlohmann::json side = {{"occupation", occupation},
                           {"seed", scfg.seed},
                           {"prompt", full_prompt},
                           {"steps", cfg.steps},
                           {"guidance", cfg.guidance},
                           {"tool_version", kToolVersion}};
    std::ofstream f(dir / (std::to_string(scfg.seed) + ".json"), std::ios::trunc);
    require(f.good(), Errc::io, "cannot write sidecar");
    f << side.dump(2) << "\n";
    result.samples.push_back(std::move(sample));
  }

  require(int(result.samples.size()) == cfg.images_per_concept, Errc::partial_result,
          "occupation '" + occupation + "': accepted " +
              std::to_string(result.samples.size()) + " of " +
              std::to_string(cfg.images_per_concept) + " after " +
              std::to_string(result.attempts) + " attempts");
  return result;
}

struct RunSummary {
  std::map<std::string, int> images_per_occupation;
  int attempts = 0;
  int rejected = 0;
  std::vector<std::string> incomplete;  // occupations that fell short
};

// Generates a full run across occupations and writes run.json provenance.
// Occupations that fall short are recorded and reported at the end, so one
// bad concept cannot discard the others' finished images.
inline RunSummary generate_run(const Backbone& bb, const Taxonomy& tax,
                               const MappingSet& mappings,
                               const std::vector<std::string>& occupations,
                               const GenerationConfig& cfg,
                               const std::filesystem::path& run_dir,
                               const FaceDetector* face = nullptr) {
  require(!occupations.empty(), Errc::config, "no occupations requested");
  std::filesystem::create_directories(run_dir);

  RunSummary summary;
  std::vector<std::string> errors;
  for (const auto& occ : occupations) {
    try {
      ConceptGenerationResult r =
          generate_for_concept(bb, tax, mappings, occ, cfg, run_dir, face);
      summary.images_per_occupation[occ] = int(r.samples.size());
      summary.attempts += r.attempts;
      summary.rejected += r.rejected;
    } catch (const Error& e) {
      if (e.code() != Errc::partial_result) throw;
      summary.incomplete.push_back(occ);
      errors.push_back(e.what());
      int written = 0;
      std::error_code ec;
      for (auto it = std::filesystem::directory_iterator(run_dir / occ, ec);
           it != std::filesystem::directory_iterator(); ++it)
        if (it->path().extension() == ".png") ++written;
      summary.images_per_occupation[occ] = written;
    }
  }

  nlohmann::json mapping_digests = nlohmann::json::object();
  for (const auto& [id, m] : mappings) mapping_digests[attribute_name(id)] = m->digest();
  nlohmann::json run = {{"tool_version", kToolVersion},
                        {"backbone_digest", bb.weights_digest()},
                        {"taxonomy_hash", tax.hash()},
                        {"mapping_digests", mapping_digests},
                        {"config", cfg.to_json()},
                        {"occupations", occupations},
                        {"images_per_occupation", summary.images_per_occupation},
                        {"attempts", summary.attempts},
                        {"rejected", summary.rejected},
                        {"incomplete", summary.incomplete}};
  std::ofstream f(run_dir / "run.json", std::ios::trunc);
  require(f.good(), Errc::io, "cannot write run.json");
  f << run.dump(2) << "\n";

  require(summary.incomplete.empty(), Errc::partial_result,
          "run incomplete for " + std::to_string(summary.incomplete.size()) +
              " occupation(s): " + detail::join(errors, " | "));
  return summary;
}

}  // namespace inctok
