#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "inctok/interfaces.hpp"
#include "inctok/sampler.hpp"
#include "inctok/version.hpp"

namespace inctok {

// Lifecycle of one candidate training image. Only `selected` records enter
// the balanced manifest; everything else documents why a candidate dropped
// out, so a prepared dataset can be audited offline.
enum class RecordStatus {
  candidate,        // generated, not yet filtered
  no_face,          // face check failed or image unreadable
  face_ok,          // face check passed
  class_mismatch,   // classifier disagreed with the intended class
  pending_manual,   // classifier failed; needs a manual decision
  rejected_manual,  // manually rejected
  screened,         // class confirmed
  selected          // kept by balancing
};

inline const char* record_status_name(RecordStatus s) {
  switch (s) {
    case RecordStatus::candidate: return "candidate";
    case RecordStatus::no_face: return "no_face";
    case RecordStatus::face_ok: return "face_ok";
    case RecordStatus::class_mismatch: return "class_mismatch";
    case RecordStatus::pending_manual: return "pending_manual";
    case RecordStatus::rejected_manual: return "rejected_manual";
    case RecordStatus::screened: return "screened";
    case RecordStatus::selected: return "selected";
  }
  return "unknown";
}

inline RecordStatus record_status_from_name(const std::string& s) {
  for (RecordStatus r : {RecordStatus::candidate, RecordStatus::no_face, RecordStatus::face_ok,
                         RecordStatus::class_mismatch, RecordStatus::pending_manual,
                         RecordStatus::rejected_manual, RecordStatus::screened,
                         RecordStatus::selected})
    if (s == record_status_name(r)) return r;
  fail(Errc::config, "unknown record status: " + s);
}

struct SampleRecord {
  std::string image;           // path relative to the dataset root
  std::string occupation;
  std::string attribute;       // attribute name, e.g. "gender"
  std::string intended_class;  // class named in the candidate prompt
  std::string screened_class;  // class confirmed by screening (or override)
  std::string prompt;          // candidate prompt the image came from
  uint64_t seed = 0;
  double face_confidence = 0.0;
  RecordStatus status = RecordStatus::candidate;

  nlohmann::json to_json() const {
    return {{"image", image},
            {"occupation", occupation},
            {"attribute", attribute},
            {"intended_class", intended_class},
            {"screened_class", screened_class},
            {"prompt", prompt},
            {"seed", seed},
            {"face_confidence", face_confidence},
            {"status", record_status_name(status)}};
  }

  static SampleRecord from_json(const nlohmann::json& j) {
    SampleRecord r;
    try {
      r.image = j.at("image").get<std::string>();
      r.occupation = j.at("occupation").get<std::string>();
      r.attribute = j.at("attribute").get<std::string>();
      r.intended_class = j.at("intended_class").get<std::string>();
      r.screened_class = j.at("screened_class").get<std::string>();
      r.prompt = j.at("prompt").get<std::string>();
      r.seed = j.at("seed").get<uint64_t>();
      r.face_confidence = j.at("face_confidence").get<double>();
      r.status = record_status_from_name(j.at("status").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::config, std::string("record parse failed: ") + e.what());
    }
    return r;
  }
};

// JSONL manifest: one header line, then one line per selected record. The
// hash is order-invariant over records so that a re-sorted file still names
// the same dataset.
struct TrainingManifest {
  nlohmann::json header;
  std::vector<SampleRecord> records;

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), Errc::io, "cannot write manifest: " + path.string());
    f << header.dump() << "\n";
    for (const auto& r : records) f << r.to_json().dump() << "\n";
  }

  static TrainingManifest load(const std::filesystem::path& path) {
    std::ifstream f(path);
    require(f.good(), Errc::io, "cannot read manifest: " + path.string());
    TrainingManifest m;
    std::string line;
    require(bool(std::getline(f, line)), Errc::config, "manifest is empty");
    try {
      m.header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::config, std::string("manifest header parse failed: ") + e.what());
    }
    require(m.header.value("kind", "") == "inctok-manifest", Errc::config,
            "not a training manifest: " + path.string());
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      try {
        m.records.push_back(SampleRecord::from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        fail(Errc::config, std::string("manifest record parse failed: ") + e.what());
      }
    }
    return m;
  }

  std::string hash() const {
    std::vector<std::string> digests;
    for (const auto& r : records) digests.push_back(detail::sha256_hex(r.to_json().dump()));
    std::sort(digests.begin(), digests.end());
    nlohmann::json h = header;
    h.erase("counts");  // counts are derived, not identity
    std::string acc = h.dump();
    for (const auto& d : digests) acc += d;
    return detail::sha256_hex(acc);
  }
};

// Candidate prompt for one (class, occupation) pair, with the right article.
inline std::string candidate_prompt(const AttributeClass& cls, const std::string& occupation) {
  std::string s = std::string(resources::kCandidatePromptPattern);
  s = detail::replace_first(s, "{article}", detail::indefinite_article(cls.prompt_word));
  s = detail::replace_first(s, "{attribute}", cls.prompt_word);
  s = detail::replace_first(s, "{occupation}", occupation);
  return s;
}

// Generates candidate images for every (occupation x class) pair of one
// attribute. A failed sample is recorded as a warning and skipped; the run
// continues, because data preparation is resumable by re-running.
inline std::vector<SampleRecord> generate_candidates(
    const Backbone& bb, const Taxonomy& tax, AttributeId attr_id,
    const std::vector<std::string>& occupations, int per_combo,
    const std::filesystem::path& root, uint64_t seed_base, int steps, double guidance,
    std::vector<std::string>* warnings = nullptr) {
  require(per_combo >= 1, Errc::config, "per_combo must be >= 1");
  require(!occupations.empty(), Errc::config, "no occupations given");
  const SensitiveAttribute& attr = tax.attribute(attr_id);

  std::vector<SampleRecord> records;
  uint64_t draw = 0;
  for (const auto& occ : occupations) {
    for (const auto& cls : attr.classes) {
      std::filesystem::path dir =
          root / attribute_name(attr_id) / occ / cls.label;
      std::filesystem::create_directories(dir);
      for (int k = 0; k < per_combo; ++k, ++draw) {
        SampleRecord r;
        r.occupation = occ;
        r.attribute = attribute_name(attr_id);
        r.intended_class = cls.label;
        r.prompt = candidate_prompt(cls, occ);
        r.seed = seed_base + draw;
        try {
          Mat cond = encode_plain(bb, r.prompt);
          SamplerConfig scfg;
          scfg.steps = steps;
          scfg.guidance = guidance;
          scfg.seed = r.seed;
          ConditioningSchedule sched;
          sched.steps = steps;
          sched.segments = {{0, steps, 0}};
          Image img = sample_image(bb, {cond}, sched, scfg);
          std::filesystem::path file = dir / (std::to_string(r.seed) + ".png");
          write_image_png(file, img);
          r.image = std::filesystem::relative(file, root).string();
          r.status = RecordStatus::candidate;
          records.push_back(std::move(r));
        } catch (const Error& e) {
          if (warnings)
            warnings->push_back("candidate " + occ + "/" + cls.label + " seed " +
                                std::to_string(r.seed) + " failed: " + e.what());
        }
      }
    }
  }
  return records;
}

// Face gate: confidence at or above the threshold passes (the boundary is
// accepted). Unreadable images are dropped with a warning, not an error.
inline void filter_faces(std::vector<SampleRecord>& records, const FaceDetector& face,
                         const std::filesystem::path& root, double threshold,
                         std::vector<std::string>* warnings = nullptr) {
  for (auto& r : records) {
    if (r.status != RecordStatus::candidate) continue;
    try {
      Image img = read_image_png(root / r.image);
      r.face_confidence = face.face_confidence(img);
      r.status = r.face_confidence >= threshold ? RecordStatus::face_ok
                                                : RecordStatus::no_face;
    } catch (const std::exception& e) {
      r.status = RecordStatus::no_face;
      if (warnings)
        warnings->push_back("unreadable image " + r.image + ": " + e.what());
    }
  }
}

// Classifies each face-passing record by similarity against per-class
// probe prompts; ties resolve to the first class in taxonomy order. A record
// whose classification disagrees with its intended class is kept but marked,
// and scorer failures queue the record for manual review.
inline void screen_attributes(std::vector<SampleRecord>& records,
                              const SimilarityScorer& scorer, const Taxonomy& tax,
                              AttributeId attr_id, const std::filesystem::path& root,
                              std::vector<std::string>* warnings = nullptr) {
  const SensitiveAttribute& attr = tax.attribute(attr_id);
  for (auto& r : records) {
    if (r.status != RecordStatus::face_ok) continue;
    try {
      Image img = read_image_png(root / r.image);
      int best = 0;
      double best_score = -std::numeric_limits<double>::infinity();
      for (size_t c = 0; c < attr.classes.size(); ++c) {
        std::string probe = std::string(resources::kClassifierPromptPattern);
        probe = detail::replace_first(probe, "{class}", attr.classes[c].prompt_word);
        double s = scorer.score(img, probe);
        if (s > best_score) {  // strict: ties keep the earlier class
          best_score = s;
          best = int(c);
        }
      }
      r.screened_class = attr.classes[size_t(best)].label;
      r.status = r.screened_class == r.intended_class ? RecordStatus::screened
                                                      : RecordStatus::class_mismatch;
    } catch (const std::exception& e) {
      r.status = RecordStatus::pending_manual;
      if (warnings)
        warnings->push_back("screening failed for " + r.image + ": " + e.what());
    }
  }
}

// Applies a reviewer's decisions: {"overrides": {"<image>": "<class|reject>"}}.
// Overrides may rescue pending or mismatched records or reject anything.
inline void apply_manual_overrides(std::vector<SampleRecord>& records,
                                   const std::filesystem::path& override_file,
                                   const Taxonomy& tax, AttributeId attr_id,
                                   std::vector<std::string>* warnings = nullptr) {
  std::ifstream f(override_file);
  require(f.good(), Errc::io, "cannot read overrides: " + override_file.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config, std::string("override parse failed: ") + e.what());
  }
  const SensitiveAttribute& attr = tax.attribute(attr_id);
  const nlohmann::json table = j.value("overrides", nlohmann::json::object());
  std::map<std::string, std::string> overrides;
  for (const auto& [img, val] : table.items()) {
    require(val.is_string(), Errc::config, "override for " + img + " must be a string");
    overrides[img] = val.get<std::string>();
  }

  for (auto& r : records) {
    auto it = overrides.find(r.image);
    if (it == overrides.end()) continue;
    if (it->second == "reject") {
      r.status = RecordStatus::rejected_manual;
    } else {
      attr.class_index(it->second);  // validates the label
      r.screened_class = it->second;
      r.status = RecordStatus::screened;
    }
    overrides.erase(it);
  }
  if (warnings)
    for (const auto& [img, val] : overrides)
      warnings->push_back("override for unknown image: " + img);
}

// Downsamples every (occupation x class) cell to that occupation's smallest
// class count, with a seeded shuffle deciding which records stay. An empty
// cell cannot be balanced away and is a hard error naming the cell.
inline TrainingManifest balance_records(std::vector<SampleRecord> records,
                                        const Taxonomy& tax, AttributeId attr_id,
                                        uint64_t seed, const std::string& backbone_digest) {
  const SensitiveAttribute& attr = tax.attribute(attr_id);

  std::map<std::string, std::map<std::string, std::vector<size_t>>> cells;
  for (size_t i = 0; i < records.size(); ++i)
    if (records[i].status == RecordStatus::screened)
      cells[records[i].occupation][records[i].screened_class].push_back(i);

  require(!cells.empty(), Errc::balance_infeasible, "no screened records to balance");

  std::vector<size_t> keep;
  for (auto& [occ, by_class] : cells) {
    size_t m = std::numeric_limits<size_t>::max();
    for (const auto& cls : attr.classes) {
      auto it = by_class.find(cls.label);
      size_t n = it == by_class.end() ? 0 : it->second.size();
      require(n > 0, Errc::balance_infeasible,
              "cell (" + occ + " x " + cls.label + ") is empty");
      m = std::min(m, n);
    }
    for (const auto& cls : attr.classes) {
      auto& idx = by_class[cls.label];
      auto rng = detail::make_rng(
          {seed, detail::fnv1a64(occ), detail::fnv1a64(cls.label)});
      detail::shuffle_indices(idx, rng);
      for (size_t k = 0; k < m; ++k) keep.push_back(idx[k]);
    }
  }

  TrainingManifest manifest;
  std::map<std::string, int> counts;
  for (size_t i : keep) {
    SampleRecord r = records[i];
    r.status = RecordStatus::selected;
    counts[r.occupation + "/" + r.screened_class] += 1;
    manifest.records.push_back(std::move(r));
  }
  std::sort(manifest.records.begin(), manifest.records.end(),
            [](const SampleRecord& a, const SampleRecord& b) {
              return std::tie(a.occupation, a.screened_class, a.seed) <
                     std::tie(b.occupation, b.screened_class, b.seed);
            });

  manifest.header = {{"kind", "inctok-manifest"},
                     {"version", 1},
                     {"attribute", attribute_name(attr_id)},
                     {"taxonomy_hash", tax.hash()},
                     {"backbone_digest", backbone_digest},
                     {"tool_version", kToolVersion},
                     {"balance_seed", seed},
                     {"counts", counts}};
  return manifest;
}

}  // namespace inctok
