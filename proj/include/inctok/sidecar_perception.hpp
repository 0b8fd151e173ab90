#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "inctok/detail/sha256.hpp"
#include "inctok/interfaces.hpp"

namespace inctok {

// Perception from sidecar files. Real deployments score images with
// external models (a contrastive image-text scorer, a face detector, a
// feature network); their outputs are written next to each image as
// <name>.perception.json and loaded here behind the standard interfaces:
//
//   {
//     "scores": {"<exact prompt text>": similarity, ...},
//     "features": [f0, f1, ...],            // optional
//     "face_confidence": 0.99               // optional
//   }
//
// Images are matched by a fingerprint of their decoded pixels, so the same
// PNG read anywhere resolves to its sidecar regardless of path.
inline std::string image_fingerprint(const Image& img) {
  require(img.well_formed(), Errc::contract, "cannot fingerprint a malformed image");
  std::string bytes;
  bytes.reserve(12 + img.data.size() * sizeof(double));
  auto push_int = [&](int v) {
    char buf[sizeof(int)];
    std::memcpy(buf, &v, sizeof(int));
    bytes.append(buf, sizeof(int));
  };
  push_int(img.channels);
  push_int(img.height);
  push_int(img.width);
  bytes.append(reinterpret_cast<const char*>(img.data.data()),
               img.data.size() * sizeof(double));
  return detail::sha256_hex(bytes);
}

class SidecarPerception {
 public:
  // Scans `root` recursively for <name>.png with <name>.perception.json and
  // indexes each pair by the image's pixel fingerprint.
  static SidecarPerception load(const std::filesystem::path& root) {
    SidecarPerception p;
    require(std::filesystem::exists(root), Errc::io,
            "perception root does not exist: " + root.string());
    for (auto it = std::filesystem::recursive_directory_iterator(root);
         it != std::filesystem::recursive_directory_iterator(); ++it) {
      if (it->path().extension() != ".png") continue;
      std::filesystem::path side = it->path();
      side.replace_extension(".perception.json");
      if (!std::filesystem::exists(side)) continue;
      std::ifstream f(side);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(f);
      } catch (const nlohmann::json::exception& e) {
        fail(Errc::config, "sidecar " + side.string() + " is not valid JSON: " + e.what());
      }
      Entry entry;
      nlohmann::json scores = j.value("scores", nlohmann::json::object());
      for (const auto& [prompt, value] : scores.items())
        entry.scores[prompt] = value.get<double>();
      if (j.contains("features"))
        entry.features = j.at("features").get<std::vector<double>>();
      entry.face_confidence = j.value("face_confidence", 1.0);
      p.entries_[image_fingerprint(read_image_png(it->path()))] = std::move(entry);
    }
    return p;
  }

  size_t size() const { return entries_.size(); }

  double score(const Image& img, const std::string& text) const {
    const Entry& e = entry(img);
    auto it = e.scores.find(text);
    require(it != e.scores.end(), Errc::config,
            "sidecar has no score for prompt '" + text +
                "'; regenerate sidecars with every evaluation prompt");
    return it->second;
  }

  const std::vector<double>& features(const Image& img) const {
    const Entry& e = entry(img);
    require(!e.features.empty(), Errc::config,
            "sidecar carries no feature vector for this image");
    return e.features;
  }

  double face_confidence(const Image& img) const {
    auto it = entries_.find(image_fingerprint(img));
    return it == entries_.end() ? 0.0 : it->second.face_confidence;
  }

 private:
  struct Entry {
    std::map<std::string, double> scores;
    std::vector<double> features;
    double face_confidence = 1.0;
  };

  const Entry& entry(const Image& img) const {
    auto it = entries_.find(image_fingerprint(img));
    require(it != entries_.end(), Errc::config,
            "image has no perception sidecar; score it with the external "
            "models and write <name>.perception.json next to the PNG");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

class SidecarScorer : public SimilarityScorer {
 public:
  explicit SidecarScorer(const SidecarPerception& p) : p_(p) {}
  double score(const Image& img, const std::string& text) const override {
    return p_.score(img, text);
  }

 private:
  const SidecarPerception& p_;
};

class SidecarFeatureExtractor : public FeatureExtractor {
 public:
  SidecarFeatureExtractor(const SidecarPerception& p, int dim) : p_(p), dim_(dim) {
    require(dim >= 1, Errc::config, "feature dimension must be positive");
  }
  int dim() const override { return dim_; }
  std::vector<double> features(const Image& img) const override {
    const std::vector<double>& f = p_.features(img);
    require(int(f.size()) == dim_, Errc::config,
            "sidecar feature vector has dimension " + std::to_string(f.size()) +
                ", expected " + std::to_string(dim_));
    return f;
  }

 private:
  const SidecarPerception& p_;
  int dim_;
};

class SidecarFaceDetector : public FaceDetector {
 public:
  explicit SidecarFaceDetector(const SidecarPerception& p) : p_(p) {}
  double face_confidence(const Image& img) const override {
    return p_.face_confidence(img);
  }

 private:
  const SidecarPerception& p_;
};

}  // namespace inctok
