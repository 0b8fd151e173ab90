#pragma once

#include <string>
#include <vector>

#include "inctok/backbone.hpp"

namespace inctok {

// Pluggable perception components. The toy backbone provides exact oracles;
// a full-scale deployment wires in external detectors via sidecar files.

class FaceDetector {
 public:
  virtual ~FaceDetector() = default;
  // Confidence in [0, 1] that the image contains exactly the kind of
  // subject the pipeline wants. Unreadable input maps to 0.
  virtual double face_confidence(const Image& img) const = 0;
};

class SimilarityScorer {
 public:
  virtual ~SimilarityScorer() = default;
  // Higher means the image matches the text better. Must be deterministic.
  virtual double score(const Image& img, const std::string& text) const = 0;
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual int dim() const = 0;
  virtual std::vector<double> features(const Image& img) const = 0;
};

}  // namespace inctok
