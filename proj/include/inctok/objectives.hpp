#pragma once

#include <optional>

#include "inctok/autodiff.hpp"
#include "inctok/backbone.hpp"

namespace inctok {

// Loss pieces of one training example. `anchor` is zero when no anchor
// conditioning was supplied (or when the weight disables it).
struct LossTerms {
  Var denoise{};
  Var anchor{};
  Var total{};
  bool has_anchor = false;
};

struct LossBreakdown {
  double denoise = 0.0;
  double anchor = 0.0;
  double total = 0.0;
};

// Builds the per-example objective on the tape.
//
// The denoising term scores the noise prediction under the adapted
// conditioning against the drawn noise. The anchor term pulls the same
// prediction toward the frozen prediction under the anchor prompt's
// conditioning; that target is computed outside the tape, so no gradient
// ever flows into the anchor branch. Both terms share one (noise, timestep)
// draw and therefore one corrupted latent.
//
// With anchor_weight == 0 the anchor branch is skipped entirely: the total
// is the denoising term itself, not a sum with a zero-scaled extra node.
inline LossTerms build_losses(Tape& tape, const Backbone& bb, const Mat& z0, const Mat& eps,
                              int t, Var cond_adapted, const std::optional<Mat>& cond_anchor,
                              double anchor_weight) {
  require(anchor_weight >= 0.0, Errc::config, "anchor weight must be >= 0");
  require(z0.same_shape(eps), Errc::contract, "noise shape must match latent shape");

  Mat z_t = add_noise(bb.schedule(), z0, eps, t);
  Var pred = bb.predict_noise(tape, z_t, t, cond_adapted);

  LossTerms terms;
  terms.denoise = tape.mse(pred, tape.constant(eps));
  if (cond_anchor.has_value() && anchor_weight > 0.0) {
    Mat anchor_target = bb.predict_noise_plain(z_t, t, *cond_anchor);
    terms.anchor = tape.mse(pred, tape.constant(anchor_target));
    terms.total = tape.add(terms.denoise, tape.scale(terms.anchor, anchor_weight));
    terms.has_anchor = true;
  } else {
    terms.anchor = tape.constant(Mat(1, 1, 0.0));
    terms.total = terms.denoise;
  }
  return terms;
}

inline LossBreakdown measure_losses(const Tape& tape, const LossTerms& terms) {
  LossBreakdown b;
  b.denoise = tape.scalar(terms.denoise);
  b.anchor = tape.scalar(terms.anchor);
  b.total = tape.scalar(terms.total);
  return b;
}

}  // namespace inctok
