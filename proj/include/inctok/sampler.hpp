#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "inctok/backbone.hpp"
#include "inctok/detail/rng.hpp"
#include "inctok/taxonomy.hpp"
#include "inctok/text_pipeline.hpp"

namespace inctok {

// Descending, evenly strided timesteps for deterministic sampling. The
// lowest visited timestep is always 0, so the final update denoises fully.
inline std::vector<int> ddim_timesteps(int total_timesteps, int steps) {
  require(steps >= 1, Errc::config, "sampler needs at least one step");
  require(steps <= total_timesteps, Errc::config,
          "more sampling steps than training timesteps");
  int stride = total_timesteps / steps;
  std::vector<int> ts(static_cast<size_t>(steps), 0);
  for (int i = 0; i < steps; ++i) ts[size_t(steps - 1 - i)] = i * stride;
  return ts;
}

// Which conditioning drives which sampling steps. Segments must tile
// [0, steps) in order, without gaps or overlap.
struct ScheduleSegment {
  int begin = 0;  // inclusive step index
  int end = 0;    // exclusive step index
  int source = 0; // index into the caller's conditioning list
};

struct ConditioningSchedule {
  int steps = 0;
  std::vector<ScheduleSegment> segments;

  void validate(int n_sources) const {
    require(steps >= 1, Errc::schedule, "schedule covers no steps");
    require(!segments.empty(), Errc::schedule, "schedule has no segments");
    int cursor = 0;
    for (const auto& seg : segments) {
      require(seg.begin == cursor, Errc::schedule, "schedule has a gap or overlap");
      require(seg.end > seg.begin, Errc::schedule, "empty schedule segment");
      require(seg.source >= 0 && seg.source < n_sources, Errc::schedule,
              "segment references unknown conditioning");
      cursor = seg.end;
    }
    require(cursor == steps, Errc::schedule, "schedule does not cover all steps");
  }

  int source_at(int step) const {
    for (const auto& seg : segments)
      if (step >= seg.begin && step < seg.end) return seg.source;
    fail(Errc::schedule, "step outside schedule: " + std::to_string(step));
  }
};

// Delayed injection for several attributes at once: each attribute's adapted
// token becomes active after its own delay; earlier steps run with the
// substitutions that are already active (none at first, when every delay is
// positive). Source k of the plan activates `source_active[k]`.
struct InjectionPlan {
  ConditioningSchedule schedule;
  std::vector<std::vector<AttributeId>> source_active;
};

inline InjectionPlan build_injection_plan(
    int steps, const std::vector<std::pair<AttributeId, int>>& delays) {
  require(steps >= 1, Errc::schedule, "plan needs at least one step");
  require(!delays.empty(), Errc::schedule, "plan needs at least one attribute");
  for (const auto& [id, d] : delays) {
    require(d >= 0, Errc::schedule,
            std::string("negative delay for ") + attribute_name(id));
    require(d < steps, Errc::schedule,
            std::string("delay leaves no steps for ") + attribute_name(id) + " (" +
                std::to_string(d) + " >= " + std::to_string(steps) + ")");
  }

  std::vector<int> boundaries{0, steps};
  for (const auto& [id, d] : delays) boundaries.push_back(d);
  std::sort(boundaries.begin(), boundaries.end());
  boundaries.erase(std::unique(boundaries.begin(), boundaries.end()), boundaries.end());

  InjectionPlan plan;
  plan.schedule.steps = steps;
  for (size_t i = 0; i + 1 < boundaries.size(); ++i) {
    int begin = boundaries[i];
    std::vector<AttributeId> active;
    for (const auto& [id, d] : delays)
      if (d <= begin) active.push_back(id);
    plan.schedule.segments.push_back({begin, boundaries[i + 1], int(plan.source_active.size())});
    plan.source_active.push_back(std::move(active));
  }
  plan.schedule.validate(int(plan.source_active.size()));
  return plan;
}

struct SamplerConfig {
  int steps = 25;
  double guidance = 7.5;
  uint64_t seed = 0;
};

// Deterministic latent sampler with classifier-free guidance. The
// unconditional branch always uses the empty prompt's encoding, computed
// here so callers cannot drift from that convention. `conditionings` are
// already transformed sequences; the schedule picks one per step.
inline Mat sample_latent(const Backbone& bb, const std::vector<Mat>& conditionings,
                         const ConditioningSchedule& schedule, const SamplerConfig& cfg) {
  require(!conditionings.empty(), Errc::contract, "no conditionings given");
  schedule.validate(int(conditionings.size()));
  require(schedule.steps == cfg.steps, Errc::schedule,
          "schedule length disagrees with sampler steps");

  const NoiseSchedule& ns = bb.schedule();
  std::vector<int> ts = ddim_timesteps(ns.total_timesteps, cfg.steps);

  auto rng = detail::make_rng({cfg.seed, 0x5a317u});
  Mat z = detail::randn(rng, 1, bb.latent_size(), 1.0);
  Mat uncond = encode_plain(bb, "");

  for (int s = 0; s < cfg.steps; ++s) {
    int t = ts[size_t(s)];
    const Mat& cond = conditionings[size_t(schedule.source_at(s))];
    Mat eps_c = bb.predict_noise_plain(z, t, cond);
    Mat eps_u = bb.predict_noise_plain(z, t, uncond);
    Mat eps = eps_u;
    for (size_t i = 0; i < eps.v.size(); ++i)
      eps.v[i] += cfg.guidance * (eps_c.v[i] - eps_u.v[i]);

    double a = ns.alpha(t), sg = ns.sigma(t);
    Mat z0_hat(1, bb.latent_size());
    for (size_t i = 0; i < z.v.size(); ++i) z0_hat.v[i] = (z.v[i] - sg * eps.v[i]) / a;
    require(all_finite(z0_hat), Errc::numeric, "sampler produced non-finite values");

    if (s + 1 < cfg.steps) {
      int tn = ts[size_t(s + 1)];
      double an = ns.alpha(tn), sn = ns.sigma(tn);
      for (size_t i = 0; i < z.v.size(); ++i) z.v[i] = an * z0_hat.v[i] + sn * eps.v[i];
    } else {
      z = z0_hat;
    }
  }
  return z;
}

inline Image sample_image(const Backbone& bb, const std::vector<Mat>& conditionings,
                          const ConditioningSchedule& schedule, const SamplerConfig& cfg) {
  return bb.decode_latent(sample_latent(bb, conditionings, schedule, cfg));
}

}  // namespace inctok
