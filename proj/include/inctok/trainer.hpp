#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "inctok/data_prep.hpp"
#include "inctok/mapping_network.hpp"
#include "inctok/objectives.hpp"
#include "inctok/text_pipeline.hpp"

namespace inctok {

struct TrainConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-2;
  double grad_clip = 1.0;  // global-norm ceiling; 0 disables clipping
  int batch_size = 4;
  int epochs = 1;
  int dataset_repeats = 15;
  double anchor_weight = 1.0;
  uint64_t seed = 0;
  bool log_steps = true;

  void validate() const {
    require(learning_rate > 0.0, Errc::config, "learning_rate must be positive");
    require(beta1 > 0.0 && beta1 < 1.0, Errc::config, "beta1 must lie in (0, 1)");
    require(beta2 > 0.0 && beta2 < 1.0, Errc::config, "beta2 must lie in (0, 1)");
    require(adam_eps > 0.0, Errc::config, "adam_eps must be positive");
    require(weight_decay >= 0.0, Errc::config, "weight_decay must be >= 0");
    require(grad_clip >= 0.0, Errc::config, "grad_clip must be >= 0");
    require(batch_size >= 1, Errc::config, "batch_size must be >= 1");
    require(epochs >= 1, Errc::config, "epochs must be >= 1");
    require(dataset_repeats >= 1, Errc::config, "dataset_repeats must be >= 1");
    require(anchor_weight >= 0.0, Errc::config, "anchor_weight must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"learning_rate", learning_rate},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"weight_decay", weight_decay},
            {"grad_clip", grad_clip},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"dataset_repeats", dataset_repeats},
            {"anchor_weight", anchor_weight},
            {"seed", seed},
            {"log_steps", log_steps}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
      c.learning_rate = j.value("learning_rate", c.learning_rate);
      c.beta1 = j.value("beta1", c.beta1);
      c.beta2 = j.value("beta2", c.beta2);
      c.adam_eps = j.value("adam_eps", c.adam_eps);
      c.weight_decay = j.value("weight_decay", c.weight_decay);
      c.grad_clip = j.value("grad_clip", c.grad_clip);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.epochs = j.value("epochs", c.epochs);
      c.dataset_repeats = j.value("dataset_repeats", c.dataset_repeats);
      c.anchor_weight = j.value("anchor_weight", c.anchor_weight);
      c.seed = j.value("seed", c.seed);
      c.log_steps = j.value("log_steps", c.log_steps);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::config, std::string("train config parse failed: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// Decoupled-weight-decay Adam over a ParamStore. Decay touches only entries
// whose decay flag is set (matrix weights), never biases, norms or the token.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamStore& params, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& e : params.entries()) {
      m_[e.name] = Mat(e.value.rows, e.value.cols);
      v_[e.name] = Mat(e.value.rows, e.value.cols);
    }
  }

  int64_t step_count() const { return t_; }

  void step(ParamStore& params, const std::map<std::string, Mat>& grads) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (auto& e : params.entries()) {
      auto git = grads.find(e.name);
      require(git != grads.end(), Errc::contract, "missing gradient for " + e.name);
      const Mat& g = git->second;
      require(g.same_shape(e.value), Errc::contract, "gradient shape mismatch");
      Mat& m = m_.at(e.name);
      Mat& v = v_.at(e.name);
      for (size_t i = 0; i < g.v.size(); ++i) {
        m.v[i] = cfg_.beta1 * m.v[i] + (1.0 - cfg_.beta1) * g.v[i];
        v.v[i] = cfg_.beta2 * v.v[i] + (1.0 - cfg_.beta2) * g.v[i] * g.v[i];
        double mhat = m.v[i] / bc1;
        double vhat = v.v[i] / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg_.adam_eps);
        if (e.decay) upd += cfg_.weight_decay * e.value.v[i];
        e.value.v[i] -= cfg_.learning_rate * upd;
      }
    }
  }

  NamedTensorRefs tensor_refs(std::vector<Mat>& storage) const {
    // Moment tensors under stable names; `storage` keeps them alive for the
    // caller's save_container call.
    NamedTensorRefs refs;
    storage.clear();
    storage.reserve(m_.size() * 2);
    for (const auto& [name, mat] : m_) {
      storage.push_back(mat);
      refs.emplace_back("adam.m." + name, &storage.back());
    }
    for (const auto& [name, mat] : v_) {
      storage.push_back(mat);
      refs.emplace_back("adam.v." + name, &storage.back());
    }
    return refs;
  }

  void restore(const Container& c, const ParamStore& params, int64_t steps) {
    for (const auto& e : params.entries()) {
      const Mat& sm = c.tensor("adam.m." + e.name);
      const Mat& sv = c.tensor("adam.v." + e.name);
      require(sm.same_shape(e.value) && sv.same_shape(e.value), Errc::checkpoint,
              "optimizer moment shape mismatch for " + e.name);
      m_[e.name] = sm;
      v_[e.name] = sv;
    }
    t_ = steps;
  }

  void configure(const TrainConfig& cfg) { cfg_ = cfg; }

 private:
  TrainConfig cfg_;
  std::map<std::string, Mat> m_, v_;
  int64_t t_ = 0;
};

// Everything a resumable run carries: the trainable state, the optimizer
// moments and the position in the repeat schedule.
struct TrainState {
  MappingNetwork mapping;
  AdamW optimizer;
  int repeats_done = 0;  // completed (epoch, repeat) passes
  int64_t steps_done = 0;
};

// One deterministic draw per record visit. Keyed by (seed, pass, position)
// so a resumed run regenerates the identical stream without replaying it.
struct StepDraw {
  int template_index = 0;
  int timestep = 0;
  Mat eps;
};

inline StepDraw draw_for_position(uint64_t seed, int pass, size_t position,
                                  size_t template_count, int train_timesteps,
                                  int latent_size) {
  auto rng = detail::make_rng({seed, 0xd4a0ull, uint64_t(pass), position});
  StepDraw d;
  d.template_index = int(detail::bounded_uint(rng, uint64_t(template_count)));
  d.timestep = int(detail::bounded_uint(rng, uint64_t(train_timesteps)));
  d.eps = detail::randn(rng, 1, latent_size, 1.0);
  return d;
}

inline std::vector<size_t> epoch_order(uint64_t seed, int pass, size_t n) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  auto rng = detail::make_rng({seed, 0x0e90cull, uint64_t(pass)});
  detail::shuffle_indices(order, rng);
  return order;
}

struct StepStats {
  int pass = 0;
  int64_t step = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;   // before clipping
  double clip_scale = 1.0;  // 1 when the step was not clipped
};

namespace detail_trainer {

inline double global_norm(const std::map<std::string, Mat>& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double x : g.v) sq += x * x;
  return std::sqrt(sq);
}

inline void dump_diagnostics(const std::filesystem::path& dir, const StepStats& s,
                             const std::vector<size_t>& batch,
                             const std::vector<SampleRecord>& records,
                             const std::map<std::string, Mat>& grads) {
  nlohmann::json j;
  j["pass"] = s.pass;
  j["step"] = s.step;
  j["denoise"] = s.loss.denoise;
  j["anchor"] = s.loss.anchor;
  j["total"] = s.loss.total;
  j["grad_norm"] = s.grad_norm;
  nlohmann::json batch_json = nlohmann::json::array();
  for (size_t i : batch) batch_json.push_back(records[i].to_json());
  j["batch"] = batch_json;
  nlohmann::json norms;
  for (const auto& [name, g] : grads) {
    double sq = 0.0;
    for (double x : g.v) sq += x * x;
    norms[name] = std::sqrt(sq);
  }
  j["grad_norms"] = norms;
  std::ofstream f(dir / "diagnostics.json", std::ios::trunc);
  if (f.good()) f << j.dump(2) << "\n";
}

}  // namespace detail_trainer

// Optimizes the mapping (and optionally its token) over a balanced manifest
// with the combined objective. The backbone is a frozen oracle: none of its
// weights appear on the tape as trainable leaves, so its digest is invariant
// across a run. Checkpoints are written per completed pass and at the end.
class Trainer {
 public:
  Trainer(const Backbone& bb, const Taxonomy& tax, AttributeId attr_id,
          const TrainingManifest& manifest, const std::filesystem::path& dataset_root,
          TrainConfig cfg)
      : bb_(bb), tax_(tax), attr_id_(attr_id), manifest_(manifest),
        root_(dataset_root), cfg_(cfg) {
    cfg_.validate();
    require(!manifest_.records.empty(), Errc::config, "manifest has no records");
    require(manifest_.header.value("attribute", "") == attribute_name(attr_id),
            Errc::config, "manifest attribute disagrees with the requested one");
    std::string md = manifest_.header.value("backbone_digest", "");
    require(md == bb_.weights_digest(), Errc::provenance,
            "manifest was prepared against a different backbone");
    require(!tax_.templates.empty(), Errc::config, "taxonomy has no templates");
    for (const auto& r : manifest_.records) {
      require(r.status == RecordStatus::selected, Errc::config,
              "manifest contains unselected records");
      tax_.attribute(attr_id_).class_index(r.screened_class);
    }
    latents_.reserve(manifest_.records.size());
    for (const auto& r : manifest_.records)
      latents_.push_back(bb_.encode_image(read_image_png(root_ / r.image)));
  }

  // Loss of one record visit on a caller-supplied tape. Exposed so tests can
  // replay the exact stream the trainer consumes.
  LossTerms record_losses(Tape& tape, const BoundParams& p,
                          const MappingNetwork& mapping, size_t record_index,
                          const StepDraw& draw) const {
    const SampleRecord& rec = manifest_.records[record_index];
    const SensitiveAttribute& attr = tax_.attribute(attr_id_);
    const PromptTemplate& tmpl =
        tax_.templates[size_t(draw.template_index) % tax_.templates.size()];
    std::string inclusive =
        build_inclusive_prompt(tax_, tmpl, std::vector<std::string>{attr.placeholder},
                               rec.occupation);
    PromptLayout layout = analyze_prompt(bb_, tax_, inclusive, rec.occupation);
    Var adapted = mapping.adapt(tape, p, concept_embedding(bb_, layout));
    Var cond = encode_with_substitution(tape, bb_, layout, {{attr_id_, adapted}});

    std::optional<Mat> anchor;
    if (cfg_.anchor_weight > 0.0) {
      const AttributeClass& cls = attr.classes[size_t(attr.class_index(rec.screened_class))];
      anchor = encode_plain(bb_, build_anchor_prompt(inclusive, attr, cls));
    }
    return build_losses(tape, bb_, latents_[record_index], draw.eps, draw.timestep,
                        cond, anchor, cfg_.anchor_weight);
  }

  StepDraw draw_at(int pass, size_t position) const {
    return draw_for_position(cfg_.seed, pass, position, tax_.templates.size(),
                             bb_.schedule().total_timesteps, bb_.latent_size());
  }

  // Runs passes [state.repeats_done, epochs x dataset_repeats). Returns
  // per-step statistics in order. Throws Errc::numeric on a non-finite
  // loss or gradient after writing a diagnostic dump.
  std::vector<StepStats> train(TrainState& state, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    require(state.mapping.config().width == bb_.embed_dim(), Errc::config,
            "mapping width disagrees with backbone");

    std::ofstream log;
    if (cfg_.log_steps) {
      log.open(out_dir / "train_log.jsonl", std::ios::app);
      require(log.good(), Errc::io, "cannot open training log");
    }

    const int total_passes = cfg_.epochs * cfg_.dataset_repeats;
    const size_t n = manifest_.records.size();
    std::vector<StepStats> history;

    for (int pass = state.repeats_done; pass < total_passes; ++pass) {
      std::vector<size_t> order = epoch_order(cfg_.seed, pass, n);
      for (size_t start = 0; start < n; start += size_t(cfg_.batch_size)) {
        size_t end = std::min(n, start + size_t(cfg_.batch_size));
        std::vector<size_t> batch(order.begin() + long(start), order.begin() + long(end));

        Tape tape;
        BoundParams p = state.mapping.bind(tape, true);
        Var total{};
        LossBreakdown sum;
        for (size_t k = start; k < end; ++k) {
          StepDraw draw = draw_at(pass, k);
          LossTerms terms = record_losses(tape, p, state.mapping, order[k], draw);
          LossBreakdown lb = measure_losses(tape, terms);
          sum.denoise += lb.denoise;
          sum.anchor += lb.anchor;
          total = total.valid() ? tape.add(total, terms.total) : terms.total;
        }
        double inv = 1.0 / double(end - start);
        total = tape.scale(total, inv);
        sum.denoise *= inv;
        sum.anchor *= inv;
        sum.total = tape.scalar(total);
        tape.backward(total);

        std::map<std::string, Mat> grads;
        for (const auto& e : state.mapping.params().entries())
          grads[e.name] = tape.grad(p.at(e.name));

        StepStats stats;
        stats.pass = pass;
        stats.step = state.steps_done;
        stats.loss = sum;
        stats.grad_norm = detail_trainer::global_norm(grads);

        bool finite = std::isfinite(sum.total) && std::isfinite(stats.grad_norm);
        if (!finite) {
          detail_trainer::dump_diagnostics(out_dir, stats, batch, manifest_.records,
                                           grads);
          fail(Errc::numeric, "non-finite loss or gradient at step " +
                                  std::to_string(state.steps_done) +
                                  "; diagnostics written");
        }

        if (cfg_.grad_clip > 0.0 && stats.grad_norm > cfg_.grad_clip) {
          stats.clip_scale = cfg_.grad_clip / stats.grad_norm;
          for (auto& [name, g] : grads)
            for (double& x : g.v) x *= stats.clip_scale;
        }

        state.optimizer.step(state.mapping.params(), grads);
        state.steps_done += 1;

        if (cfg_.log_steps) {
          nlohmann::json line = {{"pass", pass},
                                 {"step", stats.step},
                                 {"denoise", sum.denoise},
                                 {"anchor", sum.anchor},
                                 {"total", sum.total},
                                 {"grad_norm", stats.grad_norm},
                                 {"clip_scale", stats.clip_scale}};
          log << line.dump() << "\n";
        }
        history.push_back(stats);
      }
      state.repeats_done = pass + 1;
      save_checkpoint(state, out_dir / "checkpoint.itkw");
    }
    return history;
  }

  void save_checkpoint(const TrainState& state, const std::filesystem::path& path) const {
    NamedTensorRefs refs = state.mapping.params().tensor_refs();
    std::vector<Mat> storage;
    NamedTensorRefs moments = state.optimizer.tensor_refs(storage);
    refs.insert(refs.end(), moments.begin(), moments.end());

    nlohmann::json meta;
    meta["kind"] = "inctok-train-checkpoint";
    meta["version"] = 1;
    meta["mapping_config"] = state.mapping.config().to_json();
    meta["train_config"] = cfg_.to_json();
    meta["attribute"] = attribute_name(attr_id_);
    meta["repeats_done"] = state.repeats_done;
    meta["steps_done"] = state.steps_done;
    meta["backbone_digest"] = bb_.weights_digest();
    meta["taxonomy_hash"] = tax_.hash();
    meta["manifest_hash"] = manifest_.hash();
    meta["tool_version"] = kToolVersion;
    save_container(path, refs, meta);
  }

  TrainState load_checkpoint(const std::filesystem::path& path) const {
    Container c = load_container(path);
    require(c.meta.value("kind", "") == "inctok-train-checkpoint", Errc::checkpoint,
            "not a training checkpoint: " + path.string());
    require(c.meta.value("version", 0) == 1, Errc::checkpoint,
            "unsupported checkpoint version");
    require(c.meta.value("backbone_digest", "") == bb_.weights_digest(),
            Errc::provenance, "checkpoint was trained against a different backbone");
    require(c.meta.value("manifest_hash", "") == manifest_.hash(), Errc::provenance,
            "checkpoint was trained against a different manifest");
    require(c.meta.value("attribute", "") == attribute_name(attr_id_), Errc::checkpoint,
            "checkpoint attribute disagrees with the requested one");

    TrainState state;
    state.mapping = MappingNetwork::from_container(c);
    state.repeats_done = c.meta.value("repeats_done", 0);
    state.steps_done = c.meta.value("steps_done", int64_t(0));
    state.optimizer = AdamW(state.mapping.params(), cfg_);
    state.optimizer.restore(c, state.mapping.params(), state.steps_done);
    return state;
  }

  TrainState fresh_state(const MappingNetwork& mapping) const {
    TrainState state;
    state.mapping = mapping;
    state.optimizer = AdamW(state.mapping.params(), cfg_);
    return state;
  }

  const TrainConfig& config() const { return cfg_; }
  const TrainingManifest& manifest() const { return manifest_; }

 private:
  const Backbone& bb_;
  Taxonomy tax_;
  AttributeId attr_id_;
  TrainingManifest manifest_;
  std::filesystem::path root_;
  TrainConfig cfg_;
  std::vector<Mat> latents_;
};

}  // namespace inctok
