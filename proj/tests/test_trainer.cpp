#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>

#include "inctok/trainer.hpp"
#include "inctok/toy_backbone.hpp"
#include "support.hpp"

using namespace inctok;
using testsupport::TempDir;

namespace {

MappingNetworkConfig toy_mapping_config() {
  MappingNetworkConfig cfg;
  cfg.width = 32;
  cfg.heads = 4;
  cfg.blocks = 2;
  cfg.seed = 21;
  return cfg;
}

// A small prepared corpus over two occupations, shared across test cases.
struct TrainFixture {
  ToyBackbone bb;
  Taxonomy tax = Taxonomy::builtin_toy();
  TempDir dir{"trainer"};
  TrainingManifest manifest;

  TrainFixture() {
    std::vector<SampleRecord> recs =
        generate_candidates(bb, tax, AttributeId::gender, {"lumin", "verdo"}, 3,
                            dir.path(), 900, /*steps=*/6, /*guidance=*/3.0);
    ToyFaceDetector face(bb);
    filter_faces(recs, face, dir.path(), 0.97);
    ToySimilarityScorer scorer(bb);
    screen_attributes(recs, scorer, tax, AttributeId::gender, dir.path());
    manifest = balance_records(recs, tax, AttributeId::gender, 5, bb.weights_digest());
  }
};

const TrainFixture& fixture() {
  static TrainFixture f;
  return f;
}

// A corpus over a world where every occupation prefers class A at 0.9, so a
// common directive shift balances all of them at once. Used by the training
// dynamics case.
struct BalanceFixture {
  ToyBackbone bb;
  Taxonomy tax = Taxonomy::builtin_toy();
  TempDir dir{"trainer-balance"};
  TrainingManifest manifest;

  static ToyWorldConfig world() {
    ToyWorldConfig cfg;
    for (auto& [occ, prior] : cfg.class_a_prior) prior = 0.9;
    return cfg;
  }

  BalanceFixture() : bb(world()) {
    std::vector<SampleRecord> recs =
        generate_candidates(bb, tax, AttributeId::gender, {"lumin", "verdo"}, 10,
                            dir.path(), 900, /*steps=*/6, /*guidance=*/3.0);
    ToyFaceDetector face(bb);
    filter_faces(recs, face, dir.path(), 0.97);
    ToySimilarityScorer scorer(bb);
    screen_attributes(recs, scorer, tax, AttributeId::gender, dir.path());
    manifest = balance_records(recs, tax, AttributeId::gender, 5, bb.weights_digest());
  }

  // Share of class A over `n` deterministic generations for one occupation,
  // sampling the conditional model directly (no guidance mixing).
  double share_a(const MappingNetwork& m, const std::string& occ, int n) const {
    PromptLayout lay = analyze_prompt(bb, tax, "a photo of a <i_g> " + occ, occ);
    Tape tape;
    BoundParams p = m.bind(tape, false);
    Var adapted = m.adapt(tape, p, concept_embedding(bb, lay));
    Mat cond = tape.val(
        encode_with_substitution(tape, bb, lay, {{AttributeId::gender, adapted}}));
    ConditioningSchedule sched;
    sched.steps = 25;
    sched.segments = {{0, 25, 0}};
    int a = 0;
    for (int k = 0; k < n; ++k) {
      SamplerConfig sc;
      sc.steps = 25;
      sc.guidance = 1.0;
      sc.seed = 4000 + uint64_t(k) + detail::fnv1a64(occ);
      Mat z0 = sample_latent(bb, {cond}, sched, sc);
      if (bb.attribute_oracle(bb.decode_latent(z0)) == 0) ++a;
    }
    return double(a) / double(n);
  }
};

const BalanceFixture& balance_fixture() {
  static BalanceFixture f;
  return f;
}

// Bias-corrected exponential moving average of the step losses up to `upto`.
double loss_ema_at(const std::vector<StepStats>& history, size_t upto,
                   double decay = 0.99) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < upto && i < history.size(); ++i) {
    num = decay * num + (1.0 - decay) * history[i].loss.total;
    den = decay * den + (1.0 - decay);
  }
  return num / den;
}

TrainConfig quick_config(int repeats, double lr = 5e-3) {
  TrainConfig cfg;
  cfg.learning_rate = lr;
  cfg.dataset_repeats = repeats;
  cfg.seed = 77;
  return cfg;
}

}  // namespace

TEST_CASE("trainer validates manifest, attribute and backbone") {
  const TrainFixture& f = fixture();

  CHECK_THROWS_AS(
      Trainer(f.bb, f.tax, AttributeId::race, f.manifest, f.dir.path(), quick_config(1)),
      Error);

  TrainingManifest wrong = f.manifest;
  wrong.header["backbone_digest"] = "0000";
  try {
    Trainer t(f.bb, f.tax, AttributeId::gender, wrong, f.dir.path(), quick_config(1));
    FAIL("expected provenance error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::provenance);
  }

  TrainingManifest empty = f.manifest;
  empty.records.clear();
  CHECK_THROWS_AS(
      Trainer(f.bb, f.tax, AttributeId::gender, empty, f.dir.path(), quick_config(1)),
      Error);

  TrainingManifest stray = f.manifest;
  stray.records[0].status = RecordStatus::screened;
  CHECK_THROWS_AS(
      Trainer(f.bb, f.tax, AttributeId::gender, stray, f.dir.path(), quick_config(1)),
      Error);

  TrainConfig bad = quick_config(1);
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(
      Trainer(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), bad), Error);
}

TEST_CASE("draws are pure functions of seed, pass and position") {
  const TrainFixture& f = fixture();
  Trainer t(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), quick_config(1));

  StepDraw a = t.draw_at(2, 5);
  StepDraw b = t.draw_at(2, 5);
  CHECK(a.template_index == b.template_index);
  CHECK(a.timestep == b.timestep);
  REQUIRE(a.eps.v.size() == b.eps.v.size());
  for (size_t i = 0; i < a.eps.v.size(); ++i) CHECK(a.eps.v[i] == b.eps.v[i]);

  StepDraw c = t.draw_at(3, 5);
  StepDraw d = t.draw_at(2, 6);
  bool c_differs = c.template_index != a.template_index || c.timestep != a.timestep ||
                   c.eps.v != a.eps.v;
  bool d_differs = d.template_index != a.template_index || d.timestep != a.timestep ||
                   d.eps.v != a.eps.v;
  CHECK(c_differs);
  CHECK(d_differs);

  CHECK(a.timestep >= 0);
  CHECK(a.timestep < f.bb.schedule().total_timesteps);
  CHECK(a.template_index >= 0);
  CHECK(size_t(a.template_index) < f.tax.templates.size());
}

TEST_CASE("training lowers the loss, balances generation and freezes the backbone") {
  const BalanceFixture& f = balance_fixture();
  std::string digest_before = f.bb.weights_digest();

  TrainConfig cfg;  // stock defaults: lr 5e-4, batch 4, 1 epoch x 15 repeats
  cfg.seed = 77;
  Trainer t(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), cfg);
  MappingNetworkConfig mc = toy_mapping_config();
  mc.init_std = 0.18;
  MappingNetwork initial = MappingNetwork::create(mc, f.bb, "someone");
  TrainState state = t.fresh_state(initial);

  // Mean loss over one fixed, never-trained-on draw per record; evaluating
  // the same draws before and after removes the sampling noise that step
  // losses carry.
  auto eval_loss = [&](const MappingNetwork& m) {
    double sum = 0.0;
    for (size_t i = 0; i < f.manifest.records.size(); ++i) {
      Tape tape;
      BoundParams p = m.bind(tape, false);
      sum += tape.scalar(t.record_losses(tape, p, m, i, t.draw_at(999, i)).total);
    }
    return sum / double(f.manifest.records.size());
  };
  double loss_before = eval_loss(initial);
  double lumin_before = f.share_a(initial, "lumin", 40);
  double verdo_before = f.share_a(initial, "verdo", 40);
  CHECK(lumin_before >= 0.8);  // the untrained token inherits the 0.9 prior
  CHECK(verdo_before >= 0.8);

  TempDir out("train-out");
  std::vector<StepStats> history = t.train(state, out.path());

  size_t steps_per_pass = (f.manifest.records.size() + 3) / 4;
  REQUIRE(history.size() == 15 * steps_per_pass);
  CHECK(state.repeats_done == 15);
  CHECK(state.steps_done == int64_t(history.size()));

  // The fixed-draw loss drops: the token picks up the style component all
  // training images share and the directive shift that balances the gate.
  CHECK(eval_loss(state.mapping) < 0.95 * loss_before);

  // Generated class shares move toward one half for every occupation.
  double lumin_after = f.share_a(state.mapping, "lumin", 40);
  double verdo_after = f.share_a(state.mapping, "verdo", 40);
  CHECK(std::abs(lumin_after - 0.5) < std::abs(lumin_before - 0.5) - 0.1);
  CHECK(std::abs(verdo_after - 0.5) < std::abs(verdo_before - 0.5) - 0.1);

  // Step-loss trend: the moving average at the end sits below its value at
  // step 10.
  CHECK(loss_ema_at(history, history.size()) < loss_ema_at(history, 10));

  // The backbone is untouched by a full run.
  CHECK(f.bb.weights_digest() == digest_before);

  // The log holds one line per step.
  std::ifstream log(out.path() / "train_log.jsonl");
  REQUIRE(log.good());
  size_t lines = 0;
  std::string line;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("total"));
    CHECK(j.contains("grad_norm"));
    ++lines;
  }
  CHECK(lines == history.size());
  CHECK(std::filesystem::exists(out.path() / "checkpoint.itkw"));
}

TEST_CASE("token freezing is honored by the optimizer") {
  const TrainFixture& f = fixture();

  MappingNetworkConfig cfg = toy_mapping_config();
  cfg.train_token = false;
  Trainer t(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), quick_config(1));
  TrainState state = t.fresh_state(MappingNetwork::create(cfg, f.bb, "someone"));
  Mat token_before = state.mapping.token_value();

  TempDir out("train-frozen");
  t.train(state, out.path());

  const Mat& token_after = state.mapping.token_value();
  for (size_t i = 0; i < token_before.v.size(); ++i)
    CHECK(token_before.v[i] == token_after.v[i]);

  // Body parameters did move.
  MappingNetwork reference = MappingNetwork::create(cfg, f.bb, "someone");
  CHECK(state.mapping.digest() != reference.digest());
}

TEST_CASE("gradient clipping reports and bounds the applied step") {
  const TrainFixture& f = fixture();

  TrainConfig cfg = quick_config(1);
  cfg.grad_clip = 1e-6;  // force clipping on every step
  Trainer t(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), cfg);
  TrainState state =
      t.fresh_state(MappingNetwork::create(toy_mapping_config(), f.bb, "someone"));
  TempDir out("train-clip");
  auto history = t.train(state, out.path());
  for (const auto& s : history) {
    CHECK(s.clip_scale < 1.0);
    CHECK(s.clip_scale == doctest::Approx(cfg.grad_clip / s.grad_norm));
  }

  TrainConfig loose = quick_config(1);
  loose.grad_clip = 1e9;
  Trainer t2(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), loose);
  TrainState s2 =
      t2.fresh_state(MappingNetwork::create(toy_mapping_config(), f.bb, "someone"));
  TempDir out2("train-noclip");
  for (const auto& s : t2.train(s2, out2.path())) CHECK(s.clip_scale == 1.0);
}

TEST_CASE("checkpoint resume reproduces the straight-through run bit for bit") {
  const TrainFixture& f = fixture();

  // Straight through: four passes in one call.
  Trainer t4(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), quick_config(4));
  TrainState straight =
      t4.fresh_state(MappingNetwork::create(toy_mapping_config(), f.bb, "someone"));
  TempDir out_a("train-straight");
  t4.train(straight, out_a.path());

  // Interrupted: two passes, then resume from the checkpoint for two more.
  Trainer t2(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), quick_config(2));
  TrainState first =
      t2.fresh_state(MappingNetwork::create(toy_mapping_config(), f.bb, "someone"));
  TempDir out_b("train-resumed");
  t2.train(first, out_b.path());

  TrainState resumed = t4.load_checkpoint(out_b.path() / "checkpoint.itkw");
  CHECK(resumed.repeats_done == 2);
  CHECK(resumed.steps_done == first.steps_done);
  t4.train(resumed, out_b.path());

  CHECK(resumed.steps_done == straight.steps_done);
  CHECK(resumed.mapping.digest() == straight.mapping.digest());
  for (const auto& e : straight.mapping.params().entries()) {
    const Mat& other = resumed.mapping.params().at(e.name);
    for (size_t i = 0; i < e.value.v.size(); ++i) CHECK(e.value.v[i] == other.v[i]);
  }

  // Optimizer moments agree too: the final checkpoints store equal tensors.
  Container ca = load_container(out_a.path() / "checkpoint.itkw");
  Container cb = load_container(out_b.path() / "checkpoint.itkw");
  for (const auto& [name, mat] : ca.tensors) {
    const Mat& other = cb.tensor(name);
    REQUIRE(mat.same_shape(other));
    for (size_t i = 0; i < mat.v.size(); ++i) CHECK(mat.v[i] == other.v[i]);
  }
}

TEST_CASE("checkpoint loading rejects foreign or damaged files") {
  const TrainFixture& f = fixture();
  Trainer t(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), quick_config(1));
  TrainState state =
      t.fresh_state(MappingNetwork::create(toy_mapping_config(), f.bb, "someone"));
  TempDir out("ckpt-guards");
  auto path = out.path() / "checkpoint.itkw";
  t.save_checkpoint(state, path);

  auto rewrite_meta = [&](const std::string& key, const nlohmann::json& val,
                          const std::filesystem::path& to) {
    Container c = load_container(path);
    c.meta[key] = val;
    NamedTensorRefs refs;
    for (const auto& name : c.tensor_order) refs.emplace_back(name, &c.tensors.at(name));
    save_container(to, refs, c.meta);
  };

  auto expect_code = [&](const std::filesystem::path& p, Errc code) {
    try {
      t.load_checkpoint(p);
      FAIL_CHECK("expected failure for ", p.filename().string());
    } catch (const Error& e) {
      CHECK(e.code() == code);
    }
  };

  rewrite_meta("backbone_digest", "beef", out.path() / "bb.itkw");
  expect_code(out.path() / "bb.itkw", Errc::provenance);

  rewrite_meta("manifest_hash", "beef", out.path() / "mf.itkw");
  expect_code(out.path() / "mf.itkw", Errc::provenance);

  rewrite_meta("attribute", "race", out.path() / "attr.itkw");
  expect_code(out.path() / "attr.itkw", Errc::checkpoint);

  rewrite_meta("version", 9, out.path() / "ver.itkw");
  expect_code(out.path() / "ver.itkw", Errc::checkpoint);

  rewrite_meta("kind", "other", out.path() / "kind.itkw");
  expect_code(out.path() / "kind.itkw", Errc::checkpoint);

  std::ofstream(out.path() / "junk.itkw") << "not a container";
  CHECK_THROWS_AS(t.load_checkpoint(out.path() / "junk.itkw"), Error);
}

TEST_CASE("non-finite losses abort with a diagnostic dump") {
  const TrainFixture& f = fixture();
  Trainer t(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), quick_config(1));
  TrainState state =
      t.fresh_state(MappingNetwork::create(toy_mapping_config(), f.bb, "someone"));
  state.mapping.token_value().v[0] = std::nan("");

  TempDir out("train-nan");
  try {
    t.train(state, out.path());
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::numeric);
  }
  REQUIRE(std::filesystem::exists(out.path() / "diagnostics.json"));
  std::ifstream df(out.path() / "diagnostics.json");
  nlohmann::json diag;
  df >> diag;
  CHECK(diag.at("step") == 0);
  CHECK(diag.at("batch").size() == 4);
  CHECK(diag.contains("grad_norms"));
}

TEST_CASE("zero anchor weight with a pinned token is plain prompt tuning") {
  // Pin the mapping to the identity (zero final projection) and plant each
  // record's class-word embedding as the token: the inclusive branch then
  // conditions on exactly the anchor prompt's encoding, so the loss must
  // match a hand-built plain prompt-tuning loss on the same draws.
  const TrainFixture& f = fixture();

  TrainConfig cfg = quick_config(1);
  cfg.anchor_weight = 0.0;
  Trainer t(f.bb, f.tax, AttributeId::gender, f.manifest, f.dir.path(), cfg);
  const SensitiveAttribute& attr = f.tax.attribute(AttributeId::gender);

  MappingNetworkConfig mcfg = toy_mapping_config();
  mcfg.final_proj_std = 0.0;

  for (size_t i : {size_t(0), size_t(3), size_t(7)}) {
    const SampleRecord& rec = f.manifest.records[i];
    StepDraw draw = t.draw_at(0, i);

    MappingNetwork pinned = MappingNetwork::create(mcfg, f.bb, "someone");
    pinned.token_value() =
        f.bb.embedding_rows(f.bb.tokenize_fragment(rec.screened_class));

    Tape tape;
    BoundParams p = pinned.bind(tape, true);
    LossTerms terms = t.record_losses(tape, p, pinned, i, draw);
    CHECK_FALSE(terms.has_anchor);
    double inclusive_loss = tape.scalar(terms.total);

    const PromptTemplate& tmpl =
        f.tax.templates[size_t(draw.template_index) % f.tax.templates.size()];
    std::string prompt = build_inclusive_prompt(
        f.tax, tmpl, std::vector<std::string>{attr.placeholder}, rec.occupation);
    const AttributeClass& cls = attr.classes[size_t(attr.class_index(rec.screened_class))];
    std::string anchor_prompt = build_anchor_prompt(prompt, attr, cls);

    Mat z0 = f.bb.encode_image(read_image_png(f.dir.path() / rec.image));
    Mat z_t = add_noise(f.bb.schedule(), z0, draw.eps, draw.timestep);
    Mat pred =
        f.bb.predict_noise_plain(z_t, draw.timestep, encode_plain(f.bb, anchor_prompt));
    double plain = 0.0;
    for (size_t k = 0; k < pred.v.size(); ++k) {
      double d = pred.v[k] - draw.eps.v[k];
      plain += d * d;
    }
    plain /= double(pred.v.size());

    CHECK(std::abs(inclusive_loss - plain) <= 1e-6);
  }
}
