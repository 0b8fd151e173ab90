// End-to-end walkthrough of the toolkit on the toy backbone: prepare a
// balanced corpus, train the inclusive token with stock settings, then
// compare the generated class distribution against the untrained baseline.
// Exits nonzero unless training reduces the median divergence.
#include <cstdio>
#include <filesystem>

#include "inctok/toy_backbone.hpp"
#include "inctok/trainer.hpp"

using namespace inctok;

namespace {

double kl_to_uniform_counts(const std::vector<int>& counts) {
  int total = 0;
  for (int c : counts) total += c;
  double kl = 0.0;
  double k = double(counts.size());
  for (int c : counts) {
    if (c == 0) continue;
    double p = double(c) / double(total);
    kl += p * std::log(p * k);
  }
  return kl;
}

}  // namespace

int main() {
  // A world where every occupation prefers class A at 0.9, so the prompt
  // "a photo of a <i_g> {occupation}" needs one directive shift to balance.
  ToyWorldConfig world;
  for (auto& [occ, prior] : world.class_a_prior) prior = 0.9;
  ToyBackbone bb(world);
  Taxonomy tax = Taxonomy::builtin_toy();
  std::vector<std::string> occupations = tax.concepts.train_occupations;

  auto root = std::filesystem::temp_directory_path() / "inctok-pipeline-demo";
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root);

  // Stage 1: candidate generation, face filter, attribute screening,
  // per-occupation balancing.
  std::vector<SampleRecord> records = generate_candidates(
      bb, tax, AttributeId::gender, occupations, /*per_combo=*/10, root,
      /*seed_base=*/900, /*steps=*/25, /*guidance=*/3.0);
  ToyFaceDetector face(bb);
  filter_faces(records, face, root, /*threshold=*/0.97);
  ToySimilarityScorer scorer(bb);
  screen_attributes(records, scorer, tax, AttributeId::gender, root);
  TrainingManifest manifest =
      balance_records(records, tax, AttributeId::gender, /*seed=*/5, bb.weights_digest());
  std::printf("manifest: %zu balanced records\n", manifest.records.size());

  // Divergence of generated class counts from uniform, averaged over the
  // training occupations. Sampling runs the conditional model directly.
  auto measure = [&](const MappingNetwork* mapping, uint64_t seed_base) {
    double kl_sum = 0.0;
    for (const auto& occ : occupations) {
      std::vector<int> counts(2, 0);
      Mat cond;
      if (mapping != nullptr) {
        PromptLayout layout = analyze_prompt(bb, tax, "a photo of a <i_g> " + occ, occ);
        Tape tape;
        BoundParams params = mapping->bind(tape, false);
        Var adapted = mapping->adapt(tape, params, concept_embedding(bb, layout));
        cond = tape.val(
            encode_with_substitution(tape, bb, layout, {{AttributeId::gender, adapted}}));
      } else {
        cond = encode_plain(bb, "a photo of a " + occ);
      }
      ConditioningSchedule sched;
      sched.steps = 25;
      sched.segments = {{0, 25, 0}};
      for (int k = 0; k < 50; ++k) {
        SamplerConfig sc;
        sc.steps = 25;
        sc.guidance = 1.0;
        sc.seed = seed_base + uint64_t(k) + detail::fnv1a64(occ);
        Mat z0 = sample_latent(bb, {cond}, sched, sc);
        counts[size_t(bb.attribute_oracle(bb.decode_latent(z0)))] += 1;
      }
      kl_sum += kl_to_uniform_counts(counts);
    }
    return kl_sum / double(occupations.size());
  };

  // Stage 2: train with stock settings (lr 5e-4, batch 4, 1 epoch x 15
  // repeats, anchor weight 1) for three seeds and compare distributions.
  std::vector<double> reductions;
  for (uint64_t seed : {101ull, 202ull, 303ull}) {
    double baseline = measure(nullptr, seed);

    TrainConfig cfg;
    cfg.seed = seed;
    cfg.log_steps = false;
    Trainer trainer(bb, tax, AttributeId::gender, manifest, root, cfg);
    MappingNetworkConfig mc;
    mc.width = 32;
    mc.heads = 4;
    mc.blocks = 2;
    mc.init_std = 0.18;
    mc.seed = seed;
    TrainState state = trainer.fresh_state(MappingNetwork::create(mc, bb, "someone"));
    trainer.train(state, root / ("run-" + std::to_string(seed)));

    double trained = measure(&state.mapping, seed);
    double reduction = 100.0 * (baseline - trained) / baseline;
    reductions.push_back(reduction);
    std::printf("seed %llu: baseline %.4f  trained %.4f  reduction %.1f%%\n",
                (unsigned long long)seed, baseline, trained, reduction);
  }
  std::sort(reductions.begin(), reductions.end());
  double median = reductions[1];
  std::printf("median reduction %.1f%%\n", median);
  if (median <= 0.0) {
    std::printf("FAIL: training did not reduce the divergence\n");
    return 1;
  }
  std::printf("OK\n");
  return 0;
}
