#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "inctok/fairness_eval.hpp"
#include "inctok/toy_backbone.hpp"
#include "support.hpp"

using namespace inctok;
using testsupport::TempDir;

namespace {

AttributeDistribution dist_of(std::vector<int64_t> counts) {
  AttributeDistribution d;
  for (size_t i = 0; i < counts.size(); ++i) d.labels.push_back("c" + std::to_string(i));
  for (int64_t c : counts) d.n_total += c;
  d.counts = std::move(counts);
  return d;
}

// Independent oracle on a different algebraic path: divergence from uniform
// equals ln K minus the Shannon entropy of the empirical distribution.
double kl_oracle(const std::vector<int64_t>& counts) {
  int64_t n = 0;
  for (int64_t c : counts) n += c;
  double h = 0.0;
  for (int64_t c : counts) {
    if (c == 0) continue;
    double p = double(c) / double(n);
    h -= p * std::log(p);
  }
  return std::log(double(counts.size())) - h;
}

// Image shaped like a toy latent decode, with a controlled channel-0 mean.
Image toy_image(double channel0, uint64_t seed) {
  Image img(4, 8, 8);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (double& v : img.data) v = u(rng);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) img.at(0, y, x) = channel0;
  return img;
}

class ConstantScorer : public SimilarityScorer {
 public:
  double score(const Image&, const std::string&) const override { return 0.5; }
};

// Deterministic pseudo-scores; remembers every prompt it was asked about.
class RecordingScorer : public SimilarityScorer {
 public:
  double score(const Image&, const std::string& text) const override {
    seen.push_back(text);
    return double(detail::fnv1a64(text) % 10007) / 10007.0;
  }
  mutable std::vector<std::string> seen;
};

class ScaledScorer : public SimilarityScorer {
 public:
  ScaledScorer(const SimilarityScorer& inner, double factor)
      : inner_(inner), factor_(factor) {}
  double score(const Image& img, const std::string& text) const override {
    return factor_ * inner_.score(img, text);
  }

 private:
  const SimilarityScorer& inner_;
  double factor_;
};

std::vector<std::vector<double>> gaussian_cloud(uint64_t seed, int n, int d) {
  Mat m = testsupport::seeded_mat(seed, n, d);
  std::vector<std::vector<double>> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[size_t(i)].push_back(m.at(i, j));
  return out;
}

}  // namespace

TEST_CASE("divergence from uniform matches an independent entropy oracle") {
  std::mt19937_64 rng(424242);
  for (int k : {2, 6}) {
    std::uniform_int_distribution<int64_t> u(0, 200);
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<int64_t> counts(static_cast<size_t>(k));
      int64_t total = 0;
      for (auto& c : counts) {
        c = u(rng);
        total += c;
      }
      if (total == 0) counts[0] = 1;
      double got = kl_to_uniform(dist_of(counts));
      CHECK(std::abs(got - kl_oracle(counts)) <= 1e-9);
      CHECK(got >= -1e-12);
      CHECK(got <= std::log(double(k)) + 1e-12);
    }
  }
}

TEST_CASE("divergence hand values are exact where the math is exact") {
  CHECK(kl_to_uniform(dist_of({100, 0})) == std::log(2.0));
  CHECK(kl_to_uniform(dist_of({75, 25})) ==
        doctest::Approx(0.13081203594113698).epsilon(1e-12));
  CHECK(kl_to_uniform(dist_of({50, 50})) == 0.0);
  CHECK(kl_to_uniform(dist_of({7, 7})) == 0.0);
  CHECK(kl_to_uniform(dist_of({10, 10, 10, 10, 10, 10})) == 0.0);
  CHECK(kl_to_uniform(dist_of({0, 0, 42, 0, 0, 0})) == std::log(6.0));
}

TEST_CASE("divergence rejects empty distributions and ignores class order") {
  try {
    kl_to_uniform(dist_of({0, 0}));
    FAIL("expected undefined-distribution error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::undefined_distribution);
  }
  CHECK_THROWS_AS(kl_to_uniform(dist_of({5, -1})), Error);

  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int64_t> u(0, 50);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int64_t> counts(6);
    for (auto& c : counts) c = u(rng);
    counts[0] += 1;
    double base = kl_to_uniform(dist_of(counts));
    std::shuffle(counts.begin(), counts.end(), rng);
    CHECK(std::abs(kl_to_uniform(dist_of(counts)) - base) <= 1e-12);
  }
}

TEST_CASE("classification reproduces the toy pixel oracle including ties") {
  ToyBackbone bb;
  Taxonomy tax = Taxonomy::builtin_toy();
  const SensitiveAttribute& gender = tax.attribute(AttributeId::gender);
  ToySimilarityScorer scorer(bb);

  for (int i = 0; i < 24; ++i) {
    double m = (i % 2 == 0 ? 1.0 : -1.0) * (0.02 + 0.03 * i);
    Image img = toy_image(m, 1000 + uint64_t(i));
    double margin = -1.0;
    int got = classify_attribute(img, gender, scorer, &margin);
    CHECK(got == bb.attribute_oracle(img));
    CHECK(margin >= 0.0);
  }

  // Channel-0 mean of exactly zero scores both classes equally; the tie goes
  // to the first class, matching the oracle's >= convention.
  Image flat = toy_image(0.0, 7);
  CHECK(classify_attribute(flat, gender, scorer) == 0);
  CHECK(bb.attribute_oracle(flat) == 0);

  ConstantScorer constant;
  double margin = -1.0;
  CHECK(classify_attribute(flat, gender, constant, &margin) == 0);
  CHECK(margin == 0.0);
}

TEST_CASE("classification consults every class and is scale-invariant") {
  ToyBackbone bb;
  Taxonomy tax = Taxonomy::builtin_toy();
  const SensitiveAttribute& race = tax.attribute(AttributeId::race);
  REQUIRE(race.classes.size() == 6);

  Image img = toy_image(0.2, 11);
  RecordingScorer recorder;
  int got = classify_attribute(img, race, recorder);
  REQUIRE(recorder.seen.size() == 6);
  int expect = 0;
  double best = -1.0;
  for (size_t c = 0; c < race.classes.size(); ++c) {
    std::string probe = detail::replace_first(
        std::string(resources::kClassifierPromptPattern), "{class}",
        race.classes[c].prompt_word);
    CHECK(recorder.seen[c] == probe);
    double s = recorder.score(img, probe);
    if (s > best) {
      best = s;
      expect = int(c);
    }
  }
  CHECK(got == expect);

  ToySimilarityScorer scorer(bb);
  ScaledScorer scaled(scorer, 7.25);
  const SensitiveAttribute& gender = tax.attribute(AttributeId::gender);
  for (int i = 0; i < 16; ++i) {
    Image probe = toy_image(0.3 - 0.04 * i, 2000 + uint64_t(i));
    CHECK(classify_attribute(probe, gender, scorer) ==
          classify_attribute(probe, gender, scaled));
    CHECK(classify_attribute(probe, race, scorer) ==
          classify_attribute(probe, race, scaled));
  }
}

TEST_CASE("alignment is deterministic and prefers the matching occupation") {
  ToyBackbone bb;
  ToySimilarityScorer scorer(bb);

  Mat cond = encode_plain(bb, "a photo of a lumin");
  ConditioningSchedule sched;
  sched.steps = 8;
  sched.segments = {{0, 8, 0}};
  std::vector<Image> images;
  for (int k = 0; k < 6; ++k) {
    SamplerConfig sc;
    sc.steps = 8;
    sc.guidance = 3.0;
    sc.seed = 500 + uint64_t(k);
    images.push_back(sample_image(bb, {cond}, sched, sc));
  }

  double matched = alignment_score(images, "a photo of a lumin", scorer);
  double mismatched = alignment_score(images, "a photo of a verdo", scorer);
  CHECK(matched > mismatched);
  CHECK(alignment_score(images, "a photo of a lumin", scorer) == matched);
  CHECK_THROWS_AS(alignment_score({}, "a photo of a lumin", scorer), Error);
}

TEST_CASE("distance between identical feature sets vanishes and is symmetric") {
  auto a = gaussian_cloud(31, 40, 5);
  auto b = gaussian_cloud(32, 40, 5);

  FidResult same = compute_fid_features(a, a);
  CHECK(std::abs(same.value) <= 1e-6);
  CHECK_FALSE(same.rank_deficient);

  FidResult ab = compute_fid_features(a, b);
  FidResult ba = compute_fid_features(b, a);
  CHECK(ab.value > 0.0);
  CHECK(std::abs(ab.value - ba.value) <= 1e-6);
}

TEST_CASE("distance closed forms: hand-computed scalar case and mean shifts") {
  // One dimension, worked by hand: means 1 and 6, unbiased variances 2 and
  // 8, so the distance is 25 + 2 + 8 - 2*sqrt(16) = 27.
  std::vector<std::vector<double>> a{{0.0}, {2.0}};
  std::vector<std::vector<double>> b{{4.0}, {8.0}};
  double scalar_oracle = (1.0 - 6.0) * (1.0 - 6.0) + 2.0 + 8.0 - 2.0 * std::sqrt(2.0 * 8.0);
  CHECK(scalar_oracle == 27.0);
  CHECK(compute_fid_features(a, b).value == doctest::Approx(27.0).epsilon(1e-9));

  // Equal covariances: shifting a cloud by v moves the distance to |v|^2.
  auto cloud = gaussian_cloud(77, 40, 5);
  auto shifted = cloud;
  for (auto& f : shifted) f[0] += 3.0;
  CHECK(compute_fid_features(cloud, shifted).value == doctest::Approx(9.0).epsilon(1e-6));

  // Single-sample sets have zero covariance: pure mean term.
  std::vector<std::vector<double>> p{{0.0, 0.0}};
  std::vector<std::vector<double>> q{{3.0, 4.0}};
  FidResult point = compute_fid_features(p, q);
  CHECK(point.value == doctest::Approx(25.0).epsilon(1e-9));
  CHECK(point.rank_deficient);
}

TEST_CASE("distance diagnostics: rank flag, empty sets, non-finite features") {
  CHECK(compute_fid_features(gaussian_cloud(1, 4, 5), gaussian_cloud(2, 40, 5))
            .rank_deficient);
  CHECK(compute_fid_features(gaussian_cloud(3, 5, 5), gaussian_cloud(4, 40, 5))
            .rank_deficient);
  CHECK_FALSE(compute_fid_features(gaussian_cloud(5, 6, 5), gaussian_cloud(6, 40, 5))
                  .rank_deficient);

  try {
    compute_fid_features({}, gaussian_cloud(7, 4, 2));
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::config);
  }

  auto bad = gaussian_cloud(8, 4, 2);
  bad[1][0] = std::numeric_limits<double>::quiet_NaN();
  try {
    compute_fid_features(bad, gaussian_cloud(9, 4, 2));
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::numeric);
  }

  // Finite inputs whose covariance overflows: surfaced as a numeric error
  // rather than a silent non-finite result.
  std::vector<std::vector<double>> huge{{0.0}, {2e200}};
  try {
    compute_fid_features(huge, gaussian_cloud(10, 4, 1));
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::numeric);
  }
}

TEST_CASE("run evaluation classifies, aggregates and reports provenance") {
  ToyBackbone bb;
  Taxonomy tax = Taxonomy::builtin_toy();
  TempDir dir{"fairness-run"};

  MappingNetworkConfig mc;
  mc.width = 32;
  mc.heads = 4;
  mc.blocks = 2;
  mc.seed = 21;
  MappingNetwork mapping = MappingNetwork::create(mc, bb, tax.init_word);
  MappingSet mappings{{AttributeId::gender, &mapping}};

  GenerationConfig gcfg;
  gcfg.images_per_concept = 6;
  gcfg.steps = 8;
  gcfg.guidance = 3.0;
  gcfg.seed_base = 7000;
  ToyFaceDetector face(bb);
  std::filesystem::path run_dir = dir.path() / "run";
  generate_run(bb, tax, mappings, {"lumin", "verdo"}, gcfg, run_dir, &face);

  ToySimilarityScorer scorer(bb);
  EvalConfig cfg;
  cfg.attribute = AttributeId::gender;
  cfg.occupations = {"lumin", "verdo", "ghost"};
  FairnessReport report = evaluate_run(run_dir, tax, cfg, scorer);

  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[0].present);
  CHECK(report.rows[1].present);
  CHECK_FALSE(report.rows[2].present);
  bool warned = false;
  for (const auto& w : report.warnings)
    if (w.find("ghost") != std::string::npos) warned = true;
  CHECK(warned);

  double kl_sum = 0.0, align_sum = 0.0;
  for (int i = 0; i < 2; ++i) {
    const auto& row = report.rows[size_t(i)];
    CHECK(row.distribution.n_total == 6);
    int64_t sum = 0;
    for (int64_t c : row.distribution.counts) sum += c;
    CHECK(sum == row.distribution.n_total);
    CHECK(row.d_kl == kl_to_uniform(row.distribution));
    CHECK(row.mean_margin >= 0.0);
    kl_sum += row.d_kl;
    align_sum += row.alignment;
  }
  CHECK(report.mean_d_kl == doctest::Approx(kl_sum / 2.0).epsilon(1e-12));
  CHECK(report.mean_alignment == doctest::Approx(align_sum / 2.0).epsilon(1e-12));
  CHECK_FALSE(report.fid.has_value());
  CHECK(report.provenance["taxonomy_hash"] == tax.hash());
  CHECK(report.provenance["run"]["backbone_digest"] == bb.weights_digest());

  // Pooling only one occupation against its own directory as the reference:
  // the two Gaussian fits coincide, and the small set trips the rank flag.
  ToyFeatureExtractor fx(bb);
  EvalConfig fid_cfg;
  fid_cfg.attribute = AttributeId::gender;
  fid_cfg.occupations = {"lumin"};
  fid_cfg.reference_dir = run_dir / "lumin";
  FairnessReport fid_report = evaluate_run(run_dir, tax, fid_cfg, scorer, &fx);
  REQUIRE(fid_report.fid.has_value());
  CHECK(std::abs(fid_report.fid->value) <= 1e-6);
  CHECK(fid_report.fid->rank_deficient);
  CHECK(fid_report.provenance.contains("reference_digest"));

  try {
    evaluate_run(run_dir, tax, fid_cfg, scorer, nullptr);
    FAIL("expected config error without a feature extractor");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::config);
  }

  write_report(report, dir.path() / "report");
  std::ifstream jf(dir.path() / "report" / "fairness_report.json");
  nlohmann::json parsed = nlohmann::json::parse(jf);
  CHECK(parsed["kind"] == "inctok-fairness-report");
  CHECK(parsed["aggregate"]["mean_d_kl"] == report.mean_d_kl);
  CHECK(parsed["rows"].size() == 3);
  std::ifstream tf(dir.path() / "report" / "fairness_report.txt");
  std::string table((std::istreambuf_iterator<char>(tf)),
                    std::istreambuf_iterator<char>());
  CHECK(table.find("occupation") != std::string::npos);
  CHECK(table.find("D_KL (down)") != std::string::npos);
  CHECK(table.find("align (up)") != std::string::npos);
  CHECK(table.find("FID (down)") != std::string::npos);
  CHECK(table.find("absent") != std::string::npos);
}

TEST_CASE("a run forced to one class shows the full divergence") {
  ToyBackbone bb;
  Taxonomy tax = Taxonomy::builtin_toy();
  TempDir dir{"fairness-forced"};

  std::filesystem::path run_dir = dir.path() / "run";
  std::filesystem::create_directories(run_dir / "lumin");
  for (int i = 0; i < 5; ++i)
    write_image_png(run_dir / "lumin" / (std::to_string(i) + ".png"),
                    toy_image(0.4, 3000 + uint64_t(i)));

  ToySimilarityScorer scorer(bb);
  EvalConfig cfg;
  cfg.attribute = AttributeId::gender;
  cfg.occupations = {"lumin"};
  FairnessReport report = evaluate_run(run_dir, tax, cfg, scorer);

  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].distribution.counts[0] == 5);
  CHECK(report.rows[0].distribution.counts[1] == 0);
  CHECK(report.rows[0].d_kl == std::log(2.0));
  CHECK(report.mean_d_kl == std::log(2.0));
  bool warned = false;
  for (const auto& w : report.warnings)
    if (w.find("run.json") != std::string::npos) warned = true;
  CHECK(warned);

  EvalConfig empty_cfg;
  empty_cfg.occupations = {"ghost"};
  try {
    evaluate_run(run_dir, tax, empty_cfg, scorer);
    FAIL("expected undefined-distribution error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::undefined_distribution);
  }
}
