#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "inctok/toy_backbone.hpp"
#include "support.hpp"

using namespace inctok;

TEST_CASE("noise schedule preserves signal plus noise energy") {
  auto sched = NoiseSchedule::linear_beta(1000);
  REQUIRE(sched.total_timesteps == 1000);
  for (int t = 0; t < 1000; t += 37) {
    double a = sched.alpha(t), s = sched.sigma(t);
    CHECK(a * a + s * s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s > 0.0);
  }
  // Signal decays monotonically.
  for (int t = 1; t < 1000; ++t) CHECK(sched.alpha_bar[t] < sched.alpha_bar[t - 1]);
  CHECK_THROWS_AS(sched.check_t(-1), Error);
  CHECK_THROWS_AS(sched.check_t(1000), Error);

  Mat z0 = testsupport::seeded_mat(3, 1, 16);
  Mat eps = testsupport::seeded_mat(4, 1, 16);
  Mat z1 = add_noise(sched, z0, eps, 0);
  // At the first step the sample is still almost the clean latent.
  CHECK(max_abs_diff(z1, z0) < 0.05);
  Mat zT = add_noise(sched, z0, eps, 999);
  // At the last step it is almost pure noise.
  CHECK(max_abs_diff(zT, eps) < 0.3);
}

TEST_CASE("toy tokenizer reserves placeholders and hashes unknown words") {
  ToyBackbone bb;
  const auto& tok = bb.tokenizer();

  auto ids = bb.tokenize("a photo of a <i_g> lumin");
  REQUIRE(ids.size() == 8);  // bos + 6 words + eos
  CHECK(ids.front() == WordTokenizer::kBos);
  CHECK(ids.back() == WordTokenizer::kEos);
  CHECK(bb.is_placeholder_token(ids[5]));
  for (size_t i = 0; i < ids.size(); ++i)
    if (i != 5) CHECK_FALSE(bb.is_placeholder_token(ids[i]));

  // Unknown words fall back to stable hash ids above the vocabulary range.
  auto unknown = bb.tokenize_fragment("astronaut");
  REQUIRE(unknown.size() == 1);
  CHECK(unknown[0] >= WordTokenizer::kHashBase);
  CHECK(bb.tokenize_fragment("astronaut") == unknown);
  CHECK(bb.tokenize_fragment("Astronaut,") == unknown);  // case and punctuation folded

  // Hash-token embeddings are deterministic and finite.
  Mat e1 = bb.embedding_rows(unknown);
  Mat e2 = bb.embedding_rows(unknown);
  CHECK(bit_identical(e1, e2));
  CHECK(all_finite(e1));

  // Prompts longer than the context window are rejected, not truncated.
  std::string huge;
  for (int i = 0; i < 80; ++i) huge += "word" + std::to_string(i) + " ";
  CHECK_THROWS_AS(bb.tokenize(huge), Error);

  CHECK(tok.registered_count() > 0);
}

TEST_CASE("placeholder expansion produces consecutive reserved ids") {
  ToyWorldConfig cfg;
  cfg.placeholder_token_length = 3;
  ToyBackbone bb(cfg);
  auto ids = bb.tokenize_fragment("<i_g>");
  REQUIRE(ids.size() == 3);
  for (int id : ids) CHECK(bb.is_placeholder_token(id));
  CHECK(ids[1] == ids[0] + 1);
  CHECK(ids[2] == ids[0] + 2);
}

TEST_CASE("text transform is deterministic and input-sensitive") {
  ToyBackbone bb;
  Mat a = bb.embedding_rows(bb.tokenize("a photo of a sunlit lumin"));
  Mat b = bb.embedding_rows(bb.tokenize("a photo of a moonlit lumin"));
  Mat ta1 = bb.text_transform_plain(a);
  Mat ta2 = bb.text_transform_plain(a);
  Mat tb = bb.text_transform_plain(b);
  CHECK(bit_identical(ta1, ta2));
  CHECK(max_abs_diff(ta1, tb) > 1e-6);
  CHECK(ta1.rows == a.rows);
  CHECK(ta1.cols == bb.embed_dim());
}

TEST_CASE("denoiser output is conditioning-sensitive and finite") {
  ToyBackbone bb;
  Mat z = testsupport::seeded_mat(9, 1, bb.latent_size());
  Mat ca = bb.text_transform_plain(bb.embedding_rows(bb.tokenize("a photo of a sunlit lumin")));
  Mat cb = bb.text_transform_plain(bb.embedding_rows(bb.tokenize("a photo of a moonlit lumin")));
  Mat ea = bb.predict_noise_plain(z, 500, ca);
  Mat eb = bb.predict_noise_plain(z, 500, cb);
  CHECK(all_finite(ea));
  CHECK(ea.rows == 1);
  CHECK(ea.cols == bb.latent_size());
  CHECK(max_abs_diff(ea, eb) > 1e-9);
  CHECK(bit_identical(bb.predict_noise_plain(z, 500, ca), ea));
}

TEST_CASE("denoiser recovers a mode center exactly under a saturated anchor") {
  ToyBackbone bb;
  const auto& sched = bb.schedule();
  int t = 100;
  // Build the clean latent sitting exactly at the (lumin, class A) center:
  // channel 0 at +attr_level, the rest at the occupation pattern.
  int plane = bb.latent_shape()[1] * bb.latent_shape()[2];
  Mat z0(1, bb.latent_size());
  for (int i = 0; i < plane; ++i) z0.v[i] = bb.config().attr_level;
  const Mat& pat = bb.occupation_pattern(0);
  for (int i = plane; i < bb.latent_size(); ++i) z0.v[i] = pat.v[i];

  Mat z_t = scale_plain(z0, sched.alpha(t));  // zero-noise corruption
  Mat cond =
      bb.text_transform_plain(bb.embedding_rows(bb.tokenize("a photo of a sunlit lumin")));
  Mat eps = bb.predict_noise_plain(z_t, t, cond);
  // The matching mode dominates the gate, and at its center the implied
  // noise is zero.
  for (double e : eps.v) CHECK(std::abs(e) < 1e-8);
}

TEST_CASE("zeroed denoiser weights produce identically zero output") {
  ToyBackbone bb;
  bb.zero_denoiser_weights_for_test();
  Mat z = testsupport::seeded_mat(5, 1, bb.latent_size());
  Mat cond = bb.text_transform_plain(bb.embedding_rows(bb.tokenize("a photo of a lumin")));
  Mat eps = bb.predict_noise_plain(z, 250, cond);
  for (double e : eps.v) CHECK(e == 0.0);
}

TEST_CASE("weights digest pins the world") {
  ToyBackbone a;
  ToyBackbone b;
  CHECK(a.weights_digest() == b.weights_digest());
  CHECK(a.weights_digest().size() == 64);

  ToyWorldConfig cfg;
  cfg.seed = 8;
  ToyBackbone c(cfg);
  CHECK(c.weights_digest() != a.weights_digest());

  ToyBackbone d;
  d.zero_denoiser_weights_for_test();
  CHECK(d.weights_digest() != a.weights_digest());
}

TEST_CASE("latent encode/decode round-trips and images survive png io") {
  ToyBackbone bb;
  auto shape = bb.latent_shape();
  Image img(shape[0], shape[1], shape[2]);
  auto rng = detail::make_rng({99});
  for (auto& v : img.data) v = detail::uniform01(rng) * 1.6 - 0.8;

  Mat z = bb.encode_image(img);
  Image back = bb.decode_latent(z);
  CHECK(back.data == img.data);

  testsupport::TempDir tmp("img");
  write_image_png(tmp.path() / "x.png", img);
  Image loaded = read_image_png(tmp.path() / "x.png");
  REQUIRE(loaded.data.size() == img.data.size());
  double worst = 0;
  for (size_t i = 0; i < img.data.size(); ++i)
    worst = std::max(worst, std::abs(loaded.data[i] - img.data[i]));
  CHECK(worst < 1e-4);  // 16-bit quantization error
}

TEST_CASE("toy oracles agree with the pixel-level attribute rule") {
  ToyBackbone bb;
  auto shape = bb.latent_shape();
  ToyFaceDetector face(bb);
  ToySimilarityScorer sim(bb);

  Image pos(shape[0], shape[1], shape[2]);
  for (int y = 0; y < shape[1]; ++y)
    for (int x = 0; x < shape[2]; ++x) pos.at(0, y, x) = 0.4;
  Image neg = pos;
  for (int y = 0; y < shape[1]; ++y)
    for (int x = 0; x < shape[2]; ++x) neg.at(0, y, x) = -0.4;

  CHECK(face.face_confidence(pos) == 1.0);
  Image bad(1, 2, 2);
  CHECK(face.face_confidence(bad) == 0.0);

  CHECK(bb.attribute_oracle(pos) == 0);
  CHECK(bb.attribute_oracle(neg) == 1);

  // The similarity scorer ranks the matching class word higher.
  CHECK(sim.score(pos, "a photo of a sunlit person") >
        sim.score(pos, "a photo of a moonlit person"));
  CHECK(sim.score(neg, "a photo of a moonlit person") >
        sim.score(neg, "a photo of a sunlit person"));

  // Feature extractor responds most strongly to the matching occupation.
  ToyFeatureExtractor fx(bb);
  Image occ_img(shape[0], shape[1], shape[2]);
  const Mat& pat = bb.occupation_pattern(2);
  for (size_t i = 0; i < occ_img.data.size(); ++i) occ_img.data[i] = pat.v[i];
  auto f = fx.features(occ_img);
  REQUIRE(int(f.size()) == fx.dim());
  for (size_t o = 0; o < bb.config().occupations.size(); ++o)
    if (o != 2) CHECK(f[1 + 2] > f[1 + o]);
}
