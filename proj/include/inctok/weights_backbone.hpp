#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "inctok/backbone.hpp"
#include "inctok/detail/rng.hpp"
#include "inctok/detail/strings.hpp"
#include "inctok/serialize.hpp"
#include "inctok/toy_backbone.hpp"

namespace inctok {

// Backbone loaded from a local model directory. The directory holds
// backbone.json (architecture, vocabulary, placeholders) and weights.itkw
// (every tensor, in the container format this toolkit uses everywhere).
// The adapter is model-agnostic: any checkpoint converted into this layout
// loads through the same code path, at any width. Weights are frozen after
// load; the digest seals them.
//
// Architecture implemented over the loaded tensors:
//   text encoder   pre-norm self-attention transformer over embedding rows
//                  plus learned positions, with a final layer norm
//   denoiser       latent projection + sinusoidal time embedding, then
//                  pre-norm blocks of cross-attention (latent query over the
//                  conditioning rows) and a feed-forward, then a projection
//                  back to latent space
//   latent codec   affine encode/decode pair between image and latent space
//   scheduler      alpha_bar table stored as a tensor
struct WeightsBackboneSpec {
  int embed_dim = 32;
  int context_length = 77;
  int latent_c = 4, latent_h = 8, latent_w = 8;
  int image_c = 1, image_h = 16, image_w = 16;
  int timesteps = 1000;
  int text_blocks = 2;
  int text_heads = 4;
  int text_hidden_mult = 4;
  int denoise_blocks = 2;
  int denoise_hidden = 64;
  int denoise_heads = 4;
  int denoise_hidden_mult = 4;
  int time_features = 16;  // sinusoidal pairs; the embedding has twice this width
  double filler_norm = 0.2;
  uint64_t filler_seed = 11;
  double default_guidance = 7.5;
  std::vector<std::string> vocabulary;
  std::vector<std::pair<std::string, int>> placeholders;  // word, expansion

  int latent_n() const { return latent_c * latent_h * latent_w; }
  int image_n() const { return image_c * image_h * image_w; }

  void validate() const {
    require(embed_dim >= 1, Errc::config, "embed_dim must be positive");
    require(context_length >= 3, Errc::config, "context must cover bos + word + eos");
    require(latent_c >= 1 && latent_h >= 1 && latent_w >= 1, Errc::config,
            "latent shape must be positive");
    require(image_c >= 1 && image_c <= 4 && image_h >= 1 && image_w >= 1, Errc::config,
            "image shape must be positive with at most 4 channels");
    require(latent_n() <= image_n(), Errc::config,
            "latent cannot be larger than the image it encodes");
    require(timesteps >= 1, Errc::config, "timesteps must be positive");
    require(text_blocks >= 1 && denoise_blocks >= 1, Errc::config,
            "both stacks need at least one block");
    require(text_heads >= 1 && embed_dim % text_heads == 0, Errc::config,
            "embed_dim must be divisible by text_heads");
    require(denoise_heads >= 1 && denoise_hidden % denoise_heads == 0, Errc::config,
            "denoise_hidden must be divisible by denoise_heads");
    require(text_hidden_mult >= 1 && denoise_hidden_mult >= 1, Errc::config,
            "hidden multipliers must be positive");
    require(time_features >= 1, Errc::config, "time_features must be positive");
    require(filler_norm >= 0.0, Errc::config, "filler_norm must be non-negative");
    require(!vocabulary.empty(), Errc::config, "vocabulary must not be empty");
    for (const auto& [word, expansion] : placeholders) {
      require(!word.empty(), Errc::config, "placeholder word must be non-empty");
      require(expansion >= 1, Errc::config, "placeholder expansion must be >= 1");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json ph = nlohmann::json::array();
    for (const auto& [word, expansion] : placeholders)
      ph.push_back({{"word", word}, {"expansion", expansion}});
    return {{"embed_dim", embed_dim},
            {"context_length", context_length},
            {"latent", {latent_c, latent_h, latent_w}},
            {"image", {image_c, image_h, image_w}},
            {"timesteps", timesteps},
            {"text_blocks", text_blocks},
            {"text_heads", text_heads},
            {"text_hidden_mult", text_hidden_mult},
            {"denoise_blocks", denoise_blocks},
            {"denoise_hidden", denoise_hidden},
            {"denoise_heads", denoise_heads},
            {"denoise_hidden_mult", denoise_hidden_mult},
            {"time_features", time_features},
            {"filler_norm", filler_norm},
            {"filler_seed", filler_seed},
            {"default_guidance", default_guidance},
            {"vocabulary", vocabulary},
            {"placeholders", ph}};
  }

  static WeightsBackboneSpec from_json(const nlohmann::json& j) {
    WeightsBackboneSpec s;
    try {
      s.embed_dim = j.at("embed_dim").get<int>();
      s.context_length = j.at("context_length").get<int>();
      auto lat = j.at("latent");
      s.latent_c = lat.at(0).get<int>();
      s.latent_h = lat.at(1).get<int>();
      s.latent_w = lat.at(2).get<int>();
      auto im = j.at("image");
      s.image_c = im.at(0).get<int>();
      s.image_h = im.at(1).get<int>();
      s.image_w = im.at(2).get<int>();
      s.timesteps = j.at("timesteps").get<int>();
      s.text_blocks = j.at("text_blocks").get<int>();
      s.text_heads = j.at("text_heads").get<int>();
      s.text_hidden_mult = j.at("text_hidden_mult").get<int>();
      s.denoise_blocks = j.at("denoise_blocks").get<int>();
      s.denoise_hidden = j.at("denoise_hidden").get<int>();
      s.denoise_heads = j.at("denoise_heads").get<int>();
      s.denoise_hidden_mult = j.at("denoise_hidden_mult").get<int>();
      s.time_features = j.at("time_features").get<int>();
      s.filler_norm = j.at("filler_norm").get<double>();
      s.filler_seed = j.at("filler_seed").get<uint64_t>();
      s.default_guidance = j.at("default_guidance").get<double>();
      s.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
      for (const auto& p : j.at("placeholders"))
        s.placeholders.emplace_back(p.at("word").get<std::string>(),
                                    p.at("expansion").get<int>());
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::config, std::string("backbone manifest parse failed: ") + e.what());
    }
    s.validate();
    return s;
  }
};

inline constexpr const char* kBackboneManifestName = "backbone.json";
inline constexpr const char* kBackboneWeightsName = "weights.itkw";

class WeightsBackbone : public Backbone {
 public:
  // Builds a seeded instance of the architecture. This is how demo and test
  // model directories are made; a converted real checkpoint replaces every
  // tensor with exported values instead.
  static WeightsBackbone random_init(WeightsBackboneSpec spec, uint64_t seed) {
    spec.validate();
    WeightsBackbone bb(std::move(spec));
    for (const auto& [name, rows, cols] : bb.expected_tensors())
      bb.tensors_.emplace_back(name, bb.init_tensor(name, rows, cols, seed));
    bb.finish_setup();
    return bb;
  }

  static WeightsBackbone load(const std::filesystem::path& dir) {
    std::ifstream mf(dir / kBackboneManifestName);
    require(mf.good(), Errc::io,
            "cannot read " + (dir / kBackboneManifestName).string());
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::config, std::string("backbone manifest is not valid JSON: ") + e.what());
    }
    require(manifest.value("kind", "") == "inctok-backbone", Errc::config,
            "manifest kind is not inctok-backbone");
    require(manifest.value("version", 0) == 1, Errc::config,
            "unsupported backbone manifest version");
    WeightsBackbone bb(WeightsBackboneSpec::from_json(manifest.at("spec")));

    Container c = load_container(dir / kBackboneWeightsName);
    std::string expect_digest =
        detail::sha256_hex(bb.spec_.to_json().dump());
    require(c.meta.value("spec_digest", "") == expect_digest, Errc::provenance,
            "weights container was exported for a different manifest");

    auto expected = bb.expected_tensors();
    require(c.tensor_order.size() == expected.size(), Errc::checkpoint,
            "weights container holds " + std::to_string(c.tensor_order.size()) +
                " tensors, expected " + std::to_string(expected.size()));
    for (const auto& [name, rows, cols] : expected) {
      const Mat& m = c.tensor(name);
      require(m.rows == rows && m.cols == cols, Errc::checkpoint,
              "tensor " + name + " has shape " + std::to_string(m.rows) + "x" +
                  std::to_string(m.cols) + ", expected " + std::to_string(rows) +
                  "x" + std::to_string(cols));
      require(all_finite(m), Errc::checkpoint, "tensor " + name + " is not finite");
      bb.tensors_.emplace_back(name, m);
    }
    bb.finish_setup();
    return bb;
  }

  void export_model_dir(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = {{"kind", "inctok-backbone"},
                               {"version", 1},
                               {"spec", spec_.to_json()}};
    std::ofstream mf(dir / kBackboneManifestName, std::ios::trunc);
    require(mf.good(), Errc::io, "cannot write backbone manifest");
    mf << manifest.dump(2) << "\n";

    NamedTensorRefs refs;
    for (const auto& [name, m] : tensors_) refs.emplace_back(name, &m);
    nlohmann::json meta = {{"kind", "inctok-backbone-weights"},
                           {"spec_digest", detail::sha256_hex(spec_.to_json().dump())}};
    save_container(dir / kBackboneWeightsName, refs, meta);
  }

  const WeightsBackboneSpec& spec() const { return spec_; }

  // ---- Backbone interface ------------------------------------------------

  int embed_dim() const override { return spec_.embed_dim; }
  int context_length() const override { return spec_.context_length; }
  std::array<int, 3> latent_shape() const override {
    return {spec_.latent_c, spec_.latent_h, spec_.latent_w};
  }
  const NoiseSchedule& schedule() const override { return sched_; }

  std::vector<int> tokenize(const std::string& text) const override {
    std::vector<int> ids{WordTokenizer::kBos};
    auto body = tok_.encode_words(text);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(WordTokenizer::kEos);
    require(int(ids.size()) <= spec_.context_length, Errc::contract,
            "prompt exceeds context window (" + std::to_string(ids.size()) + " > " +
                std::to_string(spec_.context_length) + " tokens)");
    return ids;
  }

  std::vector<int> tokenize_fragment(const std::string& text) const override {
    return tok_.encode_words(text);
  }

  bool is_placeholder_token(int id) const override { return tok_.is_placeholder_id(id); }

  Mat embedding_rows(const std::vector<int>& ids) const override {
    const Mat& table = tensor("embed.table");
    Mat rows(int(ids.size()), spec_.embed_dim);
    for (size_t i = 0; i < ids.size(); ++i) {
      int id = ids[i];
      if (id >= WordTokenizer::kHashBase) {
        Mat filler = filler_vector(uint64_t(id));
        for (int c = 0; c < spec_.embed_dim; ++c) rows.at(int(i), c) = filler.at(0, c);
        continue;
      }
      require(id >= 0 && id < table.rows, Errc::contract, "token id out of range");
      for (int c = 0; c < spec_.embed_dim; ++c) rows.at(int(i), c) = table.at(id, c);
    }
    return rows;
  }

  Var text_transform(Tape& tape, Var rows) const override {
    int n = tape.val(rows).rows;
    require(n >= 1, Errc::contract, "empty sequence");
    require(n <= spec_.context_length, Errc::contract, "sequence exceeds context");
    require(tape.val(rows).cols == spec_.embed_dim, Errc::contract,
            "embedding width mismatch");

    const Mat& pos = tensor("text.pos");
    Mat pos_n(n, spec_.embed_dim);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < spec_.embed_dim; ++c) pos_n.at(r, c) = pos.at(r, c);
    Var x = tape.add(rows, tape.constant(pos_n));

    for (int b = 0; b < spec_.text_blocks; ++b) {
      std::string pre = "text.blk" + std::to_string(b) + ".";
      Var n1 = norm(tape, pre + "ln1", x);
      x = tape.add(x, attention(tape, pre + "attn.", n1, n1, spec_.text_heads));
      Var n2 = norm(tape, pre + "ln2", x);
      x = tape.add(x, feed_forward(tape, pre + "mlp.", n2));
    }
    return norm(tape, "text.final", x);
  }

  Var predict_noise(Tape& tape, const Mat& z_t, int t, Var cond) const override {
    require(z_t.rows == 1 && z_t.cols == spec_.latent_n(), Errc::contract,
            "z_t must be 1 x latent_size");
    sched_.check_t(t);
    require(tape.val(cond).cols == spec_.embed_dim, Errc::config,
            "conditioning width mismatch");

    Var h = tape.add_rowvec(tape.matmul(tape.constant(z_t), tape.constant(tensor("denoise.in.w"))),
                            tape.constant(tensor("denoise.in.b")));
    h = tape.add_rowvec(h, tape.constant(time_embedding(t)));

    for (int b = 0; b < spec_.denoise_blocks; ++b) {
      std::string pre = "denoise.blk" + std::to_string(b) + ".";
      Var n1 = norm(tape, pre + "ln1", h);
      h = tape.add(h, attention(tape, pre + "attn.", n1, cond, spec_.denoise_heads));
      Var n2 = norm(tape, pre + "ln2", h);
      h = tape.add(h, feed_forward(tape, pre + "mlp.", n2));
    }
    return tape.add_rowvec(tape.matmul(h, tape.constant(tensor("denoise.out.w"))),
                           tape.constant(tensor("denoise.out.b")));
  }

  Mat encode_image(const Image& img) const override {
    require(img.channels == spec_.image_c && img.height == spec_.image_h &&
                img.width == spec_.image_w,
            Errc::contract, "image shape does not match the codec");
    Mat flat(1, spec_.image_n());
    for (int i = 0; i < spec_.image_n(); ++i) flat.v[size_t(i)] = img.data[size_t(i)];
    return add_plain(matmul_plain(flat, tensor("codec.enc.w")), tensor("codec.enc.b"));
  }

  Image decode_latent(const Mat& z) const override {
    require(z.rows == 1 && z.cols == spec_.latent_n(), Errc::contract,
            "latent shape mismatch");
    Mat flat = add_plain(matmul_plain(z, tensor("codec.dec.w")), tensor("codec.dec.b"));
    Image img(spec_.image_c, spec_.image_h, spec_.image_w);
    for (int i = 0; i < spec_.image_n(); ++i) img.data[size_t(i)] = flat.v[size_t(i)];
    return img;
  }

  void collect_weights(NamedTensorRefs& out) const override {
    for (const auto& [name, m] : tensors_) out.emplace_back(name, &m);
  }

  nlohmann::json describe() const override {
    return {{"kind", "weights-dir"}, {"spec", spec_.to_json()}};
  }

 private:
  explicit WeightsBackbone(WeightsBackboneSpec spec) : spec_(std::move(spec)) {
    for (const auto& w : spec_.vocabulary)
      tok_.register_word(WordTokenizer::clean_word(w));
    for (const auto& [word, expansion] : spec_.placeholders)
      tok_.register_placeholder(word, expansion);
  }

  // Canonical tensor inventory: one source of truth for init, load
  // validation, digesting and export.
  std::vector<std::tuple<std::string, int, int>> expected_tensors() const {
    int w = spec_.embed_dim;
    int hid = spec_.denoise_hidden;
    std::vector<std::tuple<std::string, int, int>> e;
    e.emplace_back("embed.table", tok_.registered_count(), w);
    e.emplace_back("sched.alpha_bar", 1, spec_.timesteps);
    e.emplace_back("text.pos", spec_.context_length, w);
    for (int b = 0; b < spec_.text_blocks; ++b) {
      std::string pre = "text.blk" + std::to_string(b) + ".";
      e.emplace_back(pre + "ln1.gain", 1, w);
      e.emplace_back(pre + "ln1.bias", 1, w);
      e.emplace_back(pre + "attn.wq", w, w);
      e.emplace_back(pre + "attn.wk", w, w);
      e.emplace_back(pre + "attn.wv", w, w);
      e.emplace_back(pre + "attn.wo", w, w);
      e.emplace_back(pre + "attn.bq", 1, w);
      e.emplace_back(pre + "attn.bk", 1, w);
      e.emplace_back(pre + "attn.bv", 1, w);
      e.emplace_back(pre + "attn.bo", 1, w);
      e.emplace_back(pre + "ln2.gain", 1, w);
      e.emplace_back(pre + "ln2.bias", 1, w);
      e.emplace_back(pre + "mlp.w1", w, spec_.text_hidden_mult * w);
      e.emplace_back(pre + "mlp.b1", 1, spec_.text_hidden_mult * w);
      e.emplace_back(pre + "mlp.w2", spec_.text_hidden_mult * w, w);
      e.emplace_back(pre + "mlp.b2", 1, w);
    }
    e.emplace_back("text.final.gain", 1, w);
    e.emplace_back("text.final.bias", 1, w);

    e.emplace_back("denoise.time.freq", 1, spec_.time_features);
    e.emplace_back("denoise.time.w1", 2 * spec_.time_features, hid);
    e.emplace_back("denoise.time.b1", 1, hid);
    e.emplace_back("denoise.time.w2", hid, hid);
    e.emplace_back("denoise.time.b2", 1, hid);
    e.emplace_back("denoise.in.w", spec_.latent_n(), hid);
    e.emplace_back("denoise.in.b", 1, hid);
    for (int b = 0; b < spec_.denoise_blocks; ++b) {
      std::string pre = "denoise.blk" + std::to_string(b) + ".";
      e.emplace_back(pre + "ln1.gain", 1, hid);
      e.emplace_back(pre + "ln1.bias", 1, hid);
      e.emplace_back(pre + "attn.wq", hid, hid);
      e.emplace_back(pre + "attn.wk", w, hid);
      e.emplace_back(pre + "attn.wv", w, hid);
      e.emplace_back(pre + "attn.wo", hid, hid);
      e.emplace_back(pre + "attn.bq", 1, hid);
      e.emplace_back(pre + "attn.bk", 1, hid);
      e.emplace_back(pre + "attn.bv", 1, hid);
      e.emplace_back(pre + "attn.bo", 1, hid);
      e.emplace_back(pre + "ln2.gain", 1, hid);
      e.emplace_back(pre + "ln2.bias", 1, hid);
      e.emplace_back(pre + "mlp.w1", hid, spec_.denoise_hidden_mult * hid);
      e.emplace_back(pre + "mlp.b1", 1, spec_.denoise_hidden_mult * hid);
      e.emplace_back(pre + "mlp.w2", spec_.denoise_hidden_mult * hid, hid);
      e.emplace_back(pre + "mlp.b2", 1, hid);
    }
    e.emplace_back("denoise.out.w", hid, spec_.latent_n());
    e.emplace_back("denoise.out.b", 1, spec_.latent_n());

    e.emplace_back("codec.enc.w", spec_.image_n(), spec_.latent_n());
    e.emplace_back("codec.enc.b", 1, spec_.latent_n());
    e.emplace_back("codec.dec.w", spec_.latent_n(), spec_.image_n());
    e.emplace_back("codec.dec.b", 1, spec_.image_n());
    return e;
  }

  Mat init_tensor(const std::string& name, int rows, int cols, uint64_t seed) const {
    auto ends_with = [&](std::string_view suf) {
      return name.size() >= suf.size() &&
             name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (name == "sched.alpha_bar") {
      NoiseSchedule s = NoiseSchedule::linear_beta(spec_.timesteps);
      Mat m(1, spec_.timesteps);
      for (int t = 0; t < spec_.timesteps; ++t) m.v[size_t(t)] = s.alpha_bar[size_t(t)];
      return m;
    }
    if (name == "denoise.time.freq") {
      Mat m(1, cols);
      for (int i = 0; i < cols; ++i)
        m.v[size_t(i)] = std::exp(-std::log(10000.0) * double(i) / double(cols));
      return m;
    }
    if (name == "codec.dec.w") return orthonormal_rows(rows, cols, seed);
    if (name == "codec.enc.w") return transpose_plain(orthonormal_rows(cols, rows, seed));
    if (ends_with(".gain")) return Mat(rows, cols, 1.0);
    for (std::string_view suf : {".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2",
                                 "in.b", "out.b", "enc.b", "dec.b"})
      if (ends_with(suf)) return Mat(rows, cols);
    auto rng = detail::make_rng({seed, 0x9a7bu, detail::fnv1a64(name)});
    if (name == "text.pos") return detail::randn(rng, rows, cols, 0.01);
    if (name == "embed.table") return detail::randn(rng, rows, cols, 0.02);
    return detail::randn(rng, rows, cols, 1.0 / std::sqrt(double(rows)));
  }

  // Rows made orthonormal by Gram-Schmidt, so the random codec restores any
  // latent exactly: encode(decode(z)) = z.
  static Mat orthonormal_rows(int rows, int cols, uint64_t seed) {
    require(rows <= cols, Errc::config, "cannot orthonormalize more rows than columns");
    auto rng = detail::make_rng({seed, 0xc0dec5u});
    Mat m = detail::randn(rng, rows, cols, 1.0);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < i; ++j) {
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += m.at(i, c) * m.at(j, c);
        for (int c = 0; c < cols; ++c) m.at(i, c) -= dot * m.at(j, c);
      }
      double norm = 0.0;
      for (int c = 0; c < cols; ++c) norm += m.at(i, c) * m.at(i, c);
      norm = std::sqrt(norm);
      require(norm > 1e-9, Errc::config, "degenerate codec row");
      for (int c = 0; c < cols; ++c) m.at(i, c) /= norm;
    }
    return m;
  }

  void finish_setup() {
    const Mat& ab = tensor("sched.alpha_bar");
    sched_.total_timesteps = spec_.timesteps;
    sched_.alpha_bar.assign(ab.v.begin(), ab.v.end());
    double prev = 1.0;
    for (double a : sched_.alpha_bar) {
      require(a > 0.0 && a <= 1.0, Errc::config, "alpha_bar values must lie in (0, 1]");
      require(a <= prev + 1e-12, Errc::config, "alpha_bar must be non-increasing");
      prev = a;
    }
    require(tensor("embed.table").rows == tok_.registered_count(), Errc::checkpoint,
            "embedding table rows disagree with vocabulary size");
  }

  const Mat& tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors_)
      if (n == name) return m;
    fail(Errc::contract, "unknown tensor: " + name);
  }

  Mat filler_vector(uint64_t tag) const {
    auto rng = detail::make_rng({spec_.filler_seed, 0xf111e5u, tag});
    double std = spec_.filler_norm / std::sqrt(double(spec_.embed_dim));
    return detail::randn(rng, 1, spec_.embed_dim, std);
  }

  Mat time_embedding(int t) const {
    const Mat& freq = tensor("denoise.time.freq");
    Mat tf(1, 2 * spec_.time_features);
    for (int i = 0; i < spec_.time_features; ++i) {
      tf.v[size_t(i)] = std::sin(double(t) * freq.v[size_t(i)]);
      tf.v[size_t(spec_.time_features + i)] = std::cos(double(t) * freq.v[size_t(i)]);
    }
    Mat h = add_plain(matmul_plain(tf, tensor("denoise.time.w1")), tensor("denoise.time.b1"));
    for (double& x : h.v) x = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    return add_plain(matmul_plain(h, tensor("denoise.time.w2")), tensor("denoise.time.b2"));
  }

  Var norm(Tape& tape, const std::string& name, Var x) const {
    return tape.layer_norm(x, tape.constant(tensor(name + ".gain")),
                           tape.constant(tensor(name + ".bias")));
  }

  Var feed_forward(Tape& tape, const std::string& pre, Var x) const {
    Var h = tape.gelu(tape.add_rowvec(tape.matmul(x, tape.constant(tensor(pre + "w1"))),
                                      tape.constant(tensor(pre + "b1"))));
    return tape.add_rowvec(tape.matmul(h, tape.constant(tensor(pre + "w2"))),
                           tape.constant(tensor(pre + "b2")));
  }

  // Multi-head attention with queries from `q_src` and keys/values from
  // `kv_src` (identical for self-attention, conditioning rows for the
  // denoiser's cross-attention).
  Var attention(Tape& tape, const std::string& pre, Var q_src, Var kv_src,
                int heads) const {
    const Mat& wq = tensor(pre + "wq");
    int width = wq.cols;
    int dh = width / heads;
    Var q = tape.add_rowvec(tape.matmul(q_src, tape.constant(wq)),
                            tape.constant(tensor(pre + "bq")));
    Var k = tape.add_rowvec(tape.matmul(kv_src, tape.constant(tensor(pre + "wk"))),
                            tape.constant(tensor(pre + "bk")));
    Var v = tape.add_rowvec(tape.matmul(kv_src, tape.constant(tensor(pre + "wv"))),
                            tape.constant(tensor(pre + "bv")));
    Var out{};
    bool first = true;
    for (int h = 0; h < heads; ++h) {
      Var qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
      Var kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
      Var vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
      Var scores =
          tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / std::sqrt(double(dh)));
      Var ctx = tape.matmul(tape.row_softmax(scores), vh);
      out = first ? ctx : tape.concat_cols(out, ctx);
      first = false;
    }
    return tape.add_rowvec(tape.matmul(out, tape.constant(tensor(pre + "wo"))),
                           tape.constant(tensor(pre + "bo")));
  }

  WeightsBackboneSpec spec_;
  WordTokenizer tok_;
  NoiseSchedule sched_;
  std::vector<std::pair<std::string, Mat>> tensors_;
};

}  // namespace inctok
