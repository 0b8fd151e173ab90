#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "inctok/backbone.hpp"
#include "inctok/detail/rng.hpp"
#include "inctok/detail/strings.hpp"
#include "inctok/interfaces.hpp"

namespace inctok {

// Word-level tokenizer with a registered vocabulary. Unknown words fall
// back to deterministic hash-derived ids, so arbitrary prompts tokenize;
// their embeddings are procedural filler vectors. Placeholder words are
// reserved: each expands to `placeholder_token_length` consecutive ids.
struct PlaceholderTokenInfo {
  std::string word;
  std::vector<int> ids;
};

class WordTokenizer {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;
  static constexpr int kFirstWordId = 3;
  static constexpr int kHashBase = 1 << 20;

  WordTokenizer() = default;

  int register_word(const std::string& word) {
    auto it = word_to_id_.find(word);
    if (it != word_to_id_.end()) return it->second;
    int id = next_id_++;
    require(id < kHashBase, Errc::contract, "vocabulary overflow");
    word_to_id_.emplace(word, id);
    return id;
  }

  void register_placeholder(const std::string& word, int expansion) {
    require(expansion >= 1, Errc::contract, "placeholder expansion must be >= 1");
    require(!placeholders_.count(word), Errc::contract, "placeholder already registered");
    PlaceholderTokenInfo info;
    info.word = word;
    for (int k = 0; k < expansion; ++k) {
      int id = next_id_++;
      info.ids.push_back(id);
      placeholder_ids_.insert(id);
    }
    placeholders_.emplace(word, std::move(info));
  }

  std::vector<int> encode_words(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& raw : detail::split_whitespace(text)) {
      auto ph = placeholders_.find(raw);
      if (ph != placeholders_.end()) {
        ids.insert(ids.end(), ph->second.ids.begin(), ph->second.ids.end());
        continue;
      }
      std::string w = clean_word(raw);
      if (w.empty()) continue;
      auto it = word_to_id_.find(w);
      if (it != word_to_id_.end()) {
        ids.push_back(it->second);
      } else {
        ids.push_back(kHashBase + int(detail::fnv1a64(w) % ((1u << 30))));
      }
    }
    return ids;
  }

  bool is_placeholder_id(int id) const { return placeholder_ids_.count(id) > 0; }

  std::vector<PlaceholderTokenInfo> placeholder_tokens() const {
    std::vector<PlaceholderTokenInfo> out;
    for (const auto& [w, info] : placeholders_) out.push_back(info);
    return out;
  }

  int registered_count() const { return next_id_; }

  std::optional<int> lookup(const std::string& word) const {
    auto it = word_to_id_.find(word);
    if (it == word_to_id_.end()) return std::nullopt;
    return it->second;
  }

  static std::string clean_word(const std::string& raw) {
    std::string w = detail::to_lower(raw);
    auto strip = [](char c) {
      return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':' ||
             c == '"' || c == '\'' || c == '(' || c == ')';
    };
    size_t b = 0, e = w.size();
    while (b < e && strip(w[b])) ++b;
    while (e > b && strip(w[e - 1])) --e;
    return w.substr(b, e - b);
  }

 private:
  std::map<std::string, int> word_to_id_;
  std::map<std::string, PlaceholderTokenInfo> placeholders_;
  std::set<int> placeholder_ids_;
  int next_id_ = kFirstWordId;
};

// Configuration of the deterministic toy world. The denoiser is an exact
// two-layer gated mixture: layer one scores each (occupation, class) mode
// from the pooled conditioning readout plus the latent's distance to the
// mode, layer two blends per-mode linear reconstructions. Because the gate
// implements the exact posterior over a Gaussian mixture, sampling follows
// the configured per-occupation class prior, and anchor words steer
// generation through the directive axis of the embedding space.
//
// A style word shifts every mode mean along a fixed latent pattern kept
// orthogonal to all mode differences, so the gate posterior is unchanged
// while generations conditioned on it carry a common offset. Prompts that
// omit the word under-predict that offset, which gives token training a
// consistent first-order signal on the style axis.
struct ToyWorldConfig {
  uint64_t seed = 7;
  int embed_dim = 32;
  int channels = 4;
  int latent_h = 8;
  int latent_w = 8;
  int context_length = 77;
  int train_timesteps = 1000;
  int placeholder_token_length = 1;

  std::vector<std::string> occupations = {"lumin", "verdo", "quill", "bryn",
                                          "coral", "slate", "ember", "frost"};
  std::vector<std::string> class_words = {"sunlit", "moonlit"};  // +axis, -axis
  std::vector<std::string> extra_words = {
      "ruby", "ash",  "jade", "ochre", "azure",   "plum",
      "dawnlit", "dusklit", "someone", "person", "a", "an", "photo", "of", "the",
      "my",  "one",  "rendering", "rendition", "cropped", "clean", "dirty",
      "dark", "bright", "cool", "close-up", "good", "nice", "small", "weird",
      "large", "high-quality"};
  std::vector<std::string> placeholder_words = {"<i_g>", "<i_r>", "<i_a>"};

  // P(class A) per occupation; anything missing defaults to 0.5.
  std::map<std::string, double> class_a_prior = {
      {"lumin", 0.9}, {"verdo", 0.1}, {"quill", 0.9}, {"bryn", 0.1},
      {"coral", 0.9}, {"slate", 0.1}, {"ember", 0.9}, {"frost", 0.1}};

  double mode_std = 0.12;        // within-mode latent spread
  double attr_level = 0.45;      // +- channel-0 level separating the classes
  double pattern_level = 0.35;   // occupation pattern strength on channels 1+
  double concept_gain = 8.0;     // pooled-readout weight for concept axes
  double directive_gain = 6.0;   // pooled-readout weight for the directive axis
  double anchor_strength = 1.0;  // directive component of the class words
  std::string style_word = "high-quality";
  double style_level = 1.5;      // latent offset carried by the style axis
  double filler_norm = 0.2;      // norm of procedural filler embeddings
  double mix_gain = 0.03;        // cross-position mean mixing in the text stack
  double tanh_gain = 0.05;       // nonlinear residual gain in the text stack
  double default_guidance = 3.0;
};

class ToyBackbone : public Backbone {
 public:
  explicit ToyBackbone(ToyWorldConfig cfg = {}) : cfg_(std::move(cfg)) {
    require(int(cfg_.occupations.size()) >= 1, Errc::config, "toy world needs occupations");
    require(cfg_.class_words.size() == 2, Errc::config, "toy world needs two class words");
    n_occ_ = int(cfg_.occupations.size());
    directive_dim_ = n_occ_;
    style_dim_ = n_occ_ + 1;
    require(cfg_.embed_dim >= n_occ_ + 3, Errc::config,
            "embed_dim must cover concept axes plus directive, style and filler");
    n_modes_ = n_occ_ * 2;
    latent_n_ = cfg_.channels * cfg_.latent_h * cfg_.latent_w;
    sched_ = NoiseSchedule::linear_beta(cfg_.train_timesteps);
    build_vocabulary();
    build_embeddings();
    build_text_stack();
    build_denoiser();
  }

  const ToyWorldConfig& config() const { return cfg_; }
  const WordTokenizer& tokenizer() const { return tok_; }
  int occupation_index(const std::string& occ) const {
    for (int i = 0; i < n_occ_; ++i)
      if (cfg_.occupations[i] == occ) return i;
    return -1;
  }

  // ---- Backbone interface ----------------------------------------------

  int embed_dim() const override { return cfg_.embed_dim; }
  int context_length() const override { return cfg_.context_length; }
  std::array<int, 3> latent_shape() const override {
    return {cfg_.channels, cfg_.latent_h, cfg_.latent_w};
  }
  const NoiseSchedule& schedule() const override { return sched_; }

  std::vector<int> tokenize(const std::string& text) const override {
    std::vector<int> ids{WordTokenizer::kBos};
    auto body = tok_.encode_words(text);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(WordTokenizer::kEos);
    require(int(ids.size()) <= cfg_.context_length, Errc::contract,
            "prompt exceeds context window (" + std::to_string(ids.size()) + " > " +
                std::to_string(cfg_.context_length) + " tokens)");
    return ids;
  }

  std::vector<int> tokenize_fragment(const std::string& text) const override {
    return tok_.encode_words(text);
  }

  bool is_placeholder_token(int id) const override { return tok_.is_placeholder_id(id); }

  std::vector<PlaceholderTokenInfo> placeholder_tokens() const {
    return tok_.placeholder_tokens();
  }

  Mat embedding_rows(const std::vector<int>& ids) const override {
    Mat rows(int(ids.size()), cfg_.embed_dim);
    for (size_t i = 0; i < ids.size(); ++i) {
      Mat row = embedding_row(ids[i]);
      for (int c = 0; c < cfg_.embed_dim; ++c) rows.at(int(i), c) = row.at(0, c);
    }
    return rows;
  }

  Var text_transform(Tape& tape, Var rows) const override {
    Var x = rows;
    int n = tape.val(rows).rows;
    require(n >= 1, Errc::contract, "empty sequence");
    for (int b = 0; b < 2; ++b) {
      Var m = tape.scale(tape.sum_rows(x), cfg_.mix_gain / double(n));
      x = tape.add_rowvec(x, m);
      Var h = tape.add_rowvec(tape.matmul(x, tape.constant(text_u_[b])),
                              tape.constant(text_c_[b]));
      x = tape.add(x, tape.scale(tape.tanh_op(h), cfg_.tanh_gain));
    }
    return x;
  }

  Var predict_noise(Tape& tape, const Mat& z_t, int t, Var cond) const override {
    require(z_t.rows == 1 && z_t.cols == latent_n_, Errc::contract,
            "z_t must be 1 x latent_size");
    sched_.check_t(t);
    require(tape.val(cond).cols == cfg_.embed_dim, Errc::contract,
            "conditioning width mismatch");

    double a = sched_.alpha(t);
    double s = sched_.sigma(t);
    double tau = denoise_tau_.v[0];
    double v = a * a * tau * tau + s * s;
    double shrink = a * tau * tau / v;

    // Constant (z-dependent) pieces: per-mode log-likelihood offsets and
    // per-mode noise reconstructions.
    Mat offsets(1, n_modes_);
    Mat eps_modes(n_modes_, latent_n_);
    for (int k = 0; k < n_modes_; ++k) {
      double d2 = 0.0;
      for (int i = 0; i < latent_n_; ++i) {
        double diff = z_t.v[i] - a * mode_mu_.at(k, i);
        d2 += diff * diff;
        double z0_hat = mode_mu_.at(k, i) + shrink * diff;
        eps_modes.at(k, i) = (z_t.v[i] - a * z0_hat) / s;
      }
      offsets.at(0, k) = prior_logits_.at(0, k) - d2 / (2.0 * v);
    }

    // Layer 1: conditioning readout -> gate over modes.
    Var u = tape.sum_rows(cond);
    Var logits = tape.add(tape.matmul(u, tape.constant(gate_readout_)),
                          tape.constant(offsets));
    Var r = tape.row_softmax(logits);
    // Layer 2: gated blend of per-mode reconstructions, scaled by the
    // output gain, plus the style-axis posterior-mean shift. The -a*s/v
    // coefficient is the exact noise-space image of a mode-mean offset.
    Var blend = tape.mul(tape.matmul(r, tape.constant(eps_modes)),
                         tape.constant(out_gain_));
    Mat style_row = style_pattern_;
    double style_coef = -(a * s / v) * cfg_.style_level;
    for (auto& x : style_row.v) x *= style_coef;
    Var u_style = tape.slice_cols(u, style_dim_, style_dim_ + 1);
    return tape.add(blend, tape.matmul(u_style, tape.constant(style_row)));
  }

  Mat encode_image(const Image& img) const override {
    require(img.channels == cfg_.channels && img.height == cfg_.latent_h &&
                img.width == cfg_.latent_w,
            Errc::contract, "image shape does not match toy latent shape");
    Mat z(1, latent_n_);
    for (int i = 0; i < latent_n_; ++i) z.v[i] = img.data[i];
    return z;
  }

  Image decode_latent(const Mat& z) const override {
    require(z.rows == 1 && z.cols == latent_n_, Errc::contract, "latent shape mismatch");
    Image img(cfg_.channels, cfg_.latent_h, cfg_.latent_w);
    for (int i = 0; i < latent_n_; ++i) img.data[i] = z.v[i];
    return img;
  }

  void collect_weights(NamedTensorRefs& out) const override {
    out.emplace_back("embedding.table", &embedding_table_);
    for (int b = 0; b < 2; ++b) {
      out.emplace_back("text." + std::to_string(b) + ".u", &text_u_[b]);
      out.emplace_back("text." + std::to_string(b) + ".c", &text_c_[b]);
    }
    out.emplace_back("denoise.mode_mu", &mode_mu_);
    out.emplace_back("denoise.gate_readout", &gate_readout_);
    out.emplace_back("denoise.prior_logits", &prior_logits_);
    out.emplace_back("denoise.out_gain", &out_gain_);
    out.emplace_back("denoise.tau", &denoise_tau_);
    out.emplace_back("denoise.style_pattern", &style_pattern_);
  }

  nlohmann::json describe() const override {
    nlohmann::json j;
    j["kind"] = "toy";
    j["seed"] = cfg_.seed;
    j["embed_dim"] = cfg_.embed_dim;
    j["latent"] = {cfg_.channels, cfg_.latent_h, cfg_.latent_w};
    j["train_timesteps"] = cfg_.train_timesteps;
    j["occupations"] = cfg_.occupations;
    j["class_words"] = cfg_.class_words;
    j["class_a_prior"] = cfg_.class_a_prior;
    j["placeholder_token_length"] = cfg_.placeholder_token_length;
    j["style_word"] = cfg_.style_word;
    j["style_level"] = cfg_.style_level;
    return j;
  }

  // Zeroes every denoiser weight in place. Only for tests that need the
  // all-zero-weights contract; the world is otherwise immutable.
  void zero_denoiser_weights_for_test() {
    mode_mu_.fill(0.0);
    gate_readout_.fill(0.0);
    prior_logits_.fill(0.0);
    out_gain_.fill(0.0);
    denoise_tau_.fill(0.0);
    style_pattern_.fill(0.0);
  }

  // ---- exact world oracles ----------------------------------------------

  // Class A iff the mean of channel 0 of the decoded output is >= 0.
  int attribute_oracle(const Image& img) const { return img.channel_mean(0) >= 0.0 ? 0 : 1; }

  const Mat& occupation_pattern(int occ_idx) const { return occ_patterns_[occ_idx]; }
  double guidance_default() const { return cfg_.default_guidance; }

 private:
  void build_vocabulary() {
    for (const auto& w : cfg_.occupations) tok_.register_word(w);
    for (const auto& w : cfg_.class_words) tok_.register_word(w);
    for (const auto& w : cfg_.extra_words) tok_.register_word(WordTokenizer::clean_word(w));
    tok_.register_word(WordTokenizer::clean_word(cfg_.style_word));
    for (const auto& p : cfg_.placeholder_words)
      tok_.register_placeholder(p, cfg_.placeholder_token_length);
  }

  Mat filler_vector(uint64_t tag) const {
    int w = cfg_.embed_dim;
    int filler_start = style_dim_ + 1;
    auto rng = detail::make_rng({cfg_.seed, 0xf111e5u, tag});
    Mat row(1, w);
    int nf = w - filler_start;
    double std = cfg_.filler_norm / std::sqrt(double(std::max(nf, 1)));
    for (int c = filler_start; c < w; ++c) row.at(0, c) = detail::gaussian(rng) * std;
    return row;
  }

  void build_embeddings() {
    int w = cfg_.embed_dim;
    embedding_table_ = Mat(tok_.registered_count(), w);
    auto set_row = [&](int id, const Mat& row) {
      for (int c = 0; c < w; ++c) embedding_table_.at(id, c) = row.at(0, c);
    };
    // bos/eos/unk stay zero.
    for (int i = 0; i < n_occ_; ++i) {
      Mat row(1, w);
      row.at(0, i) = 1.0;
      set_row(*tok_.lookup(cfg_.occupations[i]), row);
    }
    for (int cls = 0; cls < 2; ++cls) {
      Mat row(1, w);
      row.at(0, directive_dim_) = (cls == 0 ? 1.0 : -1.0) * cfg_.anchor_strength;
      set_row(*tok_.lookup(cfg_.class_words[cls]), row);
    }
    for (const auto& word : cfg_.extra_words) {
      std::string cw = WordTokenizer::clean_word(word);
      set_row(*tok_.lookup(cw), filler_vector(detail::fnv1a64(cw)));
    }
    if (auto sid = tok_.lookup(WordTokenizer::clean_word(cfg_.style_word))) {
      Mat row(1, w);
      row.at(0, style_dim_) = 1.0;
      set_row(*sid, row);
    }
    for (const auto& info : tok_.placeholder_tokens()) {
      for (size_t k = 0; k < info.ids.size(); ++k) {
        set_row(info.ids[k],
                filler_vector(detail::fnv1a64(info.word) ^ (0x9d5u + k)));
      }
    }
  }

  Mat embedding_row(int id) const {
    int w = cfg_.embed_dim;
    if (id >= WordTokenizer::kHashBase) {
      return filler_vector(0xabcdef12u ^ uint64_t(id));
    }
    require(id >= 0 && id < embedding_table_.rows, Errc::contract, "token id out of range");
    Mat row(1, w);
    for (int c = 0; c < w; ++c) row.at(0, c) = embedding_table_.at(id, c);
    return row;
  }

  void build_text_stack() {
    int w = cfg_.embed_dim;
    for (int b = 0; b < 2; ++b) {
      auto rng = detail::make_rng({cfg_.seed, 0x7e87u, uint64_t(b)});
      text_u_[b] = detail::randn(rng, w, w, 1.0 / std::sqrt(double(w)));
      text_c_[b] = detail::randn(rng, 1, w, 0.1);
      // The style axis is reachable only through vocabulary: the stack
      // never mixes other dimensions onto it, so style-free prompts keep
      // an exactly zero style readout.
      for (int r = 0; r < w; ++r) text_u_[b].at(r, style_dim_) = 0.0;
      text_c_[b].at(0, style_dim_) = 0.0;
    }
  }

  void build_denoiser() {
    int w = cfg_.embed_dim;
    int plane = cfg_.latent_h * cfg_.latent_w;

    mode_mu_ = Mat(n_modes_, latent_n_);
    occ_patterns_.clear();
    for (int o = 0; o < n_occ_; ++o) {
      auto rng = detail::make_rng({cfg_.seed, 0xbeefu, uint64_t(o)});
      Mat pattern(1, latent_n_);
      for (int c = 1; c < cfg_.channels; ++c)
        for (int i = 0; i < plane; ++i)
          pattern.v[size_t(c) * plane + i] = detail::gaussian(rng) * cfg_.pattern_level;
      occ_patterns_.push_back(pattern);
      for (int cls = 0; cls < 2; ++cls) {
        int k = o * 2 + cls;
        double level = (cls == 0 ? 1.0 : -1.0) * cfg_.attr_level;
        for (int i = 0; i < plane; ++i) mode_mu_.at(k, i) = level;
        for (int i = plane; i < latent_n_; ++i) mode_mu_.at(k, i) = pattern.v[i];
      }
    }

    gate_readout_ = Mat(w, n_modes_);
    prior_logits_ = Mat(1, n_modes_);
    for (int o = 0; o < n_occ_; ++o) {
      double pa = 0.5;
      auto it = cfg_.class_a_prior.find(cfg_.occupations[o]);
      if (it != cfg_.class_a_prior.end()) pa = it->second;
      require(pa > 0.0 && pa < 1.0, Errc::config, "class prior must be in (0,1)");
      double half_logit = 0.5 * std::log(pa / (1.0 - pa));
      for (int cls = 0; cls < 2; ++cls) {
        int k = o * 2 + cls;
        prior_logits_.at(0, k) = cls == 0 ? half_logit : -half_logit;
        gate_readout_.at(o, k) = cfg_.concept_gain;
        gate_readout_.at(directive_dim_, k) =
            (cls == 0 ? 1.0 : -1.0) * cfg_.directive_gain;
      }
    }

    out_gain_ = Mat(1, latent_n_, 1.0);
    denoise_tau_ = Mat(1, 1, cfg_.mode_std);

    // Style pattern on channels 1+, orthogonalized against every occupation
    // pattern and normalized. Channel 0 stays zero, so neither the class
    // feature nor any mode difference has a component along it and the gate
    // posterior is independent of the style shift.
    {
      auto rng = detail::make_rng({cfg_.seed, 0x57e1eu});
      style_pattern_ = Mat(1, latent_n_);
      for (int i = plane; i < latent_n_; ++i) style_pattern_.v[i] = detail::gaussian(rng);
      for (const auto& p : occ_patterns_) {
        double dot = 0.0, nn = 0.0;
        for (int i = 0; i < latent_n_; ++i) {
          dot += style_pattern_.v[i] * p.v[i];
          nn += p.v[i] * p.v[i];
        }
        if (nn > 0)
          for (int i = 0; i < latent_n_; ++i) style_pattern_.v[i] -= (dot / nn) * p.v[i];
      }
      double norm = 0.0;
      for (int i = 0; i < latent_n_; ++i) norm += style_pattern_.v[i] * style_pattern_.v[i];
      norm = std::sqrt(norm);
      require(norm > 1e-9, Errc::config, "style pattern degenerate");
      for (int i = 0; i < latent_n_; ++i) style_pattern_.v[i] /= norm;
    }
  }

  ToyWorldConfig cfg_;
  WordTokenizer tok_;
  NoiseSchedule sched_;
  int n_occ_ = 0;
  int directive_dim_ = 0;
  int style_dim_ = 0;
  int n_modes_ = 0;
  int latent_n_ = 0;

  Mat embedding_table_;
  std::array<Mat, 2> text_u_;
  std::array<Mat, 2> text_c_;
  Mat mode_mu_;
  Mat gate_readout_;
  Mat prior_logits_;
  Mat out_gain_;
  Mat denoise_tau_;
  Mat style_pattern_;
  std::vector<Mat> occ_patterns_;
};

// ---- toy oracles ---------------------------------------------------------

class ToyFaceDetector : public FaceDetector {
 public:
  explicit ToyFaceDetector(const ToyBackbone& bb) : bb_(bb) {}
  double face_confidence(const Image& img) const override {
    auto s = bb_.latent_shape();
    bool ok = img.well_formed() && img.channels == s[0] && img.height == s[1] &&
              img.width == s[2];
    return ok ? 1.0 : 0.0;
  }

 private:
  const ToyBackbone& bb_;
};

class ToyFeatureExtractor : public FeatureExtractor {
 public:
  explicit ToyFeatureExtractor(const ToyBackbone& bb) : bb_(bb) {}
  int dim() const override { return 2 + int(bb_.config().occupations.size()); }
  std::vector<double> features(const Image& img) const override {
    int n_occ = int(bb_.config().occupations.size());
    std::vector<double> f(size_t(dim()), 0.0);
    f[0] = img.channel_mean(0);
    Mat z = bb_.encode_image(img);
    for (int o = 0; o < n_occ; ++o) {
      const Mat& p = bb_.occupation_pattern(o);
      double dot = 0.0, norm = 0.0;
      for (size_t i = 0; i < p.v.size(); ++i) {
        dot += p.v[i] * z.v[i];
        norm += p.v[i] * p.v[i];
      }
      f[1 + o] = norm > 0 ? dot / std::sqrt(norm) : 0.0;
    }
    f[size_t(dim()) - 1] = 0.5;  // bias slot keeps degenerate sets full rank
    return f;
  }

 private:
  const ToyBackbone& bb_;
};

// Cosine similarity between toy image features and a feature vector implied
// by the words of the text. Classification with this scorer reproduces the
// exact pixel oracle for the two directive classes.
class ToySimilarityScorer : public SimilarityScorer {
 public:
  explicit ToySimilarityScorer(const ToyBackbone& bb) : bb_(bb), fx_(bb) {}

  double score(const Image& img, const std::string& text) const override {
    std::vector<double> fi = fx_.features(img);
    std::vector<double> ft(fi.size(), 0.0);
    const auto& cfg = bb_.config();
    for (const auto& raw : detail::split_whitespace(text)) {
      std::string w = WordTokenizer::clean_word(raw);
      if (w == cfg.class_words[0]) ft[0] += 1.0;
      if (w == cfg.class_words[1]) ft[0] -= 1.0;
      int occ = bb_.occupation_index(w);
      if (occ >= 0) ft[size_t(1 + occ)] += 1.0;
    }
    ft.back() = 0.25;
    double dot = 0.0, ni = 0.0, nt = 0.0;
    for (size_t i = 0; i < fi.size(); ++i) {
      dot += fi[i] * ft[i];
      ni += fi[i] * fi[i];
      nt += ft[i] * ft[i];
    }
    if (ni == 0.0 || nt == 0.0) return 0.0;
    return dot / std::sqrt(ni * nt);
  }

 private:
  const ToyBackbone& bb_;
  ToyFeatureExtractor fx_;
};

}  // namespace inctok
