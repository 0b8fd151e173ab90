#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "inctok/autodiff.hpp"
#include "inctok/backbone.hpp"
#include "inctok/detail/rng.hpp"
#include "inctok/serialize.hpp"

namespace inctok {

// Ordered, named parameter set. Each entry carries a weight-decay flag so
// the optimizer can decay matrix weights while leaving biases, norms and
// token embeddings alone.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Mat value;
    bool decay = false;
  };

  int add(std::string name, Mat value, bool decay) {
    require(!index_.count(name), Errc::contract, "duplicate parameter: " + name);
    index_.emplace(name, int(entries_.size()));
    entries_.push_back({std::move(name), std::move(value), decay});
    return int(entries_.size()) - 1;
  }

  Mat& at(const std::string& name) { return entries_[find(name)].value; }
  const Mat& at(const std::string& name) const { return entries_[find(name)].value; }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  NamedTensorRefs tensor_refs() const {
    NamedTensorRefs refs;
    for (const auto& e : entries_) refs.emplace_back(e.name, &e.value);
    return refs;
  }

 private:
  int find(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), Errc::contract, "unknown parameter: " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
};

enum class MappingBody { transformer, mlp };

inline const char* mapping_body_name(MappingBody b) {
  return b == MappingBody::transformer ? "transformer" : "mlp";
}

inline MappingBody mapping_body_from_name(const std::string& s) {
  if (s == "transformer") return MappingBody::transformer;
  if (s == "mlp") return MappingBody::mlp;
  fail(Errc::config, "unknown mapping body: " + s);
}

struct MappingNetworkConfig {
  int width = 0;          // must equal the backbone embedding width
  int blocks = 4;
  int heads = 6;
  int token_length = 1;   // rows of the learned token embedding
  int concept_pad = 8;    // concept sequence is padded/limited to this length
  int hidden_mult = 4;    // feed-forward expansion factor
  MappingBody body = MappingBody::transformer;
  uint64_t seed = 1;
  bool train_token = true;
  double init_std = 0.02;
  double final_proj_std = 1e-3;  // near-zero last layer: adaptation starts at identity

  void validate() const {
    require(width >= 1, Errc::config, "mapping width must be positive");
    require(blocks >= 1, Errc::config, "mapping needs at least one block");
    require(heads >= 1 && width % heads == 0, Errc::config,
            "width must be divisible by heads (" + std::to_string(width) + " % " +
                std::to_string(heads) + ")");
    require(token_length >= 1, Errc::config, "token_length must be >= 1");
    require(concept_pad >= 1, Errc::config, "concept_pad must be >= 1");
    require(hidden_mult >= 1, Errc::config, "hidden_mult must be >= 1");
    require(final_proj_std >= 0.0, Errc::config, "final_proj_std must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"width", width},
            {"blocks", blocks},
            {"heads", heads},
            {"token_length", token_length},
            {"concept_pad", concept_pad},
            {"hidden_mult", hidden_mult},
            {"body", mapping_body_name(body)},
            {"seed", seed},
            {"train_token", train_token},
            {"init_std", init_std},
            {"final_proj_std", final_proj_std}};
  }

  static MappingNetworkConfig from_json(const nlohmann::json& j) {
    MappingNetworkConfig c;
    try {
      c.width = j.at("width").get<int>();
      c.blocks = j.at("blocks").get<int>();
      c.heads = j.at("heads").get<int>();
      c.token_length = j.at("token_length").get<int>();
      c.concept_pad = j.at("concept_pad").get<int>();
      c.hidden_mult = j.at("hidden_mult").get<int>();
      c.body = mapping_body_from_name(j.at("body").get<std::string>());
      c.seed = j.at("seed").get<uint64_t>();
      c.train_token = j.at("train_token").get<bool>();
      c.init_std = j.at("init_std").get<double>();
      c.final_proj_std = j.at("final_proj_std").get<double>();
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::config, std::string("mapping config parse failed: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// Tape bindings of every parameter for one forward pass.
struct BoundParams {
  std::map<std::string, Var> vars;

  Var at(const std::string& name) const {
    auto it = vars.find(name);
    require(it != vars.end(), Errc::contract, "unbound parameter: " + name);
    return it->second;
  }
};

// Learns a concept-adaptive token: the stored token embedding is combined
// with the concept's embedding rows and mapped to a concept-specific
// replacement. The mapping is residual around the stored token with a
// near-zero-initialized last layer, so an untrained network reproduces the
// plain learned-token behaviour almost exactly.
class MappingNetwork {
 public:
  MappingNetwork() = default;

  static MappingNetwork create(MappingNetworkConfig cfg, const Backbone& bb,
                               const std::string& init_word) {
    cfg.validate();
    require(cfg.width == bb.embed_dim(), Errc::config,
            "mapping width must match backbone embedding width");
    MappingNetwork m;
    m.cfg_ = cfg;

    std::vector<int> ids = bb.tokenize_fragment(init_word);
    require(int(ids.size()) == cfg.token_length, Errc::init,
            "init word '" + init_word + "' tokenizes to " + std::to_string(ids.size()) +
                " ids, need exactly " + std::to_string(cfg.token_length));
    m.store_.add("token.v", bb.embedding_rows(ids), false);
    m.build_body_params();
    return m;
  }

  static MappingNetwork from_container(const Container& c) {
    MappingNetwork m;
    require(c.meta.contains("mapping_config"), Errc::checkpoint,
            "container lacks mapping_config");
    m.cfg_ = MappingNetworkConfig::from_json(c.meta.at("mapping_config"));
    const Mat& token = c.tensor("token.v");
    require(token.rows == m.cfg_.token_length && token.cols == m.cfg_.width,
            Errc::checkpoint, "stored token shape disagrees with mapping config");
    m.store_.add("token.v", token, false);
    m.build_body_params();
    for (auto& e : m.store_.entries()) {
      const Mat& stored = c.tensor(e.name);
      require(stored.same_shape(e.value), Errc::checkpoint,
              "tensor shape mismatch for " + e.name);
      e.value = stored;
    }
    return m;
  }

  void save(const std::filesystem::path& path, const nlohmann::json& provenance) const {
    nlohmann::json meta;
    meta["mapping_config"] = cfg_.to_json();
    meta["provenance"] = provenance;
    save_container(path, store_.tensor_refs(), meta);
  }

  static MappingNetwork load(const std::filesystem::path& path) {
    return from_container(load_container(path));
  }

  const MappingNetworkConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  size_t parameter_count() const { return store_.parameter_count(); }
  const Mat& token_value() const { return store_.at("token.v"); }
  Mat& token_value() { return store_.at("token.v"); }

  std::string digest() const {
    return container_digest(store_.tensor_refs(), {{"mapping_config", cfg_.to_json()}});
  }

  // Binds every parameter as a tape leaf. With `trainable`, gradients flow
  // to all parameters (the token only if train_token allows).
  BoundParams bind(Tape& tape, bool trainable) const {
    BoundParams p;
    for (const auto& e : store_.entries()) {
      bool grad = trainable && (e.name != "token.v" || cfg_.train_token);
      p.vars.emplace(e.name, tape.leaf(e.value, grad));
    }
    return p;
  }

  // Maps the stored token to its concept-adapted replacement.
  // `concept_rows` are the raw embedding rows of the concept tokens.
  Var adapt(Tape& tape, const BoundParams& p, const Mat& concept_rows) const {
    require(concept_rows.cols == cfg_.width, Errc::contract,
            "concept embedding width mismatch");
    require(concept_rows.rows >= 1, Errc::contract, "empty concept");
    require(concept_rows.rows <= cfg_.concept_pad, Errc::contract,
            "concept longer than concept_pad (" + std::to_string(concept_rows.rows) +
                " > " + std::to_string(cfg_.concept_pad) + " tokens)");
    Var token = p.at("token.v");
    Mat padded(cfg_.concept_pad, cfg_.width);
    for (int r = 0; r < concept_rows.rows; ++r)
      for (int c = 0; c < cfg_.width; ++c) padded.at(r, c) = concept_rows.at(r, c);
    Var concept_seq = tape.constant(padded);

    Var delta = cfg_.body == MappingBody::transformer
                    ? transformer_delta(tape, p, token, concept_seq)
                    : mlp_delta(tape, p, token, concept_seq);
    return tape.add(token, delta);
  }

  Mat adapt_plain(const Mat& concept_rows) const {
    Tape tape;
    BoundParams p = bind(tape, false);
    return tape.val(adapt(tape, p, concept_rows));
  }

 private:
  void build_body_params() {
    int w = cfg_.width;
    int L = cfg_.token_length;
    int P = cfg_.concept_pad;
    auto rng = detail::make_rng({cfg_.seed, 0x3a99u});
    auto gauss = [&](int r, int c, double std) { return detail::randn(rng, r, c, std); };

    if (cfg_.body == MappingBody::transformer) {
      store_.add("pos", gauss(L + P, w, cfg_.init_std), false);
      for (int b = 0; b < cfg_.blocks; ++b) {
        std::string pre = "blk" + std::to_string(b) + ".";
        store_.add(pre + "ln1.gain", Mat(1, w, 1.0), false);
        store_.add(pre + "ln1.bias", Mat(1, w), false);
        for (const char* nm : {"wq", "wk", "wv", "wo"})
          store_.add(pre + "attn." + nm, gauss(w, w, cfg_.init_std), true);
        for (const char* nm : {"bq", "bk", "bv", "bo"})
          store_.add(pre + "attn." + nm, Mat(1, w), false);
        store_.add(pre + "ln2.gain", Mat(1, w, 1.0), false);
        store_.add(pre + "ln2.bias", Mat(1, w), false);
        store_.add(pre + "mlp.w1", gauss(w, cfg_.hidden_mult * w, cfg_.init_std), true);
        store_.add(pre + "mlp.b1", Mat(1, cfg_.hidden_mult * w), false);
        store_.add(pre + "mlp.w2", gauss(cfg_.hidden_mult * w, w, cfg_.init_std), true);
        store_.add(pre + "mlp.b2", Mat(1, w), false);
      }
      store_.add("final.ln.gain", Mat(1, w, 1.0), false);
      store_.add("final.ln.bias", Mat(1, w), false);
      store_.add("final.proj.w", gauss(w, w, cfg_.final_proj_std), true);
      store_.add("final.proj.b", Mat(1, w), false);
    } else {
      int in_dim = (L + P) * w;
      int hidden = cfg_.hidden_mult * w;
      store_.add("mlp.w1", gauss(in_dim, hidden, cfg_.init_std), true);
      store_.add("mlp.b1", Mat(1, hidden), false);
      store_.add("mlp.w2", gauss(hidden, L * w, cfg_.final_proj_std), true);
      store_.add("mlp.b2", Mat(1, L * w), false);
    }
  }

  Var attention(Tape& tape, const BoundParams& p, const std::string& pre, Var x) const {
    int w = cfg_.width;
    int dh = w / cfg_.heads;
    Var q = tape.add_rowvec(tape.matmul(x, p.at(pre + "wq")), p.at(pre + "bq"));
    Var k = tape.add_rowvec(tape.matmul(x, p.at(pre + "wk")), p.at(pre + "bk"));
    Var v = tape.add_rowvec(tape.matmul(x, p.at(pre + "wv")), p.at(pre + "bv"));
    Var out{};
    bool first = true;
    for (int h = 0; h < cfg_.heads; ++h) {
      Var qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
      Var kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
      Var vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
      Var scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / std::sqrt(double(dh)));
      Var ctx = tape.matmul(tape.row_softmax(scores), vh);
      out = first ? ctx : tape.concat_cols(out, ctx);
      first = false;
    }
    return tape.add_rowvec(tape.matmul(out, p.at(pre + "wo")), p.at(pre + "bo"));
  }

  Var transformer_delta(Tape& tape, const BoundParams& p, Var token, Var concept_seq) const {
    Var x = tape.add(tape.concat_rows(token, concept_seq), p.at("pos"));
    for (int b = 0; b < cfg_.blocks; ++b) {
      std::string pre = "blk" + std::to_string(b) + ".";
      Var n1 = tape.layer_norm(x, p.at(pre + "ln1.gain"), p.at(pre + "ln1.bias"));
      x = tape.add(x, attention(tape, p, pre + "attn.", n1));
      Var n2 = tape.layer_norm(x, p.at(pre + "ln2.gain"), p.at(pre + "ln2.bias"));
      Var h = tape.gelu(tape.add_rowvec(tape.matmul(n2, p.at(pre + "mlp.w1")),
                                        p.at(pre + "mlp.b1")));
      x = tape.add(x, tape.add_rowvec(tape.matmul(h, p.at(pre + "mlp.w2")),
                                      p.at(pre + "mlp.b2")));
    }
    Var y = tape.slice_rows(x, 0, cfg_.token_length);
    Var n = tape.layer_norm(y, p.at("final.ln.gain"), p.at("final.ln.bias"));
    return tape.add_rowvec(tape.matmul(n, p.at("final.proj.w")), p.at("final.proj.b"));
  }

  Var mlp_delta(Tape& tape, const BoundParams& p, Var token, Var concept_seq) const {
    Var seq = tape.concat_rows(token, concept_seq);
    Var flat = flatten_rows(tape, seq);
    Var h = tape.gelu(tape.add_rowvec(tape.matmul(flat, p.at("mlp.w1")), p.at("mlp.b1")));
    Var out = tape.add_rowvec(tape.matmul(h, p.at("mlp.w2")), p.at("mlp.b2"));
    return unflatten_rows(tape, out, cfg_.token_length, cfg_.width);
  }

  static Var flatten_rows(Tape& tape, Var x) {
    int rows = tape.val(x).rows;
    Var out = tape.slice_rows(x, 0, 1);
    for (int r = 1; r < rows; ++r)
      out = tape.concat_cols(out, tape.slice_rows(x, r, r + 1));
    return out;
  }

  static Var unflatten_rows(Tape& tape, Var flat, int rows, int cols) {
    Var out = tape.slice_cols(flat, 0, cols);
    for (int r = 1; r < rows; ++r)
      out = tape.concat_rows(out, tape.slice_cols(flat, r * cols, (r + 1) * cols));
    return out;
  }

  MappingNetworkConfig cfg_;
  ParamStore store_;
};

}  // namespace inctok
