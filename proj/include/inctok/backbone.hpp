#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "inctok/autodiff.hpp"
#include "inctok/detail/mat.hpp"
#include "inctok/detail/zpng.hpp"
#include "inctok/error.hpp"
#include "inctok/serialize.hpp"

namespace inctok {

// Channel-major image with values nominally in [-1, 1]. Stored on disk as a
// lossless 16-bit PNG plus a JSON metadata sidecar.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;  // [c][h][w]

  Image() = default;
  Image(int c, int h, int w)
      : channels(c), height(h), width(w),
        data(size_t(c) * size_t(h) * size_t(w), 0.0) {}

  double& at(int c, int y, int x) {
    return data[(size_t(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(size_t(c) * height + y) * width + x];
  }

  double channel_mean(int c) const {
    double s = 0.0;
    size_t n = size_t(height) * width;
    for (size_t i = 0; i < n; ++i) s += data[size_t(c) * n + i];
    return s / double(n);
  }

  bool well_formed() const {
    if (channels <= 0 || height <= 0 || width <= 0) return false;
    if (data.size() != size_t(channels) * height * width) return false;
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline void write_image_png(const std::filesystem::path& path, const Image& img) {
  require(img.well_formed(), Errc::contract, "refusing to write malformed image");
  require(img.channels >= 1 && img.channels <= 4, Errc::contract,
          "image channel count unsupported by png");
  detail::PngImage p;
  p.width = img.width;
  p.height = img.height;
  p.channels = img.channels;
  p.bit_depth = 16;
  p.samples.resize(img.data.size());
  size_t plane = size_t(img.height) * img.width;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double v = img.data[size_t(c) * plane + size_t(y) * img.width + x];
        v = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
        p.samples[(size_t(y) * img.width + x) * img.channels + c] =
            uint16_t(std::llround(v * 65535.0));
      }
  detail::write_png_file(path, p);
}

inline Image read_image_png(const std::filesystem::path& path) {
  detail::PngImage p = detail::read_png_file(path);
  Image img(p.channels, p.height, p.width);
  size_t plane = size_t(img.height) * img.width;
  double scale = p.bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double v = double(p.samples[(size_t(y) * img.width + x) * img.channels + c]) / scale;
        img.data[size_t(c) * plane + size_t(y) * img.width + x] = v * 2.0 - 1.0;
      }
  return img;
}

// Variance-preserving forward-noise schedule: alpha(t)^2 + sigma(t)^2 = 1
// for every t in [0, T).
struct NoiseSchedule {
  int total_timesteps = 0;
  std::vector<double> alpha_bar;

  double alpha(int t) const {
    check_t(t);
    return std::sqrt(alpha_bar[t]);
  }
  double sigma(int t) const {
    check_t(t);
    return std::sqrt(1.0 - alpha_bar[t]);
  }
  void check_t(int t) const {
    require(t >= 0 && t < total_timesteps, Errc::contract,
            "timestep out of range: " + std::to_string(t));
  }

  static NoiseSchedule linear_beta(int T, double beta_start = 1e-4, double beta_end = 0.02) {
    require(T > 0, Errc::contract, "schedule needs at least one timestep");
    NoiseSchedule s;
    s.total_timesteps = T;
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
      double beta = beta_start + (beta_end - beta_start) * (T == 1 ? 0.0 : double(t) / (T - 1));
      prod *= 1.0 - beta;
      s.alpha_bar[t] = prod;
    }
    return s;
  }
};

// z_t = alpha(t) * z0 + sigma(t) * eps
inline Mat add_noise(const NoiseSchedule& sched, const Mat& z0, const Mat& eps, int t) {
  require(z0.same_shape(eps), Errc::contract, "add_noise shape mismatch");
  sched.check_t(t);
  double a = sched.alpha(t), s = sched.sigma(t);
  Mat out = z0;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * out.v[i] + s * eps.v[i];
  return out;
}

// Frozen generative stack: tokenizer, embedding table, text transformer,
// denoiser, latent codec and noise schedule. Implementations must be
// immutable after construction; weights_digest() is the seal the trainer
// checks before and after a run.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual int embed_dim() const = 0;
  virtual int context_length() const = 0;
  virtual std::array<int, 3> latent_shape() const = 0;  // channels, height, width
  virtual const NoiseSchedule& schedule() const = 0;

  int latent_size() const {
    auto s = latent_shape();
    return s[0] * s[1] * s[2];
  }

  // Full prompt tokenization, including begin/end sentinels.
  virtual std::vector<int> tokenize(const std::string& text) const = 0;
  // Fragment tokenization without sentinels (used for span matching).
  virtual std::vector<int> tokenize_fragment(const std::string& text) const = 0;
  virtual bool is_placeholder_token(int id) const = 0;

  virtual Mat embedding_rows(const std::vector<int>& ids) const = 0;

  // Frozen text transformer over pre-substitution embedding rows.
  virtual Var text_transform(Tape& tape, Var rows) const = 0;

  // eps prediction conditioned on a text embedding. z_t is a 1 x latent_size
  // row; the returned Var has the same shape.
  virtual Var predict_noise(Tape& tape, const Mat& z_t, int t, Var cond) const = 0;

  virtual Mat encode_image(const Image& img) const = 0;
  virtual Image decode_latent(const Mat& z) const = 0;

  // Every weight tensor in a stable order, for digesting and export.
  virtual void collect_weights(NamedTensorRefs& out) const = 0;
  virtual nlohmann::json describe() const = 0;

  // Non-tape conveniences.
  Mat text_transform_plain(const Mat& rows) const {
    Tape tape;
    return tape.val(text_transform(tape, tape.constant(rows)));
  }
  Mat predict_noise_plain(const Mat& z_t, int t, const Mat& cond) const {
    Tape tape;
    return tape.val(predict_noise(tape, z_t, t, tape.constant(cond)));
  }

  std::string weights_digest() const {
    NamedTensorRefs refs;
    collect_weights(refs);
    return container_digest(refs, describe());
  }
};

}  // namespace inctok
