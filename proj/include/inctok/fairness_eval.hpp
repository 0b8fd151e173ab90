#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "inctok/detail/sha256.hpp"
#include "inctok/detail/strings.hpp"
#include "inctok/generation.hpp"
#include "inctok/interfaces.hpp"
#include "inctok/taxonomy.hpp"
#include "inctok/version.hpp"

namespace inctok {

// Class counts of one generated set. Keys follow the taxonomy's class order
// for the attribute; every class is present even at count zero.
struct AttributeDistribution {
  AttributeId attribute = AttributeId::gender;
  std::vector<std::string> labels;
  std::vector<int64_t> counts;
  int64_t n_total = 0;

  static AttributeDistribution empty_for(const SensitiveAttribute& attr) {
    AttributeDistribution d;
    d.attribute = attr.id;
    for (const auto& c : attr.classes) d.labels.push_back(c.label);
    d.counts.assign(attr.classes.size(), 0);
    return d;
  }

  void add(int class_index) {
    require(class_index >= 0 && size_t(class_index) < counts.size(), Errc::contract,
            "class index out of range");
    counts[size_t(class_index)] += 1;
    n_total += 1;
  }

  nlohmann::json to_json() const {
    nlohmann::json c = nlohmann::json::object();
    for (size_t i = 0; i < labels.size(); ++i) c[labels[i]] = counts[i];
    return {{"attribute", attribute_name(attribute)}, {"counts", c}, {"n_total", n_total}};
  }
};

// Divergence of the empirical distribution from uniform over the class set:
// sum of p*ln(p*K), zero-count classes contributing zero. Lies in [0, ln K].
inline double kl_to_uniform(const AttributeDistribution& dist) {
  require(dist.n_total > 0, Errc::undefined_distribution,
          "distribution has no samples; cannot compare against uniform");
  require(!dist.counts.empty(), Errc::contract, "distribution has no classes");
  double k = double(dist.counts.size());
  double kl = 0.0;
  for (int64_t c : dist.counts) {
    require(c >= 0, Errc::contract, "negative count");
    if (c == 0) continue;
    double p = double(c) / double(dist.n_total);
    // log(c*K/n) instead of log(p*K): the integer products are exact in
    // double, so a uniform vector yields exactly zero for every K.
    kl += p * std::log(double(c) * k / double(dist.n_total));
  }
  return kl;
}

// Zero-shot attribute classification: argmax over the attribute's classes of
// similarity(image, "a photo of a {class word} person"). Ties keep the
// earlier class in taxonomy order. `margin_out`, when given, receives the
// score gap between the chosen class and the runner-up as a confidence
// summary (zero when the attribute has a single class).
inline int classify_attribute(const Image& img, const SensitiveAttribute& attr,
                              const SimilarityScorer& scorer,
                              double* margin_out = nullptr) {
  require(!attr.classes.empty(), Errc::contract, "attribute has no classes");
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  double second = -std::numeric_limits<double>::infinity();
  for (size_t c = 0; c < attr.classes.size(); ++c) {
    std::string probe = std::string(resources::kClassifierPromptPattern);
    probe = detail::replace_first(probe, "{class}", attr.classes[c].prompt_word);
    double s = scorer.score(img, probe);
    if (s > best_score) {  // strict: ties keep the earlier class
      second = best_score;
      best_score = s;
      best = int(c);
    } else if (s > second) {
      second = s;
    }
  }
  if (margin_out != nullptr)
    *margin_out = std::isinf(second) ? 0.0 : best_score - second;
  return best;
}

// Mean image-text similarity against one prompt.
inline double alignment_score(const std::vector<Image>& images, const std::string& prompt,
                              const SimilarityScorer& scorer) {
  require(!images.empty(), Errc::config, "alignment over an empty image set");
  double sum = 0.0;
  for (const auto& img : images) sum += scorer.score(img, prompt);
  return sum / double(images.size());
}

namespace detail_eval {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Small dimensions
// only; eigenvectors land in the columns of `vecs`.
inline void jacobi_eigen(Mat a, std::vector<double>& eigenvalues, Mat& vecs) {
  int n = a.rows;
  require(a.cols == n, Errc::contract, "jacobi needs a square matrix");
  vecs = Mat(n, n);
  for (int i = 0; i < n; ++i) vecs.at(i, i) = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = a.at(p, q);
        if (std::abs(apq) < 1e-300) continue;
        double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int i = 0; i < n; ++i) {
          double aip = a.at(i, p), aiq = a.at(i, q);
          a.at(i, p) = c * aip - s * aiq;
          a.at(i, q) = s * aip + c * aiq;
        }
        for (int i = 0; i < n; ++i) {
          double api = a.at(p, i), aqi = a.at(q, i);
          a.at(p, i) = c * api - s * aqi;
          a.at(q, i) = s * api + c * aqi;
        }
        for (int i = 0; i < n; ++i) {
          double vip = vecs.at(i, p), viq = vecs.at(i, q);
          vecs.at(i, p) = c * vip - s * viq;
          vecs.at(i, q) = s * vip + c * viq;
        }
      }
    }
  }
  eigenvalues.resize(size_t(n));
  for (int i = 0; i < n; ++i) eigenvalues[size_t(i)] = a.at(i, i);
}

// Symmetric positive square root with the eigenvalue floor.
inline Mat sqrt_psd(const Mat& m, double floor_value) {
  std::vector<double> ev;
  Mat v;
  jacobi_eigen(m, ev, v);
  int n = m.rows;
  Mat out(n, n);
  for (int k = 0; k < n; ++k) {
    double lam = std::sqrt(std::max(ev[size_t(k)], floor_value));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) out.at(i, j) += lam * v.at(i, k) * v.at(j, k);
  }
  return out;
}

struct GaussianFit {
  std::vector<double> mean;
  Mat cov;
  int n = 0;
};

// Mean and unbiased sample covariance of a feature set.
inline GaussianFit fit_gaussian(const std::vector<std::vector<double>>& feats) {
  require(!feats.empty(), Errc::config, "empty feature set");
  size_t d = feats[0].size();
  require(d >= 1, Errc::config, "zero-dimensional features");
  GaussianFit g;
  g.n = int(feats.size());
  g.mean.assign(d, 0.0);
  for (const auto& f : feats) {
    require(f.size() == d, Errc::contract, "ragged feature set");
    for (size_t i = 0; i < d; ++i) {
      require(std::isfinite(f[i]), Errc::numeric,
              "non-finite feature value; check the extractor and its inputs");
      g.mean[i] += f[i];
    }
  }
  for (auto& m : g.mean) m /= double(g.n);
  g.cov = Mat(int(d), int(d));
  if (g.n > 1) {
    for (const auto& f : feats)
      for (size_t i = 0; i < d; ++i)
        for (size_t j = 0; j < d; ++j)
          g.cov.at(int(i), int(j)) += (f[i] - g.mean[i]) * (f[j] - g.mean[j]);
    for (auto& x : g.cov.v) x /= double(g.n - 1);
  }
  return g;
}

}  // namespace detail_eval

struct FidResult {
  double value = 0.0;
  // Sample covariance has rank at most n-1, so a set no larger than the
  // feature dimension cannot determine a full-rank Gaussian.
  bool rank_deficient = false;
};

// Frechet distance between Gaussian fits of two feature sets:
// |mu1-mu2|^2 + tr(S1 + S2 - 2*sqrt(S1*S2)), with the product symmetrized
// and eigenvalues floored for the square root.
inline FidResult compute_fid_features(const std::vector<std::vector<double>>& a,
                                      const std::vector<std::vector<double>>& b) {
  detail_eval::GaussianFit ga = detail_eval::fit_gaussian(a);
  detail_eval::GaussianFit gb = detail_eval::fit_gaussian(b);
  require(ga.mean.size() == gb.mean.size(), Errc::contract,
          "feature dimension mismatch between the two sets");
  int d = int(ga.mean.size());

  double mean_term = 0.0;
  for (int i = 0; i < d; ++i) {
    double diff = ga.mean[size_t(i)] - gb.mean[size_t(i)];
    mean_term += diff * diff;
  }

  double trace_a = 0.0, trace_b = 0.0;
  for (int i = 0; i < d; ++i) {
    trace_a += ga.cov.at(i, i);
    trace_b += gb.cov.at(i, i);
  }

  // tr(sqrt(S1*S2)) through the symmetric form sqrt(R*S2*R) with R=sqrt(S1).
  constexpr double kFloor = 1e-10;
  Mat r = detail_eval::sqrt_psd(ga.cov, kFloor);
  Mat m = matmul_plain(matmul_plain(r, gb.cov), r);
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      double s = 0.5 * (m.at(i, j) + m.at(j, i));
      m.at(i, j) = s;
      m.at(j, i) = s;
    }
  std::vector<double> ev;
  Mat vecs;
  detail_eval::jacobi_eigen(m, ev, vecs);
  double trace_sqrt = 0.0;
  for (double lam : ev) trace_sqrt += std::sqrt(std::max(lam, 0.0));

  FidResult out;
  out.value = mean_term + trace_a + trace_b - 2.0 * trace_sqrt;
  require(std::isfinite(out.value), Errc::numeric,
          "FID is not finite; covariances may be singular beyond the "
          "eigenvalue floor, try more samples or fewer feature dimensions");
  out.rank_deficient = ga.n <= d || gb.n <= d;
  return out;
}

inline FidResult compute_fid(const std::vector<Image>& generated,
                             const std::vector<Image>& reference,
                             const FeatureExtractor& fx) {
  require(!generated.empty() && !reference.empty(), Errc::config,
          "FID needs two non-empty image sets");
  std::vector<std::vector<double>> fa, fb;
  fa.reserve(generated.size());
  fb.reserve(reference.size());
  for (const auto& img : generated) fa.push_back(fx.features(img));
  for (const auto& img : reference) fb.push_back(fx.features(img));
  return compute_fid_features(fa, fb);
}

struct OccupationEvalRow {
  std::string occupation;
  bool present = false;
  AttributeDistribution distribution;
  double d_kl = 0.0;
  double alignment = 0.0;
  double mean_margin = 0.0;  // mean classifier-confidence margin

  nlohmann::json to_json() const {
    nlohmann::json j{{"occupation", occupation}, {"present", present}};
    if (present) {
      j["distribution"] = distribution.to_json();
      j["d_kl"] = d_kl;
      j["alignment"] = alignment;
      j["mean_margin"] = mean_margin;
    }
    return j;
  }
};

struct FairnessReport {
  AttributeId attribute = AttributeId::gender;
  std::vector<OccupationEvalRow> rows;
  double mean_d_kl = 0.0;
  double mean_alignment = 0.0;
  double mean_margin = 0.0;
  std::optional<FidResult> fid;
  nlohmann::json provenance;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const {
    nlohmann::json jr = nlohmann::json::array();
    for (const auto& r : rows) jr.push_back(r.to_json());
    nlohmann::json j{{"kind", "inctok-fairness-report"},
                     {"version", 1},
                     {"attribute", attribute_name(attribute)},
                     {"rows", jr},
                     {"aggregate",
                      {{"mean_d_kl", mean_d_kl},
                       {"mean_alignment", mean_alignment},
                       {"mean_margin", mean_margin}}},
                     {"provenance", provenance},
                     {"warnings", warnings}};
    if (fid) {
      j["aggregate"]["fid"] = fid->value;
      j["aggregate"]["fid_rank_deficient"] = fid->rank_deficient;
    }
    return j;
  }

  // Plain-text table: one row per occupation plus the aggregate line.
  // Arrows mark the preferred direction of each metric.
  std::string to_table() const {
    std::string bar(72, '-');
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-16s %10s %12s %12s %8s\n", "occupation",
                  "n", "D_KL (down)", "align (up)", "margin");
    out += buf;
    out += bar + "\n";
    for (const auto& r : rows) {
      if (!r.present) {
        std::snprintf(buf, sizeof buf, "%-16s %10s %12s %12s %8s\n",
                      r.occupation.c_str(), "-", "absent", "-", "-");
        out += buf;
        continue;
      }
      std::snprintf(buf, sizeof buf, "%-16s %10lld %12.4f %12.4f %8.4f\n",
                    r.occupation.c_str(), (long long)r.distribution.n_total, r.d_kl,
                    r.alignment, r.mean_margin);
      out += buf;
    }
    out += bar + "\n";
    std::string fid_text = "n/a";
    if (fid) {
      std::snprintf(buf, sizeof buf, "%.4f%s", fid->value,
                    fid->rank_deficient ? " (rank-deficient)" : "");
      fid_text = buf;
    }
    std::snprintf(buf, sizeof buf, "%-16s %10s %12.4f %12.4f %8.4f\n", "mean", "",
                  mean_d_kl, mean_alignment, mean_margin);
    out += buf;
    out += "FID (down): " + fid_text + "\n";
    return out;
  }
};

struct EvalConfig {
  AttributeId attribute = AttributeId::gender;
  std::vector<std::string> occupations;
  // Optional directory of reference PNGs for FID; empty disables the metric.
  std::filesystem::path reference_dir;
};

namespace detail_eval {

inline std::vector<std::filesystem::path> sorted_pngs(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  std::error_code ec;
  for (auto it = std::filesystem::directory_iterator(dir, ec);
       it != std::filesystem::directory_iterator(); ++it)
    if (it->path().extension() == ".png") out.push_back(it->path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string digest_png_directory(const std::filesystem::path& dir) {
  std::string acc;
  for (const auto& p : sorted_pngs(dir)) {
    std::ifstream f(p, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
    acc += p.filename().string() + ":" + detail::sha256_hex(bytes) + "\n";
  }
  return detail::sha256_hex(acc);
}

}  // namespace detail_eval

// Evaluates a generation run directory: per occupation, classify every image,
// build the class distribution, and score alignment against the
// placeholder-stripped base prompt; aggregate metrics average the present
// rows and FID pools all images against the configured reference set.
inline FairnessReport evaluate_run(const std::filesystem::path& run_dir,
                                   const Taxonomy& tax, const EvalConfig& cfg,
                                   const SimilarityScorer& scorer,
                                   const FeatureExtractor* fx = nullptr) {
  require(!cfg.occupations.empty(), Errc::config, "no occupations to evaluate");
  const SensitiveAttribute& attr = tax.attribute(cfg.attribute);

  FairnessReport report;
  report.attribute = cfg.attribute;

  std::vector<Image> pooled;
  double kl_sum = 0.0, align_sum = 0.0, margin_sum = 0.0;
  int present = 0;
  for (const auto& occ : cfg.occupations) {
    OccupationEvalRow row;
    row.occupation = occ;
    std::filesystem::path dir = run_dir / occ;
    auto files = detail_eval::sorted_pngs(dir);
    if (files.empty()) {
      report.warnings.push_back("occupation '" + occ +
                                "' has no images; excluded from aggregates");
      report.rows.push_back(std::move(row));
      continue;
    }

    row.present = true;
    row.distribution = AttributeDistribution::empty_for(attr);
    std::vector<Image> images;
    images.reserve(files.size());
    double margin_acc = 0.0;
    for (const auto& p : files) {
      Image img = read_image_png(p);
      double margin = 0.0;
      row.distribution.add(classify_attribute(img, attr, scorer, &margin));
      margin_acc += margin;
      images.push_back(std::move(img));
    }
    row.d_kl = kl_to_uniform(row.distribution);
    row.mean_margin = margin_acc / double(images.size());
    std::string base_prompt = generation_prompt(tax, {}, occ);
    row.alignment = alignment_score(images, base_prompt, scorer);

    kl_sum += row.d_kl;
    align_sum += row.alignment;
    margin_sum += row.mean_margin;
    present += 1;
    for (auto& img : images) pooled.push_back(std::move(img));
    report.rows.push_back(std::move(row));
  }

  require(present > 0, Errc::undefined_distribution,
          "no occupation in the run produced any image");
  report.mean_d_kl = kl_sum / double(present);
  report.mean_alignment = align_sum / double(present);
  report.mean_margin = margin_sum / double(present);

  report.provenance = nlohmann::json{{"run_dir", run_dir.string()},
                                     {"taxonomy_hash", tax.hash()},
                                     {"tool_version", kToolVersion}};
  std::ifstream runj(run_dir / "run.json");
  if (runj.good()) {
    try {
      report.provenance["run"] = nlohmann::json::parse(runj);
    } catch (const nlohmann::json::exception&) {
      report.warnings.push_back("run.json is unreadable; provenance incomplete");
    }
  } else {
    report.warnings.push_back("run.json missing; provenance incomplete");
  }

  if (!cfg.reference_dir.empty()) {
    require(fx != nullptr, Errc::config, "FID requested without a feature extractor");
    std::vector<Image> reference;
    for (const auto& p : detail_eval::sorted_pngs(cfg.reference_dir))
      reference.push_back(read_image_png(p));
    require(!reference.empty(), Errc::config,
            "reference directory has no PNG images: " + cfg.reference_dir.string());
    report.fid = compute_fid(pooled, reference, *fx);
    report.provenance["reference_digest"] =
        detail_eval::digest_png_directory(cfg.reference_dir);
    report.provenance["reference_dir"] = cfg.reference_dir.string();
  }
  return report;
}

// Writes the structured report and, optionally, the plain-text table.
inline void write_report(const FairnessReport& report, const std::filesystem::path& dir,
                         bool with_table = true) {
  std::filesystem::create_directories(dir);
  std::ofstream j(dir / "fairness_report.json", std::ios::trunc);
  require(j.good(), Errc::io, "cannot write fairness_report.json");
  j << report.to_json().dump(2) << "\n";
  if (with_table) {
    std::ofstream t(dir / "fairness_report.txt", std::ios::trunc);
    require(t.good(), Errc::io, "cannot write fairness_report.txt");
    t << report.to_table();
  }
}

}  // namespace inctok
