#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

#include "inctok/detail/mat.hpp"
#include "inctok/detail/rng.hpp"

namespace testsupport {

using inctok::Mat;

// Central finite differences of a scalar-valued function with respect to one
// matrix argument. This is the independent gradient oracle: it never touches
// the tape, so agreement with Tape::backward is a real cross-check.
inline Mat finite_difference(std::function<double(const Mat&)> f, const Mat& x,
                             double h = 1e-6) {
  Mat g(x.rows, x.cols);
  Mat p = x;
  for (size_t i = 0; i < x.v.size(); ++i) {
    double orig = p.v[i];
    p.v[i] = orig + h;
    double fp = f(p);
    p.v[i] = orig - h;
    double fm = f(p);
    p.v[i] = orig;
    g.v[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Largest relative disagreement between two gradients. The denominator
// floors at 1e-6 so that genuinely tiny gradients compare absolutely.
inline double max_rel_err(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    double denom = std::max({std::abs(a.v[i]), std::abs(b.v[i]), 1e-6});
    worst = std::max(worst, std::abs(a.v[i] - b.v[i]) / denom);
  }
  return worst;
}

inline Mat seeded_mat(uint64_t seed, int rows, int cols, double stddev = 1.0) {
  auto rng = inctok::detail::make_rng({seed});
  return inctok::detail::randn(rng, rows, cols, stddev);
}

// Unique scratch directory beneath the build tree; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path() / "inctok_tests";
    std::filesystem::create_directories(base);
    static std::atomic<uint64_t> counter{0};
    path_ = base / (tag + "-" + std::to_string(::getpid()) + "-" +
                    std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testsupport
