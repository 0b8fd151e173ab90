#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <vector>

#include "inctok/detail/mat.hpp"
#include "inctok/error.hpp"

namespace inctok {

// Reverse-mode automatic differentiation over Mat values. A Tape owns every
// intermediate of one forward computation; backward() walks the recording in
// reverse. Gradients are exact (no numeric shortcuts), which the training
// code and the finite-difference test harness both rely on.
//
// Frozen components (text transformer, denoiser) enter as constants, so the
// only gradients that survive to leaves are those of trainable inputs.

struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

class Tape {
 public:
  Var leaf(Mat m, bool requires_grad = false) {
    Node n;
    n.val = std::move(m);
    n.req = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  Var constant(Mat m) { return leaf(std::move(m), false); }

  const Mat& val(Var v) const { return nodes_[check(v)].val; }

  // Zero-filled if the node never received gradient during backward().
  const Mat& grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.empty()) {
      zero_cache_ = Mat(n.val.rows, n.val.cols);
      return zero_cache_;
    }
    return n.grad;
  }

  double scalar(Var v) const {
    const Mat& m = val(v);
    require(m.rows == 1 && m.cols == 1, Errc::contract, "scalar() on non 1x1 value");
    return m.v[0];
  }

  // ---- arithmetic -------------------------------------------------------

  Var add(Var a, Var b) {
    require(val(a).same_shape(val(b)), Errc::contract, "add shape mismatch");
    Mat out = val(a);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += val(b).v[i];
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    require(val(a).same_shape(val(b)), Errc::contract, "sub shape mismatch");
    Mat out = val(a);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= val(b).v[i];
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      Mat neg = g;
      for (double& x : neg.v) x = -x;
      t.accumulate(b, neg);
    });
  }

  Var mul(Var a, Var b) {  // elementwise
    require(val(a).same_shape(val(b)), Errc::contract, "mul shape mismatch");
    Mat out = val(a);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= val(b).v[i];
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      Mat ga = g, gb = g;
      const Mat& av = t.val(a);
      const Mat& bv = t.val(b);
      for (size_t i = 0; i < g.v.size(); ++i) {
        ga.v[i] *= bv.v[i];
        gb.v[i] *= av.v[i];
      }
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  Var scale(Var a, double s) {
    Mat out = val(a);
    for (double& x : out.v) x *= s;
    return record(std::move(out), {a}, [a, s](Tape& t, const Mat& g) {
      Mat ga = g;
      for (double& x : ga.v) x *= s;
      t.accumulate(a, ga);
    });
  }

  Var add_scalar(Var a, double s) {
    Mat out = val(a);
    for (double& x : out.v) x += s;
    return record(std::move(out), {a}, [a](Tape& t, const Mat& g) { t.accumulate(a, g); });
  }

  Var matmul(Var a, Var b) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    require(av.cols == bv.rows, Errc::contract, "matmul shape mismatch");
    Mat out = matmul_plain(av, bv);
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      t.accumulate(a, matmul_plain(g, transpose_plain(t.val(b))));
      t.accumulate(b, matmul_plain(transpose_plain(t.val(a)), g));
    });
  }

  Var transpose(Var a) {
    Mat out = transpose_plain(val(a));
    return record(std::move(out), {a},
                  [a](Tape& t, const Mat& g) { t.accumulate(a, transpose_plain(g)); });
  }

  // Broadcast-add a 1xC row vector to every row of x.
  Var add_rowvec(Var x, Var b) {
    const Mat& xv = val(x);
    const Mat& bv = val(b);
    require(bv.rows == 1 && bv.cols == xv.cols, Errc::contract, "add_rowvec shape mismatch");
    Mat out = xv;
    for (int r = 0; r < out.rows; ++r)
      for (int c = 0; c < out.cols; ++c) out.at(r, c) += bv.at(0, c);
    return record(std::move(out), {x, b}, [x, b](Tape& t, const Mat& g) {
      t.accumulate(x, g);
      Mat gb(1, g.cols);
      for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) gb.at(0, c) += g.at(r, c);
      t.accumulate(b, gb);
    });
  }

  // ---- nonlinearities ---------------------------------------------------

  Var tanh_op(Var a) {
    Mat out = val(a);
    for (double& x : out.v) x = std::tanh(x);
    int self_hint = int(nodes_.size());
    return record(std::move(out), {a}, [a, self_hint](Tape& t, const Mat& g) {
      const Mat& y = t.nodes_[self_hint].val;
      Mat ga = g;
      for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] *= 1.0 - y.v[i] * y.v[i];
      t.accumulate(a, ga);
    });
  }

  // Exact erf-based GELU so analytic and finite-difference gradients agree.
  Var gelu(Var a) {
    Mat out = val(a);
    for (double& x : out.v) x = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2_));
    return record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      const Mat& xv = t.val(a);
      Mat ga = g;
      for (size_t i = 0; i < ga.v.size(); ++i) {
        double x = xv.v[i];
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2_));
        double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        ga.v[i] *= cdf + x * pdf;
      }
      t.accumulate(a, ga);
    });
  }

  Var row_softmax(Var a) {
    Mat out = val(a);
    for (int r = 0; r < out.rows; ++r) {
      double mx = out.at(r, 0);
      for (int c = 1; c < out.cols; ++c) mx = std::max(mx, out.at(r, c));
      double sum = 0.0;
      for (int c = 0; c < out.cols; ++c) {
        out.at(r, c) = std::exp(out.at(r, c) - mx);
        sum += out.at(r, c);
      }
      for (int c = 0; c < out.cols; ++c) out.at(r, c) /= sum;
    }
    int self_hint = int(nodes_.size());
    return record(std::move(out), {a}, [a, self_hint](Tape& t, const Mat& g) {
      const Mat& s = t.nodes_[self_hint].val;
      Mat ga = g;
      for (int r = 0; r < s.rows; ++r) {
        double dot = 0.0;
        for (int c = 0; c < s.cols; ++c) dot += g.at(r, c) * s.at(r, c);
        for (int c = 0; c < s.cols; ++c) ga.at(r, c) = (g.at(r, c) - dot) * s.at(r, c);
      }
      t.accumulate(a, ga);
    });
  }

  // Per-row layer norm with affine gain/bias (both 1xC).
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Mat& xv = val(x);
    const Mat& gv = val(gain);
    const Mat& bv = val(bias);
    require(gv.rows == 1 && gv.cols == xv.cols && bv.rows == 1 && bv.cols == xv.cols,
            Errc::contract, "layer_norm affine shape mismatch");
    Mat out(xv.rows, xv.cols);
    Mat xhat(xv.rows, xv.cols);
    std::vector<double> inv_std(xv.rows);
    for (int r = 0; r < xv.rows; ++r) {
      double mean = 0.0;
      for (int c = 0; c < xv.cols; ++c) mean += xv.at(r, c);
      mean /= xv.cols;
      double var = 0.0;
      for (int c = 0; c < xv.cols; ++c) {
        double d = xv.at(r, c) - mean;
        var += d * d;
      }
      var /= xv.cols;
      inv_std[r] = 1.0 / std::sqrt(var + eps);
      for (int c = 0; c < xv.cols; ++c) {
        xhat.at(r, c) = (xv.at(r, c) - mean) * inv_std[r];
        out.at(r, c) = xhat.at(r, c) * gv.at(0, c) + bv.at(0, c);
      }
    }
    auto xh = std::make_shared<Mat>(std::move(xhat));
    auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
    return record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xh, istd](Tape& t, const Mat& g) {
      const Mat& gv = t.val(gain);
      int rows = g.rows, cols = g.cols;
      Mat gx(rows, cols), ggain(1, cols), gbias(1, cols);
      for (int r = 0; r < rows; ++r) {
        double mean_gy = 0.0, mean_gyxh = 0.0;
        for (int c = 0; c < cols; ++c) {
          double gy = g.at(r, c) * gv.at(0, c);
          mean_gy += gy;
          mean_gyxh += gy * xh->at(r, c);
          ggain.at(0, c) += g.at(r, c) * xh->at(r, c);
          gbias.at(0, c) += g.at(r, c);
        }
        mean_gy /= cols;
        mean_gyxh /= cols;
        for (int c = 0; c < cols; ++c) {
          double gy = g.at(r, c) * gv.at(0, c);
          gx.at(r, c) = ((*istd)[r]) * (gy - mean_gy - xh->at(r, c) * mean_gyxh);
        }
      }
      t.accumulate(x, gx);
      t.accumulate(gain, ggain);
      t.accumulate(bias, gbias);
    });
  }

  // ---- structure --------------------------------------------------------

  Var slice_rows(Var a, int r0, int r1) {
    const Mat& av = val(a);
    require(0 <= r0 && r0 < r1 && r1 <= av.rows, Errc::contract, "slice_rows out of range");
    Mat out(r1 - r0, av.cols);
    for (int r = r0; r < r1; ++r)
      for (int c = 0; c < av.cols; ++c) out.at(r - r0, c) = av.at(r, c);
    return record(std::move(out), {a}, [a, r0](Tape& t, const Mat& g) {
      Mat ga(t.val(a).rows, t.val(a).cols);
      for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) ga.at(r + r0, c) = g.at(r, c);
      t.accumulate(a, ga);
    });
  }

  Var slice_cols(Var a, int c0, int c1) {
    const Mat& av = val(a);
    require(0 <= c0 && c0 < c1 && c1 <= av.cols, Errc::contract, "slice_cols out of range");
    Mat out(av.rows, c1 - c0);
    for (int r = 0; r < av.rows; ++r)
      for (int c = c0; c < c1; ++c) out.at(r, c - c0) = av.at(r, c);
    return record(std::move(out), {a}, [a, c0](Tape& t, const Mat& g) {
      Mat ga(t.val(a).rows, t.val(a).cols);
      for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) ga.at(r, c + c0) = g.at(r, c);
      t.accumulate(a, ga);
    });
  }

  Var concat_rows(Var a, Var b) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    require(av.cols == bv.cols, Errc::contract, "concat_rows column mismatch");
    Mat out(av.rows + bv.rows, av.cols);
    for (int r = 0; r < av.rows; ++r)
      for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c);
    for (int r = 0; r < bv.rows; ++r)
      for (int c = 0; c < bv.cols; ++c) out.at(av.rows + r, c) = bv.at(r, c);
    int split = av.rows;
    return record(std::move(out), {a, b}, [a, b, split](Tape& t, const Mat& g) {
      Mat ga(split, g.cols), gb(g.rows - split, g.cols);
      for (int r = 0; r < split; ++r)
        for (int c = 0; c < g.cols; ++c) ga.at(r, c) = g.at(r, c);
      for (int r = split; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) gb.at(r - split, c) = g.at(r, c);
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  Var concat_cols(Var a, Var b) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    require(av.rows == bv.rows, Errc::contract, "concat_cols row mismatch");
    Mat out(av.rows, av.cols + bv.cols);
    for (int r = 0; r < av.rows; ++r) {
      for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c);
      for (int c = 0; c < bv.cols; ++c) out.at(r, av.cols + c) = bv.at(r, c);
    }
    int split = av.cols;
    return record(std::move(out), {a, b}, [a, b, split](Tape& t, const Mat& g) {
      Mat ga(g.rows, split), gb(g.rows, g.cols - split);
      for (int r = 0; r < g.rows; ++r) {
        for (int c = 0; c < split; ++c) ga.at(r, c) = g.at(r, c);
        for (int c = split; c < g.cols; ++c) gb.at(r, c - split) = g.at(r, c);
      }
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  // Replace rows [r0, r0+block.rows) of base with block. Gradient to the
  // replaced region flows to the block only; base keeps the rest.
  Var replace_rows(Var base, int r0, Var block) {
    const Mat& bv = val(base);
    const Mat& blv = val(block);
    require(blv.cols == bv.cols, Errc::contract, "replace_rows column mismatch");
    require(r0 >= 0 && r0 + blv.rows <= bv.rows, Errc::contract, "replace_rows out of range");
    Mat out = bv;
    for (int r = 0; r < blv.rows; ++r)
      for (int c = 0; c < blv.cols; ++c) out.at(r0 + r, c) = blv.at(r, c);
    int nb = blv.rows;
    return record(std::move(out), {base, block}, [base, block, r0, nb](Tape& t, const Mat& g) {
      Mat gb = g;
      Mat gblock(nb, g.cols);
      for (int r = 0; r < nb; ++r)
        for (int c = 0; c < g.cols; ++c) {
          gblock.at(r, c) = g.at(r0 + r, c);
          gb.at(r0 + r, c) = 0.0;
        }
      t.accumulate(base, gb);
      t.accumulate(block, gblock);
    });
  }

  // ---- reductions -------------------------------------------------------

  Var sum_rows(Var a) {  // NxC -> 1xC
    const Mat& av = val(a);
    Mat out(1, av.cols);
    for (int r = 0; r < av.rows; ++r)
      for (int c = 0; c < av.cols; ++c) out.at(0, c) += av.at(r, c);
    return record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      const Mat& av = t.val(a);
      Mat ga(av.rows, av.cols);
      for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) ga.at(r, c) = g.at(0, c);
      t.accumulate(a, ga);
    });
  }

  Var sum_all(Var a) {
    const Mat& av = val(a);
    Mat out(1, 1);
    for (double x : av.v) out.v[0] += x;
    return record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      const Mat& av = t.val(a);
      Mat ga(av.rows, av.cols, g.v[0]);
      t.accumulate(a, ga);
    });
  }

  Var mean_all(Var a) { return scale(sum_all(a), 1.0 / double(val(a).size())); }

  // Mean squared error over all elements.
  Var mse(Var a, Var b) {
    require(val(a).same_shape(val(b)), Errc::contract, "mse shape mismatch");
    const Mat& av = val(a);
    const Mat& bv = val(b);
    double n = double(av.size());
    Mat out(1, 1);
    for (size_t i = 0; i < av.v.size(); ++i) {
      double d = av.v[i] - bv.v[i];
      out.v[0] += d * d;
    }
    out.v[0] /= n;
    return record(std::move(out), {a, b}, [a, b, n](Tape& t, const Mat& g) {
      const Mat& av = t.val(a);
      const Mat& bv = t.val(b);
      Mat ga(av.rows, av.cols), gb(av.rows, av.cols);
      double s = 2.0 * g.v[0] / n;
      for (size_t i = 0; i < av.v.size(); ++i) {
        double d = s * (av.v[i] - bv.v[i]);
        ga.v[i] = d;
        gb.v[i] = -d;
      }
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  // Forward copy with no gradient path (used for the anchor branch).
  Var detach(Var a) { return leaf(val(a), false); }

  // ---- backward ---------------------------------------------------------

  void backward(Var root) {
    Node& rn = nodes_[check(root)];
    require(rn.val.rows == 1 && rn.val.cols == 1, Errc::contract,
            "backward root must be a scalar");
    rn.grad = Mat(1, 1, 1.0);
    for (int i = root.i; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.req || n.grad.empty() || !n.back) continue;
      n.back(*this, n.grad);
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    bool req = false;
    std::function<void(Tape&, const Mat&)> back;
  };

  static constexpr double inv_sqrt2_ = 0.7071067811865475244;

  int check(Var v) const {
    require(v.i >= 0 && v.i < int(nodes_.size()), Errc::contract, "invalid tape variable");
    return v.i;
  }

  void accumulate(Var v, const Mat& g) {
    Node& n = nodes_[check(v)];
    if (!n.req) return;
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      for (size_t i = 0; i < g.v.size(); ++i) n.grad.v[i] += g.v[i];
    }
  }

  template <typename F>
  Var record(Mat out, std::initializer_list<Var> parents, F&& back) {
    bool req = false;
    for (Var p : parents) req = req || nodes_[check(p)].req;
    Node n;
    n.val = std::move(out);
    n.req = req;
    if (req) n.back = std::forward<F>(back);
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  mutable Mat zero_cache_;
};

}  // namespace inctok
