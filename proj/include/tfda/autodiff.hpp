#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tfda/rng.hpp"
#include "tfda/tensor.hpp"

namespace tfda {

// Node handle on a Tape.
using Var = int;

// Reverse-mode autodiff over a Wengert list. Every forward pass in the
// library (training or not) goes through the same ops, so there is exactly
// one implementation of the numerics to test; callers that never invoke
// backward() just pay a small bookkeeping overhead.
class Tape {
 public:
  struct Node {
    Tensor value;
    std::vector<double> grad;  // allocated lazily, same layout as value.values
    std::function<void(Tape&)> backward;
  };

  Var leaf(Tensor value) { return push(std::move(value), nullptr); }

  // Index the next pushed node will receive; lets op builders capture their
  // own output index in the backward closure.
  Var next_index() const { return static_cast<Var>(nodes_.size()); }

  Var push(Tensor value, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(value), {}, std::move(back)});
    return static_cast<Var>(nodes_.size() - 1);
  }

  const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }

  double scalar(Var v) const {
    const Tensor& t = val(v);
    if (t.numel() != 1) throw Error("Tape::scalar: node has shape " + shape_str(t.shape));
    return t.values[0];
  }

  // Gradient buffer for node v, allocated (zero) on first touch.
  std::vector<double>& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v)];
    if (n.grad.empty()) n.grad.assign(n.value.values.size(), 0.0);
    return n.grad;
  }

  bool has_grad(Var v) const { return !nodes_[static_cast<std::size_t>(v)].grad.empty(); }

  void backward(Var loss) {
    const Tensor& lt = val(loss);
    if (lt.numel() != 1) throw Error("Tape::backward: loss must be scalar, got shape " + shape_str(lt.shape));
    if (!std::isfinite(lt.values[0])) throw Error("Tape::backward: loss is not finite");
    grad(loss)[0] += 1.0;
    for (Var i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && !n.grad.empty()) n.backward(*this);
    }
  }

  // Copy of node value with grad attached (zeros if backward never reached it).
  Tensor extract(Var v) {
    Tensor t = val(v);
    t.grad = grad(v);
    return t;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

namespace opdetail {

inline void require_same_shape(const Tape& t, Var a, Var b, const char* op) {
  if (t.val(a).shape != t.val(b).shape) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(t.val(a).shape) + " vs " +
                shape_str(t.val(b).shape));
  }
}

}  // namespace opdetail

// ---- elementwise ops --------------------------------------------------------

inline Var add(Tape& t, Var a, Var b) {
  opdetail::require_same_shape(t, a, b, "add");
  Tensor out = t.val(a);
  const auto& bv = t.val(b).values;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += bv[i];
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, b](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& ga = tp.grad(a);
    auto& gb = tp.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  opdetail::require_same_shape(t, a, b, "sub");
  Tensor out = t.val(a);
  const auto& bv = t.val(b).values;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= bv[i];
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, b](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& ga = tp.grad(a);
    auto& gb = tp.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
}

inline Var mul(Tape& t, Var a, Var b) {
  opdetail::require_same_shape(t, a, b, "mul");
  Tensor out = t.val(a);
  const auto& bv = t.val(b).values;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= bv[i];
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, b](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& av = tp.val(a).values;
    const auto& bv2 = tp.val(b).values;
    auto& ga = tp.grad(a);
    auto& gb = tp.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bv2[i];
      gb[i] += g[i] * av[i];
    }
  });
}

inline Var div_elem(Tape& t, Var a, Var b) {
  opdetail::require_same_shape(t, a, b, "div_elem");
  Tensor out = t.val(a);
  const auto& bv = t.val(b).values;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] /= bv[i];
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, b](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& av = tp.val(a).values;
    const auto& bv2 = tp.val(b).values;
    auto& ga = tp.grad(a);
    auto& gb = tp.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double inv = 1.0 / bv2[i];
      ga[i] += g[i] * inv;
      gb[i] -= g[i] * av[i] * inv * inv;
    }
  });
}

inline Var scale(Tape& t, Var a, double c) {
  Tensor out = t.val(a);
  for (double& x : out.values) x *= c;
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, c](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline Var add_const(Tape& t, Var a, double c) {
  Tensor out = t.val(a);
  for (double& x : out.values) x += c;
  Var v = t.next_index();
  return t.push(std::move(out), [v, a](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Var relu(Tape& t, Var a) {
  Tensor out = t.val(a);
  for (double& x : out.values) x = x > 0.0 ? x : 0.0;  // subgradient at 0 is 0
  Var v = t.next_index();
  return t.push(std::move(out), [v, a](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& av = tp.val(a).values;
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g[i];
    }
  });
}

// log(max(x, floor_)); zero gradient where the clamp is active.
inline Var log_clamped(Tape& t, Var a, double floor_ = 1e-12) {
  Tensor out = t.val(a);
  for (double& x : out.values) x = std::log(x > floor_ ? x : floor_);
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, floor_](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& av = tp.val(a).values;
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > floor_) ga[i] += g[i] / av[i];
    }
  });
}

inline Var pow_const(Tape& t, Var a, double e) {
  Tensor out = t.val(a);
  for (double& x : out.values) x = std::pow(x, e);
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, e](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& av = tp.val(a).values;
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * e * std::pow(av[i], e - 1.0);
  });
}

// sqrt with zero gradient at 0 (used on squared norms that can vanish).
inline Var sqrt_guard(Tape& t, Var a) {
  Tensor out = t.val(a);
  for (double& x : out.values) x = std::sqrt(x > 0.0 ? x : 0.0);
  Var v = t.next_index();
  return t.push(std::move(out), [v, a](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& ov = tp.val(v).values;
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (ov[i] > 0.0) ga[i] += g[i] * 0.5 / ov[i];
    }
  });
}

// ---- reductions and row ops -------------------------------------------------

inline Var sum(Tape& t, Var a) {
  double s = 0.0;
  for (double x : t.val(a).values) s += x;
  Var v = t.next_index();
  return t.push(Tensor::scalar(s), [v, a](Tape& tp) {
    double g = tp.grad(v)[0];
    auto& ga = tp.grad(a);
    for (double& x : ga) x += g;
  });
}

// [B x C] -> [B]
inline Var row_sum(Tape& t, Var a) {
  require_rank(t.val(a), 2, "row_sum");
  int B = t.val(a).dim(0), C = t.val(a).dim(1);
  Tensor out({B});
  for (int i = 0; i < B; ++i) {
    double s = 0.0;
    for (int j = 0; j < C; ++j) s += t.val(a).at(i, j);
    out.at(i) = s;
  }
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, B, C](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& ga = tp.grad(a);
    for (int i = 0; i < B; ++i)
      for (int j = 0; j < C; ++j) ga[static_cast<std::size_t>(i) * C + j] += g[static_cast<std::size_t>(i)];
  });
}

// [B x C] -> [B]; gradient routed to the argmax, ties to the lowest index.
inline Var row_max(Tape& t, Var a) {
  require_rank(t.val(a), 2, "row_max");
  int B = t.val(a).dim(0), C = t.val(a).dim(1);
  Tensor out({B});
  std::vector<int> arg(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    int best = 0;
    double bv = t.val(a).at(i, 0);
    for (int j = 1; j < C; ++j) {
      double x = t.val(a).at(i, j);
      if (x > bv) {
        bv = x;
        best = j;
      }
    }
    out.at(i) = bv;
    arg[static_cast<std::size_t>(i)] = best;
  }
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, C, arg](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < arg.size(); ++i) ga[i * C + arg[i]] += g[i];
  });
}

// [B x D] x [B x D] -> [B], per-row dot product.
inline Var dot_rows(Tape& t, Var a, Var b) {
  opdetail::require_same_shape(t, a, b, "dot_rows");
  require_rank(t.val(a), 2, "dot_rows");
  int B = t.val(a).dim(0), D = t.val(a).dim(1);
  Tensor out({B});
  for (int i = 0; i < B; ++i) {
    double s = 0.0;
    for (int j = 0; j < D; ++j) s += t.val(a).at(i, j) * t.val(b).at(i, j);
    out.at(i) = s;
  }
  Var v = t.next_index();
  return t.push(std::move(out), [v, a, b, B, D](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& av = tp.val(a).values;
    const auto& bv = tp.val(b).values;
    auto& ga = tp.grad(a);
    auto& gb = tp.grad(b);
    for (int i = 0; i < B; ++i) {
      double gi = g[static_cast<std::size_t>(i)];
      for (int j = 0; j < D; ++j) {
        std::size_t k = static_cast<std::size_t>(i) * D + j;
        ga[k] += gi * bv[k];
        gb[k] += gi * av[k];
      }
    }
  });
}

// [B x C] scaled per row by s: [B] -> [B x C]
inline Var scale_rows(Tape& t, Var x, Var s) {
  require_rank(t.val(x), 2, "scale_rows");
  require_rank(t.val(s), 1, "scale_rows");
  int B = t.val(x).dim(0), C = t.val(x).dim(1);
  if (t.val(s).dim(0) != B) {
    throw Error("scale_rows: row count " + std::to_string(B) + " vs scale length " + std::to_string(t.val(s).dim(0)));
  }
  Tensor out = t.val(x);
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < C; ++j) out.at(i, j) *= t.val(s).at(i);
  Var v = t.next_index();
  return t.push(std::move(out), [v, x, s, B, C](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& xv = tp.val(x).values;
    const auto& sv = tp.val(s).values;
    auto& gx = tp.grad(x);
    auto& gs = tp.grad(s);
    for (int i = 0; i < B; ++i) {
      double acc = 0.0;
      for (int j = 0; j < C; ++j) {
        std::size_t k = static_cast<std::size_t>(i) * C + j;
        gx[k] += g[k] * sv[static_cast<std::size_t>(i)];
        acc += g[k] * xv[k];
      }
      gs[static_cast<std::size_t>(i)] += acc;
    }
  });
}

// Gather a subset of rows of a [B x C] tensor; backward scatter-adds.
inline Var select_rows(Tape& t, Var x, std::vector<int> rows) {
  require_rank(t.val(x), 2, "select_rows");
  int B = t.val(x).dim(0), C = t.val(x).dim(1);
  for (int r : rows) {
    if (r < 0 || r >= B) throw Error("select_rows: row index " + std::to_string(r) + " out of range for " + std::to_string(B) + " rows");
  }
  Tensor out({static_cast<int>(rows.size()), C});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < C; ++j) out.at(static_cast<int>(i), j) = t.val(x).at(rows[i], j);
  Var v = t.next_index();
  return t.push(std::move(out), [v, x, C, rows](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int j = 0; j < C; ++j)
        gx[static_cast<std::size_t>(rows[i]) * C + j] += g[i * C + j];
  });
}

// ---- dense layers -------------------------------------------------------------

// [B x D] * [D x C] -> [B x C]
inline Var matmul(Tape& t, Var x, Var w) {
  require_rank(t.val(x), 2, "matmul");
  require_rank(t.val(w), 2, "matmul");
  int B = t.val(x).dim(0), D = t.val(x).dim(1);
  int D2 = t.val(w).dim(0), C = t.val(w).dim(1);
  if (D != D2) throw Error("matmul: inner dimensions " + std::to_string(D) + " vs " + std::to_string(D2));
  Tensor out({B, C});
  const double* xv = t.val(x).values.data();
  const double* wv = t.val(w).values.data();
  for (int i = 0; i < B; ++i) {
    double* orow = out.values.data() + static_cast<std::size_t>(i) * C;
    const double* xrow = xv + static_cast<std::size_t>(i) * D;
    for (int k = 0; k < D; ++k) {
      double xik = xrow[k];
      const double* wrow = wv + static_cast<std::size_t>(k) * C;
      for (int j = 0; j < C; ++j) orow[j] += xik * wrow[j];
    }
  }
  Var v = t.next_index();
  return t.push(std::move(out), [v, x, w, B, D, C](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& xv2 = tp.val(x).values;
    const auto& wv2 = tp.val(w).values;
    auto& gx = tp.grad(x);
    auto& gw = tp.grad(w);
    for (int i = 0; i < B; ++i) {
      const double* grow = g.data() + static_cast<std::size_t>(i) * C;
      const double* xrow = xv2.data() + static_cast<std::size_t>(i) * D;
      double* gxrow = gx.data() + static_cast<std::size_t>(i) * D;
      for (int k = 0; k < D; ++k) {
        const double* wrow = wv2.data() + static_cast<std::size_t>(k) * C;
        double* gwrow = gw.data() + static_cast<std::size_t>(k) * C;
        double acc = 0.0;
        double xik = xrow[k];
        for (int j = 0; j < C; ++j) {
          acc += grow[j] * wrow[j];
          gwrow[j] += grow[j] * xik;
        }
        gxrow[k] += acc;
      }
    }
  });
}

// [B x C] + [C]
inline Var bias_add_row(Tape& t, Var x, Var b) {
  require_rank(t.val(x), 2, "bias_add_row");
  require_rank(t.val(b), 1, "bias_add_row");
  int B = t.val(x).dim(0), C = t.val(x).dim(1);
  if (t.val(b).dim(0) != C) {
    throw Error("bias_add_row: feature count " + std::to_string(C) + " vs bias length " + std::to_string(t.val(b).dim(0)));
  }
  Tensor out = t.val(x);
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < C; ++j) out.at(i, j) += t.val(b).at(j);
  Var v = t.next_index();
  return t.push(std::move(out), [v, x, b, B, C](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& gx = tp.grad(x);
    auto& gb = tp.grad(b);
    for (int i = 0; i < B; ++i)
      for (int j = 0; j < C; ++j) {
        std::size_t k = static_cast<std::size_t>(i) * C + j;
        gx[k] += g[k];
        gb[static_cast<std::size_t>(j)] += g[k];
      }
  });
}

// ---- convolution stack -------------------------------------------------------

// x: [B x Ch x S], w: [F x Ch x k], b: [F]; zero padding on both ends.
inline Var conv1d(Tape& t, Var x, Var w, Var b, int stride = 1, int padding = 0) {
  require_rank(t.val(x), 3, "conv1d");
  require_rank(t.val(w), 3, "conv1d");
  require_rank(t.val(b), 1, "conv1d");
  if (stride < 1) throw Error("conv1d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw Error("conv1d: padding must be >= 0, got " + std::to_string(padding));
  int B = t.val(x).dim(0), Ch = t.val(x).dim(1), S = t.val(x).dim(2);
  int F = t.val(w).dim(0), Chw = t.val(w).dim(1), K = t.val(w).dim(2);
  if (Ch != Chw) throw Error("conv1d: input channels " + std::to_string(Ch) + " vs weight channels " + std::to_string(Chw));
  if (t.val(b).dim(0) != F) throw Error("conv1d: filters " + std::to_string(F) + " vs bias length " + std::to_string(t.val(b).dim(0)));
  int So = (S + 2 * padding - K) / stride + 1;
  if (S + 2 * padding < K || So < 1) {
    throw Error("conv1d: length " + std::to_string(S) + " too small for kernel " + std::to_string(K) +
                " with padding " + std::to_string(padding));
  }

  Tensor out({B, F, So});
  {
    const double* xv = t.val(x).values.data();
    const double* wv = t.val(w).values.data();
    const double* bv = t.val(b).values.data();
    for (int bi = 0; bi < B; ++bi) {
      for (int f = 0; f < F; ++f) {
        double* orow = out.values.data() + (static_cast<std::size_t>(bi) * F + f) * So;
        for (int ti = 0; ti < So; ++ti) orow[ti] = bv[f];
        for (int c = 0; c < Ch; ++c) {
          const double* xrow = xv + (static_cast<std::size_t>(bi) * Ch + c) * S;
          const double* wrow = wv + (static_cast<std::size_t>(f) * Ch + c) * K;
          for (int j = 0; j < K; ++j) {
            double wj = wrow[j];
            if (wj == 0.0) continue;
            // source index s = ti*stride + j - padding must lie in [0, S)
            int t_lo = 0, t_hi = So;
            if (stride == 1) {
              t_lo = std::max(0, padding - j);
              t_hi = std::min(So, S + padding - j);
              const double* xs = xrow + (t_lo + j - padding);
              for (int ti = t_lo; ti < t_hi; ++ti) orow[ti] += wj * xs[ti - t_lo];
            } else {
              for (int ti = t_lo; ti < t_hi; ++ti) {
                int s = ti * stride + j - padding;
                if (s >= 0 && s < S) orow[ti] += wj * xrow[s];
              }
            }
          }
        }
      }
    }
  }

  Var v = t.next_index();
  return t.push(std::move(out), [v, x, w, b, B, Ch, S, F, K, So, stride, padding](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& xv = tp.val(x).values;
    const auto& wv = tp.val(w).values;
    auto& gx = tp.grad(x);
    auto& gw = tp.grad(w);
    auto& gb = tp.grad(b);
    for (int bi = 0; bi < B; ++bi) {
      for (int f = 0; f < F; ++f) {
        const double* grow = g.data() + (static_cast<std::size_t>(bi) * F + f) * So;
        double acc_b = 0.0;
        for (int ti = 0; ti < So; ++ti) acc_b += grow[ti];
        gb[static_cast<std::size_t>(f)] += acc_b;
        for (int c = 0; c < Ch; ++c) {
          const double* xrow = xv.data() + (static_cast<std::size_t>(bi) * Ch + c) * S;
          const double* wrow = wv.data() + (static_cast<std::size_t>(f) * Ch + c) * K;
          double* gxrow = gx.data() + (static_cast<std::size_t>(bi) * Ch + c) * S;
          double* gwrow = gw.data() + (static_cast<std::size_t>(f) * Ch + c) * K;
          for (int j = 0; j < K; ++j) {
            if (stride == 1) {
              int t_lo = std::max(0, padding - j);
              int t_hi = std::min(So, S + padding - j);
              const double* xs = xrow + (t_lo + j - padding);
              double* gxs = gxrow + (t_lo + j - padding);
              double wj = wrow[j];
              double acc_w = 0.0;
              for (int ti = t_lo; ti < t_hi; ++ti) {
                double gt = grow[ti];
                acc_w += gt * xs[ti - t_lo];
                gxs[ti - t_lo] += gt * wj;
              }
              gwrow[j] += acc_w;
            } else {
              double wj = wrow[j];
              double acc_w = 0.0;
              for (int ti = 0; ti < So; ++ti) {
                int s = ti * stride + j - padding;
                if (s >= 0 && s < S) {
                  acc_w += grow[ti] * xrow[s];
                  gxrow[s] += grow[ti] * wj;
                }
              }
              gwrow[j] += acc_w;
            }
          }
        }
      }
    }
  });
}

// [B x F x S] -> [B x F x So]; ties keep the earliest position.
inline Var maxpool1d(Tape& t, Var x, int k, int stride) {
  require_rank(t.val(x), 3, "maxpool1d");
  if (k < 1 || stride < 1) throw Error("maxpool1d: kernel and stride must be >= 1");
  int B = t.val(x).dim(0), F = t.val(x).dim(1), S = t.val(x).dim(2);
  if (S < k) throw Error("maxpool1d: length " + std::to_string(S) + " smaller than window " + std::to_string(k));
  int So = (S - k) / stride + 1;
  Tensor out({B, F, So});
  std::vector<int> arg(static_cast<std::size_t>(B) * F * So);
  for (int bi = 0; bi < B; ++bi)
    for (int f = 0; f < F; ++f) {
      const double* xrow = t.val(x).values.data() + (static_cast<std::size_t>(bi) * F + f) * S;
      double* orow = out.values.data() + (static_cast<std::size_t>(bi) * F + f) * So;
      int* arow = arg.data() + (static_cast<std::size_t>(bi) * F + f) * So;
      for (int ti = 0; ti < So; ++ti) {
        int base = ti * stride;
        int best = base;
        double bv = xrow[base];
        for (int j = 1; j < k; ++j) {
          if (xrow[base + j] > bv) {
            bv = xrow[base + j];
            best = base + j;
          }
        }
        orow[ti] = bv;
        arow[ti] = best;
      }
    }
  Var v = t.next_index();
  return t.push(std::move(out), [v, x, B, F, S, So, arg](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& gx = tp.grad(x);
    for (int bi = 0; bi < B; ++bi)
      for (int f = 0; f < F; ++f) {
        std::size_t obase = (static_cast<std::size_t>(bi) * F + f) * So;
        std::size_t xbase = (static_cast<std::size_t>(bi) * F + f) * S;
        for (int ti = 0; ti < So; ++ti) gx[xbase + arg[obase + ti]] += g[obase + ti];
      }
  });
}

// [B x F x S] -> [B x F]
inline Var global_avg_pool(Tape& t, Var x) {
  require_rank(t.val(x), 3, "global_avg_pool");
  int B = t.val(x).dim(0), F = t.val(x).dim(1), S = t.val(x).dim(2);
  Tensor out({B, F});
  for (int bi = 0; bi < B; ++bi)
    for (int f = 0; f < F; ++f) {
      double s = 0.0;
      for (int ti = 0; ti < S; ++ti) s += t.val(x).at(bi, f, ti);
      out.at(bi, f) = s / S;
    }
  Var v = t.next_index();
  return t.push(std::move(out), [v, x, B, F, S](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& gx = tp.grad(x);
    double inv = 1.0 / S;
    for (int bi = 0; bi < B; ++bi)
      for (int f = 0; f < F; ++f) {
        double gv = g[static_cast<std::size_t>(bi) * F + f] * inv;
        std::size_t base = (static_cast<std::size_t>(bi) * F + f) * S;
        for (int ti = 0; ti < S; ++ti) gx[base + ti] += gv;
      }
  });
}

// ---- batch norm ---------------------------------------------------------------

// Per-feature statistics over batch and time of a [B x F x S] tensor.
// use_batch_stats: normalize with the current batch's mean/population variance;
// otherwise with running_mean/running_var. update_running folds the batch
// statistics into the running buffers with the given momentum (new = (1-m)*old
// + m*batch). running_* tensors are plain storage, never differentiated.
inline Var batchnorm1d(Tape& t, Var x, Var gamma, Var beta, Tensor* running_mean, Tensor* running_var,
                       double momentum, double eps, bool use_batch_stats, bool update_running) {
  require_rank(t.val(x), 3, "batchnorm1d");
  int B = t.val(x).dim(0), F = t.val(x).dim(1), S = t.val(x).dim(2);
  require_rank(t.val(gamma), 1, "batchnorm1d");
  require_rank(t.val(beta), 1, "batchnorm1d");
  if (t.val(gamma).dim(0) != F || t.val(beta).dim(0) != F) {
    throw Error("batchnorm1d: feature count " + std::to_string(F) + " vs gamma/beta length " +
                std::to_string(t.val(gamma).dim(0)) + "/" + std::to_string(t.val(beta).dim(0)));
  }
  if (!running_mean || !running_var || running_mean->numel() != F || running_var->numel() != F) {
    throw Error("batchnorm1d: running statistics missing or of wrong length");
  }

  std::int64_t N = static_cast<std::int64_t>(B) * S;
  std::vector<double> mean(static_cast<std::size_t>(F)), var(static_cast<std::size_t>(F));
  if (use_batch_stats) {
    for (int f = 0; f < F; ++f) {
      double m = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        const double* xrow = t.val(x).values.data() + (static_cast<std::size_t>(bi) * F + f) * S;
        for (int ti = 0; ti < S; ++ti) m += xrow[ti];
    }
      m /= static_cast<double>(N);
      double vv = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        const double* xrow = t.val(x).values.data() + (static_cast<std::size_t>(bi) * F + f) * S;
        for (int ti = 0; ti < S; ++ti) {
          double d = xrow[ti] - m;
          vv += d * d;
        }
      }
      vv /= static_cast<double>(N);
      mean[static_cast<std::size_t>(f)] = m;
      var[static_cast<std::size_t>(f)] = vv;
    }
    if (update_running) {
      for (int f = 0; f < F; ++f) {
        running_mean->values[static_cast<std::size_t>(f)] =
            (1.0 - momentum) * running_mean->values[static_cast<std::size_t>(f)] + momentum * mean[static_cast<std::size_t>(f)];
        running_var->values[static_cast<std::size_t>(f)] =
            (1.0 - momentum) * running_var->values[static_cast<std::size_t>(f)] + momentum * var[static_cast<std::size_t>(f)];
      }
    }
  } else {
    for (int f = 0; f < F; ++f) {
      mean[static_cast<std::size_t>(f)] = running_mean->values[static_cast<std::size_t>(f)];
      var[static_cast<std::size_t>(f)] = running_var->values[static_cast<std::size_t>(f)];
    }
  }

  Tensor out({B, F, S});
  for (int bi = 0; bi < B; ++bi)
    for (int f = 0; f < F; ++f) {
      double inv_std = 1.0 / std::sqrt(var[static_cast<std::size_t>(f)] + eps);
      double gm = t.val(gamma).at(f), bt = t.val(beta).at(f), mn = mean[static_cast<std::size_t>(f)];
      const double* xrow = t.val(x).values.data() + (static_cast<std::size_t>(bi) * F + f) * S;
      double* orow = out.values.data() + (static_cast<std::size_t>(bi) * F + f) * S;
      for (int ti = 0; ti < S; ++ti) orow[ti] = gm * (xrow[ti] - mn) * inv_std + bt;
    }

  Var v = t.next_index();
  return t.push(std::move(out), [v, x, gamma, beta, B, F, S, N, mean, var, eps, use_batch_stats](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& xv = tp.val(x).values;
    const auto& gmv = tp.val(gamma).values;
    auto& gx = tp.grad(x);
    auto& ggm = tp.grad(gamma);
    auto& gbt = tp.grad(beta);
    for (int f = 0; f < F; ++f) {
      double mn = mean[static_cast<std::size_t>(f)];
      double inv_std = 1.0 / std::sqrt(var[static_cast<std::size_t>(f)] + eps);
      double sum_g = 0.0, sum_gx = 0.0;  // sum of g and of g * xhat
      for (int bi = 0; bi < B; ++bi) {
        std::size_t base = (static_cast<std::size_t>(bi) * F + f) * S;
        for (int ti = 0; ti < S; ++ti) {
          double gv = g[base + ti];
          sum_g += gv;
          sum_gx += gv * (xv[base + ti] - mn) * inv_std;
        }
      }
      ggm[static_cast<std::size_t>(f)] += sum_gx;
      gbt[static_cast<std::size_t>(f)] += sum_g;
      double gm = gmv[static_cast<std::size_t>(f)];
      if (use_batch_stats) {
        double invN = 1.0 / static_cast<double>(N);
        for (int bi = 0; bi < B; ++bi) {
          std::size_t base = (static_cast<std::size_t>(bi) * F + f) * S;
          for (int ti = 0; ti < S; ++ti) {
            double xhat = (xv[base + ti] - mn) * inv_std;
            gx[base + ti] += gm * inv_std * (g[base + ti] - sum_g * invN - xhat * sum_gx * invN);
          }
        }
      } else {
        for (int bi = 0; bi < B; ++bi) {
          std::size_t base = (static_cast<std::size_t>(bi) * F + f) * S;
          for (int ti = 0; ti < S; ++ti) gx[base + ti] += gm * inv_std * g[base + ti];
        }
      }
    }
  });
}

// ---- dropout -------------------------------------------------------------------

// Inverted dropout with a caller-supplied stream id; the mask is a pure
// function of (stream, element index), so a fixed stream gives a fixed mask.
inline Var dropout(Tape& t, Var x, double rate, std::uint64_t stream) {
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must be in [0,1), got " + std::to_string(rate));
  const Tensor& xin = t.val(x);
  auto mask = std::make_shared<std::vector<double>>(xin.values.size());
  {
    Rng rng(stream);
    double keep = 1.0 - rate;
    double inv_keep = 1.0 / keep;
    for (auto& m : *mask) m = (rng.uniform() < keep) ? inv_keep : 0.0;
  }
  Tensor out = xin;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= (*mask)[i];
  Var v = t.next_index();
  return t.push(std::move(out), [v, x, mask](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

// ---- softmax / normalization -----------------------------------------------------

// Row softmax of a [B x C] tensor, max-subtracted for stability.
inline Var softmax(Tape& t, Var x) {
  require_rank(t.val(x), 2, "softmax");
  int B = t.val(x).dim(0), C = t.val(x).dim(1);
  Tensor out({B, C});
  for (int i = 0; i < B; ++i) {
    double m = t.val(x).at(i, 0);
    for (int j = 1; j < C; ++j) m = std::max(m, t.val(x).at(i, j));
    double z = 0.0;
    for (int j = 0; j < C; ++j) {
      double e = std::exp(t.val(x).at(i, j) - m);
      out.at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < C; ++j) out.at(i, j) /= z;
  }
  Var v = t.next_index();
  return t.push(std::move(out), [v, x, B, C](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& p = tp.val(v).values;
    auto& gx = tp.grad(x);
    for (int i = 0; i < B; ++i) {
      std::size_t base = static_cast<std::size_t>(i) * C;
      double dot = 0.0;
      for (int j = 0; j < C; ++j) dot += g[base + j] * p[base + j];
      for (int j = 0; j < C; ++j) gx[base + j] += p[base + j] * (g[base + j] - dot);
    }
  });
}

// Row-wise x / max(||x||, eps) for [B x D].
inline Var l2_normalize(Tape& t, Var x, double eps = 1e-12) {
  require_rank(t.val(x), 2, "l2_normalize");
  int B = t.val(x).dim(0), D = t.val(x).dim(1);
  Tensor out({B, D});
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    double s = 0.0;
    for (int j = 0; j < D; ++j) s += t.val(x).at(i, j) * t.val(x).at(i, j);
    double n = std::sqrt(s);
    (*norms)[static_cast<std::size_t>(i)] = n;
    double m = std::max(n, eps);
    for (int j = 0; j < D; ++j) out.at(i, j) = t.val(x).at(i, j) / m;
  }
  Var v = t.next_index();
  return t.push(std::move(out), [v, x, B, D, eps, norms](Tape& tp) {
    const auto& g = tp.grad(v);
    const auto& y = tp.val(v).values;
    auto& gx = tp.grad(x);
    for (int i = 0; i < B; ++i) {
      std::size_t base = static_cast<std::size_t>(i) * D;
      double n = (*norms)[static_cast<std::size_t>(i)];
      if (n > eps) {
        double dot = 0.0;
        for (int j = 0; j < D; ++j) dot += g[base + j] * y[base + j];
        for (int j = 0; j < D; ++j) gx[base + j] += (g[base + j] - y[base + j] * dot) / n;
      } else {
        for (int j = 0; j < D; ++j) gx[base + j] += g[base + j] / eps;
      }
    }
  });
}

// ---- contrastive -----------------------------------------------------------------

// Per-row InfoNCE with a masked negative set. q, kpos: [B x D] unit rows on the
// tape; keys: constant [n x D] unit rows (a detached queue snapshot); neg[i]
// lists the key indices admitted as negatives for row i. Output: [B] losses.
// The positive term appears in the denominator alongside the admitted
// negatives; a row with an empty negative set contributes exactly 0.
inline Var info_nce_masked(Tape& t, Var q, Var kpos, std::shared_ptr<const Tensor> keys,
                           std::shared_ptr<const std::vector<std::vector<int>>> neg, double tau) {
  opdetail::require_same_shape(t, q, kpos, "info_nce_masked");
  require_rank(t.val(q), 2, "info_nce_masked");
  if (tau <= 0.0) throw Error("info_nce_masked: temperature must be positive");
  int B = t.val(q).dim(0), D = t.val(q).dim(1);
  if (static_cast<int>(neg->size()) != B) {
    throw Error("info_nce_masked: negative sets " + std::to_string(neg->size()) + " vs batch " + std::to_string(B));
  }
  int n = 0;
  if (keys->numel() > 0) {
    require_rank(*keys, 2, "info_nce_masked");
    if (keys->dim(1) != D) throw Error("info_nce_masked: key dim " + std::to_string(keys->dim(1)) + " vs query dim " + std::to_string(D));
    n = keys->dim(0);
  }
  for (const auto& row : *neg)
    for (int j : row) {
      if (j < 0 || j >= n) throw Error("info_nce_masked: negative index " + std::to_string(j) + " out of range");
    }

  Tensor out({B});
  for (int i = 0; i < B; ++i) {
    const auto& idx = (*neg)[static_cast<std::size_t>(i)];
    if (idx.empty()) {
      out.at(i) = 0.0;
      continue;
    }
    const double* qrow = t.val(q).values.data() + static_cast<std::size_t>(i) * D;
    const double* prow = t.val(kpos).values.data() + static_cast<std::size_t>(i) * D;
    double spos = 0.0;
    for (int d = 0; d < D; ++d) spos += qrow[d] * prow[d];
    spos /= tau;
    double m = spos;
    std::vector<double> s(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double* krow = keys->values.data() + static_cast<std::size_t>(idx[j]) * D;
      double sj = 0.0;
      for (int d = 0; d < D; ++d) sj += qrow[d] * krow[d];
      sj /= tau;
      s[j] = sj;
      m = std::max(m, sj);
    }
    double z = std::exp(spos - m);
    for (double sj : s) z += std::exp(sj - m);
    out.at(i) = -(spos - m - std::log(z));
  }

  Var v = t.next_index();
  return t.push(std::move(out), [v, q, kpos, keys, neg, tau, B, D](Tape& tp) {
    const auto& g = tp.grad(v);
    auto& gq = tp.grad(q);
    auto& gk = tp.grad(kpos);
    std::vector<double> dq(static_cast<std::size_t>(D));
    for (int i = 0; i < B; ++i) {
      const auto& idx = (*neg)[static_cast<std::size_t>(i)];
      if (idx.empty() || g[static_cast<std::size_t>(i)] == 0.0) continue;
      const double* qrow = tp.val(q).values.data() + static_cast<std::size_t>(i) * D;
      const double* prow = tp.val(kpos).values.data() + static_cast<std::size_t>(i) * D;
      double spos = 0.0;
      for (int d = 0; d < D; ++d) spos += qrow[d] * prow[d];
      spos /= tau;
      double m = spos;
      std::vector<double> s(idx.size());
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const double* krow = keys->values.data() + static_cast<std::size_t>(idx[j]) * D;
        double sj = 0.0;
        for (int d = 0; d < D; ++d) sj += qrow[d] * krow[d];
        sj /= tau;
        s[j] = sj;
        m = std::max(m, sj);
      }
      double z = std::exp(spos - m);
      for (double sj : s) z += std::exp(sj - m);
      double ppos = std::exp(spos - m) / z;
      double gi = g[static_cast<std::size_t>(i)] / tau;
      // dL/dq = ((ppos-1) kpos + sum_j p_j k_j) / tau ; dL/dkpos = (ppos-1) q / tau
      for (int d = 0; d < D; ++d) dq[static_cast<std::size_t>(d)] = (ppos - 1.0) * prow[d];
      for (std::size_t j = 0; j < idx.size(); ++j) {
        double pj = std::exp(s[j] - m) / z;
        const double* krow = keys->values.data() + static_cast<std::size_t>(idx[j]) * D;
        for (int d = 0; d < D; ++d) dq[static_cast<std::size_t>(d)] += pj * krow[d];
      }
      for (int d = 0; d < D; ++d) {
        gq[static_cast<std::size_t>(i) * D + d] += gi * dq[static_cast<std::size_t>(d)];
        gk[static_cast<std::size_t>(i) * D + d] += gi * (ppos - 1.0) * qrow[d];
      }
    }
  });
}

}  // namespace tfda
