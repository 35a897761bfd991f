#include "ipslt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ipslt/kernels.hpp"

namespace ipslt {

namespace {

template <typename Real>
std::vector<Real>& ensure_grad(const std::shared_ptr<TensorNode<Real>>& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), Real(0));
  return n->grad;
}

template <typename Real>
bool recording(Tape<Real>* tape,
               std::initializer_list<const Tensor<Real>*> inputs) {
  if (!tape) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks the output differentiable and pre-allocates gradient buffers so
// that after backward() every participating tensor has a populated grad.
template <typename Real>
void arm(Tensor<Real>& out, std::initializer_list<const Tensor<Real>*> inputs) {
  out.set_requires_grad(true);
  ensure_grad(out.node());
  for (const auto* t : inputs) {
    if (t->requires_grad()) ensure_grad(t->node());
  }
}

template <typename Real>
void check_2d(const Tensor<Real>& t, const char* op) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " +
                     t.shape_str());
  }
}

template <typename Real>
void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b,
                      const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes disagree: " + a.shape_str() +
                     " vs " + b.shape_str());
  }
}

struct Lanes {
  std::size_t count;   // number of independent slices along the axis
  std::size_t stride;  // element stride within a slice
  int n;               // slice length
};

template <typename Real>
Lanes lanes_for_axis(const Tensor<Real>& t, int axis, const char* op) {
  int nd = t.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw UsageError(std::string(op) + ": axis out of range for " +
                     t.shape_str());
  }
  Lanes l;
  l.n = t.dim(axis);
  l.stride = 1;
  for (int i = axis + 1; i < nd; ++i) l.stride *= static_cast<std::size_t>(t.dim(i));
  l.count = t.size() / static_cast<std::size_t>(l.n);
  return l;
}

inline std::size_t lane_base(const Lanes& l, std::size_t lane) {
  return (lane / l.stride) * (l.stride * static_cast<std::size_t>(l.n)) +
         lane % l.stride;
}

}  // namespace

template <typename Real>
Tensor<Real> add(Tape<Real>* tape, const Tensor<Real>& a,
                 const Tensor<Real>& b) {
  check_same_shape(a, b, "add");
  Tensor<Real> out(a.shape());
  const std::size_t n = out.size();
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  if (recording(tape, {&a, &b})) {
    arm(out, {&a, &b});
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record([an, bn, on] {
      const auto& go = on->grad;
      if (go.empty()) return;
      if (an->requires_grad) {
        auto& ga = ensure_grad(an);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (bn->requires_grad) {
        auto& gb = ensure_grad(bn);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> add_rowvec(Tape<Real>* tape, const Tensor<Real>& a,
                        const Tensor<Real>& b) {
  check_2d(a, "add_rowvec");
  if (b.ndim() != 1 || b.dim(0) != a.dim(1)) {
    throw ShapeError("add_rowvec: shapes disagree: " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  const int rows = a.dim(0), cols = a.dim(1);
  Tensor<Real> out(a.shape());
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) out.at(i, j) = a.at(i, j) + b.at(j);
  }
  if (recording(tape, {&a, &b})) {
    arm(out, {&a, &b});
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record([an, bn, on, rows, cols] {
      const auto& go = on->grad;
      if (go.empty()) return;
      if (an->requires_grad) {
        auto& ga = ensure_grad(an);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (bn->requires_grad) {
        auto& gb = ensure_grad(bn);
        for (int i = 0; i < rows; ++i) {
          for (int j = 0; j < cols; ++j) {
            gb[static_cast<std::size_t>(j)] +=
                go[static_cast<std::size_t>(i) * cols + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> scale(Tape<Real>* tape, const Tensor<Real>& a, Real c) {
  Tensor<Real> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = c * av[i];
  if (recording(tape, {&a})) {
    arm(out, {&a});
    auto an = a.node(), on = out.node();
    tape->record([an, on, c] {
      const auto& go = on->grad;
      if (go.empty() || !an->requires_grad) return;
      auto& ga = ensure_grad(an);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mul(Tape<Real>* tape, const Tensor<Real>& a,
                 const Tensor<Real>& b) {
  check_same_shape(a, b, "mul");
  Tensor<Real> out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
  if (recording(tape, {&a, &b})) {
    arm(out, {&a, &b});
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record([an, bn, on] {
      const auto& go = on->grad;
      if (go.empty()) return;
      if (an->requires_grad) {
        auto& ga = ensure_grad(an);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += bn->value[i] * go[i];
      }
      if (bn->requires_grad) {
        auto& gb = ensure_grad(bn);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += an->value[i] * go[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> matmul(Tape<Real>* tape, const Tensor<Real>& a,
                    const Tensor<Real>& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree: " + a.shape_str() +
                     " vs " + b.shape_str());
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Real> out({m, n});
  kernels::matmul_nn(a.values().data(), b.values().data(), out.values().data(),
                     m, k, n, false);
  if (recording(tape, {&a, &b})) {
    arm(out, {&a, &b});
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record([an, bn, on, m, k, n] {
      const auto& go = on->grad;
      if (go.empty()) return;
      if (an->requires_grad) {
        auto& ga = ensure_grad(an);
        // dA = dC * B^T
        kernels::matmul_nt(go.data(), bn->value.data(), ga.data(), m, n, k,
                           true);
      }
      if (bn->requires_grad) {
        auto& gb = ensure_grad(bn);
        // dB = A^T * dC
        kernels::matmul_tn(an->value.data(), go.data(), gb.data(), k, m, n,
                           true);
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> transpose(Tape<Real>* tape, const Tensor<Real>& a) {
  check_2d(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor<Real> out({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  }
  if (recording(tape, {&a})) {
    arm(out, {&a});
    auto an = a.node(), on = out.node();
    tape->record([an, on, m, n] {
      const auto& go = on->grad;
      if (go.empty() || !an->requires_grad) return;
      auto& ga = ensure_grad(an);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          ga[static_cast<std::size_t>(i) * n + j] +=
              go[static_cast<std::size_t>(j) * m + i];
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> concat(Tape<Real>* tape, const std::vector<Tensor<Real>>& parts,
                    int axis) {
  if (parts.empty()) throw UsageError("concat: no parts");
  if (axis != 0 && axis != 1) throw UsageError("concat: axis must be 0 or 1");
  for (const auto& p : parts) check_2d(p, "concat");
  const int other = axis == 0 ? 1 : 0;
  const int fixed = parts[0].dim(other);
  int total = 0;
  for (const auto& p : parts) {
    if (p.dim(other) != fixed) {
      throw ShapeError("concat: shapes disagree: " + parts[0].shape_str() +
                       " vs " + p.shape_str());
    }
    total += p.dim(axis);
  }
  const int rows = axis == 0 ? total : fixed;
  const int cols = axis == 0 ? fixed : total;
  Tensor<Real> out({rows, cols});
  int offset = 0;
  for (const auto& p : parts) {
    const int pr = p.dim(0), pc = p.dim(1);
    for (int i = 0; i < pr; ++i) {
      for (int j = 0; j < pc; ++j) {
        if (axis == 0) {
          out.at(offset + i, j) = p.at(i, j);
        } else {
          out.at(i, offset + j) = p.at(i, j);
        }
      }
    }
    offset += p.dim(axis);
  }
  bool rec = false;
  for (const auto& p : parts) rec = rec || (tape && p.requires_grad());
  if (rec) {
    for (const auto& p : parts) {
      if (p.requires_grad()) ensure_grad(p.node());
    }
    out.set_requires_grad(true);
    ensure_grad(out.node());
    std::vector<std::shared_ptr<TensorNode<Real>>> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    auto on = out.node();
    tape->record([pnodes, on, axis, cols] {
      const auto& go = on->grad;
      if (go.empty()) return;
      int offset2 = 0;
      for (const auto& pn : pnodes) {
        const int pr = pn->shape[0], pc = pn->shape[1];
        if (pn->requires_grad) {
          auto& gp = ensure_grad(pn);
          for (int i = 0; i < pr; ++i) {
            for (int j = 0; j < pc; ++j) {
              const std::size_t src =
                  axis == 0 ? static_cast<std::size_t>(offset2 + i) * cols + j
                            : static_cast<std::size_t>(i) * cols + offset2 + j;
              gp[static_cast<std::size_t>(i) * pc + j] += go[src];
            }
          }
        }
        offset2 += axis == 0 ? pr : pc;
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> slice(Tape<Real>* tape, const Tensor<Real>& a, int axis,
                   int start, int len) {
  check_2d(a, "slice");
  if (axis != 0 && axis != 1) throw UsageError("slice: axis must be 0 or 1");
  if (start < 0 || len <= 0 || start + len > a.dim(axis)) {
    throw UsageError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") outside " +
                     a.shape_str());
  }
  const int rows = axis == 0 ? len : a.dim(0);
  const int cols = axis == 0 ? a.dim(1) : len;
  Tensor<Real> out({rows, cols});
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      out.at(i, j) = axis == 0 ? a.at(start + i, j) : a.at(i, start + j);
    }
  }
  if (recording(tape, {&a})) {
    arm(out, {&a});
    auto an = a.node(), on = out.node();
    const int acols = a.dim(1);
    tape->record([an, on, axis, start, rows, cols, acols] {
      const auto& go = on->grad;
      if (go.empty() || !an->requires_grad) return;
      auto& ga = ensure_grad(an);
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
          const std::size_t dst =
              axis == 0 ? static_cast<std::size_t>(start + i) * acols + j
                        : static_cast<std::size_t>(i) * acols + start + j;
          ga[dst] += go[static_cast<std::size_t>(i) * cols + j];
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> relu(Tape<Real>* tape, const Tensor<Real>& a) {
  Tensor<Real> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i)
    ov[i] = av[i] > Real(0) ? av[i] : Real(0);
  if (recording(tape, {&a})) {
    arm(out, {&a});
    auto an = a.node(), on = out.node();
    tape->record([an, on] {
      const auto& go = on->grad;
      if (go.empty() || !an->requires_grad) return;
      auto& ga = ensure_grad(an);
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (an->value[i] > Real(0)) ga[i] += go[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> softmax(Tape<Real>* tape, const Tensor<Real>& a, int axis) {
  for (Real v : a.values()) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  const Lanes l = lanes_for_axis(a, axis, "softmax");
  Tensor<Real> out(a.shape());
  const auto& x = a.values();
  auto& y = out.values();
  if (l.stride == 1) {
    kernels::row_softmax(x.data(), y.data(), static_cast<int>(l.count), l.n);
    // a fully masked lane (all -inf) has no distribution to normalize
    for (std::size_t lane = 0; lane < l.count; ++lane) {
      if (std::isnan(y[lane * static_cast<std::size_t>(l.n)])) {
        throw NumericError("softmax: lane has empty support");
      }
    }
  } else {
    for (std::size_t lane = 0; lane < l.count; ++lane) {
      const std::size_t base = lane_base(l, lane);
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int i = 0; i < l.n; ++i) mx = std::max(mx, x[base + i * l.stride]);
      if (!(mx > -std::numeric_limits<Real>::infinity())) {
        throw NumericError("softmax: lane has empty support");
      }
      Real sum = 0;
      for (int i = 0; i < l.n; ++i) {
        const std::size_t idx = base + i * l.stride;
        y[idx] = std::exp(x[idx] - mx);
        sum += y[idx];
      }
      const Real inv = Real(1) / sum;
      for (int i = 0; i < l.n; ++i) y[base + i * l.stride] *= inv;
    }
  }
  if (recording(tape, {&a})) {
    arm(out, {&a});
    auto an = a.node(), on = out.node();
    tape->record([an, on, l] {
      const auto& go = on->grad;
      if (go.empty() || !an->requires_grad) return;
      auto& ga = ensure_grad(an);
      const auto& yv = on->value;
      for (std::size_t lane = 0; lane < l.count; ++lane) {
        const std::size_t base = lane_base(l, lane);
        Real dot = 0;
        for (int i = 0; i < l.n; ++i) {
          const std::size_t idx = base + i * l.stride;
          dot += yv[idx] * go[idx];
        }
        for (int i = 0; i < l.n; ++i) {
          const std::size_t idx = base + i * l.stride;
          ga[idx] += yv[idx] * (go[idx] - dot);
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> layer_norm(Tape<Real>* tape, const Tensor<Real>& x,
                        const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps) {
  const int nd = x.ndim();
  const int c = x.dim(nd - 1);
  if (c < 2) throw UsageError("layer_norm: last dimension must be >= 2");
  if (gain.ndim() != 1 || gain.dim(0) != c || bias.ndim() != 1 ||
      bias.dim(0) != c) {
    throw ShapeError("layer_norm: affine params " + gain.shape_str() + "/" +
                     bias.shape_str() + " do not match " + x.shape_str());
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(c);
  Tensor<Real> out(x.shape());
  std::vector<Real> xhat(x.size());
  std::vector<Real> inv_std(rows);
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  auto& ov = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(c);
    Real mu = 0;
    for (int j = 0; j < c; ++j) mu += xv[base + j];
    mu /= Real(c);
    Real var = 0;
    for (int j = 0; j < c; ++j) {
      const Real d = xv[base + j] - mu;
      var += d * d;
    }
    var /= Real(c);
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int j = 0; j < c; ++j) {
      xhat[base + j] = (xv[base + j] - mu) * is;
      ov[base + j] = xhat[base + j] * gv[j] + bv[j];
    }
  }
  if (recording(tape, {&x, &gain, &bias})) {
    arm(out, {&x, &gain, &bias});
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    tape->record([xn, gn, bn, on, xhat = std::move(xhat),
                  inv_std = std::move(inv_std), rows, c] {
      const auto& go = on->grad;
      if (go.empty()) return;
      const auto& gv2 = gn->value;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(c);
        if (gn->requires_grad) {
          auto& gg = ensure_grad(gn);
          for (int j = 0; j < c; ++j) gg[j] += go[base + j] * xhat[base + j];
        }
        if (bn->requires_grad) {
          auto& gb = ensure_grad(bn);
          for (int j = 0; j < c; ++j) gb[j] += go[base + j];
        }
        if (xn->requires_grad) {
          auto& gx = ensure_grad(xn);
          Real mean_dyg = 0, mean_dyg_xhat = 0;
          for (int j = 0; j < c; ++j) {
            const Real dyg = go[base + j] * gv2[j];
            mean_dyg += dyg;
            mean_dyg_xhat += dyg * xhat[base + j];
          }
          mean_dyg /= Real(c);
          mean_dyg_xhat /= Real(c);
          for (int j = 0; j < c; ++j) {
            const Real dyg = go[base + j] * gv2[j];
            gx[base + j] +=
                inv_std[r] * (dyg - mean_dyg - xhat[base + j] * mean_dyg_xhat);
          }
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> embedding_lookup(Tape<Real>* tape, const Tensor<Real>& table,
                              const std::vector<int>& ids) {
  check_2d(table, "embedding_lookup");
  if (ids.empty()) throw UsageError("embedding_lookup: empty id list");
  const int v = table.dim(0), c = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(v));
    }
  }
  const int t = static_cast<int>(ids.size());
  Tensor<Real> out({t, c});
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < c; ++j) out.at(i, j) = table.at(ids[i], j);
  }
  if (recording(tape, {&table})) {
    arm(out, {&table});
    auto tn = table.node(), on = out.node();
    tape->record([tn, on, ids, c] {
      const auto& go = on->grad;
      if (go.empty() || !tn->requires_grad) return;
      auto& gt = ensure_grad(tn);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (int j = 0; j < c; ++j) {
          gt[static_cast<std::size_t>(ids[i]) * c + j] +=
              go[i * static_cast<std::size_t>(c) + j];
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> dropout(Tape<Real>* tape, const Tensor<Real>& x, Real p,
                     bool training, Rng* rng) {
  if (p < Real(0) || p >= Real(1)) {
    throw UsageError("dropout: rate must be in [0, 1)");
  }
  if (!training || p == Real(0)) return x;  // eval mode is the identity
  if (!rng) throw UsageError("dropout: training mode needs an rng");
  const Real keep_scale = Real(1) / (Real(1) - p);
  std::vector<Real> factor(x.size());
  for (auto& f : factor)
    f = rng->bernoulli(static_cast<double>(p)) ? Real(0) : keep_scale;
  Tensor<Real> out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * factor[i];
  if (recording(tape, {&x})) {
    arm(out, {&x});
    auto xn = x.node(), on = out.node();
    tape->record([xn, on, factor = std::move(factor)] {
      const auto& go = on->grad;
      if (go.empty() || !xn->requires_grad) return;
      auto& gx = ensure_grad(xn);
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += factor[i] * go[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sum(Tape<Real>* tape, const Tensor<Real>& a) {
  Real s = 0;
  for (Real v : a.values()) s += v;
  Tensor<Real> out = Tensor<Real>::scalar(s);
  if (recording(tape, {&a})) {
    arm(out, {&a});
    auto an = a.node(), on = out.node();
    tape->record([an, on] {
      const auto& go = on->grad;
      if (go.empty() || !an->requires_grad) return;
      auto& ga = ensure_grad(an);
      for (auto& g : ga) g += go[0];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mean(Tape<Real>* tape, const Tensor<Real>& a) {
  Real s = 0;
  for (Real v : a.values()) s += v;
  const Real inv = Real(1) / static_cast<Real>(a.size());
  Tensor<Real> out = Tensor<Real>::scalar(s * inv);
  if (recording(tape, {&a})) {
    arm(out, {&a});
    auto an = a.node(), on = out.node();
    tape->record([an, on, inv] {
      const auto& go = on->grad;
      if (go.empty() || !an->requires_grad) return;
      auto& ga = ensure_grad(an);
      for (auto& g : ga) g += go[0] * inv;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> cross_entropy_from_logits(Tape<Real>* tape,
                                       const Tensor<Real>& logits,
                                       const std::vector<int>& targets,
                                       int pad_id) {
  check_2d(logits, "cross_entropy");
  const int t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != t) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets vs logits " + logits.shape_str());
  }
  int live = 0;
  for (int id : targets) {
    if (id == pad_id) continue;
    if (id < 0 || id >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(v));
    }
    ++live;
  }
  // probabilities are kept for the backward rule
  std::vector<Real> probs(logits.size(), Real(0));
  const auto& x = logits.values();
  Real loss = 0;
  for (int i = 0; i < t; ++i) {
    if (targets[i] == pad_id) continue;
    const std::size_t base = static_cast<std::size_t>(i) * v;
    Real mx = x[base];
    for (int j = 1; j < v; ++j) mx = std::max(mx, x[base + j]);
    Real sum = 0;
    for (int j = 0; j < v; ++j) {
      probs[base + j] = std::exp(x[base + j] - mx);
      sum += probs[base + j];
    }
    const Real inv = Real(1) / sum;
    for (int j = 0; j < v; ++j) probs[base + j] *= inv;
    loss += std::log(sum) + mx - x[base + targets[i]];
  }
  if (live > 0) loss /= static_cast<Real>(live);
  Tensor<Real> out = Tensor<Real>::scalar(loss);
  if (live > 0 && recording(tape, {&logits})) {
    arm(out, {&logits});
    auto ln = logits.node(), on = out.node();
    tape->record([ln, on, probs = std::move(probs), targets, pad_id, t, v,
                  live] {
      const auto& go = on->grad;
      if (go.empty() || !ln->requires_grad) return;
      auto& gl = ensure_grad(ln);
      const Real w = go[0] / static_cast<Real>(live);
      for (int i = 0; i < t; ++i) {
        if (targets[i] == pad_id) continue;
        const std::size_t base = static_cast<std::size_t>(i) * v;
        for (int j = 0; j < v; ++j) gl[base + j] += w * probs[base + j];
        gl[base + targets[i]] -= w;
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> kl_divergence_from_logits(Tape<Real>* tape,
                                       const Tensor<Real>& student,
                                       const Tensor<Real>& teacher,
                                       const std::vector<bool>& is_pad) {
  check_2d(student, "kl_divergence");
  check_same_shape(student, teacher, "kl_divergence");
  const int t = student.dim(0), v = student.dim(1);
  if (static_cast<int>(is_pad.size()) != t) {
    throw UsageError("kl_divergence: pad mask length " +
                     std::to_string(is_pad.size()) + " vs " +
                     std::to_string(t) + " rows");
  }
  int live = 0;
  for (bool p : is_pad) live += p ? 0 : 1;

  auto log_softmax_row = [v](const std::vector<Real>& x, std::size_t base,
                             std::vector<Real>& out_lp) {
    Real mx = x[base];
    for (int j = 1; j < v; ++j) mx = std::max(mx, x[base + j]);
    Real sum = 0;
    for (int j = 0; j < v; ++j) sum += std::exp(x[base + j] - mx);
    const Real lse = std::log(sum) + mx;
    for (int j = 0; j < v; ++j) out_lp[static_cast<std::size_t>(j)] = x[base + j] - lse;
  };

  std::vector<Real> p_probs(student.size(), Real(0));  // teacher distribution
  std::vector<Real> q_probs(student.size(), Real(0));  // student distribution
  std::vector<Real> lp(v), lq(v);
  Real loss = 0;
  for (int i = 0; i < t; ++i) {
    if (is_pad[static_cast<std::size_t>(i)]) continue;
    const std::size_t base = static_cast<std::size_t>(i) * v;
    log_softmax_row(teacher.values(), base, lp);
    log_softmax_row(student.values(), base, lq);
    for (int j = 0; j < v; ++j) {
      const Real pj = std::exp(lp[j]);
      p_probs[base + j] = pj;
      q_probs[base + j] = std::exp(lq[j]);
      loss += pj * (lp[j] - lq[j]);
    }
  }
  if (live > 0) loss /= static_cast<Real>(live);
  Tensor<Real> out = Tensor<Real>::scalar(loss);
  // Gradient reaches only the student; the teacher acts as a constant.
  if (live > 0 && recording(tape, {&student})) {
    arm(out, {&student});
    auto sn = student.node(), on = out.node();
    tape->record([sn, on, p_probs = std::move(p_probs),
                  q_probs = std::move(q_probs), is_pad, t, v, live] {
      const auto& go = on->grad;
      if (go.empty() || !sn->requires_grad) return;
      auto& gs = ensure_grad(sn);
      const Real w = go[0] / static_cast<Real>(live);
      for (int i = 0; i < t; ++i) {
        if (is_pad[static_cast<std::size_t>(i)]) continue;
        const std::size_t base = static_cast<std::size_t>(i) * v;
        for (int j = 0; j < v; ++j) {
          gs[base + j] += w * (q_probs[base + j] - p_probs[base + j]);
        }
      }
    });
  }
  return out;
}

AttentionMaskSpec AttentionMaskSpec::causal(int n) {
  AttentionMaskSpec m;
  m.rows = n;
  m.cols = n;
  m.allow.assign(static_cast<std::size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) m.allow[static_cast<std::size_t>(i) * n + j] = 1;
  }
  return m;
}

AttentionMaskSpec AttentionMaskSpec::key_prefix(int rows, int cols, int valid) {
  if (valid < 1 || valid > cols) {
    throw UsageError("attention mask: valid key count " +
                     std::to_string(valid) + " outside [1, " +
                     std::to_string(cols) + "]");
  }
  AttentionMaskSpec m;
  m.rows = rows;
  m.cols = cols;
  m.allow.assign(static_cast<std::size_t>(rows) * cols, 0);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < valid; ++j) m.allow[static_cast<std::size_t>(i) * cols + j] = 1;
  }
  return m;
}

template <typename Real>
Tensor<Real> apply_attention_mask(Tape<Real>* tape, const Tensor<Real>& scores,
                                  const AttentionMaskSpec& mask) {
  check_2d(scores, "attention mask");
  if (scores.dim(0) != mask.rows || scores.dim(1) != mask.cols) {
    throw ShapeError("attention mask: scores " + scores.shape_str() +
                     " vs mask " + shape_string({mask.rows, mask.cols}));
  }
  const int rows = mask.rows, cols = mask.cols;
  for (int i = 0; i < rows; ++i) {
    bool any = false;
    for (int j = 0; j < cols && !any; ++j) any = mask.allowed(i, j);
    if (!any) {
      throw UsageError("attention mask: row " + std::to_string(i) +
                       " has no allowed positions");
    }
  }
  Tensor<Real> out(scores.shape());
  const Real neg_inf = -std::numeric_limits<Real>::infinity();
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      out.at(i, j) = mask.allowed(i, j) ? scores.at(i, j) : neg_inf;
    }
  }
  if (recording(tape, {&scores})) {
    arm(out, {&scores});
    auto sn = scores.node(), on = out.node();
    auto allow = mask.allow;
    tape->record([sn, on, allow = std::move(allow)] {
      const auto& go = on->grad;
      if (go.empty() || !sn->requires_grad) return;
      auto& gs = ensure_grad(sn);
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (allow[i]) gs[i] += go[i];
      }
    });
  }
  return out;
}

#define IPSLT_INSTANTIATE_OPS(Real)                                           \
  template Tensor<Real> add(Tape<Real>*, const Tensor<Real>&,                 \
                            const Tensor<Real>&);                             \
  template Tensor<Real> add_rowvec(Tape<Real>*, const Tensor<Real>&,          \
                                   const Tensor<Real>&);                      \
  template Tensor<Real> scale(Tape<Real>*, const Tensor<Real>&, Real);        \
  template Tensor<Real> mul(Tape<Real>*, const Tensor<Real>&,                 \
                            const Tensor<Real>&);                             \
  template Tensor<Real> matmul(Tape<Real>*, const Tensor<Real>&,              \
                               const Tensor<Real>&);                          \
  template Tensor<Real> transpose(Tape<Real>*, const Tensor<Real>&);          \
  template Tensor<Real> concat(Tape<Real>*, const std::vector<Tensor<Real>>&, \
                               int);                                          \
  template Tensor<Real> slice(Tape<Real>*, const Tensor<Real>&, int, int,     \
                              int);                                           \
  template Tensor<Real> relu(Tape<Real>*, const Tensor<Real>&);               \
  template Tensor<Real> softmax(Tape<Real>*, const Tensor<Real>&, int);       \
  template Tensor<Real> layer_norm(Tape<Real>*, const Tensor<Real>&,          \
                                   const Tensor<Real>&, const Tensor<Real>&,  \
                                   Real);                                     \
  template Tensor<Real> embedding_lookup(Tape<Real>*, const Tensor<Real>&,    \
                                         const std::vector<int>&);            \
  template Tensor<Real> dropout(Tape<Real>*, const Tensor<Real>&, Real, bool, \
                                Rng*);                                        \
  template Tensor<Real> sum(Tape<Real>*, const Tensor<Real>&);                \
  template Tensor<Real> mean(Tape<Real>*, const Tensor<Real>&);               \
  template Tensor<Real> cross_entropy_from_logits(                            \
      Tape<Real>*, const Tensor<Real>&, const std::vector<int>&, int);        \
  template Tensor<Real> kl_divergence_from_logits(                            \
      Tape<Real>*, const Tensor<Real>&, const Tensor<Real>&,                  \
      const std::vector<bool>&);                                              \
  template Tensor<Real> apply_attention_mask(Tape<Real>*,                     \
                                             const Tensor<Real>&,             \
                                             const AttentionMaskSpec&);

IPSLT_INSTANTIATE_OPS(float)
IPSLT_INSTANTIATE_OPS(double)

#undef IPSLT_INSTANTIATE_OPS

}  // namespace ipslt
