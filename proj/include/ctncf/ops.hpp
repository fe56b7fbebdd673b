#pragma once

// Differentiable kernels. Each op computes its forward value eagerly and
// records a closure that accumulates input gradients from the output
// gradient. Where an op accepts leading batch axes, they are treated as
// independent rows.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ctncf/error.hpp"
#include "ctncf/tape.hpp"
#include "ctncf/tensor.hpp"

namespace ctncf::ops {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

}  // namespace detail

/// a[..., k] · b[k×n] -> [..., n]. Leading axes of `a` are flattened into rows.
inline Var matmul(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require(A.rank() >= 1 && B.rank() == 2 && A.shape().back() == B.dim(0),
                  "matmul shape mismatch: " + shape_str(A.shape()) + " * " +
                      shape_str(B.shape()));
  const std::size_t k = B.dim(0), n = B.dim(1), m = A.size() / k;
  Shape out_shape = A.shape();
  if (A.rank() == 1) out_shape = {n};
  else out_shape.back() = n;
  Tensor C(out_shape);
  auto a_data = A.data();
  auto b_data = B.data();
  auto c_data = C.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* c_row = &c_data[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_data[i * k + p];
      const double* b_row = &b_data[p * n];
      for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
  }
  return tape.push(std::move(C), {a, b}, [a, b, m, k, n](Tape& t, Var out) {
    auto dc = t.grad(out);
    if (t.requires_grad(a)) {
      auto da = t.grad(a);
      auto bv = t.value(b).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += dc[i * n + j] * bv[p * n + j];
          da[i * k + p] += s;
        }
    }
    if (t.requires_grad(b)) {
      auto db = t.grad(b);
      auto av = t.value(a).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += x * dc[i * n + j];
        }
    }
  });
}

/// Batched product over a leading axis: a[B×m×k] · b[B×k×n], or with
/// transpose_b, a[B×m×k] · b[B×n×k]ᵀ.
inline Var bmm(Tape& tape, Var a, Var b, bool transpose_b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require(A.rank() == 3 && B.rank() == 3 && A.dim(0) == B.dim(0),
                  "bmm expects two rank-3 tensors with equal batch: " +
                      shape_str(A.shape()) + ", " + shape_str(B.shape()));
  const std::size_t batch = A.dim(0), m = A.dim(1), k = A.dim(2);
  const std::size_t n = transpose_b ? B.dim(1) : B.dim(2);
  detail::require((transpose_b ? B.dim(2) : B.dim(1)) == k,
                  "bmm inner extent mismatch: " + shape_str(A.shape()) + ", " +
                      shape_str(B.shape()));
  // Element (p, j) of the right operand, in either layout.
  auto b_index = [transpose_b, k, n](std::size_t bi, std::size_t p, std::size_t j) {
    return transpose_b ? (bi * n + j) * k + p : (bi * k + p) * n + j;
  };
  Tensor C({batch, m, n});
  auto av = A.data();
  auto bv = B.data();
  auto cv = C.data();
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p)
          s += av[(bi * m + i) * k + p] * bv[b_index(bi, p, j)];
        cv[(bi * m + i) * n + j] = s;
      }
  return tape.push(std::move(C), {a, b},
                   [a, b, batch, m, k, n, b_index](Tape& t, Var out) {
    auto dc = t.grad(out);
    const bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    auto av = t.value(a).data();
    auto bv = t.value(b).data();
    std::span<double> da, db;
    if (ga) da = t.grad(a);
    if (gb) db = t.grad(b);
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = dc[(bi * m + i) * n + j];
          for (std::size_t p = 0; p < k; ++p) {
            const std::size_t ai = (bi * m + i) * k + p;
            const std::size_t bj = b_index(bi, p, j);
            if (ga) da[ai] += g * bv[bj];
            if (gb) db[bj] += g * av[ai];
          }
        }
  });
}

/// Outer product. Rank 1: p[d], q[d] -> [d×d]. Rank 2: row-wise, p[B×d],
/// q[B×d] -> [B×d×d].
inline Var outer(Tape& tape, Var p, Var q) {
  const Tensor& P = tape.value(p);
  const Tensor& Q = tape.value(q);
  detail::require(P.shape() == Q.shape() && (P.rank() == 1 || P.rank() == 2),
                  "outer length mismatch: " + shape_str(P.shape()) + " vs " +
                      shape_str(Q.shape()));
  const std::size_t d = P.shape().back();
  const std::size_t rows = P.size() / d;
  Shape out_shape = P.rank() == 1 ? Shape{d, d} : Shape{rows, d, d};
  Tensor O(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        O[(r * d + i) * d + j] = P[r * d + i] * Q[r * d + j];
  return tape.push(std::move(O), {p, q}, [p, q, rows, d](Tape& t, Var out) {
    auto g = t.grad(out);
    auto pv = t.value(p).data();
    auto qv = t.value(q).data();
    const bool gp = t.requires_grad(p), gq = t.requires_grad(q);
    std::span<double> dp, dq;
    if (gp) dp = t.grad(p);
    if (gq) dq = t.grad(q);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          const double go = g[(r * d + i) * d + j];
          if (gp) dp[r * d + i] += go * qv[r * d + j];
          if (gq) dq[r * d + j] += go * pv[r * d + i];
        }
  });
}

/// Valid 1-D convolution, stride 1, no padding.
/// x[L] or x[B×L], filters[F×k], bias[F] -> [F×(L−k+1)] or [B×F×(L−k+1)].
inline Var conv1d_valid(Tape& tape, Var x, Var filters, Var bias) {
  const Tensor& X = tape.value(x);
  const Tensor& W = tape.value(filters);
  const Tensor& Bv = tape.value(bias);
  detail::require(W.rank() == 2, "conv1d filters must be F x k, got " +
                                     shape_str(W.shape()));
  const std::size_t f_count = W.dim(0), k = W.dim(1);
  detail::require(Bv.rank() == 1 && Bv.dim(0) == f_count,
                  "conv1d bias must have length F=" + std::to_string(f_count));
  detail::require(X.rank() == 1 || X.rank() == 2,
                  "conv1d input must be [L] or [B x L], got " + shape_str(X.shape()));
  const std::size_t len = X.shape().back();
  if (len < k) {
    throw ShapeError("input shorter than kernel: L=" + std::to_string(len) +
                     " < k=" + std::to_string(k));
  }
  const std::size_t batch = X.size() / len;
  const std::size_t steps = len - k + 1;
  Shape out_shape = X.rank() == 1 ? Shape{f_count, steps} : Shape{batch, f_count, steps};
  Tensor O(out_shape);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < f_count; ++f)
      for (std::size_t s = 0; s < steps; ++s) {
        double acc = Bv[f];
        for (std::size_t j = 0; j < k; ++j) acc += W[f * k + j] * X[b * len + s + j];
        O[(b * f_count + f) * steps + s] = acc;
      }
  return tape.push(std::move(O), {x, filters, bias},
                   [x, filters, bias, batch, f_count, k, len, steps](Tape& t, Var out) {
    auto g = t.grad(out);
    auto xv = t.value(x).data();
    auto wv = t.value(filters).data();
    const bool gx = t.requires_grad(x), gw = t.requires_grad(filters),
               gb = t.requires_grad(bias);
    std::span<double> dx, dw, db;
    if (gx) dx = t.grad(x);
    if (gw) dw = t.grad(filters);
    if (gb) db = t.grad(bias);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < f_count; ++f)
        for (std::size_t s = 0; s < steps; ++s) {
          const double go = g[(b * f_count + f) * steps + s];
          if (gb) db[f] += go;
          for (std::size_t j = 0; j < k; ++j) {
            if (gx) dx[b * len + s + j] += go * wv[f * k + j];
            if (gw) dw[f * k + j] += go * xv[b * len + s + j];
          }
        }
  });
}

/// Max over the last axis. Gradient goes to the first maximal position.
inline Var global_max_pool(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  detail::require(X.rank() >= 2, "global_max_pool expects [.. x T], got " +
                                     shape_str(X.shape()));
  const std::size_t steps = X.shape().back();
  const std::size_t rows = X.size() / steps;
  Shape out_shape(X.shape().begin(), X.shape().end() - 1);
  Tensor O(out_shape);
  std::vector<std::size_t> argmax(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < steps; ++s)
      if (X[r * steps + s] > X[r * steps + best]) best = s;
    argmax[r] = best;
    O[r] = X[r * steps + best];
  }
  return tape.push(std::move(O), {x},
                   [x, steps, argmax = std::move(argmax)](Tape& t, Var out) {
    auto g = t.grad(out);
    auto dx = t.grad(x);
    for (std::size_t r = 0; r < argmax.size(); ++r) dx[r * steps + argmax[r]] += g[r];
  });
}

/// Softmax over the last axis with per-row max subtraction.
inline Var softmax_rows(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  const std::size_t n = X.shape().back();
  const std::size_t rows = X.size() / n;
  Tensor Y(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, X[r * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      Y[r * n + j] = std::exp(X[r * n + j] - mx);
      z += Y[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) Y[r * n + j] /= z;
  }
  return tape.push(std::move(Y), {x}, [x, rows, n](Tape& t, Var out) {
    auto g = t.grad(out);
    auto y = t.value(out).data();
    auto dx = t.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        dx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalise the last axis to zero mean and unit (biased) variance, then
/// apply gain and shift.
inline Var layer_norm(Tape& tape, Var x, Var gain, Var shift) {
  const Tensor& X = tape.value(x);
  const Tensor& G = tape.value(gain);
  const Tensor& S = tape.value(shift);
  const std::size_t n = X.shape().back();
  if (n < 2) throw ShapeError("layer_norm needs at least 2 features, got " +
                              std::to_string(n));
  detail::require(G.rank() == 1 && G.dim(0) == n && S.shape() == G.shape(),
                  "layer_norm gain/shift must have length " + std::to_string(n));
  const std::size_t rows = X.size() / n;
  Tensor Y(X.shape());
  std::vector<double> xhat(X.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += X[r * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = X[r * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (X[r * n + j] - mean) * inv_std[r];
      Y[r * n + j] = G[j] * xhat[r * n + j] + S[j];
    }
  }
  return tape.push(std::move(Y), {x, gain, shift},
                   [x, gain, shift, rows, n, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)](Tape& t, Var out) {
    auto g = t.grad(out);
    auto gv = t.value(gain).data();
    if (t.requires_grad(gain)) {
      auto dg = t.grad(gain);
      for (std::size_t i = 0; i < rows * n; ++i) dg[i % n] += g[i] * xhat[i];
    }
    if (t.requires_grad(shift)) {
      auto ds = t.grad(shift);
      for (std::size_t i = 0; i < rows * n; ++i) ds[i % n] += g[i];
    }
    if (t.requires_grad(x)) {
      auto dx = t.grad(x);
      const double nn = static_cast<double>(n);
      for (std::size_t r = 0; r < rows; ++r) {
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g[r * n + j] * gv[j];
          sum_d += dh;
          sum_dx += dh * xhat[r * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g[r * n + j] * gv[j];
          dx[r * n + j] +=
              inv_std[r] / nn * (nn * dh - sum_d - xhat[r * n + j] * sum_dx);
        }
      }
    }
  });
}

/// Rows of table[E×d] selected by `ids` -> [B×d].
inline Var gather_rows(Tape& tape, Var table, std::span<const std::uint32_t> ids) {
  const Tensor& T = tape.value(table);
  detail::require(T.rank() == 2, "embedding table must be E x d, got " +
                                     shape_str(T.shape()));
  detail::require(!ids.empty(), "gather_rows needs at least one id");
  const std::size_t rows = T.dim(0), d = T.dim(1);
  Tensor O({ids.size(), d});
  for (std::size_t b = 0; b < ids.size(); ++b) {
    if (ids[b] >= rows) {
      throw ShapeError("id " + std::to_string(ids[b]) +
                       " out of range for vocabulary of size " + std::to_string(rows));
    }
    auto src = T.row(ids[b]);
    std::copy(src.begin(), src.end(), O.row(b).begin());
  }
  std::vector<std::uint32_t> saved(ids.begin(), ids.end());
  return tape.push(std::move(O), {table},
                   [table, d, saved = std::move(saved)](Tape& t, Var out) {
    auto g = t.grad(out);
    auto dt = t.grad(table);
    for (std::size_t b = 0; b < saved.size(); ++b)
      for (std::size_t j = 0; j < d; ++j) dt[saved[b] * d + j] += g[b * d + j];
  });
}

/// Single-row embedding lookup: table[E×d], id -> [d].
inline Var embed_lookup(Tape& tape, Var table, std::uint32_t id) {
  const std::uint32_t ids[1] = {id};
  Var rows = gather_rows(tape, table, ids);
  const Tensor& R = tape.value(rows);
  Tensor flat({R.dim(1)}, R.values());
  return tape.push(std::move(flat), {rows}, [rows](Tape& t, Var out) {
    auto g = t.grad(out);
    auto dr = t.grad(rows);
    for (std::size_t i = 0; i < g.size(); ++i) dr[i] += g[i];
  });
}

/// Same data, new shape.
inline Var reshape(Tape& tape, Var x, Shape shape) {
  const Tensor& X = tape.value(x);
  detail::require(shape_size(shape) == X.size(),
                  "reshape " + shape_str(X.shape()) + " -> " + shape_str(shape));
  Tensor O(std::move(shape), X.values());
  return tape.push(std::move(O), {x}, [x](Tape& t, Var out) {
    auto g = t.grad(out);
    auto dx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

inline Var add(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require(A.shape() == B.shape(), "add shape mismatch: " +
                                              shape_str(A.shape()) + " vs " +
                                              shape_str(B.shape()));
  Tensor O(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) O[i] = A[i] + B[i];
  return tape.push(std::move(O), {a, b}, [a, b](Tape& t, Var out) {
    auto g = t.grad(out);
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto d = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

/// x[..., n] + bias[n], broadcast over rows.
inline Var add_bias(Tape& tape, Var x, Var bias) {
  const Tensor& X = tape.value(x);
  const Tensor& Bv = tape.value(bias);
  const std::size_t n = X.shape().back();
  detail::require(Bv.size() == n, "bias length " + std::to_string(Bv.size()) +
                                      " does not match last extent of " +
                                      shape_str(X.shape()));
  Tensor O(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) O[i] = X[i] + Bv[i % n];
  return tape.push(std::move(O), {x, bias}, [x, bias, n](Tape& t, Var out) {
    auto g = t.grad(out);
    if (t.requires_grad(x)) {
      auto dx = t.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    }
    if (t.requires_grad(bias)) {
      auto db = t.grad(bias);
      for (std::size_t i = 0; i < g.size(); ++i) db[i % n] += g[i];
    }
  });
}

/// Element-wise product of equally shaped tensors.
inline Var mul(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  detail::require(A.shape() == B.shape(), "mul shape mismatch: " +
                                              shape_str(A.shape()) + " vs " +
                                              shape_str(B.shape()));
  Tensor O(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) O[i] = A[i] * B[i];
  return tape.push(std::move(O), {a, b}, [a, b](Tape& t, Var out) {
    auto g = t.grad(out);
    auto av = t.value(a).data();
    auto bv = t.value(b).data();
    if (t.requires_grad(a)) {
      auto da = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto db = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Tape& tape, Var x, double c) {
  const Tensor& X = tape.value(x);
  Tensor O(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) O[i] = X[i] * c;
  return tape.push(std::move(O), {x}, [x, c](Tape& t, Var out) {
    auto g = t.grad(out);
    auto dx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * c;
  });
}

inline Var relu(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  Tensor O(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) O[i] = X[i] > 0.0 ? X[i] : 0.0;
  return tape.push(std::move(O), {x}, [x](Tape& t, Var out) {
    auto g = t.grad(out);
    auto xv = t.value(x).data();
    auto dx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) dx[i] += g[i];
  });
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Var sigmoid(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  Tensor O(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) O[i] = sigmoid(X[i]);
  return tape.push(std::move(O), {x}, [x](Tape& t, Var out) {
    auto g = t.grad(out);
    auto y = t.value(out).data();
    auto dx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

/// Stack T tensors of shape [B×w] into [B×T×w].
inline Var stack_tokens(Tape& tape, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "stack_tokens needs at least one part");
  const Shape& s0 = tape.value(parts[0]).shape();
  detail::require(s0.size() == 2, "stack_tokens parts must be B x w, got " +
                                      shape_str(s0));
  for (Var p : parts) {
    detail::require(tape.value(p).shape() == s0,
                    "stack_tokens shape mismatch: " + shape_str(s0) + " vs " +
                        shape_str(tape.value(p).shape()));
  }
  const std::size_t batch = s0[0], w = s0[1], tokens = parts.size();
  Tensor O({batch, tokens, w});
  for (std::size_t t = 0; t < tokens; ++t) {
    const Tensor& P = tape.value(parts[t]);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < w; ++j) O[(b * tokens + t) * w + j] = P[b * w + j];
  }
  return tape.push(std::move(O), parts, [parts, batch, tokens, w](Tape& t, Var out) {
    auto g = t.grad(out);
    for (std::size_t k = 0; k < tokens; ++k) {
      if (!t.requires_grad(parts[k])) continue;
      auto d = t.grad(parts[k]);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < w; ++j) d[b * w + j] += g[(b * tokens + k) * w + j];
    }
  });
}

/// Mean over the middle (token) axis: [B×T×w] -> [B×w].
inline Var mean_tokens(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  detail::require(X.rank() == 3, "mean_tokens expects B x T x w, got " +
                                     shape_str(X.shape()));
  const std::size_t batch = X.dim(0), tokens = X.dim(1), w = X.dim(2);
  Tensor O({batch, w});
  const double inv = 1.0 / static_cast<double>(tokens);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t j = 0; j < w; ++j) O[b * w + j] += X[(b * tokens + t) * w + j] * inv;
  return tape.push(std::move(O), {x}, [x, batch, tokens, w, inv](Tape& t, Var out) {
    auto g = t.grad(out);
    auto dx = t.grad(x);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t k = 0; k < tokens; ++k)
        for (std::size_t j = 0; j < w; ++j) dx[(b * tokens + k) * w + j] += g[b * w + j] * inv;
  });
}

/// Columns [start, start+len) of the last axis.
inline Var slice_last(Tape& tape, Var x, std::size_t start, std::size_t len) {
  const Tensor& X = tape.value(x);
  const std::size_t n = X.shape().back();
  detail::require(len > 0 && start + len <= n, "slice_last out of range");
  const std::size_t rows = X.size() / n;
  Tensor O(detail::with_last(X.shape(), len));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j) O[r * len + j] = X[r * n + start + j];
  return tape.push(std::move(O), {x}, [x, rows, n, start, len](Tape& t, Var out) {
    auto g = t.grad(out);
    auto dx = t.grad(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < len; ++j) dx[r * n + start + j] += g[r * len + j];
  });
}

/// Concatenate along the last axis; all other extents must agree.
inline Var concat_last(Tape& tape, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_last needs at least one part");
  const Shape& s0 = tape.value(parts[0]).shape();
  const std::size_t rows = tape.value(parts[0]).size() / s0.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const Tensor& P = tape.value(p);
    detail::require(P.rank() == s0.size() && P.size() / P.shape().back() == rows,
                    "concat_last leading extents differ");
    widths.push_back(P.shape().back());
    total += P.shape().back();
  }
  Tensor O(detail::with_last(s0, total));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = tape.value(parts[k]);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < widths[k]; ++j)
        O[r * total + offset + j] = P[r * widths[k] + j];
    offset += widths[k];
  }
  return tape.push(std::move(O), parts,
                   [parts, widths, rows, total](Tape& t, Var out) {
    auto g = t.grad(out);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (t.requires_grad(parts[k])) {
        auto d = t.grad(parts[k]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j)
            d[r * widths[k] + j] += g[r * total + offset + j];
      }
      offset += widths[k];
    }
  });
}

/// Sum of all elements -> [1].
inline Var sum(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  double s = 0.0;
  for (double v : X.data()) s += v;
  return tape.push(Tensor({1}, {s}), {x}, [x](Tape& t, Var out) {
    const double g = t.grad(out)[0];
    auto dx = t.grad(x);
    for (double& d : dx) d += g;
  });
}

/// Sum of squared elements -> [1].
inline Var sum_squares(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  return tape.push(Tensor({1}, {X.squared_norm()}), {x}, [x](Tape& t, Var out) {
    const double g = t.grad(out)[0];
    auto xv = t.value(x).data();
    auto dx = t.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2.0 * g * xv[i];
  });
}

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels,
/// computed on the logit scale -> [1].
inline Var bce_with_logits(Tape& tape, Var logits, std::span<const double> labels) {
  const Tensor& Z = tape.value(logits);
  detail::require(Z.size() == labels.size(),
                  "bce: " + std::to_string(Z.size()) + " logits vs " +
                      std::to_string(labels.size()) + " labels");
  const double inv = 1.0 / static_cast<double>(labels.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double z = Z[i];
    loss += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  std::vector<double> y(labels.begin(), labels.end());
  return tape.push(Tensor({1}, {loss * inv}), {logits},
                   [logits, inv, y = std::move(y)](Tape& t, Var out) {
    const double g = t.grad(out)[0];
    auto zv = t.value(logits).data();
    auto dz = t.grad(logits);
    for (std::size_t i = 0; i < y.size(); ++i) dz[i] += g * inv * (sigmoid(zv[i]) - y[i]);
  });
}

}  // namespace ctncf::ops
