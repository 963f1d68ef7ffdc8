#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "bitemp/autograd.hpp"

// Differentiable primitives. Tensors are read as matrices: rows = product of
// leading dims, cols = last dim.
namespace bitemp::ag {

namespace detail {

template <typename T>
Var<T> result(Tensor<T> value, bool needs_grad) {
  return make_var(std::move(value), needs_grad);
}

inline Shape with_last(Shape s, std::size_t last) {
  if (s.empty()) s.push_back(last);
  else s.back() = last;
  return s;
}

}  // namespace detail

// a[.., k] x b[k, n]
template <typename T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_shape(a->value.cols() == b->value.rows() && b->value.shape.size() == 2,
                "matmul: " + shape_str(a->value.shape) + " x " + shape_str(b->value.shape));
  Tensor<T> out(detail::with_last(a->value.shape, b->value.cols()));
  out.mat().noalias() = a->value.mat() * b->value.mat();
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&a, &b}));
  if (o->requires_grad) {
    tape.record([a, b, o] {
      if (!o->has_grad()) return;
      if (a->requires_grad) a->grad_mat().noalias() += o->grad.mat() * b->value.mat().transpose();
      if (b->requires_grad) b->grad_mat().noalias() += a->value.mat().transpose() * o->grad.mat();
    });
  }
  return o;
}

// a[.., k] x b[n, k]^T
template <typename T>
Var<T> matmul_nt(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_shape(a->value.cols() == b->value.cols(),
                "matmul_nt: " + shape_str(a->value.shape) + " x " + shape_str(b->value.shape) + "^T");
  Tensor<T> out(detail::with_last(a->value.shape, b->value.rows()));
  out.mat().noalias() = a->value.mat() * b->value.mat().transpose();
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&a, &b}));
  if (o->requires_grad) {
    tape.record([a, b, o] {
      if (!o->has_grad()) return;
      if (a->requires_grad) a->grad_mat().noalias() += o->grad.mat() * b->value.mat();
      if (b->requires_grad) b->grad_mat().noalias() += o->grad.mat().transpose() * a->value.mat();
    });
  }
  return o;
}

// x w + bias, bias broadcast over rows.
template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require_shape(x->value.cols() == w->value.rows() && bias->value.size() == w->value.cols(),
                "linear: " + shape_str(x->value.shape) + " x " + shape_str(w->value.shape));
  Tensor<T> out(detail::with_last(x->value.shape, w->value.cols()));
  auto om = out.mat();
  om.noalias() = x->value.mat() * w->value.mat();
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->value.data.data(), bias->value.size());
  om.rowwise() += bv;
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&x, &w, &bias}));
  if (o->requires_grad) {
    tape.record([x, w, bias, o] {
      if (!o->has_grad()) return;
      const auto g = o->grad.mat();
      if (x->requires_grad) x->grad_mat().noalias() += g * w->value.mat().transpose();
      if (w->requires_grad) w->grad_mat().noalias() += x->value.mat().transpose() * g;
      if (bias->requires_grad) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(bias->grad_buffer().data.data(), bias->value.size());
        gb += g.colwise().sum();
      }
    });
  }
  return o;
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_shape(a->value.size() == b->value.size(),
                "add: " + shape_str(a->value.shape) + " + " + shape_str(b->value.shape));
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&a, &b}));
  if (o->requires_grad) {
    tape.record([a, b, o] {
      if (!o->has_grad()) return;
      for (const auto* v : {&a, &b}) {
        if (!(*v)->requires_grad) continue;
        auto& g = (*v)->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
    });
  }
  return o;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T s) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * s;
  auto o = detail::result(std::move(out), tape.grad_enabled() && a->requires_grad);
  if (o->requires_grad) {
    tape.record([a, o, s] {
      if (!o->has_grad()) return;
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * s;
    });
  }
  return o;
}

// x[B, n, d] + p[n, d], p repeated over the leading block dimension.
template <typename T>
Var<T> add_tiled(Tape<T>& tape, const Var<T>& x, const Var<T>& p) {
  const std::size_t block = p->value.size();
  require_shape(block > 0 && x->value.size() % block == 0 && x->value.cols() == p->value.cols(),
                "add_tiled: " + shape_str(x->value.shape) + " + tile(" + shape_str(p->value.shape) + ")");
  Tensor<T> out(x->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->value[i] + p->value[i % block];
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&x, &p}));
  if (o->requires_grad) {
    tape.record([x, p, o, block] {
      if (!o->has_grad()) return;
      if (x->requires_grad) {
        auto& g = x->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i % block] += o->grad[i];
      }
    });
  }
  return o;
}

// x[m, n] + c[m, 1], c broadcast across columns.
template <typename T>
Var<T> add_col_broadcast(Tape<T>& tape, const Var<T>& x, const Var<T>& c) {
  const std::size_t m = x->value.rows(), n = x->value.cols();
  require_shape(c->value.size() == m, "add_col_broadcast: column has " + std::to_string(c->value.size()) +
                                          " entries for " + std::to_string(m) + " rows");
  Tensor<T> out(x->value.shape);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x->value[r * n + j] + c->value[r];
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&x, &c}));
  if (o->requires_grad) {
    tape.record([x, c, o, m, n] {
      if (!o->has_grad()) return;
      if (x->requires_grad) {
        auto& g = x->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
      if (c->requires_grad) {
        auto& g = c->grad_buffer();
        for (std::size_t r = 0; r < m; ++r) {
          T s = 0;
          for (std::size_t j = 0; j < n; ++j) s += o->grad[r * n + j];
          g[r] += s;
        }
      }
    });
  }
  return o;
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(x->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->value[i] > T(0) ? x->value[i] : T(0);
  auto o = detail::result(std::move(out), tape.grad_enabled() && x->requires_grad);
  if (o->requires_grad) {
    tape.record([x, o] {
      if (!o->has_grad()) return;
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x->value[i] > T(0)) g[i] += o->grad[i];
    });
  }
  return o;
}

// Row-wise layer normalization with affine gamma/beta of length cols.
template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t m = x->value.rows(), n = x->value.cols();
  require_shape(gamma->value.size() == n && beta->value.size() == n, "layer_norm: affine size mismatch");
  Tensor<T> out(x->value.shape);
  auto xhat = std::make_shared<std::vector<T>>(m * n);
  auto rstd = std::make_shared<std::vector<T>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = x->value.data.data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(n);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T xh = (xr[j] - mu) * rs;
      (*xhat)[r * n + j] = xh;
      out[r * n + j] = gamma->value[j] * xh + beta->value[j];
    }
  }
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&x, &gamma, &beta}));
  if (o->requires_grad) {
    tape.record([x, gamma, beta, o, xhat, rstd, m, n] {
      if (!o->has_grad()) return;
      const auto& gy = o->grad;
      if (gamma->requires_grad || beta->requires_grad) {
        auto& gg = gamma->grad_buffer();
        auto& gb = beta->grad_buffer();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < n; ++j) {
            if (gamma->requires_grad) gg[j] += gy[r * n + j] * (*xhat)[r * n + j];
            if (beta->requires_grad) gb[j] += gy[r * n + j];
          }
      }
      if (x->requires_grad) {
        auto& gx = x->grad_buffer();
        std::vector<T> dxh(n);
        for (std::size_t r = 0; r < m; ++r) {
          T s1 = 0, s2 = 0;
          for (std::size_t j = 0; j < n; ++j) {
            dxh[j] = gy[r * n + j] * gamma->value[j];
            s1 += dxh[j];
            s2 += dxh[j] * (*xhat)[r * n + j];
          }
          const T k = (*rstd)[r] / T(n);
          for (std::size_t j = 0; j < n; ++j)
            gx[r * n + j] += k * (T(n) * dxh[j] - s1 - (*xhat)[r * n + j] * s2);
        }
      }
    });
  }
  return o;
}

// [a | b] along the last dimension.
template <typename T>
Var<T> concat_cols(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const std::size_t m = a->value.rows(), p = a->value.cols(), q = b->value.cols();
  require_shape(b->value.rows() == m, "concat_cols: row mismatch");
  Tensor<T> out(detail::with_last(a->value.shape, p + q));
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(a->value.data.data() + r * p, p, out.data.data() + r * (p + q));
    std::copy_n(b->value.data.data() + r * q, q, out.data.data() + r * (p + q) + p);
  }
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&a, &b}));
  if (o->requires_grad) {
    tape.record([a, b, o, m, p, q] {
      if (!o->has_grad()) return;
      if (a->requires_grad) {
        auto& g = a->grad_buffer();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < p; ++j) g[r * p + j] += o->grad[r * (p + q) + j];
      }
      if (b->requires_grad) {
        auto& g = b->grad_buffer();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < q; ++j) g[r * q + j] += o->grad[r * (p + q) + p + j];
      }
    });
  }
  return o;
}

// Concatenate along the leading dimension (raw storage order).
template <typename T>
Var<T> concat_rows(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  Shape s = a->value.shape;
  Shape sb = b->value.shape;
  require_shape(!s.empty() && s.size() == sb.size() && std::equal(s.begin() + 1, s.end(), sb.begin() + 1),
                "concat_rows: " + shape_str(s) + " vs " + shape_str(sb));
  s[0] += sb[0];
  Tensor<T> out(s);
  std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
  std::copy(b->value.data.begin(), b->value.data.end(), out.data.begin() + a->value.size());
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&a, &b}));
  if (o->requires_grad) {
    tape.record([a, b, o] {
      if (!o->has_grad()) return;
      const std::size_t na = a->value.size();
      if (a->requires_grad) {
        auto& g = a->grad_buffer();
        for (std::size_t i = 0; i < na; ++i) g[i] += o->grad[i];
      }
      if (b->requires_grad) {
        auto& g = b->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[na + i];
      }
    });
  }
  return o;
}

// Entries [begin, begin + count) of the leading dimension.
template <typename T>
Var<T> slice_rows(Tape<T>& tape, const Var<T>& x, std::size_t begin, std::size_t count) {
  Shape s = x->value.shape;
  require_shape(!s.empty() && begin + count <= s[0], "slice_rows: range out of bounds");
  const std::size_t stride = x->value.size() / s[0];
  s[0] = count;
  Tensor<T> out(s);
  std::copy_n(x->value.data.begin() + begin * stride, count * stride, out.data.begin());
  auto o = detail::result(std::move(out), tape.grad_enabled() && x->requires_grad);
  if (o->requires_grad) {
    tape.record([x, o, begin, stride] {
      if (!o->has_grad()) return;
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < o->grad.size(); ++i) g[begin * stride + i] += o->grad[i];
    });
  }
  return o;
}

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape s) {
  auto o = detail::result(x->value.reshaped(std::move(s)), tape.grad_enabled() && x->requires_grad);
  if (o->requires_grad) {
    tape.record([x, o] {
      if (!o->has_grad()) return;
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    });
  }
  return o;
}

// Cosine similarity between matching rows; a zero row yields 0.
template <typename T>
Var<T> row_cosine(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  require_shape(a->value.shape == b->value.shape, "row_cosine: " + shape_str(a->value.shape) + " vs " +
                                                       shape_str(b->value.shape));
  Tensor<T> out(detail::with_last(a->value.shape, 1));
  auto na = std::make_shared<std::vector<T>>(m);
  auto nb = std::make_shared<std::vector<T>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    T dot = 0, sa = 0, sb = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T x = a->value[r * n + j], y = b->value[r * n + j];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    (*na)[r] = std::sqrt(sa);
    (*nb)[r] = std::sqrt(sb);
    out[r] = ((*na)[r] > T(0) && (*nb)[r] > T(0)) ? dot / ((*na)[r] * (*nb)[r]) : T(0);
  }
  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&a, &b}));
  if (o->requires_grad) {
    tape.record([a, b, o, na, nb, m, n] {
      if (!o->has_grad()) return;
      for (std::size_t r = 0; r < m; ++r) {
        const T A = (*na)[r], B = (*nb)[r];
        if (!(A > T(0) && B > T(0))) continue;
        const T g = o->grad[r], c = o->value[r];
        for (std::size_t j = 0; j < n; ++j) {
          const T x = a->value[r * n + j], y = b->value[r * n + j];
          if (a->requires_grad) a->grad_buffer()[r * n + j] += g * (y / (A * B) - c * x / (A * A));
          if (b->requires_grad) b->grad_buffer()[r * n + j] += g * (x / (A * B) - c * y / (B * B));
        }
      }
    });
  }
  return o;
}

// NHWC convolution. x: {B, H, W, C}; w: {kernel*kernel*C, Cout} laid out as
// (ky, kx, c) rows; bias: {Cout}.
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t kernel,
              std::size_t stride, std::size_t pad) {
  const auto& xs = x->value.shape;
  require_shape(xs.size() == 4, "conv2d: input must be {B,H,W,C}, got " + shape_str(xs));
  const std::size_t B = xs[0], H = xs[1], W = xs[2], C = xs[3];
  const std::size_t K = kernel * kernel * C;
  require_shape(w->value.rows() == K && w->value.shape.size() == 2,
                "conv2d: weight " + shape_str(w->value.shape) + " does not match kernel " +
                    std::to_string(kernel) + " with " + std::to_string(C) + " input channels");
  const std::size_t Cout = w->value.cols();
  require_shape(bias->value.size() == Cout, "conv2d: bias size mismatch");
  require_shape(H + 2 * pad >= kernel && W + 2 * pad >= kernel, "conv2d: kernel larger than input");
  const std::size_t Ho = (H + 2 * pad - kernel) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kernel) / stride + 1;
  const std::size_t R = B * Ho * Wo;

  auto cols = std::make_shared<Tensor<T>>(Shape{R, K});
  const T* xd = x->value.data.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T* row = cols->data.data() + ((b * Ho + oy) * Wo + ox) * K;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            T* dst = row + (ky * kernel + kx) * C;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) {
              std::fill_n(dst, C, T(0));
            } else {
              std::copy_n(xd + ((b * H + iy) * W + ix) * C, C, dst);
            }
          }
        }
      }

  Tensor<T> out(Shape{B, Ho, Wo, Cout});
  auto om = out.mat();
  om.noalias() = cols->mat() * w->value.mat();
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->value.data.data(), Cout);
  om.rowwise() += bv;

  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&x, &w, &bias}));
  if (o->requires_grad) {
    tape.record([x, w, bias, o, cols, B, H, W, C, Ho, Wo, K, kernel, stride, pad] {
      if (!o->has_grad()) return;
      const auto g = o->grad.mat();
      if (w->requires_grad) w->grad_mat().noalias() += cols->mat().transpose() * g;
      if (bias->requires_grad) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(bias->grad_buffer().data.data(), bias->value.size());
        gb += g.colwise().sum();
      }
      if (x->requires_grad) {
        RowMat<T> dcols = g * w->value.mat().transpose();
        auto& gx = x->grad_buffer();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const T* row = dcols.data() + ((b * Ho + oy) * Wo + ox) * K;
              for (std::size_t ky = 0; ky < kernel; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                for (std::size_t kx = 0; kx < kernel; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                  if (ix < 0 || ix >= static_cast<long>(W)) continue;
                  T* dst = gx.data.data() + ((b * H + iy) * W + ix) * C;
                  const T* src = row + (ky * kernel + kx) * C;
                  for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
                }
              }
            }
      }
    });
  }
  return o;
}

// Scaled dot-product multi-head attention over per-sample blocks.
// q: {B, nq, D}; k, v: {B, nk, D}. Heads split D into contiguous slices.
// Returns the concatenated head outputs {B, nq, D} (no output projection).
template <typename T>
Var<T> attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                 std::size_t heads, bool causal) {
  const std::size_t D = q->value.cols();
  require_shape(batch > 0 && q->value.rows() % batch == 0 && k->value.rows() % batch == 0,
                "attention: rows not divisible by batch");
  require_shape(k->value.cols() == D && v->value.shape == k->value.shape, "attention: key/value shape mismatch");
  if (heads == 0 || D % heads != 0)
    throw ConfigError("attention: dimension " + std::to_string(D) + " not divisible by " +
                      std::to_string(heads) + " heads");
  const std::size_t nq = q->value.rows() / batch, nk = k->value.rows() / batch, dh = D / heads;
  if (causal) require_shape(nq == nk, "attention: causal mask requires square attention");
  const T sc = T(1) / std::sqrt(T(dh));

  auto probs = std::make_shared<AlignedVector<T>>(batch * heads * nq * nk);
  Tensor<T> out(q->value.shape);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap<T> Q(q->value.data.data() + b * nq * D + h * dh, nq, dh, Eigen::OuterStride<>(D));
      ConstStridedMap<T> Km(k->value.data.data() + b * nk * D + h * dh, nk, dh, Eigen::OuterStride<>(D));
      ConstStridedMap<T> V(v->value.data.data() + b * nk * D + h * dh, nk, dh, Eigen::OuterStride<>(D));
      MatMap<T> P(probs->data() + (b * heads + h) * nq * nk, nq, nk);
      P.noalias() = Q * Km.transpose();
      for (std::size_t i = 0; i < nq; ++i) {
        const std::size_t lim = causal ? i + 1 : nk;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, P(i, j) * sc);
        T z = 0;
        for (std::size_t j = 0; j < lim; ++j) {
          P(i, j) = std::exp(P(i, j) * sc - mx);
          z += P(i, j);
        }
        for (std::size_t j = 0; j < lim; ++j) P(i, j) /= z;
        for (std::size_t j = lim; j < nk; ++j) P(i, j) = T(0);
      }
      StridedMap<T> O(out.data.data() + b * nq * D + h * dh, nq, dh, Eigen::OuterStride<>(D));
      O.noalias() = P * V;
    }

  auto o = detail::result(std::move(out), tape.grad_enabled() && any_grad<T>({&q, &k, &v}));
  if (o->requires_grad) {
    tape.record([q, k, v, o, probs, batch, heads, nq, nk, D, dh, sc] {
      if (!o->has_grad()) return;
      RowMat<T> dP(nq, nk), dS(nq, nk);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          ConstStridedMap<T> Q(q->value.data.data() + b * nq * D + h * dh, nq, dh, Eigen::OuterStride<>(D));
          ConstStridedMap<T> Km(k->value.data.data() + b * nk * D + h * dh, nk, dh, Eigen::OuterStride<>(D));
          ConstStridedMap<T> V(v->value.data.data() + b * nk * D + h * dh, nk, dh, Eigen::OuterStride<>(D));
          ConstStridedMap<T> dO(o->grad.data.data() + b * nq * D + h * dh, nq, dh, Eigen::OuterStride<>(D));
          ConstMatMap<T> P(probs->data() + (b * heads + h) * nq * nk, nq, nk);
          if (v->requires_grad) {
            StridedMap<T> dV(v->grad_buffer().data.data() + b * nk * D + h * dh, nk, dh, Eigen::OuterStride<>(D));
            dV.noalias() += P.transpose() * dO;
          }
          if (!(q->requires_grad || k->requires_grad)) continue;
          dP.noalias() = dO * V.transpose();
          for (std::size_t i = 0; i < nq; ++i) {
            T s = 0;
            for (std::size_t j = 0; j < nk; ++j) s += dP(i, j) * P(i, j);
            for (std::size_t j = 0; j < nk; ++j) dS(i, j) = P(i, j) * (dP(i, j) - s) * sc;
          }
          if (q->requires_grad) {
            StridedMap<T> dQ(q->grad_buffer().data.data() + b * nq * D + h * dh, nq, dh, Eigen::OuterStride<>(D));
            dQ.noalias() += dS * Km;
          }
          if (k->requires_grad) {
            StridedMap<T> dK(k->grad_buffer().data.data() + b * nk * D + h * dh, nk, dh, Eigen::OuterStride<>(D));
            dK.noalias() += dS.transpose() * Q;
          }
        }
    });
  }
  return o;
}

// Rows of table selected by ids; output shape is `shape` + {D}.
template <typename T>
Var<T> embedding(Tape<T>& tape, const Var<T>& table, const std::vector<int>& ids, Shape lead) {
  const std::size_t V = table->value.rows(), D = table->value.cols();
  require_shape(shape_numel(lead) == ids.size(), "embedding: id count does not match shape");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(V));
  lead.push_back(D);
  Tensor<T> out(lead);
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table->value.data.data() + static_cast<std::size_t>(ids[r]) * D, D, out.data.data() + r * D);
  auto o = detail::result(std::move(out), tape.grad_enabled() && table->requires_grad);
  if (o->requires_grad) {
    tape.record([table, o, ids, D] {
      if (!o->has_grad()) return;
      auto& g = table->grad_buffer();
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < D; ++j) g[static_cast<std::size_t>(ids[r]) * D + j] += o->grad[r * D + j];
    });
  }
  return o;
}

// Selected rows of x (matrix view) stacked into {idx.size(), cols}.
template <typename T>
Var<T> gather_rows(Tape<T>& tape, const Var<T>& x, const std::vector<std::size_t>& idx) {
  const std::size_t n = x->value.cols(), m = x->value.rows();
  Tensor<T> out(Shape{idx.size(), n});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require_shape(idx[r] < m, "gather_rows: index out of range");
    std::copy_n(x->value.data.data() + idx[r] * n, n, out.data.data() + r * n);
  }
  auto o = detail::result(std::move(out), tape.grad_enabled() && x->requires_grad);
  if (o->requires_grad) {
    tape.record([x, o, idx, n] {
      if (!o->has_grad()) return;
      auto& g = x->grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += o->grad[r * n + j];
    });
  }
  return o;
}

// x repeated `times` along a new leading dimension: {times, x.shape...}.
template <typename T>
Var<T> tile(Tape<T>& tape, const Var<T>& x, std::size_t times) {
  Shape s = x->value.shape;
  s.insert(s.begin(), times);
  Tensor<T> out(s);
  const std::size_t n = x->value.size();
  for (std::size_t t = 0; t < times; ++t) std::copy(x->value.data.begin(), x->value.data.end(), out.data.begin() + t * n);
  auto o = detail::result(std::move(out), tape.grad_enabled() && x->requires_grad);
  if (o->requires_grad) {
    tape.record([x, o, n, times] {
      if (!o->has_grad()) return;
      auto& g = x->grad_buffer();
      for (std::size_t t = 0; t < times; ++t)
        for (std::size_t i = 0; i < n; ++i) g[i] += o->grad[t * n + i];
    });
  }
  return o;
}

// Each row scaled to unit Euclidean norm.
template <typename T>
Var<T> normalize_rows(Tape<T>& tape, const Var<T>& x) {
  const std::size_t m = x->value.rows(), n = x->value.cols();
  Tensor<T> out(x->value.shape);
  auto norms = std::make_shared<std::vector<T>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += x->value[r * n + j] * x->value[r * n + j];
    const T nr = std::max(std::sqrt(s), T(1e-12));
    (*norms)[r] = nr;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x->value[r * n + j] / nr;
  }
  auto o = detail::result(std::move(out), tape.grad_enabled() && x->requires_grad);
  if (o->requires_grad) {
    tape.record([x, o, norms, m, n] {
      if (!o->has_grad()) return;
      auto& g = x->grad_buffer();
      for (std::size_t r = 0; r < m; ++r) {
        T d = 0;
        for (std::size_t j = 0; j < n; ++j) d += o->value[r * n + j] * o->grad[r * n + j];
        for (std::size_t j = 0; j < n; ++j)
          g[r * n + j] += (o->grad[r * n + j] - o->value[r * n + j] * d) / (*norms)[r];
      }
    });
  }
  return o;
}

// Mean token-level negative log-likelihood; rows whose target is negative are
// ignored.
template <typename T>
Var<T> cross_entropy(Tape<T>& tape, const Var<T>& logits, const std::vector<int>& targets) {
  const std::size_t m = logits->value.rows(), V = logits->value.cols();
  require_shape(targets.size() == m, "cross_entropy: target count does not match logits rows");
  std::size_t count = 0;
  for (int t : targets) {
    if (t >= static_cast<int>(V)) throw IndexError("cross_entropy: target id out of range");
    if (t >= 0) ++count;
  }
  if (count == 0) throw ValidationError("caption loss: every target position is padding");
  auto probs = std::make_shared<std::vector<T>>(m * V);
  T loss = 0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] < 0) continue;
    const T* lr = logits->value.data.data() + r * V;
    T mx = *std::max_element(lr, lr + V);
    T z = 0;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(lr[j] - mx);
    const T lz = mx + std::log(z);
    for (std::size_t j = 0; j < V; ++j) (*probs)[r * V + j] = std::exp(lr[j] - lz);
    loss += lz - lr[targets[r]];
  }
  Tensor<T> out(Shape{1});
  out[0] = loss / T(count);
  auto o = detail::result(std::move(out), tape.grad_enabled() && logits->requires_grad);
  if (o->requires_grad) {
    tape.record([logits, o, probs, targets, m, V, count] {
      if (!o->has_grad()) return;
      auto& g = logits->grad_buffer();
      const T k = o->grad[0] / T(count);
      for (std::size_t r = 0; r < m; ++r) {
        if (targets[r] < 0) continue;
        for (std::size_t j = 0; j < V; ++j) g[r * V + j] += k * (*probs)[r * V + j];
        g[r * V + static_cast<std::size_t>(targets[r])] -= k;
      }
    });
  }
  return o;
}

template <typename T>
Var<T> sum_all(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(Shape{1});
  for (T v : x->value.data) out[0] += v;
  auto o = detail::result(std::move(out), tape.grad_enabled() && x->requires_grad);
  if (o->requires_grad) {
    tape.record([x, o] {
      if (!o->has_grad()) return;
      auto& g = x->grad_buffer();
      for (auto& v : g.data) v += o->grad[0];
    });
  }
  return o;
}

// sum(x * w) for a constant weight tensor; used by gradient probes.
template <typename T>
Var<T> dot_const(Tape<T>& tape, const Var<T>& x, const Tensor<T>& w) {
  require_shape(x->value.size() == w.size(), "dot_const: size mismatch");
  Tensor<T> out(Shape{1});
  for (std::size_t i = 0; i < w.size(); ++i) out[0] += x->value[i] * w[i];
  auto o = detail::result(std::move(out), tape.grad_enabled() && x->requires_grad);
  if (o->requires_grad) {
    tape.record([x, o, w] {
      if (!o->has_grad()) return;
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += o->grad[0] * w[i];
    });
  }
  return o;
}

}  // namespace bitemp::ag
