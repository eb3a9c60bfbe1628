#pragma once

#include "affunet/tape.hpp"

namespace affunet {

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (recording<T>({a.requires_grad(), b.requires_grad()})) {
    out.set_requires_grad(true);
    const bool na = a.requires_grad(), nb = b.requires_grad();
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record(out, [ac, bc, oc, na, nb]() mutable {
      const T* g = oc.grad();
      const int64_t m = oc.numel();
      if (T* ga = na ? ac.grad() : nullptr) {
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i];
      }
      if (T* gb = nb ? bc.grad() : nullptr) {
        for (int64_t i = 0; i < m; ++i) gb[i] += g[i];
      }
    });
  }
  maybe_check_finite("add", out);
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (recording<T>({a.requires_grad(), b.requires_grad()})) {
    out.set_requires_grad(true);
    const bool na = a.requires_grad(), nb = b.requires_grad();
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record(out, [ac, bc, oc, na, nb]() mutable {
      const T* g = oc.grad();
      const int64_t m = oc.numel();
      if (T* ga = na ? ac.grad() : nullptr) {
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i];
      }
      if (T* gb = nb ? bc.grad() : nullptr) {
        for (int64_t i = 0; i < m; ++i) gb[i] -= g[i];
      }
    });
  }
  maybe_check_finite("sub", out);
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (recording<T>({a.requires_grad(), b.requires_grad()})) {
    out.set_requires_grad(true);
    const bool na = a.requires_grad(), nb = b.requires_grad();
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record(out, [ac, bc, oc, na, nb]() mutable {
      const T* g = oc.grad();
      const int64_t m = oc.numel();
      if (T* ga = na ? ac.grad() : nullptr) {
        const T* pb2 = bc.data();
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * pb2[i];
      }
      if (T* gb = nb ? bc.grad() : nullptr) {
        const T* pa2 = ac.data();
        for (int64_t i = 0; i < m; ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  maybe_check_finite("mul", out);
  return out;
}

// ---------------------------------------------------------------------------
// Constant-scalar ops (the constant is not a graph node)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mul_const(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, c]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * c;
    });
  }
  maybe_check_finite("mul_const", out);
  return out;
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g[i];
    });
  }
  maybe_check_finite("add_const", out);
  return out;
}

// out = c - a
template <typename T>
Tensor<T> rsub_const(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = c - pa[i];
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] -= g[i];
    });
  }
  maybe_check_finite("rsub_const", out);
  return out;
}

// ---------------------------------------------------------------------------
// Scalar-tensor broadcast ops: s is a 1-element tensor participating in the
// graph. The only broadcasting the engine supports.
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
inline void check_scalar_operand(const char* op, const Tensor<T>& s) {
  if (s.numel() != 1)
    throw std::invalid_argument(std::string(op) + ": scalar operand must have 1 element, got " +
                                shape_str(s.shape()));
}
}  // namespace detail

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  detail::check_scalar_operand("mul_scalar", s);
  Tensor<T> out(a.shape());
  const T sv = s.at(0);
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * sv;
  if (recording<T>({a.requires_grad(), s.requires_grad()})) {
    out.set_requires_grad(true);
    const bool na = a.requires_grad(), ns = s.requires_grad();
    Tensor<T> ac = a, sc = s, oc = out;
    Tape<T>::active()->record(out, [ac, sc, oc, na, ns]() mutable {
      const T* g = oc.grad();
      const int64_t m = oc.numel();
      if (T* ga = na ? ac.grad() : nullptr) {
        const T sv2 = sc.at(0);
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * sv2;
      }
      if (T* gs = ns ? sc.grad() : nullptr) {
        const T* pa2 = ac.data();
        T acc = T(0);
        for (int64_t i = 0; i < m; ++i) acc += g[i] * pa2[i];
        gs[0] += acc;
      }
    });
  }
  maybe_check_finite("mul_scalar", out);
  return out;
}

template <typename T>
Tensor<T> sub_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  detail::check_scalar_operand("sub_scalar", s);
  Tensor<T> out(a.shape());
  const T sv = s.at(0);
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - sv;
  if (recording<T>({a.requires_grad(), s.requires_grad()})) {
    out.set_requires_grad(true);
    const bool na = a.requires_grad(), ns = s.requires_grad();
    Tensor<T> ac = a, sc = s, oc = out;
    Tape<T>::active()->record(out, [ac, sc, oc, na, ns]() mutable {
      const T* g = oc.grad();
      const int64_t m = oc.numel();
      if (T* ga = na ? ac.grad() : nullptr) {
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i];
      }
      if (T* gs = ns ? sc.grad() : nullptr) {
        T acc = T(0);
        for (int64_t i = 0; i < m; ++i) acc += g[i];
        gs[0] -= acc;
      }
    });
  }
  maybe_check_finite("sub_scalar", out);
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> abs_op(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = std::abs(pa[i]);
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    // subgradient 0 at the origin
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const T* g = oc.grad();
      const T* pa2 = ac.data();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i)
        ga[i] += g[i] * (pa2[i] > T(0) ? T(1) : (pa2[i] < T(0) ? T(-1) : T(0)));
    });
  }
  maybe_check_finite("abs", out);
  return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pa[i];
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const T* g = oc.grad();
      const T* pa2 = ac.data();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * T(2) * pa2[i];
    });
  }
  maybe_check_finite("square", out);
  return out;
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = std::sqrt(pa[i]);
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    // subgradient 0 at x == 0 so losses that hit their zero case stay finite
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const T* g = oc.grad();
      const T* pv = oc.data();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i)
        if (pv[i] > T(0)) ga[i] += g[i] / (T(2) * pv[i]);
    });
  }
  maybe_check_finite("sqrt", out);
  return out;
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = std::log(pa[i]);
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const T* g = oc.grad();
      const T* pa2 = ac.data();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g[i] / pa2[i];
    });
  }
  maybe_check_finite("log", out);
  return out;
}

// Gradient passes through where lo <= x <= hi and is zero outside.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = std::min(hi, std::max(lo, pa[i]));
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, lo, hi]() mutable {
      const T* g = oc.grad();
      const T* pa2 = ac.data();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i)
        if (pa2[i] >= lo && pa2[i] <= hi) ga[i] += g[i];
    });
  }
  maybe_check_finite("clamp", out);
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > T(0) ? pa[i] : slope * pa[i];
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, slope]() mutable {
      const T* g = oc.grad();
      const T* pa2 = ac.data();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * (pa2[i] > T(0) ? T(1) : slope);
    });
  }
  maybe_check_finite("leaky_relu", out);
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-pa[i]));
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const T* g = oc.grad();
      const T* pv = oc.data();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * pv[i] * (T(1) - pv[i]);
    });
  }
  maybe_check_finite("sigmoid", out);
  return out;
}

// ---------------------------------------------------------------------------
// Reductions (always to a [1] scalar)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tensor<T> out(Shape{1});
  const T* pa = a.data();
  const int64_t n = a.numel();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  out.at(0) = acc;
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const T g = oc.grad()[0];
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = ac.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g;
    });
  }
  maybe_check_finite("sum", out);
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  Tensor<T> out(Shape{1});
  const T* pa = a.data();
  const int64_t n = a.numel();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  out.at(0) = acc / static_cast<T>(n);
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const int64_t m = ac.numel();
      const T g = oc.grad()[0] / static_cast<T>(m);
      T* ga = ac.grad();
      if (ga == nullptr) return;
      for (int64_t i = 0; i < m; ++i) ga[i] += g;
    });
  }
  maybe_check_finite("mean", out);
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

// Copying reshape; element order is preserved.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (numel_of(new_shape) != a.numel())
    throw std::invalid_argument("reshape: cannot reshape " + shape_str(a.shape()) + " to " +
                                shape_str(new_shape));
  Tensor<T> out = Tensor<T>::from_data(std::move(new_shape), a.values());
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      const int64_t m = oc.numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g[i];
    });
  }
  return out;
}

// Flip along the last (width) dimension.
template <typename T>
Tensor<T> horizontal_flip(const Tensor<T>& a) {
  if (a.rank() < 1) throw std::invalid_argument("horizontal_flip: rank-0 tensor");
  Tensor<T> out(a.shape());
  const int64_t w = a.dim(a.rank() - 1);
  const int64_t rows = a.numel() / w;
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t x = 0; x < w; ++x) po[r * w + x] = pa[r * w + (w - 1 - x)];
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, rows, w]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t x = 0; x < w; ++x) ga[r * w + (w - 1 - x)] += g[r * w + x];
    });
  }
  return out;
}

// Concatenate two [B,C,H,W] tensors along the channel axis.
template <typename T>
Tensor<T> concat_channel(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4)
    throw std::invalid_argument("concat_channel: expects rank-4 tensors, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    shape_error("concat_channel", a.shape(), b.shape());
  const int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor<T> out(Shape{B, Ca + Cb, H, W});
  const int64_t plane = H * W;
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t n = 0; n < B; ++n) {
    std::memcpy(po + n * (Ca + Cb) * plane, pa + n * Ca * plane, sizeof(T) * Ca * plane);
    std::memcpy(po + (n * (Ca + Cb) + Ca) * plane, pb + n * Cb * plane, sizeof(T) * Cb * plane);
  }
  if (recording<T>({a.requires_grad(), b.requires_grad()})) {
    out.set_requires_grad(true);
    const bool na = a.requires_grad(), nb = b.requires_grad();
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record(out, [ac, bc, oc, na, nb, B, Ca, Cb, plane]() mutable {
      const T* g = oc.grad();
      T* ga = na ? ac.grad() : nullptr;
      T* gb = nb ? bc.grad() : nullptr;
      for (int64_t n = 0; n < B; ++n) {
        if (ga) {
          const T* gs = g + n * (Ca + Cb) * plane;
          T* gd = ga + n * Ca * plane;
          for (int64_t i = 0; i < Ca * plane; ++i) gd[i] += gs[i];
        }
        if (gb) {
          const T* gs = g + (n * (Ca + Cb) + Ca) * plane;
          T* gd = gb + n * Cb * plane;
          for (int64_t i = 0; i < Cb * plane; ++i) gd[i] += gs[i];
        }
      }
    });
  }
  return out;
}

// Repeat a [B,1,H,W] tensor across reps channels.
template <typename T>
Tensor<T> repeat_channel(const Tensor<T>& a, int64_t reps) {
  if (a.rank() != 4 || a.dim(1) != 1)
    throw std::invalid_argument("repeat_channel: expects [B,1,H,W], got " + shape_str(a.shape()));
  const int64_t B = a.dim(0), H = a.dim(2), W = a.dim(3), plane = H * W;
  Tensor<T> out(Shape{B, reps, H, W});
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t n = 0; n < B; ++n)
    for (int64_t c = 0; c < reps; ++c)
      std::memcpy(po + (n * reps + c) * plane, pa + n * plane, sizeof(T) * plane);
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, B, reps, plane]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      for (int64_t n = 0; n < B; ++n)
        for (int64_t c = 0; c < reps; ++c) {
          const T* gs = g + (n * reps + c) * plane;
          T* gd = ga + n * plane;
          for (int64_t i = 0; i < plane; ++i) gd[i] += gs[i];
        }
    });
  }
  return out;
}

// Select one batch element from a [B,...] tensor, keeping a leading 1.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& a, int64_t b) {
  if (a.rank() < 1 || b < 0 || b >= a.dim(0))
    throw std::invalid_argument("slice_batch: index " + std::to_string(b) + " out of range for " +
                                shape_str(a.shape()));
  Shape s = a.shape();
  s[0] = 1;
  const int64_t stride = a.numel() / a.dim(0);
  Tensor<T> out(s);
  std::memcpy(out.data(), a.data() + b * stride, sizeof(T) * stride);
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, b, stride]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      if (ga == nullptr) return;
      ga += b * stride;
      for (int64_t i = 0; i < stride; ++i) ga[i] += g[i];
    });
  }
  return out;
}

// Select one channel from a [B,C,H,W] tensor, keeping a singleton axis.
template <typename T>
Tensor<T> slice_channel(const Tensor<T>& a, int64_t c) {
  if (a.rank() != 4 || c < 0 || c >= a.dim(1))
    throw std::invalid_argument("slice_channel: index " + std::to_string(c) +
                                " out of range for " + shape_str(a.shape()));
  const int64_t B = a.dim(0), C = a.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor<T> out(Shape{B, 1, a.dim(2), a.dim(3)});
  for (int64_t n = 0; n < B; ++n)
    std::memcpy(out.data() + n * plane, a.data() + (n * C + c) * plane, sizeof(T) * plane);
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, B, C, c, plane]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      for (int64_t n = 0; n < B; ++n) {
        const T* gs = g + n * plane;
        T* gd = ga + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) gd[i] += gs[i];
      }
    });
  }
  return out;
}

// Forward difference along width: out[...,x] = a[...,x+1] - a[...,x].
template <typename T>
Tensor<T> dx_forward(const Tensor<T>& a) {
  if (a.rank() != 4) throw std::invalid_argument("dx_forward: expects rank-4 tensor");
  const int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (W < 2) throw std::invalid_argument("dx_forward: width < 2");
  Tensor<T> out(Shape{B, C, H, W - 1});
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t r = 0; r < B * C * H; ++r)
    for (int64_t x = 0; x < W - 1; ++x)
      po[r * (W - 1) + x] = pa[r * W + x + 1] - pa[r * W + x];
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, B, C, H, W]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      for (int64_t r = 0; r < B * C * H; ++r)
        for (int64_t x = 0; x < W - 1; ++x) {
          const T gv = g[r * (W - 1) + x];
          ga[r * W + x + 1] += gv;
          ga[r * W + x] -= gv;
        }
    });
  }
  return out;
}

// Forward difference along height.
template <typename T>
Tensor<T> dy_forward(const Tensor<T>& a) {
  if (a.rank() != 4) throw std::invalid_argument("dy_forward: expects rank-4 tensor");
  const int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (H < 2) throw std::invalid_argument("dy_forward: height < 2");
  Tensor<T> out(Shape{B, C, H - 1, W});
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t p = 0; p < B * C; ++p)
    for (int64_t y = 0; y < H - 1; ++y)
      for (int64_t x = 0; x < W; ++x)
        po[(p * (H - 1) + y) * W + x] = pa[(p * H + y + 1) * W + x] - pa[(p * H + y) * W + x];
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, B, C, H, W]() mutable {
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      for (int64_t p = 0; p < B * C; ++p)
        for (int64_t y = 0; y < H - 1; ++y)
          for (int64_t x = 0; x < W; ++x) {
            const T gv = g[(p * (H - 1) + y) * W + x];
            ga[(p * H + y + 1) * W + x] += gv;
            ga[(p * H + y) * W + x] -= gv;
          }
    });
  }
  return out;
}

}  // namespace affunet
