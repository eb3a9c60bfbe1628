#pragma once

#include <Eigen/Core>

#include "affunet/ops.hpp"

namespace affunet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[M,N] = A[M,K] * B[K,N] on raw row-major buffers.
template <typename T>
inline void gemm(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N,
                 bool accumulate = false) {
  Eigen::Map<const RowMat<T>> a(A, M, K);
  Eigen::Map<const RowMat<T>> b(B, K, N);
  Eigen::Map<RowMat<T>> c(C, M, N);
  if (accumulate)
    c.noalias() += a * b;
  else
    c.noalias() = a * b;
}

// C[M,N] = A^T[M,K(rows of A)] ... convenience wrappers for the transposed
// products the conv backward needs.
template <typename T>
inline void gemm_at_b(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N,
                      bool accumulate = false) {
  // A is [K,M], B is [K,N], C = A^T * B
  Eigen::Map<const RowMat<T>> a(A, K, M);
  Eigen::Map<const RowMat<T>> b(B, K, N);
  Eigen::Map<RowMat<T>> c(C, M, N);
  if (accumulate)
    c.noalias() += a.transpose() * b;
  else
    c.noalias() = a.transpose() * b;
}

template <typename T>
inline void gemm_a_bt(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N,
                      bool accumulate = false) {
  // A is [M,K], B is [N,K], C = A * B^T
  Eigen::Map<const RowMat<T>> a(A, M, K);
  Eigen::Map<const RowMat<T>> b(B, N, K);
  Eigen::Map<RowMat<T>> c(C, M, N);
  if (accumulate)
    c.noalias() += a * b.transpose();
  else
    c.noalias() = a * b.transpose();
}

// One sample: input plane [Ci,H,W] -> columns [Ci*k*k, Ho*Wo], zero padding.
template <typename T>
inline void im2col(const T* in, int64_t Ci, int64_t H, int64_t W, int64_t k, int64_t stride,
                   int64_t pad, int64_t Ho, int64_t Wo, T* col) {
  const int64_t cols = Ho * Wo;
  for (int64_t ci = 0; ci < Ci; ++ci) {
    for (int64_t ky = 0; ky < k; ++ky) {
      for (int64_t kx = 0; kx < k; ++kx) {
        T* row = col + ((ci * k + ky) * k + kx) * cols;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill(row + oy * Wo, row + (oy + 1) * Wo, T(0));
            continue;
          }
          const T* src = in + (ci * H + iy) * W;
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            row[oy * Wo + ox] = (ix < 0 || ix >= W) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the input gradient plane.
template <typename T>
inline void col2im_add(const T* col, int64_t Ci, int64_t H, int64_t W, int64_t k, int64_t stride,
                       int64_t pad, int64_t Ho, int64_t Wo, T* gin) {
  const int64_t cols = Ho * Wo;
  for (int64_t ci = 0; ci < Ci; ++ci) {
    for (int64_t ky = 0; ky < k; ++ky) {
      for (int64_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((ci * k + ky) * k + kx) * cols;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = gin + (ci * H + iy) * W;
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// Standard 2D convolution (cross-correlation), zero padding. bias may be an
// undefined tensor to skip it. Gradients flow to input, weight and bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int64_t stride, int64_t pad) {
  if (input.rank() != 4 || weight.rank() != 4)
    throw std::invalid_argument("conv2d: expects rank-4 input and weight, got " +
                                shape_str(input.shape()) + " and " + shape_str(weight.shape()));
  const int64_t B = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Ci)
    throw std::invalid_argument("conv2d: input channels (" + std::to_string(Ci) +
                                ") do not match weight channels (" + std::to_string(weight.dim(1)) +
                                ")");
  if (weight.dim(3) != k) throw std::invalid_argument("conv2d: non-square kernel");
  if (bias.defined() && bias.numel() != Co)
    throw std::invalid_argument("conv2d: bias size " + std::to_string(bias.numel()) +
                                " does not match output channels " + std::to_string(Co));
  const int64_t Ho = detail::conv_out_dim(H, k, stride, pad);
  const int64_t Wo = detail::conv_out_dim(W, k, stride, pad);
  if (Ho < 1 || Wo < 1)
    throw std::invalid_argument("conv2d: output would be empty for input " +
                                shape_str(input.shape()));

  Tensor<T> out(Shape{B, Co, Ho, Wo});
  const int64_t K = Ci * k * k, cols = Ho * Wo;
  {
    std::vector<T> col(static_cast<size_t>(K * cols));
    for (int64_t n = 0; n < B; ++n) {
      detail::im2col(input.data() + n * Ci * H * W, Ci, H, W, k, stride, pad, Ho, Wo, col.data());
      detail::gemm(weight.data(), col.data(), out.data() + n * Co * cols, Co, K, cols);
      if (bias.defined()) {
        T* po = out.data() + n * Co * cols;
        for (int64_t co = 0; co < Co; ++co) {
          const T bv = bias.at(co);
          for (int64_t i = 0; i < cols; ++i) po[co * cols + i] += bv;
        }
      }
    }
  }

  if (recording<T>({input.requires_grad(), weight.requires_grad(),
                    bias.defined() && bias.requires_grad()})) {
    out.set_requires_grad(true);
    const bool ni = input.requires_grad(), nw = weight.requires_grad();
    const bool nb = bias.defined() && bias.requires_grad();
    Tensor<T> ic = input, wc = weight, bc = bias, oc = out;
    Tape<T>::active()->record(out, [ic, wc, bc, oc, ni, nw, nb, B, Ci, H, W, Co, k, stride, pad,
                                    Ho, Wo]() mutable {
      const int64_t K = Ci * k * k, cols = Ho * Wo;
      std::vector<T> col(static_cast<size_t>(K * cols));
      std::vector<T> gcol;
      if (ni) gcol.resize(static_cast<size_t>(K * cols));
      for (int64_t n = 0; n < B; ++n) {
        const T* g = oc.grad() + n * Co * cols;
        if (nw || ni)
          detail::im2col(ic.data() + n * Ci * H * W, Ci, H, W, k, stride, pad, Ho, Wo, col.data());
        if (nw && wc.grad() != nullptr)
          detail::gemm_a_bt(g, col.data(), wc.grad(), Co, cols, K, /*accumulate=*/true);
        if (nb && bc.grad() != nullptr) {
          T* gb = bc.grad();
          for (int64_t co = 0; co < Co; ++co) {
            T acc = T(0);
            for (int64_t i = 0; i < cols; ++i) acc += g[co * cols + i];
            gb[co] += acc;
          }
        }
        if (ni && ic.grad() != nullptr) {
          detail::gemm_at_b(wc.data(), g, gcol.data(), K, Co, cols);
          detail::col2im_add(gcol.data(), Ci, H, W, k, stride, pad, Ho, Wo,
                             ic.grad() + n * Ci * H * W);
        }
      }
    });
  }
  maybe_check_finite("conv2d", out);
  return out;
}

// 2x2 average pooling, stride 2. Requires even spatial dims.
template <typename T>
Tensor<T> avgpool2x2(const Tensor<T>& a) {
  if (a.rank() != 4) throw std::invalid_argument("avgpool2x2: expects rank-4 tensor");
  const int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw std::invalid_argument("avgpool2x2: odd spatial dims in " + shape_str(a.shape()));
  Tensor<T> out(Shape{B, C, H / 2, W / 2});
  const T* pa = a.data();
  T* po = out.data();
  const int64_t Ho = H / 2, Wo = W / 2;
  for (int64_t p = 0; p < B * C; ++p)
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t x = 0; x < Wo; ++x) {
        const T* s = pa + (p * H + 2 * y) * W + 2 * x;
        po[(p * Ho + y) * Wo + x] = (s[0] + s[1] + s[W] + s[W + 1]) * T(0.25);
      }
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, B, C, H, W]() mutable {
      const int64_t Ho = H / 2, Wo = W / 2;
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      for (int64_t p = 0; p < B * C; ++p)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t x = 0; x < Wo; ++x) {
            const T gv = g[(p * Ho + y) * Wo + x] * T(0.25);
            T* d = ga + (p * H + 2 * y) * W + 2 * x;
            d[0] += gv;
            d[1] += gv;
            d[W] += gv;
            d[W + 1] += gv;
          }
    });
  }
  return out;
}

// Bilinear 2x upsampling with half-pixel centers and edge clamping.
template <typename T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& a) {
  if (a.rank() != 4) throw std::invalid_argument("bilinear_upsample2x: expects rank-4 tensor");
  const int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const int64_t Ho = 2 * H, Wo = 2 * W;
  Tensor<T> out(Shape{B, C, Ho, Wo});
  // src = (dst + 0.5)/2 - 0.5; per-axis taps depend only on the coordinate
  auto taps = [](int64_t d, int64_t n, int64_t& i0, int64_t& i1, T& w1) {
    const double s = 0.5 * (static_cast<double>(d) + 0.5) - 0.5;
    double f = std::floor(s);
    i0 = static_cast<int64_t>(f);
    i1 = i0 + 1;
    w1 = static_cast<T>(s - f);
    if (i0 < 0) i0 = 0;
    if (i1 > n - 1) i1 = n - 1;
  };
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t p = 0; p < B * C; ++p) {
    const T* src = pa + p * H * W;
    T* dst = po + p * Ho * Wo;
    for (int64_t y = 0; y < Ho; ++y) {
      int64_t y0, y1;
      T wy;
      taps(y, H, y0, y1, wy);
      for (int64_t x = 0; x < Wo; ++x) {
        int64_t x0, x1;
        T wx;
        taps(x, W, x0, x1, wx);
        const T v00 = src[y0 * W + x0], v01 = src[y0 * W + x1];
        const T v10 = src[y1 * W + x0], v11 = src[y1 * W + x1];
        dst[y * Wo + x] = (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) +
                          wy * ((T(1) - wx) * v10 + wx * v11);
      }
    }
  }
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, B, C, H, W, taps]() mutable {
      const int64_t Ho = 2 * H, Wo = 2 * W;
      const T* g = oc.grad();
      T* ga = ac.grad();
      if (ga == nullptr) return;
      for (int64_t p = 0; p < B * C; ++p) {
        const T* gs = g + p * Ho * Wo;
        T* gd = ga + p * H * W;
        for (int64_t y = 0; y < Ho; ++y) {
          int64_t y0, y1;
          T wy;
          taps(y, H, y0, y1, wy);
          for (int64_t x = 0; x < Wo; ++x) {
            int64_t x0, x1;
            T wx;
            taps(x, W, x0, x1, wx);
            const T gv = gs[y * Wo + x];
            gd[y0 * W + x0] += gv * (T(1) - wy) * (T(1) - wx);
            gd[y0 * W + x1] += gv * (T(1) - wy) * wx;
            gd[y1 * W + x0] += gv * wy * (T(1) - wx);
            gd[y1 * W + x1] += gv * wy * wx;
          }
        }
      }
    });
  }
  return out;
}

struct GaussianParams {
  int64_t ksize = 9;
  double sigma = 3.0;

  static GaussianParams for_resolution(int64_t r) {
    GaussianParams p;
    p.sigma = 3.0 * static_cast<double>(r) / 512.0;
    return p;
  }
};

namespace detail {

inline int64_t mirror_index(int64_t i, int64_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -1 - i;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

template <typename T>
inline std::vector<T> gaussian_kernel(int64_t ksize, double sigma) {
  std::vector<T> w(static_cast<size_t>(ksize));
  const int64_t h = ksize / 2;
  double sum = 0.0;
  for (int64_t j = -h; j <= h; ++j) {
    const double v = std::exp(-0.5 * (static_cast<double>(j * j)) / (sigma * sigma));
    w[static_cast<size_t>(j + h)] = static_cast<T>(v);
    sum += v;
  }
  for (auto& v : w) v = static_cast<T>(static_cast<double>(v) / sum);
  return w;
}

// Separable pass along width (horiz=true) or height, mirror boundary.
template <typename T>
inline void blur_pass(const T* in, T* out, int64_t planes, int64_t H, int64_t W,
                      const std::vector<T>& kw, bool horiz) {
  const int64_t h = static_cast<int64_t>(kw.size()) / 2;
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = in + p * H * W;
    T* dst = out + p * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        T acc = T(0);
        for (int64_t j = -h; j <= h; ++j) {
          const int64_t yy = horiz ? y : mirror_index(y + j, H);
          const int64_t xx = horiz ? mirror_index(x + j, W) : x;
          acc += kw[static_cast<size_t>(j + h)] * src[yy * W + xx];
        }
        dst[y * W + x] = acc;
      }
  }
}

// Adjoint of blur_pass: scatter with the same index mapping.
template <typename T>
inline void blur_pass_adjoint(const T* g, T* gin, int64_t planes, int64_t H, int64_t W,
                              const std::vector<T>& kw, bool horiz) {
  const int64_t h = static_cast<int64_t>(kw.size()) / 2;
  for (int64_t p = 0; p < planes; ++p) {
    const T* gs = g + p * H * W;
    T* gd = gin + p * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const T gv = gs[y * W + x];
        for (int64_t j = -h; j <= h; ++j) {
          const int64_t yy = horiz ? y : mirror_index(y + j, H);
          const int64_t xx = horiz ? mirror_index(x + j, W) : x;
          gd[yy * W + xx] += kw[static_cast<size_t>(j + h)] * gv;
        }
      }
  }
}

}  // namespace detail

// Separable Gaussian blur with mirror padding; the mirror scheme keeps the
// operator symmetric so blur and horizontal flip commute exactly.
template <typename T>
Tensor<T> gaussian_blur(const Tensor<T>& a, const GaussianParams& gp) {
  if (a.rank() != 4) throw std::invalid_argument("gaussian_blur: expects rank-4 tensor");
  if (gp.ksize % 2 == 0 || gp.ksize < 1)
    throw std::invalid_argument("gaussian_blur: kernel size must be odd");
  if (!(gp.sigma > 0)) throw std::invalid_argument("gaussian_blur: sigma must be positive");
  const int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const auto kw = detail::gaussian_kernel<T>(gp.ksize, gp.sigma);
  Tensor<T> mid(a.shape()), out(a.shape());
  detail::blur_pass(a.data(), mid.data(), B * C, H, W, kw, /*horiz=*/true);
  detail::blur_pass(mid.data(), out.data(), B * C, H, W, kw, /*horiz=*/false);
  if (recording<T>({a.requires_grad()})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    Tape<T>::active()->record(out, [ac, oc, kw, B, C, H, W]() mutable {
      if (ac.grad() == nullptr) return;
      std::vector<T> gmid(static_cast<size_t>(B * C * H * W), T(0));
      detail::blur_pass_adjoint(oc.grad(), gmid.data(), B * C, H, W, kw, /*horiz=*/false);
      detail::blur_pass_adjoint(gmid.data(), ac.grad(), B * C, H, W, kw, /*horiz=*/true);
    });
  }
  maybe_check_finite("gaussian_blur", out);
  return out;
}

}  // namespace affunet
