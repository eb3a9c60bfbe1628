#pragma once

#include <array>

#include "affunet/conv.hpp"

namespace affunet {

// ---------------------------------------------------------------------------
// Kernel coordinate grid: the k*k window offsets in row-major order, x
// fastest, so for k=3 the list runs (-1,-1),(0,-1),...,(1,1) in (dx,dy)
// pairs. Offset j pairs with weight element (ky,kx) = (j/k, j%k).
// ---------------------------------------------------------------------------
struct KernelGrid {
  int64_t k = 3;
  std::vector<std::array<int64_t, 2>> offsets;  // (dx, dy)

  static KernelGrid make(int64_t k) {
    if (k < 1 || k % 2 == 0)
      throw std::invalid_argument("KernelGrid: kernel size must be odd, got " +
                                  std::to_string(k));
    KernelGrid g;
    g.k = k;
    const int64_t r = (k - 1) / 2;
    g.offsets.reserve(static_cast<size_t>(k * k));
    for (int64_t dy = -r; dy <= r; ++dy)
      for (int64_t dx = -r; dx <= r; ++dx) g.offsets.push_back({dx, dy});
    return g;
  }
};

// Per-location affine transforms for a convolution output grid. params is
// [B, 6, Ho, Wo]; the 6 channels row-fill the 3x2 matrix
//   [[a, b], [c, d], [tx, ty]]
// and (1,0,0,1,0,0) encodes the identity.
template <typename T>
struct AffineField {
  Tensor<T> params;

  static constexpr std::array<double, 6> identity_encoding() {
    return {1.0, 0.0, 0.0, 1.0, 0.0, 0.0};
  }

  static AffineField identity(int64_t batch, int64_t h, int64_t w) {
    AffineField f;
    f.params = Tensor<T>(Shape{batch, 6, h, w});
    const auto enc = identity_encoding();
    const int64_t plane = h * w;
    for (int64_t n = 0; n < batch; ++n)
      for (int64_t c = 0; c < 6; ++c)
        std::fill(f.params.data() + (n * 6 + c) * plane,
                  f.params.data() + (n * 6 + c + 1) * plane, static_cast<T>(enc[c]));
    return f;
  }
};

// New kernel support coordinates: the augmented offset rows [dx dy 1] (shape
// [k*k, 3]) multiplied by the 3x2 matrix A, then shifted to the window
// center. The linear block therefore acts about the window center, which
// reproduces the plain window exactly when A is the identity.
template <typename T>
std::vector<std::array<T, 2>> transform_kernel_coords(const KernelGrid& grid,
                                                      const std::array<T, 6>& A, T center_x,
                                                      T center_y) {
  std::vector<std::array<T, 2>> out(grid.offsets.size());
  const T a = A[0], b = A[1], c = A[2], d = A[3], tx = A[4], ty = A[5];
  for (size_t j = 0; j < grid.offsets.size(); ++j) {
    const T dx = static_cast<T>(grid.offsets[j][0]);
    const T dy = static_cast<T>(grid.offsets[j][1]);
    out[j][0] = center_x + dx * a + dy * c + tx;
    out[j][1] = center_y + dx * b + dy * d + ty;
  }
  return out;
}

namespace detail {

// Bilinear read with zero padding, plus the value derivatives w.r.t. the
// sample coordinates. Follows the deformable-convolution sampling rule.
template <typename T>
struct BilinearTap {
  int64_t x0, x1, y0, y1;
  T wx, wy;
  bool in00, in01, in10, in11;
};

template <typename T>
inline BilinearTap<T> make_tap(T x, T y, int64_t H, int64_t W) {
  BilinearTap<T> t;
  const T fx = std::floor(x), fy = std::floor(y);
  t.x0 = static_cast<int64_t>(fx);
  t.y0 = static_cast<int64_t>(fy);
  t.x1 = t.x0 + 1;
  t.y1 = t.y0 + 1;
  t.wx = x - fx;
  t.wy = y - fy;
  t.in00 = t.x0 >= 0 && t.x0 < W && t.y0 >= 0 && t.y0 < H;
  t.in01 = t.x1 >= 0 && t.x1 < W && t.y0 >= 0 && t.y0 < H;
  t.in10 = t.x0 >= 0 && t.x0 < W && t.y1 >= 0 && t.y1 < H;
  t.in11 = t.x1 >= 0 && t.x1 < W && t.y1 >= 0 && t.y1 < H;
  return t;
}

template <typename T>
inline T tap_value(const BilinearTap<T>& t, const T* plane, int64_t W) {
  const T v00 = t.in00 ? plane[t.y0 * W + t.x0] : T(0);
  const T v01 = t.in01 ? plane[t.y0 * W + t.x1] : T(0);
  const T v10 = t.in10 ? plane[t.y1 * W + t.x0] : T(0);
  const T v11 = t.in11 ? plane[t.y1 * W + t.x1] : T(0);
  return (T(1) - t.wy) * ((T(1) - t.wx) * v00 + t.wx * v01) +
         t.wy * ((T(1) - t.wx) * v10 + t.wx * v11);
}

template <typename T>
inline void tap_coord_grads(const BilinearTap<T>& t, const T* plane, int64_t W, T& dvdx, T& dvdy) {
  const T v00 = t.in00 ? plane[t.y0 * W + t.x0] : T(0);
  const T v01 = t.in01 ? plane[t.y0 * W + t.x1] : T(0);
  const T v10 = t.in10 ? plane[t.y1 * W + t.x0] : T(0);
  const T v11 = t.in11 ? plane[t.y1 * W + t.x1] : T(0);
  dvdx = (T(1) - t.wy) * (v01 - v00) + t.wy * (v11 - v10);
  dvdy = (T(1) - t.wx) * (v10 - v00) + t.wx * (v11 - v01);
}

template <typename T>
inline void tap_scatter(const BilinearTap<T>& t, T* gplane, int64_t W, T g) {
  if (t.in00) gplane[t.y0 * W + t.x0] += g * (T(1) - t.wy) * (T(1) - t.wx);
  if (t.in01) gplane[t.y0 * W + t.x1] += g * (T(1) - t.wy) * t.wx;
  if (t.in10) gplane[t.y1 * W + t.x0] += g * t.wy * (T(1) - t.wx);
  if (t.in11) gplane[t.y1 * W + t.x1] += g * t.wy * t.wx;
}

}  // namespace detail

// Standalone differentiable bilinear gather: map [B,C,H,W], coords [N,2] as
// (x,y) pixel positions shared across batch and channels -> values [B,C,N].
// Out-of-bounds neighbors contribute zero.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& coords) {
  if (map.rank() != 4) throw std::invalid_argument("bilinear_sample: map must be rank-4");
  if (coords.rank() != 2 || coords.dim(1) != 2)
    throw std::invalid_argument("bilinear_sample: coords must be [N,2], got " +
                                shape_str(coords.shape()));
  const int64_t B = map.dim(0), C = map.dim(1), H = map.dim(2), W = map.dim(3);
  const int64_t N = coords.dim(0);
  Tensor<T> out(Shape{B, C, N});
  for (int64_t i = 0; i < N; ++i) {
    const auto tap = detail::make_tap(coords.at(2 * i), coords.at(2 * i + 1), H, W);
    for (int64_t p = 0; p < B * C; ++p)
      out.at(p * N + i) = detail::tap_value(tap, map.data() + p * H * W, W);
  }
  if (recording<T>({map.requires_grad(), coords.requires_grad()})) {
    out.set_requires_grad(true);
    const bool nm = map.requires_grad(), nc = coords.requires_grad();
    Tensor<T> mc = map, cc = coords, oc = out;
    Tape<T>::active()->record(out, [mc, cc, oc, nm, nc, B, C, H, W, N]() mutable {
      const T* g = oc.grad();
      T* gm = nm ? mc.grad() : nullptr;
      T* gc = nc ? cc.grad() : nullptr;
      for (int64_t i = 0; i < N; ++i) {
        const auto tap = detail::make_tap(cc.at(2 * i), cc.at(2 * i + 1), H, W);
        T gx = T(0), gy = T(0);
        for (int64_t p = 0; p < B * C; ++p) {
          const T gv = g[p * N + i];
          if (gm) detail::tap_scatter(tap, gm + p * H * W, W, gv);
          if (gc) {
            T dvdx, dvdy;
            detail::tap_coord_grads(tap, mc.data() + p * H * W, W, dvdx, dvdy);
            gx += gv * dvdx;
            gy += gv * dvdy;
          }
        }
        if (gc) {
          gc[2 * i] += gx;
          gc[2 * i + 1] += gy;
        }
      }
    });
  }
  return out;
}

namespace detail {

// Builds the sampled-column matrix for one batch element of an affine
// convolution: col[(ci*k*k + j), loc] with loc = oy*Wo+ox. Shares its layout
// with im2col so the host GEMM is the same code path as conv2d; with an
// identity field the two matrices are bitwise equal.
template <typename T>
inline void affine_cols(const T* in, const T* field, int64_t Ci, int64_t H, int64_t W, int64_t k,
                        int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* col) {
  const int64_t r = (k - 1) / 2;
  const int64_t kk = k * k;
  const int64_t cols = Ho * Wo;
  const int64_t plane = Ho * Wo;
  for (int64_t oy = 0; oy < Ho; ++oy) {
    for (int64_t ox = 0; ox < Wo; ++ox) {
      const int64_t loc = oy * Wo + ox;
      const T a = field[0 * plane + loc], b = field[1 * plane + loc];
      const T c = field[2 * plane + loc], d = field[3 * plane + loc];
      const T tx = field[4 * plane + loc], ty = field[5 * plane + loc];
      const T cx = static_cast<T>(ox * stride - pad + r);
      const T cy = static_cast<T>(oy * stride - pad + r);
      for (int64_t j = 0; j < kk; ++j) {
        const T dx = static_cast<T>(j % k - r);
        const T dy = static_cast<T>(j / k - r);
        const auto tap = make_tap(cx + dx * a + dy * c + tx, cy + dx * b + dy * d + ty, H, W);
        for (int64_t ci = 0; ci < Ci; ++ci)
          col[(ci * kk + j) * cols + loc] = tap_value(tap, in + ci * H * W, W);
      }
    }
  }
}

}  // namespace detail

// Convolution whose kernel support is warped per output location by the
// affine field before bilinear gathering. Gradients flow to input, weight,
// bias and the field parameters.
template <typename T>
Tensor<T> affine_conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                        const AffineField<T>& field, int64_t stride, int64_t pad) {
  if (input.rank() != 4 || weight.rank() != 4)
    throw std::invalid_argument("affine_conv2d: expects rank-4 input and weight");
  const int64_t B = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Co = weight.dim(0), k = weight.dim(2);
  if (k % 2 == 0) throw std::invalid_argument("affine_conv2d: kernel size must be odd");
  if (weight.dim(1) != Ci)
    throw std::invalid_argument("affine_conv2d: input channels (" + std::to_string(Ci) +
                                ") do not match weight channels (" +
                                std::to_string(weight.dim(1)) + ")");
  const int64_t Ho = detail::conv_out_dim(H, k, stride, pad);
  const int64_t Wo = detail::conv_out_dim(W, k, stride, pad);
  const Tensor<T>& fp = field.params;
  if (fp.rank() != 4 || fp.dim(0) != B || fp.dim(1) != 6 || fp.dim(2) != Ho || fp.dim(3) != Wo)
    throw std::invalid_argument("affine_conv2d: field shape " + shape_str(fp.shape()) +
                                " does not match output grid [" + std::to_string(B) + ",6," +
                                std::to_string(Ho) + "," + std::to_string(Wo) + "]");

  Tensor<T> out(Shape{B, Co, Ho, Wo});
  const int64_t K = Ci * k * k, cols = Ho * Wo;
  {
    std::vector<T> col(static_cast<size_t>(K * cols));
    for (int64_t n = 0; n < B; ++n) {
      detail::affine_cols(input.data() + n * Ci * H * W, fp.data() + n * 6 * cols, Ci, H, W, k,
                          stride, pad, Ho, Wo, col.data());
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
                    bias.defined() && bias.requires_grad(), fp.requires_grad()})) {
    out.set_requires_grad(true);
    const bool ni = input.requires_grad(), nw = weight.requires_grad();
    const bool nb = bias.defined() && bias.requires_grad(), nf = fp.requires_grad();
    Tensor<T> ic = input, wc = weight, bc = bias, fc = fp, oc = out;
    Tape<T>::active()->record(out, [ic, wc, bc, fc, oc, ni, nw, nb, nf, B, Ci, H, W, Co, k,
                                    stride, pad, Ho, Wo]() mutable {
      const int64_t r = (k - 1) / 2, kk = k * k;
      const int64_t K = Ci * kk, cols = Ho * Wo;
      std::vector<T> col(static_cast<size_t>(K * cols));
      std::vector<T> gcol(static_cast<size_t>(K * cols));
      for (int64_t n = 0; n < B; ++n) {
        const T* g = oc.grad() + n * Co * cols;
        const T* in = ic.data() + n * Ci * H * W;
        const T* field = fc.data() + n * 6 * cols;
        if (nw && wc.grad() != nullptr) {
          detail::affine_cols(in, field, Ci, H, W, k, stride, pad, Ho, Wo, col.data());
          detail::gemm_a_bt(g, col.data(), wc.grad(), Co, cols, K, /*accumulate=*/true);
        }
        if (nb && bc.grad() != nullptr) {
          T* gb = bc.grad();
          for (int64_t co = 0; co < Co; ++co) {
            T acc = T(0);
            for (int64_t i = 0; i < cols; ++i) acc += g[co * cols + i];
            gb[co] += acc;
          }
        }
        const bool need_input = ni && ic.grad() != nullptr;
        const bool need_field = nf && fc.grad() != nullptr;
        if (!need_input && !need_field) continue;
        // per-column upstream gradient: gcol = W^T * g
        detail::gemm_at_b(wc.data(), g, gcol.data(), K, Co, cols);
        T* gin = need_input ? ic.grad() + n * Ci * H * W : nullptr;
        T* gf = need_field ? fc.grad() + n * 6 * cols : nullptr;
        for (int64_t oy = 0; oy < Ho; ++oy)
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const int64_t loc = oy * Wo + ox;
            const T a = field[0 * cols + loc], b = field[1 * cols + loc];
            const T c = field[2 * cols + loc], d = field[3 * cols + loc];
            const T tx = field[4 * cols + loc], ty = field[5 * cols + loc];
            const T cx = static_cast<T>(ox * stride - pad + r);
            const T cy = static_cast<T>(oy * stride - pad + r);
            for (int64_t j = 0; j < kk; ++j) {
              const T dx = static_cast<T>(j % k - r);
              const T dy = static_cast<T>(j / k - r);
              const auto tap = detail::make_tap(cx + dx * a + dy * c + tx,
                                                cy + dx * b + dy * d + ty, H, W);
              T gx = T(0), gy = T(0);
              for (int64_t ci = 0; ci < Ci; ++ci) {
                const T gval = gcol[(ci * kk + j) * cols + loc];
                if (need_input) detail::tap_scatter(tap, gin + ci * H * W, W, gval);
                if (need_field) {
                  T dvdx, dvdy;
                  detail::tap_coord_grads(tap, in + ci * H * W, W, dvdx, dvdy);
                  gx += gval * dvdx;
                  gy += gval * dvdy;
                }
              }
              if (need_field) {
                gf[0 * cols + loc] += gx * dx;
                gf[1 * cols + loc] += gy * dx;
                gf[2 * cols + loc] += gx * dy;
                gf[3 * cols + loc] += gy * dy;
                gf[4 * cols + loc] += gx;
                gf[5 * cols + loc] += gy;
              }
            }
          }
      }
    });
  }
  maybe_check_finite("affine_conv2d", out);
  return out;
}

// The field-predicting convolution: a k x k conv with 6 output channels and
// the host layer's stride/padding, so each output location's transform is a
// function of exactly its own input window.
template <typename T>
AffineField<T> predict_affine_field(const Tensor<T>& features, const Tensor<T>& pred_weight,
                                    const Tensor<T>& pred_bias, int64_t stride, int64_t pad) {
  if (pred_weight.dim(0) != 6)
    throw std::invalid_argument("predict_affine_field: predictor must have 6 output channels");
  AffineField<T> f;
  f.params = conv2d(features, pred_weight, pred_bias, stride, pad);
  return f;
}

// One affine convolution layer: host conv parameters plus the field
// predictor. Freshly initialized layers predict the identity field
// everywhere and behave exactly like a standard convolution.
template <typename T>
struct AffineConvLayer {
  Tensor<T> weight, bias;            // host conv
  Tensor<T> pred_weight, pred_bias;  // field predictor
  int64_t stride = 1, pad = 1;

  static AffineConvLayer init(int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride,
                              int64_t pad, Rng& rng) {
    AffineConvLayer l;
    l.stride = stride;
    l.pad = pad;
    const double std = std::sqrt(2.0 / static_cast<double>(in_ch * k * k));
    l.weight = Tensor<T>::randn(Shape{out_ch, in_ch, k, k}, rng, std);
    l.bias = Tensor<T>::zeros(Shape{out_ch});
    l.pred_weight = Tensor<T>::zeros(Shape{6, in_ch, k, k});
    l.pred_bias = Tensor<T>::zeros(Shape{6});
    const auto enc = AffineField<T>::identity_encoding();
    for (int64_t i = 0; i < 6; ++i) l.pred_bias.at(i) = static_cast<T>(enc[static_cast<size_t>(i)]);
    return l;
  }

  Tensor<T> forward(const Tensor<T>& input) const {
    AffineField<T> field = predict_affine_field(input, pred_weight, pred_bias, stride, pad);
    return affine_conv2d(input, weight, bias, field, stride, pad);
  }
};

template <typename T>
Tensor<T> affine_conv_layer_forward(const Tensor<T>& input, const AffineConvLayer<T>& layer) {
  return layer.forward(input);
}

}  // namespace affunet
