#pragma once

#include "json.hpp"

#include "affunet/conv.hpp"

namespace affunet {

// Loss-term weights. Defaults follow the training configuration this
// artifact targets: l1d=1, l1p=3, perc=1, sym=0.3, std=1, tv=0.3, adv=0.01.
struct LossWeights {
  double l1d = 1.0;
  double l1p = 3.0;
  double perc = 1.0;
  double sym = 0.3;
  double stddev = 1.0;
  double tv = 0.3;
  double adv = 0.01;
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"l1d", w.l1d}, {"l1p", w.l1p},       {"perc", w.perc}, {"sym", w.sym},
       {"std", w.stddev}, {"tv", w.tv}, {"adv", w.adv}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  w.l1d = j.value("l1d", w.l1d);
  w.l1p = j.value("l1p", w.l1p);
  w.perc = j.value("perc", w.perc);
  w.sym = j.value("sym", w.sym);
  w.stddev = j.value("std", w.stddev);
  w.tv = j.value("tv", w.tv);
  w.adv = j.value("adv", w.adv);
}

// Mean absolute difference. All scalar losses in this suite reduce by the
// mean so the weights stay resolution independent.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("l1_loss", a, b);
  return mean_all(abs_op(sub(a, b)));
}

// L1 restricted to mask==1 texels; mask is [B,1,H,W] and not differentiated.
template <typename T>
Tensor<T> masked_l1(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& mask) {
  check_same_shape("masked_l1", a, b);
  const int64_t C = a.dim(1);
  T msum = T(0);
  for (int64_t i = 0; i < mask.numel(); ++i) msum += mask.at(i);
  if (msum <= T(0)) throw std::invalid_argument("masked_l1: empty mask");
  auto diff = abs_op(sub(a, b));
  auto masked = mul(diff, repeat_channel(mask, C));
  return mul_const(sum_all(masked), T(1) / (msum * static_cast<T>(C)));
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& image, const Tensor<T>& rendered,
                              const Tensor<T>& pos_map, const Tensor<T>& pos_map_gt,
                              const LossWeights& w) {
  check_same_shape("reconstruction_loss(image)", image, rendered);
  check_same_shape("reconstruction_loss(position)", pos_map, pos_map_gt);
  auto img_term = mul_const(l1_loss(image, rendered), static_cast<T>(w.l1d));
  auto pos_term = mul_const(l1_loss(pos_map, pos_map_gt), static_cast<T>(w.l1p));
  return add(img_term, pos_term);
}

// ---------------------------------------------------------------------------
// Perceptual loss over a frozen randomly initialized conv stack: 13 conv
// layers with pooling after layers 2, 4, 8 and 12, feature taps after conv
// layers 1, 3, 5, 9 and 13 (1-indexed). The stack stands in for a pretrained
// classifier; only the tap pattern matters to the loss contract.
// ---------------------------------------------------------------------------
template <typename T>
class FeatureExtractor {
 public:
  static FeatureExtractor make(uint64_t seed, int64_t base_width = 8) {
    FeatureExtractor fx;
    Rng rng(seed_for(seed, "feature-extractor"));
    const std::vector<int64_t> widths = {1, 1, 2, 2, 4, 4, 4, 4, 8, 8, 8, 8, 8};
    int64_t in_ch = 3;
    for (size_t li = 0; li < widths.size(); ++li) {
      const int64_t out_ch = widths[li] * base_width;
      const double std = std::sqrt(2.0 / static_cast<double>(in_ch * 9));
      fx.weights_.push_back(Tensor<T>::randn(Shape{out_ch, in_ch, 3, 3}, rng, std));
      fx.biases_.push_back(Tensor<T>::zeros(Shape{out_ch}));
      in_ch = out_ch;
    }
    return fx;
  }

  // tap feature maps for conv layers {1,3,5,9,13}
  std::vector<Tensor<T>> extract(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != 3)
      throw std::invalid_argument("FeatureExtractor: expects [B,3,H,W], got " +
                                  shape_str(image.shape()));
    if (image.dim(2) < min_resolution() || image.dim(3) < min_resolution())
      throw std::invalid_argument("FeatureExtractor: resolution " + shape_str(image.shape()) +
                                  " below the deepest tap's requirement (" +
                                  std::to_string(min_resolution()) + ")");
    static const std::vector<size_t> kTaps = {0, 2, 4, 8, 12};
    static const std::vector<size_t> kPoolAfter = {1, 3, 7, 11};
    std::vector<Tensor<T>> taps;
    Tensor<T> x = image;
    for (size_t li = 0; li < weights_.size(); ++li) {
      x = leaky_relu(conv2d(x, weights_[li], biases_[li], 1, 1), T(0));
      if (std::find(kTaps.begin(), kTaps.end(), li) != kTaps.end()) taps.push_back(x);
      if (std::find(kPoolAfter.begin(), kPoolAfter.end(), li) != kPoolAfter.end())
        x = avgpool2x2(x);
    }
    return taps;
  }

  static int64_t min_resolution() { return 16; }

 private:
  std::vector<Tensor<T>> weights_;  // frozen: requires_grad stays false
  std::vector<Tensor<T>> biases_;
};

// sum over taps of ||F_i(a) - F_i(b)||_1 / M_i, where M_i counts one
// sample's feature elements; the batch axis is averaged.
template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& a, const Tensor<T>& b, const FeatureExtractor<T>& fx,
                          double lambda_perc) {
  check_same_shape("perceptual_loss", a, b);
  const auto fa = fx.extract(a);
  const auto fb = fx.extract(b);
  Tensor<T> total = Tensor<T>::zeros({1});
  for (size_t i = 0; i < fa.size(); ++i) {
    const int64_t m_i = fa[i].numel() / fa[i].dim(0);
    const int64_t batch = fa[i].dim(0);
    auto term = mul_const(sum_all(abs_op(sub(fa[i], fb[i]))),
                          T(1) / static_cast<T>(m_i * batch));
    total = add(total, term);
  }
  return mul_const(total, static_cast<T>(lambda_perc));
}

// L1 between the blurred map and its blurred horizontal flip. Meaningful on
// UV-space maps, where left/right correspond across the flip.
template <typename T>
Tensor<T> symmetry_loss(const Tensor<T>& diffuse, double lambda_sym, const GaussianParams& gp) {
  auto blurred = gaussian_blur(diffuse, gp);
  auto flipped = gaussian_blur(horizontal_flip(diffuse), gp);
  return mul_const(l1_loss(blurred, flipped), static_cast<T>(lambda_sym));
}

// Population standard deviation of the blurred image over the skin mask,
// computed per channel around the channel's masked mean, pooled under one
// square root per sample and averaged over the batch.
template <typename T>
Tensor<T> std_loss(const Tensor<T>& image, const Tensor<T>& skin_mask, double lambda_std,
                   const GaussianParams& gp) {
  if (image.rank() != 4 || skin_mask.rank() != 4 || skin_mask.dim(1) != 1 ||
      image.dim(0) != skin_mask.dim(0) || image.dim(2) != skin_mask.dim(2) ||
      image.dim(3) != skin_mask.dim(3))
    throw std::invalid_argument("std_loss: image " + shape_str(image.shape()) +
                                " and mask " + shape_str(skin_mask.shape()) + " do not align");
  const int64_t B = image.dim(0), C = image.dim(1);
  auto blurred = gaussian_blur(image, gp);
  Tensor<T> total = Tensor<T>::zeros({1});
  for (int64_t n = 0; n < B; ++n) {
    auto mask_n = slice_batch(skin_mask, n);
    T cnt = T(0);
    for (int64_t i = 0; i < mask_n.numel(); ++i) cnt += mask_n.at(i);
    if (cnt <= T(0))
      throw std::invalid_argument("std_loss: empty skin mask for sample " + std::to_string(n));
    auto img_n = slice_batch(blurred, n);
    Tensor<T> sq_sum = Tensor<T>::zeros({1});
    for (int64_t c = 0; c < C; ++c) {
      auto chan = slice_channel(img_n, c);
      auto chan_mean = mul_const(sum_all(mul(chan, mask_n)), T(1) / cnt);
      auto dev = sub_scalar(chan, chan_mean);
      sq_sum = add(sq_sum, sum_all(mul(square(dev), mask_n)));
    }
    total = add(total, sqrt_op(mul_const(sq_sum, T(1) / (cnt * static_cast<T>(C)))));
  }
  return mul_const(total, static_cast<T>(lambda_std / static_cast<double>(B)));
}

// Total variation with forward differences, mean-reduced per direction.
template <typename T>
Tensor<T> tv_loss(const Tensor<T>& light_map, double lambda_tv) {
  auto gx = mean_all(abs_op(dx_forward(light_map)));
  auto gy = mean_all(abs_op(dy_forward(light_map)));
  return mul_const(add(gx, gy), static_cast<T>(lambda_tv));
}

// ---------------------------------------------------------------------------
// Adversarial losses over a 3-scale discriminator pyramid. The discriminator
// loss is the min-max objective (halved so the fixed point D=1/2 sits at
// log 2 per scale); the generator uses the non-saturating form. Probabilities
// are clamped at eps inside the logs.
//
// disc_forward(k, image, frozen) must return the scale-k logit map; when
// frozen is true the discriminator's own parameters must be kept off the
// tape (the generator step only differentiates through the image).
// ---------------------------------------------------------------------------
template <typename T>
struct AdversarialLossParts {
  Tensor<T> generator;
  Tensor<T> discriminator;
};

inline constexpr double kGanProbEps = 1e-7;

template <typename T, typename DiscForward>
AdversarialLossParts<T> adversarial_losses(const Tensor<T>& real, const Tensor<T>& fake,
                                           DiscForward&& disc_forward, double lambda_adv) {
  check_same_shape("adversarial_losses", real, fake);
  const T eps = static_cast<T>(kGanProbEps);
  Tensor<T> gen_total = Tensor<T>::zeros({1});
  Tensor<T> disc_total = Tensor<T>::zeros({1});
  Tensor<T> real_k = real;
  Tensor<T> fake_k = fake;
  Tensor<T> fake_detached_k = fake.detach();
  for (int k = 0; k < 3; ++k) {
    if (k > 0) {
      real_k = avgpool2x2(real_k);
      fake_k = avgpool2x2(fake_k);
      fake_detached_k = avgpool2x2(fake_detached_k);
    }
    // discriminator side: maximize log D(x) + log(1 - D(G(z)))
    auto p_real = clamp(sigmoid(disc_forward(k, real_k, /*frozen=*/false)), eps, T(1) - eps);
    auto p_fake = clamp(sigmoid(disc_forward(k, fake_detached_k, /*frozen=*/false)), eps,
                        T(1) - eps);
    auto disc_k = mul_const(
        add(mean_all(log_op(p_real)), mean_all(log_op(rsub_const(p_fake, T(1))))), T(-0.5));
    disc_total = add(disc_total, disc_k);
    // generator side, non-saturating: minimize -log D(G(z))
    auto p_fake_gen = clamp(sigmoid(disc_forward(k, fake_k, /*frozen=*/true)), eps, T(1) - eps);
    auto gen_k = mul_const(mean_all(log_op(p_fake_gen)), T(-1));
    gen_total = add(gen_total, gen_k);
  }
  AdversarialLossParts<T> parts;
  parts.generator = mul_const(gen_total, static_cast<T>(lambda_adv));
  parts.discriminator = mul_const(disc_total, static_cast<T>(lambda_adv));
  return parts;
}

// Optional stylized supervision on the diffuse map: L1 plus the perceptual
// term when a ground-truth map exists, zero otherwise.
template <typename T>
Tensor<T> auxiliary_diffuse_loss(const Tensor<T>& diffuse, const Tensor<T>& diffuse_gt,
                                 const FeatureExtractor<T>& fx, double lambda_perc) {
  if (!diffuse_gt.defined()) return Tensor<T>::zeros({1});
  return add(l1_loss(diffuse, diffuse_gt), perceptual_loss(diffuse, diffuse_gt, fx, lambda_perc));
}

}  // namespace affunet
