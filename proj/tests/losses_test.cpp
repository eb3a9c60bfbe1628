#include <gtest/gtest.h>

#include "affunet/gradcheck.hpp"
#include "affunet/losses.hpp"

using namespace affunet;

namespace {

template <typename T>
Tensor<T> rand_tensor(Shape shape, Rng& rng, double scale = 1.0, double offset = 0.0) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.at(i) = static_cast<T>(rng.normal() * scale + offset);
  return t;
}

// Independent Gaussian blur oracle: direct 2D window sum with mirrored
// indexing, no separable passes.
template <typename T>
Tensor<T> blur_oracle(const Tensor<T>& img, const GaussianParams& gp) {
  const int64_t B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
  const int64_t h = gp.ksize / 2;
  std::vector<double> k1(static_cast<size_t>(gp.ksize));
  double ksum = 0.0;
  for (int64_t j = -h; j <= h; ++j) {
    k1[static_cast<size_t>(j + h)] = std::exp(-0.5 * j * j / (gp.sigma * gp.sigma));
    ksum += k1[static_cast<size_t>(j + h)];
  }
  for (auto& v : k1) v /= ksum;
  auto mirror = [](int64_t i, int64_t n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -1 - i;
      if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
  };
  Tensor<T> out(img.shape());
  for (int64_t p = 0; p < B * C; ++p)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int64_t jy = -h; jy <= h; ++jy)
          for (int64_t jx = -h; jx <= h; ++jx)
            acc += k1[static_cast<size_t>(jy + h)] * k1[static_cast<size_t>(jx + h)] *
                   static_cast<double>(
                       img.at((p * H + mirror(y + jy, H)) * W + mirror(x + jx, W)));
        out.at((p * H + y) * W + x) = static_cast<T>(acc);
      }
  return out;
}

}  // namespace

TEST(Losses, L1Examples) {
  auto a = Tensor<double>::zeros({1, 3, 4, 4});
  auto b = Tensor<double>::full({1, 3, 4, 4}, 0.5);
  EXPECT_DOUBLE_EQ(l1_loss(a, a).item(), 0.0);
  EXPECT_DOUBLE_EQ(l1_loss(a, b).item(), 0.5);
  // scalar-loop oracle on a random pair
  Rng rng(17);
  auto x = rand_tensor<double>({2, 3, 5, 5}, rng);
  auto y = rand_tensor<double>({2, 3, 5, 5}, rng);
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += std::abs(x.at(i) - y.at(i));
  acc /= static_cast<double>(x.numel());
  EXPECT_NEAR(l1_loss(x, y).item(), acc, 1e-7);
  EXPECT_THROW(l1_loss(x, Tensor<double>::zeros({2, 3, 5, 4})), std::invalid_argument);
}

TEST(Losses, ReconstructionWeighting) {
  // component L1 values 0.1 and 0.2 with default weights -> 1*0.1 + 3*0.2
  auto img = Tensor<double>::zeros({1, 3, 4, 4});
  auto rendered = Tensor<double>::full({1, 3, 4, 4}, 0.1);
  auto pos = Tensor<double>::zeros({1, 3, 4, 4});
  auto pos_gt = Tensor<double>::full({1, 3, 4, 4}, 0.2);
  LossWeights w;
  const double loss = reconstruction_loss(img, rendered, pos, pos_gt, w).item();
  EXPECT_DOUBLE_EQ(loss, 1.0 * 0.1 + 3.0 * 0.2);
  EXPECT_DOUBLE_EQ(reconstruction_loss(img, img, pos, pos, w).item(), 0.0);
  LossWeights w0 = w;
  w0.l1p = 0.0;
  EXPECT_DOUBLE_EQ(reconstruction_loss(img, rendered, pos, pos_gt, w0).item(), 0.1);
}

TEST(Losses, PerceptualZeroAndSymmetry) {
  auto fx = FeatureExtractor<double>::make(7);
  Rng rng(23);
  auto a = rand_tensor<double>({1, 3, 16, 16}, rng, 0.2, 0.5);
  auto b = rand_tensor<double>({1, 3, 16, 16}, rng, 0.2, 0.5);
  EXPECT_DOUBLE_EQ(perceptual_loss(a, a, fx, 1.0).item(), 0.0);
  EXPECT_NEAR(perceptual_loss(a, b, fx, 1.0).item(), perceptual_loss(b, a, fx, 1.0).item(),
              1e-12);
  // resolution below the deepest tap is rejected
  auto tiny = Tensor<double>::zeros({1, 3, 8, 8});
  EXPECT_THROW(perceptual_loss(tiny, tiny, fx, 1.0), std::invalid_argument);
}

TEST(Losses, PerceptualMatchesTapOracle) {
  auto fx = FeatureExtractor<double>::make(7);
  Rng rng(29);
  auto a = rand_tensor<double>({1, 3, 16, 16}, rng, 0.2, 0.5);
  auto b = rand_tensor<double>({1, 3, 16, 16}, rng, 0.2, 0.5);
  const auto fa = fx.extract(a);
  const auto fb = fx.extract(b);
  ASSERT_EQ(fa.size(), 5u);
  double expected = 0.0;
  for (size_t i = 0; i < fa.size(); ++i) {
    double tap_sum = 0.0;
    for (int64_t e = 0; e < fa[i].numel(); ++e) tap_sum += std::abs(fa[i].at(e) - fb[i].at(e));
    expected += tap_sum / static_cast<double>(fa[i].numel());  // batch of 1
  }
  EXPECT_NEAR(perceptual_loss(a, b, fx, 1.0).item(), expected, 1e-9);
  // tap spatial sizes follow the pool schedule: R, R/2, R/4, R/8, R/16
  EXPECT_EQ(fa[0].dim(2), 16);
  EXPECT_EQ(fa[1].dim(2), 8);
  EXPECT_EQ(fa[2].dim(2), 4);
  EXPECT_EQ(fa[3].dim(2), 2);
  EXPECT_EQ(fa[4].dim(2), 1);
}

TEST(Losses, SymmetryZeroOnMirrorSymmetricMap) {
  Rng rng(31);
  const int64_t W = 12;
  Tensor<double> sym({1, 3, 10, W});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < 10; ++y)
      for (int64_t x = 0; x < W / 2; ++x) {
        const double v = rng.uniform();
        sym.at(sym.off4(0, c, y, x)) = v;
        sym.at(sym.off4(0, c, y, W - 1 - x)) = v;
      }
  GaussianParams gp{5, 1.0};
  EXPECT_NEAR(symmetry_loss(sym, 0.3, gp).item(), 0.0, 1e-12);
}

TEST(Losses, SymmetryFlipInvariance) {
  Rng rng(37);
  auto m = rand_tensor<double>({1, 3, 8, 8}, rng, 0.3, 0.5);
  GaussianParams gp{5, 1.3};
  const double a = symmetry_loss(m, 0.3, gp).item();
  const double b = symmetry_loss(horizontal_flip(m), 0.3, gp).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(Losses, SymmetryHalfPlaneOracle) {
  // left half 0, right half 1
  const int64_t H = 16, W = 16;
  Tensor<double> img({1, 1, H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) img.at(y * W + x) = x < W / 2 ? 0.0 : 1.0;
  GaussianParams gp{3, 0.5};
  const double lambda = 0.3;
  const double loss = symmetry_loss(img, lambda, gp).item();
  // blurred-flip oracle
  auto blurred = blur_oracle(img, gp);
  double acc = 0.0;
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      acc += std::abs(blurred.at(y * W + x) - blurred.at(y * W + (W - 1 - x)));
  acc /= static_cast<double>(H * W);
  EXPECT_NEAR(loss, lambda * acc, 1e-9);
  // away from the seam the per-texel difference is 1
  EXPECT_NEAR(std::abs(blurred.at(0) - blurred.at(W - 1)), 1.0, 1e-9);
}

TEST(Losses, StdLossExamples) {
  GaussianParams delta{1, 1.0};  // k=1 kernel: blur is the identity
  // constant image, any mask -> 0
  auto constant = Tensor<double>::full({1, 3, 4, 4}, 0.7);
  auto mask = Tensor<double>::ones({1, 1, 4, 4});
  EXPECT_DOUBLE_EQ(std_loss(constant, mask, 1.0, delta).item(), 0.0);
  // two-pixel mask with values {0,1} -> lambda * 0.5
  Tensor<double> img({1, 1, 2, 2});
  img.at(0) = 0.0;
  img.at(1) = 1.0;
  img.at(2) = 0.3;
  img.at(3) = 0.9;
  Tensor<double> mask2({1, 1, 2, 2});
  mask2.at(0) = 1.0;
  mask2.at(1) = 1.0;
  EXPECT_NEAR(std_loss(img, mask2, 1.0, delta).item(), 0.5, 1e-12);
  EXPECT_NEAR(std_loss(img, mask2, 2.0, delta).item(), 1.0, 1e-12);
  // mask restricted to a constant region of a non-constant image -> 0
  Tensor<double> img2({1, 1, 2, 2});
  img2.at(0) = 0.4;
  img2.at(1) = 0.4;
  img2.at(2) = 0.1;
  img2.at(3) = 0.8;
  EXPECT_NEAR(std_loss(img2, mask2, 1.0, delta).item(), 0.0, 1e-12);
  // empty mask is an error
  auto empty = Tensor<double>::zeros({1, 1, 2, 2});
  EXPECT_THROW(std_loss(img, empty, 1.0, delta), std::invalid_argument);
}

TEST(Losses, TvExamples) {
  EXPECT_DOUBLE_EQ(tv_loss(Tensor<double>::full({1, 1, 6, 6}, 0.4), 0.3).item(), 0.0);
  // horizontal ramp with step s: every horizontal pair contributes s
  const int64_t H = 5, W = 8;
  const double s = 0.05;
  Tensor<double> ramp({1, 1, H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) ramp.at(y * W + x) = s * static_cast<double>(x);
  // double-loop oracle with the same mean-per-direction reduction
  double gx = 0.0, gy = 0.0;
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x + 1 < W; ++x)
      gx += std::abs(ramp.at(y * W + x + 1) - ramp.at(y * W + x));
  for (int64_t y = 0; y + 1 < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      gy += std::abs(ramp.at((y + 1) * W + x) - ramp.at(y * W + x));
  const double expected = 0.3 * (gx / (H * (W - 1)) + gy / ((H - 1) * W));
  EXPECT_NEAR(tv_loss(ramp, 0.3).item(), expected, 1e-12);
  EXPECT_NEAR(tv_loss(ramp, 0.3).item(), 0.3 * s, 1e-12);
  // flip symmetry
  Rng rng(41);
  auto m = rand_tensor<double>({1, 1, 6, 6}, rng);
  EXPECT_NEAR(tv_loss(m, 1.0).item(), tv_loss(horizontal_flip(m), 1.0).item(), 1e-12);
}

// A linear "discriminator" with one weight tensor per scale keeps the
// adversarial contract testable without the network module.
namespace {
struct ToyDisc {
  std::vector<Tensor<double>> weights;
  explicit ToyDisc(int scales, double init) {
    for (int k = 0; k < scales; ++k) {
      weights.push_back(Tensor<double>::full({1}, init));
      weights.back().set_requires_grad(true);
    }
  }
  Tensor<double> operator()(int k, const Tensor<double>& img, bool frozen) {
    auto& w = weights[static_cast<size_t>(k)];
    const bool saved = w.requires_grad();
    if (frozen) w.set_requires_grad(false);
    auto logits = mul_scalar(img, w);
    if (frozen) w.set_requires_grad(saved);
    return logits;
  }
};
}  // namespace

TEST(Losses, AdversarialFixedPointBaseline) {
  // zero logits everywhere -> D outputs 0.5 -> disc loss = lambda * 3 * log 2
  auto real = Tensor<double>::full({1, 3, 8, 8}, 0.4);
  auto fake = Tensor<double>::full({1, 3, 8, 8}, 0.6);
  ToyDisc disc(3, 0.0);
  auto parts = adversarial_losses<double>(real, fake, disc, 0.01);
  EXPECT_NEAR(parts.discriminator.item(), 0.01 * 3.0 * std::log(2.0), 1e-9);
  auto parts1 = adversarial_losses<double>(real, fake, disc, 1.0);
  EXPECT_NEAR(parts1.discriminator.item(), 3.0 * std::log(2.0), 1e-9);
}

TEST(Losses, AdversarialPerfectDiscriminatorFiniteGenLoss) {
  // disjoint supports and a confident discriminator: gen loss is large but
  // finite thanks to the probability clamp
  auto real = Tensor<double>::full({1, 3, 8, 8}, 1.0);
  auto fake = Tensor<double>::full({1, 3, 8, 8}, -1.0);
  ToyDisc disc(3, 50.0);  // logits +-50: saturated
  auto parts = adversarial_losses<double>(real, fake, disc, 1.0);
  EXPECT_TRUE(std::isfinite(parts.generator.item()));
  EXPECT_GT(parts.generator.item(), 3.0);  // ~3 * -log(eps) when clamped
  EXPECT_LE(parts.generator.item(), 3.0 * -std::log(kGanProbEps) + 1.0);
}

TEST(Losses, AdversarialParameterPartition) {
  Rng rng(47);
  auto real = rand_tensor<double>({1, 3, 8, 8}, rng, 0.1, 0.5);
  Tensor<double> fake_src = rand_tensor<double>({1, 3, 8, 8}, rng, 0.1, 0.5);
  fake_src.set_requires_grad(true);
  ToyDisc disc(3, 0.3);
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto fake = mul_const(fake_src, 1.0);
    auto parts = adversarial_losses<double>(real, fake, disc, 1.0);
    tape.backward(parts.generator);
    // generator loss reaches the fake source but not the discriminator
    double fake_grad = 0.0;
    for (int64_t i = 0; i < fake_src.numel(); ++i) fake_grad += std::abs(fake_src.grad()[i]);
    EXPECT_GT(fake_grad, 0.0);
    for (auto& w : disc.weights) EXPECT_DOUBLE_EQ(w.grad()[0], 0.0);
  }
  fake_src.zero_grad();
  for (auto& w : disc.weights) w.zero_grad();
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto fake = mul_const(fake_src, 1.0);
    auto parts = adversarial_losses<double>(real, fake, disc, 1.0);
    tape.backward(parts.discriminator);
    // discriminator loss trains D only; the fake path is detached
    for (int64_t i = 0; i < fake_src.numel(); ++i) EXPECT_DOUBLE_EQ(fake_src.grad()[i], 0.0);
    double disc_grad = 0.0;
    for (auto& w : disc.weights) disc_grad += std::abs(w.grad()[0]);
    EXPECT_GT(disc_grad, 0.0);
  }
}

TEST(Losses, AdversarialFixedPointZeroGradientAtHalf) {
  // Identical real/fake batches through a discriminator at its D=0.5 fixed
  // point: the min-max objective sits at its saddle and the gradient
  // reaching the shared batch is exactly zero (the two halves contribute
  // (p-1) and p, i.e. 2p-1 = 0).
  Rng rng(59);
  Tensor<double> shared = rand_tensor<double>({1, 3, 8, 8}, rng, 0.1, 0.5);
  shared.set_requires_grad(true);
  ToyDisc disc(3, 0.0);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto img = mul_const(shared, 1.0);
  const double eps = kGanProbEps;
  Tensor<double> total = Tensor<double>::zeros({1});
  Tensor<double> img_k = img;
  for (int k = 0; k < 3; ++k) {
    if (k > 0) img_k = avgpool2x2(img_k);
    auto p = clamp(sigmoid(disc(k, img_k, true)), eps, 1.0 - eps);
    auto term = add(mean_all(log_op(p)), mean_all(log_op(rsub_const(p, 1.0))));
    total = add(total, mul_const(term, -0.5));
  }
  tape.backward(total);
  for (int64_t i = 0; i < shared.numel(); ++i) EXPECT_DOUBLE_EQ(shared.grad()[i], 0.0);
}

TEST(Losses, AuxiliaryDiffuse) {
  auto fx = FeatureExtractor<double>::make(7);
  Rng rng(61);
  auto d = rand_tensor<double>({1, 3, 16, 16}, rng, 0.1, 0.5);
  auto dgt = rand_tensor<double>({1, 3, 16, 16}, rng, 0.1, 0.5);
  EXPECT_DOUBLE_EQ(auxiliary_diffuse_loss(d, Tensor<double>(), fx, 1.0).item(), 0.0);
  EXPECT_DOUBLE_EQ(auxiliary_diffuse_loss(d, d, fx, 1.0).item(), 0.0);
  const double composed = l1_loss(d, dgt).item() + perceptual_loss(d, dgt, fx, 1.0).item();
  EXPECT_NEAR(auxiliary_diffuse_loss(d, dgt, fx, 1.0).item(), composed, 1e-12);
}

TEST(Losses, GradientChecks) {
  auto fx = FeatureExtractor<double>::make(7);
  GaussianParams gp{5, 1.1};
  Rng rng(67);
  auto other = rand_tensor<double>({1, 3, 16, 16}, rng, 0.1, 0.5);
  auto mask = Tensor<double>::ones({1, 1, 16, 16});
  struct Case {
    std::string name;
    std::function<Tensor<double>(const Tensor<double>&)> fn;
  };
  const std::vector<Case> cases = {
      {"l1", [&](const Tensor<double>& x) { return l1_loss(x, other); }},
      {"perceptual", [&](const Tensor<double>& x) { return perceptual_loss(x, other, fx, 1.0); }},
      {"symmetry", [&](const Tensor<double>& x) { return symmetry_loss(x, 0.3, gp); }},
      {"std", [&](const Tensor<double>& x) { return std_loss(x, mask, 1.0, gp); }},
      {"tv", [&](const Tensor<double>& x) { return tv_loss(x, 0.3); }},
  };
  for (const auto& c : cases) {
    Tensor<double> x = rand_tensor<double>({1, 3, 16, 16}, rng, 0.1, 0.5);
    x.set_requires_grad(true);
    auto res = check_gradient(c.name, [&] { return c.fn(x); }, x);
    EXPECT_LT(res.max_rel_err, 1e-4) << "loss " << c.name;
  }
}

TEST(Losses, LambdaScalingIsExact) {
  // doubling a weight doubles the term's gradient bit-exactly (c = 2)
  GaussianParams gp{5, 1.1};
  Rng rng(71);
  auto x = rand_tensor<double>({1, 3, 8, 8}, rng, 0.1, 0.5);
  x.set_requires_grad(true);
  auto grads_for = [&](double lambda) {
    x.zero_grad();
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto loss = symmetry_loss(x, lambda, gp);
    tape.backward(loss);
    return std::vector<double>(x.grad(), x.grad() + x.numel());
  };
  auto g1 = grads_for(0.3);
  auto g2 = grads_for(0.6);
  for (size_t i = 0; i < g1.size(); ++i) EXPECT_DOUBLE_EQ(g2[i], 2.0 * g1[i]);
}

TEST(Losses, WeightsJsonRoundTrip) {
  LossWeights w;
  w.adv = 0.25;
  w.sym = 0.125;
  nlohmann::json j = w;
  LossWeights r = j.get<LossWeights>();
  EXPECT_DOUBLE_EQ(r.adv, 0.25);
  EXPECT_DOUBLE_EQ(r.sym, 0.125);
  EXPECT_DOUBLE_EQ(r.l1p, 3.0);
}
