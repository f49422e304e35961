#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sma/data.hpp"
#include "sma/metrics.hpp"
#include "sma/model.hpp"
#include "sma/tensor.hpp"

namespace sma {

// Central-difference gradient check, 64-bit only. f must build a fresh graph
// from x on every call and return a scalar. Returns the max over components of
//   |analytic - central| / max(|analytic|, |central|, 1e-8).
inline double grad_check(const std::function<Tensor64(Tensor64&)>& f, Tensor64 x,
                         double h = 1e-5) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor64 loss = f(x);
  if (loss.size() != 1) throw value_error("grad_check: f must be scalar-valued");
  backward(loss);
  std::vector<double> analytic = x.has_grad() ? x.grad() : std::vector<double>(x.size(), 0.0);

  double max_err = 0.0;
  Tensor64 probe = Tensor64::from(x.shape(), x.data());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    double fp = f(probe).item();
    probe.data()[i] = orig - h;
    double fm = f(probe).item();
    probe.data()[i] = orig;
    double central = (fp - fm) / (2.0 * h);
    double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
    max_err = std::max(max_err, std::abs(analytic[i] - central) / denom);
  }
  return max_err;
}

namespace detail {

inline Tensor64 gc_uniform(Shape s, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  std::vector<double> d(numel(s));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor64::from(std::move(s), std::move(d));
}

// reduce a non-scalar output to a scalar through a fixed positive probe so
// every output element contributes to the checked gradient
inline Tensor64 gc_probe(Tensor64 y, std::uint64_t seed) {
  return sum(mul(y, gc_uniform(y.shape(), 9000 + seed, 0.5, 1.5)));
}

}  // namespace detail

// One finite-difference probe per differentiable op. Returns (name, max rel
// error) pairs; every op in the library appears exactly once.
inline std::vector<std::pair<std::string, double>> op_gradcheck_suite() {
  using detail::gc_probe;
  using detail::gc_uniform;
  auto gc = [](auto fn, Tensor64 x) { return grad_check(fn, std::move(x)); };
  auto randn = [](Shape s, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor64::randn(std::move(s), rng);
  };

  std::vector<std::pair<std::string, double>> out;
  auto add_case = [&](const char* name, double err) { out.emplace_back(name, err); };

  add_case("add", gc([&](Tensor64& x) { return gc_probe(add(x, randn(x.shape(), 11)), 1); }, randn({3, 4}, 1)));
  add_case("sub", gc([&](Tensor64& x) { return gc_probe(sub(x, randn(x.shape(), 12)), 2); }, randn({3, 4}, 2)));
  add_case("mul", gc([&](Tensor64& x) { return gc_probe(mul(x, gc_uniform(x.shape(), 13, 0.5, 1.5)), 3); }, randn({3, 4}, 3)));
  add_case("scale", gc([&](Tensor64& x) { return gc_probe(scale(x, 1.7), 4); }, randn({2, 5}, 4)));
  add_case("sum", gc([&](Tensor64& x) { return sum(x); }, randn({7}, 5)));
  add_case("mean", gc([&](Tensor64& x) { return mean(x); }, randn({6}, 6)));
  add_case("relu", gc([&](Tensor64& x) { return gc_probe(relu(x), 7); }, gc_uniform({8}, 7, 0.2, 1.2)));
  add_case("gelu", gc([&](Tensor64& x) { return gc_probe(gelu(x), 8); }, randn({8}, 8)));
  add_case("sigmoid", gc([&](Tensor64& x) { return gc_probe(sigmoid(x), 9); }, randn({8}, 9)));
  add_case("softmax", gc([&](Tensor64& x) { return gc_probe(softmax(x, 1), 10); }, randn({3, 5}, 10)));
  add_case("matmul", gc([&](Tensor64& x) { return gc_probe(matmul(x, gc_uniform({4, 3}, 14, 0.5, 1.5)), 11); }, randn({2, 4}, 11)));
  add_case("linear", gc([&](Tensor64& x) { return gc_probe(linear(x, gc_uniform({4, 3}, 15, 0.5, 1.5), gc_uniform({3}, 16, -0.2, 0.2)), 12); }, randn({5, 4}, 12)));
  add_case("conv2d", gc([&](Tensor64& x) { return gc_probe(conv2d(x, gc_uniform({3, 2, 3, 3}, 17, 0.1, 0.4), gc_uniform({3}, 18, -0.2, 0.2), 1, 1), 13); }, randn({2, 5, 5}, 13)));
  add_case("conv2d_stride2", gc([&](Tensor64& x) { return gc_probe(conv2d(x, gc_uniform({3, 2, 3, 3}, 19, 0.1, 0.4), gc_uniform({3}, 20, -0.2, 0.2), 2, 1), 14); }, randn({2, 6, 6}, 14)));
  add_case("conv_transpose2d", gc([&](Tensor64& x) { return gc_probe(conv_transpose2d(x, gc_uniform({2, 3, 2, 2}, 21, 0.1, 0.5)), 15); }, randn({2, 3, 3}, 15)));
  add_case("depthwise_conv2d", gc([&](Tensor64& x) { return gc_probe(depthwise_conv2d(x, gc_uniform({3, 1, 3, 3}, 22, 0.1, 0.4), gc_uniform({3}, 23, -0.2, 0.2)), 16); }, randn({3, 5, 5}, 16)));
  add_case("layer_norm", gc([&](Tensor64& x) { return gc_probe(layer_norm(x, gc_uniform({4}, 24, 0.8, 1.2), gc_uniform({4}, 25, -0.2, 0.2)), 17); }, randn({5, 4}, 17)));
  add_case("channel_avg", gc([&](Tensor64& x) { return gc_probe(channel_avg(x), 18); }, randn({3, 4, 4}, 18)));
  add_case("spatial_mean", gc([&](Tensor64& x) { return gc_probe(spatial_mean(x), 19); }, randn({3, 4, 4}, 19)));
  add_case("spatial_max", gc([&](Tensor64& x) { return gc_probe(spatial_max(x), 20); }, gc_uniform({3, 4, 4}, 20, 0.1, 2.0)));
  add_case("mul_channel_gate", gc([&](Tensor64& x) { return gc_probe(mul_channel_gate(x, gc_uniform({3}, 26, 0.3, 0.9)), 21); }, randn({3, 4, 4}, 21)));
  add_case("mul_spatial_gate", gc([&](Tensor64& x) { return gc_probe(mul_spatial_gate(x, gc_uniform({1, 4, 4}, 27, 0.3, 0.9)), 22); }, randn({3, 4, 4}, 22)));
  add_case("reshape", gc([&](Tensor64& x) { return gc_probe(reshape(x, {6, 2}), 23); }, randn({3, 4}, 23)));
  add_case("concat_channels", gc([&](Tensor64& x) { return gc_probe(concat_channels(x, randn({2, 3, 3}, 28)), 24); }, randn({2, 3, 3}, 24)));
  add_case("patchify", gc([&](Tensor64& x) { return gc_probe(patchify(x, 2), 25); }, randn({3, 4, 4}, 25)));
  add_case("unpatchify", gc([&](Tensor64& x) { return gc_probe(unpatchify(patchify(x, 2), 3, 4, 4, 2), 26); }, randn({3, 4, 4}, 26)));
  add_case("select_channel", gc([&](Tensor64& x) { return gc_probe(select_channel(x, 1), 27); }, randn({3, 4, 4}, 27)));
  add_case("scaled_dot_attention", gc([&](Tensor64& x) { return gc_probe(scaled_dot_attention(x, randn({4, 6}, 29), randn({4, 6}, 30), 2), 28); }, randn({4, 6}, 28)));
  {
    Rng rng(31);
    std::vector<double> yd(18);
    for (auto& v : yd) v = rng.uniform(0.0, 1.0) < 0.4 ? 1.0 : 0.0;
    auto y = Tensor64::from({2, 3, 3}, yd);
    add_case("bce_dice_loss", gc([&](Tensor64& p) { return bce_dice_loss(y, p); },
                                 gc_uniform({2, 3, 3}, 32, 0.1, 0.9)));
  }
  {
    auto target = one_hot_mask<double>(Tensor32::from({2, 2}, {0, 1, 2, 1}), 3);
    add_case("segmentation_loss",
             gc([&](Tensor64& logits) { return segmentation_loss(logits, target); },
                randn({3, 2, 2}, 33)));
  }
  return out;
}

// Full-model check: 64-bit model on a 3x16x16 crop of a generated sample,
// one finite-difference probe per parameter tensor. Directions where both the
// analytic and numerical values are below 1e-6 are skipped: the model has
// structurally null directions (a uniform shift of attention keys leaves the
// softmax unchanged) where both sides are pure roundoff.
inline double model_gradcheck(double h = 1e-5) {
  ModelConfig mc;
  mc.base_channels = 4;
  mc.stages = 4;
  mc.blocks_per_stage = {1, 1, 1, 1};
  mc.heads = 2;
  mc.patch_size = 2;
  mc.input_height = mc.input_width = 16;
  Model<double> model(mc, 41);
  Rng noise(42);
  model.for_each_param([&](const std::string&, Tensor64& t) {
    for (auto& v : t.data()) v += noise.uniform(-0.05, 0.05);
  });

  auto sample = generate_sample(43, 64, 64);
  std::vector<double> img(3 * 16 * 16);
  std::vector<float> msk(16 * 16);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        img[(c * 16 + y) * 16 + x] = sample.image.data()[(c * 64 + y + 24) * 64 + x + 24];
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x)
      msk[y * 16 + x] = sample.mask.data()[(y + 24) * 64 + x + 24];
  auto input = Tensor64::from({3, 16, 16}, img);
  auto target = one_hot_mask<double>(Tensor32::from({16, 16}, msk), 3);

  model.zero_grad();
  auto loss = segmentation_loss(model.forward(input), target);
  backward(loss);
  auto run_loss = [&]() { return segmentation_loss(model.forward(input), target).item(); };

  double worst = 0.0;
  Rng pick(44);
  model.for_each_param([&](const std::string&, Tensor64& t) {
    std::size_t i = pick.index(t.size());
    double keep = t.data()[i];
    t.data()[i] = keep + h;
    double fp = run_loss();
    t.data()[i] = keep - h;
    double fm = run_loss();
    t.data()[i] = keep;
    double fd = (fp - fm) / (2 * h);
    double an = t.has_grad() ? t.grad()[i] : 0.0;
    if (std::max(std::abs(an), std::abs(fd)) < 1e-6) return;
    worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8}));
  });
  return worst;
}

}  // namespace sma
