#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gpr/data.hpp"
#include "gpr/gan.hpp"
#include "test_util.hpp"

using namespace gpr;
using gpr::testing::random_normal;

namespace {

GanArchitecture small_arch(std::size_t k, std::size_t n, std::size_t width = 8) {
  GanArchitecture a;
  a.latent_dim = k;
  a.final_resolution = n;
  a.base_width = width;
  a.width_cap = width;
  return a;
}

}  // namespace

TEST(GanArchitecture, StageSchedule) {
  GanArchitecture a = small_arch(64, 32, 64);
  ASSERT_EQ(a.stages(), 4u);
  EXPECT_EQ(a.resolution(0), 4u);
  EXPECT_EQ(a.resolution(3), 32u);
  EXPECT_EQ(a.width(0), 64u);
  EXPECT_EQ(a.width(1), 32u);
  EXPECT_EQ(a.width(3), 8u);
  EXPECT_EQ(small_arch(8, 4).stages(), 1u);
}

TEST(GanArchitecture, RejectsInvalidResolution) {
  EXPECT_THROW(build_generator(small_arch(8, 24), 0), std::invalid_argument);
  EXPECT_THROW(build_generator(small_arch(8, 2), 0), std::invalid_argument);
  EXPECT_THROW(build_discriminator(small_arch(8, 12), 0), std::invalid_argument);
  EXPECT_THROW(build_generator(small_arch(0, 8), 0), std::invalid_argument);
}

TEST(Generator, FourByFourFromZeroLatent) {
  GanArchitecture a = small_arch(64, 4, 64);
  auto G = build_generator(a, 1);
  Tensor img = generate_image(G, Tensor({64}, 0.0), 0, 1.0);
  EXPECT_EQ(img.shape(), (Shape{4, 4}));
  EXPECT_TRUE(img.all_finite());
}

TEST(Generator, OutputShapesPerStage) {
  GanArchitecture a = small_arch(64, 32, 64);
  auto G = build_generator(a, 1);
  std::mt19937_64 rng(3);
  Tensor z = random_normal({2, 64}, rng);
  for (std::size_t s = 0; s < 4; ++s) {
    Tensor out = generate(G, z, s, 1.0);
    const std::size_t r = std::size_t{4} << s;
    EXPECT_EQ(out.shape(), (Shape{2, 1, r, r}));
    EXPECT_TRUE(out.all_finite());
  }
  EXPECT_THROW(generate(G, z, 4, 1.0), std::invalid_argument);
  EXPECT_THROW(generate(G, z, 1, 1.5), std::invalid_argument);
  EXPECT_THROW(generate(G, Tensor({2, 63}), 0, 1.0), ShapeError);
}

TEST(Generator, SameSeedSameWeights) {
  GanArchitecture a = small_arch(16, 16);
  EXPECT_EQ(build_generator(a, 5).params, build_generator(a, 5).params);
  EXPECT_FALSE(build_generator(a, 5).params == build_generator(a, 6).params);
  EXPECT_EQ(build_discriminator(a, 5).params, build_discriminator(a, 5).params);
}

TEST(Generator, InitialWeightsAreUnitGaussian) {
  auto G = build_generator(small_arch(32, 32, 64), 2);
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < G.params.size(); ++i) {
    const auto& name = G.params.names()[i];
    if (name.back() == 'b') {
      EXPECT_EQ(max_value(G.params.values()[i]), 0.0);
      EXPECT_EQ(min_value(G.params.values()[i]), 0.0);
      continue;
    }
    for (double v : G.params.values()[i].data()) {
      sum += v;
      sq += v * v;
      ++count;
    }
  }
  const double mean = sum / count, var = sq / count - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Generator, FadeInEndpointsAreExact) {
  GanArchitecture a = small_arch(16, 32, 16);
  auto G = build_generator(a, 11);
  std::mt19937_64 rng(4);
  Tensor z = random_normal({3, 16}, rng);
  for (std::size_t s = 1; s < 4; ++s) {
    const Tensor prev = generate(G, z, s - 1, 1.0);
    const Tensor at0 = generate(G, z, s, 0.0);
    const std::size_t r = std::size_t{4} << s;
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t y = 0; y < r; ++y) {
        for (std::size_t x = 0; x < r; ++x) {
          ASSERT_EQ(at0[(b * r + y) * r + x], prev[(b * (r / 2) + y / 2) * (r / 2) + x / 2]);
        }
      }
    }
    // alpha = 1 is the new path alone: identical to the last stage's output
    // with no blending node at all.
    Graph g;
    Var out = generator_graph(g, G, g.constant(z), s, 1.0, Weights::frozen);
    EXPECT_EQ(g.forward(out), generate(G, z, s, 1.0));
    EXPECT_NE(g.kind(out), OpKind::add);
  }
}

TEST(Generator, HalfAlphaIsMeanOfPaths) {
  GanArchitecture a = small_arch(16, 16, 16);
  auto G = build_generator(a, 12);
  std::mt19937_64 rng(5);
  Tensor z = random_normal({2, 16}, rng);
  for (std::size_t s = 1; s < 3; ++s) {
    const Tensor old_path = generate(G, z, s, 0.0);
    const Tensor new_path = generate(G, z, s, 1.0);
    const Tensor half = generate(G, z, s, 0.5);
    for (std::size_t i = 0; i < half.numel(); ++i) {
      ASSERT_NEAR(half[i], 0.5 * (old_path[i] + new_path[i]), 1e-12);
    }
  }
}

TEST(Generator, GenerateIsPure) {
  auto G = build_generator(small_arch(16, 16), 3);
  const auto before = G.params;
  std::mt19937_64 rng(6);
  Tensor z = random_normal({16}, rng);
  const Tensor a = generate_image(G, z, 2, 0.3);
  const Tensor b = generate_image(G, z, 2, 0.3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(G.params, before);
}

TEST(Generator, BlockOutputsArePixelNormalized) {
  auto G = build_generator(small_arch(8, 8, 8), 7);
  std::mt19937_64 rng(8);
  Graph g;
  Var out = generator_graph(g, G, g.constant(random_normal({2, 8}, rng)), 1, 1.0, Weights::frozen);
  g.forward(out);
  std::size_t checked = 0;
  for (std::size_t id = 0; id < g.size(); ++id) {
    if (g.kind(Var{id}) != OpKind::pixelnorm) continue;
    const Tensor& v = g.value(Var{id});
    if (v.ndim() != 4) continue;
    const std::size_t c = v.dim(1), hw = v.dim(2) * v.dim(3);
    for (std::size_t b = 0; b < v.dim(0); ++b) {
      for (std::size_t p = 0; p < hw; ++p) {
        double ms = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) ms += std::pow(v[(b * c + ch) * hw + p], 2);
        ASSERT_NEAR(ms / c, 1.0, 1e-5);  // eps in the denominator shows on low-energy pixels
      }
    }
    ++checked;
  }
  EXPECT_GE(checked, 4u);
}

TEST(Generator, GradCheckTwoStageAtEight) {
  auto G = build_generator(small_arch(8, 8, 8), 21);
  for (std::size_t i = 0; i < G.params.size(); ++i) {
    // Non-zero biases so their gradients are exercised away from a special point.
    if (G.params.names()[i].back() == 'b') {
      std::mt19937_64 rng(i);
      G.params.values()[i] = gpr::testing::random_tensor(G.params.values()[i].shape(), rng, -0.1, 0.1);
    }
  }
  std::mt19937_64 rng(22);
  Graph g;
  Var z = g.input("z", random_normal({2, 8}, rng));
  Var img = generator_graph(g, G, z, 1, 0.7);
  Var root = g.sum(g.mul(img, g.constant(random_normal({2, 1, 8, 8}, rng))));
  std::vector<std::string> names{"z"};
  for (const auto& n : G.params.names()) {
    if (g.has_input(n)) names.push_back(n);
  }
  EXPECT_EQ(names.size(), G.params.size() + 1);
  EXPECT_LT(grad_check(g, root, names), 1e-4);
}

TEST(Discriminator, ScoresPerImage) {
  GanArchitecture a = small_arch(16, 32, 16);
  auto D = build_discriminator(a, 4);
  std::mt19937_64 rng(9);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t r = std::size_t{4} << s;
    for (double alpha : {0.0, 0.4, 1.0}) {
      Graph g;
      Var out = discriminator_graph(g, D, g.constant(random_normal({3, 1, r, r}, rng)), s, alpha, Weights::frozen);
      const Tensor& scores = g.forward(out);
      EXPECT_EQ(scores.shape(), (Shape{3, 1}));
      EXPECT_TRUE(scores.all_finite());
    }
  }
}

TEST(Discriminator, MinibatchStddevAddsOneConstantChannel) {
  auto D = build_discriminator(small_arch(8, 8, 8), 4);
  std::mt19937_64 rng(10);
  Graph g;
  Var out = discriminator_graph(g, D, g.constant(random_normal({4, 1, 8, 8}, rng)), 1, 1.0, Weights::frozen);
  g.forward(out);
  bool found = false;
  for (std::size_t id = 0; id < g.size(); ++id) {
    if (g.kind(Var{id}) != OpKind::minibatch_stddev) continue;
    found = true;
    const Tensor& v = g.value(Var{id});
    EXPECT_EQ(v.dim(1), D.arch.width(0) + 1);
    const std::size_t c = v.dim(1), hw = v.dim(2) * v.dim(3);
    const double first = v[(c - 1) * hw];
    for (std::size_t b = 0; b < v.dim(0); ++b) {
      for (std::size_t p = 0; p < hw; ++p) ASSERT_EQ(v[(b * c + c - 1) * hw + p], first);
    }
  }
  EXPECT_TRUE(found);
}

TEST(GanLoss, Examples) {
  const std::vector<double> s{0.3, -1.2, 2.0};
  auto sym = gan_loss(s, s, 0.0, 10.0, 0.0);
  EXPECT_EQ(sym.discriminator, 0.0);
  const std::vector<double> fake{-3.0, -3.0};
  EXPECT_DOUBLE_EQ(gan_loss(s, fake, 0.0).generator, 3.0);
  // A penalty of zero (gradient norm exactly 1) adds nothing.
  const std::vector<double> real{1.0, 3.0};
  auto l = gan_loss(real, fake, 0.0, 10.0, 1e-3);
  EXPECT_DOUBLE_EQ(l.discriminator, -3.0 - 2.0 + 1e-3 * 5.0);
  EXPECT_DOUBLE_EQ(gan_loss(real, fake, 0.25, 10.0, 1e-3).discriminator, l.discriminator + 2.5);
  EXPECT_THROW(gan_loss({}, fake, 0.0), std::invalid_argument);
}

TEST(GradientPenalty, NonNegativeAndConsistent) {
  auto D = build_discriminator(small_arch(8, 8, 8), 13);
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_normal({3, 1, 8, 8}, rng);
    auto gp = gradient_penalty(D, x, 1, 0.5);
    EXPECT_GE(gp.value, 0.0);
    double expect = 0.0;
    for (double n : gp.norms) expect += (n - 1.0) * (n - 1.0);
    EXPECT_NEAR(gp.value, expect / 3.0, 1e-14);
    EXPECT_EQ(gp.param_grads.size(), D.params.size());
  }
}

// The weight gradient of the penalty against central differences of the
// penalty value itself.
TEST(GradientPenalty, WeightGradientMatchesFiniteDifference) {
  auto D = build_discriminator(small_arch(8, 8, 4), 15);
  std::mt19937_64 rng(16);
  Tensor x = random_normal({3, 1, 8, 8}, rng);
  auto gp = gradient_penalty(D, x, 1, 0.6);
  const double h = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < D.params.size(); ++i) {
    Tensor& w = D.params.values()[i];
    for (std::size_t j = 0; j < w.numel(); j += 7) {
      const double keep = w[j];
      w[j] = keep + h;
      const double up = gradient_penalty(D, x, 1, 0.6).value;
      w[j] = keep - h;
      const double down = gradient_penalty(D, x, 1, 0.6).value;
      w[j] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = gp.param_grads[i][j];
      worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-3}));
      ++checked;
    }
  }
  EXPECT_GT(checked, 20u);
  EXPECT_LT(worst, 1e-3);
}

TEST(Pyramid, DownsampleAndUpsample) {
  Tensor img({4, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  Tensor d = downsample_image(img, 1);
  EXPECT_EQ(d, Tensor({2, 2}, std::vector<double>{3.5, 5.5, 11.5, 13.5}));
  EXPECT_EQ(downsample_image(img, 2), Tensor({1, 1}, std::vector<double>{8.5}));
  Tensor u = upsample_image(d, 1);
  EXPECT_EQ(u.at(0, 1), 3.5);
  EXPECT_EQ(u.at(3, 3), 13.5);
  EXPECT_EQ(downsample_image(u, 1), d);
}

TEST(Training, RejectsBadInput) {
  GanArchitecture a = small_arch(8, 8);
  auto G = build_generator(a, 0);
  auto D = build_discriminator(a, 0);
  TrainConfig cfg;
  EXPECT_THROW(train_progressive(G, D, {}, cfg), std::invalid_argument);
  EXPECT_THROW(train_progressive(G, D, {Tensor({16, 16})}, cfg), ShapeError);
  cfg.batch_size = 0;
  EXPECT_THROW(train_progressive(G, D, {Tensor({8, 8})}, cfg), std::invalid_argument);
}

TEST(Training, NonFiniteLossAborts) {
  GanArchitecture a = small_arch(8, 8);
  auto G = build_generator(a, 0);
  auto D = build_discriminator(a, 0);
  TrainConfig cfg;
  cfg.images_per_phase = 8;
  cfg.batch_size = 4;
  Tensor bad({8, 8}, 0.0);
  bad[5] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(train_progressive(G, D, {bad}, cfg), TrainingError);
}

TEST(Training, SmokeRunWithAlphaScheduleAndCheckpoints) {
  PhantomSpec spec;
  spec.size = 16;
  spec.seed = 3;
  auto data = gen_phantom_dataset(spec, 100);
  std::vector<Tensor> images;
  for (const auto& im : data.images) images.push_back(to_gan_range(im));
  GanArchitecture a = small_arch(32, 16, 16);
  auto G = build_generator(a, 1);
  auto D = build_discriminator(a, 2);
  TrainConfig cfg;
  cfg.images_per_phase = 160;
  cfg.batch_size = 8;
  cfg.seed = 4;
  std::vector<std::size_t> stage_ends;
  TrainCallbacks cb;
  cb.on_stage_end = [&](std::size_t s, const GeneratorModel&, const DiscriminatorModel&) { stage_ends.push_back(s); };
  auto log = train_progressive(G, D, images, cfg, cb);
  EXPECT_EQ(stage_ends, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(log.size(), 20u * 5u);
  for (std::size_t s = 1; s < 3; ++s) {
    std::vector<double> fade;
    for (const auto& r : log) {
      if (r.stage == s && r.fade_in) fade.push_back(r.alpha);
    }
    ASSERT_EQ(fade.size(), 20u);
    EXPECT_EQ(fade.front(), 0.0);
    EXPECT_EQ(fade.back(), 1.0);
    for (std::size_t i = 1; i < fade.size(); ++i) EXPECT_GE(fade[i], fade[i - 1]);
  }
  for (std::size_t i = 0; i < log.size(); ++i) {
    EXPECT_EQ(log[i].step, i);
    EXPECT_TRUE(std::isfinite(log[i].loss_d) && std::isfinite(log[i].loss_g));
  }
  std::mt19937_64 rng(5);
  Tensor sample = generate(G, random_normal({4, 32}, rng), 2, 1.0);
  EXPECT_TRUE(sample.all_finite());
}

TEST(Training, DeterministicGivenSeeds) {
  GanArchitecture a = small_arch(8, 8, 8);
  PhantomSpec spec;
  spec.size = 8;
  auto data = gen_phantom_dataset(spec, 20);
  std::vector<Tensor> images;
  for (const auto& im : data.images) images.push_back(to_gan_range(im));
  TrainConfig cfg;
  cfg.images_per_phase = 32;
  cfg.batch_size = 4;
  auto run = [&] {
    auto G = build_generator(a, 1);
    auto D = build_discriminator(a, 2);
    train_progressive(G, D, images, cfg);
    return G.params;
  };
  EXPECT_EQ(run(), run());
}
