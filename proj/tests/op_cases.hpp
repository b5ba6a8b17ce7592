#pragma once

// One small graph per op kind for gradient checks, shared by the unit tests
// and the acceptance run.

#include <functional>
#include <random>
#include <vector>

#include "gpr/autodiff.hpp"
#include "gpr/imaging.hpp"
#include "test_util.hpp"

namespace gpr::testing {

// Builds root = sum(op(inputs...) * W) for a fixed random W so that every
// output coordinate contributes an O(1) gradient.
using Builder = std::function<Var(Graph&, std::mt19937_64&)>;

inline double check_op(const Builder& build, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Graph g;
  Var out = build(g, rng);
  const Shape shape = g.forward(out).shape();
  Var w = g.constant(random_tensor(shape, rng));
  Var root = g.sum(g.mul(out, w));
  return grad_check(g, root, g.input_names(), 1e-5);
}

struct OpCase {
  const char* name;
  Builder build;
};

inline std::vector<OpCase> op_cases() {
  return {
      {"dense",
       [](Graph& g, std::mt19937_64& r) {
         return g.dense(g.input("x", random_tensor({2, 5}, r)), g.input("w", random_tensor({3, 5}, r)),
                        g.input("b", random_tensor({3}, r)));
       }},
      {"dense-reshaped",
       [](Graph& g, std::mt19937_64& r) {
         return g.dense(g.input("x", random_tensor({2, 1, 2, 2}, r)), g.input("w", random_tensor({8, 4}, r)),
                        std::nullopt, Shape{2, 2, 2});
       }},
      {"conv2d",
       [](Graph& g, std::mt19937_64& r) {
         return g.conv2d(g.input("x", random_tensor({2, 2, 5, 5}, r)), g.input("w", random_tensor({3, 2, 3, 3}, r)),
                         g.input("b", random_tensor({3}, r)), 1, 1);
       }},
      {"conv2d-strided",
       [](Graph& g, std::mt19937_64& r) {
         return g.conv2d(g.input("x", random_tensor({1, 2, 6, 6}, r)), g.input("w", random_tensor({2, 2, 3, 3}, r)),
                         std::nullopt, 2, 1);
       }},
      {"conv2d-transpose",
       [](Graph& g, std::mt19937_64& r) {
         return g.conv2d_transpose(g.input("x", random_tensor({1, 1, 4, 4}, r)),
                                   g.input("w", random_tensor({1, 2, 3, 3}, r)), 4, 4, g.input("b", random_tensor({2}, r)),
                                   1, 1);
       }},
      {"conv2d-transpose-strided",
       [](Graph& g, std::mt19937_64& r) {
         return g.conv2d_transpose(g.input("x", random_tensor({2, 2, 3, 3}, r)),
                                   g.input("w", random_tensor({2, 1, 3, 3}, r)), 6, 6, std::nullopt, 2, 1);
       }},
      {"upsample-nearest",
       [](Graph& g, std::mt19937_64& r) { return g.upsample_nearest(g.input("x", random_tensor({2, 2, 3, 4}, r))); }},
      {"downsample-avg",
       [](Graph& g, std::mt19937_64& r) { return g.downsample_avg(g.input("x", random_tensor({2, 2, 4, 6}, r))); }},
      {"leaky-relu",
       [](Graph& g, std::mt19937_64& r) { return g.leaky_relu(g.input("x", random_tensor({3, 8}, r))); }},
      {"tanh", [](Graph& g, std::mt19937_64& r) { return g.tanh(g.input("x", random_tensor({4, 4}, r, -2, 2))); }},
      {"add",
       [](Graph& g, std::mt19937_64& r) {
         return g.add(g.input("a", random_tensor({3, 3}, r)), g.input("b", random_tensor({3, 3}, r)));
       }},
      {"mul",
       [](Graph& g, std::mt19937_64& r) {
         return g.mul(g.input("a", random_tensor({3, 3}, r)), g.input("b", random_tensor({3, 3}, r)));
       }},
      {"scale", [](Graph& g, std::mt19937_64& r) { return g.scale(g.input("x", random_tensor({6}, r)), -1.7); }},
      {"sum", [](Graph& g, std::mt19937_64& r) { return g.sum(g.input("x", random_tensor({2, 4}, r))); }},
      {"mean", [](Graph& g, std::mt19937_64& r) { return g.mean(g.input("x", random_tensor({2, 4}, r))); }},
      {"square", [](Graph& g, std::mt19937_64& r) { return g.square(g.input("x", random_tensor({8, 8}, r))); }},
      {"sqrt", [](Graph& g, std::mt19937_64& r) { return g.sqrt(g.input("x", random_tensor({8}, r, 0.5, 2.0))); }},
      {"pixelnorm",
       [](Graph& g, std::mt19937_64& r) { return g.pixelnorm(g.input("x", random_tensor({2, 4, 3, 3}, r))); }},
      {"pixelnorm-2d", [](Graph& g, std::mt19937_64& r) { return g.pixelnorm(g.input("x", random_tensor({3, 6}, r))); }},
      {"minibatch-stddev",
       [](Graph& g, std::mt19937_64& r) { return g.minibatch_stddev(g.input("x", random_tensor({3, 2, 3, 3}, r))); }},
      {"gather-masked",
       [](Graph& g, std::mt19937_64& r) {
         Tensor mask = random_tensor({4, 4}, r);
         for (auto& v : mask.data()) v = v > 0 ? 1.0 : 0.0;
         mask[0] = 1.0;
         return g.gather_masked(g.input("x", random_tensor({2, 4, 4}, r)), mask);
       }},
      {"fourier-linear",
       [](Graph& g, std::mt19937_64& r) {
         const std::size_t n = 8;
         ImagingOperator op(make_mask(n, 2.0, 2, r()), random_tensor({n, n}, r, -3, 3));
         return g.fourier_linear(g.input("x", random_tensor({n, n}, r)), op.as_linear());
       }},
  };
}

}  // namespace gpr::testing
