#pragma once

// Reconstruction from undersampled k-space: zero-filled inverse, TV-penalized
// least squares, and three generator-prior solvers (latent search, joint
// latent and weight adaptation, and the latter with a TV penalty).
//
// Generator-based solvers work on images in [0, 1]: the candidate image is
// 0.5 * (G(z) + 1), evaluated at the generator's final stage with alpha 1.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gpr/autodiff.hpp"
#include "gpr/gan.hpp"
#include "gpr/imaging.hpp"
#include "gpr/metrics.hpp"
#include "gpr/tensor.hpp"

namespace gpr {

struct ReconConfig {
  std::size_t iterations = 1000;        // PLS-TV steps, latent-search steps per restart
  std::size_t adapt_iterations = 2000;  // joint (z, theta) steps
  double image_learning_rate = 1e-2;
  double latent_learning_rate = 1e-2;
  double weight_learning_rate = 1e-4;
  double lambda = 0.0;
  double tv_epsilon = 1e-6;
  std::size_t restarts = 3;
  std::uint64_t seed = 0;
  /// Used for the first latent-search restart instead of a random draw.
  std::optional<Tensor> initial_latent;

  void validate() const;
};

struct ReconResult {
  std::string method;
  Tensor image;                        // N x N, [0, 1] scale
  std::optional<Tensor> latent;        // k values
  std::optional<ParameterSet> adapted_weights;
  std::vector<double> fidelity_history;        // per evaluated iterate
  std::vector<double> objective_history;       // fidelity + lambda * TV
  std::vector<double> best_objective_history;  // running minimum of the above
  std::size_t best_index = 0;
  std::size_t iterations = 0;
  double lambda = 0.0;
  double final_fidelity = 0.0;  // ||g - H image||^2 of the reported image
  std::optional<MetricsRecord> metrics;
};

class ReconError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Isotropic TV with forward differences and replicate boundary:
/// sum sqrt(dx^2 + dy^2 + eps^2) - N^2 eps. eps = 0 gives exact TV.
double tv_penalty(const Tensor& image, double epsilon);
/// The same penalty as a graph node; image has N*N elements.
Var tv_graph(Graph& g, Var image, std::size_t n, double epsilon);
/// Forward differences (N,N) -> (2,N,N): horizontal then vertical.
std::shared_ptr<const LinearOperator> finite_difference_operator(std::size_t n);

/// 0.5 * (G(z) + 1) at the final stage; z has k values.
Tensor generator_image(const GeneratorModel& generator, const Tensor& z);
/// The same map as a graph node; z is (1, k).
Var generator_image_graph(Graph& g, const GeneratorModel& generator, Var z, Weights weights);

struct ReconObjective {
  Var image;
  Var fidelity;  // ||g - H image||^2 at sampled locations
  Var total;     // fidelity + lambda * TV; the fidelity node itself when lambda = 0
};

/// Objective graph shared by every iterative solver.
ReconObjective add_recon_objective(Graph& g, Var image, const ImagingOperator& op, const KSpaceData& data,
                                   double lambda, double tv_epsilon);

ReconResult zero_fill(const KSpaceData& g, const ImagingOperator& op);
ReconResult pls_tv(const KSpaceData& g, const ImagingOperator& op, const ReconConfig& config);
ReconResult csgm(const KSpaceData& g, const ImagingOperator& op, const GeneratorModel& generator,
                 const ReconConfig& config);
/// Phase 1 is csgm() with the same config; phase 2 adapts z and the weights
/// jointly from its result.
ReconResult iagan(const KSpaceData& g, const ImagingOperator& op, const GeneratorModel& generator,
                  const ReconConfig& config);
/// Like iagan() with lambda * TV added in phase 2.
ReconResult iagan_tv(const KSpaceData& g, const ImagingOperator& op, const GeneratorModel& generator,
                     const ReconConfig& config);
/// Phase 2 only, starting from a finished latent search.
ReconResult adapt_generator(const KSpaceData& g, const ImagingOperator& op, const GeneratorModel& generator,
                            const ReconResult& latent_search, const ReconConfig& config);

/// Fills result.metrics against ground truth.
void attach_metrics(ReconResult& result, const Tensor& truth);

struct LambdaTrial {
  double lambda = 0.0;
  std::optional<double> mse;
  std::string error;  // set when the solver failed for this lambda
};

struct LambdaSearch {
  double best_lambda = 0.0;
  double best_mse = 0.0;
  std::vector<LambdaTrial> table;  // in grid order
  ReconResult best;
};

/// Runs solve(lambda) for every grid entry and keeps the lowest-MSE result;
/// ties go to the smaller lambda. Throws only if every entry failed.
LambdaSearch grid_search_lambda(const std::function<ReconResult(double)>& solve, const Tensor& truth,
                                const std::vector<double>& grid);

}  // namespace gpr
