#pragma once

// Progressive GAN at desk scale: generator and discriminator grow from 4x4
// by doubling, new resolutions are blended in with a fade coefficient alpha,
// and training uses the WGAN-GP loss with a small drift term.

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpr/adam.hpp"
#include "gpr/autodiff.hpp"
#include "gpr/tensor.hpp"

namespace gpr {

/// Ordered name -> tensor map. Order is insertion order and is stable.
class ParameterSet {
 public:
  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::size_t size() const noexcept { return names_.size(); }
  std::size_t numel() const;
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Tensor>& values() const noexcept { return values_; }
  std::vector<Tensor>& values() noexcept { return values_; }
  bool operator==(const ParameterSet&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

struct GanArchitecture {
  std::size_t latent_dim = 32;
  std::size_t final_resolution = 32;
  std::size_t base_width = 64;  // features at 4x4
  std::size_t width_cap = 64;
  std::size_t min_width = 4;

  std::size_t stages() const;                  // number of resolutions 4..final
  std::size_t resolution(std::size_t stage) const { return std::size_t{4} << stage; }
  std::size_t width(std::size_t stage) const;  // halves per doubling
  void validate() const;
};

struct GeneratorModel {
  GanArchitecture arch;
  ParameterSet params;
  std::size_t current_stage = 0;
  double alpha = 1.0;
};

struct DiscriminatorModel {
  GanArchitecture arch;
  ParameterSet params;
  std::size_t current_stage = 0;
  double alpha = 1.0;
};

/// Unit-Gaussian weights (scaled at runtime by the He constant), zero biases.
GeneratorModel build_generator(const GanArchitecture& arch, std::uint64_t seed);
DiscriminatorModel build_discriminator(const GanArchitecture& arch, std::uint64_t seed);

/// How model weights enter a graph: as named inputs (differentiated) or as
/// constants.
enum class Weights { trainable, frozen };

/// Adds G(z) to the graph. z is (B, k); the result is (B, 1, r, r) with
/// r = 4 * 2^stage. For 0 < alpha < 1 the output is
/// (1 - alpha) * upsample(previous stage image) + alpha * new stage image; the
/// alpha = 0 and alpha = 1 cases return exactly one path.
Var generator_graph(Graph& g, const GeneratorModel& model, Var z, std::size_t stage, double alpha,
                    Weights weights = Weights::trainable);
/// Adds D(x) to the graph. x is (B, 1, r, r); the result is (B, 1).
Var discriminator_graph(Graph& g, const DiscriminatorModel& model, Var x, std::size_t stage, double alpha,
                        Weights weights = Weights::trainable);

/// G(z) for a batch of latents, evaluated without gradients.
Tensor generate(const GeneratorModel& model, const Tensor& z, std::size_t stage, double alpha);
/// Single latent (k values), returns an r x r image.
Tensor generate_image(const GeneratorModel& model, const Tensor& z, std::size_t stage, double alpha);

struct GanLosses {
  double generator = 0.0;
  double discriminator = 0.0;
};

/// WGAN-GP: D loss = mean(fake) - mean(real) + gp_weight * gp + drift * mean(real^2);
/// G loss = -mean(fake).
GanLosses gan_loss(std::span<const double> real_scores, std::span<const double> fake_scores, double gradient_penalty,
                   double gp_weight = 10.0, double drift_weight = 1e-3);

struct GradientPenalty {
  double value = 0.0;                 // mean_b (||grad_x D(x_b)|| - 1)^2
  std::vector<double> norms;          // per-sample gradient norms
  std::vector<Tensor> param_grads;    // d value / d params, aligned with model.params
};

/// Penalty at the interpolates x_hat (B,1,r,r) and its gradient with respect
/// to the discriminator weights. The weight gradient is a central difference
/// of first-order weight gradients along the fixed penalty direction, step
/// fd_step in image units.
GradientPenalty gradient_penalty(const DiscriminatorModel& model, const Tensor& x_hat, std::size_t stage, double alpha,
                                 double fd_step = 1e-4);

struct TrainConfig {
  std::size_t images_per_phase = 2000;  // per fade-in and per stabilization phase
  std::size_t batch_size = 16;
  AdamConfig generator_adam{1e-3, 0.0, 0.99, 1e-8};
  AdamConfig discriminator_adam{1e-3, 0.0, 0.99, 1e-8};
  double gp_weight = 10.0;
  double drift_weight = 1e-3;
  std::uint64_t seed = 0;
  /// Train up to this stage (inclusive); defaults to the last stage.
  std::optional<std::size_t> last_stage;

  void validate() const;
};

struct TrainLogRecord {
  std::size_t step = 0;
  std::size_t stage = 0;
  double alpha = 0.0;
  double loss_g = 0.0;
  double loss_d = 0.0;
  bool fade_in = false;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainCallbacks {
  std::function<void(const TrainLogRecord&, const GeneratorModel&)> on_step;
  std::function<void(std::size_t stage, const GeneratorModel&, const DiscriminatorModel&)> on_stage_end;
};

/// Progressive training on images in [-1, 1] at the final resolution. Each
/// stage after the first runs a fade-in phase (alpha ramps linearly from 0 to
/// 1) and then a stabilization phase at alpha = 1; each step makes one
/// discriminator update then one generator update. Adam state is reset when a
/// stage begins.
std::vector<TrainLogRecord> train_progressive(GeneratorModel& generator, DiscriminatorModel& discriminator,
                                              const std::vector<Tensor>& dataset, const TrainConfig& config,
                                              const TrainCallbacks& callbacks = {});

/// Average-pools an r x r image down to r / 2^levels.
Tensor downsample_image(const Tensor& image, std::size_t levels);
/// Nearest-neighbour upsampling by 2^levels.
Tensor upsample_image(const Tensor& image, std::size_t levels);

}  // namespace gpr
