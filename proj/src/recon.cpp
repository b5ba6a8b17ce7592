#include "gpr/recon.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "gpr/adam.hpp"

namespace gpr {

void ReconConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (!(tv_epsilon > 0.0)) throw std::invalid_argument("tv_epsilon must be positive");
  if (restarts == 0) throw std::invalid_argument("restarts must be at least 1");
  if (!(image_learning_rate > 0.0) || !(latent_learning_rate > 0.0) || !(weight_learning_rate > 0.0)) {
    throw std::invalid_argument("learning rates must be positive");
  }
}

namespace {

class FiniteDifference final : public LinearOperator {
 public:
  explicit FiniteDifference(std::size_t n) : n_(n) {}
  Shape in_shape() const override { return {n_, n_}; }
  Shape out_shape() const override { return {2, n_, n_}; }
  void apply(std::span<const double> in, std::span<double> out) const override {
    const std::size_t n = n_, nn = n * n;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const double v = in[r * n + c];
        out[r * n + c] = c + 1 < n ? in[r * n + c + 1] - v : 0.0;
        out[nn + r * n + c] = r + 1 < n ? in[(r + 1) * n + c] - v : 0.0;
      }
    }
  }
  void adjoint(std::span<const double> in, std::span<double> out) const override {
    const std::size_t n = n_, nn = n * n;
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        if (c + 1 < n) {
          out[r * n + c + 1] += in[r * n + c];
          out[r * n + c] -= in[r * n + c];
        }
        if (r + 1 < n) {
          out[(r + 1) * n + c] += in[nn + r * n + c];
          out[r * n + c] -= in[nn + r * n + c];
        }
      }
    }
  }

 private:
  std::size_t n_;
};

// (2,N,N) -> (N,N), adding the two planes.
class PlaneSum final : public LinearOperator {
 public:
  explicit PlaneSum(std::size_t n) : n_(n) {}
  Shape in_shape() const override { return {2, n_, n_}; }
  Shape out_shape() const override { return {n_, n_}; }
  void apply(std::span<const double> in, std::span<double> out) const override {
    const std::size_t nn = n_ * n_;
    for (std::size_t i = 0; i < nn; ++i) out[i] = in[i] + in[nn + i];
  }
  void adjoint(std::span<const double> in, std::span<double> out) const override {
    const std::size_t nn = n_ * n_;
    for (std::size_t i = 0; i < nn; ++i) out[i] = out[nn + i] = in[i];
  }

 private:
  std::size_t n_;
};

using Objective = ReconObjective;

struct ParamGroup {
  std::vector<std::string> names;
  std::vector<Tensor> values;
  AdamState state;
};

struct Trace {
  std::vector<double> fidelity, objective, best_objective;
  std::size_t best_index = 0;
};

// Evaluates iterates 0..iterations, stepping every group with Adam between
// evaluations. on_best runs whenever the objective strictly improves.
Trace optimize(Graph& g, const Objective& obj, std::vector<ParamGroup>& groups, std::size_t iterations,
               const std::function<void()>& on_best) {
  Trace trace;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0;; ++t) {
    g.forward(obj.total);
    const double fid = g.value(obj.fidelity).item();
    const double total = g.value(obj.total).item();
    if (!std::isfinite(total) || !std::isfinite(fid)) {
      throw ReconError("non-finite objective at iteration " + std::to_string(t));
    }
    trace.fidelity.push_back(fid);
    trace.objective.push_back(total);
    if (total < best) {
      best = total;
      trace.best_index = t;
      on_best();
    }
    trace.best_objective.push_back(best);
    if (t == iterations) break;
    g.backward(obj.total);
    for (auto& group : groups) {
      std::vector<Tensor> grads;
      grads.reserve(group.names.size());
      for (const auto& name : group.names) grads.push_back(g.grad(name));
      adam_step(group.values, grads, group.state);
      for (std::size_t i = 0; i < group.names.size(); ++i) g.bind(group.names[i], group.values[i]);
    }
  }
  return trace;
}

void fill_trace(ReconResult& r, Trace&& trace) {
  r.fidelity_history = std::move(trace.fidelity);
  r.objective_history = std::move(trace.objective);
  r.best_objective_history = std::move(trace.best_objective);
  r.best_index = trace.best_index;
  r.final_fidelity = r.fidelity_history[r.best_index];
}

void check_data(const KSpaceData& g, const ImagingOperator& op) {
  const std::size_t n = op.size();
  if (g.real.shape() != Shape{n, n} || g.imag.shape() != Shape{n, n}) {
    throw ShapeError("k-space data " + shape_str(g.real.shape()) + " does not match operator size " + std::to_string(n));
  }
}

void check_generator(const GeneratorModel& generator, const ImagingOperator& op) {
  if (generator.arch.final_resolution != op.size()) {
    throw std::invalid_argument("generator resolution " + std::to_string(generator.arch.final_resolution) +
                                " does not match operator size " + std::to_string(op.size()));
  }
}

Tensor image_of(const Graph& g, Var v, std::size_t n) { return g.value(v).reshaped({n, n}); }

}  // namespace

ReconObjective add_recon_objective(Graph& g, Var image, const ImagingOperator& op, const KSpaceData& data,
                                   double lambda, double tv_epsilon) {
  Var kspace = g.fourier_linear(image, op.as_linear());
  Var sampled = g.gather_masked(kspace, op.mask().indicator);
  Var residual = g.add(sampled, g.constant(-1.0 * sampled_values(data)));
  Var fidelity = g.sum(g.square(residual));
  Var total = fidelity;
  if (lambda != 0.0) total = g.add(fidelity, g.scale(tv_graph(g, image, op.size(), tv_epsilon), lambda));
  return {image, fidelity, total};
}

Var generator_image_graph(Graph& g, const GeneratorModel& generator, Var z, Weights weights) {
  const std::size_t stage = generator.arch.stages() - 1;
  const std::size_t n = generator.arch.final_resolution;
  Var out = generator_graph(g, generator, z, stage, 1.0, weights);
  return g.scale(g.add(out, g.constant(Tensor({1, 1, n, n}, 1.0))), 0.5);
}

std::shared_ptr<const LinearOperator> finite_difference_operator(std::size_t n) {
  return std::make_shared<FiniteDifference>(n);
}

double tv_penalty(const Tensor& image, double epsilon) {
  if (image.ndim() != 2 || image.dim(0) != image.dim(1)) {
    throw ShapeError("tv_penalty expects a square image, got " + shape_str(image.shape()));
  }
  if (!(epsilon >= 0.0)) throw std::invalid_argument("tv epsilon must be non-negative");
  const std::size_t n = image.dim(0);
  double acc = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double dx = c + 1 < n ? image.at(r, c + 1) - image.at(r, c) : 0.0;
      const double dy = r + 1 < n ? image.at(r + 1, c) - image.at(r, c) : 0.0;
      acc += std::sqrt(dx * dx + dy * dy + epsilon * epsilon);
    }
  }
  return acc - static_cast<double>(n * n) * epsilon;
}

Var tv_graph(Graph& g, Var image, std::size_t n, double epsilon) {
  Var d = g.fourier_linear(image, finite_difference_operator(n));
  Var sq = g.fourier_linear(g.square(d), std::make_shared<PlaneSum>(n));
  Var mag = g.sqrt(g.add(sq, g.constant(Tensor({n, n}, epsilon * epsilon))));
  return g.add(g.sum(mag), g.constant(Tensor::scalar(-static_cast<double>(n * n) * epsilon)));
}

Tensor generator_image(const GeneratorModel& generator, const Tensor& z) {
  if (z.numel() != generator.arch.latent_dim) {
    throw ShapeError("latent has " + std::to_string(z.numel()) + " values, generator expects " +
                     std::to_string(generator.arch.latent_dim));
  }
  Graph g;
  Var img = generator_image_graph(g, generator, g.constant(z.reshaped({1, z.numel()})), Weights::frozen);
  const std::size_t n = generator.arch.final_resolution;
  return g.forward(img).reshaped({n, n});
}

ReconResult zero_fill(const KSpaceData& g, const ImagingOperator& op) {
  check_data(g, op);
  ReconResult r;
  r.method = "zf";
  r.image = op.adjoint(g);
  r.final_fidelity = op.fidelity(r.image, g);
  r.fidelity_history = r.objective_history = r.best_objective_history = {r.final_fidelity};
  return r;
}

ReconResult pls_tv(const KSpaceData& g, const ImagingOperator& op, const ReconConfig& config) {
  config.validate();
  check_data(g, op);
  const std::size_t n = op.size();
  Graph graph;
  ParamGroup f{{"f"}, {op.adjoint(g)}, AdamState{AdamConfig{config.image_learning_rate}}};
  Var image = graph.input("f", f.values[0]);
  Objective obj = add_recon_objective(graph, image, op, g, config.lambda, config.tv_epsilon);
  ReconResult r;
  r.method = "pls-tv";
  r.lambda = config.lambda;
  r.iterations = config.iterations;
  std::vector<ParamGroup> groups{std::move(f)};
  fill_trace(r, optimize(graph, obj, groups, config.iterations, [&] { r.image = image_of(graph, image, n); }));
  return r;
}

ReconResult csgm(const KSpaceData& g, const ImagingOperator& op, const GeneratorModel& generator,
                 const ReconConfig& config) {
  config.validate();
  check_data(g, op);
  check_generator(generator, op);
  const std::size_t k = generator.arch.latent_dim, n = op.size();
  if (config.initial_latent && config.initial_latent->numel() != k) {
    throw ShapeError("initial latent has " + std::to_string(config.initial_latent->numel()) + " values, expected " +
                     std::to_string(k));
  }
  Graph graph;
  Var z = graph.input("z", Tensor({1, k}));
  Objective obj = add_recon_objective(graph, generator_image_graph(graph, generator, z, Weights::frozen), op, g, 0.0, config.tv_epsilon);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::optional<ReconResult> best;
  for (std::size_t restart = 0; restart < config.restarts; ++restart) {
    Tensor z0({1, k});
    for (auto& v : z0.data()) v = normal(rng);
    if (restart == 0 && config.initial_latent) z0 = config.initial_latent->reshaped({1, k});
    graph.bind("z", z0);
    std::vector<ParamGroup> groups{{{"z"}, {z0}, AdamState{AdamConfig{config.latent_learning_rate}}}};
    ReconResult r;
    r.method = "csgm";
    r.iterations = config.iterations;
    fill_trace(r, optimize(graph, obj, groups, config.iterations, [&] {
                 r.image = image_of(graph, obj.image, n);
                 r.latent = graph.value(z).reshaped({k});
               }));
    if (!best || r.best_objective_history.back() < best->best_objective_history.back()) best = std::move(r);
  }
  return std::move(*best);
}

ReconResult adapt_generator(const KSpaceData& g, const ImagingOperator& op, const GeneratorModel& generator,
                            const ReconResult& latent_search, const ReconConfig& config) {
  config.validate();
  check_data(g, op);
  check_generator(generator, op);
  if (!latent_search.latent) throw std::invalid_argument("latent search result carries no latent");
  const std::size_t k = generator.arch.latent_dim, n = op.size();
  Tensor z0 = latent_search.latent->reshaped({1, k});

  Graph graph;
  Var z = graph.input("z", z0);
  Objective obj =
      add_recon_objective(graph, generator_image_graph(graph, generator, z, Weights::trainable), op, g, config.lambda, config.tv_epsilon);
  ParamGroup latent{{"z"}, {z0}, AdamState{AdamConfig{config.latent_learning_rate}}};
  ParamGroup weights{{}, {}, AdamState{AdamConfig{config.weight_learning_rate}}};
  for (std::size_t i = 0; i < generator.params.size(); ++i) {
    const auto& name = generator.params.names()[i];
    if (!graph.has_input(name)) continue;
    weights.names.push_back(name);
    weights.values.push_back(generator.params.values()[i]);
  }
  std::vector<ParamGroup> groups{std::move(latent), std::move(weights)};

  ReconResult r;
  r.method = config.lambda == 0.0 ? "iagan" : "iagan-tv";
  r.lambda = config.lambda;
  r.iterations = config.adapt_iterations;
  ParameterSet adapted = generator.params;
  fill_trace(r, optimize(graph, obj, groups, config.adapt_iterations, [&] {
               r.image = image_of(graph, obj.image, n);
               r.latent = graph.value(z).reshaped({k});
               for (const auto& name : groups[1].names) adapted.get(name) = graph.value(graph.named(name));
             }));
  r.adapted_weights = std::move(adapted);
  return r;
}

ReconResult iagan(const KSpaceData& g, const ImagingOperator& op, const GeneratorModel& generator,
                  const ReconConfig& config) {
  ReconConfig plain = config;
  plain.lambda = 0.0;
  return iagan_tv(g, op, generator, plain);
}

ReconResult iagan_tv(const KSpaceData& g, const ImagingOperator& op, const GeneratorModel& generator,
                     const ReconConfig& config) {
  const ReconResult start = csgm(g, op, generator, config);
  ReconResult r = adapt_generator(g, op, generator, start, config);
  r.method = config.lambda == 0.0 ? "iagan" : "iagan-tv";
  return r;
}

void attach_metrics(ReconResult& result, const Tensor& truth) {
  result.metrics = evaluate(result.image, truth, result.final_fidelity);
}

LambdaSearch grid_search_lambda(const std::function<ReconResult(double)>& solve, const Tensor& truth,
                                const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("lambda grid is empty");
  LambdaSearch out;
  bool found = false;
  for (double lambda : grid) {
    LambdaTrial trial{lambda, std::nullopt, {}};
    try {
      ReconResult r = solve(lambda);
      const double err = mse(r.image, truth);
      trial.mse = err;
      if (!found || err < out.best_mse || (err == out.best_mse && lambda < out.best_lambda)) {
        found = true;
        out.best_lambda = lambda;
        out.best_mse = err;
        out.best = std::move(r);
      }
    } catch (const std::exception& e) {
      trial.error = e.what();
    }
    out.table.push_back(std::move(trial));
  }
  if (!found) throw ReconError("every lambda in the grid failed; first error: " + out.table.front().error);
  return out;
}

}  // namespace gpr
