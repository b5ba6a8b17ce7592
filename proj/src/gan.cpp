#include "gpr/gan.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

namespace gpr {

void ParameterSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

bool ParameterSet::contains(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return values_[static_cast<std::size_t>(it - names_.begin())];
}

Tensor& ParameterSet::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).get(name));
}

std::size_t ParameterSet::numel() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.numel();
  return n;
}

std::size_t GanArchitecture::stages() const {
  validate();
  std::size_t s = 1;
  while (resolution(s - 1) < final_resolution) ++s;
  return s;
}

std::size_t GanArchitecture::width(std::size_t stage) const {
  return std::max(min_width, std::min(width_cap, base_width >> std::min<std::size_t>(stage, 63)));
}

void GanArchitecture::validate() const {
  if (latent_dim == 0) throw std::invalid_argument("latent dimension must be positive");
  if (final_resolution < 4 || (final_resolution & (final_resolution - 1)) != 0) {
    throw std::invalid_argument("final resolution must be a power of two >= 4, got " +
                                std::to_string(final_resolution));
  }
  if (base_width == 0 || width_cap == 0 || min_width == 0) throw std::invalid_argument("layer widths must be positive");
}

namespace {

std::string key(const char* net, std::size_t stage, const char* layer) {
  return std::string(net) + ".s" + std::to_string(stage) + "." + layer;
}

class Initializer {
 public:
  Initializer(ParameterSet& p, std::uint64_t seed) : params_(p), rng_(seed) {}

  void layer(const std::string& prefix, Shape weight_shape) {
    Tensor w(weight_shape);
    for (auto& v : w.data()) v = normal_(rng_);
    const std::size_t out = weight_shape[0];
    params_.add(prefix + ".w", std::move(w));
    params_.add(prefix + ".b", Tensor({out}, 0.0));
  }

 private:
  ParameterSet& params_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// Wires stored parameters into a graph with the equalized learning-rate
// scale applied at runtime.
class Wiring {
 public:
  Wiring(Graph& g, const ParameterSet& p, Weights mode) : g_(g), params_(p), mode_(mode) {}

  Var param(const std::string& name) {
    if (mode_ == Weights::trainable) {
      return g_.has_input(name) ? g_.named(name) : g_.input(name, params_.get(name));
    }
    auto it = frozen_.find(name);
    if (it != frozen_.end()) return it->second;
    return frozen_.emplace(name, g_.constant(params_.get(name))).first->second;
  }

  Var weight(const std::string& prefix, double gain) {
    const Tensor& w = params_.get(prefix + ".w");
    const double fan_in = static_cast<double>(w.numel() / w.dim(0));
    return g_.scale(param(prefix + ".w"), gain / std::sqrt(fan_in));
  }

  Var conv(Var x, const std::string& prefix, double gain = std::sqrt(2.0)) {
    const std::size_t k = params_.get(prefix + ".w").dim(2);
    return g_.conv2d(x, weight(prefix, gain), param(prefix + ".b"), 1, k / 2);
  }

  Var dense(Var x, const std::string& prefix, double gain, Shape out_shape = {}) {
    return g_.dense(x, weight(prefix, gain), param(prefix + ".b"), std::move(out_shape));
  }

 private:
  Graph& g_;
  const ParameterSet& params_;
  Weights mode_;
  std::map<std::string, Var> frozen_;
};

void check_stage(const GanArchitecture& arch, std::size_t stage, double alpha) {
  if (stage >= arch.stages()) {
    throw std::invalid_argument("stage " + std::to_string(stage) + " out of range (model has " +
                                std::to_string(arch.stages()) + " stages)");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
}

Var blend(Graph& g, Var old_path, Var new_path, double alpha) {
  return g.add(g.scale(old_path, 1.0 - alpha), g.scale(new_path, alpha));
}

}  // namespace

GeneratorModel build_generator(const GanArchitecture& arch, std::uint64_t seed) {
  const std::size_t stages = arch.stages();
  GeneratorModel m{arch, {}, 0, 1.0};
  Initializer init(m.params, seed);
  const std::size_t c0 = arch.width(0);
  init.layer(key("g", 0, "dense"), {c0 * 16, arch.latent_dim});
  init.layer(key("g", 0, "conv"), {c0, c0, 3, 3});
  init.layer(key("g", 0, "rgb"), {1, c0, 1, 1});
  for (std::size_t s = 1; s < stages; ++s) {
    const std::size_t cin = arch.width(s - 1), c = arch.width(s);
    init.layer(key("g", s, "conv0"), {c, cin, 3, 3});
    init.layer(key("g", s, "conv1"), {c, c, 3, 3});
    init.layer(key("g", s, "rgb"), {1, c, 1, 1});
  }
  return m;
}

DiscriminatorModel build_discriminator(const GanArchitecture& arch, std::uint64_t seed) {
  const std::size_t stages = arch.stages();
  DiscriminatorModel m{arch, {}, 0, 1.0};
  Initializer init(m.params, seed);
  for (std::size_t s = stages; s-- > 1;) {
    const std::size_t c = arch.width(s), cout = arch.width(s - 1);
    init.layer(key("d", s, "rgb"), {c, 1, 1, 1});
    init.layer(key("d", s, "conv0"), {c, c, 3, 3});
    init.layer(key("d", s, "conv1"), {cout, c, 3, 3});
  }
  const std::size_t c0 = arch.width(0);
  init.layer(key("d", 0, "rgb"), {c0, 1, 1, 1});
  init.layer(key("d", 0, "conv"), {c0, c0 + 1, 3, 3});
  init.layer(key("d", 0, "dense0"), {c0, c0 * 16});
  init.layer(key("d", 0, "dense1"), {1, c0});
  return m;
}

Var generator_graph(Graph& g, const GeneratorModel& model, Var z, std::size_t stage, double alpha, Weights weights) {
  const auto& arch = model.arch;
  check_stage(arch, stage, alpha);
  Wiring w(g, model.params, weights);
  const std::size_t c0 = arch.width(0);

  Var h = g.pixelnorm(z);
  h = g.pixelnorm(g.leaky_relu(w.dense(h, key("g", 0, "dense"), std::sqrt(2.0) / 4.0, {c0, 4, 4})));
  h = g.pixelnorm(g.leaky_relu(w.conv(h, key("g", 0, "conv"))));
  if (stage == 0) return w.conv(h, key("g", 0, "rgb"), 1.0);

  // At alpha = 0 the newest block does not contribute and is left out.
  const std::size_t last_full = alpha == 0.0 ? stage - 1 : stage;
  Var previous = h;
  for (std::size_t s = 1; s <= last_full; ++s) {
    previous = h;
    h = g.upsample_nearest(h);
    h = g.pixelnorm(g.leaky_relu(w.conv(h, key("g", s, "conv0"))));
    h = g.pixelnorm(g.leaky_relu(w.conv(h, key("g", s, "conv1"))));
  }
  if (alpha == 0.0) return g.upsample_nearest(w.conv(h, key("g", stage - 1, "rgb"), 1.0));
  Var image = w.conv(h, key("g", stage, "rgb"), 1.0);
  if (alpha == 1.0) return image;
  Var coarse = g.upsample_nearest(w.conv(previous, key("g", stage - 1, "rgb"), 1.0));
  return blend(g, coarse, image, alpha);
}

Var discriminator_graph(Graph& g, const DiscriminatorModel& model, Var x, std::size_t stage, double alpha,
                        Weights weights) {
  const auto& arch = model.arch;
  check_stage(arch, stage, alpha);
  Wiring w(g, model.params, weights);

  auto from_rgb = [&](Var img, std::size_t s) { return g.leaky_relu(w.conv(img, key("d", s, "rgb"))); };
  auto block = [&](Var h, std::size_t s) {
    h = g.leaky_relu(w.conv(h, key("d", s, "conv0")));
    h = g.leaky_relu(w.conv(h, key("d", s, "conv1")));
    return g.downsample_avg(h);
  };

  Var h;
  if (stage == 0) {
    h = from_rgb(x, 0);
  } else {
    Var coarse = alpha < 1.0 ? from_rgb(g.downsample_avg(x), stage - 1) : Var{};
    if (alpha == 0.0) {
      h = coarse;
    } else {
      h = block(from_rgb(x, stage), stage);
      if (alpha < 1.0) h = blend(g, coarse, h, alpha);
    }
    for (std::size_t s = stage - 1; s >= 1; --s) h = block(h, s);
  }
  h = g.minibatch_stddev(h);
  h = g.leaky_relu(w.conv(h, key("d", 0, "conv")));
  h = g.leaky_relu(w.dense(h, key("d", 0, "dense0"), std::sqrt(2.0)));
  return w.dense(h, key("d", 0, "dense1"), 1.0);
}

Tensor generate(const GeneratorModel& model, const Tensor& z, std::size_t stage, double alpha) {
  if (z.ndim() != 2 || z.dim(1) != model.arch.latent_dim) {
    throw ShapeError("generate: latents must be (B, " + std::to_string(model.arch.latent_dim) + "), got " +
                     shape_str(z.shape()));
  }
  Graph g;
  Var out = generator_graph(g, model, g.constant(z), stage, alpha, Weights::frozen);
  return g.forward(out);
}

Tensor generate_image(const GeneratorModel& model, const Tensor& z, std::size_t stage, double alpha) {
  const std::size_t r = model.arch.resolution(stage);
  return generate(model, z.reshaped({1, z.numel()}), stage, alpha).reshaped({r, r});
}

GanLosses gan_loss(std::span<const double> real_scores, std::span<const double> fake_scores, double gradient_penalty,
                   double gp_weight, double drift_weight) {
  if (real_scores.empty() || fake_scores.empty()) throw std::invalid_argument("gan_loss: empty score batch");
  auto mean = [](std::span<const double> s) {
    double acc = 0.0;
    for (double v : s) acc += v;
    return acc / static_cast<double>(s.size());
  };
  double drift = 0.0;
  for (double v : real_scores) drift += v * v;
  drift /= static_cast<double>(real_scores.size());
  const double fake = mean(fake_scores), real = mean(real_scores);
  return {-fake, fake - real + gp_weight * gradient_penalty + drift_weight * drift};
}

namespace {

// Weight gradients aligned with the parameter set; zeros where a weight is
// unused by the graph.
std::vector<Tensor> weight_grads(const Graph& g, const ParameterSet& params) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    if (g.has_input(name) && g.has_grad(g.named(name))) {
      grads.push_back(g.grad(name));
    } else {
      grads.emplace_back(params.values()[i].shape(), 0.0);
    }
  }
  return grads;
}

}  // namespace

GradientPenalty gradient_penalty(const DiscriminatorModel& model, const Tensor& x_hat, std::size_t stage, double alpha,
                                 double fd_step) {
  if (x_hat.ndim() != 4) throw ShapeError("gradient_penalty: expected (B,1,r,r), got " + shape_str(x_hat.shape()));
  if (!(fd_step > 0.0)) throw std::invalid_argument("gradient_penalty: fd_step must be positive");
  const std::size_t batch = x_hat.dim(0), per = x_hat.numel() / batch;
  Graph g;
  Var in = g.input("x", x_hat);
  Var root = g.sum(discriminator_graph(g, model, in, stage, alpha));
  g.forward(root);
  g.backward(root);
  const Tensor gx = g.grad(in);

  GradientPenalty out;
  out.norms.resize(batch);
  // d penalty / d x, the direction along which weight gradients are differenced.
  Tensor direction(x_hat.shape(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    double sq = 0.0;
    for (std::size_t i = 0; i < per; ++i) sq += gx[b * per + i] * gx[b * per + i];
    const double n = std::sqrt(sq);
    out.norms[b] = n;
    out.value += (n - 1.0) * (n - 1.0);
    if (n > 0.0) {
      const double c = 2.0 * (n - 1.0) / (static_cast<double>(batch) * n);
      for (std::size_t i = 0; i < per; ++i) direction[b * per + i] = c * gx[b * per + i];
    }
  }
  out.value /= static_cast<double>(batch);

  double largest = 0.0;
  for (double v : direction.data()) largest = std::max(largest, std::abs(v));
  if (largest == 0.0) {
    for (const auto& p : model.params.values()) out.param_grads.emplace_back(p.shape(), 0.0);
    return out;
  }
  // The activation pattern at x_hat is held fixed so the differenced
  // gradients are smooth along the direction.
  const double t = fd_step / largest;
  g.freeze_activations(true);
  g.bind("x", x_hat + t * direction);
  g.forward(root);
  g.backward(root);
  auto plus = weight_grads(g, model.params);
  g.bind("x", x_hat - t * direction);
  g.forward(root);
  g.backward(root);
  auto minus = weight_grads(g, model.params);
  for (std::size_t i = 0; i < plus.size(); ++i) out.param_grads.push_back((1.0 / (2.0 * t)) * (plus[i] - minus[i]));
  return out;
}

void TrainConfig::validate() const {
  if (images_per_phase == 0) throw std::invalid_argument("images_per_phase must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(gp_weight >= 0.0) || !(drift_weight >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
  for (const auto* a : {&generator_adam, &discriminator_adam}) {
    if (!(a->learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  }
}

Tensor downsample_image(const Tensor& image, std::size_t levels) {
  if (image.ndim() != 2) throw ShapeError("downsample_image expects a 2D image, got " + shape_str(image.shape()));
  Tensor cur = image;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t h = cur.dim(0), w = cur.dim(1);
    if (h % 2 || w % 2) throw ShapeError("downsample_image: odd size " + shape_str(cur.shape()));
    Tensor next({h / 2, w / 2});
    for (std::size_t r = 0; r < h / 2; ++r) {
      for (std::size_t c = 0; c < w / 2; ++c) {
        next[r * (w / 2) + c] = 0.25 * (cur.at(2 * r, 2 * c) + cur.at(2 * r, 2 * c + 1) + cur.at(2 * r + 1, 2 * c) +
                                        cur.at(2 * r + 1, 2 * c + 1));
      }
    }
    cur = std::move(next);
  }
  return cur;
}

Tensor upsample_image(const Tensor& image, std::size_t levels) {
  if (image.ndim() != 2) throw ShapeError("upsample_image expects a 2D image, got " + shape_str(image.shape()));
  Tensor cur = image;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t h = cur.dim(0), w = cur.dim(1);
    Tensor next({2 * h, 2 * w});
    for (std::size_t r = 0; r < 2 * h; ++r) {
      for (std::size_t c = 0; c < 2 * w; ++c) next[r * 2 * w + c] = cur.at(r / 2, c / 2);
    }
    cur = std::move(next);
  }
  return cur;
}

namespace {

std::string describe(const char* what, const TrainLogRecord& rec) {
  std::ostringstream os;
  os << "non-finite " << what << " at step " << rec.step << " (stage " << rec.stage << ", alpha " << rec.alpha
     << ", loss_g " << rec.loss_g << ", loss_d " << rec.loss_d << ")";
  return os.str();
}

}  // namespace

std::vector<TrainLogRecord> train_progressive(GeneratorModel& generator, DiscriminatorModel& discriminator,
                                              const std::vector<Tensor>& dataset, const TrainConfig& config,
                                              const TrainCallbacks& callbacks) {
  config.validate();
  const auto& arch = generator.arch;
  arch.validate();
  if (discriminator.arch.final_resolution != arch.final_resolution) {
    throw std::invalid_argument("generator and discriminator resolutions differ");
  }
  if (dataset.empty()) throw std::invalid_argument("training set is empty");
  const std::size_t n = arch.final_resolution;
  for (const auto& img : dataset) {
    if (img.shape() != Shape{n, n}) {
      throw ShapeError("training image has shape " + shape_str(img.shape()) + ", expected " + shape_str({n, n}));
    }
  }
  const std::size_t stages = arch.stages();
  const std::size_t last = config.last_stage.value_or(stages - 1);
  if (last >= stages) throw std::invalid_argument("last_stage exceeds the number of stages");

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  const std::size_t batch = config.batch_size, k = arch.latent_dim;
  const std::size_t steps_per_phase = (config.images_per_phase + batch - 1) / batch;

  auto latents = [&] {
    Tensor z({batch, k});
    for (auto& v : z.data()) v = normal(rng);
    return z;
  };

  std::vector<TrainLogRecord> log;
  std::size_t step = 0;
  for (std::size_t stage = 0; stage <= last; ++stage) {
    const std::size_t r = arch.resolution(stage);
    const std::size_t levels = stages - 1 - stage;
    std::vector<Tensor> reals, coarse;
    reals.reserve(dataset.size());
    for (const auto& img : dataset) {
      reals.push_back(downsample_image(img, levels));
      if (stage > 0) coarse.push_back(upsample_image(downsample_image(reals.back(), 1), 1));
    }

    AdamState g_opt{config.generator_adam}, d_opt{config.discriminator_adam};
    const std::size_t phases = stage == 0 ? 1 : 2;
    for (std::size_t phase = 0; phase < phases; ++phase) {
      const bool fading = stage > 0 && phase == 0;
      for (std::size_t i = 0; i < steps_per_phase; ++i, ++step) {
        double alpha = 1.0;
        if (fading) alpha = steps_per_phase > 1 ? static_cast<double>(i) / static_cast<double>(steps_per_phase - 1) : 1.0;

        Tensor real({batch, 1, r, r});
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t idx = pick(rng);
          for (std::size_t p = 0; p < r * r; ++p) {
            double v = reals[idx][p];
            if (fading && alpha < 1.0) v = (1.0 - alpha) * coarse[idx][p] + alpha * v;
            real[b * r * r + p] = v;
          }
        }
        const Tensor fake = generate(generator, latents(), stage, alpha);

        // Discriminator update.
        Graph gd;
        Var s_real = discriminator_graph(gd, discriminator, gd.constant(real), stage, alpha);
        Var s_fake = discriminator_graph(gd, discriminator, gd.constant(fake), stage, alpha);
        Var wloss = gd.add(gd.add(gd.mean(s_fake), gd.scale(gd.mean(s_real), -1.0)),
                           gd.scale(gd.mean(gd.square(s_real)), config.drift_weight));
        const double wgan_d = gd.forward(wloss).item();
        gd.backward(wloss);
        auto d_grads = weight_grads(gd, discriminator.params);

        Tensor mixed(real.shape());
        for (std::size_t b = 0; b < batch; ++b) {
          const double e = uniform(rng);
          for (std::size_t p = 0; p < r * r; ++p) {
            mixed[b * r * r + p] = e * real[b * r * r + p] + (1.0 - e) * fake[b * r * r + p];
          }
        }
        double penalty = 0.0;
        if (config.gp_weight > 0.0) {
          auto gp = gradient_penalty(discriminator, mixed, stage, alpha);
          penalty = gp.value;
          for (std::size_t j = 0; j < d_grads.size(); ++j) d_grads[j] = d_grads[j] + config.gp_weight * gp.param_grads[j];
        }

        TrainLogRecord rec{step, stage, alpha, 0.0, wgan_d + config.gp_weight * penalty, fading};
        if (!std::isfinite(rec.loss_d)) throw TrainingError(describe("discriminator loss", rec));
        adam_step(discriminator.params.values(), d_grads, d_opt);

        // Generator update against the refreshed discriminator.
        Graph gg;
        Var fake_img = generator_graph(gg, generator, gg.constant(latents()), stage, alpha);
        Var gloss = gg.scale(gg.mean(discriminator_graph(gg, discriminator, fake_img, stage, alpha, Weights::frozen)), -1.0);
        rec.loss_g = gg.forward(gloss).item();
        if (!std::isfinite(rec.loss_g)) throw TrainingError(describe("generator loss", rec));
        gg.backward(gloss);
        adam_step(generator.params.values(), weight_grads(gg, generator.params), g_opt);

        generator.current_stage = discriminator.current_stage = stage;
        generator.alpha = discriminator.alpha = alpha;
        log.push_back(rec);
        if (callbacks.on_step) callbacks.on_step(rec, generator);
      }
    }
    if (callbacks.on_stage_end) callbacks.on_stage_end(stage, generator, discriminator);
  }
  return log;
}

}  // namespace gpr
