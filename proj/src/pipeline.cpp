#include "gpr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "gpr/io.hpp"
#include "gpr/metrics.hpp"

namespace gpr {
namespace fs = std::filesystem;

namespace {

const std::set<std::string> kGridMethods{"pls-tv", "iagan-tv"};

Json recon_defaults(const std::string& method) {
  Json r{{"iterations", 1000},
         {"adapt_iterations", 2000},
         {"image_learning_rate", 1e-2},
         {"latent_learning_rate", 1e-2},
         {"weight_learning_rate", 1e-4},
         {"lambda", 0.0},
         {"tv_epsilon", 1e-6},
         {"restarts", 3},
         {"seed", 0}};
  if (method == "pls-tv") r["lambda"] = 1e-2;
  if (method == "iagan-tv") r["lambda"] = 1e-3;
  return r;
}

std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

bool is_count(const Json& v) { return v.is_number_integer() && v.get<std::int64_t>() >= 0; }

// Keys whose default is null and the JSON types they accept otherwise.
bool nullable_accepts(const std::string& path, const Json& v) {
  if (path == "dataset.phase_order") return v.is_number_integer();
  if (path == "gan.last_stage") return is_count(v);
  if (path == "target.file") return v.is_string();
  return false;
}

// Overlays user onto defaults in place, rejecting unknown keys and type mismatches.
void overlay(Json& base, const Json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("'" + (path.empty() ? "<root>" : path) + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = join_path(path, key);
    if (!base.contains(key)) throw ConfigError("unknown key '" + here + "'");
    Json& slot = base[key];
    if (slot.is_object()) {
      overlay(slot, value, here);
    } else if (slot.is_null()) {
      if (!value.is_null() && !nullable_accepts(here, value)) throw ConfigError("'" + here + "' has the wrong type");
      slot = value;
    } else if (slot.is_array()) {
      if (!value.is_array()) throw ConfigError("'" + here + "' must be an array");
      slot = value;
    } else if (slot.is_number_float()) {
      if (!value.is_number()) throw ConfigError("'" + here + "' must be a number");
      slot = value.get<double>();
    } else if (slot.is_number_unsigned() || slot.is_number_integer()) {
      if (!is_count(value)) throw ConfigError("'" + here + "' must be a non-negative integer");
      slot = value;
    } else if (slot.is_string()) {
      if (!value.is_string()) throw ConfigError("'" + here + "' must be a string");
      slot = value;
    } else if (slot.is_boolean()) {
      if (!value.is_boolean()) throw ConfigError("'" + here + "' must be a boolean");
      slot = value;
    }
  }
}

ReconConfig to_recon(const Json& j) {
  ReconConfig r;
  r.iterations = j.at("iterations").get<std::size_t>();
  r.adapt_iterations = j.at("adapt_iterations").get<std::size_t>();
  r.image_learning_rate = j.at("image_learning_rate").get<double>();
  r.latent_learning_rate = j.at("latent_learning_rate").get<double>();
  r.weight_learning_rate = j.at("weight_learning_rate").get<double>();
  r.lambda = j.at("lambda").get<double>();
  r.tv_epsilon = j.at("tv_epsilon").get<double>();
  r.restarts = j.at("restarts").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

Json arch_json(const GanArchitecture& a) {
  return {{"latent_dim", a.latent_dim},
          {"final_resolution", a.final_resolution},
          {"base_width", a.base_width},
          {"width_cap", a.width_cap},
          {"min_width", a.min_width}};
}

// JSON cannot hold infinities; identical images give "inf".
Json number_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? Json("inf") : Json("-inf");
  return v;
}

std::string hash_json(const Json& j) { return sha256_hex(j.dump()); }

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

Tensor stack(const std::vector<Tensor>& images) {
  const std::size_t n = images.front().dim(0);
  Tensor out({images.size(), n, n});
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::copy(images[i].vec().begin(), images[i].vec().end(), out.data().begin() + i * n * n);
  }
  return out;
}

Tensor slice(const Tensor& t, std::size_t index) {
  const std::size_t n = t.dim(1);
  std::vector<double> v(t.vec().begin() + index * n * n, t.vec().begin() + (index + 1) * n * n);
  return Tensor({n, n}, std::move(v));
}

}  // namespace

bool is_generative(const std::string& method) { return method == "csgm" || method == "iagan" || method == "iagan-tv"; }

Json default_config() {
  const PhantomSpec p;
  const GanArchitecture a;
  const TrainConfig t;
  Json recon = Json::object();
  for (const auto& m : kMethods) {
    if (m != "zf") recon[m] = recon_defaults(m);
  }
  return {
      {"output_dir", "gpr_out"},
      {"dataset",
       {{"size", p.size},
        {"count", 500},
        {"min_ellipses", p.min_ellipses},
        {"max_ellipses", p.max_ellipses},
        {"min_intensity", p.min_intensity},
        {"max_intensity", p.max_intensity},
        {"min_axis", p.min_axis},
        {"max_axis", p.max_axis},
        {"max_center", p.max_center},
        {"max_rotation", p.max_rotation},
        {"phase_order", nullptr},
        {"seed", p.seed}}},
      {"target", {{"seed", 1000}, {"file", nullptr}}},
      {"gan",
       {{"latent_dim", a.latent_dim},
        {"base_width", a.base_width},
        {"width_cap", a.width_cap},
        {"min_width", a.min_width},
        {"images_per_phase", t.images_per_phase},
        {"batch_size", t.batch_size},
        {"generator_lr", t.generator_adam.learning_rate},
        {"discriminator_lr", t.discriminator_adam.learning_rate},
        {"beta1", t.generator_adam.beta1},
        {"beta2", t.generator_adam.beta2},
        {"adam_epsilon", t.generator_adam.epsilon},
        {"gp_weight", t.gp_weight},
        {"drift_weight", t.drift_weight},
        {"init_seed", 1},
        {"seed", t.seed},
        {"last_stage", nullptr}}},
      {"mask", {{"acceleration", 4.0}, {"calibration", 8}, {"seed", 0}}},
      {"noise", {{"sigma", 0.01}, {"seed", 0}}},
      {"methods", kMethods},
      {"recon", recon},
      {"lambda_grid", {{"pls-tv", {1e-3, 3e-3, 1e-2, 3e-2}}, {"iagan-tv", {1e-4, 3e-4, 1e-3, 3e-3}}}},
  };
}

ExperimentConfig parse_config(const Json& doc) {
  Json full = default_config();
  overlay(full, doc, "");

  ExperimentConfig c;
  c.resolved = full;
  try {
    c.output_dir = full["output_dir"].get<std::string>();
    if (c.output_dir.empty()) throw ConfigError("'output_dir' must not be empty");

    const Json& d = full["dataset"];
    c.phantom.size = d["size"].get<std::size_t>();
    c.phantom.min_ellipses = d["min_ellipses"].get<std::size_t>();
    c.phantom.max_ellipses = d["max_ellipses"].get<std::size_t>();
    c.phantom.min_intensity = d["min_intensity"].get<double>();
    c.phantom.max_intensity = d["max_intensity"].get<double>();
    c.phantom.min_axis = d["min_axis"].get<double>();
    c.phantom.max_axis = d["max_axis"].get<double>();
    c.phantom.max_center = d["max_center"].get<double>();
    c.phantom.max_rotation = d["max_rotation"].get<double>();
    if (!d["phase_order"].is_null()) c.phantom.phase_order = d["phase_order"].get<int>();
    c.phantom.seed = d["seed"].get<std::uint64_t>();
    c.train_count = d["count"].get<std::size_t>();
    validate(c.phantom);
    if (c.train_count == 0) throw ConfigError("'dataset.count' must be >= 1");

    c.target_seed = full["target"]["seed"].get<std::uint64_t>();
    if (!full["target"]["file"].is_null()) {
      c.target_file = full["target"]["file"].get<std::string>();
      if (!fs::is_regular_file(*c.target_file)) throw ConfigError("target file " + c.target_file->string() + " not found");
    }

    const Json& g = full["gan"];
    c.architecture.latent_dim = g["latent_dim"].get<std::size_t>();
    c.architecture.final_resolution = c.phantom.size;
    c.architecture.base_width = g["base_width"].get<std::size_t>();
    c.architecture.width_cap = g["width_cap"].get<std::size_t>();
    c.architecture.min_width = g["min_width"].get<std::size_t>();
    c.training.images_per_phase = g["images_per_phase"].get<std::size_t>();
    c.training.batch_size = g["batch_size"].get<std::size_t>();
    const double b1 = g["beta1"].get<double>(), b2 = g["beta2"].get<double>(), eps = g["adam_epsilon"].get<double>();
    c.training.generator_adam = {g["generator_lr"].get<double>(), b1, b2, eps};
    c.training.discriminator_adam = {g["discriminator_lr"].get<double>(), b1, b2, eps};
    c.training.gp_weight = g["gp_weight"].get<double>();
    c.training.drift_weight = g["drift_weight"].get<double>();
    c.training.seed = g["seed"].get<std::uint64_t>();
    if (!g["last_stage"].is_null()) c.training.last_stage = g["last_stage"].get<std::size_t>();
    c.init_seed = g["init_seed"].get<std::uint64_t>();

    c.acceleration = full["mask"]["acceleration"].get<double>();
    c.calibration = full["mask"]["calibration"].get<std::size_t>();
    c.mask_seed = full["mask"]["seed"].get<std::uint64_t>();
    if (!(c.acceleration >= 1.0)) throw ConfigError("'mask.acceleration' must be >= 1");
    if (c.calibration > c.phantom.size) throw ConfigError("'mask.calibration' exceeds the image size");

    c.noise_sigma = full["noise"]["sigma"].get<double>();
    c.noise_seed = full["noise"]["seed"].get<std::uint64_t>();
    if (!(c.noise_sigma >= 0.0)) throw ConfigError("'noise.sigma' must be >= 0");

    std::set<std::string> seen;
    for (const auto& m : full["methods"]) {
      if (!m.is_string()) throw ConfigError("'methods' must list strings");
      const auto name = m.get<std::string>();
      if (std::find(kMethods.begin(), kMethods.end(), name) == kMethods.end()) {
        throw ConfigError("unknown method '" + name + "'");
      }
      if (!seen.insert(name).second) throw ConfigError("method '" + name + "' listed twice");
      c.methods.push_back(name);
    }
    if (c.methods.empty()) throw ConfigError("'methods' must not be empty");

    for (const auto& [m, table] : full["recon"].items()) {
      c.recon[m] = to_recon(table);
      c.recon[m].validate();
    }
    for (const auto& [m, grid] : full["lambda_grid"].items()) {
      if (!kGridMethods.count(m)) throw ConfigError("unknown key 'lambda_grid." + m + "'");
      if (!grid.is_array()) throw ConfigError("'lambda_grid." + m + "' must be an array");
      std::vector<double> values;
      for (const auto& v : grid) {
        if (!v.is_number() || !(v.get<double>() >= 0.0)) {
          throw ConfigError("'lambda_grid." + m + "' entries must be non-negative numbers");
        }
        values.push_back(v.get<double>());
      }
      c.lambda_grid[m] = values;
    }

    if (std::any_of(c.methods.begin(), c.methods.end(), is_generative)) {
      c.architecture.validate();
      c.training.validate();
      if (c.training.last_stage && *c.training.last_stage + 1 != c.architecture.stages()) {
        throw ConfigError("generative methods need a generator trained to the final stage; 'gan.last_stage' must be " +
                          std::to_string(c.architecture.stages() - 1) + " or null");
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* node = &doc;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override '" + key + "' goes through a non-object");
    node = &(*node)[path[i]];
    if (node->is_null()) *node = Json::object();
  }
  if (!node->is_object()) throw ConfigError("override '" + key + "' goes through a non-object");
  (*node)[path.back()] = value;
}

ExperimentConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
  Json doc = Json::object();
  if (path) {
    std::string text;
    try {
      text = read_text(*path);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    doc = Json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config file " + path->string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return parse_config(doc);
}

GeneratorModel load_generator_checkpoint(const fs::path& archive) {
  fs::path sidecar = archive;
  sidecar.replace_extension(".json");
  const Json meta = Json::parse(read_text(sidecar));
  GeneratorModel g;
  const Json& a = meta.at("architecture");
  g.arch.latent_dim = a.at("latent_dim").get<std::size_t>();
  g.arch.final_resolution = a.at("final_resolution").get<std::size_t>();
  g.arch.base_width = a.at("base_width").get<std::size_t>();
  g.arch.width_cap = a.at("width_cap").get<std::size_t>();
  g.arch.min_width = a.at("min_width").get<std::size_t>();
  g.current_stage = meta.at("stage").get<std::size_t>();
  g.alpha = 1.0;
  for (auto& [name, value] : load_archive(archive)) {
    if (name.rfind("g.", 0) == 0) g.params.add(name, std::move(value));
  }
  return g;
}

Pipeline::Pipeline(ExperimentConfig config, PipelineOptions options)
    : config_(std::move(config)), options_(std::move(options)) {}

void Pipeline::log(const std::string& line) const {
  if (options_.log) options_.log(line);
}

fs::path Pipeline::checkpoint_path(std::size_t stage) const {
  return path("gan/checkpoint_stage" + std::to_string(stage) + ".gprt");
}

fs::path Pipeline::mask_path() const {
  return path("masks/mask_R" + format_number(config_.acceleration) + "_s" + std::to_string(config_.mask_seed) +
              ".gprt");
}

std::string Pipeline::stage_key(const std::string& stage) const {
  const Json& r = config_.resolved;
  if (stage == "data") {
    Json k{{"dataset", r["dataset"]}, {"target", r["target"]}};
    if (config_.target_file) k["target_sha256"] = sha256_file(*config_.target_file);
    return hash_json(k);
  }
  if (stage == "gan") return hash_json({{"data", stage_key("data")}, {"gan", r["gan"]}});
  if (stage == "mask") return hash_json({{"size", r["dataset"]["size"]}, {"mask", r["mask"]}});
  if (stage == "simulate") {
    return hash_json({{"data", stage_key("data")}, {"mask", stage_key("mask")}, {"noise", r["noise"]}});
  }
  if (stage.rfind("recon/", 0) == 0) {
    const std::string m = stage.substr(6);
    Json k{{"simulate", stage_key("simulate")}, {"method", m}};
    if (is_generative(m)) k["gan"] = stage_key("gan");
    if (r["recon"].contains(m)) k["recon"] = r["recon"][m];
    if (r["lambda_grid"].contains(m)) k["grid"] = r["lambda_grid"][m];
    return hash_json(k);
  }
  if (stage == "evaluate") {
    Json k{{"methods", r["methods"]}};
    for (const auto& m : config_.methods) k[m] = stage_key("recon/" + m);
    return hash_json(k);
  }
  throw std::logic_error("no stage named " + stage);
}

bool Pipeline::up_to_date(const std::string& stage, const std::string& key, const std::vector<fs::path>& outputs) {
  if (completed_.count(stage)) return true;
  if (options_.force) return false;
  const fs::path stamp_file = path(".stamps/" + stage + ".key");
  if (!fs::exists(stamp_file) || read_text(stamp_file) != key) return false;
  for (const auto& p : outputs) {
    if (!fs::exists(p)) return false;
  }
  log("[" + stage + "] up to date, skipping");
  return true;
}

void Pipeline::stamp(const std::string& stage, const std::string& key) {
  const fs::path stamp_file = path(".stamps/" + stage + ".key");
  fs::create_directories(stamp_file.parent_path());
  write_text(stamp_file, key);
  completed_.insert(stage);
}

template <class F>
void Pipeline::guarded(const std::string& stage, F&& body) {
  try {
    body();
  } catch (const ConfigError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

void Pipeline::gen_data() {
  const std::string key = stage_key("data");
  if (up_to_date("data", key, {path("data/train.gprt"), path("data/target.gprt"), path("data/manifest.json")})) return;
  guarded("gen-data", [&] {
    fs::create_directories(path("data"));
    log("[gen-data] drawing " + std::to_string(config_.train_count) + " phantoms");
    const PhantomDataset train = gen_phantom_dataset(config_.phantom, config_.train_count);
    save_tensor(path("data/train.gprt"), stack(train.images));

    std::vector<std::string> files{"train.gprt", "target.gprt"};
    const std::size_t n = config_.phantom.size;
    fs::remove(path("data/target_phase.gprt"));
    if (config_.target_file) {
      Tensor truth = load_tensor(*config_.target_file);
      if (truth.ndim() == 3 && truth.dim(0) == 1) truth = truth.reshaped({truth.dim(1), truth.dim(2)});
      if (truth.shape() != Shape{n, n}) {
        throw ShapeError("target file must hold a " + std::to_string(n) + "x" + std::to_string(n) + " image");
      }
      save_tensor(path("data/target.gprt"), truth);
    } else {
      PhantomSpec held_out = config_.phantom;
      held_out.seed = config_.target_seed;
      const PhantomDataset target = gen_phantom_dataset(held_out, 1);
      save_tensor(path("data/target.gprt"), target.images.front());
      if (!target.phases.empty()) {
        save_tensor(path("data/target_phase.gprt"), target.phases.front());
        files.push_back("target_phase.gprt");
      }
    }
    const Json manifest{{"count", config_.train_count},
                        {"seed", config_.phantom.seed},
                        {"spec", config_.resolved["dataset"]},
                        {"target", config_.resolved["target"]},
                        {"files", files}};
    write_text(path("data/manifest.json"), manifest.dump(2) + "\n");
  });
  stamp("data", key);
}

void Pipeline::train_gan() {
  gen_data();
  const std::size_t last = config_.training.last_stage.value_or(config_.architecture.stages() - 1);
  const std::string key = stage_key("gan");
  if (up_to_date("gan", key, {checkpoint_path(last), path("gan/train_log.jsonl")})) return;
  guarded("train-gan", [&] {
    config_.architecture.validate();
    fs::create_directories(path("gan"));
    const Tensor stacked = load_tensor(path("data/train.gprt"));
    std::vector<Tensor> images;
    for (std::size_t i = 0; i < stacked.dim(0); ++i) images.push_back(to_gan_range(slice(stacked, i)));

    GeneratorModel G = build_generator(config_.architecture, config_.init_seed);
    DiscriminatorModel D = build_discriminator(config_.architecture, config_.init_seed + 1);
    std::ofstream log_file(path("gan/train_log.jsonl"), std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + path("gan/train_log.jsonl").string());

    TrainCallbacks cb;
    cb.on_step = [&](const TrainLogRecord& rec, const GeneratorModel&) {
      log_file << Json{{"step", rec.step},
                       {"stage", rec.stage},
                       {"alpha", rec.alpha},
                       {"fade_in", rec.fade_in},
                       {"loss_g", rec.loss_g},
                       {"loss_d", rec.loss_d}}
                      .dump()
               << "\n";
      if (rec.step % 100 == 0) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "[train-gan] step %zu stage %zu alpha %.3f loss_g %.4f loss_d %.4f", rec.step,
                      rec.stage, rec.alpha, rec.loss_g, rec.loss_d);
        log(buf);
      }
    };
    cb.on_stage_end = [&](std::size_t stage, const GeneratorModel& g, const DiscriminatorModel& d) {
      NamedTensors entries;
      for (std::size_t i = 0; i < g.params.size(); ++i) entries.emplace_back(g.params.names()[i], g.params.values()[i]);
      for (std::size_t i = 0; i < d.params.size(); ++i) entries.emplace_back(d.params.names()[i], d.params.values()[i]);
      save_archive(checkpoint_path(stage), entries);
      fs::path sidecar = checkpoint_path(stage);
      sidecar.replace_extension(".json");
      const Json meta{{"stage", stage},
                      {"resolution", config_.architecture.resolution(stage)},
                      {"architecture", arch_json(config_.architecture)},
                      {"training", config_.resolved["gan"]}};
      write_text(sidecar, meta.dump(2) + "\n");
      log("[train-gan] wrote " + checkpoint_path(stage).string());
    };
    TrainConfig train = config_.training;
    train.last_stage = last;
    train_progressive(G, D, images, train, cb);
  });
  stamp("gan", key);
}

void Pipeline::make_mask() {
  const std::string key = stage_key("mask");
  fs::path sidecar = mask_path();
  sidecar.replace_extension(".json");
  if (up_to_date("mask", key, {mask_path(), sidecar})) return;
  guarded("make-mask", [&] {
    fs::create_directories(mask_path().parent_path());
    const SamplingMask m = gpr::make_mask(config_.phantom.size, config_.acceleration, config_.calibration, config_.mask_seed);
    save_tensor(mask_path(), m.indicator);
    fs::path png = mask_path();
    export_png(m.indicator, png.replace_extension(".png"));
    const Json meta{{"size", m.size},
                    {"calibration", m.calibration},
                    {"target_acceleration", m.target_acceleration},
                    {"achieved_acceleration", m.achieved_acceleration},
                    {"sampled", m.sampled()},
                    {"seed", m.seed}};
    write_text(sidecar, meta.dump(2) + "\n");
    log("[make-mask] acceleration " + format_number(m.achieved_acceleration) + " with " + std::to_string(m.sampled()) +
        " samples");
  });
  stamp("mask", key);
}

void Pipeline::simulate() {
  gen_data();
  make_mask();
  const std::string key = stage_key("simulate");
  if (up_to_date("simulate", key, {path("kspace/measured.gprt")})) return;
  guarded("simulate", [&] {
    fs::create_directories(path("kspace"));
    const Tensor truth = load_tensor(path("data/target.gprt"));
    std::optional<Tensor> phase;
    if (fs::exists(path("data/target_phase.gprt"))) phase = load_tensor(path("data/target_phase.gprt"));
    const ImagingOperator op(mask_from_indicator(load_tensor(mask_path())), phase);
    const KSpaceData g = add_noise(op.forward(truth), config_.noise_sigma, config_.noise_seed);
    const std::size_t n = g.size();
    Tensor packed({2, n, n});
    std::copy(g.real.vec().begin(), g.real.vec().end(), packed.data().begin());
    std::copy(g.imag.vec().begin(), g.imag.vec().end(), packed.data().begin() + n * n);
    save_tensor(path("kspace/measured.gprt"), packed);
  });
  stamp("simulate", key);
}

GeneratorModel Pipeline::load_generator() const {
  const std::size_t last = config_.training.last_stage.value_or(config_.architecture.stages() - 1);
  return load_generator_checkpoint(checkpoint_path(last));
}

void Pipeline::reconstruct() {
  simulate();
  const bool generative = std::any_of(config_.methods.begin(), config_.methods.end(), is_generative);
  if (generative) train_gan();

  const Tensor truth = load_tensor(path("data/target.gprt"));
  std::optional<Tensor> phase;
  if (fs::exists(path("data/target_phase.gprt"))) phase = load_tensor(path("data/target_phase.gprt"));
  const ImagingOperator op(mask_from_indicator(load_tensor(mask_path())), phase);
  const Tensor packed = load_tensor(path("kspace/measured.gprt"));
  KSpaceData g{slice(packed, 0), slice(packed, 1), op.mask_ptr()};

  std::optional<GeneratorModel> G;
  // Latent searches shared between IAGAN variants with the same search settings.
  std::map<std::string, ReconResult> searches;
  auto latent_search = [&](const ReconConfig& rc) -> const ReconResult& {
    const std::string k = Json{rc.iterations, rc.latent_learning_rate, rc.restarts, rc.seed}.dump();
    auto it = searches.find(k);
    if (it == searches.end()) it = searches.emplace(k, csgm(g, op, *G, rc)).first;
    return it->second;
  };

  for (const auto& m : config_.methods) {
    const std::string stage = "recon/" + m;
    const fs::path dir = path("recon/" + m);
    const std::string key = stage_key(stage);
    if (up_to_date(stage, key, {dir / "image.gprt", dir / "metrics.json"})) continue;
    guarded("reconstruct/" + m, [&] {
      if (is_generative(m) && !G) G = load_generator();
      fs::create_directories(dir);
      log("[reconstruct] " + m);
      const ReconConfig rc = m == "zf" ? ReconConfig{} : config_.recon.at(m);
      auto solve = [&](double lambda) {
        ReconConfig c = rc;
        c.lambda = lambda;
        if (m == "pls-tv") return pls_tv(g, op, c);
        ReconResult r = adapt_generator(g, op, *G, latent_search(c), c);
        r.method = m;
        return r;
      };

      ReconResult result;
      Json search_table;
      const auto grid = config_.lambda_grid.find(m);
      if (m == "zf") {
        result = zero_fill(g, op);
      } else if (m == "csgm") {
        result = latent_search(rc);
      } else if (m == "iagan") {
        result = solve(0.0);
      } else if (grid != config_.lambda_grid.end() && !grid->second.empty()) {
        LambdaSearch s = grid_search_lambda(solve, truth, grid->second);
        result = std::move(s.best);
        search_table = Json::array();
        for (const auto& t : s.table) {
          Json row{{"lambda", t.lambda}};
          row["mse"] = t.mse ? Json(*t.mse) : Json(nullptr);
          if (!t.error.empty()) row["error"] = t.error;
          search_table.push_back(row);
        }
      } else {
        result = solve(rc.lambda);
      }
      result.method = m;
      attach_metrics(result, truth);

      save_tensor(dir / "image.gprt", result.image);
      Json metrics{{"method", m},
                   {"lambda", result.lambda},
                   {"seed", rc.seed},
                   {"iterations", result.iterations},
                   {"final_fidelity", result.final_fidelity},
                   {"mse", result.metrics->mse},
                   {"psnr", number_or_inf(result.metrics->psnr)},
                   {"ssim", result.metrics->ssim}};
      if (!search_table.is_null()) metrics["lambda_search"] = search_table;
      write_text(dir / "metrics.json", metrics.dump(2) + "\n");
    });
    stamp(stage, key);
  }
}

void Pipeline::evaluate() {
  reconstruct();
  const std::string key = stage_key("evaluate");
  if (up_to_date("evaluate", key, {path("report/summary.json")})) return;
  guarded("evaluate", [&] {
    fs::create_directories(path("report"));
    const Tensor truth = load_tensor(path("data/target.gprt"));
    export_png(truth, path("report/truth.png"));

    Json config = config_.resolved;
    config.erase("output_dir");  // the summary describes the experiment, not where it was written
    Json inputs = Json::object();
    auto add_input = [&](const fs::path& p) {
      inputs[fs::relative(p, config_.output_dir).generic_string()] = sha256_file(p);
    };
    add_input(path("data/train.gprt"));
    add_input(path("data/target.gprt"));
    if (fs::exists(path("data/target_phase.gprt"))) add_input(path("data/target_phase.gprt"));
    add_input(mask_path());
    add_input(path("kspace/measured.gprt"));
    if (std::any_of(config_.methods.begin(), config_.methods.end(), is_generative)) {
      add_input(checkpoint_path(config_.training.last_stage.value_or(config_.architecture.stages() - 1)));
    }

    Json results = Json::array();
    for (const auto& m : config_.methods) {
      const fs::path dir = path("recon/" + m);
      const Tensor image = load_tensor(dir / "image.gprt");
      export_png(image, path("report/" + m + "_recon.png"));
      export_png(rescale_unit(error_map(image, truth)), path("report/" + m + "_error.png"));
      results.push_back(Json::parse(read_text(dir / "metrics.json")));
    }
    const Json summary{{"config", config}, {"inputs", inputs}, {"results", results}};
    write_text(path("report/summary.json"), summary.dump(2) + "\n");
    log("[evaluate] wrote " + path("report/summary.json").string());
  });
  stamp("evaluate", key);
}

void Pipeline::run() { evaluate(); }

void Pipeline::sample(std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ConfigError("sample count must be >= 1");
  train_gan();
  guarded("sample", [&] {
    const GeneratorModel G = load_generator();
    const std::size_t k = G.arch.latent_dim;
    fs::create_directories(path("samples"));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Tensor> images;
    for (std::size_t i = 0; i < count; ++i) {
      Tensor z({k});
      for (auto& v : z.data()) v = normal(rng);
      images.push_back(generator_image(G, z));
      export_png(images.back(), path("samples/sample_" + std::to_string(i) + ".png"));
    }
    save_tensor(path("samples/samples.gprt"), stack(images));
  });
}

}  // namespace gpr
