#include "gpr/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace gpr {

void validate(const PhantomSpec& spec) {
  if (spec.size == 0) throw std::invalid_argument("phantom size must be positive");
  if (spec.min_ellipses > spec.max_ellipses) throw std::invalid_argument("min_ellipses > max_ellipses");
  if (spec.min_intensity > spec.max_intensity) throw std::invalid_argument("min_intensity > max_intensity");
  if (!(spec.min_axis > 0.0) || spec.min_axis > spec.max_axis) throw std::invalid_argument("invalid ellipse axis range");
  if (spec.max_center < 0.0 || spec.max_rotation < 0.0) throw std::invalid_argument("negative center or rotation range");
  if (spec.phase_order && *spec.phase_order < 0) throw std::invalid_argument("phase order must be >= 0");
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
}

Tensor draw_phantom(const PhantomSpec& spec, std::mt19937_64& rng) {
  const std::size_t n = spec.size;
  Tensor img({n, n});
  const auto count = std::uniform_int_distribution<std::size_t>(spec.min_ellipses, spec.max_ellipses)(rng);
  for (std::size_t e = 0; e < count; ++e) {
    const double cx = uniform(rng, -spec.max_center, spec.max_center);
    const double cy = uniform(rng, -spec.max_center, spec.max_center);
    const double a = uniform(rng, spec.min_axis, spec.max_axis);
    const double b = uniform(rng, spec.min_axis, spec.max_axis);
    const double rot = uniform(rng, 0.0, spec.max_rotation);
    const double value = uniform(rng, spec.min_intensity, spec.max_intensity);
    const double c = std::cos(rot), s = std::sin(rot);
    for (std::size_t i = 0; i < n; ++i) {
      const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2.0 - 1.0 - cy;
      for (std::size_t j = 0; j < n; ++j) {
        const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(n) * 2.0 - 1.0 - cx;
        const double u = (c * x + s * y) / a;
        const double v = (-s * x + c * y) / b;
        if (u * u + v * v <= 1.0) img.at(i, j) += value;
      }
    }
  }
  for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace

Tensor smooth_phase_map(std::size_t n, int order, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = std::numbers::pi / static_cast<double>(order + 1);
  std::vector<std::pair<std::pair<int, int>, double>> terms;
  for (int p = 0; p <= order; ++p)
    for (int q = 0; p + q <= order; ++q) terms.push_back({{p, q}, uniform(rng, -bound, bound)});
  Tensor phase({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
      double acc = 0.0;
      for (const auto& [pq, coef] : terms) acc += coef * std::pow(x, pq.first) * std::pow(y, pq.second);
      phase.at(i, j) = acc;
    }
  }
  return phase;
}

PhantomDataset gen_phantom_dataset(const PhantomSpec& spec, std::size_t count) {
  validate(spec);
  if (count == 0) throw std::invalid_argument("phantom count must be >= 1");
  PhantomDataset out;
  std::mt19937_64 rng(spec.seed);
  for (std::size_t k = 0; k < count; ++k) {
    out.images.push_back(draw_phantom(spec, rng));
    if (spec.phase_order) out.phases.push_back(smooth_phase_map(spec.size, *spec.phase_order, rng()));
  }
  return out;
}

Tensor to_gan_range(const Tensor& image) {
  Tensor out = image;
  for (auto& v : out.data()) v = 2.0 * v - 1.0;
  return out;
}

Tensor from_gan_range(const Tensor& image) {
  Tensor out = image;
  for (auto& v : out.data()) v = 0.5 * (v + 1.0);
  return out;
}

Tensor rss_combine(const std::vector<ComplexImage>& coils) {
  if (coils.empty()) throw std::invalid_argument("rss_combine needs at least one coil image");
  Tensor out(coils.front().real.shape(), 0.0);
  for (const auto& coil : coils) {
    require_same_shape(out, coil.real, "rss_combine");
    require_same_shape(out, coil.imag, "rss_combine");
  }
  // Terms are summed in sorted order so the result does not depend on coil order.
  std::vector<double> terms(coils.size());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    for (std::size_t c = 0; c < coils.size(); ++c) {
      terms[c] = coils[c].real[i] * coils[c].real[i] + coils[c].imag[i] * coils[c].imag[i];
    }
    std::sort(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) acc += t;
    out[i] = std::sqrt(acc);
  }
  return out;
}

std::vector<Tensor> normalize_volume(const std::vector<Tensor>& slices) {
  if (slices.empty()) throw std::invalid_argument("normalize_volume needs at least one slice");
  double peak = -std::numeric_limits<double>::infinity();
  for (const auto& s : slices) peak = std::max(peak, max_value(s));
  if (!(peak > 0.0)) throw std::invalid_argument("volume maximum is not positive (all-zero volume?)");
  std::vector<Tensor> out;
  out.reserve(slices.size());
  for (const auto& s : slices) {
    Tensor t = s;
    for (auto& v : t.data()) v /= peak;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace gpr
