#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "gpr/imaging.hpp"
#include "gpr/tensor.hpp"

namespace gpr {

/// Random superimposed-ellipse phantoms. Geometry is expressed on the
/// [-1, 1]^2 field of view; intensities add and are clipped to [0, 1].
struct PhantomSpec {
  std::size_t size = 32;
  std::size_t min_ellipses = 2;
  std::size_t max_ellipses = 6;
  double min_intensity = 0.1;
  double max_intensity = 0.6;
  double min_axis = 0.1;
  double max_axis = 0.6;
  double max_center = 0.6;
  double max_rotation = 3.141592653589793;
  /// Total degree of the smooth polynomial phase map; absent means no phase.
  std::optional<int> phase_order;
  std::uint64_t seed = 0;
};

struct PhantomDataset {
  std::vector<Tensor> images;  // N x N in [0, 1]
  std::vector<Tensor> phases;  // N x N radians, empty without phase_order
};

void validate(const PhantomSpec& spec);
PhantomDataset gen_phantom_dataset(const PhantomSpec& spec, std::size_t count);

/// Smooth phase sum_{i+j<=order} c_ij x^i y^j on [-1,1]^2, |c_ij| <= pi/(order+1).
Tensor smooth_phase_map(std::size_t n, int order, std::uint64_t seed);

/// [0,1] <-> [-1,1], the generator's output range.
Tensor to_gan_range(const Tensor& image);
Tensor from_gan_range(const Tensor& image);

/// Per-pixel sqrt(sum_c |x_c|^2).
Tensor rss_combine(const std::vector<ComplexImage>& coils);

/// Divides every slice by the single maximum over the whole volume.
std::vector<Tensor> normalize_volume(const std::vector<Tensor>& slices);

}  // namespace gpr
