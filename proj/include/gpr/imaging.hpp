#pragma once

// Single-coil Cartesian MR imaging model g = M F (f e^{i phi}) + n with a
// unitary 2D DFT F, a binary k-space sampling mask M and an optional known
// phase map phi. K-space is stored with DC at index (N/2, N/2).

#include <cstdint>
#include <memory>
#include <optional>

#include "gpr/autodiff.hpp"
#include "gpr/tensor.hpp"

namespace gpr {

struct ComplexImage {
  Tensor real;
  Tensor imag;

  ComplexImage() = default;
  ComplexImage(Tensor re, Tensor im);
  static ComplexImage zeros(std::size_t n) { return {Tensor({n, n}), Tensor({n, n})}; }
  std::size_t size() const { return real.dim(0); }
};

struct SamplingMask {
  std::size_t size = 0;
  Tensor indicator;  // N x N, entries 0 or 1, DC at (N/2, N/2)
  std::size_t calibration = 0;
  double target_acceleration = 1.0;
  double achieved_acceleration = 1.0;
  std::uint64_t seed = 0;
  double base_radius = 0.0;

  std::size_t sampled() const;
  bool is_sampled(std::size_t row, std::size_t col) const { return indicator.at(row, col) != 0.0; }
};

struct MaskOptions {
  // Exclusion radius grows as r0 * (1 + radius_growth * |k| / |k|max).
  double radius_growth = 2.0;
  int bisection_steps = 60;
  // Bisection stops once |count - N^2/R| <= tolerance * N^2/R.
  double tolerance = 0.005;
};

/// Thrown when a mask request cannot be met (calibration block alone exceeds
/// the sampling budget).
class InfeasibleMask : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Variable-density Poisson-disc mask by dart throwing with a radius that
/// grows linearly with distance from DC; the base radius is bisected until
/// N^2 / (number of samples) is as close to R as possible.
SamplingMask make_mask(std::size_t n, double acceleration, std::size_t calibration, std::uint64_t seed,
                       const MaskOptions& options = {});
SamplingMask full_mask(std::size_t n);
SamplingMask mask_from_indicator(Tensor indicator);

/// Measured k-space. Unsampled entries are exactly zero.
struct KSpaceData {
  Tensor real;
  Tensor imag;
  std::shared_ptr<const SamplingMask> mask;

  std::size_t size() const { return real.dim(0); }
  double squared_norm() const { return gpr::squared_norm(real) + gpr::squared_norm(imag); }
};

/// Unitary 2D DFT on natural-order data; output in natural order.
ComplexImage dft2(const ComplexImage& x, bool inverse);
/// Move DC from index 0 to index N/2 (and back).
Tensor fftshift(const Tensor& x);
Tensor ifftshift(const Tensor& x);

class ImagingOperator {
 public:
  explicit ImagingOperator(SamplingMask mask, std::optional<Tensor> phase = std::nullopt);
  ImagingOperator(std::shared_ptr<const SamplingMask> mask, std::optional<Tensor> phase = std::nullopt);

  std::size_t size() const noexcept { return mask_->size; }
  const SamplingMask& mask() const noexcept { return *mask_; }
  std::shared_ptr<const SamplingMask> mask_ptr() const noexcept { return mask_; }
  const std::optional<Tensor>& phase() const noexcept { return phase_; }

  KSpaceData forward(const Tensor& image) const;
  KSpaceData forward_complex(const ComplexImage& image) const;
  /// Real part of e^{-i phi} F^H M g: the adjoint of forward() as a real map.
  Tensor adjoint(const KSpaceData& g) const;
  /// e^{-i phi} F^H M g: the adjoint of forward_complex().
  ComplexImage adjoint_complex(const KSpaceData& g) const;

  /// ||g - H f||^2 over real and imaginary parts.
  double fidelity(const Tensor& image, const KSpaceData& g) const;

  /// The operator as a graph node body: (N,N) real -> (2,N,N) real/imag.
  std::shared_ptr<const LinearOperator> as_linear() const;

 private:
  void check_image(const Tensor& t, const char* what) const;
  void check_kspace(const KSpaceData& g) const;

  std::shared_ptr<const SamplingMask> mask_;
  std::optional<Tensor> phase_;
};

/// Adds i.i.d. N(0, sigma^2) to both parts at sampled locations only.
KSpaceData add_noise(const KSpaceData& g, double sigma, std::uint64_t seed);

/// Stacks real and imaginary parts at sampled locations, the layout produced
/// by gather_masked over the (2,N,N) output of as_linear().
Tensor sampled_values(const KSpaceData& g);

}  // namespace gpr
