#pragma once

#include <optional>

#include "gpr/tensor.hpp"

namespace gpr {

inline constexpr std::size_t kSsimWindow = 7;

double mse(const Tensor& a, const Tensor& b);
/// 10 log10(peak^2 / mse); +infinity when the images are identical.
double psnr(const Tensor& a, const Tensor& b, double peak);
/// Mean SSIM over all 7x7 windows fully inside the image (uniform weights,
/// population statistics). Window shrinks to the image size below 7x7.
double ssim(const Tensor& a, const Tensor& b, double peak);
Tensor error_map(const Tensor& a, const Tensor& b);

struct MetricsRecord {
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 1.0;
  std::optional<double> data_fidelity;
};

/// Metrics of a reconstruction against ground truth, with the peak taken as
/// the ground-truth maximum (1 if that is not positive).
MetricsRecord evaluate(const Tensor& recon, const Tensor& truth, std::optional<double> data_fidelity = std::nullopt);

}  // namespace gpr
