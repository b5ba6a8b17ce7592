#include "gpr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gpr {

namespace {

void check_peak(double peak) {
  if (!(peak > 0.0)) throw std::invalid_argument("peak must be positive");
}

}  // namespace

double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
  check_peak(peak);
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

double ssim(const Tensor& a, const Tensor& b, double peak) {
  require_same_shape(a, b, "ssim");
  check_peak(peak);
  if (a.ndim() != 2) throw ShapeError("ssim expects 2D images, got " + shape_str(a.shape()));
  const std::size_t h = a.dim(0), w = a.dim(1);
  const std::size_t win = std::min({kSsimWindow, h, w});
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const double count = static_cast<double>(win * win);
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t i = 0; i + win <= h; ++i) {
    for (std::size_t j = 0; j + win <= w; ++j) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t y = i; y < i + win; ++y)
        for (std::size_t x = j; x < j + win; ++x) {
          const double va = a.at(y, x), vb = b.at(y, x);
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      const double ma = sa / count, mb = sb / count;
      const double va = saa / count - ma * ma;
      const double vb = sbb / count - mb * mb;
      const double cov = sab / count - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

Tensor error_map(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "error_map");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = std::abs(a[i] - b[i]);
  return out;
}

MetricsRecord evaluate(const Tensor& recon, const Tensor& truth, std::optional<double> data_fidelity) {
  double peak = max_value(truth);
  if (!(peak > 0.0)) peak = 1.0;
  MetricsRecord r;
  r.mse = mse(recon, truth);
  r.psnr = psnr(recon, truth, peak);
  r.ssim = ssim(recon, truth, peak);
  r.data_fidelity = data_fidelity;
  return r;
}

}  // namespace gpr
