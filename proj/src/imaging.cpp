#include "gpr/imaging.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <random>

namespace gpr {

namespace {

// FFTW planning is not thread-safe; execution on new arrays is.
class PlanCache {
 public:
  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

  fftw_plan get(std::size_t n, int sign) {
    std::lock_guard lock(mutex_);
    auto key = std::make_pair(n, sign);
    auto it = plans_.find(key);
    if (it != plans_.end()) return it->second;
    fftw_complex* a = fftw_alloc_complex(n * n);
    fftw_complex* b = fftw_alloc_complex(n * n);
    fftw_plan plan = fftw_plan_dft_2d(static_cast<int>(n), static_cast<int>(n), a, b, sign, FFTW_ESTIMATE);
    fftw_free(a);
    fftw_free(b);
    plans_.emplace(key, plan);
    return plan;
  }

 private:
  std::mutex mutex_;
  std::map<std::pair<std::size_t, int>, fftw_plan> plans_;
};

PlanCache& plan_cache() {
  static PlanCache cache;
  return cache;
}

struct FftwBuffer {
  explicit FftwBuffer(std::size_t count) : ptr(fftw_alloc_complex(count)) {}
  ~FftwBuffer() { fftw_free(ptr); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  fftw_complex* ptr;
};

Tensor shift_by(const Tensor& x, std::size_t offset) {
  const std::size_t n = x.dim(0), m = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at((i + offset) % n, (j + offset) % m) = x.at(i, j);
  return out;
}

}  // namespace

ComplexImage::ComplexImage(Tensor re, Tensor im) : real(std::move(re)), imag(std::move(im)) {
  require_same_shape(real, imag, "ComplexImage");
}

ComplexImage dft2(const ComplexImage& x, bool inverse) {
  const std::size_t n = x.size();
  if (x.real.ndim() != 2 || x.real.dim(1) != n) throw ShapeError("dft2 expects a square image, got " + shape_str(x.real.shape()));
  const std::size_t count = n * n;
  FftwBuffer in(count), out(count);
  for (std::size_t i = 0; i < count; ++i) {
    in.ptr[i][0] = x.real[i];
    in.ptr[i][1] = x.imag[i];
  }
  fftw_execute_dft(plan_cache().get(n, inverse ? FFTW_BACKWARD : FFTW_FORWARD), in.ptr, out.ptr);
  const double norm = 1.0 / static_cast<double>(n);
  ComplexImage y = ComplexImage::zeros(n);
  for (std::size_t i = 0; i < count; ++i) {
    y.real[i] = out.ptr[i][0] * norm;
    y.imag[i] = out.ptr[i][1] * norm;
  }
  return y;
}

Tensor fftshift(const Tensor& x) { return shift_by(x, x.dim(0) / 2); }
Tensor ifftshift(const Tensor& x) { return shift_by(x, x.dim(0) - x.dim(0) / 2); }

std::size_t SamplingMask::sampled() const {
  return static_cast<std::size_t>(std::count_if(indicator.data().begin(), indicator.data().end(),
                                                [](double v) { return v != 0.0; }));
}

SamplingMask full_mask(std::size_t n) {
  SamplingMask m;
  m.size = n;
  m.indicator = Tensor({n, n}, 1.0);
  m.calibration = n;
  return m;
}

SamplingMask mask_from_indicator(Tensor indicator) {
  if (indicator.ndim() != 2 || indicator.dim(0) != indicator.dim(1)) {
    throw ShapeError("mask indicator must be square, got " + shape_str(indicator.shape()));
  }
  SamplingMask m;
  m.size = indicator.dim(0);
  for (auto& v : indicator.data()) v = v != 0.0 ? 1.0 : 0.0;
  m.indicator = std::move(indicator);
  const std::size_t count = m.sampled();
  m.achieved_acceleration = count ? static_cast<double>(m.size * m.size) / static_cast<double>(count) : INFINITY;
  m.target_acceleration = m.achieved_acceleration;
  return m;
}

namespace {

class DartThrower {
 public:
  DartThrower(std::size_t n, std::size_t calibration, std::uint64_t seed, double growth)
      : n_(n), growth_(growth), calib_(n * n, 0) {
    const std::size_t c = n / 2;
    const std::size_t lo = c - calibration / 2;
    for (std::size_t i = lo; i < lo + calibration; ++i)
      for (std::size_t j = lo; j < lo + calibration; ++j) calib_[i * n + j] = 1;
    dist_.resize(n * n);
    double dmax = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double di = static_cast<double>(i) - static_cast<double>(c);
        const double dj = static_cast<double>(j) - static_cast<double>(c);
        dist_[i * n + j] = std::sqrt(di * di + dj * dj);
        dmax = std::max(dmax, dist_[i * n + j]);
      }
    for (auto& d : dist_) d = dmax > 0.0 ? d / dmax : 0.0;
    for (std::size_t k = 0; k < n * n; ++k) {
      if (!calib_[k]) order_.push_back(k);
    }
    std::mt19937_64 rng(seed);
    for (std::size_t k = order_.size(); k > 1; --k) {
      std::uniform_int_distribution<std::size_t> pick(0, k - 1);
      std::swap(order_[k - 1], order_[pick(rng)]);
    }
  }

  std::vector<std::uint8_t> throw_darts(double r0) const {
    std::vector<std::uint8_t> occ = calib_;
    const long n = static_cast<long>(n_);
    for (std::size_t k : order_) {
      const double r = r0 * (1.0 + growth_ * dist_[k]);
      const double r2 = r * r;
      const long reach = static_cast<long>(std::ceil(r));
      const long ci = static_cast<long>(k / n_), cj = static_cast<long>(k % n_);
      bool free = true;
      for (long di = -reach; di <= reach && free; ++di) {
        const long i = ci + di;
        if (i < 0 || i >= n) continue;
        for (long dj = -reach; dj <= reach; ++dj) {
          const long j = cj + dj;
          if (j < 0 || j >= n || !occ[i * n + j]) continue;
          if (static_cast<double>(di * di + dj * dj) < r2) {
            free = false;
            break;
          }
        }
      }
      if (free) occ[k] = 1;
    }
    return occ;
  }

 private:
  std::size_t n_;
  double growth_;
  std::vector<std::uint8_t> calib_;
  std::vector<double> dist_;
  std::vector<std::size_t> order_;
};

}  // namespace

SamplingMask make_mask(std::size_t n, double acceleration, std::size_t calibration, std::uint64_t seed,
                       const MaskOptions& options) {
  if (n == 0) throw std::invalid_argument("mask size must be positive");
  if (calibration > n) throw std::invalid_argument("calibration region larger than the mask");
  if (!(acceleration >= 1.0)) throw std::invalid_argument("acceleration must be >= 1");
  const double total = static_cast<double>(n * n);
  if (static_cast<double>(calibration * calibration) * acceleration > total) {
    throw InfeasibleMask("calibration block of " + std::to_string(calibration) + "^2 samples exceeds the budget N^2/R = " +
                         std::to_string(total / acceleration));
  }

  const double target = total / acceleration;
  DartThrower darts(n, calibration, seed, options.radius_growth);
  auto count_of = [](const std::vector<std::uint8_t>& occ) {
    return static_cast<double>(std::accumulate(occ.begin(), occ.end(), std::size_t{0}));
  };

  // r0 = 0 accepts every cell.
  double best_r = 0.0;
  std::vector<std::uint8_t> best = darts.throw_darts(0.0);
  double best_err = std::abs(count_of(best) - target);
  // Bracket r0 from the mean sample spacing sqrt(R) before bisecting.
  double lo = 0.0, hi = 2.0 * std::sqrt(acceleration) + 2.0;
  while (hi < static_cast<double>(n) && count_of(darts.throw_darts(hi)) > target) {
    lo = hi;
    hi *= 2.0;
  }
  const double good_enough = options.tolerance * target;
  for (int it = 0; it < options.bisection_steps && best_err > good_enough; ++it) {
    const double mid = 0.5 * (lo + hi);
    auto occ = darts.throw_darts(mid);
    const double count = count_of(occ);
    const double err = std::abs(count - target);
    if (err < best_err) {
      best_err = err;
      best = std::move(occ);
      best_r = mid;
    }
    if (count > target) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo < 1e-9) break;
  }

  SamplingMask m;
  m.size = n;
  m.indicator = Tensor({n, n});
  for (std::size_t k = 0; k < n * n; ++k) m.indicator[k] = best[k] ? 1.0 : 0.0;
  m.calibration = calibration;
  m.target_acceleration = acceleration;
  m.achieved_acceleration = total / count_of(best);
  m.seed = seed;
  m.base_radius = best_r;
  return m;
}

namespace {

class ForwardLinear final : public LinearOperator {
 public:
  explicit ForwardLinear(const ImagingOperator& op) : op_(op) {}
  Shape in_shape() const override { return {op_.size(), op_.size()}; }
  Shape out_shape() const override { return {2, op_.size(), op_.size()}; }
  void apply(std::span<const double> in, std::span<double> out) const override {
    const std::size_t n = op_.size(), nn = n * n;
    Tensor f({n, n}, std::vector<double>(in.begin(), in.end()));
    KSpaceData g = op_.forward(f);
    std::copy_n(g.real.data().begin(), nn, out.begin());
    std::copy_n(g.imag.data().begin(), nn, out.begin() + static_cast<long>(nn));
  }
  void adjoint(std::span<const double> in, std::span<double> out) const override {
    const std::size_t n = op_.size(), nn = n * n;
    KSpaceData g;
    g.real = Tensor({n, n}, std::vector<double>(in.begin(), in.begin() + static_cast<long>(nn)));
    g.imag = Tensor({n, n}, std::vector<double>(in.begin() + static_cast<long>(nn), in.end()));
    Tensor f = op_.adjoint(g);
    std::copy(f.data().begin(), f.data().end(), out.begin());
  }

 private:
  ImagingOperator op_;
};

}  // namespace

ImagingOperator::ImagingOperator(SamplingMask mask, std::optional<Tensor> phase)
    : ImagingOperator(std::make_shared<const SamplingMask>(std::move(mask)), std::move(phase)) {}

ImagingOperator::ImagingOperator(std::shared_ptr<const SamplingMask> mask, std::optional<Tensor> phase)
    : mask_(std::move(mask)), phase_(std::move(phase)) {
  if (!mask_) throw std::invalid_argument("imaging operator requires a mask");
  const std::size_t n = mask_->size;
  if (mask_->indicator.shape() != Shape{n, n}) throw ShapeError("mask indicator must be N x N");
  if (phase_ && phase_->shape() != Shape{n, n}) {
    throw ShapeError("phase map shape " + shape_str(phase_->shape()) + " does not match mask size");
  }
}

void ImagingOperator::check_image(const Tensor& t, const char* what) const {
  if (t.shape() != Shape{size(), size()}) {
    throw ShapeError(std::string(what) + ": expected " + shape_str({size(), size()}) + ", got " + shape_str(t.shape()));
  }
}

void ImagingOperator::check_kspace(const KSpaceData& g) const {
  check_image(g.real, "k-space real part");
  check_image(g.imag, "k-space imaginary part");
}

KSpaceData ImagingOperator::forward(const Tensor& image) const {
  check_image(image, "forward");
  return forward_complex(ComplexImage(image, Tensor(image.shape(), 0.0)));
}

KSpaceData ImagingOperator::forward_complex(const ComplexImage& image) const {
  check_image(image.real, "forward");
  ComplexImage x = image;
  if (phase_) {
    for (std::size_t i = 0; i < x.real.numel(); ++i) {
      const double c = std::cos((*phase_)[i]), s = std::sin((*phase_)[i]);
      const double re = image.real[i], im = image.imag[i];
      x.real[i] = re * c - im * s;
      x.imag[i] = re * s + im * c;
    }
  }
  ComplexImage k = dft2(x, false);
  KSpaceData g{fftshift(k.real), fftshift(k.imag), mask_};
  const Tensor& m = mask_->indicator;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    if (m[i] == 0.0) {
      g.real[i] = 0.0;
      g.imag[i] = 0.0;
    }
  }
  return g;
}

ComplexImage ImagingOperator::adjoint_complex(const KSpaceData& g) const {
  check_kspace(g);
  const Tensor& m = mask_->indicator;
  Tensor re = g.real, im = g.imag;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    if (m[i] == 0.0) {
      re[i] = 0.0;
      im[i] = 0.0;
    }
  }
  ComplexImage x = dft2(ComplexImage(ifftshift(re), ifftshift(im)), true);
  if (phase_) {
    for (std::size_t i = 0; i < x.real.numel(); ++i) {
      const double c = std::cos((*phase_)[i]), s = std::sin((*phase_)[i]);
      const double a = x.real[i], b = x.imag[i];
      x.real[i] = a * c + b * s;
      x.imag[i] = b * c - a * s;
    }
  }
  return x;
}

Tensor ImagingOperator::adjoint(const KSpaceData& g) const { return adjoint_complex(g).real; }

double ImagingOperator::fidelity(const Tensor& image, const KSpaceData& g) const {
  check_kspace(g);
  KSpaceData h = forward(image);
  const Tensor& m = mask_->indicator;
  double acc = 0.0;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    if (m[i] == 0.0) continue;
    const double dr = g.real[i] - h.real[i], di = g.imag[i] - h.imag[i];
    acc += dr * dr + di * di;
  }
  return acc;
}

std::shared_ptr<const LinearOperator> ImagingOperator::as_linear() const {
  return std::make_shared<ForwardLinear>(*this);
}

KSpaceData add_noise(const KSpaceData& g, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("noise sigma must be >= 0");
  KSpaceData out = g;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  for (std::size_t i = 0; i < out.real.numel(); ++i) {
    if (g.mask && g.mask->indicator[i] == 0.0) continue;
    out.real[i] += noise(rng);
    out.imag[i] += noise(rng);
  }
  return out;
}

Tensor sampled_values(const KSpaceData& g) {
  if (!g.mask) throw std::invalid_argument("k-space data carries no mask");
  const Tensor& m = g.mask->indicator;
  std::vector<double> re, im;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    if (m[i] == 0.0) continue;
    re.push_back(g.real[i]);
    im.push_back(g.imag[i]);
  }
  re.insert(re.end(), im.begin(), im.end());
  if (re.empty()) re.push_back(0.0);
  const std::size_t count = re.size();
  return Tensor({count}, std::move(re));
}

}  // namespace gpr
