#include "cifs/model/layers.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "common/linalg.hpp"

namespace cifs::model {

using linalg::view;

namespace {

std::size_t out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Output columns [lo, hi) whose input column ox * s + kx - p lies inside [0, W).
struct ValidRange {
  std::size_t lo, hi;
};

ValidRange valid_range(std::size_t out, std::size_t in, std::size_t s, std::size_t p, std::size_t kx) {
  std::size_t lo = 0;
  while (lo < out && lo * s + kx < p) ++lo;
  std::size_t hi = out;
  while (hi > lo && (hi - 1) * s + kx >= in + p) --hi;
  return {lo, hi};
}

// Columns for N consecutive samples laid out as (C * k * k, N * Ho * Wo). Only positions
// that read the input are written; padding entries must already be zero in `cols`.
template <typename Real>
void im2col(const Real* x, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
            std::size_t k, std::size_t s, std::size_t p, std::size_t Ho, std::size_t Wo, Real* cols) {
  const std::size_t P = Ho * Wo, NP = N * P;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky) {
      const ValidRange ry = valid_range(Ho, H, s, p, ky);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const ValidRange rx = valid_range(Wo, W, s, p, kx);
        Real* dst = cols + ((c * k + ky) * k + kx) * NP;
        for (std::size_t n = 0; n < N; ++n) {
          const Real* src = x + (n * C + c) * H * W;
          Real* d = dst + n * P;
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            Real* drow = d + oy * Wo + rx.lo;
            const Real* srow = src + (oy * s + ky - p) * W + (rx.lo * s + kx - p);
            if (s == 1) {
              std::copy(srow, srow + (rx.hi - rx.lo), drow);
            } else {
              for (std::size_t ox = 0; ox < rx.hi - rx.lo; ++ox) drow[ox] = srow[ox * s];
            }
          }
        }
      }
    }
}

// Column buffer whose padding entries stay zero while the chunk size is unchanged.
template <typename Real>
class ColumnBuffer {
 public:
  explicit ColumnBuffer(std::size_t size) : data_(size) {}
  Real* prepare(std::size_t samples) {
    if (samples != samples_) {
      std::fill(data_.begin(), data_.end(), Real(0));
      samples_ = samples;
    }
    return data_.data();
  }

 private:
  std::vector<Real> data_;
  std::size_t samples_ = 0;
};

// Adjoint of im2col: accumulates columns back into dx.
template <typename Real>
void col2im(const Real* cols, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
            std::size_t k, std::size_t s, std::size_t p, std::size_t Ho, std::size_t Wo, Real* dx) {
  const std::size_t P = Ho * Wo, NP = N * P;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky) {
      const ValidRange ry = valid_range(Ho, H, s, p, ky);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const ValidRange rx = valid_range(Wo, W, s, p, kx);
        const Real* src = cols + ((c * k + ky) * k + kx) * NP;
        for (std::size_t n = 0; n < N; ++n) {
          Real* dst = dx + (n * C + c) * H * W;
          const Real* sn = src + n * P;
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            Real* drow = dst + (oy * s + ky - p) * W + (rx.lo * s + kx - p);
            const Real* srow = sn + oy * Wo;
            if (s == 1) {
              for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) drow[ox - rx.lo] += srow[ox];
            } else {
              for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) drow[(ox - rx.lo) * s] += srow[ox];
            }
          }
        }
      }
    }
}

}  // namespace

template <typename Real>
Conv2d<Real>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                     std::size_t stride, std::size_t padding)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), padding_(padding) {
  this->params_.push_back({"weight", Tensor<Real>({out_, in_ * kernel_ * kernel_}), true});
}

template <typename Real>
void Conv2d<Real>::initialize(Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(out_ * kernel_ * kernel_));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : this->params_[0].value.values()) v = static_cast<Real>(dist(rng));
}

namespace {

// Samples per im2col chunk, sized so the column buffer stays cache resident.
std::size_t chunk_samples(std::size_t rows, std::size_t P, std::size_t N) {
  constexpr std::size_t kColumnBudget = std::size_t{1} << 18;
  return std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(1, rows * P), 1, N);
}

}  // namespace

template <typename Real>
Tensor<Real> Conv2d<Real>::forward(const Tensor<Real>& x, Cache& cache) const {
  if (x.rank() != 4 || x.dim(1) != in_)
    throw ConfigError("conv expects (N, " + std::to_string(in_) + ", H, W), got " +
                      shape_string(x.shape()));
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = out_extent(H, kernel_, stride_, padding_);
  const std::size_t Wo = out_extent(W, kernel_, stride_, padding_);
  const std::size_t P = Ho * Wo, rows = in_ * kernel_ * kernel_;
  const std::size_t chunk = chunk_samples(rows, P, N);
  const auto weight = view(this->params_[0].value.data(), out_, rows);

  cache.input = x;
  Tensor<Real> y({N, out_, Ho, Wo});
  ColumnBuffer<Real> buffer(rows * chunk * P);
  linalg::RowMatrix<Real> y2(out_, chunk * P);
  for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
    const std::size_t nc = std::min(chunk, N - n0), cP = nc * P;
    Real* cols = buffer.prepare(nc);
    im2col(x.data() + n0 * in_ * H * W, nc, in_, H, W, kernel_, stride_, padding_, Ho, Wo, cols);
    if (nc == 1) {
      view(y.data() + n0 * out_ * P, out_, P).noalias() = weight * view(cols, rows, P);
      continue;
    }
    y2.leftCols(cP).noalias() = weight * view(cols, rows, cP);
    for (std::size_t n = 0; n < nc; ++n)
      for (std::size_t co = 0; co < out_; ++co)
        std::copy_n(y2.data() + co * y2.cols() + n * P, P, y.data() + ((n0 + n) * out_ + co) * P);
  }
  return y;
}

template <typename Real>
Tensor<Real> Conv2d<Real>::backward(const Tensor<Real>& dy, const Cache& cache,
                                    GradientSet<Real>* grads) const {
  const auto& x = cache.input;
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = dy.dim(2), Wo = dy.dim(3);
  const std::size_t P = Ho * Wo, rows = in_ * kernel_ * kernel_;
  const std::size_t chunk = chunk_samples(rows, P, N);
  const auto weight = view(this->params_[0].value.data(), out_, rows);
  auto* gw = this->grad(grads, 0);

  Tensor<Real> dx(x.shape());
  ColumnBuffer<Real> buffer(gw ? rows * chunk * P : 0);
  linalg::RowMatrix<Real> dy2(out_, chunk * P);
  linalg::RowMatrix<Real> dcols(rows, chunk * P);
  for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
    const std::size_t nc = std::min(chunk, N - n0), cP = nc * P;
    for (std::size_t n = 0; n < nc; ++n)
      for (std::size_t co = 0; co < out_; ++co)
        std::copy_n(dy.data() + ((n0 + n) * out_ + co) * P, P, dy2.data() + co * dy2.cols() + n * P);
    const auto g = dy2.leftCols(cP);
    if (gw) {
      Real* cols = buffer.prepare(nc);
      im2col(x.data() + n0 * in_ * H * W, nc, in_, H, W, kernel_, stride_, padding_, Ho, Wo, cols);
      view(gw->data(), out_, rows).noalias() += g * view(cols, rows, cP).transpose();
    }
    auto dc = view(dcols.data(), rows, cP);
    dc.noalias() = weight.transpose() * g;
    col2im(dcols.data(), nc, in_, H, W, kernel_, stride_, padding_, Ho, Wo,
           dx.data() + n0 * in_ * H * W);
  }
  return dx;
}

template <typename Real>
BatchNorm2d<Real>::BatchNorm2d(std::size_t channels)
    : running_mean_({channels}, Real(0)), running_var_({channels}, Real(1)) {
  this->params_.push_back({"weight", Tensor<Real>({channels}, Real(1)), true});
  this->params_.push_back({"bias", Tensor<Real>({channels}, Real(0)), true});
}

namespace {

// One (sample, channel) plane as a vectorizable array.
template <typename Real>
auto plane(Real* p, std::size_t n) {
  return Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(n));
}

template <typename Real>
auto plane(const Real* p, std::size_t n) {
  return Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(n));
}

// sum_i f(a[i], b[i]) in a fixed blocked order, so the result does not depend on alignment.
template <typename Real, typename F>
double blocked_sum(const Real* a, const Real* b, std::size_t n, F f) {
  constexpr std::size_t kLanes = 16;
  Real acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += f(a[i + j], b[i + j]);
  double total = 0;
  for (; i < n; ++i) total += f(a[i], b[i]);
  for (std::size_t j = 0; j < kLanes; ++j) total += acc[j];
  return total;
}

}  // namespace

template <typename Real>
Tensor<Real> BatchNorm2d<Real>::forward(const Tensor<Real>& x, Phase phase, Cache& cache) const {
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.size() / (N * C);
  const auto& gamma = this->params_[0].value;
  const auto& beta = this->params_[1].value;
  cache.phase = phase;
  cache.count = N * HW;
  cache.inv_std.assign(C, Real(0));
  cache.batch_mean.assign(C, Real(0));
  cache.batch_var.assign(C, Real(0));
  cache.normalized = Tensor<Real>(x.shape());
  Tensor<Real> y(x.shape());

  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (phase == Phase::train) {
      // Per-plane partial sums in Real, accumulated across planes in double.
      double s = 0, ss = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const Real* p = x.data() + (n * C + c) * HW;
        s += blocked_sum(p, p, HW, [](Real v, Real) { return v; });
      }
      mean = s / static_cast<double>(cache.count);
      const Real m = static_cast<Real>(mean);
      for (std::size_t n = 0; n < N; ++n) {
        const Real* p = x.data() + (n * C + c) * HW;
        ss += blocked_sum(p, p, HW, [m](Real v, Real) { return (v - m) * (v - m); });
      }
      var = ss / static_cast<double>(cache.count);
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    cache.batch_mean[c] = static_cast<Real>(mean);
    cache.batch_var[c] = static_cast<Real>(var);
    const Real inv = static_cast<Real>(1.0 / std::sqrt(var + kEps));
    const Real m = static_cast<Real>(mean);
    const Real g = gamma[c], b = beta[c];
    cache.inv_std[c] = inv;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      auto xh = plane(cache.normalized.data() + off, HW);
      xh = (plane(x.data() + off, HW) - m) * inv;
      plane(y.data() + off, HW) = xh * g + b;
    }
  }
  return y;
}

template <typename Real>
Tensor<Real> BatchNorm2d<Real>::backward(const Tensor<Real>& dy, const Cache& cache,
                                         GradientSet<Real>* grads) const {
  const std::size_t N = dy.dim(0), C = dy.dim(1), HW = dy.size() / (N * C);
  const auto& gamma = this->params_[0].value;
  auto* ggamma = this->grad(grads, 0);
  auto* gbeta = this->grad(grads, 1);
  Tensor<Real> dx(dy.shape());
  const double M = static_cast<double>(cache.count);
  const bool train = cache.phase == Phase::train;
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0, sum_dy_xh = 0;
    if (train || ggamma || gbeta)
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * HW;
        const Real* g = dy.data() + off;
        sum_dy += blocked_sum(g, g, HW, [](Real v, Real) { return v; });
        sum_dy_xh += blocked_sum(g, cache.normalized.data() + off, HW, [](Real u, Real v) { return u * v; });
      }
    if (ggamma) (*ggamma)[c] += static_cast<Real>(sum_dy_xh);
    if (gbeta) (*gbeta)[c] += static_cast<Real>(sum_dy);
    const Real scale = gamma[c] * cache.inv_std[c];
    const auto mean_dy = static_cast<Real>(sum_dy / M);
    const auto mean_dy_xh = static_cast<Real>(sum_dy_xh / M);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      const auto g = plane(dy.data() + off, HW);
      auto out = plane(dx.data() + off, HW);
      if (train)
        out = scale * (g - mean_dy - plane(cache.normalized.data() + off, HW) * mean_dy_xh);
      else
        out = scale * g;
    }
  }
  return dx;
}

template <typename Real>
void BatchNorm2d<Real>::commit(const Cache& cache) {
  if (cache.phase != Phase::train) return;
  const double M = static_cast<double>(cache.count);
  const double unbias = M > 1 ? M / (M - 1) : 1.0;
  for (std::size_t c = 0; c < running_mean_.size(); ++c) {
    running_mean_[c] = static_cast<Real>((1 - kMomentum) * running_mean_[c] + kMomentum * cache.batch_mean[c]);
    running_var_[c] = static_cast<Real>((1 - kMomentum) * running_var_[c] +
                                        kMomentum * cache.batch_var[c] * unbias);
  }
}

template <typename Real>
Linear<Real>::Linear(std::size_t in_features, std::size_t out_features)
    : in_(in_features), out_(out_features) {
  this->params_.push_back({"weight", Tensor<Real>({out_, in_}), true});
  this->params_.push_back({"bias", Tensor<Real>({out_}), true});
}

template <typename Real>
void Linear<Real>::initialize(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& p : this->params_)
    for (auto& v : p.value.values()) v = static_cast<Real>(dist(rng));
}

template <typename Real>
Tensor<Real> Linear<Real>::forward(const Tensor<Real>& x) const {
  if (x.rank() != 2 || x.dim(1) != in_)
    throw ConfigError("linear layer expects (N, " + std::to_string(in_) + "), got " +
                      shape_string(x.shape()));
  const auto N = static_cast<Eigen::Index>(x.dim(0));
  Tensor<Real> y({x.dim(0), out_});
  auto out = view(y.data(), N, out_);
  out.noalias() = view(x.data(), N, in_) * view(this->params_[0].value.data(), out_, in_).transpose();
  out.rowwise() += view(this->params_[1].value.data(), 1, out_).row(0);
  return y;
}

template <typename Real>
Tensor<Real> Linear<Real>::backward(const Tensor<Real>& dy, const Tensor<Real>& x,
                                    GradientSet<Real>* grads) const {
  const auto N = static_cast<Eigen::Index>(x.dim(0));
  auto g = view(dy.data(), N, out_);
  if (auto* gw = this->grad(grads, 0))
    view(gw->data(), out_, in_).noalias() += g.transpose() * view(x.data(), N, in_);
  if (auto* gb = this->grad(grads, 1)) view(gb->data(), 1, out_).row(0) += g.colwise().sum();
  Tensor<Real> dx(x.shape());
  view(dx.data(), N, in_).noalias() = g * view(this->params_[0].value.data(), out_, in_);
  return dx;
}

template <typename Real>
void relu_inplace(Tensor<Real>& x) {
  for (auto& v : x.values()) v = v < Real(0) ? Real(0) : v;  // keeps NaN visible
}

template <typename Real>
Tensor<Real> relu_backward(const Tensor<Real>& dy, const Tensor<Real>& out) {
  Tensor<Real> dx(dy.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = out[i] > Real(0) ? dy[i] : Real(0);
  return dx;
}

template <typename Real>
Tensor<Real> global_average_pool(const Tensor<Real>& x) {
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.size() / (N * C);
  Tensor<Real> out({N, C});
  const Real inv = Real(1) / static_cast<Real>(HW);
  for (std::size_t i = 0; i < N * C; ++i) {
    Real s = 0;
    const Real* p = x.data() + i * HW;
    for (std::size_t j = 0; j < HW; ++j) s += p[j];
    out[i] = s * inv;
  }
  return out;
}

template <typename Real>
Tensor<Real> global_average_pool_backward(const Tensor<Real>& dy, const Shape& input_shape) {
  Tensor<Real> dx(input_shape);
  const std::size_t NC = dy.size(), HW = dx.size() / NC;
  const Real inv = Real(1) / static_cast<Real>(HW);
  for (std::size_t i = 0; i < NC; ++i) std::fill_n(dx.data() + i * HW, HW, dy[i] * inv);
  return dx;
}

#define CIFS_INSTANTIATE(Real)                                                              \
  template class ParamLayer<Real>;                                                          \
  template class Conv2d<Real>;                                                              \
  template class BatchNorm2d<Real>;                                                         \
  template class Linear<Real>;                                                              \
  template void relu_inplace(Tensor<Real>&);                                                \
  template Tensor<Real> relu_backward(const Tensor<Real>&, const Tensor<Real>&);            \
  template Tensor<Real> global_average_pool(const Tensor<Real>&);                           \
  template Tensor<Real> global_average_pool_backward(const Tensor<Real>&, const Shape&);

CIFS_INSTANTIATE(float)
CIFS_INSTANTIATE(double)

}  // namespace cifs::model
