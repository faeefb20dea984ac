#pragma once

#include <vector>

#include "cifs/parameter.hpp"
#include "cifs/random.hpp"

namespace cifs::model {

enum class Phase { eval, train };

/// Base for layers with trainable parameters. `slot` is the position of the
/// layer's first parameter inside the owning model's GradientSet.
template <typename Real>
class ParamLayer {
 public:
  std::vector<Parameter<Real>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<Real>>& parameters() const noexcept { return params_; }
  void set_slot(std::size_t slot) noexcept { slot_ = slot; }
  std::size_t slot() const noexcept { return slot_; }

 protected:
  Tensor<Real>* grad(GradientSet<Real>* g, std::size_t i) const {
    return g ? &g->slots[slot_ + i] : nullptr;
  }

  std::vector<Parameter<Real>> params_;
  std::size_t slot_ = 0;
};

/// 2-D convolution without bias, NCHW layout, lowered to GEMMs over chunks of samples.
template <typename Real>
class Conv2d : public ParamLayer<Real> {
 public:
  struct Cache {
    Tensor<Real> input;
  };

  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding);

  /// Kaiming-normal in fan-out mode.
  void initialize(Rng& rng);

  Tensor<Real> forward(const Tensor<Real>& x, Cache& cache) const;
  Tensor<Real> backward(const Tensor<Real>& dy, const Cache& cache, GradientSet<Real>* grads) const;

  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;
};

/// Per-channel batch normalization with running statistics.
template <typename Real>
class BatchNorm2d : public ParamLayer<Real> {
 public:
  struct Cache {
    Phase phase = Phase::eval;
    Tensor<Real> normalized;
    std::vector<Real> inv_std;
    std::vector<Real> batch_mean;
    std::vector<Real> batch_var;  // biased
    std::size_t count = 0;        // N * H * W
  };

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);

  Tensor<Real> forward(const Tensor<Real>& x, Phase phase, Cache& cache) const;
  Tensor<Real> backward(const Tensor<Real>& dy, const Cache& cache, GradientSet<Real>* grads) const;

  /// Folds the batch statistics of a training-phase forward into the running estimates.
  void commit(const Cache& cache);

  Tensor<Real>& running_mean() noexcept { return running_mean_; }
  Tensor<Real>& running_var() noexcept { return running_var_; }
  const Tensor<Real>& running_mean() const noexcept { return running_mean_; }
  const Tensor<Real>& running_var() const noexcept { return running_var_; }

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

 private:
  Tensor<Real> running_mean_;
  Tensor<Real> running_var_;
};

/// Affine map on (batch, features).
template <typename Real>
class Linear : public ParamLayer<Real> {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features);

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  void initialize(Rng& rng);

  Tensor<Real> forward(const Tensor<Real>& x) const;
  /// `x` is the input seen by forward.
  Tensor<Real> backward(const Tensor<Real>& dy, const Tensor<Real>& x, GradientSet<Real>* grads) const;

  const Tensor<Real>& weight() const { return this->params_[0].value; }

 private:
  std::size_t in_ = 0, out_ = 0;
};

template <typename Real>
void relu_inplace(Tensor<Real>& x);

/// dy masked by the positive entries of the rectifier's output.
template <typename Real>
Tensor<Real> relu_backward(const Tensor<Real>& dy, const Tensor<Real>& out);

/// Spatial mean of an NCHW tensor, shape (N, C).
template <typename Real>
Tensor<Real> global_average_pool(const Tensor<Real>& x);

template <typename Real>
Tensor<Real> global_average_pool_backward(const Tensor<Real>& dy, const Shape& input_shape);

}  // namespace cifs::model
