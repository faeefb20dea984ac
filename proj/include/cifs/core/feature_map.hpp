#pragma once

#include <span>

#include "cifs/tensor.hpp"

namespace cifs::core {

/// Per-sample intermediate representation viewed as (batch, channels, features).
/// Trailing axes of a wrapped tensor (e.g. H, W) are flattened into `features`,
/// the original shape is kept so the map can be handed back unchanged.
template <typename Real>
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(std::size_t batch, std::size_t channels, std::size_t features, Real fill = Real(0))
      : values_({batch, channels, features}, fill) {
    check_dims();
  }
  explicit FeatureMap(Tensor<Real> values) : values_(std::move(values)) {
    if (values_.rank() < 3)
      throw ConfigError("feature map needs rank >= 3, got " + shape_string(values_.shape()));
    check_dims();
  }

  std::size_t batch() const { return values_.dim(0); }
  std::size_t channels() const { return values_.dim(1); }
  std::size_t features() const { return values_.size() / (batch() * channels()); }

  std::span<Real> channel(std::size_t b, std::size_t c) {
    return {values_.data() + (b * channels() + c) * features(), features()};
  }
  std::span<const Real> channel(std::size_t b, std::size_t c) const {
    return {values_.data() + (b * channels() + c) * features(), features()};
  }

  const Tensor<Real>& tensor() const& noexcept { return values_; }
  Tensor<Real>& tensor() & noexcept { return values_; }
  Tensor<Real> take() && noexcept { return std::move(values_); }

  /// Spatial mean of every channel, shape (batch, channels).
  Tensor<Real> pooled() const {
    Tensor<Real> out({batch(), channels()});
    const Real inv = Real(1) / static_cast<Real>(features());
    for (std::size_t b = 0; b < batch(); ++b)
      for (std::size_t c = 0; c < channels(); ++c) {
        Real s = 0;
        for (Real v : channel(b, c)) s += v;
        out(b, c) = s * inv;
      }
    return out;
  }

  bool same_layout(const FeatureMap& other) const {
    return batch() == other.batch() && channels() == other.channels() &&
           features() == other.features();
  }

 private:
  void check_dims() const {
    for (std::size_t d : values_.shape())
      if (d == 0) throw ConfigError("feature map dimensions must be >= 1: " +
                                    shape_string(values_.shape()));
  }

  Tensor<Real> values_;
};

}  // namespace cifs::core
