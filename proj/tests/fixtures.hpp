#pragma once

// Models and datasets shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "cifs/data/dataset.hpp"
#include "cifs/model/classifier.hpp"
#include "cifs/model/model.hpp"

namespace cifs::testing {

/// resnet10-like, base width 8, square inputs normalized with mean 0.5 and std 0.25.
inline model::ArchConfig tiny_arch(std::size_t channels = 3, std::size_t side = 8,
                                   std::size_t classes = 4) {
  model::ArchConfig a;
  a.family = model::Family::resnet10_like;
  a.base_width = 8;
  a.num_classes = classes;
  a.input_shape = {channels, side, side};
  a.norm_mean.assign(channels, 0.5);
  a.norm_std.assign(channels, 0.25);
  return a;
}

/// Per-row softmax cross-entropy, computed directly from the definition.
template <typename Real>
std::vector<double> ce_rows(const Tensor<Real>& logits, const std::vector<std::size_t>& y) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(logits(n, k)));
    out[n] = std::log(z) - static_cast<double>(logits(n, y[n]));
  }
  return out;
}

/// logits = W x + b on flattened inputs, with no raw heads.
template <typename Real>
class LinearClassifier final : public model::Classifier<Real> {
 public:
  LinearClassifier(Tensor<Real> w, std::vector<Real> b) : w_(std::move(w)), b_(std::move(b)) {}

  std::size_t num_classes() const override { return w_.dim(0); }
  std::size_t num_raw_heads() const override { return 0; }

  model::HeadOutputs<Real> predict(const Tensor<Real>& x, const model::ForwardOptions&) const override {
    const std::size_t N = x.dim(0), D = x.size() / N, K = w_.dim(0);
    Tensor<Real> z({N, K});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        double acc = b_[k];
        for (std::size_t d = 0; d < D; ++d) acc += static_cast<double>(w_(k, d)) * x[n * D + d];
        z(n, k) = static_cast<Real>(acc);
      }
    return {std::move(z), {}};
  }

  Tensor<Real> input_gradient(const Tensor<Real>& x, const model::ForwardOptions& opts, core::GradMode,
                              const model::HeadLoss<Real>& loss,
                              model::HeadOutputs<Real>* outputs) const override {
    auto heads = predict(x, opts);
    const auto g = loss(heads);
    const std::size_t N = x.dim(0), D = x.size() / N, K = w_.dim(0);
    Tensor<Real> dx(x.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) {
        double acc = 0;
        for (std::size_t k = 0; k < K; ++k) acc += static_cast<double>(g.d_final(n, k)) * w_(k, d);
        dx[n * D + d] = static_cast<Real>(acc);
      }
    if (outputs) *outputs = std::move(heads);
    return dx;
  }

  const Tensor<Real>& weight() const { return w_; }

 private:
  Tensor<Real> w_;
  std::vector<Real> b_;
};

/// Two or more Gaussian blobs in [0, 1]: class k brightens a class-specific
/// quadrant pattern. Deterministic in `seed`.
inline Dataset blob_dataset(std::size_t n, std::size_t classes, std::size_t channels, std::size_t side,
                            std::uint64_t seed, double noise = 0.1) {
  Dataset d;
  d.name = "blobs";
  d.split = "test";
  d.num_classes = classes;
  d.images = Tensor<float>({n, channels, side, side});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, noise);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % classes;
    d.labels.push_back(k);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t h = 0; h < side; ++h)
        for (std::size_t w = 0; w < side; ++w) {
          const std::size_t cell = (2 * h / side) * 2 + (2 * w / side);
          const double base = cell % classes == k ? 0.75 : 0.25;
          const double v = std::clamp(base + gauss(rng), 0.0, 1.0);
          d.images[((i * channels + c) * side + h) * side + w] = static_cast<float>(v);
        }
  }
  return d;
}

}  // namespace cifs::testing
