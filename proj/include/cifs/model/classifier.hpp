#pragma once

#include <functional>
#include <span>
#include <vector>

#include "cifs/core/cifs.hpp"
#include "cifs/model/layers.hpp"

namespace cifs::model {

struct ForwardOptions {
  Phase phase = Phase::eval;
  /// True labels for training-mode top-k substitution; empty in eval mode.
  std::span<const std::size_t> labels = {};
};

/// Final logits plus one raw prediction per CIFS module, upstream first.
template <typename Real>
struct HeadOutputs {
  Tensor<Real> final_logits;
  std::vector<Tensor<Real>> raw_logits;
};

/// Gradients of a scalar loss with respect to every head's logits. An empty
/// raw entry means that head does not contribute.
template <typename Real>
struct HeadGradients {
  Tensor<Real> d_final;
  std::vector<Tensor<Real>> d_raw;
};

template <typename Real>
using HeadLoss = std::function<HeadGradients<Real>(const HeadOutputs<Real>&)>;

/// What attacks and evaluation need from a network: multi-head logits and
/// the input gradient of a loss defined on them.
template <typename Real>
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual std::size_t num_classes() const = 0;
  virtual std::size_t num_raw_heads() const = 0;

  virtual HeadOutputs<Real> predict(const Tensor<Real>& x, const ForwardOptions& opts) const = 0;

  /// One forward pass, `loss` maps the head outputs to logit gradients, then
  /// one backward pass. The outputs are stored in `outputs` when non-null.
  virtual Tensor<Real> input_gradient(const Tensor<Real>& x, const ForwardOptions& opts,
                                      core::GradMode mode, const HeadLoss<Real>& loss,
                                      HeadOutputs<Real>* outputs = nullptr) const = 0;
};

}  // namespace cifs::model
