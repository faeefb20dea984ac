#pragma once

#include <span>
#include <string>
#include <vector>

#include "cifs/core/feature_map.hpp"
#include "cifs/parameter.hpp"
#include "cifs/random.hpp"

namespace cifs::core {

enum class ProbeKind { linear, mlp2 };
enum class ProbeActivation { relu, tanh };

std::string to_string(ProbeKind kind);
std::string to_string(ProbeActivation act);
ProbeKind parse_probe_kind(const std::string& s);
ProbeActivation parse_probe_activation(const std::string& s);

/// Intermediates of one probe evaluation; consumed by the derivative routines.
template <typename Real>
struct ProbeTrace {
  Tensor<Real> pooled;      // (batch, C)
  Tensor<Real> hidden_pre;  // (batch, H), mlp2 only
  Tensor<Real> hidden;      // (batch, H), mlp2 only
  Tensor<Real> logits;      // (batch, K)
};

/// Surrogate classifier attached to an intermediate layer. Both kinds first
/// average every channel over its spatial positions.
///   linear: logits = W u + b
///   mlp2:   logits = W2 act(W1 u + b1) + b2
template <typename Real>
class Probe {
 public:
  static Probe linear(std::size_t channels, std::size_t classes);
  static Probe mlp2(std::size_t channels, std::size_t hidden, std::size_t classes,
                    ProbeActivation activation = ProbeActivation::relu);

  ProbeKind kind() const noexcept { return kind_; }
  ProbeActivation activation() const noexcept { return activation_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t hidden_width() const noexcept { return hidden_; }
  std::size_t classes() const noexcept { return classes_; }
  std::size_t parameter_count() const;

  /// linear: {weight (K x C), bias (K)}; mlp2: {fc1.weight (H x C), fc1.bias, fc2.weight (K x H), fc2.bias}.
  std::vector<Parameter<Real>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<Real>>& parameters() const noexcept { return params_; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void initialize(Rng& rng);

  ProbeTrace<Real> forward(const FeatureMap<Real>& z) const;
  ProbeTrace<Real> forward_pooled(Tensor<Real> pooled) const;

  /// Per-sample d(cot . A(u))/du, shape (batch, C).
  Tensor<Real> input_vjp(const ProbeTrace<Real>& trace, const Tensor<Real>& cotangent) const;

  /// Adds d(sum_b cot_b . A(u_b))/dtheta to `grads` (parameter order).
  void accumulate_parameter_vjp(const ProbeTrace<Real>& trace, const Tensor<Real>& cotangent,
                                std::span<Tensor<Real>> grads) const;

  /// Second-order pass for phi = sum_b v_b . grad_u(s_b . A(u_b)).
  /// Returns d(phi)/du (batch, C) and, when `grads` is non-empty, adds d(phi)/dtheta.
  Tensor<Real> relevance_vjp(const ProbeTrace<Real>& trace, const Tensor<Real>& selection,
                             const Tensor<Real>& v, std::span<Tensor<Real>> grads) const;

 private:
  Probe(ProbeKind kind, std::size_t channels, std::size_t hidden, std::size_t classes,
        ProbeActivation activation);

  const Tensor<Real>& w(std::size_t i) const { return params_[i].value; }

  ProbeKind kind_;
  ProbeActivation activation_;
  std::size_t channels_;
  std::size_t hidden_;
  std::size_t classes_;
  std::vector<Parameter<Real>> params_;
};

/// Raw prediction p = A(z), shape (batch, K). Throws ConfigError on channel mismatch.
template <typename Real>
Tensor<Real> probe_forward(const FeatureMap<Real>& z, const Probe<Real>& probe);

}  // namespace cifs::core
