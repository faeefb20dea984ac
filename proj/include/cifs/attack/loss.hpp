#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cifs/tensor.hpp"

namespace cifs::attack {

/// Which heads an adaptive objective looks at.
///   all:        finite beta mixes final and raw heads; beta = inf keeps only the raw heads (mean)
///   layer:      beta = inf focused on one raw head (1-based, upstream first)
///   final_only: only the final head (same as beta = 0)
enum class Focus { all, layer, final_only };

struct AdaptiveLoss {
  double beta = 0.0;  // +inf allowed
  Focus focus = Focus::final_only;
  std::size_t layer = 0;

  static AdaptiveLoss final_only() { return {0.0, Focus::final_only, 0}; }
  static AdaptiveLoss with_beta(double beta) {
    return {beta, beta == 0.0 ? Focus::final_only : Focus::all, 0};
  }
  static AdaptiveLoss infinite() { return {std::numeric_limits<double>::infinity(), Focus::all, 0}; }
  static AdaptiveLoss infinite_focus(std::size_t layer) {
    return {std::numeric_limits<double>::infinity(), Focus::layer, layer};
  }

  bool is_infinite() const noexcept { return beta == std::numeric_limits<double>::infinity(); }

  /// Throws ConfigError if inconsistent or if it needs more raw heads than `num_raw`.
  void validate(std::size_t num_raw) const;

  /// "0", "0.1", "2", "inf", "inf-1", ...
  std::string label() const;
  static AdaptiveLoss parse(const std::string& s);

  bool operator==(const AdaptiveLoss&) const = default;
};

/// The default grid {0, 0.1, 1, 2, 10, 100, inf, inf-1, inf-2}.
std::vector<AdaptiveLoss> default_beta_grid();
/// Comma-separated labels, e.g. "0,2,inf,inf-1".
std::vector<AdaptiveLoss> parse_beta_grid(const std::string& list);

/// Mixing weights of the final head and each raw head.
struct HeadWeights {
  double final_head = 1.0;
  std::vector<double> raw;
};

/// 1/(1+b) and b/((1+b)|I|) for finite b; mean over raw heads for inf; a single head for inf-j.
/// With no raw heads every spec except an infinite one reduces to the final head.
HeadWeights head_weights(const AdaptiveLoss& spec, std::size_t num_raw);

enum class LossKind { cross_entropy, margin };

std::string to_string(LossKind kind);

/// Per-sample softmax cross-entropy.
template <typename Real>
std::vector<double> cross_entropy(const Tensor<Real>& logits, std::span<const std::size_t> y);

/// Per-sample max_{j != y} z_j - z_y (confidence 0).
template <typename Real>
std::vector<double> margin(const Tensor<Real>& logits, std::span<const std::size_t> y);

template <typename Real>
struct LossValue {
  std::vector<double> per_sample;  // weighted per-sample loss
  double mean = 0.0;
  Tensor<Real> d_final;
  std::vector<Tensor<Real>> d_raw;  // empty tensors for heads with zero weight
};

enum class Reduction { sum, mean };

/// sum_h w_h L(head_h, y) per sample, with its gradient with respect to every head's logits.
template <typename Real>
LossValue<Real> compose_loss(const Tensor<Real>& final_logits,
                             std::span<const Tensor<Real>> raw_logits, std::span<const std::size_t> y,
                             const HeadWeights& weights, LossKind kind, Reduction reduction);

/// Adaptive attack objective, reduced by summation.
template <typename Real>
LossValue<Real> compose_attack_loss(const Tensor<Real>& final_logits,
                                    std::span<const Tensor<Real>> raw_logits,
                                    std::span<const std::size_t> y, const AdaptiveLoss& spec,
                                    LossKind kind = LossKind::cross_entropy);

}  // namespace cifs::attack
