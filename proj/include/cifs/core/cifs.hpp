#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cifs/core/feature_map.hpp"
#include "cifs/core/probe.hpp"

namespace cifs::core {

/// Distinct class ids whose logits drive the relevance assessment.
struct ClassIndexSet {
  std::vector<std::size_t> indices;

  bool contains(std::size_t cls) const;
};

/// Indices of the k largest logits, ties broken by ascending class id.
/// With a true label (training), the label replaces the top-1 entry unless
/// it is already among the k selected classes.
template <typename Real>
ClassIndexSet select_topk(std::span<const Real> logits, std::size_t k,
                          std::optional<std::size_t> true_label = std::nullopt);

/// One ClassIndexSet per row of `logits`; `labels` is empty (eval) or one per row.
template <typename Real>
std::vector<ClassIndexSet> select_topk_batch(const Tensor<Real>& logits, std::size_t k,
                                             std::span<const std::size_t> labels = {});

/// 0/1 indicator matrix (batch, K) of the selected classes.
template <typename Real>
Tensor<Real> selection_matrix(const std::vector<ClassIndexSet>& sets, std::size_t classes);

/// Per-channel relevance g, shape (batch, C).
template <typename Real>
struct RelevanceVector {
  Tensor<Real> values;
};

/// Non-negative per-channel multipliers m, shape (batch, C).
template <typename Real>
struct ImportanceMask {
  Tensor<Real> values;
};

/// g_c = d/d(delta_c) of sum_{i in S} A(z + delta 1^T)_i at delta = 0.
template <typename Real>
RelevanceVector<Real> assess_relevance(const FeatureMap<Real>& z, const Probe<Real>& probe,
                                       const std::vector<ClassIndexSet>& classes);

/// Same, reusing an existing probe evaluation of z.
template <typename Real>
RelevanceVector<Real> assess_relevance(const ProbeTrace<Real>& trace, const Probe<Real>& probe,
                                       const Tensor<Real>& selection);

enum class ImgfKind { sigmoid, softplus, softmax };

std::string to_string(ImgfKind kind);
ImgfKind parse_imgf_kind(const std::string& s);

/// Importance-mask generating function and its hyperparameters.
struct ImgfConfig {
  ImgfKind kind = ImgfKind::softmax;
  double alpha = 10.0;        // sigmoid / softplus sharpness
  double temperature = 1.0;   // softmax

  static ImgfConfig sigmoid(double alpha = 10.0) { return {ImgfKind::sigmoid, alpha, 1.0}; }
  static ImgfConfig softplus(double alpha = 5.0) { return {ImgfKind::softplus, alpha, 1.0}; }
  static ImgfConfig softmax(double temperature = 1.0) {
    return {ImgfKind::softmax, 10.0, temperature};
  }

  void validate() const;
};

/// sigmoid(a g), log(1 + exp(a g)) / a, or per-sample softmax(g / T); stable for large |a g|.
template <typename Real>
ImportanceMask<Real> generate_mask(const RelevanceVector<Real>& g, const ImgfConfig& cfg);

/// Vector-Jacobian product of generate_mask: returns dL/dg given dL/dm.
template <typename Real>
Tensor<Real> mask_vjp(const RelevanceVector<Real>& g, const ImportanceMask<Real>& m,
                      const ImgfConfig& cfg, const Tensor<Real>& grad_mask);

/// z_bar[b, c, f] = z[b, c, f] * m[b, c].
template <typename Real>
FeatureMap<Real> apply_mask(const FeatureMap<Real>& z, const ImportanceMask<Real>& m);

/// How outer derivatives treat the mask. `detached` holds it constant;
/// `through` differentiates the relevance gradient as well (second order).
enum class GradMode { detached, through };

std::string to_string(GradMode mode);
GradMode parse_grad_mode(const std::string& s);

template <typename Real>
struct CifsOutput {
  FeatureMap<Real> masked;
  Tensor<Real> raw_logits;
  std::vector<ClassIndexSet> classes;
  RelevanceVector<Real> relevance;
  ImportanceMask<Real> mask;
  GradMode grad_mode = GradMode::detached;
};

/// probe -> top-k -> relevance -> mask -> masked features.
template <typename Real>
CifsOutput<Real> cifs_forward(const FeatureMap<Real>& z, const Probe<Real>& probe, std::size_t k,
                              const ImgfConfig& imgf, std::span<const std::size_t> true_labels = {},
                              GradMode grad_mode = GradMode::detached);

/// A CIFS module owning its probe. Forward records what backward needs;
/// backward supports both gradient modes.
template <typename Real>
class CifsLayer {
 public:
  struct Trace {
    FeatureMap<Real> input;
    ProbeTrace<Real> probe;
    Tensor<Real> selection;
    RelevanceVector<Real> relevance;
    ImportanceMask<Real> mask;
  };

  CifsLayer(Probe<Real> probe, std::size_t top_k, ImgfConfig imgf);

  FeatureMap<Real> forward(FeatureMap<Real> z, std::span<const std::size_t> true_labels,
                           Trace& trace) const;

  /// Returns dL/dz. `grad_raw` is dL/d(raw logits) or null; probe parameter
  /// gradients are accumulated into `probe_grads` when it is non-empty.
  FeatureMap<Real> backward(const Trace& trace, const FeatureMap<Real>& grad_masked,
                            const Tensor<Real>* grad_raw, GradMode mode,
                            std::span<Tensor<Real>> probe_grads) const;

  Probe<Real>& probe() noexcept { return probe_; }
  const Probe<Real>& probe() const noexcept { return probe_; }
  std::size_t top_k() const noexcept { return top_k_; }
  const ImgfConfig& imgf() const noexcept { return imgf_; }

  /// Replaces every generated mask by a constant (test hook for identity checks).
  void set_mask_override(std::optional<Real> value) { mask_override_ = value; }
  std::optional<Real> mask_override() const noexcept { return mask_override_; }

 private:
  Probe<Real> probe_;
  std::size_t top_k_;
  ImgfConfig imgf_;
  std::optional<Real> mask_override_;
};

}  // namespace cifs::core
