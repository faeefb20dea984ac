#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cifs/attack/loss.hpp"
#include "cifs/model/classifier.hpp"
#include "cifs/random.hpp"
#include "json.hpp"

namespace cifs::attack {

enum class AttackKind { fgsm, pgd, cw_pgd };

std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(const std::string& s);

/// l-infinity attack settings; epsilon and step size are in [0, 1] pixel units.
struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 20;
  double step_size = 0.8 / 255.0;
  bool random_init = false;
  AdaptiveLoss loss = AdaptiveLoss::final_only();
  /// Through differentiates the CIFS masks; detached marks the result as approximate.
  core::GradMode grad_mode = core::GradMode::through;

  static AttackConfig fgsm(double epsilon);
  static AttackConfig pgd(double epsilon, std::size_t steps, double step_size, bool random_init);
  static AttackConfig cw(double epsilon, std::size_t steps, double step_size);

  void validate() const;
  /// E.g. "FGSM", "PGD-20", "CW-30".
  std::string name() const;

  /// {"kind", "epsilon", "steps", "step_size", "random_init", "loss", "grad_mode"}.
  /// epsilon and step_size accept "8/255"; step_size also accepts "eps/10".
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

/// Forward settings while attacking. Evaluation uses eval-phase statistics and no labels;
/// the training inner attack runs in the training phase with label substitution.
struct AttackContext {
  model::Phase phase = model::Phase::eval;
  bool substitute_labels = false;
};

/// Clamp to [x_ref - eps, x_ref + eps], then to [0, 1].
template <typename Real>
Tensor<Real> project_linf(const Tensor<Real>& x_adv, const Tensor<Real>& x_ref, double epsilon);

/// sign with sign(0) = 0.
template <typename Real>
Real sign(Real v) {
  return static_cast<Real>((v > Real(0)) - (v < Real(0)));
}

template <typename Real>
struct LossGradient {
  Tensor<Real> grad;               // d(sum of per-sample losses)/dx
  std::vector<double> per_sample;  // loss per sample
  model::HeadOutputs<Real> heads;
};

/// Input gradient of the adaptive objective.
template <typename Real>
LossGradient<Real> loss_gradient(const model::Classifier<Real>& model, const Tensor<Real>& x,
                                 std::span<const std::size_t> y, const AdaptiveLoss& spec,
                                 LossKind kind, core::GradMode mode, const AttackContext& ctx = {});

template <typename Real>
Tensor<Real> fgsm(const model::Classifier<Real>& model, const Tensor<Real>& x,
                  std::span<const std::size_t> y, const AdaptiveLoss& spec, double epsilon,
                  core::GradMode mode = core::GradMode::through, const AttackContext& ctx = {});

/// `rng` is only drawn from when random_init is set.
template <typename Real>
Tensor<Real> pgd(const model::Classifier<Real>& model, const Tensor<Real>& x,
                 std::span<const std::size_t> y, const AdaptiveLoss& spec, double epsilon,
                 std::size_t steps, double step_size, bool random_init, Rng& rng,
                 core::GradMode mode = core::GradMode::through, const AttackContext& ctx = {},
                 LossKind kind = LossKind::cross_entropy);

/// PGD on the margin loss. A sample whose final prediction is wrong keeps that
/// iterate for the rest of the run, including at step 0.
template <typename Real>
Tensor<Real> cw_pgd(const model::Classifier<Real>& model, const Tensor<Real>& x,
                    std::span<const std::size_t> y, const AdaptiveLoss& spec, double epsilon,
                    std::size_t steps, double step_size,
                    core::GradMode mode = core::GradMode::through, const AttackContext& ctx = {});

/// Dispatches on cfg.kind.
template <typename Real>
Tensor<Real> run_attack(const model::Classifier<Real>& model, const Tensor<Real>& x,
                        std::span<const std::size_t> y, const AttackConfig& cfg, Rng& rng,
                        const AttackContext& ctx = {});

}  // namespace cifs::attack
