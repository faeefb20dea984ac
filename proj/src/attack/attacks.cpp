#include "cifs/attack/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "cifs/attack/evaluation.hpp"
#include "common/json_util.hpp"

namespace cifs::attack {

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cw_pgd: return "cw";
  }
  return "?";
}

AttackKind parse_attack_kind(const std::string& s) {
  if (s == "fgsm" || s == "FGSM") return AttackKind::fgsm;
  if (s == "pgd" || s == "PGD") return AttackKind::pgd;
  if (s == "cw" || s == "CW" || s == "cw-pgd" || s == "cw_pgd") return AttackKind::cw_pgd;
  throw ConfigError("unknown attack kind '" + s + "' (expected fgsm, pgd or cw)");
}

AttackConfig AttackConfig::fgsm(double epsilon) {
  AttackConfig c;
  c.kind = AttackKind::fgsm;
  c.epsilon = epsilon;
  c.steps = 1;
  c.step_size = epsilon;
  return c;
}

AttackConfig AttackConfig::pgd(double epsilon, std::size_t steps, double step_size, bool random_init) {
  AttackConfig c;
  c.kind = AttackKind::pgd;
  c.epsilon = epsilon;
  c.steps = steps;
  c.step_size = step_size;
  c.random_init = random_init;
  return c;
}

AttackConfig AttackConfig::cw(double epsilon, std::size_t steps, double step_size) {
  AttackConfig c = pgd(epsilon, steps, step_size, false);
  c.kind = AttackKind::cw_pgd;
  return c;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be >= 0");
  if (steps < 1) throw ConfigError("attack steps must be >= 1");
  if (kind != AttackKind::fgsm && !(step_size > 0)) throw ConfigError("step size must be > 0");
}

std::string AttackConfig::name() const {
  switch (kind) {
    case AttackKind::fgsm: return "FGSM";
    case AttackKind::pgd: return "PGD-" + std::to_string(steps);
    case AttackKind::cw_pgd: return "CW-" + std::to_string(steps);
  }
  return "?";
}

nlohmann::json AttackConfig::to_json() const {
  return {{"kind", to_string(kind)},       {"epsilon", epsilon},
          {"steps", steps},                {"step_size", step_size},
          {"random_init", random_init},    {"loss", loss.label()},
          {"grad_mode", core::to_string(grad_mode)}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  const std::string what = "attack";
  json_util::require_known_keys(j, {"kind", "epsilon", "steps", "step_size", "random_init", "loss",
                                    "grad_mode"},
                                what);
  AttackConfig c;
  c.kind = parse_attack_kind(json_util::get_required<std::string>(j, "kind", what));
  if (c.kind == AttackKind::cw_pgd) c.steps = 30;
  if (auto it = j.find("epsilon"); it != j.end()) c.epsilon = json_util::pixel_value(*it, "attack.epsilon");
  c.steps = json_util::get_or<std::size_t>(j, "steps", c.kind == AttackKind::fgsm ? 1 : c.steps, what);
  c.step_size = c.kind == AttackKind::fgsm ? c.epsilon : c.epsilon / 10.0;
  if (auto it = j.find("step_size"); it != j.end())
    c.step_size = json_util::pixel_value(*it, "attack.step_size", c.epsilon);
  c.random_init = json_util::get_or<bool>(j, "random_init", false, what);
  if (auto it = j.find("loss"); it != j.end()) {
    if (!it->is_string()) throw ConfigError("attack.loss must be a string such as \"2\" or \"inf-1\"");
    c.loss = AdaptiveLoss::parse(it->get<std::string>());
  }
  if (auto it = j.find("grad_mode"); it != j.end())
    c.grad_mode = core::parse_grad_mode(it->get<std::string>());
  c.validate();
  return c;
}

template <typename Real>
Tensor<Real> project_linf(const Tensor<Real>& x_adv, const Tensor<Real>& x_ref, double epsilon) {
  if (x_adv.shape() != x_ref.shape()) throw ConfigError("projection shape mismatch");
  const Real eps = static_cast<Real>(epsilon);
  Tensor<Real> out(x_adv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real v = std::clamp(x_adv[i], x_ref[i] - eps, x_ref[i] + eps);
    out[i] = std::clamp(v, Real(0), Real(1));
  }
  return out;
}

template <typename Real>
LossGradient<Real> loss_gradient(const model::Classifier<Real>& model, const Tensor<Real>& x,
                                 std::span<const std::size_t> y, const AdaptiveLoss& spec,
                                 LossKind kind, core::GradMode mode, const AttackContext& ctx) {
  const model::ForwardOptions opts{ctx.phase,
                                   ctx.substitute_labels ? y : std::span<const std::size_t>()};
  LossGradient<Real> out;
  out.grad = model.input_gradient(
      x, opts, mode,
      [&](const model::HeadOutputs<Real>& h) {
        auto lv = compose_attack_loss(h.final_logits, std::span<const Tensor<Real>>(h.raw_logits), y,
                                      spec, kind);
        out.per_sample = std::move(lv.per_sample);
        return model::HeadGradients<Real>{std::move(lv.d_final), std::move(lv.d_raw)};
      },
      &out.heads);
  require_finite(out.grad, "attack gradient");
  return out;
}

namespace {

// x_adv + step * sign(g), projected onto the ball around x.
template <typename Real>
Tensor<Real> ascend(const Tensor<Real>& x_adv, const Tensor<Real>& g, double step,
                    const Tensor<Real>& x, double epsilon) {
  const Real s = static_cast<Real>(step);
  Tensor<Real> next(x_adv.shape());
  for (std::size_t i = 0; i < next.size(); ++i) next[i] = x_adv[i] + s * sign(g[i]);
  return project_linf(next, x, epsilon);
}

}  // namespace

template <typename Real>
Tensor<Real> fgsm(const model::Classifier<Real>& model, const Tensor<Real>& x,
                  std::span<const std::size_t> y, const AdaptiveLoss& spec, double epsilon,
                  core::GradMode mode, const AttackContext& ctx) {
  const auto lg = loss_gradient(model, x, y, spec, LossKind::cross_entropy, mode, ctx);
  return ascend(x, lg.grad, epsilon, x, epsilon);
}

template <typename Real>
Tensor<Real> pgd(const model::Classifier<Real>& model, const Tensor<Real>& x,
                 std::span<const std::size_t> y, const AdaptiveLoss& spec, double epsilon,
                 std::size_t steps, double step_size, bool random_init, Rng& rng,
                 core::GradMode mode, const AttackContext& ctx, LossKind kind) {
  Tensor<Real> x_adv = x;
  if (random_init && epsilon > 0) {
    std::uniform_real_distribution<double> u(-epsilon, epsilon);
    for (auto& v : x_adv.values()) v = static_cast<Real>(v + u(rng));
    x_adv = project_linf(x_adv, x, epsilon);
  }
  for (std::size_t t = 0; t < steps; ++t) {
    const auto lg = loss_gradient(model, x_adv, y, spec, kind, mode, ctx);
    x_adv = ascend(x_adv, lg.grad, step_size, x, epsilon);
  }
  return x_adv;
}

template <typename Real>
Tensor<Real> cw_pgd(const model::Classifier<Real>& model, const Tensor<Real>& x,
                    std::span<const std::size_t> y, const AdaptiveLoss& spec, double epsilon,
                    std::size_t steps, double step_size, core::GradMode mode,
                    const AttackContext& ctx) {
  const std::size_t N = x.dim(0), per = x.size() / N;
  Tensor<Real> x_adv = x;
  std::vector<bool> done(N, false);
  for (std::size_t t = 0; t < steps; ++t) {
    const auto lg = loss_gradient(model, x_adv, y, spec, LossKind::margin, mode, ctx);
    for (std::size_t n = 0; n < N; ++n)
      if (!done[n] && argmax_row(lg.heads.final_logits, n) != y[n]) done[n] = true;
    const auto next = ascend(x_adv, lg.grad, step_size, x, epsilon);
    for (std::size_t n = 0; n < N; ++n)
      if (!done[n]) std::copy_n(next.data() + n * per, per, x_adv.data() + n * per);
  }
  return x_adv;
}

template <typename Real>
Tensor<Real> run_attack(const model::Classifier<Real>& model, const Tensor<Real>& x,
                        std::span<const std::size_t> y, const AttackConfig& cfg, Rng& rng,
                        const AttackContext& ctx) {
  cfg.validate();
  switch (cfg.kind) {
    case AttackKind::fgsm: return fgsm(model, x, y, cfg.loss, cfg.epsilon, cfg.grad_mode, ctx);
    case AttackKind::pgd:
      return pgd(model, x, y, cfg.loss, cfg.epsilon, cfg.steps, cfg.step_size, cfg.random_init, rng,
                 cfg.grad_mode, ctx);
    case AttackKind::cw_pgd:
      return cw_pgd(model, x, y, cfg.loss, cfg.epsilon, cfg.steps, cfg.step_size, cfg.grad_mode, ctx);
  }
  throw ConfigError("unknown attack kind");
}

#define CIFS_INSTANTIATE(Real)                                                                    \
  template Tensor<Real> project_linf(const Tensor<Real>&, const Tensor<Real>&, double);           \
  template LossGradient<Real> loss_gradient(const model::Classifier<Real>&, const Tensor<Real>&,       \
                                            std::span<const std::size_t>, const AdaptiveLoss&,    \
                                            LossKind, core::GradMode, const AttackContext&);      \
  template Tensor<Real> fgsm(const model::Classifier<Real>&, const Tensor<Real>&,                      \
                             std::span<const std::size_t>, const AdaptiveLoss&, double,           \
                             core::GradMode, const AttackContext&);                               \
  template Tensor<Real> pgd(const model::Classifier<Real>&, const Tensor<Real>&,                       \
                            std::span<const std::size_t>, const AdaptiveLoss&, double,            \
                            std::size_t, double, bool, Rng&, core::GradMode,                      \
                            const AttackContext&, LossKind);                                      \
  template Tensor<Real> cw_pgd(const model::Classifier<Real>&, const Tensor<Real>&,                    \
                               std::span<const std::size_t>, const AdaptiveLoss&, double,         \
                               std::size_t, double, core::GradMode, const AttackContext&);        \
  template Tensor<Real> run_attack(const model::Classifier<Real>&, const Tensor<Real>&,                \
                                   std::span<const std::size_t>, const AttackConfig&, Rng&,       \
                                   const AttackContext&);

CIFS_INSTANTIATE(float)
CIFS_INSTANTIATE(double)

}  // namespace cifs::attack
