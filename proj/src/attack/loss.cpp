#include "cifs/attack/loss.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace cifs::attack {

void AdaptiveLoss::validate(std::size_t num_raw) const {
  if (std::isnan(beta) || beta < 0) throw ConfigError("beta must be >= 0");
  switch (focus) {
    case Focus::final_only:
      if (beta != 0) throw ConfigError("final-only focus implies beta = 0");
      break;
    case Focus::all:
      if (is_infinite() && num_raw == 0)
        throw ConfigError("beta = inf needs at least one CIFS raw prediction");
      break;
    case Focus::layer:
      if (!is_infinite()) throw ConfigError("layer focus requires beta = inf");
      if (layer < 1 || layer > num_raw)
        throw ConfigError("focus layer " + std::to_string(layer) + " outside [1, " +
                          std::to_string(num_raw) + "]");
      break;
  }
}

std::string AdaptiveLoss::label() const {
  if (focus == Focus::layer) return "inf-" + std::to_string(layer);
  if (is_infinite()) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", beta);
  return buf;
}

AdaptiveLoss AdaptiveLoss::parse(const std::string& raw) {
  std::string s;
  for (char c : raw)
    if (!std::isspace(static_cast<unsigned char>(c))) s += c;
  if (s == "final") return final_only();
  for (const std::string inf : {"inf", "∞"}) {
    if (s == inf) return infinite();
    if (s.rfind(inf + "-", 0) == 0) {
      const std::string idx = s.substr(inf.size() + 1);
      if (idx.empty() || idx.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError("bad focus index in '" + raw + "'");
      return infinite_focus(std::stoul(idx));
    }
  }
  std::size_t used = 0;
  double b = 0;
  try {
    b = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("cannot parse beta '" + raw + "'");
  }
  if (used != s.size() || !std::isfinite(b) || b < 0) throw ConfigError("cannot parse beta '" + raw + "'");
  return with_beta(b);
}

std::vector<AdaptiveLoss> default_beta_grid() {
  return {AdaptiveLoss::with_beta(0),   AdaptiveLoss::with_beta(0.1), AdaptiveLoss::with_beta(1),
          AdaptiveLoss::with_beta(2),   AdaptiveLoss::with_beta(10),  AdaptiveLoss::with_beta(100),
          AdaptiveLoss::infinite(),     AdaptiveLoss::infinite_focus(1),
          AdaptiveLoss::infinite_focus(2)};
}

std::vector<AdaptiveLoss> parse_beta_grid(const std::string& list) {
  std::vector<AdaptiveLoss> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(AdaptiveLoss::parse(item));
  if (out.empty()) throw ConfigError("empty beta grid");
  return out;
}

HeadWeights head_weights(const AdaptiveLoss& spec, std::size_t num_raw) {
  spec.validate(num_raw);
  HeadWeights w;
  w.raw.assign(num_raw, 0.0);
  if (spec.focus == Focus::final_only || num_raw == 0) return w;
  const double I = static_cast<double>(num_raw);
  if (spec.focus == Focus::layer) {
    w.final_head = 0.0;
    w.raw[spec.layer - 1] = 1.0;
  } else if (spec.is_infinite()) {
    w.final_head = 0.0;
    w.raw.assign(num_raw, 1.0 / I);
  } else {
    w.final_head = 1.0 / (1.0 + spec.beta);
    w.raw.assign(num_raw, spec.beta / ((1.0 + spec.beta) * I));
  }
  return w;
}

std::string to_string(LossKind kind) { return kind == LossKind::margin ? "margin" : "cross_entropy"; }

namespace {

void check_labels(std::size_t rows, std::size_t K,
                  std::span<const std::size_t> y) {
  if (y.size() != rows)
    throw ConfigError("label count " + std::to_string(y.size()) + " != batch " + std::to_string(rows));
  for (auto v : y)
    if (v >= K) throw ConfigError("label " + std::to_string(v) + " outside [0, " + std::to_string(K) + ")");
}

// Loss and d(loss)/d(logits) of one row.
template <typename Real>
double row_loss(const Real* z, std::size_t K, std::size_t y, LossKind kind, double* grad) {
  if (kind == LossKind::cross_entropy) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(z[k]));
    double sum = 0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(static_cast<double>(z[k]) - mx);
    if (grad)
      for (std::size_t k = 0; k < K; ++k)
        grad[k] = std::exp(static_cast<double>(z[k]) - mx) / sum - (k == y ? 1.0 : 0.0);
    return std::log(sum) + mx - static_cast<double>(z[y]);
  }
  std::size_t best = K;
  for (std::size_t k = 0; k < K; ++k)
    if (k != y && (best == K || z[k] > z[best])) best = k;
  if (grad) {
    std::fill(grad, grad + K, 0.0);
    grad[best] = 1.0;
    grad[y] = -1.0;
  }
  return static_cast<double>(z[best]) - static_cast<double>(z[y]);
}

template <typename Real>
std::vector<double> per_sample(const Tensor<Real>& logits, std::span<const std::size_t> y, LossKind kind) {
  if (logits.rank() != 2) throw ConfigError("logits must be (batch, K)");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (K < 2) throw ConfigError("need at least two classes");
  check_labels(N, K, y);
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) out[n] = row_loss(logits.data() + n * K, K, y[n], kind, nullptr);
  return out;
}

template <typename Real>
void add_head(const Tensor<Real>& logits, std::span<const std::size_t> y, double w, LossKind kind,
              double scale, std::vector<double>& acc, Tensor<Real>& grad) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  check_labels(N, K, y);
  grad = Tensor<Real>(logits.shape());
  std::vector<double> g(K);
  for (std::size_t n = 0; n < N; ++n) {
    acc[n] += w * row_loss(logits.data() + n * K, K, y[n], kind, g.data());
    for (std::size_t k = 0; k < K; ++k) grad(n, k) = static_cast<Real>(w * scale * g[k]);
  }
}

}  // namespace

template <typename Real>
std::vector<double> cross_entropy(const Tensor<Real>& logits, std::span<const std::size_t> y) {
  return per_sample(logits, y, LossKind::cross_entropy);
}

template <typename Real>
std::vector<double> margin(const Tensor<Real>& logits, std::span<const std::size_t> y) {
  return per_sample(logits, y, LossKind::margin);
}

template <typename Real>
LossValue<Real> compose_loss(const Tensor<Real>& final_logits,
                             std::span<const Tensor<Real>> raw_logits, std::span<const std::size_t> y,
                             const HeadWeights& weights, LossKind kind, Reduction reduction) {
  if (weights.raw.size() != raw_logits.size())
    throw ConfigError("raw head count " + std::to_string(raw_logits.size()) + " != weight count " +
                      std::to_string(weights.raw.size()));
  const std::size_t N = final_logits.dim(0);
  const double scale = reduction == Reduction::mean ? 1.0 / static_cast<double>(N) : 1.0;
  LossValue<Real> out;
  out.per_sample.assign(N, 0.0);
  if (weights.final_head != 0.0) {
    add_head(final_logits, y, weights.final_head, kind, scale, out.per_sample, out.d_final);
  } else {
    out.d_final = Tensor<Real>(final_logits.shape());
  }
  out.d_raw.resize(raw_logits.size());
  for (std::size_t l = 0; l < raw_logits.size(); ++l)
    if (weights.raw[l] != 0.0)
      add_head(raw_logits[l], y, weights.raw[l], kind, scale, out.per_sample, out.d_raw[l]);
  double total = 0;
  for (double v : out.per_sample) total += v;
  out.mean = total / static_cast<double>(N);
  return out;
}

template <typename Real>
LossValue<Real> compose_attack_loss(const Tensor<Real>& final_logits,
                                    std::span<const Tensor<Real>> raw_logits,
                                    std::span<const std::size_t> y, const AdaptiveLoss& spec,
                                    LossKind kind) {
  return compose_loss(final_logits, raw_logits, y, head_weights(spec, raw_logits.size()), kind,
                      Reduction::sum);
}

#define CIFS_INSTANTIATE(Real)                                                                     \
  template std::vector<double> cross_entropy(const Tensor<Real>&, std::span<const std::size_t>);   \
  template std::vector<double> margin(const Tensor<Real>&, std::span<const std::size_t>);          \
  template LossValue<Real> compose_loss(const Tensor<Real>&, std::span<const Tensor<Real>>,        \
                                        std::span<const std::size_t>, const HeadWeights&,          \
                                        LossKind, Reduction);                                      \
  template LossValue<Real> compose_attack_loss(const Tensor<Real>&, std::span<const Tensor<Real>>, \
                                               std::span<const std::size_t>, const AdaptiveLoss&,  \
                                               LossKind);

CIFS_INSTANTIATE(float)
CIFS_INSTANTIATE(double)

}  // namespace cifs::attack
