#include "cifs/core/probe.hpp"

#include <cmath>

#include "common/linalg.hpp"

namespace cifs::core {

using linalg::view;

std::string to_string(ProbeKind kind) { return kind == ProbeKind::linear ? "linear" : "mlp2"; }

std::string to_string(ProbeActivation act) {
  return act == ProbeActivation::relu ? "relu" : "tanh";
}

ProbeKind parse_probe_kind(const std::string& s) {
  if (s == "linear") return ProbeKind::linear;
  if (s == "mlp2") return ProbeKind::mlp2;
  throw ConfigError("unknown probe kind '" + s + "'");
}

ProbeActivation parse_probe_activation(const std::string& s) {
  if (s == "relu") return ProbeActivation::relu;
  if (s == "tanh") return ProbeActivation::tanh;
  throw ConfigError("unknown probe activation '" + s + "'");
}

namespace {

template <typename Real>
Real act_value(ProbeActivation a, Real h) {
  return a == ProbeActivation::relu ? (h > 0 ? h : Real(0)) : std::tanh(h);
}

template <typename Real>
Real act_first(ProbeActivation a, Real h, Real out) {
  return a == ProbeActivation::relu ? (h > 0 ? Real(1) : Real(0)) : Real(1) - out * out;
}

template <typename Real>
Real act_second(ProbeActivation a, Real out) {
  // The rectifier is piecewise linear, so its second derivative vanishes a.e.
  return a == ProbeActivation::relu ? Real(0) : Real(-2) * out * (Real(1) - out * out);
}

}  // namespace

template <typename Real>
Probe<Real>::Probe(ProbeKind kind, std::size_t channels, std::size_t hidden, std::size_t classes,
                   ProbeActivation activation)
    : kind_(kind), activation_(activation), channels_(channels), hidden_(hidden), classes_(classes) {
  if (channels == 0 || classes == 0) throw ConfigError("probe needs channels >= 1 and classes >= 1");
  if (kind == ProbeKind::linear) {
    params_.push_back({"weight", Tensor<Real>({classes, channels}), true});
    params_.push_back({"bias", Tensor<Real>({classes}), true});
  } else {
    if (hidden == 0) throw ConfigError("mlp2 probe needs a hidden width >= 1");
    params_.push_back({"fc1.weight", Tensor<Real>({hidden, channels}), true});
    params_.push_back({"fc1.bias", Tensor<Real>({hidden}), true});
    params_.push_back({"fc2.weight", Tensor<Real>({classes, hidden}), true});
    params_.push_back({"fc2.bias", Tensor<Real>({classes}), true});
  }
}

template <typename Real>
Probe<Real> Probe<Real>::linear(std::size_t channels, std::size_t classes) {
  return Probe(ProbeKind::linear, channels, 0, classes, ProbeActivation::relu);
}

template <typename Real>
Probe<Real> Probe<Real>::mlp2(std::size_t channels, std::size_t hidden, std::size_t classes,
                              ProbeActivation activation) {
  return Probe(ProbeKind::mlp2, channels, hidden, classes, activation);
}

template <typename Real>
std::size_t Probe<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename Real>
void Probe<Real>::initialize(Rng& rng) {
  for (std::size_t i = 0; i < params_.size(); i += 2) {
    const std::size_t fan_in = params_[i].value.dim(1);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : params_[i].value.values()) v = static_cast<Real>(dist(rng));
    for (auto& v : params_[i + 1].value.values()) v = static_cast<Real>(dist(rng));
  }
}

template <typename Real>
ProbeTrace<Real> Probe<Real>::forward(const FeatureMap<Real>& z) const {
  if (z.channels() != channels_)
    throw ConfigError("probe expects " + std::to_string(channels_) + " channels, feature map has " +
                      std::to_string(z.channels()));
  return forward_pooled(z.pooled());
}

template <typename Real>
ProbeTrace<Real> Probe<Real>::forward_pooled(Tensor<Real> pooled) const {
  if (pooled.rank() != 2 || pooled.dim(1) != channels_)
    throw ConfigError("probe expects pooled input (batch, " + std::to_string(channels_) +
                      "), got " + shape_string(pooled.shape()));
  const auto batch = static_cast<Eigen::Index>(pooled.dim(0));
  const auto C = static_cast<Eigen::Index>(channels_);
  const auto K = static_cast<Eigen::Index>(classes_);
  ProbeTrace<Real> t;
  t.logits = Tensor<Real>({pooled.dim(0), classes_});
  auto u = view(pooled.data(), batch, C);
  auto logits = view(t.logits.data(), batch, K);
  if (kind_ == ProbeKind::linear) {
    logits.noalias() = u * view(w(0).data(), K, C).transpose();
    logits.rowwise() += view(w(1).data(), 1, K).row(0);
  } else {
    const auto H = static_cast<Eigen::Index>(hidden_);
    t.hidden_pre = Tensor<Real>({pooled.dim(0), hidden_});
    auto hp = view(t.hidden_pre.data(), batch, H);
    hp.noalias() = u * view(w(0).data(), H, C).transpose();
    hp.rowwise() += view(w(1).data(), 1, H).row(0);
    t.hidden = t.hidden_pre;
    for (auto& v : t.hidden.values()) v = act_value(activation_, v);
    logits.noalias() = view(t.hidden.data(), batch, H) * view(w(2).data(), K, H).transpose();
    logits.rowwise() += view(w(3).data(), 1, K).row(0);
  }
  t.pooled = std::move(pooled);
  return t;
}

template <typename Real>
Tensor<Real> Probe<Real>::input_vjp(const ProbeTrace<Real>& t, const Tensor<Real>& cot) const {
  const auto batch = static_cast<Eigen::Index>(t.pooled.dim(0));
  const auto C = static_cast<Eigen::Index>(channels_);
  const auto K = static_cast<Eigen::Index>(classes_);
  Tensor<Real> du({t.pooled.dim(0), channels_});
  auto out = view(du.data(), batch, C);
  auto c = view(cot.data(), batch, K);
  if (kind_ == ProbeKind::linear) {
    out.noalias() = c * view(w(0).data(), K, C);
  } else {
    const auto H = static_cast<Eigen::Index>(hidden_);
    linalg::RowMatrix<Real> dh = c * view(w(2).data(), K, H);
    for (Eigen::Index b = 0; b < batch; ++b)
      for (Eigen::Index j = 0; j < H; ++j)
        dh(b, j) *= act_first(activation_, t.hidden_pre(b, j), t.hidden(b, j));
    out.noalias() = dh * view(w(0).data(), H, C);
  }
  return du;
}

template <typename Real>
void Probe<Real>::accumulate_parameter_vjp(const ProbeTrace<Real>& t, const Tensor<Real>& cot,
                                           std::span<Tensor<Real>> grads) const {
  if (grads.empty()) return;
  const auto batch = static_cast<Eigen::Index>(t.pooled.dim(0));
  const auto C = static_cast<Eigen::Index>(channels_);
  const auto K = static_cast<Eigen::Index>(classes_);
  auto c = view(cot.data(), batch, K);
  auto u = view(t.pooled.data(), batch, C);
  if (kind_ == ProbeKind::linear) {
    view(grads[0].data(), K, C).noalias() += c.transpose() * u;
    view(grads[1].data(), 1, K).row(0) += c.colwise().sum();
  } else {
    const auto H = static_cast<Eigen::Index>(hidden_);
    auto h = view(t.hidden.data(), batch, H);
    view(grads[2].data(), K, H).noalias() += c.transpose() * h;
    view(grads[3].data(), 1, K).row(0) += c.colwise().sum();
    linalg::RowMatrix<Real> dh = c * view(w(2).data(), K, H);
    for (Eigen::Index b = 0; b < batch; ++b)
      for (Eigen::Index j = 0; j < H; ++j)
        dh(b, j) *= act_first(activation_, t.hidden_pre(b, j), t.hidden(b, j));
    view(grads[0].data(), H, C).noalias() += dh.transpose() * u;
    view(grads[1].data(), 1, H).row(0) += dh.colwise().sum();
  }
}

template <typename Real>
Tensor<Real> Probe<Real>::relevance_vjp(const ProbeTrace<Real>& t, const Tensor<Real>& selection,
                                        const Tensor<Real>& v,
                                        std::span<Tensor<Real>> grads) const {
  const auto batch = static_cast<Eigen::Index>(t.pooled.dim(0));
  const auto C = static_cast<Eigen::Index>(channels_);
  const auto K = static_cast<Eigen::Index>(classes_);
  auto s = view(selection.data(), batch, K);
  auto vv = view(v.data(), batch, C);
  Tensor<Real> du({t.pooled.dim(0), channels_});

  if (kind_ == ProbeKind::linear) {
    // g = W^T s does not depend on u; only the weight sees phi.
    if (!grads.empty()) view(grads[0].data(), K, C).noalias() += s.transpose() * vv;
    return du;
  }

  // g = W1^T (act'(h) * W2^T s). With r = W2^T s and w = W1 v:
  //   phi = sum_j w_j act'(h_j) r_j
  const auto H = static_cast<Eigen::Index>(hidden_);
  auto W1 = view(w(0).data(), H, C);
  auto W2 = view(w(2).data(), K, H);
  linalg::RowMatrix<Real> r = s * W2;
  linalg::RowMatrix<Real> wv = vv * W1.transpose();
  linalg::RowMatrix<Real> d1(batch, H), tt(batch, H);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index j = 0; j < H; ++j) {
      const Real out = t.hidden(b, j);
      d1(b, j) = act_first(activation_, t.hidden_pre(b, j), out);
      tt(b, j) = wv(b, j) * r(b, j) * act_second(activation_, out);
    }
  view(du.data(), batch, C).noalias() = tt * W1;
  if (!grads.empty()) {
    auto u = view(t.pooled.data(), batch, C);
    linalg::RowMatrix<Real> q = d1.cwiseProduct(r);
    view(grads[0].data(), H, C).noalias() += tt.transpose() * u + q.transpose() * vv;
    view(grads[1].data(), 1, H).row(0) += tt.colwise().sum();
    linalg::RowMatrix<Real> wd = wv.cwiseProduct(d1);
    view(grads[2].data(), K, H).noalias() += s.transpose() * wd;
  }
  return du;
}

template <typename Real>
Tensor<Real> probe_forward(const FeatureMap<Real>& z, const Probe<Real>& probe) {
  return probe.forward(z).logits;
}

template class Probe<float>;
template class Probe<double>;
template Tensor<float> probe_forward(const FeatureMap<float>&, const Probe<float>&);
template Tensor<double> probe_forward(const FeatureMap<double>&, const Probe<double>&);

}  // namespace cifs::core
