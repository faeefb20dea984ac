#include "cifs/core/cifs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cifs::core {

bool ClassIndexSet::contains(std::size_t cls) const {
  return std::find(indices.begin(), indices.end(), cls) != indices.end();
}

template <typename Real>
ClassIndexSet select_topk(std::span<const Real> logits, std::size_t k,
                          std::optional<std::size_t> true_label) {
  const std::size_t K = logits.size();
  if (k < 1 || k > K)
    throw ConfigError("top-k needs 1 <= k <= K, got k=" + std::to_string(k) +
                      " K=" + std::to_string(K));
  if (true_label && *true_label >= K)
    throw ConfigError("true label " + std::to_string(*true_label) + " outside [0, " +
                      std::to_string(K) + ")");
  if (!all_finite(logits)) throw NumericalError("non-finite logits in top-k selection");

  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  ClassIndexSet set{{order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k)}};
  if (true_label && !set.contains(*true_label)) set.indices.front() = *true_label;
  return set;
}

template <typename Real>
std::vector<ClassIndexSet> select_topk_batch(const Tensor<Real>& logits, std::size_t k,
                                             std::span<const std::size_t> labels) {
  const std::size_t batch = logits.dim(0);
  if (!labels.empty() && labels.size() != batch)
    throw ConfigError("label count " + std::to_string(labels.size()) + " != batch " +
                      std::to_string(batch));
  std::vector<ClassIndexSet> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::optional<std::size_t> label;
    if (!labels.empty()) label = labels[b];
    try {
      out.push_back(select_topk<Real>(logits.row(b), k, label));
    } catch (const NumericalError& e) {
      throw NumericalError("non-finite raw logits", b);
    }
  }
  return out;
}

template <typename Real>
Tensor<Real> selection_matrix(const std::vector<ClassIndexSet>& sets, std::size_t classes) {
  Tensor<Real> s({sets.size(), classes});
  for (std::size_t b = 0; b < sets.size(); ++b)
    for (std::size_t i : sets[b].indices) s(b, i) = Real(1);
  return s;
}

template <typename Real>
RelevanceVector<Real> assess_relevance(const ProbeTrace<Real>& trace, const Probe<Real>& probe,
                                       const Tensor<Real>& selection) {
  // Shifting every position of channel c by delta_c shifts its mean by
  // delta_c, so grad over delta equals the probe's gradient w.r.t. the pooled input.
  RelevanceVector<Real> g{probe.input_vjp(trace, selection)};
  require_finite(g.values, "relevance gradient");
  return g;
}

template <typename Real>
RelevanceVector<Real> assess_relevance(const FeatureMap<Real>& z, const Probe<Real>& probe,
                                       const std::vector<ClassIndexSet>& classes) {
  if (classes.size() != z.batch())
    throw ConfigError("need one class set per sample");
  for (const auto& set : classes)
    for (std::size_t i : set.indices)
      if (i >= probe.classes())
        throw ConfigError("class index " + std::to_string(i) + " outside probe output");
  const auto trace = probe.forward(z);
  return assess_relevance(trace, probe, selection_matrix<Real>(classes, probe.classes()));
}

std::string to_string(ImgfKind kind) {
  switch (kind) {
    case ImgfKind::sigmoid: return "sigmoid";
    case ImgfKind::softplus: return "softplus";
    case ImgfKind::softmax: return "softmax";
  }
  return "?";
}

ImgfKind parse_imgf_kind(const std::string& s) {
  if (s == "sigmoid") return ImgfKind::sigmoid;
  if (s == "softplus") return ImgfKind::softplus;
  if (s == "softmax") return ImgfKind::softmax;
  throw ConfigError("unknown IMGF '" + s + "'");
}

void ImgfConfig::validate() const {
  if (kind == ImgfKind::softmax) {
    if (!(temperature > 0) || !std::isfinite(temperature))
      throw ConfigError("softmax IMGF needs temperature > 0");
  } else if (!(alpha > 0) || !std::isfinite(alpha)) {
    throw ConfigError(to_string(kind) + " IMGF needs alpha > 0");
  }
}

namespace {

template <typename Real>
Real stable_sigmoid(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

}  // namespace

template <typename Real>
ImportanceMask<Real> generate_mask(const RelevanceVector<Real>& g, const ImgfConfig& cfg) {
  cfg.validate();
  ImportanceMask<Real> m{Tensor<Real>(g.values.shape())};
  const auto alpha = static_cast<Real>(cfg.alpha);
  switch (cfg.kind) {
    case ImgfKind::sigmoid:
      for (std::size_t i = 0; i < g.values.size(); ++i)
        m.values[i] = stable_sigmoid(alpha * g.values[i]);
      break;
    case ImgfKind::softplus:
      for (std::size_t i = 0; i < g.values.size(); ++i) {
        const Real x = alpha * g.values[i];
        m.values[i] = (std::max(x, Real(0)) + std::log1p(std::exp(-std::abs(x)))) / alpha;
      }
      break;
    case ImgfKind::softmax: {
      const auto inv_t = static_cast<Real>(1.0 / cfg.temperature);
      for (std::size_t b = 0; b < g.values.dim(0); ++b) {
        auto in = g.values.row(b);
        auto out = m.values.row(b);
        const Real top = *std::max_element(in.begin(), in.end()) * inv_t;
        Real sum = 0;
        for (std::size_t c = 0; c < in.size(); ++c) sum += out[c] = std::exp(in[c] * inv_t - top);
        for (auto& v : out) v /= sum;
      }
      break;
    }
  }
  return m;
}

template <typename Real>
Tensor<Real> mask_vjp(const RelevanceVector<Real>& g, const ImportanceMask<Real>& m,
                      const ImgfConfig& cfg, const Tensor<Real>& grad_mask) {
  Tensor<Real> dg(g.values.shape());
  const auto alpha = static_cast<Real>(cfg.alpha);
  switch (cfg.kind) {
    case ImgfKind::sigmoid:
      for (std::size_t i = 0; i < dg.size(); ++i)
        dg[i] = grad_mask[i] * alpha * m.values[i] * (Real(1) - m.values[i]);
      break;
    case ImgfKind::softplus:
      for (std::size_t i = 0; i < dg.size(); ++i)
        dg[i] = grad_mask[i] * stable_sigmoid(alpha * g.values[i]);
      break;
    case ImgfKind::softmax: {
      const auto inv_t = static_cast<Real>(1.0 / cfg.temperature);
      for (std::size_t b = 0; b < dg.dim(0); ++b) {
        auto mm = m.values.row(b);
        auto dm = grad_mask.row(b);
        Real dot = 0;
        for (std::size_t c = 0; c < mm.size(); ++c) dot += mm[c] * dm[c];
        auto out = dg.row(b);
        for (std::size_t c = 0; c < mm.size(); ++c) out[c] = mm[c] * (dm[c] - dot) * inv_t;
      }
      break;
    }
  }
  return dg;
}

template <typename Real>
FeatureMap<Real> apply_mask(const FeatureMap<Real>& z, const ImportanceMask<Real>& m) {
  if (m.values.rank() != 2 || m.values.dim(0) != z.batch() || m.values.dim(1) != z.channels())
    throw ConfigError("mask shape " + shape_string(m.values.shape()) +
                      " does not match feature map " + shape_string(z.tensor().shape()));
  FeatureMap<Real> out(Tensor<Real>(z.tensor().shape()));
  for (std::size_t b = 0; b < z.batch(); ++b)
    for (std::size_t c = 0; c < z.channels(); ++c) {
      const Real s = m.values(b, c);
      auto in = z.channel(b, c);
      auto dst = out.channel(b, c);
      for (std::size_t f = 0; f < in.size(); ++f) dst[f] = in[f] * s;
    }
  return out;
}

std::string to_string(GradMode mode) { return mode == GradMode::detached ? "detached" : "through"; }

GradMode parse_grad_mode(const std::string& s) {
  if (s == "detached") return GradMode::detached;
  if (s == "through") return GradMode::through;
  throw ConfigError("unknown gradient mode '" + s + "'");
}

template <typename Real>
CifsOutput<Real> cifs_forward(const FeatureMap<Real>& z, const Probe<Real>& probe, std::size_t k,
                              const ImgfConfig& imgf, std::span<const std::size_t> true_labels,
                              GradMode grad_mode) {
  imgf.validate();
  const auto trace = probe.forward(z);
  CifsOutput<Real> out;
  out.classes = select_topk_batch(trace.logits, k, true_labels);
  out.relevance =
      assess_relevance(trace, probe, selection_matrix<Real>(out.classes, probe.classes()));
  out.mask = generate_mask(out.relevance, imgf);
  out.masked = apply_mask(z, out.mask);
  out.raw_logits = trace.logits;
  out.grad_mode = grad_mode;
  return out;
}

template <typename Real>
CifsLayer<Real>::CifsLayer(Probe<Real> probe, std::size_t top_k, ImgfConfig imgf)
    : probe_(std::move(probe)), top_k_(top_k), imgf_(imgf) {
  imgf_.validate();
  if (top_k_ < 1 || top_k_ > probe_.classes())
    throw ConfigError("top-k must lie in [1, " + std::to_string(probe_.classes()) + "]");
}

template <typename Real>
FeatureMap<Real> CifsLayer<Real>::forward(FeatureMap<Real> z,
                                          std::span<const std::size_t> true_labels,
                                          Trace& trace) const {
  trace.probe = probe_.forward(z);
  const auto classes = select_topk_batch(trace.probe.logits, top_k_, true_labels);
  trace.selection = selection_matrix<Real>(classes, probe_.classes());
  trace.relevance = assess_relevance(trace.probe, probe_, trace.selection);
  if (mask_override_) {
    trace.mask.values = Tensor<Real>(trace.relevance.values.shape(), *mask_override_);
  } else {
    trace.mask = generate_mask(trace.relevance, imgf_);
  }
  auto masked = apply_mask(z, trace.mask);
  trace.input = std::move(z);
  return masked;
}

template <typename Real>
FeatureMap<Real> CifsLayer<Real>::backward(const Trace& trace, const FeatureMap<Real>& grad_masked,
                                           const Tensor<Real>* grad_raw, GradMode mode,
                                           std::span<Tensor<Real>> probe_grads) const {
  const auto& z = trace.input;
  if (!grad_masked.same_layout(z)) throw ConfigError("gradient layout does not match CIFS input");
  const std::size_t B = z.batch(), C = z.channels();
  FeatureMap<Real> dz(Tensor<Real>(z.tensor().shape()));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const Real s = trace.mask.values(b, c);
      auto g = grad_masked.channel(b, c);
      auto out = dz.channel(b, c);
      for (std::size_t f = 0; f < g.size(); ++f) out[f] = g[f] * s;
    }

  Tensor<Real> du({B, C});
  if (grad_raw) {
    du = probe_.input_vjp(trace.probe, *grad_raw);
    probe_.accumulate_parameter_vjp(trace.probe, *grad_raw, probe_grads);
  }
  if (mode == GradMode::through && !mask_override_) {
    Tensor<Real> dm({B, C});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        auto g = grad_masked.channel(b, c);
        auto x = z.channel(b, c);
        Real acc = 0;
        for (std::size_t f = 0; f < g.size(); ++f) acc += g[f] * x[f];
        dm(b, c) = acc;
      }
    const auto dg = mask_vjp(trace.relevance, trace.mask, imgf_, dm);
    const auto du2 = probe_.relevance_vjp(trace.probe, trace.selection, dg, probe_grads);
    for (std::size_t i = 0; i < du.size(); ++i) du[i] += du2[i];
  }

  const Real inv_f = Real(1) / static_cast<Real>(z.features());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const Real add = du(b, c) * inv_f;
      if (add == Real(0)) continue;
      for (auto& v : dz.channel(b, c)) v += add;
    }
  return dz;
}

#define CIFS_INSTANTIATE(Real)                                                                   \
  template ClassIndexSet select_topk<Real>(std::span<const Real>, std::size_t,                  \
                                           std::optional<std::size_t>);                          \
  template std::vector<ClassIndexSet> select_topk_batch(const Tensor<Real>&, std::size_t,       \
                                                        std::span<const std::size_t>);           \
  template Tensor<Real> selection_matrix<Real>(const std::vector<ClassIndexSet>&, std::size_t); \
  template RelevanceVector<Real> assess_relevance(const FeatureMap<Real>&, const Probe<Real>&,  \
                                                  const std::vector<ClassIndexSet>&);            \
  template RelevanceVector<Real> assess_relevance(const ProbeTrace<Real>&, const Probe<Real>&,  \
                                                  const Tensor<Real>&);                          \
  template ImportanceMask<Real> generate_mask(const RelevanceVector<Real>&, const ImgfConfig&); \
  template Tensor<Real> mask_vjp(const RelevanceVector<Real>&, const ImportanceMask<Real>&,     \
                                 const ImgfConfig&, const Tensor<Real>&);                        \
  template FeatureMap<Real> apply_mask(const FeatureMap<Real>&, const ImportanceMask<Real>&);   \
  template CifsOutput<Real> cifs_forward(const FeatureMap<Real>&, const Probe<Real>&,           \
                                         std::size_t, const ImgfConfig&,                         \
                                         std::span<const std::size_t>, GradMode);                \
  template class CifsLayer<Real>;

CIFS_INSTANTIATE(float)
CIFS_INSTANTIATE(double)

}  // namespace cifs::core
