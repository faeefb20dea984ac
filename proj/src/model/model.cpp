#include "cifs/model/model.hpp"

#include <algorithm>

namespace cifs::model {

template <typename Real>
BasicBlock<Real>::BasicBlock(std::size_t in, std::size_t out, std::size_t stride)
    : conv1(in, out, 3, stride, 1), conv2(out, out, 3, 1, 1), bn1(out), bn2(out),
      projection(stride != 1 || in != out) {
  if (projection) {
    shortcut_conv = Conv2d<Real>(in, out, 1, stride, 0);
    shortcut_bn = BatchNorm2d<Real>(out);
  }
}

template <typename Real>
Tensor<Real> Normalize<Real>::forward(const Tensor<Real>& x) const {
  Tensor<Real> y(x.shape());
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.size() / (N * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) y[off + i] = (x[off + i] - mean[c]) / stddev[c];
    }
  return y;
}

template <typename Real>
Tensor<Real> Normalize<Real>::backward(const Tensor<Real>& dy) const {
  Tensor<Real> dx(dy.shape());
  const std::size_t N = dy.dim(0), C = dy.dim(1), HW = dy.size() / (N * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) dx[off + i] = dy[off + i] / stddev[c];
    }
  return dx;
}

template <typename Real>
Tensor<Real> Normalize<Real>::inverse(const Tensor<Real>& y) const {
  Tensor<Real> x(y.shape());
  const std::size_t N = y.dim(0), C = y.dim(1), HW = y.size() / (N * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) x[off + i] = y[off + i] * stddev[c] + mean[c];
    }
  return x;
}

template <typename Real>
core::Probe<Real> build_probe(const ProbeSpec& spec, std::size_t channels, std::size_t classes) {
  if (spec.kind == core::ProbeKind::linear) return core::Probe<Real>::linear(channels, classes);
  if (spec.hidden == 0) throw ConfigError("mlp2 probe needs a positive hidden width");
  return core::Probe<Real>::mlp2(channels, spec.hidden, classes, spec.activation);
}

template <typename Real>
Model<Real>::Model(ArchConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  for (std::size_t c = 0; c < cfg_.input_shape[0]; ++c) {
    norm_.mean.push_back(static_cast<Real>(cfg_.norm_mean[c]));
    norm_.stddev.push_back(static_cast<Real>(cfg_.norm_std[c]));
  }
  const std::size_t w0 = cfg_.stage_width(0);
  stem_conv_ = Conv2d<Real>(cfg_.input_shape[0], w0, 3, 1, 1);
  stem_bn_ = BatchNorm2d<Real>(w0);

  std::vector<std::size_t> block_channels;
  std::size_t in = w0;
  const auto per_stage = cfg_.blocks_per_stage();
  for (std::size_t s = 0; s < per_stage.size(); ++s)
    for (std::size_t b = 0; b < per_stage[s]; ++b) {
      const std::size_t out = cfg_.stage_width(s);
      blocks_.emplace_back(in, out, s > 0 && b == 0 ? 2 : 1);
      block_channels.push_back(out);
      in = out;
    }
  fc_ = Linear<Real>(in, cfg_.num_classes);

  auto specs = cfg_.cifs;
  std::sort(specs.begin(), specs.end(), [&](const CifsSpec& a, const CifsSpec& b) {
    return cfg_.block_index(a.position) < cfg_.block_index(b.position);
  });
  cifs_at_block_.assign(blocks_.size(), -1);
  for (const auto& s : specs) {
    const std::size_t block = cfg_.block_index(s.position);
    cifs_at_block_[block] = static_cast<std::ptrdiff_t>(cifs_.size());
    cifs_.emplace_back(build_probe<Real>(s.probe, block_channels[block], cfg_.num_classes),
                       cfg_.top_k, cfg_.imgf);
    cifs_positions_.push_back(s.position);
  }
  assign_slots();
}

template <typename Real>
void Model<Real>::assign_slots() {
  std::size_t slot = 0;
  auto place = [&](ParamLayer<Real>& layer) {
    layer.set_slot(slot);
    slot += layer.parameters().size();
  };
  place(stem_conv_);
  place(stem_bn_);
  for (auto& b : blocks_) {
    place(b.conv1);
    place(b.bn1);
    place(b.conv2);
    place(b.bn2);
    if (b.projection) {
      place(b.shortcut_conv);
      place(b.shortcut_bn);
    }
  }
  place(fc_);
  probe_slot_.clear();
  for (auto& c : cifs_) {
    probe_slot_.push_back(slot);
    slot += c.probe().parameters().size();
  }
}

template <typename Real>
std::vector<Parameter<Real>*> Model<Real>::parameters() {
  std::vector<Parameter<Real>*> out;
  auto add = [&](auto& layer) {
    for (auto& p : layer.parameters()) out.push_back(&p);
  };
  add(stem_conv_);
  add(stem_bn_);
  for (auto& b : blocks_) {
    add(b.conv1);
    add(b.bn1);
    add(b.conv2);
    add(b.bn2);
    if (b.projection) {
      add(b.shortcut_conv);
      add(b.shortcut_bn);
    }
  }
  add(fc_);
  for (auto& c : cifs_) add(c.probe());
  return out;
}

template <typename Real>
std::vector<const Parameter<Real>*> Model<Real>::parameters() const {
  auto mut = const_cast<Model*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename Real>
std::size_t Model<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename Real>
GradientSet<Real> Model<Real>::make_gradients() const {
  return cifs::make_gradients(parameters());
}

template <typename Real>
std::pair<std::size_t, std::size_t> Model<Real>::probe_slots(std::size_t i) const {
  return {probe_slot_.at(i), cifs_.at(i).probe().parameters().size()};
}

template <typename Real>
std::map<std::string, Tensor<Real>*> Model<Real>::state_tensors() {
  std::map<std::string, Tensor<Real>*> out;
  auto add = [&](const std::string& prefix, auto& layer) {
    for (auto& p : layer.parameters()) out[prefix + "." + p.name] = &p.value;
  };
  auto add_bn = [&](const std::string& prefix, BatchNorm2d<Real>& bn) {
    add(prefix, bn);
    out[prefix + ".running_mean"] = &bn.running_mean();
    out[prefix + ".running_var"] = &bn.running_var();
  };
  add("stem.conv", stem_conv_);
  add_bn("stem.bn", stem_bn_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& b = blocks_[i];
    const std::string p = "blocks." + std::to_string(i);
    add(p + ".conv1", b.conv1);
    add_bn(p + ".bn1", b.bn1);
    add(p + ".conv2", b.conv2);
    add_bn(p + ".bn2", b.bn2);
    if (b.projection) {
      add(p + ".shortcut.conv", b.shortcut_conv);
      add_bn(p + ".shortcut.bn", b.shortcut_bn);
    }
  }
  add("fc", fc_);
  for (std::size_t i = 0; i < cifs_.size(); ++i)
    add("cifs." + to_string(cifs_positions_[i]) + ".probe", cifs_[i].probe());
  return out;
}

template <typename Real>
std::map<std::string, const Tensor<Real>*> Model<Real>::state_tensors() const {
  auto mut = const_cast<Model*>(this)->state_tensors();
  return {mut.begin(), mut.end()};
}

template <typename Real>
void Model<Real>::set_mask_override(std::optional<Real> value) {
  for (auto& c : cifs_) c.set_mask_override(value);
}

template <typename Real>
void Model<Real>::initialize(std::uint64_t seed) {
  Rng backbone(derive_seed(seed, 0));
  stem_conv_.initialize(backbone);
  for (auto& b : blocks_) {
    b.conv1.initialize(backbone);
    b.conv2.initialize(backbone);
    if (b.projection) b.shortcut_conv.initialize(backbone);
  }
  fc_.initialize(backbone);
  for (std::size_t i = 0; i < cifs_.size(); ++i) {
    Rng probe_rng(derive_seed(seed, cifs_positions_[i] == Position::P1 ? 1 : 2));
    cifs_[i].probe().initialize(probe_rng);
  }
}

template <typename Real>
Tensor<Real> Model<Real>::block_forward(const BasicBlock<Real>& b, const Tensor<Real>& x,
                                        Phase phase, typename BasicBlock<Real>::Cache& c) const {
  auto h = b.bn1.forward(b.conv1.forward(x, c.conv1), phase, c.bn1);
  relu_inplace(h);
  c.hidden = h;
  auto out = b.bn2.forward(b.conv2.forward(h, c.conv2), phase, c.bn2);
  if (b.projection) {
    const auto s = b.shortcut_bn.forward(b.shortcut_conv.forward(x, c.shortcut_conv), phase,
                                         c.shortcut_bn);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
  }
  relu_inplace(out);
  c.output = out;
  return out;
}

template <typename Real>
Tensor<Real> Model<Real>::block_backward(const BasicBlock<Real>& b, const Tensor<Real>& dy,
                                         const typename BasicBlock<Real>::Cache& c,
                                         GradientSet<Real>* grads) const {
  const auto d = relu_backward(dy, c.output);
  auto dh = b.conv2.backward(b.bn2.backward(d, c.bn2, grads), c.conv2, grads);
  dh = relu_backward(dh, c.hidden);
  auto dx = b.conv1.backward(b.bn1.backward(dh, c.bn1, grads), c.conv1, grads);
  if (b.projection) {
    const auto ds =
        b.shortcut_conv.backward(b.shortcut_bn.backward(d, c.shortcut_bn, grads), c.shortcut_conv, grads);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
  } else {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d[i];
  }
  return dx;
}

template <typename Real>
ForwardState<Real> Model<Real>::forward(const Tensor<Real>& x, const ForwardOptions& opts) const {
  if (x.rank() != 4 || x.dim(0) == 0 || x.dim(1) != cfg_.input_shape[0] ||
      x.dim(2) != cfg_.input_shape[1] || x.dim(3) != cfg_.input_shape[2])
    throw ConfigError("model expects (N, " + std::to_string(cfg_.input_shape[0]) + ", " +
                      std::to_string(cfg_.input_shape[1]) + ", " +
                      std::to_string(cfg_.input_shape[2]) + ") input, got " +
                      shape_string(x.shape()));
  require_finite(x, "input");
  ForwardState<Real> st;
  st.input_shape = x.shape();
  auto h = stem_bn_.forward(stem_conv_.forward(norm_.forward(x), st.stem_conv), opts.phase,
                            st.stem_bn);
  relu_inplace(h);
  st.stem_out = h;
  st.blocks.resize(blocks_.size());
  st.cifs.reserve(cifs_.size());
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = block_forward(blocks_[i], h, opts.phase, st.blocks[i]);
    if (const auto k = cifs_at_block_[i]; k >= 0) {
      auto& trace = st.cifs.emplace_back();
      h = cifs_[k].forward(core::FeatureMap<Real>(std::move(h)), opts.labels, trace).take();
      require_finite(trace.probe.logits, "raw logits at " + to_string(cifs_positions_[k]));
      st.raw_logits.push_back(trace.probe.logits);
    }
  }
  st.penultimate = global_average_pool(h);
  st.features = std::move(h);
  st.logits = fc_.forward(st.penultimate);
  require_finite(st.logits, "final logits");
  return st;
}

template <typename Real>
HeadOutputs<Real> Model<Real>::predict(const Tensor<Real>& x, const ForwardOptions& opts) const {
  auto st = forward(x, opts);
  return {std::move(st.logits), std::move(st.raw_logits)};
}

template <typename Real>
Tensor<Real> Model<Real>::input_gradient(const Tensor<Real>& x, const ForwardOptions& opts,
                                         core::GradMode mode, const HeadLoss<Real>& loss,
                                         HeadOutputs<Real>* outputs) const {
  auto st = forward(x, opts);
  HeadOutputs<Real> heads{std::move(st.logits), std::move(st.raw_logits)};
  const auto g = loss(heads);
  // backward reads only the layer caches, never the logits moved out above.
  auto dx = backward(st, g.d_final, g.d_raw, mode, nullptr);
  if (outputs) *outputs = std::move(heads);
  return dx;
}

template <typename Real>
Tensor<Real> Model<Real>::backward(const ForwardState<Real>& st, const Tensor<Real>& d_logits,
                                   std::span<const Tensor<Real>> d_raw, core::GradMode mode,
                                   GradientSet<Real>* grads) const {
  const auto dpen = fc_.backward(d_logits, st.penultimate, grads);
  auto d = global_average_pool_backward(dpen, st.features.shape());
  for (std::size_t i = blocks_.size(); i-- > 0;) {
    if (const auto k = cifs_at_block_[i]; k >= 0) {
      const auto idx = static_cast<std::size_t>(k);
      const Tensor<Real>* gr = idx < d_raw.size() && !d_raw[idx].empty() ? &d_raw[idx] : nullptr;
      std::span<Tensor<Real>> pg;
      if (grads) pg = std::span<Tensor<Real>>(grads->slots).subspan(probe_slot_[idx],
                                                                   cifs_[idx].probe().parameters().size());
      d = cifs_[idx].backward(st.cifs[idx], core::FeatureMap<Real>(std::move(d)), gr, mode, pg).take();
    }
    d = block_backward(blocks_[i], d, st.blocks[i], grads);
  }
  d = relu_backward(d, st.stem_out);
  d = stem_conv_.backward(stem_bn_.backward(d, st.stem_bn, grads), st.stem_conv, grads);
  return norm_.backward(d);
}

template <typename Real>
void Model<Real>::commit_running_stats(const ForwardState<Real>& st) {
  stem_bn_.commit(st.stem_bn);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].bn1.commit(st.blocks[i].bn1);
    blocks_[i].bn2.commit(st.blocks[i].bn2);
    if (blocks_[i].projection) blocks_[i].shortcut_bn.commit(st.blocks[i].shortcut_bn);
  }
}

template <typename Real>
Tensor<Real> Model<Real>::penultimate_channel_activations(const Tensor<Real>& x) const {
  return forward(x).penultimate;
}

template <typename Real>
Model<Real> build_model(const ArchConfig& cfg, std::uint64_t seed) {
  Model<Real> m(cfg);
  m.initialize(seed);
  return m;
}

#define CIFS_INSTANTIATE(Real)                                                              \
  template struct BasicBlock<Real>;                                                         \
  template struct Normalize<Real>;                                                          \
  template class Model<Real>;                                                               \
  template Model<Real> build_model<Real>(const ArchConfig&, std::uint64_t);                 \
  template core::Probe<Real> build_probe<Real>(const ProbeSpec&, std::size_t, std::size_t);

CIFS_INSTANTIATE(float)
CIFS_INSTANTIATE(double)

}  // namespace cifs::model
