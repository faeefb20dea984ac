#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cifs/core/cifs.hpp"
#include "cifs/model/arch_config.hpp"
#include "cifs/model/classifier.hpp"
#include "cifs/model/layers.hpp"

namespace cifs::model {

/// Residual block: conv3x3-bn-relu-conv3x3-bn plus identity or 1x1 projection shortcut, then relu.
template <typename Real>
struct BasicBlock {
  Conv2d<Real> conv1, conv2, shortcut_conv;
  BatchNorm2d<Real> bn1, bn2, shortcut_bn;
  bool projection = false;

  struct Cache {
    typename Conv2d<Real>::Cache conv1, conv2, shortcut_conv;
    typename BatchNorm2d<Real>::Cache bn1, bn2, shortcut_bn;
    Tensor<Real> hidden;  // after the first relu
    Tensor<Real> output;  // after the final relu
  };

  BasicBlock() = default;
  BasicBlock(std::size_t in, std::size_t out, std::size_t stride);
};

/// Per-channel (x - mean) / std on raw [0, 1] pixels.
template <typename Real>
struct Normalize {
  std::vector<Real> mean, stddev;

  Tensor<Real> forward(const Tensor<Real>& x) const;
  Tensor<Real> backward(const Tensor<Real>& dy) const;
  Tensor<Real> inverse(const Tensor<Real>& y) const;
};

/// Everything a forward pass leaves behind for backward and diagnostics.
template <typename Real>
struct ForwardState {
  Shape input_shape;
  typename Conv2d<Real>::Cache stem_conv;
  typename BatchNorm2d<Real>::Cache stem_bn;
  Tensor<Real> stem_out;
  std::vector<typename BasicBlock<Real>::Cache> blocks;
  std::vector<typename core::CifsLayer<Real>::Trace> cifs;  // depth order
  Tensor<Real> features;     // last block output after any masking, NCHW
  Tensor<Real> penultimate;  // spatial mean of `features`, (N, C)
  Tensor<Real> logits;       // (N, K)
  std::vector<Tensor<Real>> raw_logits;  // one per CIFS module, upstream first
};

/// ResNet-style classifier with optional CIFS modules after residual blocks.
/// Normalization is the first layer, so inputs live in [0, 1] pixel space.
template <typename Real>
class Model : public Classifier<Real> {
 public:
  explicit Model(ArchConfig cfg);

  const ArchConfig& config() const noexcept { return cfg_; }
  std::size_t num_classes() const noexcept override { return cfg_.num_classes; }
  std::size_t num_raw_heads() const noexcept override { return cifs_.size(); }
  /// |I|, the number of raw predictions.
  std::size_t num_cifs() const noexcept { return cifs_.size(); }
  /// Position of the i-th CIFS module (depth order).
  Position cifs_position(std::size_t i) const { return cifs_positions_.at(i); }

  ForwardState<Real> forward(const Tensor<Real>& x, const ForwardOptions& opts = {}) const;

  /// Back-propagates dL/dlogits and, per CIFS module, dL/draw_logits (empty
  /// span or empty tensors mean zero). Parameter gradients are accumulated
  /// into `grads` when non-null. Returns dL/dx.
  Tensor<Real> backward(const ForwardState<Real>& state, const Tensor<Real>& d_logits,
                        std::span<const Tensor<Real>> d_raw, core::GradMode mode,
                        GradientSet<Real>* grads) const;

  HeadOutputs<Real> predict(const Tensor<Real>& x, const ForwardOptions& opts) const override;
  Tensor<Real> input_gradient(const Tensor<Real>& x, const ForwardOptions& opts, core::GradMode mode,
                              const HeadLoss<Real>& loss,
                              HeadOutputs<Real>* outputs = nullptr) const override;

  /// Moves batch-norm running statistics toward those of a training-phase forward.
  void commit_running_stats(const ForwardState<Real>& state);

  std::vector<Parameter<Real>*> parameters();
  std::vector<const Parameter<Real>*> parameters() const;
  std::size_t parameter_count() const;
  GradientSet<Real> make_gradients() const;
  /// Slot range [first, first + count) of the i-th CIFS probe inside a GradientSet.
  std::pair<std::size_t, std::size_t> probe_slots(std::size_t i) const;

  /// Parameters and running statistics by qualified name.
  std::map<std::string, const Tensor<Real>*> state_tensors() const;
  std::map<std::string, Tensor<Real>*> state_tensors();

  void set_mask_override(std::optional<Real> value);

  /// Spatial mean per channel of the penultimate representation (post-masking), (N, C).
  Tensor<Real> penultimate_channel_activations(const Tensor<Real>& x) const;
  /// (K, C) weights of the final affine layer.
  const Tensor<Real>& final_layer_weights() const { return fc_.weight(); }

  core::CifsLayer<Real>& cifs_layer(std::size_t i) { return cifs_.at(i); }
  const core::CifsLayer<Real>& cifs_layer(std::size_t i) const { return cifs_.at(i); }
  const Normalize<Real>& normalization() const noexcept { return norm_; }

  void initialize(std::uint64_t seed);

 private:
  Tensor<Real> block_forward(const BasicBlock<Real>& b, const Tensor<Real>& x, Phase phase,
                             typename BasicBlock<Real>::Cache& c) const;
  Tensor<Real> block_backward(const BasicBlock<Real>& b, const Tensor<Real>& dy,
                              const typename BasicBlock<Real>::Cache& c,
                              GradientSet<Real>* grads) const;
  void assign_slots();

  ArchConfig cfg_;
  Normalize<Real> norm_;
  Conv2d<Real> stem_conv_;
  BatchNorm2d<Real> stem_bn_;
  std::vector<BasicBlock<Real>> blocks_;
  Linear<Real> fc_;
  std::vector<core::CifsLayer<Real>> cifs_;
  std::vector<Position> cifs_positions_;
  std::vector<std::ptrdiff_t> cifs_at_block_;  // block -> CIFS index or -1
  std::vector<std::size_t> probe_slot_;
};

/// Constructs and seeds a model. The backbone and each probe draw from
/// separate seed streams, so a vanilla and a CIFS model built from the same
/// seed share backbone parameters.
template <typename Real>
Model<Real> build_model(const ArchConfig& cfg, std::uint64_t seed);

template <typename Real>
core::Probe<Real> build_probe(const ProbeSpec& spec, std::size_t channels, std::size_t classes);

}  // namespace cifs::model
