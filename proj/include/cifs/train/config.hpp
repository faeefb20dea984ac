#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cifs/attack/attacks.hpp"
#include "cifs/data/augment.hpp"
#include "json.hpp"

namespace cifs::train {

/// Step decay: lr = initial * gamma^(number of milestones <= epoch), epochs counted from 0.
struct LrSchedule {
  double initial = 0.1;
  std::vector<std::size_t> milestones = {75, 90};
  double gamma = 0.1;

  double at(std::size_t epoch) const;
};

/// Momentum SGD with coupled L2 weight decay (PyTorch semantics).
struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 2e-4;
};

struct TrainConfig {
  std::size_t epochs = 120;
  std::size_t batch_size = 128;
  LrSchedule lr;
  SgdConfig sgd;
  /// Adaptive-loss coefficient; unset means |I| of the model.
  std::optional<double> beta;
  /// Inner maximization. Its loss is replaced by the training beta unless
  /// `inner_loss` is set.
  attack::AttackConfig inner = default_inner_attack(8.0 / 255.0);
  std::optional<attack::AdaptiveLoss> inner_loss;
  /// Gradient mode of the outer parameter update through the CIFS masks.
  core::GradMode update_grad_mode = core::GradMode::detached;
  Augmentation augment = Augmentation::crop_flip();
  std::uint64_t seed = 0;

  /// Periodic robust evaluation on a fixed stratified subset of the eval split.
  std::size_t eval_every = 1;
  std::size_t eval_subset = 1000;
  attack::AttackConfig eval_attack = default_eval_attack(8.0 / 255.0);
  /// Write last.ckpt every this many epochs (the final epoch is always written).
  std::size_t checkpoint_every = 1;

  /// PGD-10, step eps/4, random init, detached masks.
  static attack::AttackConfig default_inner_attack(double epsilon);
  /// PGD-10, step eps/4, no random init, final-head loss, through the masks.
  static attack::AttackConfig default_eval_attack(double epsilon);

  double beta_for(std::size_t num_raw_heads) const;
  attack::AdaptiveLoss inner_loss_for(std::size_t num_raw_heads) const;

  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected. "epsilon" at the top level sets both attacks'
  /// budgets before their own blocks are read.
  static TrainConfig from_json(const nlohmann::json& j);
};

}  // namespace cifs::train
