#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cifs/attack/evaluation.hpp"
#include "cifs/attack/loss.hpp"
#include "cifs/data/dataset.hpp"
#include "cifs/model/checkpoint.hpp"
#include "cifs/model/model.hpp"
#include "cifs/train/config.hpp"

namespace cifs::train {

/// Mean over the batch of (1/(1+b)) ce(final) + (b/((1+b)|I|)) sum_l ce(raw_l).
/// With no raw heads this is ce(final) for any b.
template <typename Real>
attack::LossValue<Real> adaptive_loss(const Tensor<Real>& final_logits,
                                      std::span<const Tensor<Real>> raw_logits,
                                      std::span<const std::size_t> y, double beta);

/// Momentum SGD over a fixed parameter list:
///   g = grad + wd * p;  buf = momentum * buf + g (buf = g on the first step);  p -= lr * buf
template <typename Real>
class Sgd {
 public:
  Sgd(std::vector<Parameter<Real>*> params, SgdConfig cfg);

  void step(const GradientSet<Real>& grads, double lr);

  std::size_t steps_taken() const noexcept { return steps_; }
  /// Momentum buffers as "optim.momentum.<i>" plus the step count in `extra`.
  void save(model::Checkpoint& ckpt) const;
  void load(const model::Checkpoint& ckpt);

 private:
  std::vector<Parameter<Real>*> params_;
  SgdConfig cfg_;
  std::vector<Tensor<Real>> momentum_;
  std::size_t steps_ = 0;
};

struct StepMetrics {
  double loss = 0;                // adaptive loss on the adversarial batch
  std::size_t correct = 0;        // final-head hits on the adversarial batch
  std::size_t n = 0;
};

/// Everything one optimizer update needs besides the batch.
template <typename Real>
struct StepContext {
  const TrainConfig& cfg;
  Sgd<Real>& optimizer;
  GradientSet<Real>& grads;
  double lr;
  Rng& rng;  // inner attack random start
};

/// Inner attack in the training phase with true-label substitution (running
/// statistics untouched), then one update on the adaptive loss at the
/// adversarial batch. Throws NumericalError if the loss is not finite.
template <typename Real>
StepMetrics adversarial_training_step(model::Model<Real>& model, const Tensor<Real>& x,
                                      std::span<const std::size_t> y, StepContext<Real>& ctx);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  double train_loss = 0;
  double train_adv_accuracy = 0;
  std::optional<double> natural_accuracy;
  std::optional<double> robust_accuracy;
  double wall_seconds = 0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  std::optional<std::size_t> best_epoch;  // highest robust accuracy, earliest on ties
  nlohmann::json config;                  // train config, arch, dataset names, batch size

  const EpochRecord& last() const;
  const EpochRecord* best() const;
  double total_seconds() const;
  nlohmann::json summary() const;
};

struct TrainOptions {
  /// Receives run.jsonl, summary.json, last.ckpt and best.ckpt when non-empty.
  std::filesystem::path out_dir;
  /// Continue from out_dir/last.ckpt when it exists.
  bool resume = false;
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Stored as config["experiment"] in the run record and summary.
  nlohmann::json echo;
};

template <typename Real>
struct TrainResult {
  model::Model<Real> model;
  RunRecord record;
};

/// Adversarial training with milestone learning-rate decay, periodic robust
/// evaluation and resumable checkpoints. Each epoch's shuffling, augmentation
/// and attack starts derive from (seed, epoch), so a resumed run matches an
/// uninterrupted one.
template <typename Real>
TrainResult<Real> train(const TrainConfig& cfg, const model::ArchConfig& arch, const Dataset& train_data,
                        const Dataset& eval_data, const TrainOptions& opts = {});

/// Natural accuracy plus the worst case over attacks and beta grid (eval mode,
/// no label substitution).
template <typename Real>
attack::RobustnessReport evaluate(const model::Model<Real>& model, const Dataset& data,
                                  const attack::EvalSettings& settings);

}  // namespace cifs::train
