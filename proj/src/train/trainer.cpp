#include "cifs/train/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cifs/data/augment.hpp"

namespace cifs::train {

namespace fs = std::filesystem;

template <typename Real>
attack::LossValue<Real> adaptive_loss(const Tensor<Real>& final_logits,
                                      std::span<const Tensor<Real>> raw_logits,
                                      std::span<const std::size_t> y, double beta) {
  if (!(beta >= 0) || std::isinf(beta)) throw ConfigError("training beta must be finite and >= 0");
  const auto weights = attack::head_weights(attack::AdaptiveLoss::with_beta(beta), raw_logits.size());
  return attack::compose_loss(final_logits, raw_logits, y, weights, attack::LossKind::cross_entropy,
                              attack::Reduction::mean);
}

template <typename Real>
Sgd<Real>::Sgd(std::vector<Parameter<Real>*> params, SgdConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  momentum_.reserve(params_.size());
  for (const auto* p : params_) momentum_.emplace_back(p->value.shape());
}

template <typename Real>
void Sgd<Real>::step(const GradientSet<Real>& grads, double lr) {
  if (grads.slots.size() != params_.size())
    throw ConfigError("gradient set has " + std::to_string(grads.slots.size()) + " slots for " +
                      std::to_string(params_.size()) + " parameters");
  const auto mu = static_cast<Real>(cfg_.momentum);
  const auto step = static_cast<Real>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i]->value;
    const auto& g = grads.slots[i];
    auto& buf = momentum_[i];
    const auto wd = static_cast<Real>(params_[i]->weight_decay ? cfg_.weight_decay : 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) {
      const Real d = g[k] + wd * p[k];
      buf[k] = steps_ == 0 ? d : mu * buf[k] + d;
      p[k] -= step * buf[k];
    }
  }
  ++steps_;
}

template <typename Real>
void Sgd<Real>::save(model::Checkpoint& ckpt) const {
  for (std::size_t i = 0; i < momentum_.size(); ++i) {
    const auto& m = momentum_[i];
    Tensor<double> t(m.shape());
    std::copy(m.data(), m.data() + m.size(), t.data());
    ckpt.tensors["optim.momentum." + std::to_string(i)] = std::move(t);
  }
  ckpt.extra["optim"] = {{"steps", steps_}, {"momentum", cfg_.momentum}, {"weight_decay", cfg_.weight_decay}};
}

template <typename Real>
void Sgd<Real>::load(const model::Checkpoint& ckpt) {
  for (std::size_t i = 0; i < momentum_.size(); ++i) {
    const std::string name = "optim.momentum." + std::to_string(i);
    const auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw ConfigError("checkpoint lacks optimizer state '" + name + "'");
    if (it->second.shape() != momentum_[i].shape())
      throw ConfigError("optimizer state '" + name + "' has shape " + shape_string(it->second.shape()));
    std::transform(it->second.data(), it->second.data() + it->second.size(), momentum_[i].data(),
                   [](double v) { return static_cast<Real>(v); });
  }
  try {
    steps_ = ckpt.extra.at("optim").at("steps").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint lacks optimizer step count: ") + e.what());
  }
}

template <typename Real>
StepMetrics adversarial_training_step(model::Model<Real>& model, const Tensor<Real>& x,
                                      std::span<const std::size_t> y, StepContext<Real>& ctx) {
  const std::size_t num_raw = model.num_raw_heads();
  auto inner = ctx.cfg.inner;
  inner.loss = ctx.cfg.inner_loss_for(num_raw);
  const attack::AttackContext actx{model::Phase::train, true};
  const auto x_adv = attack::run_attack<Real>(model, x, y, inner, ctx.rng, actx);

  const auto st = model.forward(x_adv, {model::Phase::train, y});
  const auto lv = adaptive_loss(st.logits, std::span<const Tensor<Real>>(st.raw_logits), y,
                                ctx.cfg.beta_for(num_raw));
  for (std::size_t n = 0; n < lv.per_sample.size(); ++n)
    if (!std::isfinite(lv.per_sample[n])) throw NumericalError("non-finite training loss", n);

  ctx.grads.zero();
  model.backward(st, lv.d_final, lv.d_raw, ctx.cfg.update_grad_mode, &ctx.grads);
  model.commit_running_stats(st);
  ctx.optimizer.step(ctx.grads, ctx.lr);

  StepMetrics m;
  m.loss = lv.mean;
  m.n = y.size();
  for (std::size_t n = 0; n < y.size(); ++n) m.correct += attack::argmax_row(st.logits, n) == y[n];
  return m;
}

nlohmann::json EpochRecord::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", epoch},
          {"lr", lr},
          {"train_loss", train_loss},
          {"train_adv_accuracy", train_adv_accuracy},
          {"natural_accuracy", opt(natural_accuracy)},
          {"robust_accuracy", opt(robust_accuracy)},
          {"wall_seconds", wall_seconds}};
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
  EpochRecord r;
  try {
    r.epoch = j.at("epoch").get<std::size_t>();
    r.lr = j.at("lr").get<double>();
    r.train_loss = j.at("train_loss").get<double>();
    r.train_adv_accuracy = j.at("train_adv_accuracy").get<double>();
    if (!j.at("natural_accuracy").is_null()) r.natural_accuracy = j.at("natural_accuracy").get<double>();
    if (!j.at("robust_accuracy").is_null()) r.robust_accuracy = j.at("robust_accuracy").get<double>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed epoch record: ") + e.what());
  }
  return r;
}

const EpochRecord& RunRecord::last() const {
  if (epochs.empty()) throw ConfigError("run has no completed epochs");
  return epochs.back();
}

const EpochRecord* RunRecord::best() const {
  if (!best_epoch) return nullptr;
  for (const auto& e : epochs)
    if (e.epoch == *best_epoch) return &e;
  return nullptr;
}

double RunRecord::total_seconds() const {
  double s = 0;
  for (const auto& e : epochs) s += e.wall_seconds;
  return s;
}

nlohmann::json RunRecord::summary() const {
  nlohmann::json j;
  j["epochs_completed"] = epochs.size();
  j["final"] = epochs.empty() ? nlohmann::json(nullptr) : last().to_json();
  j["best"] = best() ? best()->to_json() : nlohmann::json(nullptr);
  j["total_seconds"] = total_seconds();
  j["config"] = config;
  return j;
}

namespace {

void check_compatible(const Dataset& data, const model::ArchConfig& arch, const std::string& role) {
  data.validate();
  if (data.sample_shape() != arch.input_shape)
    throw ConfigError(role + " samples are " + shape_string(data.sample_shape()) + " but the model expects " +
                      shape_string(arch.input_shape));
  if (data.num_classes != arch.num_classes)
    throw ConfigError(role + " has " + std::to_string(data.num_classes) + " classes but the model has " +
                      std::to_string(arch.num_classes));
}

nlohmann::json dataset_summary(const Dataset& d) {
  return {{"name", d.name}, {"split", d.split}, {"size", d.size()}, {"provenance", d.provenance}};
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << text;
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string jsonl(const std::vector<EpochRecord>& epochs) {
  std::string s;
  for (const auto& e : epochs) s += e.to_json().dump() + "\n";
  return s;
}

}  // namespace

template <typename Real>
TrainResult<Real> train(const TrainConfig& cfg, const model::ArchConfig& arch, const Dataset& train_data,
                        const Dataset& eval_data, const TrainOptions& opts) {
  cfg.validate();
  arch.validate();
  check_compatible(train_data, arch, "training data");
  check_compatible(eval_data, arch, "evaluation data");
  if (train_data.size() == 0) throw ConfigError("training data is empty");

  auto model = model::build_model<Real>(arch, cfg.seed);
  Sgd<Real> optimizer(model.parameters(), cfg.sgd);
  auto grads = model.make_gradients();

  const auto eval_rows = stratified_indices(eval_data, cfg.eval_subset, derive_seed(cfg.seed, 7));
  const Dataset eval_set = eval_data.subset(eval_rows);

  RunRecord record;
  record.config = {{"train", cfg.to_json()},
                   {"arch", arch.to_json()},
                   {"arch_hash", arch.hash()},
                   {"batch_size", cfg.batch_size},
                   {"train_data", dataset_summary(train_data)},
                   {"eval_data", dataset_summary(eval_data)},
                   {"eval_rows", eval_set.size()}};
  if (!opts.echo.is_null()) record.config["experiment"] = opts.echo;

  const bool persist = !opts.out_dir.empty();
  if (persist) fs::create_directories(opts.out_dir);
  const fs::path last_path = opts.out_dir / "last.ckpt", best_path = opts.out_dir / "best.ckpt";

  std::size_t start = 0;
  double best_robust = -1.0;
  if (persist && opts.resume && fs::exists(last_path)) {
    const auto ckpt = model::load_checkpoint(last_path);
    if (ckpt.extra.value("train_config", nlohmann::json()) != cfg.to_json())
      throw ConfigError("cannot resume " + last_path.string() + ": training config differs");
    model::restore_model(model, ckpt);
    optimizer.load(ckpt);
    for (const auto& e : ckpt.extra.at("records")) record.epochs.push_back(EpochRecord::from_json(e));
    if (!ckpt.extra.at("best_epoch").is_null()) record.best_epoch = ckpt.extra.at("best_epoch").get<std::size_t>();
    if (const auto* b = record.best(); b && b->robust_accuracy) best_robust = *b->robust_accuracy;
    start = ckpt.epoch;
  }

  auto snapshot = [&](std::size_t epoch) {
    auto ckpt = model::make_checkpoint(model, cfg.seed, epoch);
    optimizer.save(ckpt);
    ckpt.extra["train_config"] = cfg.to_json();
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& e : record.epochs) recs.push_back(e.to_json());
    ckpt.extra["records"] = recs;
    ckpt.extra["best_epoch"] = record.best_epoch ? nlohmann::json(*record.best_epoch) : nlohmann::json(nullptr);
    return ckpt;
  };

  std::vector<std::size_t> order(train_data.size());
  for (std::size_t epoch = start; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, 100 + epoch);
    Rng data_rng(epoch_seed);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), data_rng);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = cfg.lr.at(epoch);
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t b = 0, first = 0; first < order.size(); ++b, first += cfg.batch_size) {
      const std::span<const std::size_t> rows(order.data() + first,
                                              std::min(cfg.batch_size, order.size() - first));
      auto x = train_data.batch_images<Real>(rows);
      augment_batch(x, cfg.augment, data_rng);
      const auto y = train_data.batch_labels(rows);
      Rng attack_rng(derive_seed(epoch_seed, b + 1));
      StepContext<Real> ctx{cfg, optimizer, grads, rec.lr, attack_rng};
      StepMetrics m;
      try {
        m = adversarial_training_step(model, x, y, ctx);
      } catch (const NumericalError& e) {
        if (persist) {
          auto ckpt = snapshot(epoch);
          ckpt.extra["failure"] = {{"error", e.what()}, {"epoch", epoch + 1}, {"batch", b},
                                   {"rows", std::vector<std::size_t>(rows.begin(), rows.end())}};
          model::save_checkpoint(opts.out_dir / "failure_snapshot.ckpt", ckpt);
        }
        throw;
      }
      loss_sum += m.loss * static_cast<double>(m.n);
      correct += m.correct;
      seen += m.n;
    }
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_adv_accuracy = static_cast<double>(correct) / static_cast<double>(seen);

    const bool last_epoch = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
      rec.natural_accuracy = attack::natural_outcome(model, eval_set, 250).final_accuracy();
      rec.robust_accuracy =
          attack::attack_outcome(model, eval_set, cfg.eval_attack, derive_seed(cfg.seed, 9), 250)
              .final_accuracy();
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record.epochs.push_back(rec);

    const bool improved = rec.robust_accuracy && *rec.robust_accuracy > best_robust;
    if (improved) {
      best_robust = *rec.robust_accuracy;
      record.best_epoch = rec.epoch;
    }
    if (persist) {
      if (improved) model::save_checkpoint(best_path, snapshot(epoch + 1));
      if ((epoch + 1) % cfg.checkpoint_every == 0 || last_epoch)
        model::save_checkpoint(last_path, snapshot(epoch + 1));
      write_text(opts.out_dir / "run.jsonl", jsonl(record.epochs));
    }
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  if (persist) write_text(opts.out_dir / "summary.json", record.summary().dump(2) + "\n");
  return {std::move(model), std::move(record)};
}

template <typename Real>
attack::RobustnessReport evaluate(const model::Model<Real>& model, const Dataset& data,
                                  const attack::EvalSettings& settings) {
  return attack::worst_case_eval(model, data, settings);
}

#define CIFS_INSTANTIATE(Real)                                                                    \
  template attack::LossValue<Real> adaptive_loss(const Tensor<Real>&, std::span<const Tensor<Real>>, \
                                                 std::span<const std::size_t>, double);           \
  template class Sgd<Real>;                                                                       \
  template StepMetrics adversarial_training_step(model::Model<Real>&, const Tensor<Real>&,        \
                                                 std::span<const std::size_t>, StepContext<Real>&); \
  template TrainResult<Real> train(const TrainConfig&, const model::ArchConfig&, const Dataset&,  \
                                   const Dataset&, const TrainOptions&);                          \
  template attack::RobustnessReport evaluate(const model::Model<Real>&, const Dataset&,           \
                                             const attack::EvalSettings&);

CIFS_INSTANTIATE(float)
CIFS_INSTANTIATE(double)

}  // namespace cifs::train
