#include "cifs/train/config.hpp"

#include <cmath>

#include "common/json_util.hpp"

namespace cifs::train {

double LrSchedule::at(std::size_t epoch) const {
  double lr = initial;
  for (auto m : milestones)
    if (epoch >= m) lr *= gamma;
  return lr;
}

attack::AttackConfig TrainConfig::default_inner_attack(double epsilon) {
  auto a = attack::AttackConfig::pgd(epsilon, 10, epsilon / 4, true);
  a.grad_mode = core::GradMode::detached;
  return a;
}

attack::AttackConfig TrainConfig::default_eval_attack(double epsilon) {
  auto a = attack::AttackConfig::pgd(epsilon, 10, epsilon / 4, false);
  a.grad_mode = core::GradMode::through;
  return a;
}

double TrainConfig::beta_for(std::size_t num_raw_heads) const {
  return beta ? *beta : static_cast<double>(num_raw_heads);
}

attack::AdaptiveLoss TrainConfig::inner_loss_for(std::size_t num_raw_heads) const {
  if (inner_loss) return *inner_loss;
  return attack::AdaptiveLoss::with_beta(num_raw_heads == 0 ? 0.0 : beta_for(num_raw_heads));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr.initial > 0)) throw ConfigError("lr.initial must be > 0");
  if (!(lr.gamma > 0)) throw ConfigError("lr.gamma must be > 0");
  for (std::size_t i = 1; i < lr.milestones.size(); ++i)
    if (lr.milestones[i] <= lr.milestones[i - 1])
      throw ConfigError("lr.milestones must be strictly increasing");
  if (sgd.momentum < 0 || sgd.momentum >= 1) throw ConfigError("sgd.momentum must be in [0, 1)");
  if (sgd.weight_decay < 0) throw ConfigError("sgd.weight_decay must be >= 0");
  if (beta && (!std::isfinite(*beta) || *beta < 0)) throw ConfigError("beta must be finite and >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  inner.validate();
  eval_attack.validate();
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr"] = {{"initial", lr.initial}, {"milestones", lr.milestones}, {"gamma", lr.gamma}};
  j["sgd"] = {{"momentum", sgd.momentum}, {"weight_decay", sgd.weight_decay}};
  j["beta"] = beta ? nlohmann::json(*beta) : nlohmann::json(nullptr);
  j["inner"] = inner.to_json();
  j["inner_loss"] = inner_loss ? nlohmann::json(inner_loss->label()) : nlohmann::json(nullptr);
  j["update_grad_mode"] = core::to_string(update_grad_mode);
  j["augment"] = augment.to_json();
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  j["eval_subset"] = eval_subset;
  j["eval_attack"] = eval_attack.to_json();
  j["checkpoint_every"] = checkpoint_every;
  return j;
}

namespace {

// Defaults for an attack block, with the step size kept relative to epsilon so
// that overriding only the budget rescales it.
nlohmann::json attack_defaults(const attack::AttackConfig& a, const char* step) {
  auto j = a.to_json();
  j["step_size"] = step;
  return j;
}

attack::AttackConfig merge_attack(nlohmann::json base, const nlohmann::json& overrides,
                                  const std::string& what) {
  if (!overrides.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& item : overrides.items()) base[item.key()] = item.value();
  try {
    return attack::AttackConfig::from_json(base);
  } catch (const ConfigError& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  const std::string what = "train";
  json_util::require_known_keys(
      j, {"epochs", "batch_size", "lr", "sgd", "beta", "epsilon", "inner", "inner_loss",
          "update_grad_mode", "augment", "seed", "eval_every", "eval_subset", "eval_attack",
          "checkpoint_every"},
      what);
  TrainConfig c;
  c.epochs = json_util::get_or<std::size_t>(j, "epochs", c.epochs, what);
  c.batch_size = json_util::get_or<std::size_t>(j, "batch_size", c.batch_size, what);
  if (auto it = j.find("lr"); it != j.end()) {
    json_util::require_known_keys(*it, {"initial", "milestones", "gamma"}, "train.lr");
    c.lr.initial = json_util::get_or<double>(*it, "initial", c.lr.initial, "train.lr");
    c.lr.milestones =
        json_util::get_or<std::vector<std::size_t>>(*it, "milestones", c.lr.milestones, "train.lr");
    c.lr.gamma = json_util::get_or<double>(*it, "gamma", c.lr.gamma, "train.lr");
  }
  if (auto it = j.find("sgd"); it != j.end()) {
    json_util::require_known_keys(*it, {"momentum", "weight_decay"}, "train.sgd");
    c.sgd.momentum = json_util::get_or<double>(*it, "momentum", c.sgd.momentum, "train.sgd");
    c.sgd.weight_decay = json_util::get_or<double>(*it, "weight_decay", c.sgd.weight_decay, "train.sgd");
  }
  if (auto it = j.find("beta"); it != j.end() && !it->is_null())
    c.beta = json_util::get_required<double>(j, "beta", what);

  double eps = 8.0 / 255.0;
  if (auto it = j.find("epsilon"); it != j.end()) eps = json_util::pixel_value(*it, "train.epsilon");
  c.inner = merge_attack(attack_defaults(default_inner_attack(eps), "eps/4"),
                         j.value("inner", nlohmann::json::object()), "train.inner");
  c.eval_attack = merge_attack(attack_defaults(default_eval_attack(eps), "eps/4"),
                               j.value("eval_attack", nlohmann::json::object()), "train.eval_attack");
  if (auto it = j.find("inner_loss"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw ConfigError("train.inner_loss must be a string such as \"2\" or \"inf\"");
    c.inner_loss = attack::AdaptiveLoss::parse(it->get<std::string>());
  }
  if (auto it = j.find("update_grad_mode"); it != j.end())
    c.update_grad_mode = core::parse_grad_mode(it->get<std::string>());
  if (auto it = j.find("augment"); it != j.end()) c.augment = Augmentation::from_json(*it);
  c.seed = json_util::get_or<std::uint64_t>(j, "seed", c.seed, what);
  c.eval_every = json_util::get_or<std::size_t>(j, "eval_every", c.eval_every, what);
  c.eval_subset = json_util::get_or<std::size_t>(j, "eval_subset", c.eval_subset, what);
  c.checkpoint_every = json_util::get_or<std::size_t>(j, "checkpoint_every", c.checkpoint_every, what);
  c.validate();
  return c;
}

}  // namespace cifs::train
