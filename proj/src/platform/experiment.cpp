#include "cifs/platform/experiment.hpp"

#include <fstream>

#include "common/json_util.hpp"

namespace cifs::platform {

nlohmann::json DataSpec::to_json() const {
  nlohmann::json j = {{"name", name},
                      {"dir", dir.string()},
                      {"train_split", train_split},
                      {"eval_split", eval_split},
                      {"train_subset", train_subset},
                      {"eval_subset", eval_subset},
                      {"seed", seed},
                      {"channels", channels},
                      {"num_classes", num_classes}};
  if (name == "synthetic")
    j["synthetic"] = {{"train", synthetic_train},
                      {"eval", synthetic_eval},
                      {"shape", synthetic.shape},
                      {"amplitude", synthetic.amplitude},
                      {"noise", synthetic.noise}};
  return j;
}

DataSpec DataSpec::from_json(const nlohmann::json& j) {
  const std::string what = "data";
  json_util::require_known_keys(j, {"name", "dir", "train_split", "eval_split", "train_subset", "eval_subset", "seed",
                                    "channels", "num_classes", "synthetic"},
                                what);
  DataSpec d;
  d.name = json_util::get_or<std::string>(j, "name", d.name, what);
  if (d.name != "synthetic" && d.name != "fmnist" && d.name != "idx" && d.name != "cifar10")
    throw ConfigError("data.name must be synthetic, fmnist, idx or cifar10, got '" + d.name + "'");
  d.dir = json_util::get_or<std::string>(j, "dir", "", what);
  d.train_split = json_util::get_or<std::string>(j, "train_split", d.train_split, what);
  d.eval_split = json_util::get_or<std::string>(j, "eval_split", d.eval_split, what);
  d.train_subset = json_util::get_or<std::size_t>(j, "train_subset", d.train_subset, what);
  d.eval_subset = json_util::get_or<std::size_t>(j, "eval_subset", d.eval_subset, what);
  d.seed = json_util::get_or<std::uint64_t>(j, "seed", d.seed, what);
  d.channels = json_util::get_or<std::size_t>(j, "channels", d.channels, what);
  d.num_classes = json_util::get_or<std::size_t>(j, "num_classes", d.num_classes, what);
  if (d.name == "cifar10") d.num_classes = 10;
  if (auto it = j.find("synthetic"); it != j.end()) {
    const std::string sw = "data.synthetic";
    json_util::require_known_keys(*it, {"train", "eval", "shape", "amplitude", "noise"}, sw);
    d.synthetic_train = json_util::get_or<std::size_t>(*it, "train", d.synthetic_train, sw);
    d.synthetic_eval = json_util::get_or<std::size_t>(*it, "eval", d.synthetic_eval, sw);
    d.synthetic.shape = json_util::get_or<Shape>(*it, "shape", d.synthetic.shape, sw);
    d.synthetic.amplitude = json_util::get_or<double>(*it, "amplitude", d.synthetic.amplitude, sw);
    d.synthetic.noise = json_util::get_or<double>(*it, "noise", d.synthetic.noise, sw);
  }
  if (d.name != "synthetic" && d.dir.empty()) throw ConfigError("data.dir is required for " + d.name);
  return d;
}

std::pair<Dataset, Dataset> load_data(const DataSpec& spec) {
  auto load = [&](const std::string& split, std::size_t synthetic_n) {
    if (spec.name == "synthetic") {
      auto s = spec.synthetic;
      s.split = split;
      return make_synthetic(synthetic_n, spec.num_classes, spec.seed, s);
    }
    if (spec.name == "cifar10") return load_cifar10(spec.dir, split);
    auto d = load_idx(spec.dir, split, spec.channels, spec.num_classes);
    if (spec.name == "fmnist") d.name = "fmnist";
    return d;
  };
  auto sub = [&](Dataset d, std::size_t n, std::uint64_t stream, const char* what) {
    d.validate();
    if (n == 0) return d;
    if (n > d.size())
      throw ConfigError(std::string(what) + " subset of " + std::to_string(n) + " exceeds the " +
                        std::to_string(d.size()) + " available samples");
    const auto rows = stratified_indices(d, n, derive_seed(spec.seed, stream));
    return d.subset(rows);
  };
  auto train = sub(load(spec.train_split, spec.synthetic_train), spec.train_subset, 1, "train");
  auto eval = sub(load(spec.eval_split, spec.synthetic_eval), spec.eval_subset, 2, "eval");
  return {std::move(train), std::move(eval)};
}

void ExperimentConfig::validate() const {
  arch.validate();
  train.validate();
  if (data.num_classes != arch.num_classes)
    throw ConfigError("data has " + std::to_string(data.num_classes) + " classes, arch has " +
                      std::to_string(arch.num_classes));
  if (data.name == "synthetic") {
    if (data.synthetic.shape != arch.input_shape)
      throw ConfigError("synthetic shape " + shape_string(data.synthetic.shape) + " differs from arch input " +
                        shape_string(arch.input_shape));
    if (data.train_subset > data.synthetic_train || data.eval_subset > data.synthetic_eval)
      throw ConfigError("subset size exceeds the synthetic split size");
  }
  for (const auto& a : eval.attacks) a.validate();
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = {{"data", data.to_json()},
                      {"arch", arch.to_json()},
                      {"train", train.to_json()},
                      {"eval", eval.to_json()},
                      {"out_dir", out_dir.string()}};
  if (!reference.is_null()) j["reference"] = reference;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  json_util::require_known_keys(j, {"data", "arch", "train", "eval", "out_dir", "reference"}, "experiment");
  ExperimentConfig c;
  c.data = DataSpec::from_json(j.value("data", nlohmann::json::object()));
  if (!j.contains("arch")) throw ConfigError("experiment.arch is required");
  c.arch = model::ArchConfig::from_json(j.at("arch"));
  c.train = train::TrainConfig::from_json(j.value("train", nlohmann::json::object()));
  const auto eval = j.value("eval", nlohmann::json::object());
  c.eval = attack::EvalSettings::from_json(eval);
  if (!eval.contains("attacks")) c.eval.attacks = attack::default_eval_attacks(c.train.inner.epsilon);
  c.out_dir = json_util::get_or<std::string>(j, "out_dir", "", "experiment");
  if (auto it = j.find("reference"); it != j.end()) c.reference = *it;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  auto c = from_json(j);
  // Relative data paths resolve against the config file's directory.
  if (!c.data.dir.empty() && c.data.dir.is_relative() && path.has_parent_path() &&
      !std::filesystem::exists(c.data.dir))
    c.data.dir = path.parent_path() / c.data.dir;
  return c;
}

}  // namespace cifs::platform
