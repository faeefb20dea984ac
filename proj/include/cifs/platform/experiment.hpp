#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>

#include "cifs/attack/evaluation.hpp"
#include "cifs/data/dataset.hpp"
#include "cifs/model/arch_config.hpp"
#include "cifs/platform/datasets.hpp"
#include "cifs/train/config.hpp"
#include "json.hpp"

namespace cifs::platform {

struct DataSpec {
  /// "synthetic", "fmnist" (IDX files), "idx" (any IDX pair) or "cifar10".
  std::string name = "synthetic";
  std::filesystem::path dir;
  std::string train_split = "train";
  std::string eval_split = "test";
  /// Stratified subset sizes; 0 keeps the whole split.
  std::size_t train_subset = 0;
  std::size_t eval_subset = 0;
  std::uint64_t seed = 0;  // subset selection and synthetic generation
  std::size_t channels = 1;  // IDX grayscale replication
  std::size_t num_classes = 10;
  // Synthetic only.
  std::size_t synthetic_train = 1000;
  std::size_t synthetic_eval = 500;
  SyntheticSpec synthetic;

  nlohmann::json to_json() const;
  static DataSpec from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
  DataSpec data;
  model::ArchConfig arch;
  train::TrainConfig train;
  attack::EvalSettings eval;
  std::filesystem::path out_dir;
  /// Published numbers this configuration is meant to reproduce, carried
  /// through to outputs untouched.
  nlohmann::json reference;

  /// Data and architecture agree (classes, sample shape) and subsets fit.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing "eval.attacks" defaults to FGSM, PGD-20 and CW-30 at the
  /// training epsilon.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Loads or generates the train and eval splits, then draws the stratified subsets.
std::pair<Dataset, Dataset> load_data(const DataSpec& spec);

}  // namespace cifs::platform
