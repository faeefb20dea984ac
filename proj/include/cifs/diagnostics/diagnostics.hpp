#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cifs/attack/attacks.hpp"
#include "cifs/data/dataset.hpp"
#include "cifs/model/model.hpp"

namespace cifs::diagnostics {

/// Channel-wise activation statistics of one class, with channels listed in
/// descending order of their final-layer weight for that class.
struct ChannelProfile {
  std::size_t class_id = 0;
  double threshold_frac = 0.01;
  std::size_t samples = 0;
  std::string attack;                  // empty for natural data only
  std::vector<std::size_t> channels;   // original channel index at each rank
  std::vector<double> weight;          // non-increasing
  std::vector<double> nat_magnitude;   // mean activation / max |mean activation|
  std::vector<double> nat_frequency;   // fraction of samples above the threshold
  std::vector<double> adv_magnitude;   // empty without an attack
  std::vector<double> adv_frequency;

  bool has_adversarial() const noexcept { return !adv_magnitude.empty(); }
  std::size_t size() const noexcept { return channels.size(); }
};

/// Profile from precomputed (N, C) activations. A sample activates channel c
/// when its activation exceeds threshold_frac times the largest activation of
/// any channel and sample in the same set. `adv` may be null.
ChannelProfile channel_profile(const Tensor<double>& nat, const Tensor<double>* adv,
                               std::span<const double> class_weights, std::size_t class_id,
                               double threshold_frac);

struct ProbeOptions {
  double threshold_frac = 0.01;
  std::uint64_t seed = 0;
  std::size_t batch_size = 250;
};

/// Penultimate activations of the samples of `class_id`, natural and (when
/// `attack` is non-null) adversarial, summarized by channel_profile.
template <typename Real>
ChannelProfile channel_statistics(const model::Model<Real>& model, const Dataset& data, std::size_t class_id,
                                  const attack::AttackConfig* attack, const ProbeOptions& opts = {});

/// Final logits on natural (`attack` null) or attacked inputs, eval mode.
/// Batch b draws its random start from derive_seed(seed, b).
template <typename Real>
Tensor<double> final_logits(const model::Classifier<Real>& model, const Dataset& data,
                            const attack::AttackConfig* attack, std::uint64_t seed, std::size_t batch_size);

struct PerClassAccuracy {
  std::vector<double> accuracy;     // NaN for classes without samples
  std::vector<std::size_t> counts;
  double overall = 0;
};

/// Final-head accuracy restricted to each true class.
PerClassAccuracy per_class_accuracy(const Tensor<double>& logits, std::span<const std::size_t> labels,
                                    std::size_t num_classes);

template <typename Real>
PerClassAccuracy per_class_robust_accuracy(const model::Classifier<Real>& model, const Dataset& data,
                                           const attack::AttackConfig* attack, std::uint64_t seed = 0,
                                           std::size_t batch_size = 250);

struct TopKTable {
  std::vector<std::size_t> ks;
  std::vector<double> accuracy;
};

/// Fraction of rows whose true label ranks within the k largest logits (ties
/// to the lower class id).
TopKTable topk_accuracy(const Tensor<double>& logits, std::span<const std::size_t> labels,
                        std::span<const std::size_t> ks);

template <typename Real>
TopKTable topk_accuracy(const model::Classifier<Real>& model, const Dataset& data,
                        const attack::AttackConfig* attack, std::span<const std::size_t> ks,
                        std::uint64_t seed = 0, std::size_t batch_size = 250);

/// Delimited export: "# key<TAB>value" metadata lines, a header row, then
/// comma-separated rows written with round-trip precision.
struct Table {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::optional<std::string> get_meta(const std::string& key) const;
  std::vector<double> column(const std::string& name) const;
};

void write_table(const Table& table, const std::filesystem::path& path);
Table read_table(const std::filesystem::path& path);

/// Columns rank, weight, nat_mag, [adv_mag,] nat_freq, [adv_freq]; the
/// adversarial columns are omitted without an attack.
Table to_table(const ChannelProfile& profile);
ChannelProfile profile_from_table(const Table& table);
/// Columns class, count, accuracy.
Table to_table(const PerClassAccuracy& acc);
/// Columns k, accuracy.
Table to_table(const TopKTable& table);

}  // namespace cifs::diagnostics
