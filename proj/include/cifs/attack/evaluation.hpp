#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cifs/attack/attacks.hpp"
#include "cifs/data/dataset.hpp"
#include "json.hpp"

namespace cifs::attack {

/// Per-sample correctness of every head, in dataset order.
struct Outcome {
  std::vector<std::size_t> predicted;           // final-head prediction
  std::vector<bool> final_correct;
  std::vector<std::vector<bool>> raw_correct;   // [head][sample], upstream first

  std::size_t size() const noexcept { return final_correct.size(); }
  double final_accuracy() const;
  double raw_accuracy(std::size_t head) const;
};

/// argmax with ties resolved toward the lower class id.
template <typename Real>
std::size_t argmax_row(const Tensor<Real>& logits, std::size_t row);

/// Clean predictions, evaluated in `batch_size` chunks in eval mode.
template <typename Real>
Outcome natural_outcome(const model::Classifier<Real>& model, const Dataset& data,
                        std::size_t batch_size);

/// Predictions on adversarial inputs. Batch b draws its random start from
/// derive_seed(seed, b), so changing epsilon keeps the random stream fixed.
template <typename Real>
Outcome attack_outcome(const model::Classifier<Real>& model, const Dataset& data,
                       const AttackConfig& attack, std::uint64_t seed, std::size_t batch_size);

struct EvalSettings {
  /// Each attack is run once per grid entry; its own `loss` field is ignored.
  std::vector<AttackConfig> attacks;
  std::vector<AdaptiveLoss> beta_grid = default_beta_grid();
  std::size_t batch_size = 250;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static EvalSettings from_json(const nlohmann::json& j);
};

/// One (attack, beta) cell of the sweep.
struct EvalCell {
  std::string attack;
  std::string beta;    // AdaptiveLoss::label()
  std::string focus;   // "final", "all" or "layer-j"
  double accuracy = 0; // final head
  std::vector<double> raw_accuracy;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

/// Accuracy by attack point and read-out head for one attack.
///   natural_final: clean inputs, final head
///   cifs_cifs:     attack focused on the last raw head, read at that head
///   cifs_final:    same attack, read at the final head
///   adap_final:    worst final-head accuracy over the beta grid
struct EvalMatrix {
  std::string attack;
  double natural_final = 0;
  std::optional<double> cifs_cifs;
  std::optional<double> cifs_final;
  double adap_final = 0;
};

struct RobustnessReport {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::size_t num_raw_heads = 0;
  double natural_accuracy = 0;
  std::vector<double> natural_raw_accuracy;
  /// Set when an attack used detached-mask gradients on a CIFS model.
  bool approximate_gradient = false;
  std::vector<EvalCell> cells;
  /// Grid entries that need more raw heads than the model has.
  std::vector<std::string> skipped;
  std::optional<EvalMatrix> matrix;
  nlohmann::json config;

  /// Minimum final-head accuracy over all cells.
  double worst_case() const;
  /// Minimum over the cells of one attack; throws ConfigError for unknown names.
  double worst_case(const std::string& attack) const;
  const EvalCell& worst_cell(const std::string& attack) const;
  std::vector<std::string> attack_names() const;

  nlohmann::json to_json() const;
  static RobustnessReport from_json(const nlohmann::json& j);

  /// Tab-separated rows (attack, beta, focus, accuracy, n, seed) under '#' header lines.
  void write_tsv(std::ostream& os) const;
  static RobustnessReport read_tsv(std::istream& is);
};

/// Runs every attack against every applicable grid entry. Vanilla models get
/// a single final-only row per attack. Throws ConfigError on an empty dataset.
template <typename Real>
RobustnessReport worst_case_eval(const model::Classifier<Real>& model, const Dataset& data,
                                 const EvalSettings& settings);

/// The evaluation protocol attacks: FGSM, PGD-20 and CW-30 (step eps/10) at `epsilon`.
std::vector<AttackConfig> default_eval_attacks(double epsilon);

}  // namespace cifs::attack
