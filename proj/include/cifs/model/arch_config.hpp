#pragma once

#include <string>
#include <vector>

#include "cifs/core/cifs.hpp"
#include "cifs/tensor.hpp"
#include "json.hpp"

namespace cifs::model {

enum class Family { resnet18_like, resnet10_like };

/// P1 is the last residual block, P2 the one before it.
enum class Position { P1, P2 };

std::string to_string(Family f);
std::string to_string(Position p);
Family parse_family(const std::string& s);
Position parse_position(const std::string& s);

struct ProbeSpec {
  core::ProbeKind kind = core::ProbeKind::linear;
  std::size_t hidden = 256;  // mlp2 only
  core::ProbeActivation activation = core::ProbeActivation::relu;
};

struct CifsSpec {
  Position position = Position::P1;
  ProbeSpec probe;
};

/// Residual backbone description. Four stages at strides 1, 2, 2, 2 with
/// widths base, 2 base, 4 base, 8 base where base = round(base_width * width_multiplier).
struct ArchConfig {
  Family family = Family::resnet18_like;
  std::size_t base_width = 64;
  double width_multiplier = 1.0;
  std::size_t num_classes = 10;
  Shape input_shape = {3, 32, 32};  // (C, H, W)
  std::vector<double> norm_mean = {0.0, 0.0, 0.0};
  std::vector<double> norm_std = {1.0, 1.0, 1.0};
  std::string stem = "cifar3x3";
  std::vector<CifsSpec> cifs;  // at most one per position
  std::size_t top_k = 2;
  core::ImgfConfig imgf = core::ImgfConfig::softmax(1.0);

  void validate() const;

  std::size_t stage_width(std::size_t stage) const;
  std::vector<std::size_t> blocks_per_stage() const;
  std::size_t num_blocks() const;
  /// Index of the residual block at `p` in depth order.
  std::size_t block_index(Position p) const;
  std::size_t penultimate_channels() const { return stage_width(3); }

  bool has_cifs() const noexcept { return !cifs.empty(); }
  /// Same backbone with every CIFS module removed.
  ArchConfig vanilla() const;
  /// CIFS at P2 (mlp2 probe) and P1 (linear probe), top-2, softmax T = 1.
  ArchConfig with_default_cifs() const;

  nlohmann::json to_json() const;
  static ArchConfig from_json(const nlohmann::json& j);
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const core::ImgfConfig& c);
void from_json(const nlohmann::json& j, core::ImgfConfig& c);

}  // namespace cifs::model
