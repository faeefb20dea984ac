#include "cifs/model/arch_config.hpp"

#include <algorithm>
#include <cmath>

#include "cifs/digest.hpp"
#include "common/json_util.hpp"

namespace cifs::model {

using nlohmann::json;
using json_util::get_or;

std::string to_string(Family f) {
  return f == Family::resnet18_like ? "resnet18_like" : "resnet10_like";
}

std::string to_string(Position p) { return p == Position::P1 ? "P1" : "P2"; }

Family parse_family(const std::string& s) {
  if (s == "resnet18_like" || s == "resnet18-like" || s == "resnet18") return Family::resnet18_like;
  if (s == "resnet10_like" || s == "resnet10-like" || s == "resnet10") return Family::resnet10_like;
  throw ConfigError("unknown architecture family '" + s + "'");
}

Position parse_position(const std::string& s) {
  if (s == "P1" || s == "p1") return Position::P1;
  if (s == "P2" || s == "p2") return Position::P2;
  throw ConfigError("unknown CIFS position '" + s + "' (expected P1 or P2)");
}

void ArchConfig::validate() const {
  if (!(width_multiplier > 0) || !std::isfinite(width_multiplier))
    throw ConfigError("width_multiplier must be positive");
  if (base_width == 0) throw ConfigError("base_width must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (input_shape.size() != 3 || shape_size(input_shape) == 0)
    throw ConfigError("input_shape must be (C, H, W) with positive extents");
  if (norm_mean.size() != input_shape[0] || norm_std.size() != input_shape[0])
    throw ConfigError("norm_mean/norm_std need one entry per input channel");
  for (double s : norm_std)
    if (!(s > 0)) throw ConfigError("norm_std entries must be positive");
  if (stem != "cifar3x3") throw ConfigError("unsupported stem '" + stem + "'");
  for (std::size_t i = 0; i < cifs.size(); ++i) {
    for (std::size_t j = i + 1; j < cifs.size(); ++j)
      if (cifs[i].position == cifs[j].position)
        throw ConfigError("duplicate CIFS position " + to_string(cifs[i].position));
    if (cifs[i].probe.kind == core::ProbeKind::mlp2 && cifs[i].probe.hidden == 0)
      throw ConfigError("mlp2 probe needs a positive hidden width");
  }
  if (has_cifs()) {
    if (top_k < 1 || top_k > num_classes)
      throw ConfigError("top_k must lie in [1, num_classes]");
    imgf.validate();
  }
}

std::size_t ArchConfig::stage_width(std::size_t stage) const {
  const auto base = static_cast<std::size_t>(
      std::max<long>(1, std::lround(static_cast<double>(base_width) * width_multiplier)));
  return base << stage;
}

std::vector<std::size_t> ArchConfig::blocks_per_stage() const {
  if (family == Family::resnet18_like) return {2, 2, 2, 2};
  return {1, 1, 1, 1};
}

std::size_t ArchConfig::num_blocks() const {
  const auto b = blocks_per_stage();
  std::size_t n = 0;
  for (auto v : b) n += v;
  return n;
}

std::size_t ArchConfig::block_index(Position p) const {
  return num_blocks() - (p == Position::P1 ? 1 : 2);
}

ArchConfig ArchConfig::vanilla() const {
  ArchConfig c = *this;
  c.cifs.clear();
  return c;
}

ArchConfig ArchConfig::with_default_cifs() const {
  ArchConfig c = *this;
  c.cifs = {{Position::P2, {core::ProbeKind::mlp2, 256, core::ProbeActivation::relu}},
            {Position::P1, {core::ProbeKind::linear, 256, core::ProbeActivation::relu}}};
  c.top_k = 2;
  c.imgf = core::ImgfConfig::softmax(1.0);
  return c;
}

void to_json(json& j, const core::ImgfConfig& c) {
  j = json{{"kind", core::to_string(c.kind)}, {"alpha", c.alpha}, {"temperature", c.temperature}};
}

void from_json(const json& j, core::ImgfConfig& c) {
  json_util::require_known_keys(j, {"kind", "alpha", "temperature"}, "imgf");
  c.kind = core::parse_imgf_kind(json_util::get_required<std::string>(j, "kind", "imgf"));
  const double default_alpha = c.kind == core::ImgfKind::softplus ? 5.0 : 10.0;
  c.alpha = get_or(j, "alpha", default_alpha, "imgf");
  c.temperature = get_or(j, "temperature", 1.0, "imgf");
  c.validate();
}

json ArchConfig::to_json() const {
  json positions = json::array();
  for (const auto& s : cifs)
    positions.push_back({{"position", model::to_string(s.position)},
                         {"probe",
                          {{"kind", core::to_string(s.probe.kind)},
                           {"hidden", s.probe.hidden},
                           {"activation", core::to_string(s.probe.activation)}}}});
  json imgf_json;
  model::to_json(imgf_json, imgf);
  return json{{"family", model::to_string(family)},
              {"base_width", base_width},
              {"width_multiplier", width_multiplier},
              {"num_classes", num_classes},
              {"input_shape", input_shape},
              {"norm_mean", norm_mean},
              {"norm_std", norm_std},
              {"stem", stem},
              {"cifs", positions},
              {"top_k", top_k},
              {"imgf", imgf_json}};
}

ArchConfig ArchConfig::from_json(const json& j) {
  const std::string what = "arch";
  json_util::require_known_keys(j,
                                {"family", "base_width", "width_multiplier", "num_classes",
                                 "input_shape", "norm_mean", "norm_std", "stem", "cifs", "top_k",
                                 "imgf"},
                                what);
  ArchConfig c;
  c.family = parse_family(get_or<std::string>(j, "family", to_string(c.family), what));
  c.base_width = get_or(j, "base_width", c.base_width, what);
  c.width_multiplier = get_or(j, "width_multiplier", c.width_multiplier, what);
  c.num_classes = get_or(j, "num_classes", c.num_classes, what);
  c.input_shape = get_or(j, "input_shape", c.input_shape, what);
  const std::size_t channels = c.input_shape.empty() ? 0 : c.input_shape[0];
  c.norm_mean = get_or(j, "norm_mean", std::vector<double>(channels, 0.0), what);
  c.norm_std = get_or(j, "norm_std", std::vector<double>(channels, 1.0), what);
  c.stem = get_or(j, "stem", c.stem, what);
  c.top_k = get_or(j, "top_k", c.top_k, what);
  if (auto it = j.find("imgf"); it != j.end()) model::from_json(*it, c.imgf);
  if (auto it = j.find("cifs"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("arch.cifs must be an array");
    for (const auto& e : *it) {
      json_util::require_known_keys(e, {"position", "probe"}, "arch.cifs[]");
      CifsSpec s;
      s.position = parse_position(json_util::get_required<std::string>(e, "position", "arch.cifs[]"));
      if (auto p = e.find("probe"); p != e.end()) {
        json_util::require_known_keys(*p, {"kind", "hidden", "activation"}, "arch.cifs[].probe");
        s.probe.kind = core::parse_probe_kind(get_or<std::string>(*p, "kind", "linear", "probe"));
        s.probe.hidden = get_or(*p, "hidden", s.probe.hidden, "probe");
        s.probe.activation =
            core::parse_probe_activation(get_or<std::string>(*p, "activation", "relu", "probe"));
      }
      c.cifs.push_back(s);
    }
  }
  c.validate();
  return c;
}

std::string ArchConfig::hash() const { return sha256_hex(to_json().dump()); }

}  // namespace cifs::model
