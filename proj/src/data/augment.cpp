#include "cifs/data/augment.hpp"

#include <vector>

#include "common/json_util.hpp"

namespace cifs {

nlohmann::json Augmentation::to_json() const {
  return {{"crop_padding", crop_padding}, {"horizontal_flip", horizontal_flip}};
}

Augmentation Augmentation::from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "none") return {};
    if (s == "crop4+flip") return crop_flip();
    throw ConfigError("unknown augmentation '" + s + "' (expected none or crop4+flip)");
  }
  json_util::require_known_keys(j, {"crop_padding", "horizontal_flip"}, "augmentation");
  Augmentation a;
  a.crop_padding = json_util::get_or<std::size_t>(j, "crop_padding", 0, "augmentation");
  a.horizontal_flip = json_util::get_or<bool>(j, "horizontal_flip", false, "augmentation");
  return a;
}

template <typename Real>
void augment_batch(Tensor<Real>& x, const Augmentation& aug, Rng& rng) {
  if (!aug.enabled()) return;
  if (x.rank() != 4) throw ConfigError("augmentation expects (N, C, H, W)");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto pad = static_cast<std::ptrdiff_t>(aug.crop_padding);
  std::uniform_int_distribution<std::ptrdiff_t> shift(-pad, pad);
  std::bernoulli_distribution flip(0.5);
  std::vector<Real> plane(H * W);
  for (std::size_t n = 0; n < N; ++n) {
    const std::ptrdiff_t dy = shift(rng), dx = shift(rng);
    const bool mirror = aug.horizontal_flip && flip(rng);
    for (std::size_t c = 0; c < C; ++c) {
      Real* p = x.data() + (n * C + c) * H * W;
      std::copy(p, p + H * W, plane.begin());
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(h) + dy;
          const std::ptrdiff_t sx0 = static_cast<std::ptrdiff_t>(mirror ? W - 1 - w : w);
          const std::ptrdiff_t sx = sx0 + dx;
          const bool inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(H) && sx >= 0 &&
                              sx < static_cast<std::ptrdiff_t>(W);
          p[h * W + w] = inside ? plane[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)] : Real(0);
        }
    }
  }
}

template void augment_batch(Tensor<float>&, const Augmentation&, Rng&);
template void augment_batch(Tensor<double>&, const Augmentation&, Rng&);

}  // namespace cifs
