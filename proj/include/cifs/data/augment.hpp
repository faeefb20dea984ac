#pragma once

#include "cifs/random.hpp"
#include "cifs/tensor.hpp"
#include "json.hpp"

namespace cifs {

/// Random crop after zero padding, then an optional horizontal flip, per sample.
struct Augmentation {
  std::size_t crop_padding = 0;
  bool horizontal_flip = false;

  bool enabled() const noexcept { return crop_padding > 0 || horizontal_flip; }
  /// The standard CIFAR recipe: pad 4, random crop, random flip.
  static Augmentation crop_flip() { return {4, true}; }

  nlohmann::json to_json() const;
  static Augmentation from_json(const nlohmann::json& j);
};

/// Applies `aug` in place to an (N, C, H, W) batch. Draws nothing when disabled.
template <typename Real>
void augment_batch(Tensor<Real>& x, const Augmentation& aug, Rng& rng);

}  // namespace cifs
