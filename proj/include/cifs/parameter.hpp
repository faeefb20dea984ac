#pragma once

#include <string>
#include <vector>

#include "cifs/tensor.hpp"

namespace cifs {

/// Trainable array. Gradients live outside the owning layer, in a slot of
/// a GradientSet that mirrors the owner's parameter order.
template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real> value;
  bool weight_decay = true;
};

template <typename Real>
struct GradientSet {
  std::vector<Tensor<Real>> slots;

  void zero() {
    for (auto& s : slots) s.fill(Real(0));
  }
};

template <typename Real>
GradientSet<Real> make_gradients(const std::vector<const Parameter<Real>*>& params) {
  GradientSet<Real> g;
  g.slots.reserve(params.size());
  for (const auto* p : params) g.slots.emplace_back(p->value.shape());
  return g;
}

}  // namespace cifs
