#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cifs/tensor.hpp"

namespace cifs {

/// Labelled images in [0, 1], shape (n, C, H, W).
struct Dataset {
  Tensor<float> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string name;
  std::string split;
  /// Source file name -> SHA-256, or a generator description for synthetic data.
  std::map<std::string, std::string> provenance;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  /// Checks shape agreement, value range and label range; throws ConfigError.
  void validate() const;

  /// Images of the given rows as a batch, converted to Real.
  template <typename Real>
  Tensor<Real> batch_images(std::span<const std::size_t> rows) const {
    const std::size_t per = images.size() / images.dim(0);
    Shape shape = images.shape();
    shape[0] = rows.size();
    Tensor<Real> out(shape);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const float* src = images.data() + rows[i] * per;
      std::copy(src, src + per, out.data() + i * per);
    }
    return out;
  }

  std::vector<std::size_t> batch_labels(std::span<const std::size_t> rows) const {
    std::vector<std::size_t> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(labels[r]);
    return out;
  }

  /// Dataset restricted to `rows` (in the given order).
  Dataset subset(std::span<const std::size_t> rows) const;

  /// Rows per class, in order.
  std::vector<std::size_t> class_counts() const;
};

/// `n` row indices with class proportions as equal as possible, chosen by a
/// seeded shuffle within each class and returned in ascending order. n larger
/// than the dataset returns every row.
std::vector<std::size_t> stratified_indices(const Dataset& data, std::size_t n, std::uint64_t seed);

}  // namespace cifs
