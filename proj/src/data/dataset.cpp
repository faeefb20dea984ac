#include "cifs/data/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "cifs/random.hpp"

namespace cifs {

void Dataset::validate() const {
  if (images.rank() != 4)
    throw ConfigError("dataset '" + name + "' images must be (n, C, H, W), got " +
                      shape_string(images.shape()));
  if (images.dim(0) != labels.size())
    throw ConfigError("dataset '" + name + "' has " + std::to_string(images.dim(0)) + " images but " +
                      std::to_string(labels.size()) + " labels");
  if (num_classes < 2) throw ConfigError("dataset '" + name + "' needs at least two classes");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= num_classes)
      throw ConfigError("dataset '" + name + "' label " + std::to_string(labels[i]) + " at row " +
                        std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const float v = images[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw ConfigError("dataset '" + name + "' pixel " + std::to_string(i) + " = " + std::to_string(v) +
                        " outside [0, 1]");
  }
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  for (auto r : rows)
    if (r >= size()) throw ConfigError("subset row " + std::to_string(r) + " outside dataset of " +
                                       std::to_string(size()));
  Dataset out;
  out.images = batch_images<float>(rows);
  out.labels = batch_labels(rows);
  out.num_classes = num_classes;
  out.name = name;
  out.split = split;
  out.provenance = provenance;
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (auto l : labels)
    if (l < num_classes) ++counts[l];
  return counts;
}

std::vector<std::size_t> stratified_indices(const Dataset& data, std::size_t n, std::uint64_t seed) {
  if (n >= data.size()) {
    std::vector<std::size_t> all(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class.at(data.labels[i]).push_back(i);
  Rng rng(seed);
  for (auto& rows : by_class) std::shuffle(rows.begin(), rows.end(), rng);

  // Round-robin over classes until n rows are taken.
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t depth = 0; out.size() < n; ++depth)
    for (const auto& rows : by_class)
      if (depth < rows.size() && out.size() < n) out.push_back(rows[depth]);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace cifs
