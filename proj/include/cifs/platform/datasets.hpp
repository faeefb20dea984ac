#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cifs/data/dataset.hpp"

namespace cifs::platform {

/// CIFAR-10 binary batches: 3073-byte records of one label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes. `split` is "train"
/// (data_batch_1..5.bin) or "test" (test_batch.bin). `dir` may also be the
/// parent of cifar-10-batches-bin. With `standard_counts`, each batch file
/// must hold exactly 10000 records.
Dataset load_cifar10(const std::filesystem::path& dir, const std::string& split, bool standard_counts = true);

/// Writes a 3x32x32 dataset as one CIFAR-10 batch file; pixels are rounded to bytes.
void write_cifar10_batch(const Dataset& data, const std::filesystem::path& path);

/// Raw IDX array: element type code and big-endian dimensions.
struct IdxArray {
  std::uint8_t type = 0x08;  // 0x08 unsigned byte, 0x0D float32
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> bytes;  // payload for 0x08
  std::vector<float> floats;        // payload for 0x0D
};

/// Throws FormatError on a bad magic number, unknown type or truncated payload.
IdxArray read_idx(const std::filesystem::path& path);
void write_idx(const IdxArray& array, const std::filesystem::path& path);

/// Fashion-MNIST style IDX pair {train,t10k}-{images-idx3,labels-idx1}-ubyte.
/// Grayscale images are kept single-channel or replicated to `channels` = 3.
Dataset load_idx(const std::filesystem::path& dir, const std::string& split, std::size_t channels = 1,
                 std::size_t num_classes = 10);

/// Writes the pair read by load_idx (first channel only, pixels rounded to bytes).
void write_idx_dataset(const Dataset& data, const std::filesystem::path& dir, const std::string& split);

struct SyntheticSpec {
  Shape shape = {1, 16, 16};
  /// Prototype contrast: every pixel of a prototype is 0.5 +/- amplitude.
  double amplitude = 0.25;
  /// Per-pixel Gaussian noise around the prototype, clamped to [0, 1].
  double noise = 0.1;
  /// Samples of different splits are drawn from separate streams; the
  /// prototypes depend on the seed only.
  std::string split = "train";
};

/// K class prototypes with random +/- amplitude pixel patterns plus Gaussian
/// noise. Labels are assigned round-robin, so class counts differ by at most
/// one. Deterministic in `seed`.
Dataset make_synthetic(std::size_t n, std::size_t num_classes, std::uint64_t seed, const SyntheticSpec& spec = {});

}  // namespace cifs::platform
