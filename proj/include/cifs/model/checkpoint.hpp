#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "cifs/model/model.hpp"

namespace cifs::model {

/// File layout: "CIFSCKPT", u32 version, u64 header length, JSON header,
/// then the raw little-endian tensor blobs listed in the header.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ArchConfig arch;
  std::string arch_hash;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  nlohmann::json extra = nlohmann::json::object();
  /// Model state under qualified names plus any auxiliary tensors (e.g. "optim.*").
  std::map<std::string, Tensor<double>> tensors;
};

/// Snapshot of a model's parameters and running statistics.
template <typename Real>
Checkpoint make_checkpoint(const Model<Real>& model, std::uint64_t seed, std::size_t epoch);

/// Writes atomically (temporary file + rename). Throws IoError.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws IoError when unreadable and FormatError (with byte offset) when malformed
/// or when the stored architecture does not match its recorded hash.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies the checkpoint's state into `model`. The checkpoint's architecture
/// hash must equal the model's; otherwise ConfigError.
template <typename Real>
void restore_model(Model<Real>& model, const Checkpoint& ckpt);

template <typename Real>
Model<Real> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace cifs::model
