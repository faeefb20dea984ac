#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace cifs {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, shape mismatch or out-of-range argument.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values detected during a computation.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what,
                          std::optional<std::size_t> sample = std::nullopt)
      : Error(sample ? what + " (sample " + std::to_string(*sample) + ")" : what),
        sample_(sample) {}

  std::optional<std::size_t> sample_index() const noexcept { return sample_; }

 private:
  std::optional<std::size_t> sample_;
};

/// Malformed binary input. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}

  std::uint64_t byte_offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Requested differentiation mode is not available for a component.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace cifs
