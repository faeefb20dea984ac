#include "cifs/platform/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include "cifs/digest.hpp"
#include "cifs/random.hpp"

namespace cifs::platform {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;
constexpr std::size_t kCifarPerBatch = 10000;

std::string read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (is.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::uint32_t read_be32(const std::string& b, std::size_t at) {
  return (std::uint32_t(std::uint8_t(b[at])) << 24) | (std::uint32_t(std::uint8_t(b[at + 1])) << 16) |
         (std::uint32_t(std::uint8_t(b[at + 2])) << 8) | std::uint32_t(std::uint8_t(b[at + 3]));
}

void append_be32(std::string& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<char>((v >> s) & 0xFF));
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

fs::path cifar_root(const fs::path& dir) {
  if (fs::exists(dir / "test_batch.bin") || fs::exists(dir / "data_batch_1.bin")) return dir;
  if (fs::exists(dir / "cifar-10-batches-bin")) return dir / "cifar-10-batches-bin";
  return dir;
}

}  // namespace

Dataset load_cifar10(const fs::path& dir, const std::string& split, bool standard_counts) {
  std::vector<std::string> files;
  if (split == "train")
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  else if (split == "test")
    files.push_back("test_batch.bin");
  else
    throw ConfigError("CIFAR-10 split must be 'train' or 'test', got '" + split + "'");

  const fs::path root = cifar_root(dir);
  std::vector<std::string> contents;
  std::size_t total = 0;
  Dataset d;
  for (const auto& f : files) {
    auto bytes = read_bytes(root / f);
    if (bytes.size() % kCifarRecord != 0)
      throw FormatError(f + ": truncated record (" + std::to_string(bytes.size()) + " bytes is not a multiple of " +
                            std::to_string(kCifarRecord) + ")",
                        bytes.size() - bytes.size() % kCifarRecord);
    const std::size_t records = bytes.size() / kCifarRecord;
    if (records == 0) throw FormatError(f + ": no records", 0);
    if (standard_counts && records != kCifarPerBatch)
      throw FormatError(f + ": expected " + std::to_string(kCifarPerBatch) + " records, found " +
                            std::to_string(records),
                        bytes.size());
    d.provenance[f] = sha256_hex(bytes);
    total += records;
    contents.push_back(std::move(bytes));
  }

  d.name = "cifar10";
  d.split = split;
  d.num_classes = 10;
  d.images = Tensor<float>({total, 3, 32, 32});
  d.labels.reserve(total);
  float* out = d.images.data();
  for (std::size_t fi = 0; fi < contents.size(); ++fi) {
    const auto& bytes = contents[fi];
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
      const auto label = static_cast<std::uint8_t>(bytes[off]);
      if (label > 9) throw FormatError(files[fi] + ": label byte " + std::to_string(label) + " > 9", off);
      d.labels.push_back(label);
      for (std::size_t p = 1; p < kCifarRecord; ++p) *out++ = static_cast<std::uint8_t>(bytes[off + p]) / 255.0f;
    }
  }
  return d;
}

void write_cifar10_batch(const Dataset& data, const fs::path& path) {
  data.validate();
  if (data.sample_shape() != Shape{3, 32, 32})
    throw ConfigError("CIFAR-10 records are 3x32x32, dataset is " + shape_string(data.sample_shape()));
  if (data.num_classes > 10) throw ConfigError("CIFAR-10 labels must be < 10");
  std::string bytes;
  bytes.reserve(data.size() * kCifarRecord);
  const float* px = data.images.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    bytes.push_back(static_cast<char>(data.labels[i]));
    for (std::size_t p = 1; p < kCifarRecord; ++p) bytes.push_back(static_cast<char>(to_byte(*px++)));
  }
  write_bytes(path, bytes);
}

IdxArray read_idx(const fs::path& path) {
  const auto b = read_bytes(path);
  const std::string name = path.filename().string();
  if (b.size() < 4) throw FormatError(name + ": truncated IDX header", b.size());
  if (b[0] != 0 || b[1] != 0) throw FormatError(name + ": bad IDX magic " + hex32(read_be32(b, 0)), 0);
  IdxArray a;
  a.type = static_cast<std::uint8_t>(b[2]);
  if (a.type != 0x08 && a.type != 0x0D) throw FormatError(name + ": unsupported IDX element type", 2);
  const std::size_t rank = static_cast<std::uint8_t>(b[3]);
  const std::size_t header = 4 + 4 * rank;
  if (b.size() < header) throw FormatError(name + ": truncated IDX header", b.size());
  std::size_t count = 1;
  for (std::size_t r = 0; r < rank; ++r) {
    a.dims.push_back(read_be32(b, 4 + 4 * r));
    count *= a.dims.back();
  }
  const std::size_t elem = a.type == 0x08 ? 1 : 4;
  const std::size_t expected = header + count * elem;
  if (b.size() < expected)
    throw FormatError(name + ": truncated payload, expected " + std::to_string(expected) + " bytes", b.size());
  if (b.size() > expected) throw FormatError(name + ": trailing bytes after the payload", expected);
  if (a.type == 0x08) {
    a.bytes.assign(b.begin() + static_cast<std::ptrdiff_t>(header), b.end());
  } else {
    a.floats.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t bits = read_be32(b, header + 4 * i);
      std::memcpy(&a.floats[i], &bits, 4);
    }
  }
  return a;
}

void write_idx(const IdxArray& a, const fs::path& path) {
  if (a.type != 0x08 && a.type != 0x0D) throw ConfigError("IDX element type must be 0x08 or 0x0D");
  if (a.dims.size() > 255) throw ConfigError("IDX rank must be < 256");
  std::size_t count = 1;
  for (auto d : a.dims) count *= d;
  if (count != (a.type == 0x08 ? a.bytes.size() : a.floats.size()))
    throw ConfigError("IDX payload size disagrees with its dimensions");
  std::string b;
  b.push_back(0);
  b.push_back(0);
  b.push_back(static_cast<char>(a.type));
  b.push_back(static_cast<char>(a.dims.size()));
  for (auto d : a.dims) append_be32(b, static_cast<std::uint32_t>(d));
  if (a.type == 0x08) {
    b.append(a.bytes.begin(), a.bytes.end());
  } else {
    for (float f : a.floats) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      append_be32(b, bits);
    }
  }
  write_bytes(path, b);
}

Dataset load_idx(const fs::path& dir, const std::string& split, std::size_t channels, std::size_t num_classes) {
  std::string prefix;
  if (split == "train")
    prefix = "train";
  else if (split == "test")
    prefix = "t10k";
  else
    throw ConfigError("IDX split must be 'train' or 'test', got '" + split + "'");
  if (channels != 1 && channels != 3) throw ConfigError("IDX images load with 1 or 3 channels");

  const std::string image_file = prefix + "-images-idx3-ubyte", label_file = prefix + "-labels-idx1-ubyte";
  const auto images = read_idx(dir / image_file);
  const auto labels = read_idx(dir / label_file);
  if (images.type != 0x08 || images.dims.size() != 3)
    throw FormatError(image_file + ": magic number mismatch, expected 0x00000803", 0);
  if (labels.type != 0x08 || labels.dims.size() != 1)
    throw FormatError(label_file + ": magic number mismatch, expected 0x00000801", 0);
  const std::size_t n = images.dims[0], H = images.dims[1], W = images.dims[2];
  if (n == 0) throw FormatError(image_file + ": no images", 4);
  if (labels.dims[0] != n)
    throw FormatError(label_file + ": " + std::to_string(labels.dims[0]) + " labels for " + std::to_string(n) +
                          " images",
                      4);

  Dataset d;
  d.name = "idx:" + dir.filename().string();
  d.split = split;
  d.num_classes = num_classes;
  d.provenance[image_file] = file_sha256_hex(dir / image_file);
  d.provenance[label_file] = file_sha256_hex(dir / label_file);
  d.images = Tensor<float>({n, channels, H, W});
  const std::size_t plane = H * W;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t lab = labels.bytes[i];
    if (lab >= num_classes)
      throw FormatError(label_file + ": label " + std::to_string(lab) + " >= " + std::to_string(num_classes), 8 + i);
    d.labels.push_back(lab);
    for (std::size_t c = 0; c < channels; ++c) {
      float* dst = d.images.data() + (i * channels + c) * plane;
      const std::uint8_t* src = images.bytes.data() + i * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] / 255.0f;
    }
  }
  return d;
}

void write_idx_dataset(const Dataset& data, const fs::path& dir, const std::string& split) {
  data.validate();
  if (data.num_classes > 256) throw ConfigError("IDX labels are single bytes");
  const std::string prefix = split == "test" ? "t10k" : split == "train" ? "train" : "";
  if (prefix.empty()) throw ConfigError("IDX split must be 'train' or 'test', got '" + split + "'");
  const std::size_t n = data.size(), C = data.images.dim(1), H = data.images.dim(2), W = data.images.dim(3);
  IdxArray images;
  images.dims = {n, H, W};
  images.bytes.reserve(n * H * W);
  for (std::size_t i = 0; i < n; ++i) {
    const float* src = data.images.data() + i * C * H * W;
    for (std::size_t p = 0; p < H * W; ++p) images.bytes.push_back(to_byte(src[p]));
  }
  IdxArray labels;
  labels.dims = {n};
  for (auto y : data.labels) labels.bytes.push_back(static_cast<std::uint8_t>(y));
  write_idx(images, dir / (prefix + "-images-idx3-ubyte"));
  write_idx(labels, dir / (prefix + "-labels-idx1-ubyte"));
}

Dataset make_synthetic(std::size_t n, std::size_t num_classes, std::uint64_t seed, const SyntheticSpec& spec) {
  if (num_classes < 2) throw ConfigError("synthetic data needs at least two classes");
  if (n < num_classes) throw ConfigError("synthetic data needs n >= number of classes");
  if (spec.shape.size() != 3) throw ConfigError("synthetic sample shape must be (C, H, W)");
  if (!(spec.amplitude > 0 && spec.amplitude <= 0.5)) throw ConfigError("synthetic amplitude must be in (0, 0.5]");
  if (!(spec.noise >= 0)) throw ConfigError("synthetic noise must be >= 0");
  if (spec.split != "train" && spec.split != "test") throw ConfigError("synthetic split must be 'train' or 'test'");

  const std::size_t D = spec.shape[0] * spec.shape[1] * spec.shape[2];
  Rng proto_rng(derive_seed(seed, 0));
  std::bernoulli_distribution coin(0.5);
  std::vector<float> prototypes(num_classes * D);
  for (auto& p : prototypes) p = static_cast<float>(0.5 + (coin(proto_rng) ? spec.amplitude : -spec.amplitude));

  Dataset d;
  d.name = "synthetic";
  d.split = spec.split;
  d.num_classes = num_classes;
  std::ostringstream desc;
  desc << "n=" << n << " K=" << num_classes << " seed=" << seed << " shape=" << shape_string(spec.shape)
       << " amplitude=" << spec.amplitude << " noise=" << spec.noise;
  d.provenance["generator"] = desc.str();
  d.images = Tensor<float>({n, spec.shape[0], spec.shape[1], spec.shape[2]});
  Rng rng(derive_seed(seed, spec.split == "train" ? 1 : 2));
  std::normal_distribution<double> gauss(0.0, spec.noise);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % num_classes;
    d.labels.push_back(k);
    float* dst = d.images.data() + i * D;
    for (std::size_t p = 0; p < D; ++p)
      dst[p] = static_cast<float>(std::clamp(prototypes[k * D + p] + (spec.noise > 0 ? gauss(rng) : 0.0), 0.0, 1.0));
  }
  return d;
}

}  // namespace cifs::platform
