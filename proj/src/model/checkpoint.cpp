#include "cifs/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace cifs::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[8] = {'C', 'I', 'F', 'S', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("checkpoint truncated", pos);
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

template <typename Real>
Checkpoint make_checkpoint(const Model<Real>& model, std::uint64_t seed, std::size_t epoch) {
  Checkpoint c;
  c.arch = model.config();
  c.arch_hash = c.arch.hash();
  c.seed = seed;
  c.epoch = epoch;
  for (const auto& [name, t] : model.state_tensors()) c.tensors[name] = t->template cast<double>();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header{{"arch", ckpt.arch.to_json()},
                        {"arch_hash", ckpt.arch.hash()},
                        {"seed", ckpt.seed},
                        {"epoch", ckpt.epoch},
                        {"extra", ckpt.extra}};
  // Model state is stored in single precision unless a tensor needs double to round-trip.
  std::string blobs;
  auto entries = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    bool exact_float = true;
    for (double v : t.values()) exact_float = exact_float && static_cast<double>(static_cast<float>(v)) == v;
    const std::size_t offset = blobs.size();
    if (exact_float) {
      for (double v : t.values()) put(blobs, static_cast<float>(v));
    } else {
      for (double v : t.values()) put(blobs, v);
    }
    entries.push_back({{"name", name},
                       {"dtype", exact_float ? "f32" : "f64"},
                       {"shape", t.shape()},
                       {"offset", offset},
                       {"nbytes", blobs.size() - offset}});
  }
  header["tensors"] = entries;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  out += blobs;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not a checkpoint (bad magic)", 0);
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), pos - 4);
  const auto header_len = take<std::uint64_t>(in, pos);
  if (pos + header_len > in.size()) throw FormatError("checkpoint header truncated", pos);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(), pos);
  }
  const std::size_t data_start = pos + header_len;

  Checkpoint c;
  try {
    c.arch = ArchConfig::from_json(header.at("arch"));
    c.arch_hash = header.at("arch_hash").get<std::string>();
    c.seed = header.at("seed").get<std::uint64_t>();
    c.epoch = header.at("epoch").get<std::size_t>();
    c.extra = header.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what(), sizeof(kMagic) + 12);
  }
  if (c.arch.hash() != c.arch_hash)
    throw FormatError("checkpoint architecture does not match its recorded hash", sizeof(kMagic) + 12);

  for (const auto& e : header.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto dtype = e.at("dtype").get<std::string>();
    const Shape shape = e.at("shape").get<Shape>();
    const std::size_t offset = data_start + e.at("offset").get<std::size_t>();
    const std::size_t nbytes = e.at("nbytes").get<std::size_t>();
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (width == 0) throw FormatError("tensor " + name + " has unknown dtype " + dtype, offset);
    if (nbytes != shape_size(shape) * width)
      throw FormatError("tensor " + name + " size does not match its shape", offset);
    if (offset + nbytes > in.size()) throw FormatError("tensor " + name + " truncated", offset);
    Tensor<double> t(shape);
    std::size_t p = offset;
    for (auto& v : t.values())
      v = width == 4 ? static_cast<double>(take<float>(in, p)) : take<double>(in, p);
    c.tensors.emplace(name, std::move(t));
  }
  return c;
}

template <typename Real>
void restore_model(Model<Real>& model, const Checkpoint& ckpt) {
  const auto expected = model.config().hash();
  if (ckpt.arch.hash() != expected)
    throw ConfigError("checkpoint architecture hash " + ckpt.arch.hash().substr(0, 12) +
                      " does not match model hash " + expected.substr(0, 12));
  for (auto& [name, dst] : model.state_tensors()) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw ConfigError("checkpoint lacks tensor " + name);
    if (it->second.shape() != dst->shape())
      throw ConfigError("checkpoint tensor " + name + " has shape " +
                        shape_string(it->second.shape()) + ", model expects " +
                        shape_string(dst->shape()));
    *dst = it->second.template cast<Real>();
  }
}

template <typename Real>
Model<Real> model_from_checkpoint(const Checkpoint& ckpt) {
  Model<Real> m(ckpt.arch);
  restore_model(m, ckpt);
  return m;
}

#define CIFS_INSTANTIATE(Real)                                                                \
  template Checkpoint make_checkpoint<Real>(const Model<Real>&, std::uint64_t, std::size_t);  \
  template void restore_model<Real>(Model<Real>&, const Checkpoint&);                         \
  template Model<Real> model_from_checkpoint<Real>(const Checkpoint&);

CIFS_INSTANTIATE(float)
CIFS_INSTANTIATE(double)

}  // namespace cifs::model
