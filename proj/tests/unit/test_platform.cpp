#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>

#include "cifs/platform/cli.hpp"
#include "cifs/platform/datasets.hpp"
#include "cifs/platform/experiment.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cifs;
using namespace cifs::platform;

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("cifs_platform_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::string be32(std::uint32_t v) {
  std::string s;
  for (int sh = 24; sh >= 0; sh -= 8) s.push_back(static_cast<char>((v >> sh) & 0xFF));
  return s;
}

// One CIFAR record: label byte then R, G, B planes filled with `value`.
std::string cifar_record(std::uint8_t label, std::uint8_t value) {
  std::string r(1 + 3072, static_cast<char>(value));
  r[0] = static_cast<char>(label);
  return r;
}

float px(const Dataset& d, std::size_t i, std::size_t c, std::size_t h, std::size_t w) {
  const auto s = d.sample_shape();
  return d.images[((i * s[0] + c) * s[1] + h) * s[2] + w];
}

bool same_pixels(const Dataset& a, const Dataset& b) {
  const auto x = a.images.values(), y = b.images.values();
  return std::equal(x.begin(), x.end(), y.begin(), y.end());
}

std::size_t expect_format_offset(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.byte_offset();
  }
  FAIL("expected FormatError");
  return 0;
}

// Hand-written IDX pair: n images of H x W with pixel (i, p) = (i + p) % 256.
void write_raw_idx_pair(const fs::path& dir, std::size_t n, std::size_t H, std::size_t W,
                        const std::vector<std::uint8_t>& labels) {
  std::string img = std::string("\0\0\x08\x03", 4) + be32(n) + be32(H) + be32(W);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < H * W; ++p) img.push_back(static_cast<char>((i + p) % 256));
  std::string lab = std::string("\0\0\x08\x01", 4) + be32(n);
  for (auto l : labels) lab.push_back(static_cast<char>(l));
  write_file(dir / "train-images-idx3-ubyte", img);
  write_file(dir / "train-labels-idx1-ubyte", lab);
}

// Minimal experiment config: 8x8 synthetic, two classes, one cheap epoch.
nlohmann::json tiny_experiment(bool with_cifs, const fs::path& out) {
  nlohmann::json arch = {{"family", "resnet10_like"},   {"base_width", 8},          {"num_classes", 2},
                         {"input_shape", {1, 8, 8}},     {"norm_mean", {0.5}},        {"norm_std", {0.25}},
                         {"top_k", 2},                   {"imgf", {{"kind", "softmax"}, {"temperature", 1.0}}}};
  arch["cifs"] = nlohmann::json::array();
  if (with_cifs)
    arch["cifs"] = {{{"position", "P2"}, {"probe", {{"kind", "mlp2"}, {"hidden", 16}}}},
                    {{"position", "P1"}, {"probe", {{"kind", "linear"}}}}};
  return {{"data",
           {{"name", "synthetic"},
            {"num_classes", 2},
            {"seed", 3},
            {"synthetic", {{"train", 64}, {"eval", 32}, {"shape", {1, 8, 8}}}}}},
          {"arch", arch},
          {"train",
           {{"epochs", 1},
            {"batch_size", 16},
            {"lr", {{"initial", 0.05}, {"milestones", nlohmann::json::array()}, {"gamma", 0.1}}},
            {"epsilon", 0.1},
            {"inner", {{"kind", "pgd"}, {"steps", 2}, {"step_size", "eps/2"}, {"random_init", true}}},
            {"eval_attack", {{"kind", "pgd"}, {"steps", 2}, {"step_size", "eps/2"}}},
            {"eval_subset", 32},
            {"augment", "none"},
            {"seed", 0}}},
          {"eval",
           {{"attacks", {{{"kind", "pgd"}, {"epsilon", 0.1}, {"steps", 3}, {"step_size", "eps/3"}}}},
            {"seed", 0}}},
          {"out_dir", out.string()}};
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j, const std::string& name = "exp.json") {
  std::ofstream(dir / name) << j.dump(2);
  return dir / name;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cifs");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Drops wall-clock fields so two runs can be compared.
void strip_timing(nlohmann::json& j) {
  if (j.is_object()) {
    j.erase("wall_seconds");
    j.erase("total_seconds");
    for (auto& [k, v] : j.items()) strip_timing(v);
  } else if (j.is_array()) {
    for (auto& v : j) strip_timing(v);
  }
}

std::map<std::string, double> cells_of(const std::string& stdout_text) {
  std::map<std::string, double> cells;
  std::istringstream is(stdout_text);
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> parts;
    std::stringstream ls(line);
    std::string p;
    while (std::getline(ls, p, '\t')) parts.push_back(p);
    if (parts.size() == 4) cells[parts[0] + "@" + parts[1]] = std::stod(parts[3]);
  }
  return cells;
}

double natural_of(const std::string& stdout_text) {
  const auto at = stdout_text.find("natural ");
  REQUIRE(at != std::string::npos);
  return std::stod(stdout_text.substr(at + 8));
}

}  // namespace

TEST_CASE("cifar10: bit-exact decoding of a hand-written batch") {
  TempDir dir("cifar");
  std::string bytes;
  for (std::size_t i = 0; i < 10000; ++i) bytes += cifar_record(static_cast<std::uint8_t>(i % 10), i == 0 ? 255 : 0);
  // Record 1: distinct red, green and blue planes.
  for (std::size_t p = 0; p < 1024; ++p) {
    bytes[3073 + 1 + p] = static_cast<char>(10);
    bytes[3073 + 1 + 1024 + p] = static_cast<char>(20);
    bytes[3073 + 1 + 2048 + p] = static_cast<char>(30);
  }
  write_file(dir.path / "test_batch.bin", bytes);

  const auto d = load_cifar10(dir.path, "test");
  CHECK(d.size() == 10000);
  CHECK(d.sample_shape() == Shape{3, 32, 32});
  CHECK(d.labels[0] == 0);
  CHECK(d.labels[1] == 1);
  CHECK(d.labels[9999] == 9);
  CHECK(px(d, 0, 0, 0, 0) == 1.0f);
  CHECK(px(d, 0, 2, 31, 31) == 1.0f);
  CHECK(px(d, 1, 0, 5, 5) == doctest::Approx(10 / 255.0));
  CHECK(px(d, 1, 1, 5, 5) == doctest::Approx(20 / 255.0));
  CHECK(px(d, 1, 2, 5, 5) == doctest::Approx(30 / 255.0));
  CHECK(px(d, 2, 1, 0, 0) == 0.0f);
  CHECK(d.provenance.at("test_batch.bin").size() == 64);
  CHECK_NOTHROW(d.validate());

  // The archive's own subdirectory is accepted too.
  fs::create_directories(dir.path / "outer" / "cifar-10-batches-bin");
  fs::copy_file(dir.path / "test_batch.bin", dir.path / "outer" / "cifar-10-batches-bin" / "test_batch.bin");
  CHECK(load_cifar10(dir.path / "outer", "test").labels == d.labels);
}

TEST_CASE("cifar10: malformed batches fail with the byte offset") {
  TempDir dir("cifar_bad");
  std::string bytes = cifar_record(3, 7) + cifar_record(4, 7);

  SUBCASE("truncated trailing record") {
    write_file(dir.path / "test_batch.bin", bytes + std::string(100, '\0'));
    CHECK(expect_format_offset([&] { load_cifar10(dir.path, "test", false); }) == 2 * 3073);
  }
  SUBCASE("label byte out of range") {
    bytes[3073] = static_cast<char>(12);
    write_file(dir.path / "test_batch.bin", bytes);
    CHECK(expect_format_offset([&] { load_cifar10(dir.path, "test", false); }) == 3073);
  }
  SUBCASE("non-standard record count") {
    write_file(dir.path / "test_batch.bin", bytes);
    CHECK_THROWS_AS(load_cifar10(dir.path, "test"), FormatError);
    CHECK(load_cifar10(dir.path, "test", false).size() == 2);
  }
  SUBCASE("missing file and bad split") {
    CHECK_THROWS_AS(load_cifar10(dir.path, "test"), IoError);
    CHECK_THROWS_AS(load_cifar10(dir.path, "valid"), ConfigError);
  }
}

TEST_CASE("cifar10: writer and loader round trip") {
  TempDir dir("cifar_rt");
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> byte(0, 255);
  Dataset d;
  d.num_classes = 10;
  d.images = Tensor<float>({12, 3, 32, 32});
  for (auto& v : d.images.values()) v = byte(rng) / 255.0f;
  for (std::size_t i = 0; i < 12; ++i) d.labels.push_back((7 * i) % 10);
  write_cifar10_batch(d, dir.path / "test_batch.bin");
  const auto back = load_cifar10(dir.path, "test", false);
  CHECK(back.labels == d.labels);
  CHECK(same_pixels(back, d));
}

TEST_CASE("idx: hand-written pair decodes exactly") {
  TempDir dir("idx");
  write_raw_idx_pair(dir.path, 3, 4, 5, {2, 0, 9});
  const auto d = load_idx(dir.path, "train");
  CHECK(d.size() == 3);
  CHECK(d.sample_shape() == Shape{1, 4, 5});
  CHECK(d.labels == std::vector<std::size_t>{2, 0, 9});
  CHECK(px(d, 0, 0, 0, 0) == 0.0f);
  CHECK(px(d, 2, 0, 3, 4) == doctest::Approx((2 + 19) / 255.0));
  CHECK(d.provenance.size() == 2);

  const auto rgb = load_idx(dir.path, "train", 3);
  CHECK(rgb.sample_shape() == Shape{3, 4, 5});
  CHECK(px(rgb, 1, 2, 1, 1) == px(d, 1, 0, 1, 1));
}

TEST_CASE("idx: an all-zero image loads as zeros") {
  TempDir dir("idx_zero");
  std::string img = std::string("\0\0\x08\x03", 4) + be32(1) + be32(2) + be32(2) + std::string(4, '\0');
  write_file(dir.path / "t10k-images-idx3-ubyte", img);
  write_file(dir.path / "t10k-labels-idx1-ubyte", std::string("\0\0\x08\x01", 4) + be32(1) + std::string(1, '\x04'));
  const auto d = load_idx(dir.path, "test");
  for (float v : d.images.values()) CHECK(v == 0.0f);
  CHECK(d.labels[0] == 4);
}

TEST_CASE("idx: malformed files are rejected") {
  TempDir dir("idx_bad");
  write_raw_idx_pair(dir.path, 2, 2, 2, {1, 1});

  SUBCASE("labels file with an image magic") {
    fs::copy_file(dir.path / "train-images-idx3-ubyte", dir.path / "train-labels-idx1-ubyte",
                  fs::copy_options::overwrite_existing);
    CHECK_THROWS_AS(load_idx(dir.path, "train"), FormatError);
  }
  SUBCASE("non-zero leading magic bytes") {
    auto b = read_file(dir.path / "train-images-idx3-ubyte");
    b[0] = 1;
    write_file(dir.path / "train-images-idx3-ubyte", b);
    CHECK(expect_format_offset([&] { load_idx(dir.path, "train"); }) == 0);
  }
  SUBCASE("count mismatch between images and labels") {
    write_file(dir.path / "train-labels-idx1-ubyte", std::string("\0\0\x08\x01", 4) + be32(3) + "\1\1\1");
    CHECK_THROWS_AS(load_idx(dir.path, "train"), FormatError);
  }
  SUBCASE("truncated payload") {
    auto b = read_file(dir.path / "train-images-idx3-ubyte");
    b.pop_back();
    write_file(dir.path / "train-images-idx3-ubyte", b);
    CHECK(expect_format_offset([&] { load_idx(dir.path, "train"); }) == b.size());
  }
  SUBCASE("label beyond the class count") {
    write_file(dir.path / "train-labels-idx1-ubyte", std::string("\0\0\x08\x01", 4) + be32(2) + "\1\x0c");
    CHECK(expect_format_offset([&] { load_idx(dir.path, "train"); }) == 9);
  }
  SUBCASE("unknown split") { CHECK_THROWS_AS(load_idx(dir.path, "dev"), ConfigError); }
}

TEST_CASE("idx: float arrays and datasets round trip") {
  TempDir dir("idx_rt");
  IdxArray a;
  a.type = 0x0D;
  a.dims = {2, 3};
  a.floats = {0.0f, -1.5f, 3.25f, 1e-8f, 0.5f, 255.0f};
  write_idx(a, dir.path / "floats");
  const auto back = read_idx(dir.path / "floats");
  CHECK(back.type == 0x0D);
  CHECK(back.dims == a.dims);
  CHECK(back.floats == a.floats);

  const auto syn = make_synthetic(20, 4, 2, {{1, 6, 6}, 0.25, 0.1, "test"});
  write_idx_dataset(syn, dir.path, "test");
  const auto loaded = load_idx(dir.path, "test", 1, 4);
  CHECK(loaded.labels == syn.labels);
  for (std::size_t i = 0; i < syn.images.size(); ++i)
    CHECK(std::abs(loaded.images[i] - syn.images[i]) <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("synthetic: deterministic, balanced and in range") {
  const auto a = make_synthetic(1001, 3, 42);
  const auto b = make_synthetic(1001, 3, 42);
  const auto c = make_synthetic(1001, 3, 43);
  CHECK(same_pixels(a, b));
  CHECK(a.labels == b.labels);
  CHECK(!same_pixels(a, c));
  CHECK_NOTHROW(a.validate());
  const auto counts = a.class_counts();
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  CHECK(*hi - *lo <= 1);

  // Train and test share prototypes but not samples.
  const auto test = make_synthetic(1001, 3, 42, {{1, 16, 16}, 0.25, 0.1, "test"});
  CHECK(!same_pixels(test, a));
  CHECK_THROWS_AS(make_synthetic(1, 2, 0), ConfigError);
}

TEST_CASE("synthetic: a linear classifier separates the classes") {
  const auto train = make_synthetic(1000, 2, 0);
  const auto test = make_synthetic(500, 2, 0, {{1, 16, 16}, 0.25, 0.1, "test"});
  const std::size_t D = 256;
  // Logistic regression by full-batch gradient descent, written out directly.
  std::vector<double> w(D, 0.0);
  double bias = 0;
  for (int it = 0; it < 200; ++it) {
    std::vector<double> gw(D, 0.0);
    double gb = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      double z = bias;
      for (std::size_t d = 0; d < D; ++d) z += w[d] * (train.images[i * D + d] - 0.5);
      const double err = 1.0 / (1.0 + std::exp(-z)) - static_cast<double>(train.labels[i]);
      for (std::size_t d = 0; d < D; ++d) gw[d] += err * (train.images[i * D + d] - 0.5);
      gb += err;
    }
    for (std::size_t d = 0; d < D; ++d) w[d] -= 0.5 * gw[d] / train.size();
    bias -= 0.5 * gb / train.size();
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double z = bias;
    for (std::size_t d = 0; d < D; ++d) z += w[d] * (test.images[i * D + d] - 0.5);
    correct += static_cast<std::size_t>(z > 0) == test.labels[i];
  }
  CHECK(static_cast<double>(correct) / test.size() >= 0.99);
}

TEST_CASE("experiment: JSON round trip and subset selection") {
  TempDir dir("exp");
  auto j = tiny_experiment(true, dir.path / "out");
  j["data"]["train_subset"] = 40;
  j["reference"] = {{"note", "kept as is"}};
  const auto cfg = ExperimentConfig::from_json(j);
  const auto again = ExperimentConfig::from_json(cfg.to_json());
  CHECK(again.to_json() == cfg.to_json());
  CHECK(cfg.reference == j["reference"]);

  const auto [tr1, ev1] = load_data(cfg.data);
  const auto [tr2, ev2] = load_data(cfg.data);
  CHECK(tr1.size() == 40);
  CHECK(ev1.size() == 32);
  CHECK(same_pixels(tr1, tr2));
  const auto counts = tr1.class_counts();
  CHECK(counts[0] == 20);
  CHECK(counts[1] == 20);
}

TEST_CASE("experiment: missing eval attacks default to the standard matrix") {
  auto j = tiny_experiment(false, "out");
  j.erase("eval");
  const auto cfg = ExperimentConfig::from_json(j);
  REQUIRE(cfg.eval.attacks.size() == 3);
  for (const auto& a : cfg.eval.attacks) CHECK(a.epsilon == doctest::Approx(0.1));
}

TEST_CASE("experiment: invalid configurations are rejected") {
  auto base = tiny_experiment(false, "out");
  SUBCASE("unknown key") {
    base["data"]["colour"] = 1;
    CHECK_THROWS_AS(ExperimentConfig::from_json(base), ConfigError);
  }
  SUBCASE("class mismatch") {
    base["data"]["num_classes"] = 3;
    CHECK_THROWS_AS(ExperimentConfig::from_json(base), ConfigError);
  }
  SUBCASE("shape mismatch") {
    base["data"]["synthetic"]["shape"] = {1, 9, 9};
    CHECK_THROWS_AS(ExperimentConfig::from_json(base), ConfigError);
  }
  SUBCASE("subset too large") {
    base["data"]["eval_subset"] = 33;
    CHECK_THROWS_AS(ExperimentConfig::from_json(base), ConfigError);
  }
  SUBCASE("unknown dataset") {
    base["data"]["name"] = "svhn-mat";
    CHECK_THROWS_AS(ExperimentConfig::from_json(base), ConfigError);
  }
  SUBCASE("dataset without a directory") {
    base["data"] = {{"name", "cifar10"}};
    CHECK_THROWS_AS(ExperimentConfig::from_json(base), ConfigError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/exp.json"), IoError); }
}

TEST_CASE("experiment: shipped configurations parse") {
  for (const char* name : {"desk_synthetic.json", "desk_fmnist.json", "repro_cifar10_resnet18.json"}) {
    CAPTURE(name);
    const auto cfg = ExperimentConfig::load(fs::path(CIFS_CONFIG_DIR) / name);
    CHECK_FALSE(cfg.arch.cifs.empty());
    CHECK(cfg.arch.imgf.kind == core::ImgfKind::softmax);
  }
  const auto repro = ExperimentConfig::load(fs::path(CIFS_CONFIG_DIR) / "repro_cifar10_resnet18.json");
  CHECK(repro.train.epochs == 120);
  CHECK(repro.train.inner.epsilon == doctest::Approx(8.0 / 255));
  CHECK(repro.reference.at("tolerance").get<double>() == doctest::Approx(0.015));
}

TEST_CASE("cli: usage errors exit with the config code") {
  CHECK(cli({}).code == kExitConfig);
  CHECK(cli({"frobnicate"}).code == kExitConfig);
  CHECK(cli({"train", "--bogus"}).code == kExitConfig);
  CHECK(cli({"--help"}).code == kExitOk);
  TempDir dir("cli_usage");
  const auto cfg = write_config(dir.path, tiny_experiment(false, dir.path / "out"));
  const auto gpu = cli({"train", "--config", cfg.string(), "--device", "gpu"});
  CHECK(gpu.code == kExitConfig);
  CHECK(gpu.err.find("gpu") != std::string::npos);
  CHECK(cli({"eval", "--config", cfg.string(), "--checkpoint", (dir.path / "none.ckpt").string()}).code ==
        kExitConfig);
  CHECK(cli({"train", "--config", (dir.path / "missing.json").string()}).code == kExitConfig);
}

TEST_CASE("cli: seeded training is reproducible") {
  TempDir dir("cli_train");
  const auto cfg = write_config(dir.path, tiny_experiment(true, dir.path / "unused"));
  const auto a = cli({"train", "--config", cfg.string(), "--seed", "7", "--out", (dir.path / "a").string()});
  const auto b = cli({"train", "--config", cfg.string(), "--seed", "7", "--out", (dir.path / "b").string()});
  REQUIRE(a.code == kExitOk);
  REQUIRE(b.code == kExitOk);
  CHECK(fs::exists(dir.path / "a" / "last.ckpt"));
  CHECK(fs::exists(dir.path / "a" / "experiment.json"));
  auto sa = nlohmann::json::parse(read_file(dir.path / "a" / "summary.json"));
  auto sb = nlohmann::json::parse(read_file(dir.path / "b" / "summary.json"));
  strip_timing(sa);
  strip_timing(sb);
  sa["config"].erase("experiment");
  sb["config"].erase("experiment");
  CHECK(sa == sb);
  CHECK(sa.at("config").at("train").at("seed") == 7);
}

TEST_CASE("cli: eval, sweep-beta, attack and diagnose on a trained model") {
  TempDir dir("cli_eval");
  const auto cfg = write_config(dir.path, tiny_experiment(true, dir.path / "run"));
  REQUIRE(cli({"train", "--config", cfg.string()}).code == kExitOk);
  const auto ckpt = (dir.path / "run" / "last.ckpt").string();

  SUBCASE("a zero budget leaves natural accuracy unchanged") {
    const auto r = cli({"eval", "--config", cfg.string(), "--checkpoint", ckpt, "--attack", "pgd", "--epsilon", "0"});
    REQUIRE(r.code == kExitOk);
    const double natural = natural_of(r.out);
    const auto cells = cells_of(r.out);
    REQUIRE_FALSE(cells.empty());
    for (const auto& [name, acc] : cells) {
      CAPTURE(name);
      CHECK(acc == doctest::Approx(natural));
    }
  }
  SUBCASE("sweep-beta emits the full grid and its minimum") {
    const auto out = dir.path / "sweep";
    const auto r = cli({"sweep-beta", "--config", cfg.string(), "--checkpoint", ckpt, "--out", out.string()});
    REQUIRE(r.code == kExitOk);
    const auto cells = cells_of(r.out);
    double lo = 1;
    for (const char* beta : {"0", "0.1", "1", "2", "10", "100", "inf", "inf-1", "inf-2"}) {
      CAPTURE(beta);
      const auto it = cells.find(std::string("PGD-3@") + beta);
      REQUIRE(it != cells.end());
      lo = std::min(lo, it->second);
    }
    const auto report = nlohmann::json::parse(read_file(out / "sweep_beta.json"));
    CHECK(report.at("worst_case").get<double>() == doctest::Approx(lo));
    CHECK(fs::exists(out / "sweep_beta.tsv"));
  }
  SUBCASE("attack writes readable adversarial examples inside the budget") {
    const auto out = dir.path / "adv";
    REQUIRE(cli({"attack", "--config", cfg.string(), "--checkpoint", ckpt, "--out", out.string()}).code == kExitOk);
    const auto images = read_idx(out / "adversarial-images-idx4-float");
    const auto labels = read_idx(out / "adversarial-labels-idx1-ubyte");
    CHECK(images.type == 0x0D);
    CHECK(images.dims == std::vector<std::size_t>{32, 1, 8, 8});
    CHECK(labels.dims == std::vector<std::size_t>{32});
    const auto [train_data, eval_data] = load_data(ExperimentConfig::load(cfg).data);
    for (std::size_t i = 0; i < images.floats.size(); ++i) {
      CHECK(images.floats[i] >= 0.0f);
      CHECK(images.floats[i] <= 1.0f);
      CHECK(std::abs(images.floats[i] - eval_data.images[i]) <= 0.1f + 1e-6f);
    }
  }
  SUBCASE("diagnose writes profiles and accuracy tables") {
    const auto out = dir.path / "diag";
    REQUIRE(cli({"diagnose", "--config", cfg.string(), "--checkpoint", ckpt, "--out", out.string()}).code == kExitOk);
    CHECK(fs::exists(out / "per_class_natural.csv"));
    CHECK(fs::exists(out / "0" / "PGD-3.csv"));
    CHECK(fs::exists(out / "1" / "PGD-3.csv"));
    CHECK(fs::exists(out / "topk_PGD-3.csv"));
  }
}
