#include "cifs/diagnostics/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "cifs/attack/evaluation.hpp"

namespace cifs::diagnostics {

namespace {

struct Summary {
  std::vector<double> magnitude, frequency;
};

Summary summarize(const Tensor<double>& acts, double frac) {
  const std::size_t N = acts.dim(0), C = acts.dim(1);
  std::vector<double> mean(C, 0.0);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] += acts(n, c);
      top = std::max(top, acts(n, c));
    }
  double scale = 0;
  for (auto& m : mean) {
    m /= static_cast<double>(N);
    scale = std::max(scale, std::abs(m));
  }
  Summary s;
  s.magnitude.resize(C, 0.0);
  if (scale > 0)
    for (std::size_t c = 0; c < C; ++c) s.magnitude[c] = mean[c] / scale;
  const double threshold = frac * top;
  s.frequency.resize(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t hits = 0;
    for (std::size_t n = 0; n < N; ++n) hits += acts(n, c) > threshold;
    s.frequency[c] = static_cast<double>(hits) / static_cast<double>(N);
  }
  return s;
}

std::vector<double> permuted(const std::vector<double>& v, const std::vector<std::size_t>& order) {
  std::vector<double> out;
  out.reserve(order.size());
  for (auto i : order) out.push_back(v[i]);
  return out;
}

std::vector<std::size_t> class_rows(const Dataset& data, std::size_t class_id) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.labels[i] == class_id) rows.push_back(i);
  return rows;
}

// Calls f(rows, x, y, b) for consecutive batches of `data`.
template <typename Real, typename F>
void for_batches(const Dataset& data, std::size_t batch_size, F&& f) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> rows;
  for (std::size_t first = 0, b = 0; first < data.size(); first += batch_size, ++b) {
    rows.resize(std::min(batch_size, data.size() - first));
    std::iota(rows.begin(), rows.end(), first);
    const auto x = data.batch_images<Real>(rows);
    const auto y = data.batch_labels(rows);
    f(rows, x, y, b);
  }
}

template <typename Real>
void copy_rows(const Tensor<Real>& src, Tensor<double>& dst, std::size_t first_row) {
  const std::size_t width = src.dim(1);
  for (std::size_t i = 0; i < src.size(); ++i) dst[first_row * width + i] = src[i];
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ChannelProfile channel_profile(const Tensor<double>& nat, const Tensor<double>* adv,
                               std::span<const double> class_weights, std::size_t class_id,
                               double threshold_frac) {
  if (!(threshold_frac > 0 && threshold_frac < 1)) throw ConfigError("threshold_frac must be in (0, 1)");
  if (nat.rank() != 2 || nat.dim(0) == 0) throw ConfigError("activations must be a non-empty (N, C) array");
  const std::size_t C = nat.dim(1);
  if (class_weights.size() != C)
    throw ConfigError("got " + std::to_string(class_weights.size()) + " weights for " + std::to_string(C) +
                      " channels");
  if (adv && (adv->rank() != 2 || adv->dim(1) != C || adv->dim(0) == 0))
    throw ConfigError("adversarial activations do not match the natural ones");

  std::vector<std::size_t> order(C);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return class_weights[a] > class_weights[b]; });

  ChannelProfile p;
  p.class_id = class_id;
  p.threshold_frac = threshold_frac;
  p.samples = nat.dim(0);
  p.channels = order;
  for (auto c : order) p.weight.push_back(class_weights[c]);
  const auto n = summarize(nat, threshold_frac);
  p.nat_magnitude = permuted(n.magnitude, order);
  p.nat_frequency = permuted(n.frequency, order);
  if (adv) {
    const auto a = summarize(*adv, threshold_frac);
    p.adv_magnitude = permuted(a.magnitude, order);
    p.adv_frequency = permuted(a.frequency, order);
  }
  return p;
}

template <typename Real>
ChannelProfile channel_statistics(const model::Model<Real>& model, const Dataset& data, std::size_t class_id,
                                  const attack::AttackConfig* attack, const ProbeOptions& opts) {
  if (class_id >= model.num_classes())
    throw ConfigError("class " + std::to_string(class_id) + " is outside the model's " +
                      std::to_string(model.num_classes()) + " classes");
  const auto rows = class_rows(data, class_id);
  if (rows.empty()) throw ConfigError("no samples of class " + std::to_string(class_id));
  if (attack) attack->validate();
  const Dataset subset = data.subset(rows);

  const std::size_t C = model.final_layer_weights().dim(1);
  Tensor<double> nat({subset.size(), C}), adv({attack ? subset.size() : 0, C});
  for_batches<Real>(subset, opts.batch_size,
                    [&](const std::vector<std::size_t>& r, const Tensor<Real>& x,
                        const std::vector<std::size_t>& y, std::size_t b) {
                      copy_rows(model.penultimate_channel_activations(x), nat, r.front());
                      if (!attack) return;
                      Rng rng(derive_seed(opts.seed, b));
                      const auto x_adv = attack::run_attack(model, x, std::span<const std::size_t>(y), *attack, rng);
                      copy_rows(model.penultimate_channel_activations(x_adv), adv, r.front());
                    });

  const auto& w = model.final_layer_weights();
  std::vector<double> weights(C);
  for (std::size_t c = 0; c < C; ++c) weights[c] = w(class_id, c);
  auto p = channel_profile(nat, attack ? &adv : nullptr, weights, class_id, opts.threshold_frac);
  if (attack) p.attack = attack->name();
  return p;
}

template <typename Real>
Tensor<double> final_logits(const model::Classifier<Real>& model, const Dataset& data,
                            const attack::AttackConfig* attack, std::uint64_t seed, std::size_t batch_size) {
  if (attack) attack->validate();
  Tensor<double> out({data.size(), model.num_classes()});
  for_batches<Real>(data, batch_size,
                    [&](const std::vector<std::size_t>& r, const Tensor<Real>& x,
                        const std::vector<std::size_t>& y, std::size_t b) {
                      const model::ForwardOptions eval{model::Phase::eval, {}};
                      if (!attack) {
                        copy_rows(model.predict(x, eval).final_logits, out, r.front());
                        return;
                      }
                      Rng rng(derive_seed(seed, b));
                      const auto x_adv = attack::run_attack(model, x, std::span<const std::size_t>(y), *attack, rng);
                      copy_rows(model.predict(x_adv, eval).final_logits, out, r.front());
                    });
  return out;
}

PerClassAccuracy per_class_accuracy(const Tensor<double>& logits, std::span<const std::size_t> labels,
                                    std::size_t num_classes) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ConfigError("logits and labels disagree on the number of samples");
  PerClassAccuracy out;
  out.counts.assign(num_classes, 0);
  std::vector<std::size_t> hits(num_classes, 0);
  std::size_t total = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] >= num_classes) throw ConfigError("label out of range");
    const bool ok = attack::argmax_row(logits, n) == labels[n];
    ++out.counts[labels[n]];
    hits[labels[n]] += ok;
    total += ok;
  }
  for (std::size_t k = 0; k < num_classes; ++k)
    out.accuracy.push_back(out.counts[k] ? static_cast<double>(hits[k]) / static_cast<double>(out.counts[k])
                                         : std::numeric_limits<double>::quiet_NaN());
  out.overall = labels.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(labels.size());
  return out;
}

template <typename Real>
PerClassAccuracy per_class_robust_accuracy(const model::Classifier<Real>& model, const Dataset& data,
                                           const attack::AttackConfig* attack, std::uint64_t seed,
                                           std::size_t batch_size) {
  return per_class_accuracy(final_logits(model, data, attack, seed, batch_size), data.labels,
                            model.num_classes());
}

TopKTable topk_accuracy(const Tensor<double>& logits, std::span<const std::size_t> labels,
                        std::span<const std::size_t> ks) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ConfigError("logits and labels disagree on the number of samples");
  const std::size_t K = logits.dim(1);
  for (auto k : ks)
    if (k < 1 || k > K) throw ConfigError("top-k needs 1 <= k <= " + std::to_string(K));
  std::vector<std::size_t> ranks(labels.size());
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const double zy = logits(n, labels[n]);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < K; ++j) rank += logits(n, j) > zy || (logits(n, j) == zy && j < labels[n]);
    ranks[n] = rank;
  }
  TopKTable t;
  for (auto k : ks) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r < k; });
    t.ks.push_back(k);
    t.accuracy.push_back(labels.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(labels.size()));
  }
  return t;
}

template <typename Real>
TopKTable topk_accuracy(const model::Classifier<Real>& model, const Dataset& data,
                        const attack::AttackConfig* attack, std::span<const std::size_t> ks, std::uint64_t seed,
                        std::size_t batch_size) {
  return topk_accuracy(final_logits(model, data, attack, seed, batch_size), data.labels, ks);
}

std::optional<std::string> Table::get_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return std::nullopt;
}

std::vector<double> Table::column(const std::string& name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw ConfigError("table has no column '" + name + "'");
  const auto c = static_cast<std::size_t>(it - columns.begin());
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(r.at(c));
  return out;
}

void write_table(const Table& table, const std::filesystem::path& path) {
  for (const auto& r : table.rows)
    if (r.size() != table.columns.size()) throw ConfigError("table row width differs from its header");
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& [k, v] : table.meta) os << "# " << k << '\t' << v << '\n';
  for (std::size_t c = 0; c < table.columns.size(); ++c) os << (c ? "," : "") << table.columns[c];
  os << '\n';
  for (const auto& r : table.rows) {
    for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "," : "") << format_double(r[c]);
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path.string());
}

Table read_table(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  Table t;
  std::string line;
  std::size_t offset = 0;
  bool header = false;
  while (std::getline(is, line)) {
    const std::size_t line_offset = offset;
    offset += line.size() + 1;
    if (line.rfind("# ", 0) == 0) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError("metadata line without a tab in " + path.string(), line_offset);
      t.meta.emplace_back(line.substr(2, tab - 2), line.substr(tab + 1));
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (!header) {
      t.columns = cells;
      header = true;
      continue;
    }
    if (cells.size() != t.columns.size())
      throw FormatError("row has " + std::to_string(cells.size()) + " cells, header has " +
                            std::to_string(t.columns.size()),
                        line_offset);
    std::vector<double> row;
    for (const auto& cell : cells) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0') throw FormatError("not a number: '" + cell + "'", line_offset);
      row.push_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  if (!header) throw FormatError("missing header row in " + path.string(), offset);
  return t;
}

Table to_table(const ChannelProfile& p) {
  Table t;
  std::string channels;
  for (std::size_t i = 0; i < p.channels.size(); ++i) channels += (i ? " " : "") + std::to_string(p.channels[i]);
  t.meta = {{"class", std::to_string(p.class_id)},
            {"threshold_frac", format_double(p.threshold_frac)},
            {"threshold_reference", "max activation over the class subset, per data kind"},
            {"normalization", "mean activation / max |mean activation|, per data kind"},
            {"samples", std::to_string(p.samples)},
            {"attack", p.attack.empty() ? "none" : p.attack},
            {"channels", channels}};
  const bool adv = p.has_adversarial();
  t.columns = adv ? std::vector<std::string>{"rank", "weight", "nat_mag", "adv_mag", "nat_freq", "adv_freq"}
                  : std::vector<std::string>{"rank", "weight", "nat_mag", "nat_freq"};
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (adv)
      t.rows.push_back({static_cast<double>(i + 1), p.weight[i], p.nat_magnitude[i], p.adv_magnitude[i],
                        p.nat_frequency[i], p.adv_frequency[i]});
    else
      t.rows.push_back({static_cast<double>(i + 1), p.weight[i], p.nat_magnitude[i], p.nat_frequency[i]});
  }
  return t;
}

ChannelProfile profile_from_table(const Table& t) {
  auto meta = [&](const std::string& k) {
    const auto v = t.get_meta(k);
    if (!v) throw ConfigError("channel profile export lacks '" + k + "'");
    return *v;
  };
  ChannelProfile p;
  p.class_id = std::stoul(meta("class"));
  p.threshold_frac = std::stod(meta("threshold_frac"));
  p.samples = std::stoul(meta("samples"));
  p.attack = meta("attack") == "none" ? "" : meta("attack");
  std::stringstream ss(meta("channels"));
  for (std::size_t c; ss >> c;) p.channels.push_back(c);
  p.weight = t.column("weight");
  p.nat_magnitude = t.column("nat_mag");
  p.nat_frequency = t.column("nat_freq");
  if (std::find(t.columns.begin(), t.columns.end(), "adv_mag") != t.columns.end()) {
    p.adv_magnitude = t.column("adv_mag");
    p.adv_frequency = t.column("adv_freq");
  }
  if (p.channels.size() != p.weight.size()) throw ConfigError("channel list length differs from the row count");
  return p;
}

Table to_table(const PerClassAccuracy& acc) {
  Table t;
  t.meta = {{"overall", format_double(acc.overall)}};
  t.columns = {"class", "count", "accuracy"};
  for (std::size_t k = 0; k < acc.accuracy.size(); ++k)
    t.rows.push_back({static_cast<double>(k), static_cast<double>(acc.counts[k]), acc.accuracy[k]});
  return t;
}

Table to_table(const TopKTable& tk) {
  Table t;
  t.columns = {"k", "accuracy"};
  for (std::size_t i = 0; i < tk.ks.size(); ++i) t.rows.push_back({static_cast<double>(tk.ks[i]), tk.accuracy[i]});
  return t;
}

#define CIFS_INSTANTIATE(Real)                                                                             \
  template ChannelProfile channel_statistics(const model::Model<Real>&, const Dataset&, std::size_t,       \
                                             const attack::AttackConfig*, const ProbeOptions&);            \
  template Tensor<double> final_logits(const model::Classifier<Real>&, const Dataset&,                    \
                                       const attack::AttackConfig*, std::uint64_t, std::size_t);            \
  template PerClassAccuracy per_class_robust_accuracy(const model::Classifier<Real>&, const Dataset&,      \
                                                      const attack::AttackConfig*, std::uint64_t,          \
                                                      std::size_t);                                        \
  template TopKTable topk_accuracy(const model::Classifier<Real>&, const Dataset&,                         \
                                   const attack::AttackConfig*, std::span<const std::size_t>, std::uint64_t, \
                                   std::size_t);

CIFS_INSTANTIATE(float)
CIFS_INSTANTIATE(double)

}  // namespace cifs::diagnostics
