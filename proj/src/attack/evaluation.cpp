#include "cifs/attack/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "common/json_util.hpp"

namespace cifs::attack {

namespace {

double fraction(const std::vector<bool>& hits) {
  if (hits.empty()) return 0.0;
  const auto k = static_cast<double>(std::count(hits.begin(), hits.end(), true));
  return k / static_cast<double>(hits.size());
}

std::string focus_name(const AdaptiveLoss& spec) {
  switch (spec.focus) {
    case Focus::final_only: return "final";
    case Focus::all: return "all";
    case Focus::layer: return "layer-" + std::to_string(spec.layer);
  }
  return "?";
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename Real>
void record(const model::HeadOutputs<Real>& heads, std::span<const std::size_t> y, Outcome& out) {
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto p = argmax_row(heads.final_logits, i);
    out.predicted.push_back(p);
    out.final_correct.push_back(p == y[i]);
  }
  if (out.raw_correct.size() < heads.raw_logits.size()) out.raw_correct.resize(heads.raw_logits.size());
  for (std::size_t h = 0; h < heads.raw_logits.size(); ++h)
    for (std::size_t i = 0; i < y.size(); ++i)
      out.raw_correct[h].push_back(argmax_row(heads.raw_logits[h], i) == y[i]);
}

template <typename Real, typename F>
Outcome batched(const model::Classifier<Real>& model, const Dataset& data, std::size_t batch_size,
                F make_input) {
  if (data.size() == 0) throw ConfigError("evaluation dataset '" + data.name + "' is empty");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  Outcome out;
  out.raw_correct.resize(model.num_raw_heads());
  std::vector<std::size_t> rows;
  for (std::size_t b = 0, start = 0; start < data.size(); ++b, start += batch_size) {
    rows.resize(std::min(batch_size, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const auto x = data.batch_images<Real>(rows);
    const auto y = data.batch_labels(rows);
    const auto input = make_input(x, y, b);
    record(model.predict(input, {model::Phase::eval, {}}), y, out);
  }
  return out;
}

}  // namespace

double Outcome::final_accuracy() const { return fraction(final_correct); }

double Outcome::raw_accuracy(std::size_t head) const {
  if (head >= raw_correct.size()) throw ConfigError("raw head " + std::to_string(head) + " out of range");
  return fraction(raw_correct[head]);
}

template <typename Real>
std::size_t argmax_row(const Tensor<Real>& logits, std::size_t row) {
  const std::size_t K = logits.dim(1);
  const Real* z = logits.data() + row * K;
  std::size_t best = 0;
  for (std::size_t k = 1; k < K; ++k)
    if (z[k] > z[best]) best = k;
  return best;
}

template <typename Real>
Outcome natural_outcome(const model::Classifier<Real>& model, const Dataset& data,
                        std::size_t batch_size) {
  return batched(model, data, batch_size,
                 [](const Tensor<Real>& x, const std::vector<std::size_t>&, std::size_t) { return x; });
}

template <typename Real>
Outcome attack_outcome(const model::Classifier<Real>& model, const Dataset& data,
                       const AttackConfig& attack, std::uint64_t seed, std::size_t batch_size) {
  attack.validate();
  return batched(model, data, batch_size,
                 [&](const Tensor<Real>& x, const std::vector<std::size_t>& y, std::size_t b) {
                   Rng rng(derive_seed(seed, b));
                   return run_attack(model, x, std::span<const std::size_t>(y), attack, rng);
                 });
}

nlohmann::json EvalSettings::to_json() const {
  nlohmann::json j;
  j["attacks"] = nlohmann::json::array();
  for (const auto& a : attacks) j["attacks"].push_back(a.to_json());
  j["beta_grid"] = nlohmann::json::array();
  for (const auto& b : beta_grid) j["beta_grid"].push_back(b.label());
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  return j;
}

EvalSettings EvalSettings::from_json(const nlohmann::json& j) {
  const std::string what = "eval";
  json_util::require_known_keys(j, {"attacks", "beta_grid", "batch_size", "seed"}, what);
  EvalSettings s;
  if (auto it = j.find("attacks"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("eval.attacks must be an array");
    for (const auto& a : *it) s.attacks.push_back(AttackConfig::from_json(a));
  }
  if (auto it = j.find("beta_grid"); it != j.end()) {
    if (!it->is_array() || it->empty()) throw ConfigError("eval.beta_grid must be a non-empty array");
    s.beta_grid.clear();
    for (const auto& b : *it)
      s.beta_grid.push_back(b.is_string() ? AdaptiveLoss::parse(b.get<std::string>())
                                          : AdaptiveLoss::with_beta(b.get<double>()));
  }
  s.batch_size = json_util::get_or<std::size_t>(j, "batch_size", s.batch_size, what);
  s.seed = json_util::get_or<std::uint64_t>(j, "seed", s.seed, what);
  if (s.batch_size == 0) throw ConfigError("eval.batch_size must be >= 1");
  return s;
}

double RobustnessReport::worst_case() const {
  if (cells.empty()) throw ConfigError("report has no attack cells");
  double w = 1.0;
  for (const auto& c : cells) w = std::min(w, c.accuracy);
  return w;
}

const EvalCell& RobustnessReport::worst_cell(const std::string& attack) const {
  const EvalCell* best = nullptr;
  for (const auto& c : cells)
    if (c.attack == attack && (!best || c.accuracy < best->accuracy)) best = &c;
  if (!best) throw ConfigError("no cells for attack '" + attack + "'");
  return *best;
}

double RobustnessReport::worst_case(const std::string& attack) const {
  return worst_cell(attack).accuracy;
}

std::vector<std::string> RobustnessReport::attack_names() const {
  std::vector<std::string> names;
  for (const auto& c : cells)
    if (std::find(names.begin(), names.end(), c.attack) == names.end()) names.push_back(c.attack);
  return names;
}

nlohmann::json RobustnessReport::to_json() const {
  nlohmann::json j;
  j["n"] = n;
  j["seed"] = seed;
  j["num_raw_heads"] = num_raw_heads;
  j["natural_accuracy"] = natural_accuracy;
  j["natural_raw_accuracy"] = natural_raw_accuracy;
  j["approximate_gradient"] = approximate_gradient;
  j["cells"] = nlohmann::json::array();
  for (const auto& c : cells)
    j["cells"].push_back({{"attack", c.attack}, {"beta", c.beta}, {"focus", c.focus},
                          {"accuracy", c.accuracy}, {"raw_accuracy", c.raw_accuracy},
                          {"n", c.n}, {"seed", c.seed}});
  j["skipped"] = skipped;
  j["worst_case"] = cells.empty() ? nlohmann::json(nullptr) : nlohmann::json(worst_case());
  if (matrix) {
    nlohmann::json m{{"attack", matrix->attack},
                     {"natural_final", matrix->natural_final},
                     {"adap_final", matrix->adap_final}};
    m["cifs_cifs"] = matrix->cifs_cifs ? nlohmann::json(*matrix->cifs_cifs) : nlohmann::json(nullptr);
    m["cifs_final"] = matrix->cifs_final ? nlohmann::json(*matrix->cifs_final) : nlohmann::json(nullptr);
    j["matrix"] = m;
  }
  j["config"] = config;
  return j;
}

RobustnessReport RobustnessReport::from_json(const nlohmann::json& j) {
  RobustnessReport r;
  try {
    r.n = j.at("n").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.num_raw_heads = j.at("num_raw_heads").get<std::size_t>();
    r.natural_accuracy = j.at("natural_accuracy").get<double>();
    r.natural_raw_accuracy = j.at("natural_raw_accuracy").get<std::vector<double>>();
    r.approximate_gradient = j.at("approximate_gradient").get<bool>();
    for (const auto& c : j.at("cells"))
      r.cells.push_back({c.at("attack").get<std::string>(), c.at("beta").get<std::string>(),
                         c.at("focus").get<std::string>(), c.at("accuracy").get<double>(),
                         c.at("raw_accuracy").get<std::vector<double>>(), c.at("n").get<std::size_t>(),
                         c.at("seed").get<std::uint64_t>()});
    r.skipped = j.at("skipped").get<std::vector<std::string>>();
    if (auto it = j.find("matrix"); it != j.end()) {
      EvalMatrix m;
      m.attack = it->at("attack").get<std::string>();
      m.natural_final = it->at("natural_final").get<double>();
      m.adap_final = it->at("adap_final").get<double>();
      if (!it->at("cifs_cifs").is_null()) m.cifs_cifs = it->at("cifs_cifs").get<double>();
      if (!it->at("cifs_final").is_null()) m.cifs_final = it->at("cifs_final").get<double>();
      r.matrix = m;
    }
    r.config = j.value("config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed robustness report: ") + e.what());
  }
  return r;
}

void RobustnessReport::write_tsv(std::ostream& os) const {
  auto join = [](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
    return s.empty() ? std::string("-") : s;
  };
  os << "# cifs-robustness-report\t1\n";
  os << "# n\t" << n << "\n# seed\t" << seed << "\n# num_raw_heads\t" << num_raw_heads << "\n";
  os << "# natural_accuracy\t" << format_double(natural_accuracy) << "\n";
  os << "# natural_raw_accuracy\t" << join(natural_raw_accuracy) << "\n";
  os << "# approximate_gradient\t" << (approximate_gradient ? 1 : 0) << "\n";
  for (const auto& s : skipped) os << "# skipped\t" << s << "\n";
  if (matrix) {
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("-"); };
    os << "# matrix\t" << matrix->attack << '\t' << format_double(matrix->natural_final) << '\t'
       << opt(matrix->cifs_cifs) << '\t' << opt(matrix->cifs_final) << '\t'
       << format_double(matrix->adap_final) << "\n";
  }
  os << "# config\t" << config.dump() << "\n";
  os << "attack\tbeta\tfocus\taccuracy\tn\tseed\traw_accuracy\n";
  for (const auto& c : cells)
    os << c.attack << '\t' << c.beta << '\t' << c.focus << '\t' << format_double(c.accuracy) << '\t'
       << c.n << '\t' << c.seed << '\t' << join(c.raw_accuracy) << "\n";
}

RobustnessReport RobustnessReport::read_tsv(std::istream& is) {
  auto split = [](const std::string& line, char sep) {
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, sep)) parts.push_back(item);
    if (!line.empty() && line.back() == sep) parts.emplace_back();
    return parts;
  };
  auto doubles = [&](const std::string& s) {
    std::vector<double> v;
    if (s == "-") return v;
    for (const auto& p : split(s, ',')) v.push_back(std::stod(p));
    return v;
  };
  RobustnessReport r;
  std::string line;
  bool header_seen = false, columns_seen = false;
  std::size_t line_no = 0;
  try {
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      if (line[0] == '#') {
        const auto f = split(line.substr(2), '\t');
        if (f.size() < 2) throw ConfigError("bad header line");
        const auto& key = f[0];
        if (key == "cifs-robustness-report") header_seen = true;
        else if (key == "n") r.n = std::stoull(f[1]);
        else if (key == "seed") r.seed = std::stoull(f[1]);
        else if (key == "num_raw_heads") r.num_raw_heads = std::stoull(f[1]);
        else if (key == "natural_accuracy") r.natural_accuracy = std::stod(f[1]);
        else if (key == "natural_raw_accuracy") r.natural_raw_accuracy = doubles(f[1]);
        else if (key == "approximate_gradient") r.approximate_gradient = f[1] == "1";
        else if (key == "skipped") r.skipped.push_back(f[1]);
        else if (key == "config") r.config = nlohmann::json::parse(line.substr(line.find('\t') + 1));
        else if (key == "matrix") {
          if (f.size() != 6) throw ConfigError("matrix line needs 5 fields");
          EvalMatrix m;
          m.attack = f[1];
          m.natural_final = std::stod(f[2]);
          if (f[3] != "-") m.cifs_cifs = std::stod(f[3]);
          if (f[4] != "-") m.cifs_final = std::stod(f[4]);
          m.adap_final = std::stod(f[5]);
          r.matrix = m;
        }
        continue;
      }
      if (!columns_seen) {
        columns_seen = true;
        continue;
      }
      const auto f = split(line, '\t');
      if (f.size() != 7) throw ConfigError("expected 7 columns");
      r.cells.push_back({f[0], f[1], f[2], std::stod(f[3]), doubles(f[6]), std::stoull(f[4]),
                         std::stoull(f[5])});
    }
  } catch (const std::exception& e) {
    throw ConfigError("robustness report line " + std::to_string(line_no) + ": " + e.what());
  }
  if (!header_seen) throw ConfigError("not a robustness report (missing header)");
  return r;
}

std::vector<AttackConfig> default_eval_attacks(double epsilon) {
  return {AttackConfig::fgsm(epsilon), AttackConfig::pgd(epsilon, 20, epsilon / 10, false),
          AttackConfig::cw(epsilon, 30, epsilon / 10)};
}

template <typename Real>
RobustnessReport worst_case_eval(const model::Classifier<Real>& model, const Dataset& data,
                                 const EvalSettings& settings) {
  if (data.size() == 0) throw ConfigError("evaluation dataset '" + data.name + "' is empty");
  if (settings.attacks.empty()) throw ConfigError("no attacks to evaluate");
  const std::size_t num_raw = model.num_raw_heads();

  RobustnessReport r;
  r.n = data.size();
  r.seed = settings.seed;
  r.num_raw_heads = num_raw;
  r.config = settings.to_json();

  const auto natural = natural_outcome(model, data, settings.batch_size);
  r.natural_accuracy = natural.final_accuracy();
  for (std::size_t h = 0; h < num_raw; ++h) r.natural_raw_accuracy.push_back(natural.raw_accuracy(h));

  std::vector<AdaptiveLoss> grid;
  if (num_raw == 0) {
    grid.push_back(AdaptiveLoss::final_only());
  } else {
    for (const auto& spec : settings.beta_grid) {
      if (spec.focus == Focus::layer && spec.layer > num_raw) {
        r.skipped.push_back(spec.label());
        continue;
      }
      spec.validate(num_raw);
      if (std::find(grid.begin(), grid.end(), spec) == grid.end()) grid.push_back(spec);
    }
  }

  for (std::size_t a = 0; a < settings.attacks.size(); ++a) {
    for (std::size_t g = 0; g < grid.size(); ++g) {
      AttackConfig cfg = settings.attacks[a];
      cfg.loss = grid[g];
      if (num_raw > 0 && cfg.grad_mode == core::GradMode::detached) r.approximate_gradient = true;
      const std::uint64_t cell_seed = derive_seed(settings.seed, a * 1000 + g);
      const auto out = attack_outcome(model, data, cfg, cell_seed, settings.batch_size);
      EvalCell cell{cfg.name(), grid[g].label(), focus_name(grid[g]), out.final_accuracy(), {},
                    out.size(), cell_seed};
      for (std::size_t h = 0; h < num_raw; ++h) cell.raw_accuracy.push_back(out.raw_accuracy(h));
      r.cells.push_back(std::move(cell));
    }
  }

  // The matrix uses PGD-20 when it was run, otherwise the first PGD, otherwise the first attack.
  std::string matrix_attack = settings.attacks.front().name();
  for (auto it = settings.attacks.rbegin(); it != settings.attacks.rend(); ++it)
    if (it->kind == AttackKind::pgd) matrix_attack = it->name();
  for (const auto& a : settings.attacks)
    if (a.name() == "PGD-20") matrix_attack = a.name();
  EvalMatrix m;
  m.attack = matrix_attack;
  m.natural_final = r.natural_accuracy;
  m.adap_final = r.worst_case(matrix_attack);
  if (num_raw > 0) {
    const std::string focus = "layer-" + std::to_string(num_raw);
    for (const auto& c : r.cells)
      if (c.attack == matrix_attack && c.focus == focus) {
        m.cifs_cifs = c.raw_accuracy.back();
        m.cifs_final = c.accuracy;
      }
  }
  r.matrix = m;
  return r;
}

#define CIFS_INSTANTIATE(Real)                                                                  \
  template std::size_t argmax_row(const Tensor<Real>&, std::size_t);                            \
  template Outcome natural_outcome(const model::Classifier<Real>&, const Dataset&, std::size_t); \
  template Outcome attack_outcome(const model::Classifier<Real>&, const Dataset&,               \
                                  const AttackConfig&, std::uint64_t, std::size_t);             \
  template RobustnessReport worst_case_eval(const model::Classifier<Real>&, const Dataset&,     \
                                            const EvalSettings&);

CIFS_INSTANTIATE(float)
CIFS_INSTANTIATE(double)

}  // namespace cifs::attack
