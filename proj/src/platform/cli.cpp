#include "cifs/platform/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>

#include "CLI11.hpp"
#include "cifs/diagnostics/diagnostics.hpp"
#include "cifs/model/checkpoint.hpp"
#include "cifs/platform/experiment.hpp"
#include "cifs/train/trainer.hpp"
#include "common/json_util.hpp"

namespace cifs::platform {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config, out, checkpoint, attack, epsilon, beta_grid, device = "cpu";
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool resume = false;
};

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed for " + path.string());
}

ExperimentConfig resolve_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  if (o.device != "cpu") throw CapabilityError("device '" + o.device + "' is not available; this build runs on cpu");
  auto cfg = ExperimentConfig::load(o.config);
  if (o.seed_set) {
    cfg.train.seed = o.seed;
    cfg.eval.seed = o.seed;
  }
  if (!o.out.empty()) cfg.out_dir = o.out;
  return cfg;
}

fs::path require_out(const ExperimentConfig& cfg) {
  if (cfg.out_dir.empty()) throw ConfigError("--out (or out_dir in the config) is required");
  fs::create_directories(cfg.out_dir);
  return cfg.out_dir;
}

model::Model<float> load_model(const Options& o, const Dataset& data) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  auto m = model::model_from_checkpoint<float>(model::load_checkpoint(o.checkpoint));
  if (m.config().input_shape != data.sample_shape() || m.num_classes() != data.num_classes)
    throw ConfigError("checkpoint expects " + shape_string(m.config().input_shape) + " inputs and " +
                      std::to_string(m.num_classes()) + " classes, data has " + shape_string(data.sample_shape()) +
                      " and " + std::to_string(data.num_classes));
  return m;
}

// Attack list from the config, or a single --attack; --epsilon rebudgets
// every attack and rescales its step size with it.
std::vector<attack::AttackConfig> resolve_attacks(const ExperimentConfig& cfg, const Options& o) {
  std::optional<double> eps;
  if (!o.epsilon.empty()) {
    nlohmann::json v;
    try {
      v = nlohmann::json::parse(o.epsilon);
    } catch (const nlohmann::json::exception&) {
      v = o.epsilon;
    }
    eps = json_util::pixel_value(v, "--epsilon");
  }
  std::vector<attack::AttackConfig> attacks;
  if (!o.attack.empty()) {
    nlohmann::json j = {{"kind", o.attack}, {"epsilon", eps.value_or(cfg.train.inner.epsilon)}};
    if (j["epsilon"].get<double>() == 0.0) j["step_size"] = cfg.train.inner.epsilon / 10;
    if (o.attack == "pgd" || o.attack == "PGD") j["steps"] = 20;
    attacks.push_back(attack::AttackConfig::from_json(j));
    return attacks;
  }
  attacks = cfg.eval.attacks;
  if (eps)
    for (auto& a : attacks) {
      if (a.epsilon > 0 && *eps > 0) a.step_size *= *eps / a.epsilon;
      if (a.kind == attack::AttackKind::fgsm) a.step_size = *eps;
      a.epsilon = *eps;
    }
  for (const auto& a : attacks) a.validate();
  if (attacks.empty()) throw ConfigError("no attacks configured");
  return attacks;
}

// PGD-20 when present, else the first PGD, else the first attack.
attack::AttackConfig primary_attack(const std::vector<attack::AttackConfig>& attacks) {
  for (const auto& a : attacks)
    if (a.kind == attack::AttackKind::pgd && a.steps == 20) return a;
  for (const auto& a : attacks)
    if (a.kind == attack::AttackKind::pgd) return a;
  return attacks.front();
}

nlohmann::json echo(const ExperimentConfig& cfg, const Options& o, const std::string& command) {
  return {{"command", command}, {"experiment", cfg.to_json()}, {"seed", cfg.eval.seed},
          {"checkpoint", o.checkpoint}};
}

void add_echo(diagnostics::Table& t, const nlohmann::json& e) {
  t.meta.emplace_back("seed", std::to_string(e.at("seed").get<std::uint64_t>()));
  t.meta.emplace_back("config", e.dump());
}

int cmd_train(const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const auto dir = require_out(cfg);
  const auto [train_data, eval_data] = load_data(cfg.data);
  const nlohmann::json e = {{"command", "train"}, {"experiment", cfg.to_json()}, {"seed", cfg.train.seed}};
  write_json(dir / "experiment.json", e);
  train::TrainOptions opts;
  opts.out_dir = dir;
  opts.resume = o.resume;
  opts.echo = e;
  opts.on_epoch = [&](const train::EpochRecord& r) {
    out << "epoch " << r.epoch << "  lr " << fmt(r.lr, "%g") << "  loss " << fmt(r.train_loss) << "  adv_acc "
        << fmt(r.train_adv_accuracy);
    if (r.natural_accuracy) out << "  natural " << fmt(*r.natural_accuracy);
    if (r.robust_accuracy) out << "  robust " << fmt(*r.robust_accuracy);
    out << "  (" << fmt(r.wall_seconds, "%.1f") << " s)\n" << std::flush;
  };
  const auto result = train::train<float>(cfg.train, cfg.arch, train_data, eval_data, opts);
  if (const auto* best = result.record.best())
    out << "best epoch " << best->epoch << "  robust " << fmt(best->robust_accuracy.value_or(0)) << '\n';
  out << "wrote " << (dir / "summary.json").string() << '\n';
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out, bool sweep) {
  auto cfg = resolve_config(o);
  const auto [train_data, eval_data] = load_data(cfg.data);
  const auto m = load_model(o, eval_data);
  auto settings = cfg.eval;
  settings.attacks = resolve_attacks(cfg, o);
  if (sweep) {
    settings.attacks = {primary_attack(settings.attacks)};
    settings.beta_grid = attack::default_beta_grid();
  }
  if (!o.beta_grid.empty()) settings.beta_grid = attack::parse_beta_grid(o.beta_grid);
  auto report = train::evaluate(m, eval_data, settings);
  report.config = echo(cfg, o, sweep ? "sweep-beta" : "eval");

  out << "n " << report.n << "  natural " << fmt(report.natural_accuracy) << '\n';
  for (const auto& c : report.cells)
    out << c.attack << '\t' << c.beta << '\t' << c.focus << '\t' << fmt(c.accuracy) << '\n';
  for (const auto& s : report.skipped) out << "skipped " << s << '\n';
  for (const auto& name : report.attack_names())
    out << "worst " << name << '\t' << fmt(report.worst_case(name)) << '\n';
  out << "worst_case\t" << fmt(report.worst_case()) << '\n';
  if (report.approximate_gradient) out << "note: detached-mask gradients (approximate)\n";

  if (!cfg.out_dir.empty()) {
    const fs::path dir = cfg.out_dir;
    const std::string stem = sweep ? "sweep_beta" : "report";
    write_json(dir / (stem + ".json"), report.to_json());
    std::ofstream tsv(dir / (stem + ".tsv"), std::ios::trunc);
    if (!tsv) throw IoError("cannot write " + (dir / (stem + ".tsv")).string());
    report.write_tsv(tsv);
  }
  return kExitOk;
}

int cmd_attack(const Options& o, std::ostream& out) {
  auto cfg = resolve_config(o);
  const auto dir = require_out(cfg);
  const auto [train_data, eval_data] = load_data(cfg.data);
  const auto m = load_model(o, eval_data);
  const auto atk = primary_attack(resolve_attacks(cfg, o));

  IdxArray images;
  images.type = 0x0D;
  images.dims = eval_data.images.shape();
  images.floats.reserve(eval_data.images.size());
  IdxArray labels;
  labels.dims = {eval_data.size()};
  std::size_t correct = 0;
  const std::size_t batch = cfg.eval.batch_size;
  std::vector<std::size_t> rows;
  for (std::size_t first = 0, b = 0; first < eval_data.size(); first += batch, ++b) {
    rows.resize(std::min(batch, eval_data.size() - first));
    std::iota(rows.begin(), rows.end(), first);
    const auto x = eval_data.batch_images<float>(rows);
    const auto y = eval_data.batch_labels(rows);
    Rng rng(derive_seed(cfg.eval.seed, b));
    const auto x_adv = attack::run_attack(m, x, std::span<const std::size_t>(y), atk, rng);
    images.floats.insert(images.floats.end(), x_adv.data(), x_adv.data() + x_adv.size());
    const auto logits = m.predict(x_adv, {}).final_logits;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      labels.bytes.push_back(static_cast<std::uint8_t>(y[i]));
      correct += attack::argmax_row(logits, i) == y[i];
    }
  }
  write_idx(images, dir / "adversarial-images-idx4-float");
  write_idx(labels, dir / "adversarial-labels-idx1-ubyte");
  const double acc = static_cast<double>(correct) / static_cast<double>(eval_data.size());
  auto e = echo(cfg, o, "attack");
  e["attack"] = atk.to_json();
  e["n"] = eval_data.size();
  e["adversarial_accuracy"] = acc;
  write_json(dir / "attack.json", e);
  out << atk.name() << " eps " << fmt(atk.epsilon, "%g") << "  n " << eval_data.size() << "  accuracy "
      << fmt(acc) << "\nwrote " << (dir / "adversarial-images-idx4-float").string() << '\n';
  return kExitOk;
}

int cmd_diagnose(const Options& o, std::ostream& out) {
  auto cfg = resolve_config(o);
  const auto dir = require_out(cfg);
  const auto [train_data, eval_data] = load_data(cfg.data);
  const auto m = load_model(o, eval_data);
  const auto atk = primary_attack(resolve_attacks(cfg, o));
  const auto e = echo(cfg, o, "diagnose");
  const std::size_t batch = cfg.eval.batch_size;

  for (std::size_t k = 0; k < m.num_classes(); ++k) {
    const auto counts = eval_data.class_counts();
    if (counts[k] == 0) continue;
    const auto p = diagnostics::channel_statistics(m, eval_data, k, &atk, {0.01, cfg.eval.seed, batch});
    auto t = diagnostics::to_table(p);
    add_echo(t, e);
    diagnostics::write_table(t, dir / std::to_string(k) / (atk.name() + ".csv"));
  }
  const auto nat = diagnostics::per_class_robust_accuracy<float>(m, eval_data, nullptr, cfg.eval.seed, batch);
  const auto adv = diagnostics::per_class_robust_accuracy(m, eval_data, &atk, cfg.eval.seed, batch);
  std::vector<std::size_t> ks;
  for (std::size_t k = 1; k <= std::min<std::size_t>(3, m.num_classes()); ++k) ks.push_back(k);
  const auto topk = diagnostics::topk_accuracy(m, eval_data, &atk, ks, cfg.eval.seed, batch);
  for (auto [table, name] : {std::pair{diagnostics::to_table(nat), std::string("per_class_natural.csv")},
                             std::pair{diagnostics::to_table(adv), "per_class_" + atk.name() + ".csv"},
                             std::pair{diagnostics::to_table(topk), "topk_" + atk.name() + ".csv"}}) {
    add_echo(table, e);
    diagnostics::write_table(table, dir / name);
  }
  out << "class\tnatural\t" << atk.name() << '\n';
  for (std::size_t k = 0; k < nat.accuracy.size(); ++k)
    out << k << '\t' << fmt(nat.accuracy[k]) << '\t' << fmt(adv.accuracy[k]) << '\n';
  for (std::size_t i = 0; i < topk.ks.size(); ++i) out << "top-" << topk.ks[i] << '\t' << fmt(topk.accuracy[i]) << '\n';
  out << "wrote " << dir.string() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Channel-wise importance-based feature selection: training, attacks and diagnostics", "cifs"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--seed", o.seed, "override the training and evaluation seed")
        ->each([&](const std::string&) { o.seed_set = true; });
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--device", o.device, "compute device (cpu)");
  };
  auto attack_opts = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "model checkpoint");
    sub->add_option("--attack", o.attack, "fgsm, pgd or cw");
    sub->add_option("--epsilon", o.epsilon, "l-inf budget, e.g. 0.1 or 8/255");
  };

  auto* train_cmd = app.add_subcommand("train", "adversarial training");
  common(train_cmd);
  train_cmd->add_flag("--resume", o.resume, "continue from <out>/last.ckpt");
  auto* attack_cmd = app.add_subcommand("attack", "write adversarial examples of the eval split");
  common(attack_cmd);
  attack_opts(attack_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "natural and worst-case robust accuracy");
  common(eval_cmd);
  attack_opts(eval_cmd);
  eval_cmd->add_option("--beta-grid", o.beta_grid, "comma-separated attack betas, e.g. 0,2,inf,inf-1");
  auto* diag_cmd = app.add_subcommand("diagnose", "channel profiles, per-class and top-k accuracy");
  common(diag_cmd);
  attack_opts(diag_cmd);
  auto* sweep_cmd = app.add_subcommand("sweep-beta", "one attack over the full beta grid");
  common(sweep_cmd);
  attack_opts(sweep_cmd);
  sweep_cmd->add_option("--beta-grid", o.beta_grid, "comma-separated attack betas");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (attack_cmd->parsed()) return cmd_attack(o, out);
    if (eval_cmd->parsed()) return cmd_eval(o, out, false);
    if (diag_cmd->parsed()) return cmd_diagnose(o, out);
    if (sweep_cmd->parsed()) return cmd_eval(o, out, true);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  err << app.help();
  return kExitConfig;
}

}  // namespace cifs::platform
