// splos: generate | train | eval | sweep
//
// Every train run writes manifest.json before anything else, then streams
// trainlog.jsonl one epoch at a time, so an aborted run leaves a readable
// prefix. Artifact names inside the manifest are relative to the run
// directory; the manifest carries no timestamps or absolute paths, which
// keeps it byte-stable across reruns.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "splos/splos.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace splos;

namespace {

constexpr const char* kOutDirEnv = "SPLOS_OUT_DIR";

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3, kContract = 4 };

std::string default_out_dir() {
  const char* env = std::getenv(kOutDirEnv);
  return env && *env ? env : ".";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Shared option groups.

struct SynthOptions {
  SynthConfig cfg;
  std::size_t common = 3;
  std::size_t total = 6;

  void add(CLI::App& app) {
    app.add_option("--dim", cfg.dim, "feature dimension")->capture_default_str();
    app.add_option("--samples-per-class", cfg.samples_per_class)->capture_default_str();
    app.add_option("--sigma", cfg.sigma, "cluster spread")->capture_default_str();
    app.add_option("--spacing", cfg.spacing, "distance between neighbouring centres")
        ->capture_default_str();
    app.add_option("--rotation", cfg.rotation_deg, "target rotation in degrees")
        ->capture_default_str();
    app.add_option("--translation", cfg.translation, "target shift per circle dim (x sigma)")
        ->capture_default_str();
    app.add_option("--noise-translation", cfg.noise_translation,
                   "target shift per remaining dim (x sigma)")
        ->capture_default_str();
    app.add_option("--spread", cfg.spread_multiplier, "target spread multiplier")
        ->capture_default_str();
  }

  json to_json() const {
    return {{"dim", cfg.dim},
            {"samples_per_class", cfg.samples_per_class},
            {"sigma", cfg.sigma},
            {"spacing", cfg.spacing},
            {"rotation_deg", cfg.rotation_deg},
            {"translation", cfg.translation},
            {"noise_translation", cfg.noise_translation},
            {"spread_multiplier", cfg.spread_multiplier},
            {"seed", cfg.seed}};
  }
};

void add_train_options(CLI::App& app, TrainConfig& cfg, std::optional<double>& manual_h) {
  app.add_option("--lambda1", cfg.lambda1, "threshold trade-off, in [0.5, 1]")->capture_default_str();
  app.add_option("--lambda2", cfg.lambda2, "fixed mixup ratio, in [0, 1]")->capture_default_str();
  app.add_option("--r", cfg.r, "Beta concentration for lambda2")->capture_default_str();
  app.add_option("--m", cfg.m, "number of CMMC classifiers")->capture_default_str();
  app.add_option("--batch", cfg.batch_size)->capture_default_str();
  app.add_option("--lr", cfg.sgd.base_lr, "initial learning rate")->capture_default_str();
  app.add_option("--gamma", cfg.sgd.lr_gamma, "lr decay gamma")->capture_default_str();
  app.add_option("--beta-lr", cfg.sgd.lr_beta, "lr decay exponent")->capture_default_str();
  app.add_option("--momentum", cfg.sgd.momentum)->capture_default_str();
  app.add_option("--weight-decay", cfg.sgd.weight_decay)->capture_default_str();
  app.add_option("--feature-lr-scale", cfg.sgd.feature_lr_scale,
                 "lr multiplier for the feature extractor in DMC steps")
      ->capture_default_str();
  app.add_option("--pre-iter", cfg.max_pre_iter, "pretraining iterations")->capture_default_str();
  app.add_option("--epochs", cfg.max_epochs, "alternating epochs")->capture_default_str();
  app.add_option("--iter-per-epoch", cfg.iter_per_epoch)->capture_default_str();
  app.add_option("--widths", cfg.widths, "feature extractor hidden widths")
      ->delimiter(',')
      ->capture_default_str();
  app.add_option("--grl", cfg.grl_coeff, "gradient reversal coefficient")->capture_default_str();
  app.add_option("--grl-ramp", cfg.grl_ramp, "reversal warm-up steepness, 0 = constant")
      ->capture_default_str();
  app.add_option("--eval-pairing-seed", cfg.eval_pairing_seed)->capture_default_str();
  app.add_option("--threads", cfg.eval_threads, "evaluation threads")->capture_default_str();
  app.add_option("--manual-h", manual_h, "fixed threshold instead of the self-tuned one");

  auto& f = cfg.flags;
  app.add_flag("--no-adv-source-term", f.no_adv_source_term);
  app.add_flag("--no-gaux", f.no_gaux, "P_common = P1");
  app.add_flag("--no-cmmc", f.no_cmmc, "freeze GM heads; decide by G^C common mass");
  app.add_flag("--no-cmmc-h", f.no_cmmc_h, "decide by argmax over all G^C outputs");
  app.add_flag("--no-mixup", f.no_mixup, "lambda2 = 0");
  app.add_flag("--beta-lambda2", f.beta_lambda2, "lambda2 ~ Beta(omega r, h r)");
  app.add_flag("--attached-weights", f.attached_weights, "let gradients flow through P_common");
  app.add_flag_function("--no-audit", [&cfg](std::int64_t) { cfg.audit = false; }, "skip audit.csv");
}

json config_json(const TrainConfig& c) {
  const auto& f = c.flags;
  return {{"seed", c.seed},
          {"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"r", c.r},
          {"m", c.m},
          {"batch_size", c.batch_size},
          {"base_lr", c.sgd.base_lr},
          {"momentum", c.sgd.momentum},
          {"weight_decay", c.sgd.weight_decay},
          {"lr_gamma", c.sgd.lr_gamma},
          {"lr_beta", c.sgd.lr_beta},
          {"nesterov", c.sgd.nesterov},
          {"feature_lr_scale", c.sgd.feature_lr_scale},
          {"max_pre_iter", c.max_pre_iter},
          {"max_epochs", c.max_epochs},
          {"iter_per_epoch", c.iter_per_epoch},
          {"widths", c.widths},
          {"grl_coeff", c.grl_coeff},
          {"grl_ramp", c.grl_ramp},
          {"manual_h", c.manual_h ? json(*c.manual_h) : json(nullptr)},
          {"eval_pairing_seed", c.eval_pairing_seed},
          {"audit", c.audit},
          {"decision_rule", decision_rule_name(decision_rule_for(f))},
          {"flags",
           {{"no_adv_source_term", f.no_adv_source_term},
            {"no_gaux", f.no_gaux},
            {"no_cmmc", f.no_cmmc},
            {"no_cmmc_h", f.no_cmmc_h},
            {"no_mixup", f.no_mixup},
            {"beta_lambda2", f.beta_lambda2},
            {"attached_weights", f.attached_weights}}}};
}

// ---------------------------------------------------------------------------
// Training pipeline shared by `train` and `sweep`.

struct RunOutcome {
  RunSummary summary;
  Evaluation eval;
};

/// Pretrain, train and evaluate, writing every artifact into `dir`.
RunOutcome run_pipeline(const OsdaTask& task, const TrainConfig& cfg, const fs::path& dir,
                        const json& task_info) {
  fs::create_directories(dir);
  json manifest = {{"tool", "splos"},
                   {"version", kVersion},
                   {"task", task_info},
                   {"config", config_json(cfg)},
                   {"artifacts",
                    {{"checkpoint", "checkpoint.bin"},
                     {"train_log", "trainlog.jsonl"},
                     {"threshold_schedule", "threshold.csv"},
                     {"audit", cfg.audit ? json("audit.csv") : json(nullptr)}}}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  std::ofstream log_os(dir / "trainlog.jsonl", std::ios::binary);
  if (!log_os) throw std::runtime_error("cannot open '" + (dir / "trainlog.jsonl").string() + "'");

  Trainer trainer(task, cfg);
  trainer.on_epoch([&](const EpochLog& e, const ModelBundle&) {
    write_epoch_record(log_os, e);
    log_os.flush();
  });
  trainer.pretrain();
  trainer.set_iteration(cfg.max_pre_iter);
  trainer.train();

  save_checkpoint((dir / "checkpoint.bin").string(), trainer.bundle());
  {
    std::ostringstream os;
    trainer.log().schedule.write_csv(os);
    write_text(dir / "threshold.csv", os.str());
  }
  if (cfg.audit) {
    std::ostringstream os;
    write_audit_csv(os, trainer.log());
    write_text(dir / "audit.csv", os.str());
  }

  RunOutcome out;
  auto& s = out.summary;
  s.epochs = trainer.log().epochs.size();
  if (!trainer.log().epochs.empty()) s.final_h = trainer.log().epochs.back().h;
  s.decision_rule = decision_rule_name(decision_rule_for(cfg.flags));
  s.manual_h = cfg.manual_h.has_value();
  if (task.target_has_labels()) {
    out.eval = evaluate(task, trainer.bundle(), trainer.eval_options(), cfg.lambda1);
    s.metrics = out.eval.metrics;
    s.eval_h = out.eval.h;
  }
  write_summary_record(log_os, s);
  if (!log_os) throw std::runtime_error("write failed for trainlog.jsonl");
  return out;
}

json task_info_json(const std::string& path, const OsdaTask& task) {
  return {{"path", path},
          {"num_source_classes", task.num_source_classes},
          {"num_target_classes", task.num_target_classes},
          {"openness", task.openness()},
          {"source_size", task.source.size()},
          {"target_size", task.target.size()},
          {"dim", task.dim()}};
}

// ---------------------------------------------------------------------------
// Subcommands.

int cmd_generate(const SynthOptions& opt, const std::string& out_path) {
  auto task = generate_task(opt.cfg, opt.common, opt.total);
  fs::path out = out_path;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_feature_table(out.string(), task);
  json manifest = {{"tool", "splos"},
                   {"version", kVersion},
                   {"feature_table", out.filename().string()},
                   {"num_source_classes", task.num_source_classes},
                   {"num_target_classes", task.num_target_classes},
                   {"openness", task.openness()},
                   {"synth", opt.to_json()}};
  fs::path manifest_path = out;
  manifest_path += ".manifest.json";
  write_text(manifest_path, manifest.dump(2) + "\n");
  std::cout << "wrote " << out.string() << " (|C^S|=" << task.num_source_classes
            << ", |C^T|=" << task.num_target_classes << ", O=" << format_real(task.openness())
            << ")\n";
  return kOk;
}

int cmd_train(const std::string& task_path, TrainConfig cfg, const std::string& out_dir) {
  auto task = load_feature_table(task_path);
  auto out = run_pipeline(task, cfg, out_dir, task_info_json(task_path, task));
  const auto& s = out.summary;
  std::cout << "epochs " << s.epochs << "  final h " << format_real(s.final_h) << "\n";
  if (s.metrics) {
    std::cout << fmt::format("OS {:.4f}  OS* {:.4f}  Unk {:.4f}  H {:.4f}  (eval h {:.4f})\n",
                             s.metrics->os, s.metrics->os_star, s.metrics->unk,
                             s.metrics->h_score, s.eval_h);
  }
  std::cout << "artifacts in " << out_dir << "\n";
  return kOk;
}

int cmd_eval(const std::string& task_path, const std::string& ckpt_path, const TrainConfig& cfg,
             const std::string& out_path) {
  auto task = load_feature_table(task_path);
  auto bundle = load_checkpoint(ckpt_path);
  EvalOptions opt;
  opt.rule = decision_rule_for(cfg.flags);
  opt.manual_h = cfg.manual_h;
  opt.pairing_seed = cfg.eval_pairing_seed;
  opt.threads = cfg.eval_threads;
  auto ev = evaluate(task, bundle, opt, cfg.lambda1);
  std::string text = fmt::format(
      "{{\"metrics\":{},\"h\":{},\"manual_h\":{},\"decision_rule\":\"{}\",\"checkpoint\":{},"
      "\"task\":{}}}\n",
      detail::metrics_json(ev.metrics), detail::json_real(ev.h), ev.manual_h ? "true" : "false",
      decision_rule_name(opt.rule), json(ckpt_path).dump(), json(task_path).dump());
  std::cout << text;
  if (!out_path.empty()) write_text(out_path, text);
  return kOk;
}

struct SweepCell {
  std::size_t common = 0, total = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double openness = 0, final_h = 0, h_score = 0, os = 0;
};

std::vector<std::pair<std::size_t, std::size_t>> parse_settings(const std::vector<std::string>& raw) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& s : raw) {
    auto colon = s.find(':');
    std::size_t a = 0, b = 0;
    if (colon == std::string::npos || !detail::parse_number(std::string_view(s).substr(0, colon), a) ||
        !detail::parse_number(std::string_view(s).substr(colon + 1), b))
      throw CLI::ValidationError("--settings", "expected CS:CT, got '" + s + "'");
    out.emplace_back(a, b);
  }
  return out;
}

int cmd_sweep(const SynthOptions& synth, const std::vector<std::string>& settings_raw,
              const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
              const std::string& out_dir, std::size_t jobs) {
  auto settings = parse_settings(settings_raw);
  if (settings.empty() || seeds.empty())
    throw CLI::ValidationError("sweep", "needs at least one --settings entry and one --seeds value");

  std::vector<SweepCell> cells;
  for (auto [cs, ct] : settings)
    for (auto seed : seeds) {
      SweepCell c;
      c.common = cs;
      c.total = ct;
      c.seed = seed;
      cells.push_back(c);
    }

  std::mutex io;
  std::size_t next = 0;
  auto worker = [&] {
    while (true) {
      std::size_t i;
      {
        std::lock_guard lock(io);
        if (next == cells.size()) return;
        i = next++;
      }
      auto& c = cells[i];
      try {
        SynthConfig sc = synth.cfg;
        sc.seed = c.seed;
        auto task = generate_task(sc, c.common, c.total);
        TrainConfig cfg = base;
        cfg.seed = c.seed;
        cfg.eval_threads = 1;
        auto dir = fs::path(out_dir) / fmt::format("cs{}_ct{}_seed{}", c.common, c.total, c.seed);
        json info = task_info_json("generated", task);
        info["synth"] = synth.to_json();
        info["synth"]["seed"] = c.seed;
        auto run = run_pipeline(task, cfg, dir, info);
        c.openness = task.openness();
        c.final_h = run.summary.final_h;
        c.h_score = run.eval.metrics.h_score;
        c.os = run.eval.metrics.os;
        c.ok = true;
      } catch (const std::exception& e) {
        c.error = e.what();
        c.openness = 1.0 - static_cast<double>(c.common) / static_cast<double>(std::max<std::size_t>(c.total, 1));
      }
      std::lock_guard lock(io);
      std::cerr << fmt::format("cell |C^S|={} |C^T|={} seed {}: {}\n", c.common, c.total, c.seed,
                               c.ok ? fmt::format("h {:.4f} H {:.4f}", c.final_h, c.h_score)
                                    : "FAILED: " + c.error);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::max<std::size_t>(jobs, 1); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::ostringstream csv;
  csv << "kind,num_source_classes,num_target_classes,seed,openness,final_h,h_score,os,status\n";
  for (const auto& c : cells) {
    csv << "cell," << c.common << ',' << c.total << ',' << c.seed << ',' << format_real(c.openness)
        << ',';
    if (c.ok)
      csv << format_real(c.final_h) << ',' << format_real(c.h_score) << ',' << format_real(c.os)
          << ",ok\n";
    else
      csv << ",,,failed\n";
  }
  for (auto [cs, ct] : settings) {
    double h = 0, hs = 0, os = 0, o = 0;
    std::size_t n = 0;
    for (const auto& c : cells) {
      if (c.common != cs || c.total != ct) continue;
      o = c.openness;
      if (!c.ok) continue;
      h += c.final_h;
      hs += c.h_score;
      os += c.os;
      ++n;
    }
    csv << "mean," << cs << ',' << ct << ",," << format_real(o) << ',';
    if (n > 0) {
      double d = static_cast<double>(n);
      csv << format_real(h / d) << ',' << format_real(hs / d) << ',' << format_real(os / d) << ','
          << (n == seeds.size() ? "ok" : "partial") << '\n';
    } else {
      csv << ",,,failed\n";
    }
  }
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "sweep.csv", csv.str());
  std::cout << csv.str();
  bool any_failed = std::any_of(cells.begin(), cells.end(), [](const SweepCell& c) { return !c.ok; });
  return any_failed ? kNumeric : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set domain adaptation with a self-tuned threshold"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SynthOptions gen_opt;
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("generate", "write a synthetic task as a feature table");
  gen_opt.add(*gen);
  gen->add_option("--common", gen_opt.common, "|C^S|")->capture_default_str();
  gen->add_option("--total", gen_opt.total, "|C^T|")->capture_default_str();
  gen->add_option("--seed", gen_seed)->required();
  gen->add_option("-o,--out", gen_out, "output CSV")->required();

  TrainConfig train_cfg;
  std::optional<double> train_manual_h;
  std::string train_task, train_out;
  auto* train = app.add_subcommand("train", "pretrain, train and evaluate; write all artifacts");
  train->add_option("--task", train_task, "feature table")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", train_cfg.seed)->required();
  train->add_option("-o,--out", train_out, "run directory")
      ->envname(kOutDirEnv)
      ->default_str(".");
  add_train_options(*train, train_cfg, train_manual_h);

  TrainConfig eval_cfg;
  std::optional<double> eval_manual_h;
  std::string eval_task, eval_ckpt, eval_out;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a labeled task");
  ev->add_option("--task", eval_task)->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("-o,--out", eval_out, "also write the JSON record here");
  ev->add_option("--lambda1", eval_cfg.lambda1)->capture_default_str();
  ev->add_option("--eval-pairing-seed", eval_cfg.eval_pairing_seed)->capture_default_str();
  ev->add_option("--threads", eval_cfg.eval_threads)->capture_default_str();
  ev->add_option("--manual-h", eval_manual_h, "fixed threshold instead of the self-tuned one");
  ev->add_flag("--no-cmmc", eval_cfg.flags.no_cmmc, "decide by G^C common mass");
  ev->add_flag("--no-cmmc-h", eval_cfg.flags.no_cmmc_h, "decide by argmax over all G^C outputs");

  SynthOptions sweep_synth;
  TrainConfig sweep_cfg;
  std::optional<double> sweep_manual_h;
  std::vector<std::string> sweep_settings;
  std::vector<std::uint64_t> sweep_seeds;
  std::string sweep_out;
  std::size_t sweep_jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "train + eval over (|C^S|, |C^T|) settings and seeds");
  sweep_synth.add(*sweep);
  sweep->add_option("--settings", sweep_settings, "CS:CT pairs, e.g. 3:4,3:6,3:12")
      ->delimiter(',')
      ->required();
  sweep->add_option("--seeds", sweep_seeds)->delimiter(',')->required();
  sweep->add_option("-o,--out", sweep_out, "sweep directory")->envname(kOutDirEnv)->default_str(".");
  sweep->add_option("--jobs", sweep_jobs, "parallel cells")->capture_default_str();
  add_train_options(*sweep, sweep_cfg, sweep_manual_h);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      gen_opt.cfg.seed = gen_seed;
      return cmd_generate(gen_opt, gen_out);
    }
    if (train->parsed()) {
      train_cfg.manual_h = train_manual_h;
      train_cfg.validate();
      return cmd_train(train_task, train_cfg, train_out.empty() ? default_out_dir() : train_out);
    }
    if (ev->parsed()) {
      eval_cfg.manual_h = eval_manual_h;
      eval_cfg.validate();
      return cmd_eval(eval_task, eval_ckpt, eval_cfg, eval_out);
    }
    if (sweep->parsed()) {
      sweep_cfg.manual_h = sweep_manual_h;
      sweep_cfg.validate();
      return cmd_sweep(sweep_synth, sweep_settings, sweep_seeds, sweep_cfg,
                       sweep_out.empty() ? default_out_dir() : sweep_out, sweep_jobs);
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kContract;
  } catch (const NumericError& e) {
    std::cerr << "error: training aborted: " << e.what() << "\n";
    return kNumeric;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
