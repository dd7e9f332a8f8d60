#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "splos/cmmc.hpp"
#include "splos/data.hpp"
#include "splos/dmc.hpp"
#include "splos/metrics.hpp"
#include "splos/networks.hpp"
#include "splos/optim.hpp"
#include "splos/threshold.hpp"

namespace splos {

/// Structural ablations; all false is the full method.
struct AblationFlags {
  bool no_adv_source_term = false;  // drop the source term of the adversarial loss
  bool no_gaux = false;             // P_common = P1
  bool no_cmmc = false;             // GM heads frozen after pretraining; decide by G^C mass vs h
  bool no_cmmc_h = false;           // decide by argmax of G^C over |C^S|+1 outputs
  bool no_mixup = false;            // lambda2 = 0 (source-only CMMC training)
  bool beta_lambda2 = false;        // lambda2 ~ Beta(omega r, h r)
  bool attached_weights = false;    // gradients flow through P_common
};

/// How a target sample is labeled at test time.
enum class DecisionRule {
  Commonness,          // unknown iff omega^t < h, else argmax of G^C common classes
  GcCommonMass,        // unknown iff P1 (G^C common mass) < h
  GcArgmax,            // argmax over all |C^S|+1 G^C outputs
  EnsembleConfidence,  // source-only baseline: max of mean GM probability < h
};

inline DecisionRule decision_rule_for(const AblationFlags& f) {
  if (f.no_cmmc_h) return DecisionRule::GcArgmax;
  if (f.no_cmmc) return DecisionRule::GcCommonMass;
  return DecisionRule::Commonness;
}

inline const char* decision_rule_name(DecisionRule r) {
  switch (r) {
    case DecisionRule::Commonness: return "commonness";
    case DecisionRule::GcCommonMass: return "gc-common-mass";
    case DecisionRule::GcArgmax: return "gc-argmax";
    case DecisionRule::EnsembleConfidence: return "ensemble-confidence";
  }
  return "?";
}

inline constexpr std::uint64_t kDefaultEvalPairingSeed = 0;

struct TrainConfig {
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  double r = 30.0;
  std::size_t m = 5;
  std::size_t batch_size = 48;
  SgdConfig sgd;
  std::size_t max_pre_iter = 200;
  std::size_t max_epochs = 30;
  std::size_t iter_per_epoch = 50;
  std::vector<std::size_t> widths{64, 32};
  double grl_coeff = 1.0;
  // Ramp the reversal strength from ~0 to grl_coeff over training as
  // 2/(1+exp(-10 p)) - 1, p = fraction of DMC iterations done. 0 disables.
  double grl_ramp = 10.0;
  AblationFlags flags;
  std::optional<double> manual_h;  // ablation: replaces the self-tuned threshold
  std::uint64_t seed = 0;
  std::uint64_t eval_pairing_seed = kDefaultEvalPairingSeed;
  bool evaluate_each_epoch = true;
  bool audit = true;
  std::size_t eval_threads = 1;

  void validate() const {
    detail::require(lambda1 >= 0.5 && lambda1 <= 1.0, "lambda1 must be in [0.5, 1]");
    detail::require(lambda2 >= 0.0 && lambda2 <= 1.0, "lambda2 must be in [0, 1]");
    detail::require(r > 0, "r must be positive");
    detail::require(m >= 2, "m must be >= 2");
    detail::require(batch_size >= 2, "batch size must be >= 2");
    detail::require(max_pre_iter >= 1 && iter_per_epoch >= 1,
                    "iteration counts must be >= 1");
    detail::require(sgd.base_lr > 0, "learning rate must be positive");
    detail::require(grl_coeff > 0, "gradient reversal coefficient must be positive");
    detail::require(grl_ramp >= 0, "gradient reversal ramp must be non-negative");
    if (manual_h) detail::require(*manual_h >= 0 && *manual_h <= 1, "manual h must be in [0, 1]");
  }

  DmcOptions dmc_options() const {
    DmcOptions o;
    o.grl_coeff = grl_coeff;
    o.adv_source_term = !flags.no_adv_source_term;
    o.use_gaux = !flags.no_gaux;
    o.attached_weights = flags.attached_weights;
    return o;
  }

  /// Reversal coefficient for DMC iteration `done` (0-based) of `total`.
  double grl_coeff_at(std::size_t done, std::size_t total) const {
    if (grl_ramp == 0 || total == 0) return grl_coeff;
    double p = static_cast<double>(done + 1) / static_cast<double>(total);
    return grl_coeff * (2.0 / (1.0 + std::exp(-grl_ramp * p)) - 1.0);
  }

  CmmcOptions cmmc_options() const {
    CmmcOptions o;
    o.lambda2.fixed = flags.no_mixup ? 0.0 : lambda2;
    o.lambda2.mode = (flags.beta_lambda2 && !flags.no_mixup) ? Lambda2Policy::Mode::Beta
                                                             : Lambda2Policy::Mode::Fixed;
    o.lambda2.r = r;
    return o;
  }

  ModelConfig model_config(const OsdaTask& task) const {
    return {task.dim(), task.num_source_classes, m, widths};
  }
};

struct AuditRow {
  std::size_t epoch = 0;
  std::size_t target_index = 0;
  CriteriaScores scores;
  int pseudo_label = 0;
  bool gated = false;  // omega >= h
  double lambda2 = std::numeric_limits<double>::quiet_NaN();  // NaN when not gated
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double h = 1.0;
  std::size_t threshold_pairs = 0;
  double lambda1 = 0.5;
  double loss_source_ce = 0;
  double loss_source_bce = 0;
  double loss_adv = 0;
  double loss_aux_disc = 0;
  double loss_cmmc = 0;
  std::size_t mixup_pairs = 0;
  std::size_t beta_fallbacks = 0;
  std::optional<Metrics> metrics;
  double eval_h = 0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  ThresholdSchedule schedule;
  std::vector<AuditRow> audit;
};

// ---------------------------------------------------------------------------
// Test-time decision.

struct Evaluation {
  Metrics metrics;
  double h = 0;
  bool manual_h = false;
  std::vector<int> predictions;
};

/// G^C probabilities of all rows, no graph.
inline Tensor gc_probs_of(const ModelBundle& b, const Tensor& x) {
  NoGradGuard ng;
  return gc_probs(b, b.f.forward(x));
}

/// Labels rows of x: class index in [0, |C^S|) or kUnknownPrediction.
/// The boundary omega^t == h counts as common.
inline std::vector<int> predict_rows(const ModelBundle& b, const Tensor& x, double h,
                                     DecisionRule rule) {
  NoGradGuard ng;
  const std::size_t n = x.rows(), c = b.num_classes();
  Tensor z = b.f.forward(x);
  Tensor gp = gc_probs(b, z);
  std::vector<int> out(n);
  std::vector<int> argmax_common = pseudo_labels(gp);
  switch (rule) {
    case DecisionRule::Commonness: {
      auto scores = commonness_scores_from_features(b, z);
      for (std::size_t i = 0; i < n; ++i)
        out[i] = scores[i].omega < h ? kUnknownPrediction : argmax_common[i];
      break;
    }
    case DecisionRule::GcCommonMass:
      for (std::size_t i = 0; i < n; ++i) {
        double p1 = 0;
        for (std::size_t j = 0; j < c; ++j) p1 += gp[i * (c + 1) + j];
        out[i] = p1 < h ? kUnknownPrediction : argmax_common[i];
      }
      break;
    case DecisionRule::GcArgmax:
      for (std::size_t i = 0; i < n; ++i) {
        const double unk = gp[i * (c + 1) + c];
        const double best = gp[i * (c + 1) + static_cast<std::size_t>(argmax_common[i])];
        out[i] = unk > best ? kUnknownPrediction : argmax_common[i];
      }
      break;
    case DecisionRule::EnsembleConfidence: {
      std::vector<double> avg(n * c, 0.0);
      for (std::size_t k = 0; k < b.num_gm(); ++k) {
        Tensor p = gm_probs(b, z, k);
        for (std::size_t i = 0; i < n * c; ++i) avg[i] += p[i] / static_cast<double>(b.num_gm());
      }
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
          if (avg[i * c + j] > avg[i * c + best]) best = j;
        out[i] = avg[i * c + best] < h ? kUnknownPrediction : static_cast<int>(best);
      }
      break;
    }
  }
  return out;
}

/// Single-sample prediction.
inline int predict(const ModelBundle& b, std::span<const double> x, double h,
                   DecisionRule rule = DecisionRule::Commonness) {
  Tensor row = Tensor::matrix(1, x.size(), {x.begin(), x.end()});
  return predict_rows(b, row, h, rule)[0];
}

/// Predictions for a whole dataset, fanned out over `threads` row chunks.
/// Each row is computed independently, so the result does not depend on the
/// thread count.
inline std::vector<int> predict_dataset(const ModelBundle& b, const Dataset& ds, double h,
                                        DecisionRule rule, std::size_t threads = 1) {
  const std::size_t n = ds.size();
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  std::vector<int> out(n);
  auto work = [&](std::size_t begin, std::size_t end) {
    if (begin >= end) return;
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
    auto part = predict_rows(b, ds.gather(idx), h, rule);
    std::copy(part.begin(), part.end(), out.begin() + static_cast<std::ptrdiff_t>(begin));
  };
  if (threads == 1) {
    work(0, n);
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back(work, t * chunk, std::min(n, (t + 1) * chunk));
  for (auto& th : pool) th.join();
  return out;
}

struct EvalOptions {
  DecisionRule rule = DecisionRule::Commonness;
  std::optional<double> manual_h;
  std::uint64_t pairing_seed = kDefaultEvalPairingSeed;
  std::size_t threads = 1;
};

/// Threshold over the evaluation target set (or the manual override), then
/// predictions and metrics against the target ground truth.
inline Evaluation evaluate(const OsdaTask& task, const ModelBundle& b, const EvalOptions& opt,
                           double lambda1 = 0.5) {
  detail::require(task.num_source_classes == b.num_classes(),
                  fmt::format("checkpoint has |C^S| = {} but task has |C^S| = {}", b.num_classes(),
                              task.num_source_classes));
  detail::require(task.dim() == b.config.input_dim,
                  fmt::format("checkpoint expects input dimension {} but task has {}",
                              b.config.input_dim, task.dim()));
  if (!task.target_has_labels()) throw ContractError("evaluate: no labeled target samples");
  Evaluation ev;
  if (opt.manual_h) {
    ev.h = *opt.manual_h;
    ev.manual_h = true;
  } else {
    ev.h = compute_threshold(gc_probs_of(b, task.target.all()), lambda1, opt.pairing_seed).h;
  }
  ev.predictions = predict_dataset(b, task.target, ev.h, opt.rule, opt.threads);
  ev.metrics = compute_metrics(task.target.labels, ev.predictions, task.num_source_classes);
  return ev;
}

// ---------------------------------------------------------------------------
// Training.

/// Owns one run: bundle, sampling streams and the iteration counter.
class Trainer {
 public:
  Trainer(const OsdaTask& task, TrainConfig cfg) : task_(task), cfg_(std::move(cfg)) {
    cfg_.validate();
    detail::require(task.source.size() >= 1 && task.target.size() >= 2,
                    "task needs at least one source and two target samples");
    bundle_ = make_bundle(cfg_.model_config(task), cfg_.seed);
  }

  Trainer(const OsdaTask& task, TrainConfig cfg, ModelBundle bundle)
      : task_(task), cfg_(std::move(cfg)), bundle_(std::move(bundle)) {
    cfg_.validate();
    detail::require(bundle_.num_classes() == task.num_source_classes &&
                        bundle_.config.input_dim == task.dim(),
                    "bundle does not match task dimensions");
  }

  const ModelBundle& bundle() const { return bundle_; }
  ModelBundle& bundle() { return bundle_; }
  const TrainConfig& config() const { return cfg_; }
  const TrainLog& log() const { return log_; }
  std::uint64_t iteration() const { return iteration_; }
  /// Learning-rate schedule position; train() starts counting from here.
  void set_iteration(std::uint64_t i) { iteration_ = i; }
  /// Called after each completed training epoch (progress reporting, diagnostics).
  void on_epoch(std::function<void(const EpochLog&, const ModelBundle&)> fn) {
    on_epoch_ = std::move(fn);
  }

  /// Source-only warm-up of F and the GM heads; G^C and G^aux untouched.
  void pretrain() {
    const std::size_t m = bundle_.num_gm();
    auto streams = streams_for(kPretrainStream);
    for (std::size_t i = 0; i < cfg_.max_pre_iter; ++i) {
      Tensor total = Tensor::scalar(0.0);
      for (std::size_t k = 0; k < m; ++k) {
        auto idx = streams[k].batches.next_source();
        Tensor x = jitter_inputs(task_.source.gather(idx), bundle_.gm[k].jitter_sigma,
                                 streams[k].jitter);
        total = add(total, pretrain_loss(bundle_, x, task_.source.gather_labels(idx), k));
      }
      if (!std::isfinite(total.item()))
        throw NumericError(fmt::format("non-finite pretraining loss at iteration {}", i));
      total.backward();
      const double lr = lr_at(iteration_++, cfg_.sgd);
      auto fp = bundle_.f.parameters();
      sgd_update(fp, bundle_.f_state, lr, cfg_.sgd);
      for (std::size_t k = 0; k < m; ++k) {
        auto gp = bundle_.gm[k].parameters();
        sgd_update(gp, bundle_.gm_states[k], lr, cfg_.sgd);
      }
    }
  }

  /// Alternating phase: per epoch a DMC block, the threshold, then a CMMC block.
  void train() {
    auto dmc_opt = cfg_.dmc_options();
    const std::size_t dmc_total = cfg_.max_epochs * cfg_.iter_per_epoch;
    const auto cmmc_opt = cfg_.cmmc_options();
    BatchIterator dmc_batches(task_, cfg_.batch_size, derive_seed(cfg_.seed, {kDmcStream}));
    auto cmmc_streams = streams_for(kCmmcStream);
    const std::uint64_t base = iteration_;

    for (std::size_t epoch = 0; epoch < cfg_.max_epochs; ++epoch) {
      EpochLog e;
      e.epoch = epoch + 1;
      e.lambda1 = cfg_.lambda1;

      for (std::size_t j = 0; j < cfg_.iter_per_epoch; ++j) {
        iteration_ = base + epoch * cfg_.iter_per_epoch + j;
        DmcBatchLoss l;
        dmc_opt.grl_coeff = cfg_.grl_coeff_at(epoch * cfg_.iter_per_epoch + j, dmc_total);
        try {
          l = dmc_step(bundle_, task_, dmc_batches.next(), lr_at(iteration_, cfg_.sgd), cfg_.sgd,
                       dmc_opt);
        } catch (const NumericError& err) {
          throw NumericError(fmt::format("epoch {} DMC iteration {}: {}", e.epoch, j + 1, err.what()));
        }
        e.loss_source_ce += l.source_ce;
        e.loss_source_bce += l.source_bce;
        e.loss_adv += l.adv;
        e.loss_aux_disc += l.aux_disc;
      }
      const double n_iter = static_cast<double>(cfg_.iter_per_epoch);
      e.loss_source_ce /= n_iter;
      e.loss_source_bce /= n_iter;
      e.loss_adv /= n_iter;
      e.loss_aux_disc /= n_iter;

      auto th = compute_threshold(gc_probs_of(bundle_, task_.target.all()), cfg_.lambda1,
                                  derive_seed(cfg_.seed, {kThresholdStream, epoch}));
      e.threshold_pairs = th.pairs;
      e.h = cfg_.manual_h.value_or(th.h);
      log_.schedule.entries.push_back({e.epoch, e.h, e.threshold_pairs, e.lambda1});
      if (cfg_.audit) record_audit(e.epoch, e.h, cmmc_opt.lambda2);

      if (!cfg_.flags.no_cmmc) {
        for (std::size_t j = 0; j < cfg_.iter_per_epoch; ++j) {
          iteration_ = base + epoch * cfg_.iter_per_epoch + j;
          CmmcStepResult r;
          try {
            r = cmmc_step(bundle_, task_, cmmc_streams, e.h, lr_at(iteration_, cfg_.sgd),
                          cfg_.sgd, cmmc_opt);
          } catch (const NumericError& err) {
            throw NumericError(
                fmt::format("epoch {} CMMC iteration {}: {}", e.epoch, j + 1, err.what()));
          }
          e.loss_cmmc += r.total_loss();
          e.mixup_pairs += r.total_pairs();
          e.beta_fallbacks += r.stats.beta_fallbacks;
        }
        e.loss_cmmc /= n_iter;
      }
      if (e.beta_fallbacks > 0) {
        std::cerr << "warning: epoch " << e.epoch << ": " << e.beta_fallbacks
                  << " lambda2 draws fell back to the fixed ratio (h*r <= 1 or omega <= h)\n";
      }
      iteration_ = base + (epoch + 1) * cfg_.iter_per_epoch;

      if (cfg_.evaluate_each_epoch && task_.target_has_labels()) {
        auto ev = evaluate(task_, bundle_, eval_options(), cfg_.lambda1);
        e.metrics = ev.metrics;
        e.eval_h = ev.h;
      }
      log_.epochs.push_back(e);
      if (on_epoch_) on_epoch_(log_.epochs.back(), bundle_);
    }
  }

  EvalOptions eval_options() const {
    EvalOptions o;
    o.rule = decision_rule_for(cfg_.flags);
    o.manual_h = cfg_.manual_h;
    o.pairing_seed = cfg_.eval_pairing_seed;
    o.threads = cfg_.eval_threads;
    return o;
  }

 private:
  std::vector<ClassifierStream> streams_for(std::uint64_t phase) const {
    std::vector<std::uint64_t> seeds;
    for (std::size_t k = 0; k < bundle_.num_gm(); ++k)
      seeds.push_back(derive_seed(cfg_.seed, {phase, k}));
    auto streams = make_classifier_streams(task_, cfg_.batch_size, seeds);
    for (std::size_t k = 0; k < streams.size(); ++k)
      streams[k].jitter = Rng(derive_seed(bundle_.gm[k].jitter_seed, {phase}));
    return streams;
  }

  void record_audit(std::size_t epoch, double h, const Lambda2Policy& policy) {
    Tensor xt = task_.target.all();
    Tensor gp = gc_probs_of(bundle_, xt);
    auto pseudo = pseudo_labels(gp);
    auto scores = commonness_scores(bundle_, xt);
    Rng rng = make_rng(cfg_.seed, {kAuditStream, epoch});
    for (std::size_t i = 0; i < scores.size(); ++i) {
      AuditRow row;
      row.epoch = epoch;
      row.target_index = i;
      row.scores = scores[i];
      row.pseudo_label = pseudo[i];
      row.gated = scores[i].omega >= h;
      if (row.gated) {
        row.lambda2 = policy.fixed;
        if (policy.mode == Lambda2Policy::Mode::Beta &&
            lambda2_constraint_holds(scores[i].omega, h, policy.r))
          row.lambda2 = beta_sample(scores[i].omega * policy.r, h * policy.r, rng);
      }
      log_.audit.push_back(row);
    }
  }

  const OsdaTask& task_;
  TrainConfig cfg_;
  ModelBundle bundle_;
  TrainLog log_;
  std::function<void(const EpochLog&, const ModelBundle&)> on_epoch_;
  std::uint64_t iteration_ = 0;
};

/// Fresh bundle, source-only warm-up.
inline ModelBundle pretrain(const OsdaTask& task, const TrainConfig& cfg) {
  Trainer t(task, cfg);
  t.pretrain();
  return t.bundle();
}

struct TrainResult {
  ModelBundle bundle;
  TrainLog log;
};

/// Alternating training from a pretrained bundle. The lr schedule continues
/// from iteration max_pre_iter.
inline TrainResult train(const OsdaTask& task, const TrainConfig& cfg, ModelBundle pretrained) {
  Trainer t(task, cfg, std::move(pretrained));
  TrainResult out;
  t.set_iteration(cfg.max_pre_iter);
  t.train();
  out.bundle = t.bundle();
  out.log = t.log();
  return out;
}

}  // namespace splos
