#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "splos/data.hpp"
#include "splos/dmc.hpp"
#include "splos/networks.hpp"
#include "splos/ops.hpp"
#include "splos/optim.hpp"
#include "splos/random.hpp"

// Cross-domain mixup with multiple criteria: commonness scoring of target
// samples by an ensemble of m classifiers, threshold-gated pseudo-label
// pairing, and the mixup training objective.
namespace splos {

/// Probability vectors of one sample, one per classifier.
using Probe = std::span<const std::vector<double>>;

/// Mean Shannon entropy of the probe vectors, normalized by ln |C^S|.
inline double criteria_entropy(Probe probe) {
  detail::require(!probe.empty(), "criteria_entropy: empty probe");
  const std::size_t c = probe.front().size();
  detail::require(c >= 2, "criteria_entropy: |C^S| must be >= 2");
  double total = 0;
  for (const auto& p : probe) {
    detail::require(p.size() == c, "criteria_entropy: ragged probe");
    for (double v : p)
      if (v > 0) total -= v * std::log(v);
  }
  return total / static_cast<double>(probe.size()) / std::log(static_cast<double>(c));
}

/// (1 / (m |C^S|)) sum_k sum_c (p_c^k - mean_k p_c)^2.
inline double criteria_consistency(Probe probe) {
  detail::require(probe.size() >= 2, "criteria_consistency: at least 2 classifiers required");
  const std::size_t m = probe.size(), c = probe.front().size();
  double total = 0;
  for (std::size_t j = 0; j < c; ++j) {
    double mu = 0;
    for (const auto& p : probe) mu += p[j];
    mu /= static_cast<double>(m);
    for (const auto& p : probe) total += (p[j] - mu) * (p[j] - mu);
  }
  return total / static_cast<double>(m * c);
}

/// Mean over classifiers of the per-classifier maximum probability.
inline double criteria_confidence(Probe probe) {
  detail::require(!probe.empty(), "criteria_confidence: empty probe");
  double total = 0;
  for (const auto& p : probe) total += *std::max_element(p.begin(), p.end());
  return total / static_cast<double>(probe.size());
}

struct CriteriaScores {
  double entropy = 0;
  double consistency = 0;
  double confidence = 0;
  double omega = 0;  // commonness score w^t
};

inline double combine_criteria(double entropy, double consistency, double confidence) {
  return ((1.0 - entropy) + (1.0 - consistency) + confidence) / 3.0;
}

inline CriteriaScores score_probe(Probe probe) {
  CriteriaScores s;
  s.entropy = criteria_entropy(probe);
  s.consistency = criteria_consistency(probe);
  s.confidence = criteria_confidence(probe);
  s.omega = combine_criteria(s.entropy, s.consistency, s.confidence);
  return s;
}

/// Same as commonness_scores, starting from features z = F(x).
inline std::vector<CriteriaScores> commonness_scores_from_features(const ModelBundle& b,
                                                                    const Tensor& z) {
  NoGradGuard ng;
  const std::size_t m = b.num_gm(), n = z.rows(), c = b.num_classes();
  std::vector<Tensor> probs;
  for (std::size_t k = 0; k < m; ++k) probs.push_back(gm_probs(b, z, k));
  std::vector<CriteriaScores> out(n);
  std::vector<std::vector<double>> probe(m, std::vector<double>(c));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t j = 0; j < c; ++j) probe[k][j] = probs[k][i * c + j];
    out[i] = score_probe(probe);
  }
  return out;
}

/// Commonness scores of every row of x from the m GM heads (no jitter, no graph).
inline std::vector<CriteriaScores> commonness_scores(const ModelBundle& b, const Tensor& x) {
  NoGradGuard ng;
  Tensor z = b.f.forward(x);
  return commonness_scores_from_features(b, z);
}

/// argmax over the first |C^S| columns of a G^C probability matrix.
inline std::vector<int> pseudo_labels(const Tensor& gc_p) {
  const std::size_t n = gc_p.rows(), w = gc_p.cols(), c = w - 1;
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (gc_p[i * w + j] > gc_p[i * w + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// One Beta(a, b) draw via two Gamma variates.
inline double beta_sample(double a, double b, Rng& rng) {
  detail::require(a > 0 && b > 0, "beta_sample: parameters must be positive");
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  double x = ga(rng), y = gb(rng);
  return x / (x + y);
}

/// omega r > h r > 1.
inline bool lambda2_constraint_holds(double omega, double h, double r) {
  return omega * r > h * r && h * r > 1.0;
}

/// Mixing ratio drawn from Beta(omega r, h r). Throws ContractError unless
/// omega r > h r > 1; callers fall back to a fixed ratio in that case.
inline double sample_lambda2(double omega, double h, double r, Rng& rng) {
  if (!lambda2_constraint_holds(omega, h, r)) {
    throw ContractError("sample_lambda2: constraint omega*r > h*r > 1 violated (omega*r = " +
                        std::to_string(omega * r) + ", h*r = " + std::to_string(h * r) + ")");
  }
  return beta_sample(omega * r, h * r, rng);
}

struct Lambda2Policy {
  enum class Mode { Fixed, Beta };
  Mode mode = Mode::Fixed;
  double fixed = 0.5;
  double r = 30.0;
};

struct MixupPair {
  std::size_t source_index = 0;  // row in task.source
  std::size_t target_index = 0;  // row in task.target
  int label = 0;                 // source label == target pseudo-label
  double lambda2 = 0.5;
  double omega = 0;
};

struct PairingStats {
  std::size_t gated_out = 0;
  std::size_t unmatched = 0;
  std::size_t beta_fallbacks = 0;
};

/// Pairs each target with omega >= h to a uniformly chosen source sample of
/// the same (pseudo-)label. Targets without a matching source are dropped.
inline std::vector<MixupPair> build_mixup_pairs(std::span<const std::size_t> source_idx,
                                                std::span<const int> source_labels,
                                                std::span<const std::size_t> target_idx,
                                                std::span<const int> target_pseudo,
                                                std::span<const double> target_omega, double h,
                                                const Lambda2Policy& policy, Rng& rng,
                                                PairingStats* stats = nullptr) {
  detail::require(source_idx.size() == source_labels.size() &&
                      target_idx.size() == target_pseudo.size() &&
                      target_idx.size() == target_omega.size(),
                  "build_mixup_pairs: length mismatch");
  PairingStats local;
  std::vector<MixupPair> pairs;
  std::vector<std::size_t> matches;
  for (std::size_t t = 0; t < target_idx.size(); ++t) {
    if (target_omega[t] < h) {
      ++local.gated_out;
      continue;
    }
    matches.clear();
    for (std::size_t s = 0; s < source_idx.size(); ++s)
      if (source_labels[s] == target_pseudo[t]) matches.push_back(s);
    if (matches.empty()) {
      ++local.unmatched;
      continue;
    }
    std::uniform_int_distribution<std::size_t> pick_src(0, matches.size() - 1);
    std::size_t s = matches[pick_src(rng)];
    double lambda2 = policy.fixed;
    if (policy.mode == Lambda2Policy::Mode::Beta) {
      if (lambda2_constraint_holds(target_omega[t], h, policy.r))
        lambda2 = beta_sample(target_omega[t] * policy.r, h * policy.r, rng);
      else
        ++local.beta_fallbacks;
    }
    pairs.push_back({source_idx[s], target_idx[t], target_pseudo[t], lambda2, target_omega[t]});
  }
  if (stats) {
    stats->gated_out += local.gated_out;
    stats->unmatched += local.unmatched;
    stats->beta_fallbacks += local.beta_fallbacks;
  }
  return pairs;
}

/// x + N(0, sigma^2) noise; returns x itself when sigma is zero.
inline Tensor jitter_inputs(const Tensor& x, double sigma, Rng& rng) {
  if (sigma <= 0) return x;
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v += noise(rng);
  return Tensor(x.shape(), std::move(out));
}

/// Mixed inputs (1 - lambda2) x^s + lambda2 x^t for each pair.
inline Tensor mix_inputs(const OsdaTask& task, std::span<const MixupPair> pairs) {
  const std::size_t d = task.dim();
  std::vector<double> out(pairs.size() * d);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto xs = task.source.row(pairs[i].source_index);
    auto xt = task.target.row(pairs[i].target_index);
    const double l = pairs[i].lambda2;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (1.0 - l) * xs[j] + l * xt[j];
  }
  return Tensor::matrix(pairs.size(), d, std::move(out));
}

/// Cross-entropy of G^{M_k} on mixed inputs against the source labels.
/// With `freeze_features`, F sits behind a stop-gradient. Returns a constant
/// zero when there are no pairs.
inline Tensor cmmc_loss(const ModelBundle& b, const OsdaTask& task,
                        std::span<const MixupPair> pairs, std::size_t k,
                        bool freeze_features = true, Rng* jitter = nullptr) {
  if (pairs.empty()) return Tensor::scalar(0.0);
  detail::require(k < b.num_gm(), "cmmc_loss: classifier index out of range");
  Tensor x = mix_inputs(task, pairs);
  if (jitter) x = jitter_inputs(x, b.gm[k].jitter_sigma, *jitter);
  Tensor z = b.f.forward(x);
  if (freeze_features) z = stop_gradient(z);
  std::vector<int> labels;
  for (const auto& p : pairs) labels.push_back(p.label);
  return source_ce_loss(b.gm[k].logits(z), labels);
}

/// Warm-up loss: source cross-entropy of G^{M_k}; gradients reach F.
inline Tensor pretrain_loss(const ModelBundle& b, const Tensor& xs, std::span<const int> ys,
                            std::size_t k) {
  detail::require(k < b.num_gm(), "pretrain_loss: classifier index out of range");
  return source_ce_loss(b.gm[k].logits(b.f.forward(xs)), ys, b.num_classes());
}

/// Per-classifier sampling state: its own batches, jitter noise and pairing draws.
struct ClassifierStream {
  BatchIterator batches;
  Rng jitter;
  Rng pairing;
};

inline std::vector<ClassifierStream> make_classifier_streams(
    const OsdaTask& task, std::size_t batch, std::span<const std::uint64_t> seeds) {
  std::vector<ClassifierStream> out;
  for (auto s : seeds)
    out.push_back({BatchIterator(task, batch, derive_seed(s, {0})), Rng(derive_seed(s, {1})),
                   Rng(derive_seed(s, {2}))});
  return out;
}

struct CmmcOptions {
  Lambda2Policy lambda2;
  bool freeze_features = true;
  bool jitter = true;
};

struct CmmcStepResult {
  std::vector<double> losses;      // per classifier, 0 when skipped
  std::vector<std::size_t> pairs;  // per classifier
  PairingStats stats;

  double total_loss() const {
    double t = 0;
    for (double l : losses) t += l;
    return t;
  }
  std::size_t total_pairs() const {
    std::size_t t = 0;
    for (auto p : pairs) t += p;
    return t;
  }
};

/// One CMMC update. Each classifier draws its own batches, pairs gated
/// targets with same-label sources and descends its mixup loss; only the
/// GM heads that produced at least one pair are updated.
inline CmmcStepResult cmmc_step(ModelBundle& b, const OsdaTask& task,
                                std::vector<ClassifierStream>& streams, double h, double lr,
                                const SgdConfig& sgd, const CmmcOptions& opt = {}) {
  const std::size_t m = b.num_gm();
  detail::require(streams.size() == m, "cmmc_step: one stream per classifier required");
  CmmcStepResult res;
  res.losses.assign(m, 0.0);
  res.pairs.assign(m, 0);

  Tensor total = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < m; ++k) {
    BatchPair batch = streams[k].batches.next();
    std::vector<int> pseudo;
    std::vector<double> omega;
    {
      NoGradGuard ng;
      Tensor zt = b.f.forward(task.target.gather(batch.target));
      pseudo = pseudo_labels(gc_probs(b, zt));
      for (const auto& s : commonness_scores_from_features(b, zt)) omega.push_back(s.omega);
    }
    auto ys = task.source.gather_labels(batch.source);
    auto pairs = build_mixup_pairs(batch.source, ys, batch.target, pseudo, omega, h, opt.lambda2,
                                   streams[k].pairing, &res.stats);
    res.pairs[k] = pairs.size();
    if (pairs.empty()) continue;
    Tensor loss = cmmc_loss(b, task, pairs, k, opt.freeze_features,
                            opt.jitter ? &streams[k].jitter : nullptr);
    res.losses[k] = loss.item();
    total = add(total, loss);
  }
  if (!std::isfinite(total.item())) throw NumericError("cmmc_step: non-finite loss");
  if (res.total_pairs() == 0) return res;

  total.backward();
  for (std::size_t k = 0; k < m; ++k) {
    auto params = b.gm[k].parameters();
    if (res.pairs[k] == 0) {
      for (auto& p : params) p.zero_grad();
      continue;
    }
    sgd_update(params, b.gm_states[k], lr, sgd);
  }
  if (!opt.freeze_features) {
    auto fp = b.f.parameters();
    sgd_update(fp, b.f_state, lr, sgd);
  } else {
    for (auto& p : b.f.parameters()) p.zero_grad();
  }
  return res;
}

}  // namespace splos
