#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "splos/data.hpp"
#include "splos/networks.hpp"
#include "splos/ops.hpp"
#include "splos/optim.hpp"

// Dual multi-class classifier (G^C + G^aux) losses and the alternating
// adversarial update.
namespace splos {

inline constexpr double kProbClamp = 1e-7;

struct DmcOptions {
  double grl_coeff = 1.0;
  bool reverse_gradient = true;   // false only for sign tests
  bool adv_source_term = true;    // second (source) term of the weighted adversarial loss
  bool attached_weights = false;  // let gradients flow through P_common
  bool use_gaux = true;           // false: P_common = P1
  double adv_weight = 1.0;
  double aux_weight = 1.0;
};

/// Mean cross-entropy -log softmax(logits)[y]. Labels must lie in
/// [0, num_valid) where num_valid defaults to the number of logit columns.
inline Tensor source_ce_loss(const Tensor& logits, std::span<const int> labels,
                             std::size_t num_valid = 0) {
  detail::require(logits.rank() == 2 && logits.rows() > 0, "source_ce_loss: empty batch");
  if (num_valid == 0) num_valid = logits.cols();
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_valid)
      throw ContractError("source_ce_loss: label " + std::to_string(y) + " out of range [0, " +
                          std::to_string(num_valid) + ")");
  }
  return scale(mean(pick(log_softmax_rows(logits), labels)), -1.0);
}

/// Mean over rows of -sum_c [y_c ln p_c + (1 - y_c) ln(1 - p_c)] with one-hot y.
inline Tensor source_bce_loss(const Tensor& probs, std::span<const int> labels) {
  detail::require(probs.rank() == 2 && probs.rows() > 0, "source_bce_loss: empty batch");
  detail::require(labels.size() == probs.rows(), "source_bce_loss: label count mismatch");
  const std::size_t n = probs.rows(), c = probs.cols();
  std::vector<double> onehot(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ContractError("source_bce_loss: label " + std::to_string(labels[i]) +
                          " out of range [0, " + std::to_string(c) + ")");
    onehot[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Tensor y = Tensor::matrix(n, c, onehot);
  Tensor p = clamp(probs, kProbClamp, 1.0 - kProbClamp);
  Tensor ll = add(mul(y, log(p)), mul(one_minus(y), log(one_minus(p))));
  return scale(sum(ll), -1.0 / static_cast<double>(n));
}

/// -(ln p + ln(1 - p)) elementwise, with p clamped away from {0, 1}.
inline Tensor unknown_boundary_term(const Tensor& p_unknown) {
  Tensor p = clamp(p_unknown, kProbClamp, 1.0 - kProbClamp);
  return scale(add(log(p), log(one_minus(p))), -1.0);
}

/// Weighted adversarial loss on the unknown-class probability:
///   mean_t[w_t * b(p_t)] + mean_s[w_s * b(p_s)],  b(p) = -(ln p + ln(1-p))
/// where w_t = P_common(x^t) and w_s = 1 - P_common(x^s) are supplied by the
/// caller (detached or not). The source term is skipped when
/// `include_source` is false.
inline Tensor adversarial_loss(const Tensor& p_unknown_target, const Tensor& weight_target,
                               const Tensor& p_unknown_source, const Tensor& weight_source,
                               bool include_source = true) {
  detail::require(p_unknown_target.size() > 0, "adversarial_loss: empty target batch");
  detail::require(p_unknown_source.size() > 0, "adversarial_loss: empty source batch");
  Tensor loss = mean(mul(weight_target, unknown_boundary_term(p_unknown_target)));
  if (include_source)
    loss = add(loss, mean(mul(weight_source, unknown_boundary_term(p_unknown_source))));
  return loss;
}

/// ||P_target||_* - ||P_source||_* over G^aux probability matrices.
inline Tensor aux_discrepancy_loss(const Tensor& gaux_target, const Tensor& gaux_source) {
  detail::require(gaux_target.rank() == 2 && gaux_target.rows() > 0,
                  "aux_discrepancy_loss: empty target batch");
  detail::require(gaux_source.rank() == 2 && gaux_source.rows() > 0,
                  "aux_discrepancy_loss: empty source batch");
  return sub(nuclear_norm(gaux_target), nuclear_norm(gaux_source));
}

/// The four DMC losses as live graph nodes.
struct DmcLosses {
  Tensor source_ce;
  Tensor source_bce;
  Tensor adv;
  Tensor aux_disc;
};

/// Builds all DMC losses for one source/target batch.
///
/// Graph routing:
///  - source CE: F and G^C.
///  - source BCE and the nuclear-norm discrepancy: G^aux only (features are
///    stop-gradient'ed).
///  - adversarial term: G^C descends; F receives the reversed gradient via a
///    gradient-reversal node. P_common weights are detached unless
///    `attached_weights` is set.
inline DmcLosses build_dmc_losses(const ModelBundle& b, const Tensor& xs,
                                  std::span<const int> ys, const Tensor& xt,
                                  const DmcOptions& opt = {}) {
  detail::require(xs.rows() > 0, "dmc: empty source batch");
  detail::require(xt.rows() > 0, "dmc: empty target batch");
  const std::size_t c = b.num_classes();

  Tensor zs = b.f.forward(xs);
  Tensor zt = b.f.forward(xt);
  Tensor gc_s_logits = b.gc.logits(zs);

  DmcLosses out;
  out.source_ce = source_ce_loss(gc_s_logits, ys, c);

  Tensor gaux_s = gaux_probs(b, stop_gradient(zs));
  Tensor gaux_t = gaux_probs(b, stop_gradient(zt));
  out.source_bce = source_bce_loss(gaux_s, ys);
  out.aux_disc = aux_discrepancy_loss(gaux_t, gaux_s);

  Tensor w_t = p_common(softmax_rows(b.gc.logits(zt)), gaux_t, opt.use_gaux);
  Tensor w_s = one_minus(p_common(softmax_rows(gc_s_logits), gaux_s, opt.use_gaux));
  if (!opt.attached_weights) {
    w_t = stop_gradient(w_t);
    w_s = stop_gradient(w_s);
  }

  auto route = [&](const Tensor& z) {
    return opt.reverse_gradient ? gradient_reversal(z, opt.grl_coeff) : z;
  };
  Tensor pu_t = column(gc_probs(b, route(zt)), c);
  Tensor pu_s = column(gc_probs(b, route(zs)), c);
  out.adv = adversarial_loss(pu_t, w_t, pu_s, w_s, opt.adv_source_term);
  return out;
}

struct DmcBatchLoss {
  double source_ce = 0;
  double source_bce = 0;
  double adv = 0;
  double aux_disc = 0;
};

/// One DMC update of F, G^C and G^aux on the given batch.
inline DmcBatchLoss dmc_step(ModelBundle& b, const OsdaTask& task, const BatchPair& batch,
                             double lr, const SgdConfig& sgd, const DmcOptions& opt = {}) {
  Tensor xs = task.source.gather(batch.source);
  Tensor xt = task.target.gather(batch.target);
  auto ys = task.source.gather_labels(batch.source);
  DmcLosses l = build_dmc_losses(b, xs, ys, xt, opt);
  Tensor total = add(add(l.source_ce, l.source_bce),
                     add(scale(l.adv, opt.adv_weight), scale(l.aux_disc, opt.aux_weight)));
  if (!std::isfinite(total.item())) throw NumericError("dmc_step: non-finite loss");
  total.backward();

  auto fp = b.f.parameters();
  auto gcp = b.gc.parameters();
  auto gap = b.gaux.parameters();
  sgd_update(fp, b.f_state, lr * sgd.feature_lr_scale, sgd);
  sgd_update(gcp, b.gc_state, lr, sgd);
  sgd_update(gap, b.gaux_state, lr, sgd);
  // GM heads are not part of this graph; clear anything stray anyway.
  for (auto& h : b.gm)
    for (auto& t : h.parameters()) t.zero_grad();
  return {l.source_ce.item(), l.source_bce.item(), l.adv.item(), l.aux_disc.item()};
}

}  // namespace splos
