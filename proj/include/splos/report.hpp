#pragma once

#include <cmath>
#include <optional>
#include <ostream>
#include <string>

#include "splos/data.hpp"
#include "splos/metrics.hpp"
#include "splos/trainer.hpp"

// Plain-text run artifacts: JSON Lines training log and audit CSV. Reals are
// written with 17 significant digits so they re-parse to the same double.
namespace splos {

namespace detail {

inline std::string json_real(double v) {
  if (!std::isfinite(v)) return "null";
  return format_real(v);
}

inline std::string metrics_json(const Metrics& m) {
  return "{\"os\":" + json_real(m.os) + ",\"os_star\":" + json_real(m.os_star) +
         ",\"unk\":" + json_real(m.unk) + ",\"h_score\":" + json_real(m.h_score) + "}";
}

}  // namespace detail

inline void write_epoch_record(std::ostream& os, const EpochLog& e) {
  os << "{\"epoch\":" << e.epoch << ",\"h\":" << detail::json_real(e.h)
     << ",\"threshold_pairs\":" << e.threshold_pairs
     << ",\"lambda1\":" << detail::json_real(e.lambda1)
     << ",\"loss_source_ce\":" << detail::json_real(e.loss_source_ce)
     << ",\"loss_source_bce\":" << detail::json_real(e.loss_source_bce)
     << ",\"loss_adv\":" << detail::json_real(e.loss_adv)
     << ",\"loss_aux_disc\":" << detail::json_real(e.loss_aux_disc)
     << ",\"loss_cmmc\":" << detail::json_real(e.loss_cmmc) << ",\"mixup_pairs\":" << e.mixup_pairs
     << ",\"beta_fallbacks\":" << e.beta_fallbacks << ",\"metrics\":"
     << (e.metrics ? detail::metrics_json(*e.metrics) : std::string("null"))
     << ",\"eval_h\":" << detail::json_real(e.eval_h) << "}\n";
}

struct RunSummary {
  std::size_t epochs = 0;
  double final_h = 1.0;  // last training-phase threshold (1 when no epoch ran)
  std::optional<Metrics> metrics;
  double eval_h = 0;
  bool manual_h = false;
  std::string decision_rule;
};

inline void write_summary_record(std::ostream& os, const RunSummary& s) {
  os << "{\"summary\":true,\"epochs\":" << s.epochs << ",\"final_h\":" << detail::json_real(s.final_h)
     << ",\"metrics\":" << (s.metrics ? detail::metrics_json(*s.metrics) : std::string("null"));
  if (s.metrics) {
    os << ",\"os\":" << detail::json_real(s.metrics->os)
       << ",\"h_score\":" << detail::json_real(s.metrics->h_score);
  }
  os << ",\"eval_h\":" << detail::json_real(s.eval_h)
     << ",\"manual_h\":" << (s.manual_h ? "true" : "false") << ",\"decision_rule\":\""
     << s.decision_rule << "\"}\n";
}

inline void write_train_log(std::ostream& os, const TrainLog& log) {
  for (const auto& e : log.epochs) write_epoch_record(os, e);
}

inline void write_audit_csv(std::ostream& os, const TrainLog& log) {
  os << "epoch,target_index,omega_ent,omega_cons,omega_conf,omega_t,pseudo_label,gated,lambda2\n";
  for (const auto& r : log.audit) {
    os << r.epoch << ',' << r.target_index << ',' << format_real(r.scores.entropy) << ','
       << format_real(r.scores.consistency) << ',' << format_real(r.scores.confidence) << ','
       << format_real(r.scores.omega) << ',' << r.pseudo_label << ',' << (r.gated ? 1 : 0) << ',';
    if (r.gated) os << format_real(r.lambda2);
    os << '\n';
  }
}

}  // namespace splos
