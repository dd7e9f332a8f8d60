#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "splos/data.hpp"
#include "splos/errors.hpp"

namespace splos {

/// Prediction value for "unknown class".
inline constexpr int kUnknownPrediction = -1;

struct Metrics {
  double os = 0;       // mean per-class accuracy over common classes + unknown
  double os_star = 0;  // mean per-class accuracy over common classes
  double unk = 0;      // unknown-class accuracy
  double h_score = 0;  // harmonic mean of os_star and unk
};

inline double h_score(double os_star, double unk) {
  double s = os_star + unk;
  return s > 0 ? 2.0 * os_star * unk / s : 0.0;
}

/// Scores predictions against ground truth. Truth labels >= num_common are
/// collapsed into the unknown class; kUnlabeled rows are ignored. Classes
/// without any labeled sample are left out of the averages (an absent
/// unknown class yields unk = 0).
inline Metrics compute_metrics(std::span<const int> truth, std::span<const int> predicted,
                               std::size_t num_common) {
  detail::require(truth.size() == predicted.size(), "compute_metrics: length mismatch");
  const std::size_t unknown = num_common;
  std::vector<std::size_t> total(num_common + 1, 0), correct(num_common + 1, 0);
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == kUnlabeled) continue;
    ++labeled;
    std::size_t cls = truth[i] >= static_cast<int>(num_common) ? unknown
                                                               : static_cast<std::size_t>(truth[i]);
    std::size_t pred = predicted[i] == kUnknownPrediction ? unknown
                                                          : static_cast<std::size_t>(predicted[i]);
    ++total[cls];
    if (pred == cls) ++correct[cls];
  }
  if (labeled == 0) throw ContractError("compute_metrics: no labeled target samples");

  Metrics m;
  double common_sum = 0;
  std::size_t common_present = 0;
  for (std::size_t c = 0; c < num_common; ++c) {
    if (total[c] == 0) continue;
    common_sum += static_cast<double>(correct[c]) / static_cast<double>(total[c]);
    ++common_present;
  }
  const bool has_unknown = total[unknown] > 0;
  m.unk = has_unknown ? static_cast<double>(correct[unknown]) / static_cast<double>(total[unknown])
                      : 0.0;
  m.os_star = common_present ? common_sum / static_cast<double>(common_present) : 0.0;
  const std::size_t classes = common_present + (has_unknown ? 1 : 0);
  m.os = (common_sum + (has_unknown ? m.unk : 0.0)) / static_cast<double>(classes);
  m.h_score = h_score(m.os_star, m.unk);
  return m;
}

}  // namespace splos
