#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <vector>

#include "splos/data.hpp"
#include "splos/errors.hpp"
#include "splos/random.hpp"
#include "splos/tensor.hpp"

namespace splos {

struct ThresholdResult {
  double h = 1.0;
  std::size_t pairs = 0;
};

/// Self-tuned instructive threshold.
///
/// `gc_probs` holds one G^C probability row (|C^S|+1 columns, unknown last)
/// per target sample. Rows are shuffled with `seed` and split into
/// floor(N/2) disjoint pairs (a, b); each pair scores
///   sum_{c < |C^S|} lambda1 (a_c + b_c) * (1 - lambda1) (a_c + b_c)
/// and h = 1 - mean score, clamped to [0, 1].
inline ThresholdResult compute_threshold(const Tensor& gc_probs, double lambda1,
                                         std::uint64_t seed) {
  detail::require(gc_probs.rank() == 2 && gc_probs.cols() >= 2,
                  "compute_threshold: expected an [N x (|C^S|+1)] probability matrix");
  detail::require(gc_probs.rows() >= 2, "compute_threshold: at least 2 target samples required");
  detail::require(lambda1 >= 0.5 && lambda1 <= 1.0, "compute_threshold: lambda1 must be in [0.5, 1]");

  const std::size_t n = gc_probs.rows(), width = gc_probs.cols(), common = width - 1;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t pairs = n / 2;
  double total = 0;
  for (std::size_t p = 0; p < pairs; ++p) {
    const double* a = gc_probs.data().data() + order[2 * p] * width;
    const double* b = gc_probs.data().data() + order[2 * p + 1] * width;
    double score = 0;
    for (std::size_t c = 0; c < common; ++c) {
      double s = a[c] + b[c];
      score += (lambda1 * s) * ((1.0 - lambda1) * s);
    }
    total += score;
  }
  double h = 1.0 - total / static_cast<double>(pairs);
  return {std::clamp(h, 0.0, 1.0), pairs};
}

struct ThresholdEntry {
  std::size_t epoch = 0;
  double h = 1.0;
  std::size_t pairs = 0;
  double lambda1 = 0.5;
};

/// Per-epoch threshold trajectory.
struct ThresholdSchedule {
  std::vector<ThresholdEntry> entries;

  void write_csv(std::ostream& os) const {
    os << "epoch,h,pairs,lambda1\n";
    for (const auto& e : entries)
      os << e.epoch << ',' << format_real(e.h) << ',' << e.pairs << ',' << format_real(e.lambda1)
         << '\n';
  }
};

}  // namespace splos
