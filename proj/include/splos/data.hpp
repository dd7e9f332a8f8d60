#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "splos/errors.hpp"
#include "splos/random.hpp"
#include "splos/tensor.hpp"

namespace splos {

inline constexpr int kUnlabeled = -1;

/// Row-major feature matrix with one integer label per row (0-based;
/// kUnlabeled for unlabeled target rows).
struct Dataset {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

  Tensor gather(std::span<const std::size_t> idx) const {
    std::vector<double> out;
    out.reserve(idx.size() * dim);
    for (auto i : idx) {
      auto r = row(i);
      out.insert(out.end(), r.begin(), r.end());
    }
    return Tensor::matrix(idx.size(), dim, std::move(out));
  }

  Tensor all() const { return Tensor::matrix(size(), dim, features); }

  std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }
};

/// An open-set adaptation problem. Source classes are 0..|C^S|-1; target
/// ground-truth labels >= |C^S| are target-private ("unknown").
struct OsdaTask {
  Dataset source;
  Dataset target;
  std::size_t num_source_classes = 0;
  std::size_t num_target_classes = 0;

  double openness() const {
    return 1.0 - static_cast<double>(num_source_classes) / static_cast<double>(num_target_classes);
  }
  std::size_t dim() const { return source.dim; }
  bool target_has_labels() const {
    return std::any_of(target.labels.begin(), target.labels.end(),
                       [](int l) { return l != kUnlabeled; });
  }
};

struct SynthConfig {
  std::size_t dim = 4;
  std::size_t samples_per_class = 60;
  double sigma = 0.2;             // per-dimension cluster spread
  double spacing = 1.2;           // distance between neighbouring centres on the circle
  double rotation_deg = 10.0;     // target rotation in the first two dims
  double translation = 0.5;       // target shift per circle dim, in units of sigma
  double noise_translation = 0.5; // target shift per remaining dim, in units of sigma
  double spread_multiplier = 1.2; // target spread relative to source
  std::uint64_t seed = 0;
};

/// Whether circle position p (of `total`) holds a common class. Spreads the
/// `common` positions evenly so private clusters sit between common ones.
inline bool is_common_position(std::size_t p, std::size_t common, std::size_t total) {
  return (p + 1) * common / total > p * common / total;
}

inline OsdaTask generate_task(const SynthConfig& cfg, std::size_t num_source_classes,
                              std::size_t num_target_classes) {
  detail::require(num_source_classes >= 1 && num_source_classes < num_target_classes,
                  "open-set adaptation requires 1 <= |C^S| < |C^T| (got " +
                      std::to_string(num_source_classes) + " and " +
                      std::to_string(num_target_classes) + ")");
  detail::require(cfg.dim >= 2, "SynthConfig: dim must be >= 2");
  detail::require(cfg.samples_per_class >= 8, "SynthConfig: samples_per_class must be >= 8");
  detail::require(cfg.sigma > 0 && cfg.spacing > 0 && cfg.spread_multiplier > 0,
                  "SynthConfig: sigma, spacing and spread multiplier must be positive");

  const std::size_t K = num_target_classes;
  const double pi = std::acos(-1.0);
  const double radius = cfg.spacing / (2.0 * std::sin(pi / static_cast<double>(K)));

  // Class id -> centre angle. Common ids follow circle order, then private ids.
  std::vector<double> angle(K);
  std::size_t next_common = 0, next_private = num_source_classes;
  for (std::size_t p = 0; p < K; ++p) {
    std::size_t cls = is_common_position(p, num_source_classes, K) ? next_common++ : next_private++;
    angle[cls] = 2.0 * pi * static_cast<double>(p) / static_cast<double>(K);
  }

  Rng rng = make_rng(cfg.seed, {kDataStream});
  std::normal_distribution<double> noise(0.0, 1.0);
  const double rot = cfg.rotation_deg * pi / 180.0;
  const double cr = std::cos(rot), sr = std::sin(rot);

  OsdaTask task;
  task.num_source_classes = num_source_classes;
  task.num_target_classes = num_target_classes;
  task.source.dim = task.target.dim = cfg.dim;

  auto draw = [&](Dataset& ds, std::size_t cls, bool shifted) {
    const double spread = cfg.sigma * (shifted ? cfg.spread_multiplier : 1.0);
    std::vector<double> x(cfg.dim, 0.0);
    x[0] = radius * std::cos(angle[cls]);
    x[1] = radius * std::sin(angle[cls]);
    for (auto& v : x) v += spread * noise(rng);
    if (shifted) {
      double a = x[0], b = x[1];
      x[0] = cr * a - sr * b;
      x[1] = sr * a + cr * b;
      for (std::size_t j = 0; j < x.size(); ++j)
        x[j] += (j < 2 ? cfg.translation : cfg.noise_translation) * cfg.sigma;
    }
    ds.features.insert(ds.features.end(), x.begin(), x.end());
    ds.labels.push_back(static_cast<int>(cls));
  };

  for (std::size_t c = 0; c < num_source_classes; ++c)
    for (std::size_t i = 0; i < cfg.samples_per_class; ++i) draw(task.source, c, false);
  for (std::size_t c = 0; c < K; ++c)
    for (std::size_t i = 0; i < cfg.samples_per_class; ++i) draw(task.target, c, true);
  return task;
}

// Feature table CSV: header `split,label,f1..fd`, one row per sample.

inline std::string format_real(double v) { return fmt::format("{:.17g}", v); }

inline void write_feature_table(std::ostream& os, const OsdaTask& task) {
  os << "split,label";
  for (std::size_t j = 0; j < task.dim(); ++j) os << ",f" << (j + 1);
  os << '\n';
  auto emit = [&](const Dataset& ds, const char* split) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      os << split << ',' << ds.labels[i];
      for (double v : ds.row(i)) os << ',' << format_real(v);
      os << '\n';
    }
  };
  emit(task.source, "source");
  emit(task.target, "target");
}

inline void save_feature_table(const std::string& path, const OsdaTask& task) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_feature_table(os, task);
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && !s.empty();
}

}  // namespace detail

/// Parses a feature table. |C^S| is one past the largest source label;
/// |C^T| is one past the largest labeled target (at least |C^S| + 1 when no
/// target-private label is observed, so openness stays positive).
inline OsdaTask read_feature_table(std::istream& is) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) throw ParseError("empty feature table", 0);
  ++lineno;
  auto header = detail::split_csv(detail::trim(line));
  if (header.size() < 3 || detail::trim(header[0]) != "split" || detail::trim(header[1]) != "label")
    throw ParseError("header must be 'split,label,f1..fd'", lineno);
  const std::size_t dim = header.size() - 2;

  OsdaTask task;
  task.source.dim = task.target.dim = dim;
  while (std::getline(is, line)) {
    ++lineno;
    auto trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    auto cells = detail::split_csv(trimmed);
    if (cells.size() != dim + 2)
      throw ParseError(fmt::format("expected {} columns, found {}", dim + 2, cells.size()), lineno);
    auto split = detail::trim(cells[0]);
    Dataset* ds = nullptr;
    if (split == "source") ds = &task.source;
    else if (split == "target") ds = &task.target;
    else throw ParseError("split must be 'source' or 'target', got '" + std::string(split) + "'", lineno);
    int label = 0;
    if (!detail::parse_number(cells[1], label))
      throw ParseError("non-integer label '" + std::string(cells[1]) + "'", lineno);
    if (ds == &task.source && label < 0)
      throw ParseError("source rows need a label >= 0", lineno);
    if (ds == &task.target && label < kUnlabeled)
      throw ParseError("target label must be >= -1", lineno);
    for (std::size_t j = 0; j < dim; ++j) {
      double v = 0;
      if (!detail::parse_number(cells[j + 2], v) || !std::isfinite(v))
        throw ParseError("non-numeric feature '" + std::string(cells[j + 2]) + "' in column " +
                             std::to_string(j + 3),
                         lineno);
      ds->features.push_back(v);
    }
    ds->labels.push_back(label);
  }
  if (task.source.size() == 0) throw ParseError("no source rows", 0);
  if (task.target.size() == 0) throw ParseError("no target rows", 0);

  int max_src = *std::max_element(task.source.labels.begin(), task.source.labels.end());
  int max_tgt = *std::max_element(task.target.labels.begin(), task.target.labels.end());
  task.num_source_classes = static_cast<std::size_t>(max_src) + 1;
  task.num_target_classes =
      std::max<std::size_t>(task.num_source_classes + 1, static_cast<std::size_t>(std::max(max_tgt, 0)) + 1);
  return task;
}

inline OsdaTask load_feature_table(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open feature table '" + path + "'");
  return read_feature_table(is);
}

/// Endless shuffled index batches over one domain with drop-last epochs.
/// When the batch is larger than the domain, batches wrap across reshuffles.
class DomainSampler {
 public:
  DomainSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(batch), rng_(seed) {
    detail::require(n >= 1, "DomainSampler: empty domain");
    detail::require(batch >= 2, "DomainSampler: batch size must be >= 2");
    perm_.resize(n);
    reshuffle();
  }

  bool wraps() const { return batch_ > n_; }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    if (wraps()) {
      while (out.size() < batch_) {
        if (pos_ == n_) reshuffle();
        out.push_back(perm_[pos_++]);
      }
      return out;
    }
    if (pos_ + batch_ > n_) reshuffle();
    out.assign(perm_.begin() + static_cast<std::ptrdiff_t>(pos_),
               perm_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

  std::size_t batches_per_epoch() const { return wraps() ? 1 : n_ / batch_; }

 private:
  void reshuffle() {
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    std::shuffle(perm_.begin(), perm_.end(), rng_);
    pos_ = 0;
  }

  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> perm_;
  std::size_t pos_ = 0;
};

struct BatchPair {
  std::vector<std::size_t> source;
  std::vector<std::size_t> target;
};

/// Paired source/target batches; each domain reshuffles independently.
class BatchIterator {
 public:
  BatchIterator(const OsdaTask& task, std::size_t batch, std::uint64_t seed)
      : source_(task.source.size(), batch, derive_seed(seed, {0})),
        target_(task.target.size(), batch, derive_seed(seed, {1})) {
    if (source_.wraps() || target_.wraps()) {
      std::cerr << "warning: batch size " << batch
                << " exceeds a domain size; batches wrap with repetition\n";
    }
  }

  BatchPair next() { return {source_.next(), target_.next()}; }
  std::vector<std::size_t> next_source() { return source_.next(); }

 private:
  DomainSampler source_;
  DomainSampler target_;
};

}  // namespace splos
