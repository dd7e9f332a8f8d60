#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "splos/ops.hpp"
#include "splos/random.hpp"
#include "splos/tensor.hpp"

namespace splos {

/// Fully connected layer y = x W + b, W is [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(Tensor::zeros({in, out}, true)), bias(Tensor::zeros({out}, true)) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& w : weight.mutable_data()) w = dist(rng);
  }

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  Tensor forward(const Tensor& x) const { return add_row_vector(matmul(x, weight), bias); }

  std::vector<Tensor> parameters() const { return {weight, bias}; }

  Linear clone() const {
    Linear l;
    l.weight = weight.clone();
    l.bias = bias.clone();
    return l;
  }
};

/// F: a ReLU perceptron, input -> hidden widths. The last width is the
/// feature dimension.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(std::size_t input_dim, const std::vector<std::size_t>& widths, Rng& rng) {
    detail::require(!widths.empty(), "FeatureExtractor: at least one layer width required");
    std::size_t in = input_dim;
    for (std::size_t w : widths) {
      layers_.emplace_back(in, w, rng);
      in = w;
    }
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (const auto& l : layers_) h = relu(l.forward(h));
    return h;
  }

  std::size_t input_dim() const { return layers_.front().in_features(); }
  std::size_t feature_dim() const { return layers_.back().out_features(); }
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w;
    for (const auto& l : layers_) w.push_back(l.out_features());
    return w;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    for (const auto& l : layers_)
      for (auto& t : l.parameters()) p.push_back(t);
    return p;
  }

  FeatureExtractor clone() const {
    FeatureExtractor f;
    for (const auto& l : layers_) f.layers_.push_back(l.clone());
    return f;
  }

 private:
  std::vector<Linear> layers_;
};

enum class HeadKind { GC, GAUX, GM };

inline const char* head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::GC: return "GC";
    case HeadKind::GAUX: return "GAUX";
    case HeadKind::GM: return "GM";
  }
  return "?";
}

/// Single linear classifier over features. GC emits |C^S|+1 logits, GAUX and
/// GM emit |C^S|.
struct ClassifierHead {
  HeadKind kind = HeadKind::GM;
  Linear linear;
  std::size_t index = 0;          // GM only: 0-based classifier index
  std::uint64_t jitter_seed = 0;  // GM only
  double jitter_sigma = 0.0;      // GM only

  Tensor logits(const Tensor& z) const { return linear.forward(z); }
  std::size_t output_dim() const { return linear.out_features(); }
  std::vector<Tensor> parameters() const { return linear.parameters(); }

  ClassifierHead clone() const {
    ClassifierHead h = *this;
    h.linear = linear.clone();
    return h;
  }
};

/// Jitter scale of GM head k (0-based) out of m: 0.05 * k / (m - 1).
inline double gm_jitter_sigma(std::size_t k, std::size_t m) {
  return m < 2 ? 0.0 : 0.05 * static_cast<double>(k) / static_cast<double>(m - 1);
}

/// Velocity buffers for one parameter group.
struct SgdState {
  std::vector<std::vector<double>> velocity;
};

struct ModelConfig {
  std::size_t input_dim = 4;
  std::size_t num_classes = 3;  // |C^S|
  std::size_t num_gm = 5;       // m
  std::vector<std::size_t> widths{64, 32};
};

/// All networks of one run plus per-group optimizer state.
struct ModelBundle {
  ModelConfig config;
  FeatureExtractor f;
  ClassifierHead gc;
  ClassifierHead gaux;
  std::vector<ClassifierHead> gm;

  SgdState f_state;
  SgdState gc_state;
  SgdState gaux_state;
  std::vector<SgdState> gm_states;

  std::size_t num_classes() const { return config.num_classes; }
  std::size_t num_gm() const { return gm.size(); }

  ModelBundle clone() const {
    ModelBundle b;
    b.config = config;
    b.f = f.clone();
    b.gc = gc.clone();
    b.gaux = gaux.clone();
    for (const auto& h : gm) b.gm.push_back(h.clone());
    b.f_state = f_state;
    b.gc_state = gc_state;
    b.gaux_state = gaux_state;
    b.gm_states = gm_states;
    return b;
  }

  /// Parameters in declaration order: F, GC, GAUX, GM_1..GM_m.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p = f.parameters();
    for (auto& t : gc.parameters()) p.push_back(t);
    for (auto& t : gaux.parameters()) p.push_back(t);
    for (const auto& h : gm)
      for (auto& t : h.parameters()) p.push_back(t);
    return p;
  }

  void zero_grad() {
    for (auto& t : parameters()) t.zero_grad();
  }
};

inline ModelBundle make_bundle(const ModelConfig& cfg, std::uint64_t seed) {
  detail::require(cfg.num_gm >= 2, "ModelBundle: m >= 2 classifiers required");
  detail::require(cfg.num_classes >= 2, "ModelBundle: at least 2 source classes required");
  detail::require(cfg.input_dim >= 1, "ModelBundle: input dimension must be positive");
  Rng rng = make_rng(seed, {kInitStream});
  ModelBundle b;
  b.config = cfg;
  b.f = FeatureExtractor(cfg.input_dim, cfg.widths, rng);
  const std::size_t fd = b.f.feature_dim();
  b.gc.kind = HeadKind::GC;
  b.gc.linear = Linear(fd, cfg.num_classes + 1, rng);
  b.gaux.kind = HeadKind::GAUX;
  b.gaux.linear = Linear(fd, cfg.num_classes, rng);
  for (std::size_t k = 0; k < cfg.num_gm; ++k) {
    ClassifierHead h;
    h.kind = HeadKind::GM;
    h.linear = Linear(fd, cfg.num_classes, rng);
    h.index = k;
    h.jitter_seed = derive_seed(seed, {kJitterStream, k});
    h.jitter_sigma = gm_jitter_sigma(k, cfg.num_gm);
    b.gm.push_back(std::move(h));
  }
  b.gm_states.resize(cfg.num_gm);
  return b;
}

/// |C^S|+1 softmax of G^C; the last column is the unknown-class probability.
inline Tensor gc_probs(const ModelBundle& b, const Tensor& z) {
  return softmax_rows(b.gc.logits(z));
}

/// Leaky softmax of G^aux over |C^S| logits.
inline Tensor gaux_probs(const ModelBundle& b, const Tensor& z) {
  return leaky_softmax_rows(b.gaux.logits(z));
}

/// Softmax of G^{M_k} over |C^S| logits; k is 0-based.
inline Tensor gm_probs(const ModelBundle& b, const Tensor& z, std::size_t k) {
  if (k >= b.gm.size()) {
    throw ContractError("gm_probs: classifier index " + std::to_string(k) + " out of range [0, " +
                        std::to_string(b.gm.size()) + ")");
  }
  return softmax_rows(b.gm[k].logits(z));
}

/// P_common = P1 * P2 per row, where P1 is the common-class mass of G^C and
/// P2 the total mass of G^aux. With `use_gaux` false, P2 is taken as 1.
inline Tensor p_common(const Tensor& gc_p, const Tensor& gaux_p, bool use_gaux = true) {
  const std::size_t c = gc_p.cols() - 1;
  Tensor p1 = row_sum(slice_cols(gc_p, 0, c));
  if (!use_gaux) return p1;
  return mul(p1, row_sum(gaux_p));
}

/// P_common for raw inputs, without recording a graph.
inline std::vector<double> p_common(const ModelBundle& b, const Tensor& x, bool use_gaux = true) {
  NoGradGuard ng;
  Tensor z = b.f.forward(x);
  Tensor pc = p_common(gc_probs(b, z), gaux_probs(b, z), use_gaux);
  return {pc.data().begin(), pc.data().end()};
}

}  // namespace splos
