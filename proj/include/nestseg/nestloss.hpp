#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nestseg/error.hpp"
#include "nestseg/mlact.hpp"
#include "nestseg/volume.hpp"

namespace nestseg {

/// Power-law class weights w_c = (N_tot / N_c)^alpha.
struct ClassWeights {
  std::vector<double> weights;
  double alpha = 0.0;
  std::int64_t total_count = 0;
  std::vector<std::int64_t> per_class_counts;
  // Classes that had no voxels; their weight is 0.
  std::vector<bool> absent;

  int num_classes() const { return static_cast<int>(weights.size()); }
  double operator[](int c) const { return weights[static_cast<std::size_t>(c)]; }
};

inline ClassWeights class_weights_from_counts(std::span<const std::int64_t> counts,
                                              double alpha) {
  detail::require(!counts.empty(), "class_weights_from_counts: empty counts");
  ClassWeights cw;
  cw.alpha = alpha;
  cw.per_class_counts.assign(counts.begin(), counts.end());
  for (auto n : counts) {
    detail::require(n >= 0, "class_weights_from_counts: negative count");
    cw.total_count += n;
  }
  detail::require(cw.total_count > 0, "class_weights_from_counts: all counts are zero");
  for (auto n : counts) {
    const bool absent = n == 0;
    cw.absent.push_back(absent);
    cw.weights.push_back(
        absent ? 0.0
               : std::pow(static_cast<double>(cw.total_count) / static_cast<double>(n),
                          alpha));
  }
  return cw;
}

inline ClassWeights unit_weights(int num_classes) {
  ClassWeights cw;
  cw.weights.assign(static_cast<std::size_t>(num_classes), 1.0);
  cw.absent.assign(static_cast<std::size_t>(num_classes), false);
  cw.per_class_counts.assign(static_cast<std::size_t>(num_classes), 0);
  return cw;
}

enum class LossKind { MCE, NCE, SoftmaxCE };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::MCE: return "mce";
    case LossKind::NCE: return "nce";
    case LossKind::SoftmaxCE: return "softmax";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "mce") return LossKind::MCE;
  if (s == "nce") return LossKind::NCE;
  if (s == "softmax") return LossKind::SoftmaxCE;
  throw ConfigError("unknown loss kind '" + s + "' (expected mce, nce or softmax)");
}

struct LossConfig {
  LossKind kind = LossKind::MCE;
  double epsilon = 1e-12;  // floor inside every logarithm
  ClassWeights weights = unit_weights(4);

  void validate() const {
    detail::require(epsilon > 0.0 && epsilon <= 1e-3,
                    "LossConfig: epsilon must lie in (0, 1e-3]");
    detail::require(weights.num_classes() >= 2, "LossConfig: need >= 2 class weights");
  }
};

inline double softplus(double x) {
  // log1p(exp(x)) without overflow
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Piecewise boundaries belong to the left piece (a <= boundary).

/// Tent-shaped class probability of the activation a in [0, m]. For m = 3:
///   P0 = 1 - a/3
///   P1 = a            (a <= 1),  (3 - a)/2  (a > 1)
///   P2 = a/2          (a <= 2),  3 - a      (a > 2)
///   P3 = a/3
/// Interior classes of other m follow the same tent, peaking at a = c.
inline double mce_prob(int c, double a, int m = 3) {
  detail::require(m >= 1 && c >= 0 && c <= m, "mce_prob: class index out of range");
  if (c == 0) return 1.0 - a / m;
  if (c == m) return a / m;
  return a <= c ? a / c : (m - a) / (m - c);
}

/// Softplus-edged class mapping (four classes only). Q1's right piece
/// starts at a = 1 so that the pieces tile [0, 3].
inline double nce_prob(int c, double a) {
  switch (c) {
    case 0: return softplus(1.0 - a);
    case 1: return a <= 1.0 ? a : softplus(2.0 - a);
    case 2: return a <= 2.0 ? softplus(a - 1.0) : 3.0 - a;
    case 3: return softplus(a - 2.0);
    default: throw ConfigError("nce_prob: class index out of range");
  }
}

/// Which piece of the class mapping a falls on (0 = left, 1 = right).
/// Lets gradient checks detect a finite-difference stencil straddling a kink.
inline int mapping_piece(LossKind kind, int c, double a, int m = 3) {
  if (kind == LossKind::NCE) {
    if (c == 1) return a <= 1.0 ? 0 : 1;
    if (c == 2) return a <= 2.0 ? 0 : 1;
    return 0;
  }
  if (c == 0 || c == m) return 0;
  return a <= c ? 0 : 1;
}

inline double class_prob(LossKind kind, int c, double a, int m) {
  if (kind == LossKind::NCE) {
    detail::require(m == 3, "NCE mapping is defined for four classes only");
    return nce_prob(c, a);
  }
  detail::require(kind == LossKind::MCE, "class_prob: softmax has no activation mapping");
  return mce_prob(c, a, m);
}

/// Weighted negative-log term of one voxel.
inline double voxel_loss(LossKind kind, int label, double a, double weight,
                         double epsilon = 1e-12, int m = 3) {
  return -weight * std::log(std::max(class_prob(kind, label, a, m), epsilon));
}

/// d/da of voxel_loss. At a piece boundary the left piece's derivative is
/// returned. Where the floor is active the term is flat and the result is 0.
inline double loss_grad_wrt_activation(double a, int label, double weight,
                                       LossKind kind, int m = 3,
                                       double epsilon = 1e-12) {
  const double p = class_prob(kind, label, a, m);
  if (p <= epsilon) return 0.0;
  if (kind == LossKind::MCE) {
    // -d/da log(a/c) = -1/a ; -d/da log((m-a)/(m-c)) = 1/(m-a)
    const bool rising = label == m || (label != 0 && a <= label);
    return rising ? -weight / a : weight / (m - a);
  }
  // -d/da log s(u) = -s'(u) u' / s(u), s' = sigmoid
  auto dsoft = [&](double u, double du) { return -weight * sigmoid(u) * du / softplus(u); };
  switch (label) {
    case 0: return dsoft(1.0 - a, -1.0);
    case 1: return a <= 1.0 ? -weight / a : dsoft(2.0 - a, -1.0);
    case 2: return a <= 2.0 ? dsoft(a - 1.0, 1.0) : weight / (3.0 - a);
    case 3: return dsoft(a - 2.0, 1.0);
    default: throw ConfigError("loss_grad_wrt_activation: label out of range");
  }
}

namespace detail {

inline void check_labels(std::span<const std::uint8_t> labels, int m) {
  for (auto l : labels)
    require(l <= m, "label " + std::to_string(int(l)) + " exceeds m=" + std::to_string(m));
}

}  // namespace detail

/// Mean weighted loss over activations already on (0, m). When grad is
/// non-empty it receives d(loss)/d(activation) per voxel.
template <typename T>
double nested_loss(std::span<const T> activations, std::span<const std::uint8_t> labels,
                   const LossConfig& cfg, std::span<double> grad = {}) {
  cfg.validate();
  detail::require(cfg.kind != LossKind::SoftmaxCE, "nested_loss: softmax config");
  detail::require<ShapeError>(activations.size() == labels.size(),
                              "nested_loss: activations/labels size mismatch");
  detail::require<ShapeError>(grad.empty() || grad.size() == labels.size(),
                              "nested_loss: gradient buffer size mismatch");
  const int m = cfg.weights.num_classes() - 1;
  detail::check_labels(labels, m);
  const double n = static_cast<double>(labels.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double a = static_cast<double>(activations[i]);
    const double w = cfg.weights[labels[i]];
    sum += voxel_loss(cfg.kind, labels[i], a, w, cfg.epsilon, m);
    if (!grad.empty())
      grad[i] = loss_grad_wrt_activation(a, labels[i], w, cfg.kind, m, cfg.epsilon) / n;
  }
  return sum / n;
}

namespace detail {

inline void check_nested_args(const VolumeF& act, const LabelVolume& labels) {
  require<ShapeError>(act.channels() == 1, "loss: activations must have one channel");
  require<ShapeError>(act.shape() == labels.shape(),
                      "loss: shape mismatch " + to_string(act.shape()) + " vs " +
                          to_string(labels.shape()));
}

}  // namespace detail

inline double mce_loss(const VolumeF& activations, const LabelVolume& labels,
                       const LossConfig& cfg) {
  detail::require(cfg.kind == LossKind::MCE, "mce_loss: config kind is not MCE");
  detail::check_nested_args(activations, labels);
  return nested_loss<float>(activations.data(), labels.data(), cfg);
}

inline double nce_loss(const VolumeF& activations, const LabelVolume& labels,
                       const LossConfig& cfg) {
  detail::require(cfg.kind == LossKind::NCE, "nce_loss: config kind is not NCE");
  detail::check_nested_args(activations, labels);
  return nested_loss<float>(activations.data(), labels.data(), cfg);
}

/// Loss of the multi-level head taken directly on logits. grad, when
/// non-empty, receives d(loss)/d(logit) through the activation derivative.
template <typename T>
double multilevel_head_loss(std::span<const T> logits, std::span<const std::uint8_t> labels,
                            const LossConfig& cfg, const ActivationSpec& spec,
                            std::span<double> grad = {}) {
  detail::require(spec.num_classes == cfg.weights.num_classes(),
                  "multilevel_head_loss: activation/weight class count mismatch");
  std::vector<double> act(logits.size());
  activation_map<T, double>(logits, act, spec);
  const double loss = nested_loss<double>(act, labels, cfg, grad);
  if (!grad.empty())
    for (std::size_t i = 0; i < grad.size(); ++i)
      grad[i] *= multilevel_activation_grad(static_cast<double>(logits[i]), spec);
  return loss;
}

/// Weighted softmax cross-entropy over channel-major logits
/// (num_classes x voxels). grad, when non-empty, receives d(loss)/d(logit).
template <typename T>
double softmax_ce(std::span<const T> logits, std::span<const std::uint8_t> labels,
                  const ClassWeights& weights, double epsilon = 1e-12,
                  std::span<double> grad = {}) {
  const int nc = weights.num_classes();
  const std::size_t nvox = labels.size();
  detail::require<ShapeError>(logits.size() == nvox * static_cast<std::size_t>(nc),
                              "softmax_ce: logits must have num_classes channels");
  detail::require<ShapeError>(grad.empty() || grad.size() == logits.size(),
                              "softmax_ce: gradient buffer size mismatch");
  detail::check_labels(labels, nc - 1);
  const double log_floor = std::log(epsilon);
  std::vector<double> z(static_cast<std::size_t>(nc));
  double sum = 0.0;
  for (std::size_t i = 0; i < nvox; ++i) {
    double zmax = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < nc; ++c) {
      z[c] = static_cast<double>(logits[c * nvox + i]);
      zmax = std::max(zmax, z[c]);
    }
    double denom = 0.0;
    for (int c = 0; c < nc; ++c) denom += std::exp(z[c] - zmax);
    const double lse = zmax + std::log(denom);
    const int y = labels[i];
    const double w = weights[y];
    const double logp = z[y] - lse;
    sum += -w * std::max(logp, log_floor);
    if (!grad.empty()) {
      const bool floored = logp < log_floor;
      for (int c = 0; c < nc; ++c) {
        const double p = std::exp(z[c] - lse);
        grad[c * nvox + i] =
            floored ? 0.0 : w * (p - (c == y ? 1.0 : 0.0)) / static_cast<double>(nvox);
      }
    }
  }
  return sum / static_cast<double>(nvox);
}

inline double softmax_ce_loss(const VolumeF& logits, const LabelVolume& labels,
                              const ClassWeights& weights, double epsilon = 1e-12) {
  detail::require<ShapeError>(logits.channels() == weights.num_classes(),
                              "softmax_ce_loss: channel count != num_classes");
  detail::require<ShapeError>(logits.shape() == labels.shape(),
                              "softmax_ce_loss: shape mismatch");
  return softmax_ce<float>(logits.data(), labels.data(), weights, epsilon);
}

}  // namespace nestseg
