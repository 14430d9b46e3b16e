#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "nestseg/error.hpp"
#include "nestseg/volume.hpp"

namespace nestseg {

/// Multi-level activation: a sum of m shifted sigmoids that maps one scalar
/// logit onto (0, m), one step per boundary between nested classes.
///
///   a(x) = sum_{n=1..m} sigmoid(k * (x + h * (n - (m+1)/2)))
///
/// The offsets h*(n - (m+1)/2) are symmetric about zero, so a(0) = m/2 and
/// a(-x) = m - a(x).
struct ActivationSpec {
  int num_classes = 4;  // m + 1
  double spacing = 0.5;     // h
  double steepness = 10.0;  // k

  int levels() const { return num_classes - 1; }

  double offset(int n) const {
    return spacing * (n - 0.5 * (levels() + 1));
  }

  void validate() const {
    detail::require(num_classes >= 2, "ActivationSpec: num_classes must be >= 2");
    detail::require(spacing > 0.0, "ActivationSpec: spacing must be > 0");
    detail::require(steepness > 0.0, "ActivationSpec: steepness must be > 0");
  }

  friend bool operator==(const ActivationSpec&, const ActivationSpec&) = default;
};

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double multilevel_activation(double x, const ActivationSpec& spec) {
  const int m = spec.levels();
  if (x < 0.0) {
    // plain sum keeps full relative precision as a approaches 0
    double a = 0.0;
    for (int n = 1; n <= m; ++n) a += sigmoid(spec.steepness * (x + spec.offset(n)));
    return a;
  }
  // sigmoid(u) = (1 + tanh(u/2)) / 2; mirrored offsets are summed pairwise so
  // the odd parts cancel exactly and a(0) = m/2 holds bit-for-bit.
  auto t = [&](int n) { return std::tanh(0.5 * spec.steepness * (x + spec.offset(n))); };
  double s = 0.0;
  for (int n = 1; n <= m / 2; ++n) s += t(n) + t(m + 1 - n);
  if (m % 2 == 1) s += t((m + 1) / 2);
  return 0.5 * m + 0.5 * s;
}

inline double multilevel_activation_grad(double x, const ActivationSpec& spec) {
  double g = 0.0;
  for (int n = 1; n <= spec.levels(); ++n) {
    // s * (1 - s) without cancelling when s rounds to 1
    const double u = spec.steepness * (x + spec.offset(n));
    g += spec.steepness * sigmoid(u) * sigmoid(-u);
  }
  return g;
}

/// Elementwise activation over a flat buffer of logits.
template <typename In, typename Out>
void activation_map(std::span<const In> logits, std::span<Out> out,
                    const ActivationSpec& spec) {
  detail::require<ShapeError>(logits.size() == out.size(),
                              "activation_map: buffer length mismatch");
  for (std::size_t i = 0; i < logits.size(); ++i)
    out[i] = static_cast<Out>(
        multilevel_activation(static_cast<double>(logits[i]), spec));
}

inline VolumeF activation_map(const VolumeF& logits, const ActivationSpec& spec) {
  spec.validate();
  detail::require<ShapeError>(logits.channels() == 1,
                              "activation_map: expected a 1-channel volume");
  VolumeF out(logits.shape(), 1);
  activation_map<float, float>(logits.data(), out.data(), spec);
  return out;
}

}  // namespace nestseg
