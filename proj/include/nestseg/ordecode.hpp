#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "nestseg/csv.hpp"
#include "nestseg/error.hpp"
#include "nestseg/segmetrics.hpp"
#include "nestseg/volume.hpp"

namespace nestseg {

/// Ascending cut points on the activation axis. A voxel's label is the number
/// of thresholds its activation reaches (a >= t counts).
class ThresholdScheme {
 public:
  ThresholdScheme() = default;
  explicit ThresholdScheme(std::vector<double> thresholds) : t_(std::move(thresholds)) {
    detail::require(!t_.empty(), "ThresholdScheme: no thresholds");
    const double m = static_cast<double>(t_.size());
    for (std::size_t i = 0; i < t_.size(); ++i) {
      detail::require(t_[i] > 0.0 && t_[i] < m,
                      "ThresholdScheme: threshold " + csv::fmt(t_[i]) + " outside (0, " +
                          csv::fmt(m) + ")");
      detail::require(i == 0 || t_[i] > t_[i - 1],
                      "ThresholdScheme: thresholds must be strictly ascending");
    }
  }

  /// Preset boundaries for four classes.
  static ThresholdScheme preset() { return ThresholdScheme({0.95, 1.65, 2.2}); }
  /// c - 0.5 for c = 1..m.
  static ThresholdScheme midpoint(int m) {
    std::vector<double> t;
    for (int c = 1; c <= m; ++c) t.push_back(c - 0.5);
    return ThresholdScheme(std::move(t));
  }

  int levels() const { return static_cast<int>(t_.size()); }
  int num_classes() const { return levels() + 1; }
  double operator[](int i) const { return t_[static_cast<std::size_t>(i)]; }
  const std::vector<double>& values() const { return t_; }

  std::uint8_t decode(double a) const {
    std::uint8_t l = 0;
    for (double t : t_) l += a >= t;
    return l;
  }

  friend bool operator==(const ThresholdScheme&, const ThresholdScheme&) = default;

 private:
  std::vector<double> t_;
};

inline std::string to_string(const ThresholdScheme& s) {
  std::string out;
  for (int i = 0; i < s.levels(); ++i) out += (i ? "," : "") + csv::fmt(s[i]);
  return out;
}

inline ThresholdScheme parse_thresholds(const std::string& text) {
  std::vector<double> t;
  for (const auto& cell : csv::split(text)) {
    try {
      t.push_back(csv::parse(cell));
    } catch (const DataError&) {
      throw ConfigError("invalid threshold list '" + text + "'");
    }
  }
  return ThresholdScheme(std::move(t));
}

inline LabelVolume decode_labels(const VolumeF& activations, const ThresholdScheme& scheme) {
  detail::require<ShapeError>(activations.channels() == 1,
                              "decode_labels: activations must have one channel");
  // Stored activations are float, so the cut points are rounded to float too;
  // a voxel holding exactly 0.95f then decodes the same as a = 0.95.
  std::vector<float> cut;
  for (double t : scheme.values()) cut.push_back(static_cast<float>(t));
  LabelVolume out(activations.shape());
  const auto a = activations.data();
  auto l = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::uint8_t c = 0;
    for (float t : cut) c += a[i] >= t;
    l[i] = c;
  }
  return out;
}

inline LabelVolume decode_labels(const VolumeF& activations, const ThresholdScheme& scheme,
                                 int num_classes) {
  detail::require(scheme.num_classes() == num_classes,
                  "decode_labels: scheme has " + std::to_string(scheme.levels()) +
                      " thresholds, expected " + std::to_string(num_classes - 1));
  return decode_labels(activations, scheme);
}

/// Per-nested-region Dice of one decoded case.
inline std::vector<double> region_dice(const LabelVolume& pred, const LabelVolume& gt, int m) {
  detail::require<ShapeError>(pred.shape() == gt.shape(), "region_dice: shape mismatch");
  std::vector<std::int64_t> tp(m, 0), fp(m, 0), fn(m, 0);
  const auto p = pred.data(), g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i)
    for (int c = 1; c <= m; ++c) {
      const bool pc = p[i] >= c, gc = g[i] >= c;
      tp[c - 1] += pc && gc;
      fp[c - 1] += pc && !gc;
      fn[c - 1] += !pc && gc;
    }
  std::vector<double> d(m);
  for (int c = 0; c < m; ++c) d[c] = dice(ConfusionCounts{tp[c], fp[c], 0, fn[c]});
  return d;
}

/// Per-region Dice averaged over the cases of a cohort.
inline std::vector<double> cohort_dice(std::span<const VolumeF> activations,
                                       std::span<const LabelVolume> gt,
                                       const ThresholdScheme& scheme) {
  detail::require<ShapeError>(activations.size() == gt.size() && !gt.empty(),
                              "cohort_dice: need matching non-empty case lists");
  const int m = scheme.levels();
  std::vector<double> mean(m, 0.0);
  for (std::size_t k = 0; k < gt.size(); ++k) {
    const auto d = region_dice(decode_labels(activations[k], scheme), gt[k], m);
    for (int c = 0; c < m; ++c) mean[c] += d[c];
  }
  for (auto& v : mean) v /= static_cast<double>(gt.size());
  return mean;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

struct SweepRow {
  int threshold_index = 0;
  double value = 0.0;
  std::vector<double> dice;  // per nested region, c = 1..m
};

/// Inclusive grid lo, lo+step, ..., up to hi (with a small tolerance for
/// accumulated rounding at the top end).
struct GridRange {
  double lo = 0.0;
  double hi = 0.0;
  double step = 0.0;

  std::vector<double> values() const {
    detail::require(step > 0.0 && hi >= lo, "grid: need step > 0 and hi >= lo");
    const auto n = static_cast<std::int64_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
    std::vector<double> v;
    // snap to 12 decimals so 0.05 steps land on the doubles nearest 0.9, 1.65, ...
    for (std::int64_t i = 0; i < n; ++i)
      v.push_back(std::round((lo + static_cast<double>(i) * step) * 1e12) / 1e12);
    return v;
  }
};

/// Dice as one threshold moves across [lo, hi] while the others stay fixed.
/// The sweep must stay strictly between the neighbouring fixed thresholds
/// (or 0 and m at the ends).
inline std::vector<SweepRow> sweep_threshold(std::span<const VolumeF> activations,
                                             std::span<const LabelVolume> gt, int index,
                                             const GridRange& range,
                                             const ThresholdScheme& fixed) {
  const int m = fixed.levels();
  detail::require(index >= 0 && index < m, "sweep: threshold index out of range");
  detail::require(range.lo < range.hi, "sweep: need lo < hi");
  const double below = index == 0 ? 0.0 : fixed[index - 1];
  const double above = index == m - 1 ? static_cast<double>(m) : fixed[index + 1];
  const auto grid = range.values();
  detail::require(grid.front() > below && grid.back() < above,
                  "sweep: range [" + csv::fmt(range.lo) + ", " + csv::fmt(range.hi) +
                      "] must lie strictly inside (" + csv::fmt(below) + ", " +
                      csv::fmt(above) + ")");
  std::vector<SweepRow> rows;
  for (double v : grid) {
    auto t = fixed.values();
    t[index] = v;
    rows.push_back({index, v, cohort_dice(activations, gt, ThresholdScheme(t))});
  }
  return rows;
}

inline std::string sweep_csv_header(int m) {
  std::string h = "threshold_index,value";
  for (int c = 1; c <= m; ++c) h += ",dice_c" + std::to_string(c);
  return h;
}

inline void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows, int m = 3) {
  os << sweep_csv_header(m) << '\n';
  for (const auto& r : rows) {
    os << r.threshold_index << ',' << csv::fmt(r.value);
    for (double d : r.dice) os << ',' << csv::fmt(d);
    os << '\n';
  }
}

inline std::vector<SweepRow> read_sweep_csv(std::istream& is, int m = 3) {
  std::vector<SweepRow> out;
  for (const auto& row : csv::read(is, sweep_csv_header(m))) {
    SweepRow r;
    r.threshold_index = static_cast<int>(csv::parse_int(row[0]));
    r.value = csv::parse(row[1]);
    for (int c = 0; c < m; ++c) r.dice.push_back(csv::parse(row[2 + c]));
    out.push_back(std::move(r));
  }
  return out;
}

/// Result of a threshold search together with its objective (mean Dice over
/// the nested regions, averaged over cases).
struct ThresholdSearch {
  ThresholdScheme scheme;
  double score = 0.0;
};

/// Coordinate-wise grid search, one pass from the last threshold to the
/// first, starting at `start`. The current value stays a candidate, so the
/// score never drops below the starting scheme's. Candidates violating the
/// ordering with the current neighbours are skipped; ties go to the smaller
/// threshold.
inline ThresholdSearch optimize_thresholds(std::span<const VolumeF> activations,
                                           std::span<const LabelVolume> gt,
                                           std::span<const GridRange> grid,
                                           const ThresholdScheme& start) {
  const int m = start.levels();
  detail::require(static_cast<int>(grid.size()) == m,
                  "optimize_thresholds: need one grid per threshold");
  auto score_of = [&](const std::vector<double>& t) {
    return mean_of(cohort_dice(activations, gt, ThresholdScheme(t)));
  };
  std::vector<double> cur = start.values();
  double best = score_of(cur);
  for (int idx = m - 1; idx >= 0; --idx) {
    auto cand = grid[idx].values();
    detail::require(!cand.empty(), "optimize_thresholds: empty grid");
    cand.push_back(cur[idx]);
    std::sort(cand.begin(), cand.end());
    const double below = idx == 0 ? 0.0 : cur[idx - 1];
    const double above = idx == m - 1 ? static_cast<double>(m) : cur[idx + 1];
    double best_v = cur[idx];
    double best_s = -1.0;
    for (double v : cand) {
      if (!(v > below && v < above)) continue;
      auto t = cur;
      t[idx] = v;
      const double s = score_of(t);
      if (s > best_s) {
        best_s = s;
        best_v = v;
      }
    }
    cur[idx] = best_v;
    best = best_s;
  }
  return {ThresholdScheme(cur), best};
}

inline ThresholdSearch optimize_thresholds(std::span<const VolumeF> activations,
                                           std::span<const LabelVolume> gt,
                                           std::span<const GridRange> grid) {
  return optimize_thresholds(activations, gt, grid,
                             ThresholdScheme::midpoint(static_cast<int>(grid.size())));
}

/// Exhaustive search over the full product grid (small grids only). Ties go
/// to the lexicographically smallest scheme.
inline ThresholdSearch exhaustive_thresholds(std::span<const VolumeF> activations,
                                             std::span<const LabelVolume> gt,
                                             std::span<const GridRange> grid) {
  const int m = static_cast<int>(grid.size());
  detail::require(m >= 1, "exhaustive_thresholds: empty grid");
  std::vector<std::vector<double>> axes;
  for (const auto& g : grid) {
    axes.push_back(g.values());
    detail::require(!axes.back().empty(), "exhaustive_thresholds: empty grid");
  }
  ThresholdSearch best{ThresholdScheme::midpoint(m), -1.0};
  std::vector<std::size_t> pos(m, 0);
  std::vector<double> t(m);
  while (true) {
    bool ascending = true;
    for (int i = 0; i < m; ++i) {
      t[i] = axes[i][pos[i]];
      if (t[i] <= 0.0 || t[i] >= m || (i > 0 && t[i] <= t[i - 1])) ascending = false;
    }
    if (ascending) {
      const double s = mean_of(cohort_dice(activations, gt, ThresholdScheme(t)));
      if (s > best.score) best = {ThresholdScheme(t), s};
    }
    int i = m - 1;
    while (i >= 0 && ++pos[i] == axes[i].size()) pos[i--] = 0;
    if (i < 0) break;
  }
  detail::require(best.score >= 0.0, "exhaustive_thresholds: no ascending scheme in grid");
  return best;
}

}  // namespace nestseg
