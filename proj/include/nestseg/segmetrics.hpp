#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "nestseg/csv.hpp"
#include "nestseg/error.hpp"
#include "nestseg/volume.hpp"

namespace nestseg {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Physical voxel size along (depth, height, width).
using Spacing = std::array<double, 3>;
inline constexpr Spacing kUnitSpacing{1.0, 1.0, 1.0};

/// A metric value, or nullopt where the metric is undefined.
using Metric = std::optional<double>;

inline ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  detail::require<ShapeError>(pred.shape == gt.shape, "confusion: mask shape mismatch");
  ConfusionCounts cc;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i] != 0, g = gt.bits[i] != 0;
    cc.tp += p && g;
    cc.fp += p && !g;
    cc.fn += !p && g;
    cc.tn += !p && !g;
  }
  return cc;
}

/// 2tp / (2tp + fp + fn); two empty masks agree perfectly (1).
inline double dice(const ConfusionCounts& cc) {
  const std::int64_t denom = 2 * cc.tp + cc.fp + cc.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(cc.tp) / static_cast<double>(denom);
}

inline double dice(const Mask& pred, const Mask& gt) { return dice(confusion(pred, gt)); }

inline Metric sensitivity(const ConfusionCounts& cc) {
  if (cc.tp + cc.fn == 0) return std::nullopt;
  return static_cast<double>(cc.tp) / static_cast<double>(cc.tp + cc.fn);
}

inline Metric specificity(const ConfusionCounts& cc) {
  if (cc.tn + cc.fp == 0) return std::nullopt;
  return static_cast<double>(cc.tn) / static_cast<double>(cc.tn + cc.fp);
}

namespace detail {

// Exact 1D squared distance transform: lower envelope of parabolas along one line.
// f holds n contiguous squared distances (inf = no site); out[q * stride]
// receives min_p s^2 (q-p)^2 + f(p). v and z are scratch buffers of length n and n+1.
inline void edt_1d(const double* f, double* out, std::int64_t n, std::int64_t stride,
                   double s2, std::vector<std::int64_t>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    const double fq = f[q];
    if (fq == inf) continue;
    while (k >= 0) {
      const std::int64_t p = v[k];
      const double fp = f[p];
      const double sq = ((fq + s2 * q * q) - (fp + s2 * p * p)) / (2.0 * s2 * (q - p));
      if (sq <= z[k]) {
        --k;
      } else {
        ++k;
        v[k] = q;
        z[k] = sq;
        z[k + 1] = inf;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
    }
  }
  if (k < 0) {
    for (std::int64_t q = 0; q < n; ++q) out[q * stride] = inf;
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double d = static_cast<double>(q - v[j]);
    out[q * stride] = s2 * d * d + f[v[j]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every voxel center to the nearest
/// set voxel of `sites`, in physical units. inf everywhere if sites is empty.
inline std::vector<double> squared_distance_transform(const Mask& sites,
                                                      const Spacing& spacing = kUnitSpacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const Shape& s = sites.shape;
  std::vector<double> d(sites.bits.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = sites.bits[i] ? 0.0 : inf;

  const std::array<std::int64_t, 3> dims = s.dims();
  const std::array<std::int64_t, 3> strides{s.height * s.width, s.width, 1};
  const std::int64_t longest = std::max({dims[0], dims[1], dims[2]});
  std::vector<std::int64_t> v(static_cast<std::size_t>(longest));
  std::vector<double> z(static_cast<std::size_t>(longest) + 1);
  std::vector<double> line(static_cast<std::size_t>(longest));

  // Innermost axis first; the result is independent of the order.
  for (int axis = 2; axis >= 0; --axis) {
    const std::int64_t n = dims[axis], stride = strides[axis];
    if (n == 1) continue;
    const double s2 = spacing[axis] * spacing[axis];
    for (std::int64_t base = 0; base < s.voxels(); ++base) {
      // visit each line once, from its first element
      if ((base / stride) % n != 0) continue;
      for (std::int64_t q = 0; q < n; ++q) line[q] = d[base + q * stride];
      detail::edt_1d(line.data(), d.data() + base, n, stride, s2, v, z);
    }
  }
  return d;
}

namespace detail {

// Nearest-rank percentile (1-based rank ceil(p/100 * n)) of an unsorted list.
inline double nearest_rank(std::vector<double> values, int percent) {
  const std::size_t n = values.size();
  std::size_t rank = (static_cast<std::size_t>(percent) * n + 99) / 100;
  if (rank == 0) rank = 1;
  std::nth_element(values.begin(), values.begin() + (rank - 1), values.end());
  return values[rank - 1];
}

}  // namespace detail

/// Directed percentile distance from the voxels of `from` to the voxels of `to`.
inline Metric directed_percentile_distance(const Mask& from, const Mask& to, int percent,
                                           const Spacing& spacing = kUnitSpacing) {
  detail::require<ShapeError>(from.shape == to.shape, "hausdorff: mask shape mismatch");
  detail::require(percent >= 1 && percent <= 100, "hausdorff: percent must be in [1, 100]");
  if (from.empty() || to.empty()) return std::nullopt;
  const auto d2 = squared_distance_transform(to, spacing);
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(from.count()));
  for (std::size_t i = 0; i < from.bits.size(); ++i)
    if (from.bits[i]) dist.push_back(std::sqrt(d2[i]));
  return detail::nearest_rank(std::move(dist), percent);
}

/// Symmetric percentile Hausdorff distance over all foreground voxels:
/// max of the two directed percentile distances. Undefined (nullopt) when
/// either mask is empty.
inline Metric hausdorff_percentile(const Mask& g, const Mask& p, int percent,
                                   const Spacing& spacing = kUnitSpacing) {
  const auto gp = directed_percentile_distance(g, p, percent, spacing);
  const auto pg = directed_percentile_distance(p, g, percent, spacing);
  if (!gp || !pg) return std::nullopt;
  return std::max(*gp, *pg);
}

inline Metric hausdorff95(const Mask& g, const Mask& p, const Spacing& spacing = kUnitSpacing) {
  return hausdorff_percentile(g, p, 95, spacing);
}

struct RegionMetrics {
  Metric dice;
  Metric sensitivity;
  Metric specificity;
  Metric hd95;
};

/// Metrics of one case; regions[c-1] describes the nested region label >= c.
struct MetricsReport {
  std::string case_id;
  std::vector<RegionMetrics> regions;
};

inline MetricsReport evaluate_case(const LabelVolume& pred, const LabelVolume& gt, int m,
                                   std::string case_id = {},
                                   const Spacing& spacing = kUnitSpacing) {
  detail::require<ShapeError>(pred.shape() == gt.shape(),
                              "evaluate_case: shape mismatch " + to_string(pred.shape()) +
                                  " vs " + to_string(gt.shape()));
  const auto pm = nested_regions(pred, m);
  const auto gm = nested_regions(gt, m);
  MetricsReport r;
  r.case_id = std::move(case_id);
  for (int c = 0; c < m; ++c) {
    const auto cc = confusion(pm[c], gm[c]);
    r.regions.push_back({dice(cc), sensitivity(cc), specificity(cc),
                         hausdorff95(gm[c], pm[c], spacing)});
  }
  return r;
}

inline constexpr std::array<const char*, 4> kMetricNames{"dice", "sensitivity", "specificity",
                                                         "hd95"};

inline const Metric& metric_of(const RegionMetrics& r, int which) {
  switch (which) {
    case 0: return r.dice;
    case 1: return r.sensitivity;
    case 2: return r.specificity;
    default: return r.hd95;
  }
}

/// Cohort summary of one metric on one nested region.
struct AggregateRow {
  std::string metric;
  int cls = 0;
  double mean = 0, stddev = 0, median = 0, q25 = 0, q75 = 0;
  std::int64_t n = 0;         // cases contributing
  std::int64_t excluded = 0;  // cases where the metric was undefined
};

namespace detail {

// Linear interpolation between closest ranks, position q * (n - 1).
inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

}  // namespace detail

/// Mean, population standard deviation, median and quartiles per metric and
/// nested region. Undefined values are left out and counted in `excluded`;
/// if every case is undefined the statistics are NaN.
inline std::vector<AggregateRow> aggregate(std::span<const MetricsReport> reports) {
  detail::require(!reports.empty(), "aggregate: no reports");
  const std::size_t m = reports.front().regions.size();
  for (const auto& r : reports)
    detail::require(r.regions.size() == m, "aggregate: reports disagree on class count");
  std::vector<AggregateRow> rows;
  for (int which = 0; which < 4; ++which) {
    for (std::size_t c = 0; c < m; ++c) {
      AggregateRow row;
      row.metric = kMetricNames[which];
      row.cls = static_cast<int>(c + 1);
      std::vector<double> vals;
      for (const auto& r : reports) {
        const auto& v = metric_of(r.regions[c], which);
        if (v)
          vals.push_back(*v);
        else
          ++row.excluded;
      }
      row.n = static_cast<std::int64_t>(vals.size());
      if (vals.empty()) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        row.mean = row.stddev = row.median = row.q25 = row.q75 = nan;
      } else {
        double sum = 0.0;
        for (double v : vals) sum += v;
        row.mean = sum / static_cast<double>(vals.size());
        double ss = 0.0;
        for (double v : vals) ss += (v - row.mean) * (v - row.mean);
        row.stddev = std::sqrt(ss / static_cast<double>(vals.size()));
        std::sort(vals.begin(), vals.end());
        row.median = detail::quantile_sorted(vals, 0.5);
        row.q25 = detail::quantile_sorted(vals, 0.25);
        row.q75 = detail::quantile_sorted(vals, 0.75);
      }
      rows.push_back(row);
    }
  }
  return rows;
}

// ---- CSV ----

inline constexpr const char* kReportsHeader = "case,class,dice,sensitivity,specificity,hd95";
inline constexpr const char* kAggregateHeader =
    "metric,class,mean,stddev,median,q25,q75,n,excluded";

inline void write_reports_csv(std::ostream& os, std::span<const MetricsReport> reports) {
  os << kReportsHeader << '\n';
  for (const auto& r : reports)
    for (std::size_t c = 0; c < r.regions.size(); ++c) {
      const auto& g = r.regions[c];
      os << r.case_id << ',' << c + 1 << ',' << csv::fmt(g.dice) << ','
         << csv::fmt(g.sensitivity) << ',' << csv::fmt(g.specificity) << ','
         << csv::fmt(g.hd95) << '\n';
    }
}

inline std::vector<MetricsReport> read_reports_csv(std::istream& is) {
  std::vector<MetricsReport> out;
  for (const auto& row : csv::read(is, kReportsHeader)) {
    const auto cls = csv::parse_int(row[1]);
    if (out.empty() || out.back().case_id != row[0]) out.push_back({row[0], {}});
    auto& rep = out.back();
    if (cls != static_cast<long long>(rep.regions.size()) + 1)
      throw DataError("reports csv: classes out of order for case " + row[0]);
    rep.regions.push_back({csv::parse_opt(row[2]), csv::parse_opt(row[3]),
                           csv::parse_opt(row[4]), csv::parse_opt(row[5])});
  }
  return out;
}

inline void write_aggregate_csv(std::ostream& os, std::span<const AggregateRow> rows) {
  os << kAggregateHeader << '\n';
  for (const auto& r : rows)
    os << r.metric << ',' << r.cls << ',' << csv::fmt(r.mean) << ',' << csv::fmt(r.stddev)
       << ',' << csv::fmt(r.median) << ',' << csv::fmt(r.q25) << ',' << csv::fmt(r.q75)
       << ',' << r.n << ',' << r.excluded << '\n';
}

inline std::vector<AggregateRow> read_aggregate_csv(std::istream& is) {
  std::vector<AggregateRow> out;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& row : csv::read(is, kAggregateHeader)) {
    AggregateRow r;
    r.metric = row[0];
    r.cls = static_cast<int>(csv::parse_int(row[1]));
    r.mean = csv::parse_opt(row[2]).value_or(nan);
    r.stddev = csv::parse_opt(row[3]).value_or(nan);
    r.median = csv::parse_opt(row[4]).value_or(nan);
    r.q25 = csv::parse_opt(row[5]).value_or(nan);
    r.q75 = csv::parse_opt(row[6]).value_or(nan);
    r.n = csv::parse_int(row[7]);
    r.excluded = csv::parse_int(row[8]);
    out.push_back(r);
  }
  return out;
}

}  // namespace nestseg
