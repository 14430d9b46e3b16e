#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestseg/error.hpp"
#include "nestseg/rng.hpp"
#include "nestseg/volume.hpp"

namespace nestseg {

// ---- crop / restore ----

struct AxisBounds {
  std::int64_t min = 0;
  std::int64_t max = 0;
  friend bool operator==(const AxisBounds&, const AxisBounds&) = default;
};

/// Tightest per-axis range holding every non-zero sample of any channel.
inline std::array<AxisBounds, 3> nonzero_bounds(const VolumeF& vol) {
  const Shape& s = vol.shape();
  std::array<AxisBounds, 3> b{};
  for (int a = 0; a < 3; ++a) b[a] = {s[a], -1};
  for (int c = 0; c < vol.channels(); ++c)
    for (std::int64_t z = 0; z < s.depth; ++z)
      for (std::int64_t y = 0; y < s.height; ++y)
        for (std::int64_t x = 0; x < s.width; ++x) {
          if (vol.at(c, z, y, x) == 0.0f) continue;
          const std::array<std::int64_t, 3> p{z, y, x};
          for (int a = 0; a < 3; ++a) {
            b[a].min = std::min(b[a].min, p[a]);
            b[a].max = std::max(b[a].max, p[a]);
          }
        }
  detail::require(b[0].max >= 0, "nonzero_bounds: volume is all zero");
  return b;
}

/// Where a crop window sits in the original grid. Windows are half-open
/// [start, end) and always patch-size wide; parts outside the grid are padding.
struct CropRecord {
  std::array<std::int64_t, 3> start{};
  std::array<std::int64_t, 3> end{};
  Shape original_shape{};
  std::array<std::int64_t, 3> patch_size{};

  Shape cropped_shape() const { return Shape::from(patch_size); }
  friend bool operator==(const CropRecord&, const CropRecord&) = default;
};

/// Window start for one axis: centre the content of length a = max - min in
/// a patch of size b, putting the odd voxel of (b - a) on the right, then shift
/// inward so the window stays inside the axis when it fits, or covers the
/// whole axis when it does not.
inline std::int64_t crop_window_start(const AxisBounds& bounds, std::int64_t patch,
                                      std::int64_t axis_len) {
  const std::int64_t a = bounds.max - bounds.min;
  const std::int64_t slack = patch - a;
  // floor division, also for negative slack
  const std::int64_t left = slack >= 0 ? slack / 2 : -((-slack + 1) / 2);
  std::int64_t start = bounds.min - left;
  if (patch <= axis_len)
    start = std::clamp<std::int64_t>(start, 0, axis_len - patch);
  else
    start = std::clamp<std::int64_t>(start, axis_len - patch, 0);
  return start;
}

struct CropResult {
  VolumeF image;
  std::optional<LabelVolume> labels;
  CropRecord record;
};

inline CropResult crop(const VolumeF& vol, const std::optional<LabelVolume>& labels,
                       const std::array<std::int64_t, 3>& patch) {
  for (auto p : patch) detail::require(p >= 1, "crop: patch size must be >= 1");
  if (labels)
    detail::require<ShapeError>(labels->shape() == vol.shape(),
                                "crop: label/volume shape mismatch");
  const auto bounds = nonzero_bounds(vol);
  const Shape& s = vol.shape();
  CropRecord rec;
  rec.original_shape = s;
  rec.patch_size = patch;
  for (int a = 0; a < 3; ++a) {
    rec.start[a] = crop_window_start(bounds[a], patch[a], s[a]);
    rec.end[a] = rec.start[a] + patch[a];
  }
  const Shape out_shape = rec.cropped_shape();
  CropResult res{VolumeF(out_shape, vol.channels()), std::nullopt, rec};
  if (labels) res.labels = LabelVolume(out_shape);
  for (std::int64_t z = 0; z < out_shape.depth; ++z)
    for (std::int64_t y = 0; y < out_shape.height; ++y)
      for (std::int64_t x = 0; x < out_shape.width; ++x) {
        const std::int64_t oz = z + rec.start[0], oy = y + rec.start[1], ox = x + rec.start[2];
        if (oz < 0 || oz >= s.depth || oy < 0 || oy >= s.height || ox < 0 || ox >= s.width)
          continue;
        for (int c = 0; c < vol.channels(); ++c) res.image.at(c, z, y, x) = vol.at(c, oz, oy, ox);
        if (labels) res.labels->at(z, y, x) = labels->at(oz, oy, ox);
      }
  return res;
}

inline CropResult crop(const VolumeF& vol, const std::optional<LabelVolume>& labels,
                       std::int64_t b_size) {
  return crop(vol, labels, {b_size, b_size, b_size});
}

/// Places cropped labels back at the recorded window; everything else is
/// background.
inline LabelVolume restore(const LabelVolume& cropped, const CropRecord& rec) {
  detail::require<ShapeError>(cropped.shape() == rec.cropped_shape(),
                              "restore: cropped shape " + to_string(cropped.shape()) +
                                  " does not match record " + to_string(rec.cropped_shape()));
  for (int a = 0; a < 3; ++a)
    detail::require<ShapeError>(rec.end[a] - rec.start[a] == rec.patch_size[a],
                                "restore: inconsistent crop record");
  const Shape& s = rec.original_shape;
  LabelVolume out(s);
  for (std::int64_t z = 0; z < s.depth; ++z)
    for (std::int64_t y = 0; y < s.height; ++y)
      for (std::int64_t x = 0; x < s.width; ++x) {
        const std::int64_t cz = z - rec.start[0], cy = y - rec.start[1], cx = x - rec.start[2];
        if (cz < 0 || cz >= rec.patch_size[0] || cy < 0 || cy >= rec.patch_size[1] || cx < 0 ||
            cx >= rec.patch_size[2])
          continue;
        out.at(z, y, x) = cropped.at(cz, cy, cx);
      }
  return out;
}

// ---- class counting ----

inline std::vector<std::int64_t> class_counts(const LabelVolume& labels, int num_classes) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (auto l : labels.data()) {
    detail::require(l < num_classes, "class_counts: label exceeds num_classes - 1");
    ++counts[l];
  }
  return counts;
}

// ---- synthetic phantoms ----

/// Concentric nested ellipsoids: a voxel belongs to class c when its
/// normalized distance from the centre is within radii[c-1]. Intensities are
/// per (channel, class) plus Gaussian noise from Rng (mt19937_64 +
/// Box-Muller), so a seed reproduces a phantom bit-for-bit on any platform.
struct PhantomConfig {
  Shape shape{1, 64, 64};
  int channels = 4;
  std::vector<double> radii{20.0, 12.0, 6.0};      // strictly decreasing
  std::array<double, 3> aspect{1.0, 1.0, 1.0};     // semi-axis scale per axis
  std::optional<std::array<double, 3>> center;     // default: grid centre
  // intensity[channel][class]; default mimics four MRI contrasts
  std::vector<std::vector<double>> intensity{
      {0.50, 0.45, 0.35, 0.40},
      {0.50, 0.50, 0.45, 0.90},
      {0.40, 0.80, 0.60, 0.60},
      {0.30, 0.85, 0.70, 0.65},
  };
  double noise_sigma = 0.1;
  // Voxels outside this radius are exactly zero (no noise); 0 disables.
  double support_radius = 0.0;
  std::uint64_t seed = 0;

  int num_classes() const { return static_cast<int>(radii.size()) + 1; }

  void validate() const {
    detail::require(shape.height >= 8 && shape.width >= 8 &&
                        (shape.depth == 1 || shape.depth >= 8),
                    "PhantomConfig: need >= 8 voxels per axis (depth 1 for 2D slabs)");
    detail::require(!radii.empty(), "PhantomConfig: need at least one radius");
    for (std::size_t i = 0; i < radii.size(); ++i) {
      detail::require(radii[i] > 0.0, "PhantomConfig: radii must be positive");
      detail::require(i == 0 || radii[i] < radii[i - 1],
                      "PhantomConfig: radii must be strictly decreasing (nested)");
    }
    detail::require(channels >= 1, "PhantomConfig: channels must be >= 1");
    detail::require(static_cast<int>(intensity.size()) == channels,
                    "PhantomConfig: intensity table needs one row per channel");
    for (const auto& row : intensity)
      detail::require(static_cast<int>(row.size()) == num_classes(),
                      "PhantomConfig: intensity row needs one entry per class");
    detail::require(noise_sigma >= 0.0, "PhantomConfig: noise sigma must be >= 0");
    for (double a : aspect) detail::require(a > 0.0, "PhantomConfig: aspect must be > 0");
  }

  std::array<double, 3> resolved_center() const {
    if (center) return *center;
    return {(shape.depth - 1) / 2.0, (shape.height - 1) / 2.0, (shape.width - 1) / 2.0};
  }
};

struct Phantom {
  VolumeF image;
  LabelVolume labels;
};

inline Phantom synth_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  const Shape& s = cfg.shape;
  const auto ctr = cfg.resolved_center();
  Phantom ph{VolumeF(s, cfg.channels), LabelVolume(s)};
  std::vector<std::uint8_t> inside(static_cast<std::size_t>(s.voxels()), 1);
  for (std::int64_t z = 0; z < s.depth; ++z)
    for (std::int64_t y = 0; y < s.height; ++y)
      for (std::int64_t x = 0; x < s.width; ++x) {
        const double dz = (z - ctr[0]) / cfg.aspect[0];
        const double dy = (y - ctr[1]) / cfg.aspect[1];
        const double dx = (x - ctr[2]) / cfg.aspect[2];
        const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
        std::uint8_t l = 0;
        for (std::size_t c = 0; c < cfg.radii.size(); ++c)
          if (r <= cfg.radii[c]) l = static_cast<std::uint8_t>(c + 1);
        ph.labels.at(z, y, x) = l;
        if (cfg.support_radius > 0.0 && r > cfg.support_radius)
          inside[linear_index(s, z, y, x)] = 0;
      }
  Rng rng(cfg.seed);
  const auto labels = ph.labels.data();
  for (int c = 0; c < cfg.channels; ++c) {
    auto ch = ph.image.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) {
      // draw even outside the support so the noise field does not depend on it
      const double noise = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * rng.normal() : 0.0;
      ch[i] = inside[i] ? static_cast<float>(cfg.intensity[c][labels[i]] + noise) : 0.0f;
    }
  }
  return ph;
}

inline void to_json(nlohmann::json& j, const PhantomConfig& c) {
  j = {{"shape", c.shape.dims()},
       {"channels", c.channels},
       {"radii", c.radii},
       {"aspect", c.aspect},
       {"intensity", c.intensity},
       {"noise_sigma", c.noise_sigma},
       {"support_radius", c.support_radius},
       {"seed", c.seed}};
  if (c.center) j["center"] = *c.center;
}

inline void from_json(const nlohmann::json& j, PhantomConfig& c) {
  if (j.contains("shape")) c.shape = Shape::from(j.at("shape").get<std::array<std::int64_t, 3>>());
  if (j.contains("channels")) c.channels = j.at("channels").get<int>();
  if (j.contains("radii")) c.radii = j.at("radii").get<std::vector<double>>();
  if (j.contains("aspect")) c.aspect = j.at("aspect").get<std::array<double, 3>>();
  if (j.contains("center")) c.center = j.at("center").get<std::array<double, 3>>();
  if (j.contains("intensity"))
    c.intensity = j.at("intensity").get<std::vector<std::vector<double>>>();
  if (j.contains("noise_sigma")) c.noise_sigma = j.at("noise_sigma").get<double>();
  if (j.contains("support_radius")) c.support_radius = j.at("support_radius").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

// ---- persistence ----
//
// A volume named <base> is stored as two files:
//   <base>.hdr  JSON header: format, kind, dtype, endianness, shape, channels,
//               label_max, payload_bytes
//   <base>.raw  little-endian payload (float32 samples or uint8 labels)

namespace io {

inline constexpr const char* kFormat = "nestseg-volume/1";

inline std::filesystem::path header_path(const std::filesystem::path& base) {
  return std::filesystem::path(base.string() + ".hdr");
}
inline std::filesystem::path payload_path(const std::filesystem::path& base) {
  return std::filesystem::path(base.string() + ".raw");
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + p.string() + "' for writing");
  os << text;
  if (!os) throw DataError("write failed: '" + p.string() + "'");
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot open '" + p.string() + "'");
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline void write_bytes(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + p.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed: '" + p.string() + "'");
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot open '" + p.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

/// Little-endian encoding of an arithmetic array.
template <typename T>
std::vector<std::uint8_t> to_le_bytes(std::span<const T> values) {
  std::vector<std::uint8_t> out(values.size() * sizeof(T));
  std::memcpy(out.data(), values.data(), out.size());
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1)
    for (std::size_t i = 0; i < values.size(); ++i)
      std::reverse(out.begin() + i * sizeof(T), out.begin() + (i + 1) * sizeof(T));
  return out;
}

template <typename T>
std::vector<T> from_le_bytes(std::span<const std::uint8_t> bytes) {
  std::vector<std::uint8_t> buf(bytes.begin(), bytes.end());
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1)
    for (std::size_t i = 0; i < buf.size() / sizeof(T); ++i)
      std::reverse(buf.begin() + i * sizeof(T), buf.begin() + (i + 1) * sizeof(T));
  std::vector<T> out(buf.size() / sizeof(T));
  std::memcpy(out.data(), buf.data(), out.size() * sizeof(T));
  return out;
}

struct Header {
  std::string kind;
  std::string dtype;
  Shape shape;
  int channels = 1;
  int label_max = 0;
  std::uint64_t payload_bytes = 0;
};

inline void write_header(const std::filesystem::path& base, const Header& h) {
  nlohmann::json j = {{"format", kFormat},       {"kind", h.kind},
                      {"dtype", h.dtype},        {"endianness", "little"},
                      {"shape", h.shape.dims()}, {"channels", h.channels},
                      {"label_max", h.label_max}, {"payload_bytes", h.payload_bytes}};
  write_text(header_path(base), j.dump(2) + "\n");
}

inline Header read_header(const std::filesystem::path& base) {
  const auto text = read_text(header_path(base));
  Header h;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != kFormat)
      throw CorruptHeaderError("unsupported volume format in '" + base.string() + "'");
    if (j.at("endianness").get<std::string>() != "little")
      throw CorruptHeaderError("unsupported endianness in '" + base.string() + "'");
    h.kind = j.at("kind").get<std::string>();
    h.dtype = j.at("dtype").get<std::string>();
    h.shape = Shape::from(j.at("shape").get<std::array<std::int64_t, 3>>());
    h.channels = j.at("channels").get<int>();
    h.label_max = j.at("label_max").get<int>();
    h.payload_bytes = j.at("payload_bytes").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError("corrupt header '" + header_path(base).string() + "': " + e.what());
  }
  if (h.shape.depth < 1 || h.shape.height < 1 || h.shape.width < 1 || h.channels < 1)
    throw CorruptHeaderError("corrupt header '" + base.string() + "': bad shape/channels");
  return h;
}

inline std::vector<std::uint8_t> read_payload(const std::filesystem::path& base, const Header& h,
                                              std::size_t elem_size) {
  const std::uint64_t expected =
      static_cast<std::uint64_t>(h.channels) * static_cast<std::uint64_t>(h.shape.voxels()) *
      elem_size;
  if (h.payload_bytes != expected)
    throw HeaderMismatchError("header of '" + base.string() + "' declares " +
                              std::to_string(h.payload_bytes) + " payload bytes but shape implies " +
                              std::to_string(expected));
  auto bytes = read_bytes(payload_path(base));
  if (bytes.size() < expected)
    throw TruncatedPayloadError("payload of '" + base.string() + "' is truncated: " +
                                std::to_string(bytes.size()) + " of " + std::to_string(expected) +
                                " bytes");
  if (bytes.size() > expected)
    throw HeaderMismatchError("payload of '" + base.string() + "' is longer than its header says");
  return bytes;
}

}  // namespace io

inline void save_volume(const std::filesystem::path& base, const VolumeF& vol) {
  const auto bytes = io::to_le_bytes<float>(vol.data());
  io::write_bytes(io::payload_path(base), bytes);
  io::write_header(base, {"volume", "float32", vol.shape(), vol.channels(), 0, bytes.size()});
}

inline void save_labels(const std::filesystem::path& base, const LabelVolume& labels) {
  const auto bytes = io::to_le_bytes<std::uint8_t>(labels.data());
  io::write_bytes(io::payload_path(base), bytes);
  io::write_header(base, {"labels", "uint8", labels.shape(), 1, labels.max_label(), bytes.size()});
}

inline VolumeF load_volume(const std::filesystem::path& base) {
  const auto h = io::read_header(base);
  if (h.dtype != "float32" || h.kind != "volume")
    throw DtypeMismatchError("'" + base.string() + "' holds " + h.kind + "/" + h.dtype +
                             ", expected volume/float32");
  const auto bytes = io::read_payload(base, h, sizeof(float));
  return VolumeF(h.shape, h.channels, io::from_le_bytes<float>(bytes));
}

inline LabelVolume load_labels(const std::filesystem::path& base) {
  const auto h = io::read_header(base);
  if (h.dtype != "uint8" || h.kind != "labels")
    throw DtypeMismatchError("'" + base.string() + "' holds " + h.kind + "/" + h.dtype +
                             ", expected labels/uint8");
  if (h.channels != 1) throw HeaderMismatchError("label volume with channels != 1");
  const auto bytes = io::read_payload(base, h, 1);
  LabelVolume out(h.shape, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
  if (out.max_label() > h.label_max)
    throw HeaderMismatchError("'" + base.string() + "' contains labels above label_max");
  return out;
}

}  // namespace nestseg
