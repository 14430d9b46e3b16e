#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nestseg/error.hpp"

namespace nestseg {

/// Spatial extent (depth, height, width). A 2D slab has depth 1.
struct Shape {
  std::int64_t depth = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;

  std::int64_t voxels() const { return depth * height * width; }
  std::int64_t operator[](int axis) const {
    return axis == 0 ? depth : (axis == 1 ? height : width);
  }
  std::array<std::int64_t, 3> dims() const { return {depth, height, width}; }
  static Shape from(const std::array<std::int64_t, 3>& d) {
    return {d[0], d[1], d[2]};
  }

  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.depth) + "," + std::to_string(s.height) + "," +
         std::to_string(s.width) + ")";
}

inline std::int64_t linear_index(const Shape& s, std::int64_t z, std::int64_t y,
                                 std::int64_t x) {
  return (z * s.height + y) * s.width + x;
}

/// Multi-channel real-valued voxel grid, channel-major, row-major within a
/// channel. Samples are 32-bit; evaluation promotes to double.
class VolumeF {
 public:
  VolumeF() = default;
  VolumeF(Shape shape, int channels, float fill = 0.0f)
      : shape_(shape), channels_(channels) {
    detail::require(channels >= 1, "VolumeF: channels must be >= 1");
    detail::require(shape.depth >= 1 && shape.height >= 1 && shape.width >= 1,
                    "VolumeF: empty shape " + to_string(shape));
    data_.assign(static_cast<std::size_t>(channels) * shape.voxels(), fill);
  }
  VolumeF(Shape shape, int channels, std::vector<float> data)
      : shape_(shape), channels_(channels), data_(std::move(data)) {
    detail::require<ShapeError>(
        static_cast<std::int64_t>(data_.size()) == channels * shape.voxels(),
        "VolumeF: data length does not match channels * voxels");
  }

  const Shape& shape() const { return shape_; }
  int channels() const { return channels_; }
  std::int64_t voxels() const { return shape_.voxels(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::span<float> channel(int c) {
    return std::span<float>(data_).subspan(c * voxels(), voxels());
  }
  std::span<const float> channel(int c) const {
    return std::span<const float>(data_).subspan(c * voxels(), voxels());
  }

  float& at(int c, std::int64_t z, std::int64_t y, std::int64_t x) {
    return data_[c * voxels() + linear_index(shape_, z, y, x)];
  }
  float at(int c, std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data_[c * voxels() + linear_index(shape_, z, y, x)];
  }

  friend bool operator==(const VolumeF&, const VolumeF&) = default;

 private:
  Shape shape_{};
  int channels_ = 0;
  std::vector<float> data_;
};

/// Ordinal label grid: 0 = background, c = inside the c-th nested region.
class LabelVolume {
 public:
  using value_type = std::uint8_t;

  LabelVolume() = default;
  explicit LabelVolume(Shape shape, value_type fill = 0) : shape_(shape) {
    detail::require(shape.depth >= 1 && shape.height >= 1 && shape.width >= 1,
                    "LabelVolume: empty shape " + to_string(shape));
    labels_.assign(static_cast<std::size_t>(shape.voxels()), fill);
  }
  LabelVolume(Shape shape, std::vector<value_type> labels)
      : shape_(shape), labels_(std::move(labels)) {
    detail::require<ShapeError>(
        static_cast<std::int64_t>(labels_.size()) == shape.voxels(),
        "LabelVolume: label count does not match shape");
  }

  const Shape& shape() const { return shape_; }
  std::int64_t voxels() const { return shape_.voxels(); }

  std::span<value_type> data() { return labels_; }
  std::span<const value_type> data() const { return labels_; }

  value_type& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return labels_[linear_index(shape_, z, y, x)];
  }
  value_type at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return labels_[linear_index(shape_, z, y, x)];
  }

  int max_label() const {
    int m = 0;
    for (auto v : labels_) m = v > m ? v : m;
    return m;
  }

  friend bool operator==(const LabelVolume&, const LabelVolume&) = default;

 private:
  Shape shape_{};
  std::vector<value_type> labels_;
};

/// Binary voxel mask (0/1 bytes).
struct Mask {
  Shape shape{};
  std::vector<std::uint8_t> bits;

  Mask() = default;
  explicit Mask(Shape s, bool fill = false)
      : shape(s), bits(static_cast<std::size_t>(s.voxels()), fill ? 1 : 0) {}

  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  bool empty() const { return count() == 0; }
  bool get(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return bits[linear_index(shape, z, y, x)] != 0;
  }
  void set(std::int64_t z, std::int64_t y, std::int64_t x, bool v = true) {
    bits[linear_index(shape, z, y, x)] = v ? 1 : 0;
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

/// Nested region masks: entry c-1 holds {voxels with label >= c}, c = 1..m.
inline std::vector<Mask> nested_regions(const LabelVolume& labels, int m) {
  detail::require(m >= 1, "nested_regions: m must be >= 1");
  std::vector<Mask> masks(static_cast<std::size_t>(m), Mask(labels.shape()));
  const auto data = labels.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    detail::require(data[i] <= m, "nested_regions: label exceeds m");
    for (int c = 1; c <= data[i]; ++c) masks[c - 1].bits[i] = 1;
  }
  return masks;
}

/// Count of voxels where a mask is set but its enclosing mask is not.
inline std::int64_t nesting_violations(const std::vector<Mask>& masks) {
  std::int64_t bad = 0;
  for (std::size_t c = 1; c < masks.size(); ++c)
    for (std::size_t i = 0; i < masks[c].bits.size(); ++i)
      bad += masks[c].bits[i] && !masks[c - 1].bits[i];
  return bad;
}

/// Face-adjacent voxel pairs whose labels differ by more than one class.
/// Ordinal decoding of a smooth activation rarely jumps classes; an
/// unconstrained argmax can.
inline std::int64_t nonadjacent_transitions(const LabelVolume& labels) {
  const Shape& s = labels.shape();
  std::int64_t n = 0;
  auto jump = [](int a, int b) { return (a > b ? a - b : b - a) > 1; };
  for (std::int64_t z = 0; z < s.depth; ++z)
    for (std::int64_t y = 0; y < s.height; ++y)
      for (std::int64_t x = 0; x < s.width; ++x) {
        const int v = labels.at(z, y, x);
        if (x + 1 < s.width) n += jump(v, labels.at(z, y, x + 1));
        if (y + 1 < s.height) n += jump(v, labels.at(z, y + 1, x));
        if (z + 1 < s.depth) n += jump(v, labels.at(z + 1, y, x));
      }
  return n;
}

}  // namespace nestseg
