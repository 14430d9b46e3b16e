#pragma once

// Desk-scale residual encoder-decoder for nested-class segmentation.
//
// Context pathway: a stem convolution, then per level a pre-activation
// residual block (ELU -> conv -> ELU -> dropout -> conv, plus identity),
// with stride-2 3x3(x3) convolutions between levels. Localization pathway:
// nearest-neighbour upscaling, concatenation with the matching context
// features, a 3x3(x3) convolution and a 1x1(x1) convolution. A 1x1(x1)
// segmentation layer produces the logits; with deep supervision every
// decoder level has one and their upscaled outputs are summed.
//
// All arithmetic is double precision; gradients are computed by hand-written
// reverse-mode passes over the cached forward intermediates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestseg/error.hpp"
#include "nestseg/mlact.hpp"
#include "nestseg/nestloss.hpp"
#include "nestseg/ordecode.hpp"
#include "nestseg/rng.hpp"
#include "nestseg/volio.hpp"
#include "nestseg/volume.hpp"

namespace nestseg {

enum class Head { Multilevel, Softmax };

inline std::string to_string(Head h) { return h == Head::Multilevel ? "multilevel" : "softmax"; }

inline Head parse_head(const std::string& s) {
  if (s == "multilevel") return Head::Multilevel;
  if (s == "softmax") return Head::Softmax;
  throw ConfigError("unknown head '" + s + "' (expected multilevel or softmax)");
}

struct NetConfig {
  int spatial_dims = 2;
  int depth = 3;  // resolution levels
  int base_filters = 8;
  int in_channels = 4;
  double dropout_rate = 0.3;
  bool deep_supervision = false;
  Head head = Head::Multilevel;
  ActivationSpec activation{};  // class count of both heads comes from here
  std::uint64_t seed = 0;

  int num_classes() const { return activation.num_classes; }
  int out_channels() const { return head == Head::Multilevel ? 1 : num_classes(); }
  int filters(int level) const { return base_filters << level; }

  void validate() const {
    detail::require(spatial_dims == 2 || spatial_dims == 3, "NetConfig: spatial_dims must be 2 or 3");
    detail::require(depth >= 2, "NetConfig: depth must be >= 2");
    detail::require(base_filters >= 4, "NetConfig: base_filters must be >= 4");
    detail::require(in_channels >= 1, "NetConfig: in_channels must be >= 1");
    detail::require(dropout_rate >= 0.0 && dropout_rate < 1.0,
                    "NetConfig: dropout_rate must lie in [0, 1)");
    activation.validate();
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;

  friend bool operator==(const ParamTensor&, const ParamTensor&) = default;
};

struct NetParams {
  NetConfig config;
  std::vector<ParamTensor> tensors;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].name == name) return i;
    throw ConfigError("no parameter tensor named '" + name + "'");
  }
  const ParamTensor& operator[](const std::string& name) const { return tensors[index_of(name)]; }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
  }

  friend bool operator==(const NetParams&, const NetParams&) = default;
};

/// One gradient buffer per parameter tensor, same order and length.
using Gradients = std::vector<std::vector<double>>;

namespace net {

struct Tensor {
  int channels = 0;
  Shape shape{};
  std::vector<double> v;

  Tensor() = default;
  Tensor(int c, Shape s) : channels(c), shape(s), v(static_cast<std::size_t>(c * s.voxels()), 0.0) {}
  std::int64_t voxels() const { return shape.voxels(); }
  double* ch(int c) { return v.data() + c * voxels(); }
  const double* ch(int c) const { return v.data() + c * voxels(); }
};

struct ConvGeom {
  int in = 0;
  int out = 0;
  std::array<int, 3> kernel{1, 1, 1};
  std::array<int, 3> stride{1, 1, 1};

  std::array<int, 3> pad() const { return {kernel[0] / 2, kernel[1] / 2, kernel[2] / 2}; }
  Shape out_shape(const Shape& s) const {
    const auto p = pad();
    std::array<std::int64_t, 3> o{};
    for (int a = 0; a < 3; ++a) o[a] = (s[a] + 2 * p[a] - kernel[a]) / stride[a] + 1;
    return Shape::from(o);
  }
  int kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
  int fan_in() const { return in * kernel_volume(); }
};

// Output x range [lo, hi) whose input index x*s + k - p lies in [0, n).
inline void valid_range(std::int64_t out_n, std::int64_t in_n, int k, int s, int p,
                        std::int64_t& lo, std::int64_t& hi) {
  const std::int64_t off = k - p;
  lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const std::int64_t last = in_n - 1 - off;  // need x*s <= last
  hi = last < 0 ? 0 : std::min<std::int64_t>(out_n, last / s + 1);
  if (hi < lo) hi = lo;
}

// Visits every (output voxel row, input voxel row) pair touched by kernel tap
// (kz, ky, kx); fn(out_row_ptr_offset, in_offset, lo, hi).
template <typename Fn>
inline void for_each_tap_row(const Shape& is, const Shape& os, const ConvGeom& g, int kz, int ky,
                             int kx, Fn&& fn) {
  const auto p = g.pad();
  std::int64_t xlo = 0, xhi = 0;
  valid_range(os.width, is.width, kx, g.stride[2], p[2], xlo, xhi);
  if (xlo >= xhi) return;
  for (std::int64_t oz = 0; oz < os.depth; ++oz) {
    const std::int64_t iz = oz * g.stride[0] + kz - p[0];
    if (iz < 0 || iz >= is.depth) continue;
    for (std::int64_t oy = 0; oy < os.height; ++oy) {
      const std::int64_t iy = oy * g.stride[1] + ky - p[1];
      if (iy < 0 || iy >= is.height) continue;
      fn((oz * os.height + oy) * os.width, (iz * is.height + iy) * is.width + kx - p[2], xlo, xhi);
    }
  }
}

inline Tensor conv_forward(const Tensor& in, const std::vector<double>& w,
                           const std::vector<double>& b, const ConvGeom& g) {
  Tensor out(g.out, g.out_shape(in.shape));
  const std::int64_t on = out.voxels();
  const int sx = g.stride[2];
  const int kv = g.kernel_volume();
  for (int oc = 0; oc < g.out; ++oc) {
    double* o = out.ch(oc);
    std::fill(o, o + on, b[oc]);
    for (int ic = 0; ic < g.in; ++ic) {
      const double* ip = in.ch(ic);
      const double* wk = w.data() + (static_cast<std::size_t>(oc) * g.in + ic) * kv;
      for (int kz = 0; kz < g.kernel[0]; ++kz)
        for (int ky = 0; ky < g.kernel[1]; ++ky)
          for (int kx = 0; kx < g.kernel[2]; ++kx) {
            const double wt = wk[(kz * g.kernel[1] + ky) * g.kernel[2] + kx];
            for_each_tap_row(in.shape, out.shape, g, kz, ky, kx,
                             [&](std::int64_t orow, std::int64_t irow, std::int64_t lo,
                                 std::int64_t hi) {
                               double* op = o + orow;
                               const double* src = ip + irow;
                               if (sx == 1)
                                 for (std::int64_t x = lo; x < hi; ++x) op[x] += wt * src[x];
                               else
                                 for (std::int64_t x = lo; x < hi; ++x) op[x] += wt * src[x * sx];
                             });
          }
    }
  }
  return out;
}

// Accumulates weight/bias gradients; writes the input gradient into gin when
// it is non-null (gin must be zero-initialized or hold a partial sum).
inline void conv_backward(const Tensor& in, const std::vector<double>& w, const ConvGeom& g,
                          const Tensor& gout, std::vector<double>& gw, std::vector<double>& gb,
                          Tensor* gin) {
  const std::int64_t on = gout.voxels();
  const int sx = g.stride[2];
  const int kv = g.kernel_volume();
  for (int oc = 0; oc < g.out; ++oc) {
    const double* go = gout.ch(oc);
    double bs = 0.0;
    for (std::int64_t i = 0; i < on; ++i) bs += go[i];
    gb[oc] += bs;
    for (int ic = 0; ic < g.in; ++ic) {
      const double* ip = in.ch(ic);
      double* gi = gin ? gin->ch(ic) : nullptr;
      const std::size_t wbase = (static_cast<std::size_t>(oc) * g.in + ic) * kv;
      for (int kz = 0; kz < g.kernel[0]; ++kz)
        for (int ky = 0; ky < g.kernel[1]; ++ky)
          for (int kx = 0; kx < g.kernel[2]; ++kx) {
            const std::size_t widx = wbase + (kz * g.kernel[1] + ky) * g.kernel[2] + kx;
            const double wt = w[widx];
            double acc = 0.0;
            for_each_tap_row(in.shape, gout.shape, g, kz, ky, kx,
                             [&](std::int64_t orow, std::int64_t irow, std::int64_t lo,
                                 std::int64_t hi) {
                               const double* gp = go + orow;
                               const double* src = ip + irow;
                               if (sx == 1) {
                                 for (std::int64_t x = lo; x < hi; ++x) acc += gp[x] * src[x];
                                 if (gi) {
                                   double* dst = gi + irow;
                                   for (std::int64_t x = lo; x < hi; ++x) dst[x] += wt * gp[x];
                                 }
                               } else {
                                 for (std::int64_t x = lo; x < hi; ++x) acc += gp[x] * src[x * sx];
                                 if (gi) {
                                   double* dst = gi + irow;
                                   for (std::int64_t x = lo; x < hi; ++x) dst[x * sx] += wt * gp[x];
                                 }
                               }
                             });
            gw[widx] += acc;
          }
    }
  }
}

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

inline Tensor elu(const Tensor& t) {
  Tensor o = t;
  for (auto& x : o.v) x = elu(x);
  return o;
}

// g *= elu'(pre), elementwise
inline void elu_backward(const Tensor& pre, Tensor& g) {
  for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] *= elu_grad(pre.v[i]);
}

// Nearest-neighbour upscaling by an integer factor per axis, cropped to target.
inline Tensor upsample(const Tensor& in, const Shape& target, const std::array<int, 3>& f) {
  Tensor out(in.channels, target);
  for (int c = 0; c < in.channels; ++c) {
    const double* ip = in.ch(c);
    double* op = out.ch(c);
    for (std::int64_t z = 0; z < target.depth; ++z)
      for (std::int64_t y = 0; y < target.height; ++y)
        for (std::int64_t x = 0; x < target.width; ++x)
          op[(z * target.height + y) * target.width + x] =
              ip[linear_index(in.shape, z / f[0], y / f[1], x / f[2])];
  }
  return out;
}

inline Tensor upsample_backward(const Tensor& gout, const Shape& source, const std::array<int, 3>& f) {
  Tensor gin(gout.channels, source);
  const Shape& t = gout.shape;
  for (int c = 0; c < gout.channels; ++c) {
    const double* gp = gout.ch(c);
    double* ip = gin.ch(c);
    for (std::int64_t z = 0; z < t.depth; ++z)
      for (std::int64_t y = 0; y < t.height; ++y)
        for (std::int64_t x = 0; x < t.width; ++x)
          ip[linear_index(source, z / f[0], y / f[1], x / f[2])] +=
              gp[(z * t.height + y) * t.width + x];
  }
  return gin;
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
  Tensor o(a.channels + b.channels, a.shape);
  std::copy(a.v.begin(), a.v.end(), o.v.begin());
  std::copy(b.v.begin(), b.v.end(), o.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
  return o;
}

inline void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

inline Tensor from_volume(const VolumeF& vol) {
  Tensor t(vol.channels(), vol.shape());
  const auto d = vol.data();
  for (std::size_t i = 0; i < d.size(); ++i) t.v[i] = d[i];
  return t;
}

inline VolumeF to_volume(const Tensor& t) {
  std::vector<float> d(t.v.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(t.v[i]);
  return VolumeF(t.shape, t.channels, std::move(d));
}

struct ResCache {
  Tensor h, z1, a1, a2, d, z2, out;
  std::vector<double> mask;  // empty when dropout is inactive
};

struct LocCache {
  Tensor up, cat, z3, a3, z1, out;
};

struct Cache {
  Tensor input;
  std::vector<ResCache> ctx;
  std::vector<LocCache> loc;  // index = level, size depth-1
  std::vector<Tensor> seg;    // per level, empty tensors where unused
  Tensor logits;
};

/// Parameter layout and forward/backward over it. Stateless apart from the
/// configuration; parameters are passed in.
class Graph {
 public:
  explicit Graph(const NetConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int k = 3;
    k3_ = cfg.spatial_dims == 3 ? std::array<int, 3>{k, k, k} : std::array<int, 3>{1, k, k};
    s2_ = cfg.spatial_dims == 3 ? std::array<int, 3>{2, 2, 2} : std::array<int, 3>{1, 2, 2};
    add("stem", {cfg.in_channels, cfg.filters(0), k3_, {1, 1, 1}});
    for (int l = 0; l < cfg.depth; ++l) {
      if (l > 0) add("down" + std::to_string(l), {cfg.filters(l - 1), cfg.filters(l), k3_, s2_});
      add("ctx" + std::to_string(l) + ".conv1", {cfg.filters(l), cfg.filters(l), k3_, {1, 1, 1}});
      add("ctx" + std::to_string(l) + ".conv2", {cfg.filters(l), cfg.filters(l), k3_, {1, 1, 1}});
    }
    for (int l = cfg.depth - 2; l >= 0; --l) {
      const std::string p = "loc" + std::to_string(l);
      add(p + ".conv3", {cfg.filters(l + 1) + cfg.filters(l), cfg.filters(l), k3_, {1, 1, 1}});
      add(p + ".conv1", {cfg.filters(l), cfg.filters(l), {1, 1, 1}, {1, 1, 1}});
      if (uses_seg(l))
        add("seg" + std::to_string(l), {cfg.filters(l), cfg.out_channels(), {1, 1, 1}, {1, 1, 1}});
    }
  }

  bool uses_seg(int level) const { return level == 0 || cfg_.deep_supervision; }

  // Parameter tensors come in (weight, bias) pairs.
  struct Layer {
    std::string name;
    ConvGeom geom;
    std::size_t weight;  // index into NetParams::tensors
  };

  const std::vector<Layer>& layers() const { return layers_; }
  const Layer& layer(const std::string& name) const {
    for (const auto& l : layers_)
      if (l.name == name) return l;
    throw ConfigError("no layer named '" + name + "'");
  }

  NetParams init(std::uint64_t seed) const {
    NetParams p;
    p.config = cfg_;
    Rng rng(seed);
    for (const auto& l : layers_) {
      const auto& g = l.geom;
      ParamTensor w{l.name + ".w", {g.out, g.in, g.kernel[0], g.kernel[1], g.kernel[2]}, {}};
      const double bound = std::sqrt(3.0 / g.fan_in());
      w.values.resize(static_cast<std::size_t>(g.out) * g.fan_in());
      for (auto& v : w.values) v = rng.uniform(-bound, bound);
      ParamTensor b{l.name + ".b", {g.out}, std::vector<double>(static_cast<std::size_t>(g.out), 0.0)};
      p.tensors.push_back(std::move(w));
      p.tensors.push_back(std::move(b));
    }
    return p;
  }

  void check(const NetParams& p) const {
    detail::require(p.tensors.size() == 2 * layers_.size(), "NetParams: wrong tensor count");
    for (const auto& l : layers_) {
      const auto& w = p.tensors[l.weight];
      const auto& b = p.tensors[l.weight + 1];
      detail::require(w.name == l.name + ".w" && b.name == l.name + ".b",
                      "NetParams: tensor order does not match the configuration");
      detail::require(w.values.size() == static_cast<std::size_t>(l.geom.out) * l.geom.fan_in() &&
                          b.values.size() == static_cast<std::size_t>(l.geom.out),
                      "NetParams: tensor '" + l.name + "' has the wrong size");
    }
  }

  Tensor conv(const NetParams& p, const std::string& name, const Tensor& in) const {
    const auto& l = layer(name);
    return conv_forward(in, p.tensors[l.weight].values, p.tensors[l.weight + 1].values, l.geom);
  }

  void conv_back(const NetParams& p, const std::string& name, const Tensor& in, const Tensor& gout,
                 Gradients& grads, Tensor* gin) const {
    const auto& l = layer(name);
    conv_backward(in, p.tensors[l.weight].values, l.geom, gout, grads[l.weight],
                  grads[l.weight + 1], gin);
  }

  std::array<int, 3> factor(int levels) const {
    std::array<int, 3> f{1, 1, 1};
    for (int a = 0; a < 3; ++a)
      for (int i = 0; i < levels; ++i) f[a] *= s2_[a];
    return f;
  }

  Tensor forward(const NetParams& p, const Tensor& input, bool train, Rng* rng, Cache& c) const {
    detail::require<ShapeError>(input.channels == cfg_.in_channels,
                                "forward: input has " + std::to_string(input.channels) +
                                    " channels, network expects " +
                                    std::to_string(cfg_.in_channels));
    const bool dropout = train && cfg_.dropout_rate > 0.0;
    detail::require(!dropout || rng != nullptr, "forward: train mode needs an rng");
    const double keep = 1.0 - cfg_.dropout_rate;
    c = Cache{};
    c.input = input;
    c.ctx.resize(cfg_.depth);
    for (int l = 0; l < cfg_.depth; ++l) {
      auto& r = c.ctx[l];
      const std::string n = std::to_string(l);
      r.h = l == 0 ? conv(p, "stem", input) : conv(p, "down" + n, c.ctx[l - 1].out);
      r.a1 = elu(r.h);
      r.z1 = conv(p, "ctx" + n + ".conv1", r.a1);
      r.a2 = elu(r.z1);
      r.d = r.a2;
      if (dropout) {
        r.mask.resize(r.d.v.size());
        for (std::size_t i = 0; i < r.mask.size(); ++i) {
          r.mask[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
          r.d.v[i] *= r.mask[i];
        }
      }
      r.z2 = conv(p, "ctx" + n + ".conv2", r.d);
      r.out = r.h;
      add_into(r.out, r.z2);
    }
    const Shape full = c.ctx[0].out.shape;
    c.loc.resize(cfg_.depth - 1);
    c.seg.resize(cfg_.depth - 1);
    c.logits = Tensor(cfg_.out_channels(), full);
    for (int l = cfg_.depth - 2; l >= 0; --l) {
      auto& lc = c.loc[l];
      const std::string n = std::to_string(l);
      const Tensor& below = l == cfg_.depth - 2 ? c.ctx[l + 1].out : c.loc[l + 1].out;
      lc.up = upsample(below, c.ctx[l].out.shape, factor(1));
      lc.cat = concat(lc.up, c.ctx[l].out);
      lc.z3 = conv(p, "loc" + n + ".conv3", lc.cat);
      lc.a3 = elu(lc.z3);
      lc.z1 = conv(p, "loc" + n + ".conv1", lc.a3);
      lc.out = elu(lc.z1);
      if (uses_seg(l)) {
        c.seg[l] = conv(p, "seg" + n, lc.out);
        add_into(c.logits, l == 0 ? c.seg[l] : upsample(c.seg[l], full, factor(l)));
      }
    }
    return c.logits;
  }

  // Reverse pass from d(loss)/d(logits); returns parameter gradients.
  Gradients backward(const NetParams& p, const Cache& c, const Tensor& glogits) const {
    Gradients g(p.tensors.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i].assign(p.tensors[i].values.size(), 0.0);
    const int depth = cfg_.depth;
    std::vector<Tensor> gloc(depth - 1), gctx(depth);
    for (int l = 0; l < depth - 1; ++l) gloc[l] = Tensor(c.loc[l].out.channels, c.loc[l].out.shape);
    for (int l = 0; l < depth; ++l) gctx[l] = Tensor(c.ctx[l].out.channels, c.ctx[l].out.shape);

    for (int l = 0; l < depth - 1; ++l) {
      if (!uses_seg(l)) continue;
      const Tensor gseg = l == 0 ? glogits : upsample_backward(glogits, c.seg[l].shape, factor(l));
      conv_back(p, "seg" + std::to_string(l), c.loc[l].out, gseg, g, &gloc[l]);
    }
    for (int l = 0; l < depth - 1; ++l) {
      const auto& lc = c.loc[l];
      const std::string n = std::to_string(l);
      Tensor gz1 = gloc[l];
      elu_backward(lc.z1, gz1);
      Tensor ga3(lc.a3.channels, lc.a3.shape);
      conv_back(p, "loc" + n + ".conv1", lc.a3, gz1, g, &ga3);
      elu_backward(lc.z3, ga3);
      Tensor gcat(lc.cat.channels, lc.cat.shape);
      conv_back(p, "loc" + n + ".conv3", lc.cat, ga3, g, &gcat);
      // split concat gradient: [upsampled | skip]
      const std::size_t nup = lc.up.v.size();
      Tensor gup(lc.up.channels, lc.up.shape);
      std::copy(gcat.v.begin(), gcat.v.begin() + static_cast<std::ptrdiff_t>(nup), gup.v.begin());
      for (std::size_t i = 0; i < gctx[l].v.size(); ++i) gctx[l].v[i] += gcat.v[nup + i];
      const bool from_ctx = l == depth - 2;
      const Shape& src = from_ctx ? c.ctx[l + 1].out.shape : c.loc[l + 1].out.shape;
      add_into(from_ctx ? gctx[l + 1] : gloc[l + 1], upsample_backward(gup, src, factor(1)));
    }
    for (int l = depth - 1; l >= 0; --l) {
      const auto& r = c.ctx[l];
      const std::string n = std::to_string(l);
      Tensor gh = gctx[l];  // identity branch
      Tensor gd(r.d.channels, r.d.shape);
      conv_back(p, "ctx" + n + ".conv2", r.d, gctx[l], g, &gd);
      if (!r.mask.empty())
        for (std::size_t i = 0; i < gd.v.size(); ++i) gd.v[i] *= r.mask[i];
      elu_backward(r.z1, gd);
      Tensor ga1(r.a1.channels, r.a1.shape);
      conv_back(p, "ctx" + n + ".conv1", r.a1, gd, g, &ga1);
      elu_backward(r.h, ga1);
      add_into(gh, ga1);
      if (l > 0)
        conv_back(p, "down" + n, c.ctx[l - 1].out, gh, g, &gctx[l - 1]);
      else
        conv_back(p, "stem", c.input, gh, g, nullptr);
    }
    return g;
  }

 private:
  void add(const std::string& name, ConvGeom geom) {
    layers_.push_back({name, geom, 2 * layers_.size()});
  }

  NetConfig cfg_;
  std::array<int, 3> k3_{};
  std::array<int, 3> s2_{};
  std::vector<Layer> layers_;
};

inline void check_head(const NetConfig& cfg, const LossConfig& loss) {
  const bool softmax = loss.kind == LossKind::SoftmaxCE;
  detail::require(softmax == (cfg.head == Head::Softmax),
                  "loss '" + to_string(loss.kind) + "' does not fit the " + to_string(cfg.head) +
                      " head");
  detail::require(loss.weights.num_classes() == cfg.num_classes(),
                  "class weights do not match the network's class count");
}

// Loss on double logits; fills glogits when non-null.
inline double head_loss(const NetConfig& cfg, const Tensor& logits,
                        std::span<const std::uint8_t> labels, const LossConfig& loss,
                        Tensor* glogits) {
  std::span<double> g;
  if (glogits) {
    *glogits = Tensor(logits.channels, logits.shape);
    g = glogits->v;
  }
  if (cfg.head == Head::Softmax)
    return softmax_ce<double>(logits.v, labels, loss.weights, loss.epsilon, g);
  return multilevel_head_loss<double>(logits.v, labels, loss, cfg.activation, g);
}

}  // namespace net

inline NetParams build_network(const NetConfig& cfg) { return net::Graph(cfg).init(cfg.seed); }

/// Logits at input resolution. Dropout is active only in train mode and
/// draws its masks from rng.
inline VolumeF forward(const NetParams& params, const VolumeF& input, bool train_mode, Rng& rng) {
  net::Graph graph(params.config);
  graph.check(params);
  net::Cache cache;
  return net::to_volume(graph.forward(params, net::from_volume(input), train_mode, &rng, cache));
}

inline VolumeF forward(const NetParams& params, const VolumeF& input) {
  Rng unused(0);
  return forward(params, input, false, unused);
}

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

/// Loss only, in double precision end to end.
inline double evaluate_loss(const NetParams& params, const VolumeF& input, const LabelVolume& labels,
                            const LossConfig& loss, Rng& rng, bool train_mode = true) {
  net::check_head(params.config, loss);
  net::Graph graph(params.config);
  net::Cache cache;
  const auto logits = graph.forward(params, net::from_volume(input), train_mode, &rng, cache);
  detail::require<ShapeError>(labels.shape() == logits.shape, "loss: label shape mismatch");
  return net::head_loss(params.config, logits, labels.data(), loss, nullptr);
}

/// Loss and exact gradients of every parameter tensor.
inline LossAndGrad backward(const NetParams& params, const VolumeF& input, const LabelVolume& labels,
                            const LossConfig& loss, Rng& rng, bool train_mode = true) {
  net::check_head(params.config, loss);
  net::Graph graph(params.config);
  graph.check(params);
  net::Cache cache;
  const auto logits = graph.forward(params, net::from_volume(input), train_mode, &rng, cache);
  detail::require<ShapeError>(labels.shape() == logits.shape, "backward: label shape mismatch");
  net::Tensor glogits;
  LossAndGrad out;
  out.loss = net::head_loss(params.config, logits, labels.data(), loss, &glogits);
  if (!std::isfinite(out.loss)) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : logits.v) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    throw NumericalError("non-finite loss " + csv::fmt(out.loss) + " (logit range [" +
                         csv::fmt(lo) + ", " + csv::fmt(hi) + "])");
  }
  out.grads = graph.backward(params, cache, glogits);
  return out;
}

/// Multi-level head: activations on (0, m). Softmax head: class probabilities.
inline VolumeF predict_activations(const NetParams& params, const VolumeF& input) {
  VolumeF logits = forward(params, input);
  if (params.config.head == Head::Multilevel) return activation_map(logits, params.config.activation);
  const int nc = logits.channels();
  const std::int64_t nv = logits.voxels();
  auto d = logits.data();
  for (std::int64_t i = 0; i < nv; ++i) {
    double zmax = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < nc; ++c) zmax = std::max(zmax, double(d[c * nv + i]));
    double sum = 0.0;
    for (int c = 0; c < nc; ++c) sum += std::exp(double(d[c * nv + i]) - zmax);
    for (int c = 0; c < nc; ++c)
      d[c * nv + i] = static_cast<float>(std::exp(double(d[c * nv + i]) - zmax) / sum);
  }
  return logits;
}

/// Argmax over channels; ties go to the lower class.
inline LabelVolume argmax_labels(const VolumeF& scores) {
  LabelVolume out(scores.shape());
  const std::int64_t nv = scores.voxels();
  const auto d = scores.data();
  auto l = out.data();
  for (std::int64_t i = 0; i < nv; ++i) {
    int best = 0;
    for (int c = 1; c < scores.channels(); ++c)
      if (d[c * nv + i] > d[best * nv + i]) best = c;
    l[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Ordinal labels: threshold decoding for the multi-level head, argmax for softmax.
inline LabelVolume predict_labels(const NetParams& params, const VolumeF& input,
                                  const ThresholdScheme& scheme) {
  const VolumeF act = predict_activations(params, input);
  if (params.config.head == Head::Multilevel)
    return decode_labels(act, scheme, params.config.num_classes());
  return argmax_labels(act);
}

// ---- ADAM ----

struct AdamState {
  Gradients m;
  Gradients v;
  std::int64_t t = 0;
};

struct TrainConfig {
  double learning_rate = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int max_epochs = 60;
  int batch_size = 2;
  int patience = 10;
  double validation_fraction = 0.2;
  LossKind loss = LossKind::MCE;
  double alpha = 0.4;
  double epsilon = 1e-12;
  ThresholdScheme scheme = ThresholdScheme::preset();
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(learning_rate > 0.0, "TrainConfig: learning_rate must be > 0");
    detail::require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                    "TrainConfig: betas must lie in [0, 1)");
    detail::require(adam_eps > 0.0, "TrainConfig: adam eps must be > 0");
    detail::require(max_epochs >= 1, "TrainConfig: max_epochs must be >= 1");
    detail::require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    detail::require(patience >= 0, "TrainConfig: patience must be >= 0");
    detail::require(validation_fraction > 0.0 && validation_fraction < 1.0,
                    "TrainConfig: validation fraction must lie in (0, 1)");
  }
};

/// Bias-corrected ADAM update, in place.
inline void adam_step(NetParams& params, const Gradients& grads, AdamState& state,
                      const TrainConfig& cfg) {
  detail::require<ShapeError>(grads.size() == params.tensors.size(),
                              "adam_step: gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& t : params.tensors) {
      state.m.emplace_back(t.values.size(), 0.0);
      state.v.emplace_back(t.values.size(), 0.0);
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto& w = params.tensors[k].values;
    detail::require<ShapeError>(grads[k].size() == w.size(), "adam_step: gradient size mismatch");
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grads[k][i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      w[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
    }
  }
}

// ---- training ----

struct Sample {
  std::string id;
  VolumeF image;
  LabelVolume labels;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::vector<double> val_dice;  // per nested region
  double monitor = 0.0;          // mean of val_dice
};

struct TrainResult {
  NetParams params;  // best-monitor parameters
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_monitor = -1.0;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
  ClassWeights weights;
};

/// Seeded shuffle, validation = first round(fraction * n) (at least one).
inline void split_dataset(std::size_t n, double fraction, std::uint64_t seed,
                          std::vector<std::size_t>& train_idx, std::vector<std::size_t>& val_idx) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 1));
  rng.shuffle(order);
  auto nval = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  nval = std::max<std::size_t>(nval, 1);
  detail::require(nval < n, "split: validation split leaves no training data");
  val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nval));
  train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(nval), order.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
}

inline LossConfig make_loss_config(const NetConfig& net, const TrainConfig& tc,
                                   std::span<const Sample> data,
                                   std::span<const std::size_t> indices) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(net.num_classes()), 0);
  for (auto i : indices) {
    const auto c = class_counts(data[i].labels, net.num_classes());
    for (std::size_t k = 0; k < c.size(); ++k) counts[k] += c[k];
  }
  LossConfig lc;
  lc.kind = tc.loss;
  lc.epsilon = tc.epsilon;
  lc.weights = class_weights_from_counts(counts, tc.alpha);
  return lc;
}

/// Mean per-region Dice of the network's decoded predictions over a subset.
inline std::vector<double> validation_dice(const NetParams& params, std::span<const Sample> data,
                                           std::span<const std::size_t> indices,
                                           const ThresholdScheme& scheme) {
  const int m = params.config.num_classes() - 1;
  std::vector<double> mean(static_cast<std::size_t>(m), 0.0);
  for (auto i : indices) {
    const auto d = region_dice(predict_labels(params, data[i].image, scheme), data[i].labels, m);
    for (int c = 0; c < m; ++c) mean[c] += d[c];
  }
  for (auto& v : mean) v /= static_cast<double>(indices.size());
  return mean;
}

/// Mini-batch ADAM training with early stopping on mean validation Dice.
/// Stops once `patience` consecutive epochs fail to improve the best monitor;
/// returns the parameters of the best epoch.
template <typename EpochCallback>
TrainResult train(const NetConfig& net_cfg, const TrainConfig& tc, std::span<const Sample> data,
                  EpochCallback&& on_epoch) {
  net_cfg.validate();
  tc.validate();
  detail::require(data.size() >= 5, "train: need at least 5 samples");
  detail::require(tc.scheme.num_classes() == net_cfg.num_classes(),
                  "train: threshold scheme does not match the class count");
  TrainResult res;
  split_dataset(data.size(), tc.validation_fraction, tc.seed, res.train_indices, res.val_indices);
  detail::require(!res.train_indices.empty() && !res.val_indices.empty(), "train: empty split");
  const LossConfig loss = make_loss_config(net_cfg, tc, data, res.train_indices);
  net::check_head(net_cfg, loss);
  res.weights = loss.weights;

  NetParams params = build_network(net_cfg);
  res.params = params;
  AdamState adam;
  Rng dropout_rng(derive_seed(tc.seed, 2));
  int since_best = 0;
  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    std::vector<std::size_t> order = res.train_indices;
    Rng order_rng(derive_seed(tc.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(tc.batch_size));
      Gradients acc;
      double batch_loss = 0.0;
      for (std::size_t k = b0; k < b1; ++k) {
        const auto& s = data[order[k]];
        auto lg = backward(params, s.image, s.labels, loss, dropout_rng, true);
        batch_loss += lg.loss;
        if (acc.empty())
          acc = std::move(lg.grads);
        else
          for (std::size_t t = 0; t < acc.size(); ++t)
            for (std::size_t i = 0; i < acc[t].size(); ++i) acc[t][i] += lg.grads[t][i];
      }
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      for (auto& t : acc)
        for (auto& v : t) v *= inv;
      adam_step(params, acc, adam, tc);
      loss_sum += batch_loss * inv;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_dice = validation_dice(params, data, res.val_indices, tc.scheme);
    rec.monitor = mean_of(rec.val_dice);
    res.history.push_back(rec);
    on_epoch(rec);
    if (rec.monitor > res.best_monitor) {
      res.best_monitor = rec.monitor;
      res.best_epoch = epoch;
      res.params = params;
      since_best = 0;
    } else if (++since_best > tc.patience) {
      break;
    }
  }
  return res;
}

inline TrainResult train(const NetConfig& net_cfg, const TrainConfig& tc, std::span<const Sample> data) {
  return train(net_cfg, tc, data, [](const EpochRecord&) {});
}

inline constexpr const char* kHistoryHeader = "epoch,train_loss,dice_c1,dice_c2,dice_c3";

inline void write_history_csv(std::ostream& os, std::span<const EpochRecord> history) {
  os << "epoch,train_loss";
  const std::size_t m = history.empty() ? 3 : history.front().val_dice.size();
  for (std::size_t c = 1; c <= m; ++c) os << ",dice_c" << c;
  os << '\n';
  for (const auto& r : history) {
    os << r.epoch << ',' << csv::fmt(r.train_loss);
    for (double d : r.val_dice) os << ',' << csv::fmt(d);
    os << '\n';
  }
}

inline std::vector<EpochRecord> read_history_csv(std::istream& is) {
  std::vector<EpochRecord> out;
  for (const auto& row : csv::read(is, kHistoryHeader)) {
    EpochRecord r;
    r.epoch = static_cast<int>(csv::parse_int(row[0]));
    r.train_loss = csv::parse(row[1]);
    for (std::size_t c = 2; c < row.size(); ++c) r.val_dice.push_back(csv::parse(row[c]));
    r.monitor = mean_of(r.val_dice);
    out.push_back(std::move(r));
  }
  return out;
}

// ---- configuration serialization ----

inline void to_json(nlohmann::json& j, const ActivationSpec& a) {
  j = {{"num_classes", a.num_classes}, {"spacing", a.spacing}, {"steepness", a.steepness}};
}
inline void from_json(const nlohmann::json& j, ActivationSpec& a) {
  if (j.contains("num_classes")) a.num_classes = j.at("num_classes").get<int>();
  if (j.contains("spacing")) a.spacing = j.at("spacing").get<double>();
  if (j.contains("steepness")) a.steepness = j.at("steepness").get<double>();
}

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = {{"spatial_dims", c.spatial_dims},   {"depth", c.depth},
       {"base_filters", c.base_filters},   {"in_channels", c.in_channels},
       {"dropout_rate", c.dropout_rate},   {"deep_supervision", c.deep_supervision},
       {"head", to_string(c.head)},        {"activation", c.activation},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, NetConfig& c) {
  if (j.contains("spatial_dims")) c.spatial_dims = j.at("spatial_dims").get<int>();
  if (j.contains("depth")) c.depth = j.at("depth").get<int>();
  if (j.contains("base_filters")) c.base_filters = j.at("base_filters").get<int>();
  if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<int>();
  if (j.contains("dropout_rate")) c.dropout_rate = j.at("dropout_rate").get<double>();
  if (j.contains("deep_supervision")) c.deep_supervision = j.at("deep_supervision").get<bool>();
  if (j.contains("head")) c.head = parse_head(j.at("head").get<std::string>());
  if (j.contains("activation")) from_json(j.at("activation"), c.activation);
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"beta1", c.beta1},
       {"beta2", c.beta2},                 {"adam_eps", c.adam_eps},
       {"max_epochs", c.max_epochs},       {"batch_size", c.batch_size},
       {"patience", c.patience},           {"validation_fraction", c.validation_fraction},
       {"loss", to_string(c.loss)},        {"alpha", c.alpha},
       {"epsilon", c.epsilon},             {"thresholds", c.scheme.values()},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
  if (j.contains("adam_eps")) c.adam_eps = j.at("adam_eps").get<double>();
  if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("patience")) c.patience = j.at("patience").get<int>();
  if (j.contains("validation_fraction"))
    c.validation_fraction = j.at("validation_fraction").get<double>();
  if (j.contains("loss")) c.loss = parse_loss_kind(j.at("loss").get<std::string>());
  if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
  if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
  if (j.contains("thresholds"))
    c.scheme = ThresholdScheme(j.at("thresholds").get<std::vector<double>>());
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

// ---- checkpoints ----
//
// Line 1: "nestseg-checkpoint/1 <header bytes>\n", then the JSON header
// (network config, loss, alpha, thresholds, epoch, monitor, tensor names and
// shapes, validation case ids), then all tensors as little-endian float64 in
// header order.

struct Checkpoint {
  NetParams params;
  LossKind loss = LossKind::MCE;
  double alpha = 0.0;
  ThresholdScheme scheme = ThresholdScheme::preset();
  int epoch = 0;
  double monitor = 0.0;
  std::vector<std::string> val_cases;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr const char* kCheckpointMagic = "nestseg-checkpoint/1";

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<double> flat;
  for (const auto& t : ck.params.tensors) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}});
    flat.insert(flat.end(), t.values.begin(), t.values.end());
  }
  // monitor is kept as exact text so it survives the round trip bit-for-bit
  nlohmann::json h = {{"config", ck.params.config}, {"loss", to_string(ck.loss)},
                      {"alpha", csv::fmt(ck.alpha)},  {"thresholds", to_string(ck.scheme)},
                      {"epoch", ck.epoch},            {"monitor", csv::fmt(ck.monitor)},
                      {"tensors", tensors},           {"val_cases", ck.val_cases}};
  const std::string header = h.dump();
  const auto payload = io::to_le_bytes<double>(flat);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << kCheckpointMagic << ' ' << header.size() << '\n' << header;
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw DataError("write failed: '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_bytes(path);
  const auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t('\n'));
  if (nl == bytes.end()) throw CorruptHeaderError("checkpoint '" + path.string() + "': no header line");
  std::istringstream first(std::string(bytes.begin(), nl));
  std::string magic;
  std::size_t hlen = 0;
  if (!(first >> magic >> hlen) || magic != kCheckpointMagic)
    throw CorruptHeaderError("checkpoint '" + path.string() + "': bad magic");
  const std::size_t hstart = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  if (hstart + hlen > bytes.size())
    throw TruncatedPayloadError("checkpoint '" + path.string() + "': truncated header");
  Checkpoint ck;
  std::size_t total = 0;
  nlohmann::json tensors;
  try {
    const auto h = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(hstart),
                                         bytes.begin() + static_cast<std::ptrdiff_t>(hstart + hlen));
    ck.params.config = h.at("config").get<NetConfig>();
    ck.loss = parse_loss_kind(h.at("loss").get<std::string>());
    ck.alpha = csv::parse(h.at("alpha").get<std::string>());
    ck.scheme = parse_thresholds(h.at("thresholds").get<std::string>());
    ck.epoch = h.at("epoch").get<int>();
    ck.monitor = csv::parse(h.at("monitor").get<std::string>());
    ck.val_cases = h.at("val_cases").get<std::vector<std::string>>();
    tensors = h.at("tensors");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError("checkpoint '" + path.string() + "': " + e.what());
  }
  for (const auto& t : tensors) {
    ParamTensor p{t.at("name").get<std::string>(), t.at("shape").get<std::vector<int>>(), {}};
    std::size_t n = 1;
    for (int d : p.shape) n *= static_cast<std::size_t>(d);
    p.values.resize(n);
    total += n;
    ck.params.tensors.push_back(std::move(p));
  }
  const std::size_t pstart = hstart + hlen;
  const std::size_t need = total * sizeof(double);
  if (bytes.size() - pstart < need)
    throw TruncatedPayloadError("checkpoint '" + path.string() + "': truncated payload");
  if (bytes.size() - pstart > need)
    throw HeaderMismatchError("checkpoint '" + path.string() + "': payload longer than header says");
  const auto flat = io::from_le_bytes<double>(
      std::span<const std::uint8_t>(bytes.data() + pstart, need));
  std::size_t off = 0;
  for (auto& t : ck.params.tensors) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + t.values.size()), t.values.begin());
    off += t.values.size();
  }
  net::Graph(ck.params.config).check(ck.params);
  return ck;
}

}  // namespace nestseg
