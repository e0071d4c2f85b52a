#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "psieve/common.hpp"
#include "psieve/dataset.hpp"
#include "psieve/net.hpp"

namespace psieve::lrp {

using data::Image;
using net::LayerDef;
using net::LayerKind;
using net::NetworkSpec;
using net::Params;
using net::Tape;
using net::Tensor;

struct LrpConfig {
  // Per layer, the stabilizer is eps_scale times the mean absolute
  // pre-activation, added to each denominator with matching sign.
  double eps_scale = 1e-6;

  void validate() const {
    if (eps_scale <= 0) throw ParameterError("relevance stabilizer scale must be positive");
  }
};

// Pixel relevance for one class logit of one image, summed over channels.
struct RelevanceMap {
  uint32_t id = 0;             // caller-chosen sample id
  uint16_t explained = 0;      // class whose logit is decomposed
  double logit = 0;            // value of that logit
  int h = data::kImageSide, w = data::kImageSide;
  std::vector<double> r;       // h * w, row major

  double total() const {
    double s = 0;
    for (double v : r) s += v;
    return s;
  }
  double at(int row, int col) const { return r[size_t(row) * size_t(w) + size_t(col)]; }
};

namespace detail {

// Redistributes the relevance of one linear unit y_j = sum_i w_ji x_i + b_j
// onto its inputs with the epsilon rule, then hands the held-back remainder
// (bias and stabilizer share) back to the inputs proportionally to |z_ij| so
// each unit conserves its relevance exactly. A unit whose contributions all
// vanish splits the remainder uniformly.
//
// field holds the (input index, z_ij) pairs of one output; z_j is the taped
// pre-activation, r_j the relevance arriving at that output.
inline void spread_unit(const std::vector<std::pair<int, double>>& field, double z_j, double r_j,
                        double eps, std::vector<double>& r_in) {
  const double d = z_j + std::copysign(eps, z_j);
  double base_sum = 0, abs_sum = 0;
  for (const auto& [idx, z] : field) {
    double share = z / d * r_j;
    r_in[size_t(idx)] += share;
    base_sum += share;
    abs_sum += std::abs(z);
  }
  const double residual = r_j - base_sum;
  if (abs_sum > 0) {
    for (const auto& [idx, z] : field) r_in[size_t(idx)] += residual * std::abs(z) / abs_sum;
  } else if (!field.empty()) {
    const double each = residual / double(field.size());
    for (const auto& p : field) r_in[size_t(p.first)] += each;
  }
}

// Double-precision weights per layer; batchnorm layers get their preceding
// conv folded in (evaluation-mode batchnorm is affine per channel), so the
// conv+bn pair redistributes relevance as a single linear unit.
struct FoldedNet {
  Params<double> pd;
  std::vector<std::vector<double>> w, b;  // per layer; empty if not a unit here
  std::vector<int> unit_input;            // layer whose output feeds the unit, -1 otherwise

  template <typename Real>
  FoldedNet(const NetworkSpec& spec, const Params<Real>& params)
      : pd(Params<double>::cast(params)) {
    const size_t L = spec.layers.size();
    w.resize(L);
    b.resize(L);
    unit_input.assign(L, -1);
    for (size_t li = 0; li < L; ++li) {
      const LayerDef& Ld = spec.layers[li];
      if (Ld.kind == LayerKind::conv || Ld.kind == LayerKind::dense) {
        w[li] = pd.at[li].w;
        b[li] = pd.at[li].b;
        unit_input[li] = Ld.inputs[0];
      } else if (Ld.kind == LayerKind::batchnorm) {
        const LayerDef& prev = spec.layers[size_t(Ld.inputs[0])];
        if (prev.kind != LayerKind::conv)
          throw ParameterError("relevance pass expects batchnorm directly after a conv, got " +
                               prev.name + " -> " + Ld.name);
        const auto& bn = pd.at[li];
        const auto& cv = pd.at[size_t(Ld.inputs[0])];
        const size_t K = size_t(prev.c_in) * prev.k * prev.k;
        w[li].resize(cv.w.size());
        b[li].resize(size_t(prev.c_out));
        for (int co = 0; co < prev.c_out; ++co) {
          const double a = bn.gamma[size_t(co)] / std::sqrt(bn.run_var[size_t(co)] + net::kBnEps);
          const double c = bn.beta[size_t(co)] - a * bn.run_mean[size_t(co)];
          for (size_t t = 0; t < K; ++t)
            w[li][size_t(co) * K + t] = a * cv.w[size_t(co) * K + t];
          b[li][size_t(co)] = a * cv.b[size_t(co)] + c;
        }
        unit_input[li] = prev.inputs[0];
      }
    }
  }
};

// Mean absolute value of one sample's slice of a taped layer output.
inline double mean_abs(const Tensor<double>& t, int ni) {
  const double* p = t.sample(ni);
  double s = 0;
  for (int j = 0; j < t.chw(); ++j) s += std::abs(p[j]);
  return s / double(t.chw());
}

// Relevance pass for one sample of a taped eval-mode forward. Returns the
// per-pixel relevance of the raw image (channel-summed); the fixed input
// normalization is elementwise, so relevance passes through it unchanged.
inline std::vector<double> relevance_for_sample(const NetworkSpec& spec, const FoldedNet& fold,
                                                const Tape<double>& tape, int ni, uint16_t cls,
                                                const LrpConfig& cfg) {
  const size_t L = spec.layers.size();
  std::vector<std::vector<double>> R(L);
  auto r_at = [&](size_t li) -> std::vector<double>& {
    if (R[li].empty()) R[li].assign(size_t(tape.out[li].chw()), 0.0);
    return R[li];
  };

  const double f = tape.logits().sample(ni)[cls];
  r_at(L - 1)[cls] = f;

  std::vector<std::pair<int, double>> field;
  for (size_t li = L; li-- > 1;) {
    if (R[li].empty()) continue;  // no relevance reached this output
    const LayerDef& Ld = spec.layers[li];
    const std::vector<double>& r_out = R[li];
    const Tensor<double>& y = tape.out[li];

    switch (Ld.kind) {
      case LayerKind::input:
        break;
      case LayerKind::relu:
      case LayerKind::flatten: {
        auto& r_in = r_at(size_t(Ld.inputs[0]));
        for (size_t j = 0; j < r_out.size(); ++j) r_in[j] += r_out[j];
        break;
      }
      case LayerKind::concat: {
        size_t off = 0;
        for (int in : Ld.inputs) {
          auto& r_in = r_at(size_t(in));
          for (size_t j = 0; j < r_in.size(); ++j) r_in[j] += r_out[off + j];
          off += r_in.size();
        }
        break;
      }
      case LayerKind::maxpool: {
        const Tensor<double>& x = tape.out[size_t(Ld.inputs[0])];
        auto& r_in = r_at(size_t(Ld.inputs[0]));
        const auto& src = tape.pool_src[li];
        const size_t out_off = size_t(ni) * size_t(y.chw());
        const int64_t in_off = int64_t(ni) * x.chw();
        for (size_t j = 0; j < r_out.size(); ++j)
          r_in[size_t(src[out_off + j] - in_off)] += r_out[j];
        break;
      }
      case LayerKind::avgpool: {
        const Tensor<double>& x = tape.out[size_t(Ld.inputs[0])];
        auto& r_in = r_at(size_t(Ld.inputs[0]));
        const double* px = x.sample(ni);
        const double* pz = y.sample(ni);
        const double inv = 1.0 / double(Ld.k * Ld.k);
        const double eps = cfg.eps_scale * mean_abs(y, ni) + 1e-300;
        size_t o = 0;
        for (int ci = 0; ci < x.c; ++ci)
          for (int oy = 0; oy < y.h; ++oy)
            for (int ox = 0; ox < y.w; ++ox, ++o) {
              if (r_out[o] == 0) continue;
              field.clear();
              for (int dy = 0; dy < Ld.k; ++dy) {
                int iy = oy * Ld.stride - Ld.pad + dy;
                if (iy < 0 || iy >= x.h) continue;
                for (int dx = 0; dx < Ld.k; ++dx) {
                  int ix = ox * Ld.stride - Ld.pad + dx;
                  if (ix < 0 || ix >= x.w) continue;
                  int idx = (ci * x.h + iy) * x.w + ix;
                  field.emplace_back(idx, px[idx] * inv);
                }
              }
              spread_unit(field, pz[o], r_out[o], eps, r_in);
            }
        break;
      }
      case LayerKind::dense: {
        const Tensor<double>& x = tape.out[size_t(Ld.inputs[0])];
        auto& r_in = r_at(size_t(Ld.inputs[0]));
        const double* px = x.sample(ni);
        const double* pz = y.sample(ni);
        const double eps = cfg.eps_scale * mean_abs(y, ni) + 1e-300;
        for (int j = 0; j < Ld.d_out; ++j) {
          if (r_out[size_t(j)] == 0) continue;
          const double* wr = fold.w[li].data() + size_t(j) * Ld.d_in;
          field.clear();
          for (int i = 0; i < Ld.d_in; ++i) field.emplace_back(i, wr[i] * px[i]);
          spread_unit(field, pz[size_t(j)], r_out[size_t(j)], eps, r_in);
        }
        break;
      }
      case LayerKind::conv:
      case LayerKind::batchnorm: {
        // A standalone conv, or a conv+bn pair folded into one linear unit.
        if (Ld.kind == LayerKind::batchnorm &&
            spec.layers[size_t(Ld.inputs[0])].kind != LayerKind::conv)
          throw ParameterError("relevance pass expects batchnorm directly after a conv");
        const LayerDef& cd =
            Ld.kind == LayerKind::conv ? Ld : spec.layers[size_t(Ld.inputs[0])];
        const int in = fold.unit_input[li];
        const Tensor<double>& x = tape.out[size_t(in)];
        auto& r_in = r_at(size_t(in));
        const double* px = x.sample(ni);
        const double* pz = y.sample(ni);
        const double eps = cfg.eps_scale * mean_abs(y, ni) + 1e-300;
        const size_t K = size_t(cd.c_in) * cd.k * cd.k;
        size_t o = 0;
        for (int co = 0; co < cd.c_out; ++co) {
          const double* wr = fold.w[li].data() + size_t(co) * K;
          for (int oy = 0; oy < y.h; ++oy)
            for (int ox = 0; ox < y.w; ++ox, ++o) {
              if (r_out[o] == 0) continue;
              field.clear();
              for (int ci = 0; ci < cd.c_in; ++ci)
                for (int dy = 0; dy < cd.k; ++dy) {
                  int iy = oy * cd.stride - cd.pad + dy;
                  if (iy < 0 || iy >= x.h) continue;
                  for (int dx = 0; dx < cd.k; ++dx) {
                    int ix = ox * cd.stride - cd.pad + dx;
                    if (ix < 0 || ix >= x.w) continue;
                    int idx = (ci * x.h + iy) * x.w + ix;
                    field.emplace_back(idx, wr[(size_t(ci) * cd.k + dy) * cd.k + dx] * px[idx]);
                  }
                }
              spread_unit(field, pz[o], r_out[o], eps, r_in);
            }
        }
        break;
      }
    }
  }

  // Channel-summed pixel relevance of the (normalized) input.
  const Tensor<double>& in0 = tape.out[0];
  std::vector<double> map(size_t(in0.h) * size_t(in0.w), 0.0);
  if (!R[0].empty()) {
    const int hw = in0.h * in0.w;
    for (int ci = 0; ci < in0.c; ++ci)
      for (int j = 0; j < hw; ++j) map[size_t(j)] += R[0][size_t(ci * hw + j)];
  }
  return map;
}

}  // namespace detail

// Relevance maps for one unit-interval input batch, one map per (sample,
// explained class) pair. Memory grows with the batch; the image overload
// below chunks for large counts.
template <typename Real>
std::vector<RelevanceMap> relevance_maps_tensor(const NetworkSpec& spec,
                                                const Params<Real>& params,
                                                const Tensor<double>& input,
                                                const std::vector<uint16_t>& classes,
                                                const std::vector<uint32_t>& ids = {},
                                                const LrpConfig& cfg = {}) {
  cfg.validate();
  if (size_t(input.n) != classes.size()) throw ParameterError("sample/class count mismatch");
  if (!ids.empty() && ids.size() != classes.size())
    throw ParameterError("sample/id count mismatch");
  for (uint16_t c : classes)
    if (int(c) >= spec.num_classes) throw ParameterError("explained class out of range");

  detail::FoldedNet fold(spec, params);
  Tape<double> tape;
  net::forward(spec, fold.pd, input, tape, false);

  std::vector<RelevanceMap> maps(classes.size());
  parallel_for(int64_t(classes.size()), [&](int64_t k) {
    RelevanceMap& m = maps[size_t(k)];
    m.id = ids.empty() ? uint32_t(k) : ids[size_t(k)];
    m.explained = classes[size_t(k)];
    m.logit = tape.logits().sample(int(k))[classes[size_t(k)]];
    m.h = input.h;
    m.w = input.w;
    m.r = detail::relevance_for_sample(spec, fold, tape, int(k), classes[size_t(k)], cfg);
  });
  return maps;
}

// Relevance maps for a batch of images. Ids default to the batch position.
template <typename Real>
std::vector<RelevanceMap> relevance_maps(const NetworkSpec& spec, const Params<Real>& params,
                                         const std::vector<const Image*>& imgs,
                                         const std::vector<uint16_t>& classes,
                                         const std::vector<uint32_t>& ids = {},
                                         const LrpConfig& cfg = {}) {
  if (imgs.size() != classes.size()) throw ParameterError("image/class count mismatch");
  if (!ids.empty() && ids.size() != imgs.size())
    throw ParameterError("image/id count mismatch");

  std::vector<RelevanceMap> maps;
  maps.reserve(imgs.size());
  constexpr size_t kChunk = 32;
  for (size_t begin = 0; begin < imgs.size(); begin += kChunk) {
    const size_t end = std::min(imgs.size(), begin + kChunk);
    std::vector<const Image*> chunk(imgs.begin() + long(begin), imgs.begin() + long(end));
    std::vector<uint16_t> ccls(classes.begin() + long(begin), classes.begin() + long(end));
    std::vector<uint32_t> cids(end - begin);
    for (size_t i = begin; i < end; ++i) cids[i - begin] = ids.empty() ? uint32_t(i) : ids[i];
    auto part = relevance_maps_tensor(spec, params, net::images_to_tensor<double>(chunk), ccls,
                                      cids, cfg);
    for (auto& m : part) maps.push_back(std::move(m));
  }
  return maps;
}

template <typename Real>
RelevanceMap relevance_map(const NetworkSpec& spec, const Params<Real>& params, const Image& img,
                           uint16_t cls, const LrpConfig& cfg = {}) {
  return relevance_maps(spec, params, {&img}, {cls}, {}, cfg)[0];
}

// ---------------------------------------------------------------------------
// Point clouds
// ---------------------------------------------------------------------------

// Weighted pixel positions carrying the top share of positive relevance,
// sorted by weight descending (ties by row, then column). Weights sum to 1.
struct PointCloud {
  std::vector<double> rows, cols;
  std::vector<double> weights;

  size_t size() const { return weights.size(); }
};

// Keeps the shortest prefix of pixels (by descending relevance) that holds at
// least `quantile` of the total positive relevance, then renormalizes. A map
// with no positive relevance cannot form a cloud.
inline PointCloud top_relevance_cloud(const RelevanceMap& m, double quantile = 0.99) {
  if (quantile <= 0 || quantile > 1) throw ParameterError("cloud quantile must be in (0,1]");
  std::vector<std::tuple<double, int, int>> pos;  // (-relevance, row, col) for one-key sorting
  double total = 0;
  for (int row = 0; row < m.h; ++row)
    for (int col = 0; col < m.w; ++col) {
      double v = m.at(row, col);
      if (v > 0) {
        pos.emplace_back(-v, row, col);
        total += v;
      }
    }
  if (pos.empty())
    throw DegenerateMapError("relevance map for sample " + std::to_string(m.id) +
                             " has no positive relevance");
  std::sort(pos.begin(), pos.end());

  PointCloud cloud;
  double cum = 0;
  for (const auto& [nv, row, col] : pos) {
    cloud.rows.push_back(double(row));
    cloud.cols.push_back(double(col));
    cloud.weights.push_back(-nv);
    cum += -nv;
    if (cum + 1e-12 * total >= quantile * total) break;
  }
  for (double& w : cloud.weights) w /= cum;
  return cloud;
}

// Keeps the cap heaviest points of a descending-sorted cloud, renormalized.
inline void decimate_cloud(PointCloud& c, size_t cap) {
  if (cap == 0) throw ParameterError("cloud cap must be positive");
  if (c.size() <= cap) return;
  c.rows.resize(cap);
  c.cols.resize(cap);
  c.weights.resize(cap);
  double s = 0;
  for (double w : c.weights) s += w;
  for (double& w : c.weights) w /= s;
}

// ---------------------------------------------------------------------------
// Heatmap file format: "PSHM", version, count, H, W, then per map the id,
// explained class, logit, and H*W float32 relevances.
// ---------------------------------------------------------------------------

constexpr uint16_t kHeatmapVersion = 1;

inline void save_heatmaps_stream(const std::vector<RelevanceMap>& maps, std::ostream& os) {
  const int h = maps.empty() ? data::kImageSide : maps[0].h;
  const int w = maps.empty() ? data::kImageSide : maps[0].w;
  io::write_bytes(os, "PSHM", 4);
  io::write_u16(os, kHeatmapVersion);
  io::write_u32(os, uint32_t(maps.size()));
  io::write_u8(os, uint8_t(h));
  io::write_u8(os, uint8_t(w));
  for (const auto& m : maps) {
    if (m.h != h || m.w != w || m.r.size() != size_t(h) * size_t(w))
      throw DataError("relevance maps in one file must share their size");
    io::write_u32(os, m.id);
    io::write_u16(os, m.explained);
    io::write_f32(os, float(m.logit));
    for (double v : m.r) io::write_f32(os, float(v));
  }
}

inline void save_heatmaps(const std::vector<RelevanceMap>& maps, const std::string& path) {
  io::atomic_write(path, [&](std::ostream& os) { save_heatmaps_stream(maps, os); });
}

inline std::vector<RelevanceMap> load_heatmaps_stream(std::istream& is) {
  io::expect_magic(is, "PSHM");
  io::expect_version(is, kHeatmapVersion);
  uint32_t n = io::read_u32(is, "map count");
  int h = io::read_u8(is, "height");
  int w = io::read_u8(is, "width");
  if (h == 0 || w == 0) throw FormatError("zero heatmap size at offset 10");
  std::vector<RelevanceMap> maps(n);
  for (auto& m : maps) {
    m.id = io::read_u32(is, "map id");
    m.explained = io::read_u16(is, "map class");
    m.logit = io::read_f32(is, "map logit");
    m.h = h;
    m.w = w;
    m.r.resize(size_t(h) * size_t(w));
    for (double& v : m.r) v = io::read_f32(is, "relevance value");
  }
  return maps;
}

inline std::vector<RelevanceMap> load_heatmaps(const std::string& path) {
  auto is = io::open_input(path);
  return load_heatmaps_stream(is);
}

// Diverging render (blue = negative, white = zero, red = positive), scaled by
// the map's own absolute maximum. Binary PPM.
inline void write_heatmap_ppm(const RelevanceMap& m, const std::string& path) {
  double amax = 0;
  for (double v : m.r) amax = std::max(amax, std::abs(v));
  io::atomic_write(path, [&](std::ostream& os) {
    os << "P6\n" << m.w << " " << m.h << "\n255\n";
    for (double v : m.r) {
      double t = amax > 0 ? v / amax : 0.0;
      uint8_t rgb[3];
      if (t >= 0) {
        rgb[0] = 255;
        rgb[1] = rgb[2] = uint8_t(std::lround(255.0 * (1.0 - t)));
      } else {
        rgb[0] = rgb[1] = uint8_t(std::lround(255.0 * (1.0 + t)));
        rgb[2] = 255;
      }
      io::write_bytes(os, rgb, 3);
    }
  });
}

}  // namespace psieve::lrp
