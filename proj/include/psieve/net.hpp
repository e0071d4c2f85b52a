#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "psieve/common.hpp"
#include "psieve/netspec.hpp"
#include "psieve/tensor.hpp"

namespace psieve::net {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

template <typename Real>
struct LayerParams {
  std::vector<Real> w, b;                            // conv and dense
  std::vector<Real> gamma, beta, run_mean, run_var;  // batchnorm
};

template <typename Real>
struct Params {
  std::vector<LayerParams<Real>> at;

  template <typename Other>
  static Params cast(const Params<Other>& o) {
    Params p;
    p.at.resize(o.at.size());
    for (size_t i = 0; i < o.at.size(); ++i) {
      auto cp = [](const std::vector<Other>& src, std::vector<Real>& dst) {
        dst.assign(src.begin(), src.end());
      };
      cp(o.at[i].w, p.at[i].w);
      cp(o.at[i].b, p.at[i].b);
      cp(o.at[i].gamma, p.at[i].gamma);
      cp(o.at[i].beta, p.at[i].beta);
      cp(o.at[i].run_mean, p.at[i].run_mean);
      cp(o.at[i].run_var, p.at[i].run_var);
    }
    return p;
  }
};

// Kaiming-normal weights, zero biases, identity batchnorm.
template <typename Real>
Params<Real> init_params(const NetworkSpec& spec, uint64_t seed) {
  auto sh = spec.shapes();
  Params<Real> p;
  p.at.resize(spec.layers.size());
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDef& L = spec.layers[i];
    LayerParams<Real>& lp = p.at[i];
    Rng rng(seed_mix({seed, 0x6e6574u, i}));
    if (L.kind == LayerKind::conv) {
      size_t fan_in = size_t(L.c_in) * L.k * L.k;
      double std = std::sqrt(2.0 / double(fan_in));
      lp.w.resize(size_t(L.c_out) * fan_in);
      for (auto& v : lp.w) v = Real(rng.next_normal() * std);
      lp.b.assign(size_t(L.c_out), Real(0));
    } else if (L.kind == LayerKind::dense) {
      double std = std::sqrt(2.0 / double(L.d_in));
      lp.w.resize(size_t(L.d_out) * L.d_in);
      for (auto& v : lp.w) v = Real(rng.next_normal() * std);
      lp.b.assign(size_t(L.d_out), Real(0));
    } else if (L.kind == LayerKind::batchnorm) {
      size_t c = size_t(sh[i].c);
      lp.gamma.assign(c, Real(1));
      lp.beta.assign(c, Real(0));
      lp.run_mean.assign(c, Real(0));
      lp.run_var.assign(c, Real(1));
    }
  }
  return p;
}

// Rejects parameter blocks whose sizes do not match the network.
template <typename Real>
void check_params(const NetworkSpec& spec, const Params<Real>& p) {
  if (p.at.size() != spec.layers.size())
    throw ParameterError("parameter table holds " + std::to_string(p.at.size()) +
                         " layers, network has " + std::to_string(spec.layers.size()));
  auto sh = spec.shapes();
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDef& L = spec.layers[i];
    const LayerParams<Real>& lp = p.at[i];
    auto fail = [&] {
      throw ParameterError("parameter sizes for layer " + L.name + " do not match the network");
    };
    if (L.kind == LayerKind::conv) {
      if (lp.w.size() != size_t(L.c_out) * L.c_in * L.k * L.k || lp.b.size() != size_t(L.c_out))
        fail();
    } else if (L.kind == LayerKind::dense) {
      if (lp.w.size() != size_t(L.d_out) * L.d_in || lp.b.size() != size_t(L.d_out)) fail();
    } else if (L.kind == LayerKind::batchnorm) {
      size_t c = size_t(sh[i].c);
      if (lp.gamma.size() != c || lp.beta.size() != c || lp.run_mean.size() != c ||
          lp.run_var.size() != c)
        fail();
    }
  }
}

// Everything the backward pass needs. out[i] is layer i's output for the
// current batch; pool_src holds each maxpool winner as a flat index into the
// pool's input tensor.
template <typename Real>
struct Tape {
  bool train_mode = false;
  std::vector<Tensor<Real>> out;
  std::vector<std::vector<int64_t>> pool_src;
  std::vector<std::vector<Real>> bn_mean, bn_var;

  const Tensor<Real>& logits() const { return out.back(); }
};

namespace detail {

template <typename Real>
void im2col(const Real* x, int c_in, int h, int w, int k, int stride, int pad, MatCM<Real>& col) {
  int oh = (h + 2 * pad - k) / stride + 1;
  int ow = (w + 2 * pad - k) / stride + 1;
  col.resize(c_in * k * k, oh * ow);
  for (int ci = 0; ci < c_in; ++ci)
    for (int dy = 0; dy < k; ++dy)
      for (int dx = 0; dx < k; ++dx) {
        int r = (ci * k + dy) * k + dx;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + dy;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + dx;
            bool in = iy >= 0 && iy < h && ix >= 0 && ix < w;
            col(r, oy * ow + ox) = in ? x[(size_t(ci) * h + iy) * w + ix] : Real(0);
          }
        }
      }
}

template <typename Real>
void col2im_add(const MatCM<Real>& col, int c_in, int h, int w, int k, int stride, int pad,
                Real* dx) {
  int oh = (h + 2 * pad - k) / stride + 1;
  int ow = (w + 2 * pad - k) / stride + 1;
  for (int ci = 0; ci < c_in; ++ci)
    for (int dy = 0; dy < k; ++dy)
      for (int dx_ = 0; dx_ < k; ++dx_) {
        int r = (ci * k + dy) * k + dx_;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + dy;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + dx_;
            if (ix < 0 || ix >= w) continue;
            dx[(size_t(ci) * h + iy) * w + ix] += col(r, oy * ow + ox);
          }
        }
      }
}

}  // namespace detail

// Forward pass. Input is a unit-interval image tensor; the fixed input
// normalization (x - 0.5) / 0.5 is part of the network itself. Evaluation
// mode reads batchnorm running statistics; training mode uses batch
// statistics and updates the running ones in params.
template <typename Real>
void forward(const NetworkSpec& spec, Params<Real>& params, const Tensor<Real>& input,
             Tape<Real>& tape, bool train_mode) {
  if (input.c != spec.input_c || input.h != spec.input_h || input.w != spec.input_w)
    throw ParameterError("input tensor shape " + input.shape_str() + " does not match network");
  if (input.n == 0) throw DataError("empty batch");
  check_params(spec, params);

  auto sh = spec.shapes();
  const size_t L = spec.layers.size();
  // resize (not assign) so per-slot buffers keep their capacity across calls
  tape.train_mode = train_mode;
  tape.out.resize(L);
  tape.pool_src.resize(L);
  tape.bn_mean.resize(L);
  tape.bn_var.resize(L);
  const int N = input.n;

  tape.out[0].resize(N, spec.input_c, spec.input_h, spec.input_w);
  for (size_t i = 0; i < input.v.size(); ++i)
    tape.out[0].v[i] = (input.v[i] - Real(0.5)) / Real(0.5);

  for (size_t li = 1; li < L; ++li) {
    const LayerDef& Ld = spec.layers[li];
    Tensor<Real>& y = tape.out[li];
    y.resize(N, sh[li].c, sh[li].h, sh[li].w);
    switch (Ld.kind) {
      case LayerKind::input:
        throw ParameterError("input layer must be layer 0");
      case LayerKind::conv: {
        const Tensor<Real>& x = tape.out[size_t(Ld.inputs[0])];
        const LayerParams<Real>& lp = params.at[li];
        const int Kc = Ld.c_in * Ld.k * Ld.k, P = sh[li].h * sh[li].w;
        Eigen::Map<const MatRM<Real>> W(lp.w.data(), Ld.c_out, Kc);
        Eigen::Map<const VecX<Real>> b(lp.b.data(), Ld.c_out);
        MatCM<Real> col;
        for (int ni = 0; ni < N; ++ni) {
          detail::im2col(x.sample(ni), x.c, x.h, x.w, Ld.k, Ld.stride, Ld.pad, col);
          Eigen::Map<MatRM<Real>> Y(y.sample(ni), Ld.c_out, P);
          Y.noalias() = W * col;
          Y.colwise() += b;
        }
        break;
      }
      case LayerKind::batchnorm: {
        const Tensor<Real>& x = tape.out[size_t(Ld.inputs[0])];
        LayerParams<Real>& lp = params.at[li];
        const int C = x.c, HW = x.h * x.w;
        const Real M = Real(N) * Real(HW);
        auto& mean = tape.bn_mean[li];
        auto& var = tape.bn_var[li];
        mean.assign(size_t(C), Real(0));
        var.assign(size_t(C), Real(0));
        if (train_mode) {
          for (int ci = 0; ci < C; ++ci) {
            Real s = 0, s2 = 0;
            for (int ni = 0; ni < N; ++ni) {
              const Real* p = x.sample(ni) + size_t(ci) * HW;
              for (int j = 0; j < HW; ++j) {
                s += p[j];
                s2 += p[j] * p[j];
              }
            }
            Real mu = s / M;
            Real v2 = std::max(Real(0), s2 / M - mu * mu);
            mean[size_t(ci)] = mu;
            var[size_t(ci)] = v2;
            lp.run_mean[size_t(ci)] =
                Real(1 - kBnMomentum) * lp.run_mean[size_t(ci)] + Real(kBnMomentum) * mu;
            lp.run_var[size_t(ci)] =
                Real(1 - kBnMomentum) * lp.run_var[size_t(ci)] + Real(kBnMomentum) * v2;
          }
        } else {
          for (int ci = 0; ci < C; ++ci) {
            mean[size_t(ci)] = lp.run_mean[size_t(ci)];
            var[size_t(ci)] = lp.run_var[size_t(ci)];
          }
        }
        for (int ci = 0; ci < C; ++ci) {
          const Real inv = Real(1) / std::sqrt(var[size_t(ci)] + Real(kBnEps));
          const Real g = lp.gamma[size_t(ci)], be = lp.beta[size_t(ci)], mu = mean[size_t(ci)];
          for (int ni = 0; ni < N; ++ni) {
            const Real* px = x.sample(ni) + size_t(ci) * HW;
            Real* py = y.sample(ni) + size_t(ci) * HW;
            for (int j = 0; j < HW; ++j) py[j] = g * (px[j] - mu) * inv + be;
          }
        }
        break;
      }
      case LayerKind::relu: {
        const Tensor<Real>& x = tape.out[size_t(Ld.inputs[0])];
        for (size_t j = 0; j < x.v.size(); ++j) y.v[j] = x.v[j] > Real(0) ? x.v[j] : Real(0);
        break;
      }
      case LayerKind::maxpool: {
        const Tensor<Real>& x = tape.out[size_t(Ld.inputs[0])];
        auto& src = tape.pool_src[li];
        src.assign(y.v.size(), -1);
        size_t o = 0;
        for (int ni = 0; ni < N; ++ni)
          for (int ci = 0; ci < x.c; ++ci)
            for (int oy = 0; oy < y.h; ++oy)
              for (int ox = 0; ox < y.w; ++ox, ++o) {
                Real best = -std::numeric_limits<Real>::infinity();
                int64_t bi = -1;
                for (int dy = 0; dy < Ld.k; ++dy) {
                  int iy = oy * Ld.stride - Ld.pad + dy;
                  if (iy < 0 || iy >= x.h) continue;
                  for (int dx = 0; dx < Ld.k; ++dx) {
                    int ix = ox * Ld.stride - Ld.pad + dx;
                    if (ix < 0 || ix >= x.w) continue;
                    int64_t idx = ((int64_t(ni) * x.c + ci) * x.h + iy) * x.w + ix;
                    if (x.v[size_t(idx)] > best) {
                      best = x.v[size_t(idx)];
                      bi = idx;
                    }
                  }
                }
                y.v[o] = best;
                src[o] = bi;
              }
        break;
      }
      case LayerKind::avgpool: {
        const Tensor<Real>& x = tape.out[size_t(Ld.inputs[0])];
        const Real inv = Real(1) / Real(Ld.k * Ld.k);
        size_t o = 0;
        for (int ni = 0; ni < N; ++ni)
          for (int ci = 0; ci < x.c; ++ci)
            for (int oy = 0; oy < y.h; ++oy)
              for (int ox = 0; ox < y.w; ++ox, ++o) {
                Real s = 0;
                for (int dy = 0; dy < Ld.k; ++dy) {
                  int iy = oy * Ld.stride - Ld.pad + dy;
                  if (iy < 0 || iy >= x.h) continue;
                  for (int dx = 0; dx < Ld.k; ++dx) {
                    int ix = ox * Ld.stride - Ld.pad + dx;
                    if (ix < 0 || ix >= x.w) continue;
                    s += x.at(ni, ci, iy, ix);
                  }
                }
                y.v[o] = s * inv;
              }
        break;
      }
      case LayerKind::concat: {
        for (int ni = 0; ni < N; ++ni) {
          Real* py = y.sample(ni);
          for (int in : Ld.inputs) {
            const Tensor<Real>& x = tape.out[size_t(in)];
            std::copy(x.sample(ni), x.sample(ni) + x.chw(), py);
            py += x.chw();
          }
        }
        break;
      }
      case LayerKind::flatten: {
        const Tensor<Real>& x = tape.out[size_t(Ld.inputs[0])];
        y.v = x.v;
        break;
      }
      case LayerKind::dense: {
        const Tensor<Real>& x = tape.out[size_t(Ld.inputs[0])];
        const LayerParams<Real>& lp = params.at[li];
        Eigen::Map<const MatRM<Real>> X(x.v.data(), N, Ld.d_in);
        Eigen::Map<const MatRM<Real>> W(lp.w.data(), Ld.d_out, Ld.d_in);
        Eigen::Map<const VecX<Real>> b(lp.b.data(), Ld.d_out);
        Eigen::Map<MatRM<Real>> Y(y.v.data(), N, Ld.d_out);
        Y.noalias() = X * W.transpose();
        Y.rowwise() += b.transpose();
        break;
      }
    }
  }
}

// Gradients, same shapes as Params; dinput is w.r.t. the unit-interval input.
// scratch holds per-layer output gradients and is reused across backward calls.
template <typename Real>
struct Grads {
  Params<Real> p;
  Tensor<Real> dinput;
  std::vector<Tensor<Real>> scratch;
};

template <typename Real>
Params<Real> zero_like(const Params<Real>& src) {
  Params<Real> g;
  g.at.resize(src.at.size());
  for (size_t i = 0; i < src.at.size(); ++i) {
    g.at[i].w.assign(src.at[i].w.size(), Real(0));
    g.at[i].b.assign(src.at[i].b.size(), Real(0));
    g.at[i].gamma.assign(src.at[i].gamma.size(), Real(0));
    g.at[i].beta.assign(src.at[i].beta.size(), Real(0));
  }
  return g;
}

// Backward pass over the taped forward. Accumulates parameter gradients into
// g.p (must be zero_like-initialized) and writes the input gradient.
template <typename Real>
void backward(const NetworkSpec& spec, const Params<Real>& params, const Tape<Real>& tape,
              const Tensor<Real>& dlogits, Grads<Real>& g, bool want_dinput = false) {
  const size_t L = spec.layers.size();
  const int N = tape.out[0].n;
  std::vector<Tensor<Real>>& dout = g.scratch;
  dout.resize(L);
  for (size_t i = 0; i < L; ++i)
    dout[i].resize(tape.out[i].n, tape.out[i].c, tape.out[i].h, tape.out[i].w);
  if (!dlogits.same_shape(tape.out.back()))
    throw ParameterError("dlogits shape mismatch " + dlogits.shape_str());
  dout.back().v = dlogits.v;

  for (size_t li = L; li-- > 1;) {
    const LayerDef& Ld = spec.layers[li];
    const Tensor<Real>& dy = dout[li];
    switch (Ld.kind) {
      case LayerKind::input:
        break;
      case LayerKind::conv: {
        const int in = Ld.inputs[0];
        const Tensor<Real>& x = tape.out[size_t(in)];
        Tensor<Real>& dx = dout[size_t(in)];
        const LayerParams<Real>& lp = params.at[li];
        LayerParams<Real>& lg = g.p.at[li];
        const int Kc = Ld.c_in * Ld.k * Ld.k, P = dy.h * dy.w;
        Eigen::Map<const MatRM<Real>> W(lp.w.data(), Ld.c_out, Kc);
        Eigen::Map<MatRM<Real>> dW(lg.w.data(), Ld.c_out, Kc);
        MatCM<Real> col, dcol;
        for (int ni = 0; ni < N; ++ni) {
          detail::im2col(x.sample(ni), x.c, x.h, x.w, Ld.k, Ld.stride, Ld.pad, col);
          Eigen::Map<const MatRM<Real>> dY(dy.sample(ni), Ld.c_out, P);
          dW.noalias() += dY * col.transpose();
          // Fixed-order scalar reduction: Eigen's vectorized sums split by
          // pointer alignment, which would break bit-reproducibility.
          for (int co = 0; co < Ld.c_out; ++co) {
            const Real* row = dy.sample(ni) + size_t(co) * P;
            Real s = 0;
            for (int j = 0; j < P; ++j) s += row[j];
            lg.b[size_t(co)] += s;
          }
          dcol.noalias() = W.transpose() * dY;
          detail::col2im_add(dcol, x.c, x.h, x.w, Ld.k, Ld.stride, Ld.pad, dx.sample(ni));
        }
        break;
      }
      case LayerKind::batchnorm: {
        const int in = Ld.inputs[0];
        const Tensor<Real>& x = tape.out[size_t(in)];
        Tensor<Real>& dx = dout[size_t(in)];
        const LayerParams<Real>& lp = params.at[li];
        LayerParams<Real>& lg = g.p.at[li];
        const int C = x.c, HW = x.h * x.w;
        const Real M = Real(N) * Real(HW);
        for (int ci = 0; ci < C; ++ci) {
          const Real mu = tape.bn_mean[li][size_t(ci)];
          const Real v2 = tape.bn_var[li][size_t(ci)];
          const Real inv = Real(1) / std::sqrt(v2 + Real(kBnEps));
          const Real gam = lp.gamma[size_t(ci)];
          Real sum_dy = 0, sum_dy_xhat = 0;
          for (int ni = 0; ni < N; ++ni) {
            const Real* px = x.sample(ni) + size_t(ci) * HW;
            const Real* pdy = dy.sample(ni) + size_t(ci) * HW;
            for (int j = 0; j < HW; ++j) {
              sum_dy += pdy[j];
              sum_dy_xhat += pdy[j] * (px[j] - mu) * inv;
            }
          }
          lg.gamma[size_t(ci)] += sum_dy_xhat;
          lg.beta[size_t(ci)] += sum_dy;
          if (tape.train_mode) {
            for (int ni = 0; ni < N; ++ni) {
              const Real* px = x.sample(ni) + size_t(ci) * HW;
              const Real* pdy = dy.sample(ni) + size_t(ci) * HW;
              Real* pdx = dx.sample(ni) + size_t(ci) * HW;
              for (int j = 0; j < HW; ++j) {
                Real xhat = (px[j] - mu) * inv;
                pdx[j] += gam * inv * (pdy[j] - sum_dy / M - xhat * sum_dy_xhat / M);
              }
            }
          } else {
            const Real k = gam * inv;
            for (int ni = 0; ni < N; ++ni) {
              const Real* pdy = dy.sample(ni) + size_t(ci) * HW;
              Real* pdx = dx.sample(ni) + size_t(ci) * HW;
              for (int j = 0; j < HW; ++j) pdx[j] += k * pdy[j];
            }
          }
        }
        break;
      }
      case LayerKind::relu: {
        const int in = Ld.inputs[0];
        const Tensor<Real>& yout = tape.out[li];
        Tensor<Real>& dx = dout[size_t(in)];
        for (size_t j = 0; j < dy.v.size(); ++j)
          if (yout.v[j] > Real(0)) dx.v[j] += dy.v[j];
        break;
      }
      case LayerKind::maxpool: {
        Tensor<Real>& dx = dout[size_t(Ld.inputs[0])];
        const auto& src = tape.pool_src[li];
        for (size_t j = 0; j < dy.v.size(); ++j)
          if (src[j] >= 0) dx.v[size_t(src[j])] += dy.v[j];
        break;
      }
      case LayerKind::avgpool: {
        Tensor<Real>& dx = dout[size_t(Ld.inputs[0])];
        const Real inv = Real(1) / Real(Ld.k * Ld.k);
        size_t o = 0;
        for (int ni = 0; ni < N; ++ni)
          for (int ci = 0; ci < dx.c; ++ci)
            for (int oy = 0; oy < dy.h; ++oy)
              for (int ox = 0; ox < dy.w; ++ox, ++o) {
                const Real d = dy.v[o] * inv;
                for (int dyk = 0; dyk < Ld.k; ++dyk) {
                  int iy = oy * Ld.stride - Ld.pad + dyk;
                  if (iy < 0 || iy >= dx.h) continue;
                  for (int dxk = 0; dxk < Ld.k; ++dxk) {
                    int ix = ox * Ld.stride - Ld.pad + dxk;
                    if (ix < 0 || ix >= dx.w) continue;
                    dx.at(ni, ci, iy, ix) += d;
                  }
                }
              }
        break;
      }
      case LayerKind::concat: {
        for (int ni = 0; ni < N; ++ni) {
          const Real* pdy = dy.sample(ni);
          for (int in : Ld.inputs) {
            Tensor<Real>& dx = dout[size_t(in)];
            Real* pdx = dx.sample(ni);
            for (int j = 0; j < dx.chw(); ++j) pdx[j] += pdy[j];
            pdy += dx.chw();
          }
        }
        break;
      }
      case LayerKind::flatten: {
        Tensor<Real>& dx = dout[size_t(Ld.inputs[0])];
        for (size_t j = 0; j < dy.v.size(); ++j) dx.v[j] += dy.v[j];
        break;
      }
      case LayerKind::dense: {
        const int in = Ld.inputs[0];
        const Tensor<Real>& x = tape.out[size_t(in)];
        Tensor<Real>& dx = dout[size_t(in)];
        const LayerParams<Real>& lp = params.at[li];
        LayerParams<Real>& lg = g.p.at[li];
        Eigen::Map<const MatRM<Real>> X(x.v.data(), N, Ld.d_in);
        Eigen::Map<const MatRM<Real>> dY(dy.v.data(), N, Ld.d_out);
        Eigen::Map<const MatRM<Real>> W(lp.w.data(), Ld.d_out, Ld.d_in);
        Eigen::Map<MatRM<Real>> dW(lg.w.data(), Ld.d_out, Ld.d_in);
        Eigen::Map<MatRM<Real>> dX(dx.v.data(), N, Ld.d_in);
        dW.noalias() += dY.transpose() * X;
        for (int ni = 0; ni < N; ++ni) {
          const Real* row = dy.sample(ni);
          for (int j = 0; j < Ld.d_out; ++j) lg.b[size_t(j)] += row[j];
        }
        dX.noalias() += dY * W;
        break;
      }
    }
  }

  if (want_dinput) {
    g.dinput.resize(N, spec.input_c, spec.input_h, spec.input_w);
    // out[0] = (u - 0.5) / 0.5, hence d/du = 2.
    for (size_t j = 0; j < g.dinput.v.size(); ++j) g.dinput.v[j] = dout[0].v[j] * Real(2);
  }
}

// Mean cross-entropy over the batch; optional gradient w.r.t. logits.
template <typename Real>
Real softmax_ce_loss(const Tensor<Real>& logits, const std::vector<uint16_t>& labels,
                     Tensor<Real>* dlogits = nullptr) {
  const int N = logits.n, K = logits.c;
  if (int(labels.size()) != N) throw ParameterError("label count mismatch");
  if (dlogits) dlogits->resize(N, K, 1, 1);
  Real total = 0;
  for (int ni = 0; ni < N; ++ni) {
    const Real* f = logits.sample(ni);
    Real m = f[0];
    for (int j = 1; j < K; ++j) m = std::max(m, f[j]);
    Real se = 0;
    for (int j = 0; j < K; ++j) se += std::exp(f[j] - m);
    Real lse = m + std::log(se);
    total += lse - f[labels[size_t(ni)]];
    if (dlogits) {
      Real* d = dlogits->sample(ni);
      for (int j = 0; j < K; ++j) {
        Real p = std::exp(f[j] - m) / se;
        d[j] = (p - (j == labels[size_t(ni)] ? Real(1) : Real(0))) / Real(N);
      }
    }
  }
  return total / Real(N);
}

template <typename Real>
std::vector<Real> softmax_row(const Tensor<Real>& logits, int ni) {
  const int K = logits.c;
  const Real* f = logits.sample(ni);
  Real m = f[0];
  for (int j = 1; j < K; ++j) m = std::max(m, f[j]);
  Real se = 0;
  std::vector<Real> p(static_cast<size_t>(K));
  for (int j = 0; j < K; ++j) se += std::exp(f[j] - m);
  for (int j = 0; j < K; ++j) p[size_t(j)] = std::exp(f[j] - m) / se;
  return p;
}

// argmax with ties broken toward the smallest class index.
template <typename Real>
std::vector<int> argmax_predict(const Tensor<Real>& logits) {
  std::vector<int> pred(size_t(logits.n));
  for (int ni = 0; ni < logits.n; ++ni) {
    const Real* f = logits.sample(ni);
    int best = 0;
    for (int j = 1; j < logits.c; ++j)
      if (f[j] > f[best]) best = j;
    pred[size_t(ni)] = best;
  }
  return pred;
}

// ---------------------------------------------------------------------------
// Checkpoint: trained parameters plus the architecture that shaped them.
// File layout: magic "PSNN", version u16, u32-length-prefixed UTF-8 JSON
// header (layer table, seed, best epoch), then one f32 little-endian blob per
// parameterized layer in layer order: weights, bias for conv/dense; gamma,
// beta, running mean, running variance for batchnorm.
// ---------------------------------------------------------------------------

constexpr uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkSpec spec;
  Params<float> params;
  uint64_t seed = 0;
  int best_epoch = 0;
};

inline void save_checkpoint_stream(const Checkpoint& c, std::ostream& os) {
  io::write_bytes(os, "PSNN", 4);
  io::write_u16(os, kCheckpointVersion);
  auto hdr = spec_to_json(c.spec);
  hdr["seed"] = c.seed;
  hdr["best_epoch"] = c.best_epoch;
  std::string htxt = hdr.dump();
  io::write_u32(os, uint32_t(htxt.size()));
  io::write_bytes(os, htxt.data(), htxt.size());
  for (size_t i = 0; i < c.spec.layers.size(); ++i) {
    const LayerParams<float>& lp = c.params.at[i];
    for (const auto* blob : {&lp.w, &lp.b, &lp.gamma, &lp.beta, &lp.run_mean, &lp.run_var})
      for (float v : *blob) io::write_f32(os, v);
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  io::atomic_write(path, [&](std::ostream& os) { save_checkpoint_stream(c, os); });
}

inline Checkpoint load_checkpoint_stream(std::istream& is) {
  io::expect_magic(is, "PSNN");
  io::expect_version(is, kCheckpointVersion);
  uint32_t hlen = io::read_u32(is, "header length");
  std::string htxt(hlen, '\0');
  io::read_bytes(is, htxt.data(), hlen, "header");
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(htxt);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint c;
  c.spec = spec_from_json(hdr);
  c.seed = hdr.value("seed", uint64_t(0));
  c.best_epoch = hdr.value("best_epoch", 0);
  auto sh = c.spec.shapes();
  c.params.at.resize(c.spec.layers.size());
  for (size_t i = 0; i < c.spec.layers.size(); ++i) {
    const LayerDef& L = c.spec.layers[i];
    LayerParams<float>& lp = c.params.at[i];
    if (L.kind == LayerKind::conv) {
      lp.w.resize(size_t(L.c_out) * L.c_in * L.k * L.k);
      lp.b.resize(size_t(L.c_out));
    } else if (L.kind == LayerKind::dense) {
      lp.w.resize(size_t(L.d_out) * L.d_in);
      lp.b.resize(size_t(L.d_out));
    } else if (L.kind == LayerKind::batchnorm) {
      size_t ch = size_t(sh[i].c);
      lp.gamma.resize(ch);
      lp.beta.resize(ch);
      lp.run_mean.resize(ch);
      lp.run_var.resize(ch);
    }
    for (auto* blob : {&lp.w, &lp.b, &lp.gamma, &lp.beta, &lp.run_mean, &lp.run_var})
      for (float& v : *blob) v = io::read_f32(is, "parameter blob");
  }
  return c;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto is = io::open_input(path);
  return load_checkpoint_stream(is);
}

// Evaluation-mode logits convenience wrapper. Running statistics are read
// but never written, so params can be shared across threads.
template <typename Real>
Tensor<Real> eval_logits(const NetworkSpec& spec, const Params<Real>& params,
                         const Tensor<Real>& input, Tape<Real>* tape_out = nullptr) {
  Tape<Real> local;
  Tape<Real>& tape = tape_out ? *tape_out : local;
  forward(spec, const_cast<Params<Real>&>(params), input, tape, false);
  return tape.out.back();
}

// Per-sample flattened activations of one layer, evaluation mode.
template <typename Real>
std::vector<std::vector<Real>> capture_activations(const NetworkSpec& spec,
                                                   const Params<Real>& params,
                                                   const Tensor<Real>& input, int capture_layer) {
  if (capture_layer < 0 || capture_layer >= int(spec.layers.size()))
    throw ParameterError("capture layer " + std::to_string(capture_layer) + " not in network");
  Tape<Real> tape;
  forward(spec, const_cast<Params<Real>&>(params), input, tape, false);
  const Tensor<Real>& t = tape.out[size_t(capture_layer)];
  std::vector<std::vector<Real>> rows(size_t(t.n));
  for (int ni = 0; ni < t.n; ++ni)
    rows[size_t(ni)].assign(t.sample(ni), t.sample(ni) + t.chw());
  return rows;
}

}  // namespace psieve::net
