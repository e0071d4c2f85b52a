#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "psieve/common.hpp"
#include "psieve/lrp.hpp"

namespace psieve::transport {

using Eigen::MatrixXd;
using Eigen::MatrixXf;
using Eigen::VectorXd;

// A finite metric-measure space: pairwise distances plus a probability vector.
struct MetricMeasureSpace {
  MatrixXd C;  // symmetric, nonnegative, zero diagonal
  VectorXd p;  // positive, sums to 1

  int size() const { return int(p.size()); }

  void validate() const {
    if (C.rows() != C.cols()) throw ParameterError("distance matrix must be square");
    if (C.rows() != p.size()) throw ParameterError("distance matrix and weights disagree");
    if (p.size() == 0) throw ParameterError("empty space");
    const double scale = std::max(1.0, C.cwiseAbs().maxCoeff());
    for (int i = 0; i < C.rows(); ++i) {
      if (std::abs(C(i, i)) > 1e-12 * scale)
        throw ParameterError("distance matrix must have a zero diagonal");
      for (int j = 0; j < C.cols(); ++j) {
        if (!std::isfinite(C(i, j)) || C(i, j) < 0)
          throw ParameterError("distances must be finite and nonnegative");
        if (std::abs(C(i, j) - C(j, i)) > 1e-9 * scale)
          throw ParameterError("distance matrix must be symmetric");
      }
    }
    double sum = 0;
    for (int i = 0; i < p.size(); ++i) {
      if (!(p(i) > 0)) throw ParameterError("weights must be strictly positive");
      sum += p(i);
    }
    if (std::abs(sum - 1.0) > 1e-6) throw ParameterError("weights must sum to one");
  }
};

// Euclidean pixel geometry of a relevance point cloud.
inline MetricMeasureSpace space_from_cloud(const lrp::PointCloud& cloud) {
  const int n = int(cloud.size());
  if (n == 0) throw ParameterError("empty point cloud");
  MetricMeasureSpace s;
  s.C.resize(n, n);
  s.p.resize(n);
  for (int i = 0; i < n; ++i) {
    s.p(i) = cloud.weights[size_t(i)];
    s.C(i, i) = 0;
    for (int j = i + 1; j < n; ++j) {
      double dr = cloud.rows[size_t(i)] - cloud.rows[size_t(j)];
      double dc = cloud.cols[size_t(i)] - cloud.cols[size_t(j)];
      double d = std::sqrt(dr * dr + dc * dc);
      s.C(i, j) = d;
      s.C(j, i) = d;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Entropic optimal transport (stabilized Sinkhorn)
// ---------------------------------------------------------------------------

struct SinkhornOptions {
  double tol = 1e-7;               // L1 violation of the row marginal
  int max_iters = 20000;
  double absorb_threshold = 40.0;  // |log scaling| that triggers absorption
  int check_every = 5;
  // Over-relaxation exponent on the scaling updates. 1 is the plain
  // iteration; values up to ~1.8 sharpen the linear rate considerably at
  // small regularization. The solver falls back toward 1 on its own if the
  // marginal error ever rises between checks, so the fixed point (and hence
  // the returned coupling) is unchanged.
  double omega = 1.0;
};

struct SinkhornResult {
  MatrixXd T;
  VectorXd f, g;  // dual potentials, reusable as warm starts
  int iters = 0;
  double marginal_error = 0;
};

namespace detail {

// Per-thread scratch shared by all transport solves; std::vector keeps its
// capacity across calls, so repeated solves of similar sizes stop allocating.
// Scratch lives in Eigen vectors rather than std::vector so every buffer
// keeps Eigen's allocator alignment: SIMD peel boundaries, and with them the
// exact rounding of reductions, stay identical no matter how often the
// buffers were regrown. Reruns stay bit-for-bit reproducible.
struct Workspace {
  VectorXd K, T, CT, G, M;
  Eigen::VectorXf Kf, Mf, C1f, C2f, Tf, CTf, Gf;
  VectorXd u, v, Kv, Ktu;
  Eigen::VectorXf uf, vf, Kvf, Ktuf, pf, qf, ff, gf;

  static Workspace& local() {
    static thread_local Workspace ws;
    return ws;
  }
};

inline Eigen::Map<MatrixXd> mapped(VectorXd& buf, int rows, int cols) {
  Eigen::Index need = Eigen::Index(rows) * cols;
  if (buf.size() < need) buf.resize(need);
  return {buf.data(), rows, cols};
}

inline Eigen::Map<MatrixXf> mapped(Eigen::VectorXf& buf, int rows, int cols) {
  Eigen::Index need = Eigen::Index(rows) * cols;
  if (buf.size() < need) buf.resize(need);
  return {buf.data(), rows, cols};
}

struct SinkStatus {
  int iters = 0;
  double marginal_error = 0;
};

// Projects a nonnegative plan onto the transport polytope: scale rows and
// columns down where they overshoot, then close the remaining mass gap with a
// rank-one patch. Marginals come out exact to float rounding, and the plan
// moves by at most the pre-projection L1 marginal error.
inline void round_to_marginals(Eigen::Map<MatrixXd>& T, const VectorXd& p, const VectorXd& q) {
  VectorXd row = T.rowwise().sum();
  VectorXd ra = (row.array() > p.array()).select(p.array() / row.array().max(1e-300), 1.0);
  T.array().colwise() *= ra.array();
  VectorXd col = T.colwise().sum().transpose();
  VectorXd cb = (col.array() > q.array()).select(q.array() / col.array().max(1e-300), 1.0);
  T.array().rowwise() *= cb.transpose().array();
  row = T.rowwise().sum();
  col = T.colwise().sum().transpose();
  VectorXd ep = (p - row).cwiseMax(0.0), eq = (q - col).cwiseMax(0.0);
  const double s = ep.sum();
  if (s > 0) T.noalias() += ep * (eq / s).transpose();
}

// One stabilized solve at a fixed regularization. Scaling factors are folded
// into the dual potentials whenever they threaten to overflow, so the kernel
// stays bounded; potentials enter and leave in absorbed form. The cost matrix
// is shifted by `mshift` (a constant offset only moves the duals). The
// coupling is materialized into `T_out` only when it is non-null.
#ifdef PSIEVE_PROF
inline std::atomic<long> prof_rebuilds{0}, prof_iters{0}, prof_solves{0};
#endif

// Problem sizes at or above this many kernel cells run their dense products
// (and, where the tolerance allows, the whole scaling loop) in single
// precision; small instances stay in double end to end.
inline constexpr int64_t kFloatGemmCells = 64 * 64;

template <typename Scalar, typename CostMat>
SinkStatus sinkhorn_fixed_eps(const CostMat& M, double mshift, const VectorXd& p,
                              const VectorXd& q, double eps, const SinkhornOptions& opt,
                              VectorXd& f, VectorXd& g, Eigen::Map<MatrixXd>* T_out) {
  using VecS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  constexpr bool kSingle = std::is_same_v<Scalar, float>;
  // Caps keeping every intermediate inside the working type's range: kernel
  // exponents are clamped, deep underflow is flushed to an exact zero (a
  // subnormal-riddled kernel stalls every matvec), divisions are guarded, and
  // scalings are capped. Absorption compensates for the narrower single
  // precision range by firing more often.
  constexpr double kArgMax = kSingle ? 30.0 : 700.0;
  constexpr double kArgFlush = kSingle ? -87.0 : -708.0;
  constexpr Scalar kDivGuard = Scalar(kSingle ? 1e-30 : 1e-300);
  constexpr Scalar kScaleCap = Scalar(kSingle ? 1e20 : 1e300);
  const double absorb_thr =
      kSingle ? std::min(opt.absorb_threshold, 22.0) : opt.absorb_threshold;

  const int n1 = int(p.size()), n2 = int(q.size());
  Workspace& ws = Workspace::local();
  auto arg = mapped(ws.K, n1, n2);  // f64 kernel exponents, and the f64 kernel itself
  auto kernel = [&] {
    if constexpr (kSingle)
      return mapped(ws.Kf, n1, n2);
    else
      return arg;
  }();
  auto Mf = mapped(ws.Mf, kSingle ? n1 : 0, kSingle ? n2 : 0);
  if constexpr (kSingle) Mf = (M - MatrixXd::Constant(n1, n2, mshift)).template cast<float>();
  auto rebuild = [&] {
#ifdef PSIEVE_PROF
    ++prof_rebuilds;
#endif
    // kernel = exp((f_i + g_j - (M_ij - mshift)) / eps)
    if constexpr (kSingle) {
      ws.ff = (f / eps).cast<float>();
      ws.gf = (g / eps).cast<float>();
      const float inv_eps = float(1.0 / eps);
      kernel.array() =
          (((-inv_eps * Mf.array()).colwise() + ws.ff.array()).rowwise() +
           ws.gf.transpose().array())
              .min(float(kArgMax));
      kernel.array() = (kernel.array() < float(kArgFlush)).select(0.0f, kernel.array().exp());
    } else {
      arg.array() =
          ((((mshift - M.array()).colwise() + f.array()).rowwise() + g.transpose().array()) / eps)
              .min(kArgMax);
      kernel.array() = (arg.array() < kArgFlush).select(-746.0, arg.array()).exp();
    }
  };
  rebuild();

  auto& u = [&]() -> VecS& {
    if constexpr (kSingle) return ws.uf; else return ws.u;
  }();
  auto& v = [&]() -> VecS& {
    if constexpr (kSingle) return ws.vf; else return ws.v;
  }();
  auto& Kv = [&]() -> VecS& {
    if constexpr (kSingle) return ws.Kvf; else return ws.Kv;
  }();
  auto& Ktu = [&]() -> VecS& {
    if constexpr (kSingle) return ws.Ktuf; else return ws.Ktu;
  }();
  const VecS& pS = [&]() -> const VecS& {
    if constexpr (kSingle) {
      ws.pf = p.cast<float>();
      return ws.pf;
    } else {
      return p;
    }
  }();
  const VecS& qS = [&]() -> const VecS& {
    if constexpr (kSingle) {
      ws.qf = q.cast<float>();
      return ws.qf;
    } else {
      return q;
    }
  }();
  u.setOnes(n1);
  v.setOnes(n2);

  double omega = std::max(1.0, opt.omega);
  double err = std::numeric_limits<double>::infinity();
  int it = 0;
#ifdef PSIEVE_PROF
  ++prof_solves;
#endif
  for (; it < opt.max_iters; ++it) {
#ifdef PSIEVE_PROF
    ++prof_iters;
#endif
    constexpr Scalar kScaleFloor = Scalar(1) / kScaleCap;
    Kv.noalias() = kernel * v;
    if (omega == 1.0) {
      u.array() = (pS.array() / Kv.array().max(kDivGuard)).min(kScaleCap).max(kScaleFloor);
    } else {
      u.array() = ((pS.array() / Kv.array().max(kDivGuard)).pow(Scalar(omega)) *
                   u.array().pow(Scalar(1.0 - omega)))
                      .min(kScaleCap)
                      .max(kScaleFloor);
    }
    Ktu.noalias() = kernel.transpose() * u;
    if (omega == 1.0) {
      v.array() = (qS.array() / Ktu.array().max(kDivGuard)).min(kScaleCap).max(kScaleFloor);
    } else {
      v.array() = ((qS.array() / Ktu.array().max(kDivGuard)).pow(Scalar(omega)) *
                   v.array().pow(Scalar(1.0 - omega)))
                      .min(kScaleCap)
                      .max(kScaleFloor);
    }

    // max |log scaling|; log is monotone, so the extremes suffice.
    const double lmax = std::max(
        {std::abs(std::log(double(u.minCoeff()))), std::abs(std::log(double(u.maxCoeff()))),
         std::abs(std::log(double(v.minCoeff()))), std::abs(std::log(double(v.maxCoeff())))});
    if (!std::isfinite(lmax))
      throw NumericError("non-finite transport scaling at iteration " + std::to_string(it + 1));
    if (lmax > absorb_thr) {
      f.array() += eps * u.array().template cast<double>().log();
      g.array() += eps * v.array().template cast<double>().log();
      rebuild();
      u.setOnes();
      v.setOnes();
      continue;
    }
    if ((it + 1) % opt.check_every == 0 || it + 1 == opt.max_iters) {
      Kv.noalias() = kernel * v;
      double last = err;
      err = double((u.array() * Kv.array() - pS.array()).abs().sum());
      if (!std::isfinite(err))
        throw NumericError("non-finite marginal error at iteration " + std::to_string(it + 1));
      if (err <= opt.tol) {
        ++it;
        break;
      }
      // Tiny-regularization stall: near-degenerate kernels contract at a rate
      // of 1-O(residual), so a flat error this small never reaches tol; the
      // polytope projection below closes the gap instead.
      if (err < 1e-4 && err >= 0.9 * last) {
        ++it;
        break;
      }
      // Over-relaxation overshoot shows up as a rising marginal error; damp
      // back toward the plain iteration, which is unconditionally stable.
      if (err > last && omega > 1.0) omega = 1.0 + 0.5 * (omega - 1.0);
    }
  }

  f.array() += eps * u.array().template cast<double>().log();
  g.array() += eps * v.array().template cast<double>().log();
  if (T_out) {
    for (int j = 0; j < n2; ++j)
      T_out->col(j) = ((kernel.col(j).array() * u.array()).template cast<double>() * double(v(j)))
                          .matrix();
  }
  return {it, err};
}

// Shared driver: solves at the target regularization (absorption walks the
// potentials to scale even from a cold start) and enforces the marginal
// tolerance on the returned coupling.
template <typename CostMat>
SinkStatus sinkhorn_driver(const CostMat& M, const VectorXd& p, const VectorXd& q, double eps,
                           const SinkhornOptions& opt, VectorXd& f, VectorXd& g,
                           Eigen::Map<MatrixXd>* T_out) {
  const double mshift = M.minCoeff();
  // Single precision certifies marginal errors down to ~1e-6 at best and
  // resolves kernel exponents to about scale/eps x 6e-8, so tight tolerances,
  // extreme cost-to-regularization ratios, and all small instances run in
  // double.
  const bool single = int64_t(p.size()) * int64_t(q.size()) >= kFloatGemmCells &&
                      opt.tol >= 1e-5 && (M.maxCoeff() - mshift) / eps <= 3e4;
  auto st = single ? sinkhorn_fixed_eps<float>(M, mshift, p, q, eps, opt, f, g, T_out)
                   : sinkhorn_fixed_eps<double>(M, mshift, p, q, eps, opt, f, g, T_out);
  if (st.marginal_error > 1e-2)
    throw NumericError("transport marginals stuck at " + std::to_string(st.marginal_error) +
                       " after " + std::to_string(st.iters) + " iterations");
  if (T_out) {
    round_to_marginals(*T_out, p, q);
    double err = 0;
    VectorXd row = T_out->rowwise().sum();
    for (int i = 0; i < int(p.size()); ++i) err += std::abs(row(i) - p(i));
    st.marginal_error = err;
  }
  return st;
}

}  // namespace detail

// Entropic transport between (p, q) under cost M. Optional dual potentials
// warm-start the iteration.
inline SinkhornResult sinkhorn(const MatrixXd& M, const VectorXd& p, const VectorXd& q, double eps,
                               const SinkhornOptions& opt = {}, const VectorXd* f0 = nullptr,
                               const VectorXd* g0 = nullptr) {
  if (M.rows() != p.size() || M.cols() != q.size())
    throw ParameterError("cost matrix and marginals disagree");
  if (!(eps > 0) || !std::isfinite(eps))
    throw ParameterError("regularization must be positive and finite");
  if (opt.max_iters < 1) throw ParameterError("iteration cap must be positive");
  auto check_marginal = [](const VectorXd& m, const char* name) {
    double sum = 0;
    for (int i = 0; i < m.size(); ++i) {
      if (!(m(i) > 0))
        throw ParameterError(std::string(name) + " marginal must be strictly positive");
      sum += m(i);
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw ParameterError(std::string(name) + " marginal must sum to one");
  };
  check_marginal(p, "row");
  check_marginal(q, "column");
  if (!M.allFinite()) throw ParameterError("cost matrix must be finite");

  SinkhornResult r;
  r.f = f0 ? *f0 : VectorXd::Zero(p.size());
  r.g = g0 ? *g0 : VectorXd::Zero(q.size());
  r.T.resize(p.size(), q.size());
  Eigen::Map<MatrixXd> T_map(r.T.data(), int(p.size()), int(q.size()));
  auto st = detail::sinkhorn_driver(M, p, q, eps, opt, r.f, r.g, &T_map);
  r.iters = st.iters;
  r.marginal_error = st.marginal_error;
  return r;
}

// ---------------------------------------------------------------------------
// Entropic Gromov-Wasserstein, squared loss
// ---------------------------------------------------------------------------

struct GwOptions {
  // Entropic regularization strength. Zero picks the default for the pair:
  // 5e-2 x median squared ground distance, clamped to [1e-4, 1].
  double eps_reg = 0.0;
  double tol = 1e-4;  // relative outer cost change that counts as converged
  int outer_iters = 10;
  // Inner marginal tolerance is modest because every returned coupling is
  // projected to exact marginals anyway; over-relaxation pays for itself at
  // the sharp regularization these solves run at.
  SinkhornOptions sink{.tol = 1e-5, .omega = 1.7};

  void validate() const {
    if (eps_reg < 0 || !std::isfinite(eps_reg))
      throw ParameterError("regularization must be nonnegative and finite");
    if (outer_iters < 1) throw ParameterError("need at least one outer iteration");
    if (!(tol > 0)) throw ParameterError("outer tolerance must be positive");
    if (sink.max_iters < 1) throw ParameterError("inner iteration cap must be positive");
  }
};

struct GwResult {
  double cost = 0;  // unregularized objective of the returned coupling
  MatrixXd T;
  int outer_iters = 0;
  bool converged = false;
  bool cost_decreased = true;  // false when the outer costs stopped improving
};

namespace detail {

// Median positive squared distance of both spaces; 1.0 if all distances
// vanish. Large spaces are sampled on a deterministic stride: the selection
// cost stays flat while the estimate lands within a percent or two of the
// exact median, far inside the slack of a regularization default.
inline double median_squared_distance(const MetricMeasureSpace& a, const MetricMeasureSpace& b) {
  constexpr size_t kPerSpace = 4096;
  std::vector<double> vals;
  vals.reserve(2 * kPerSpace);
  auto push = [&](const MatrixXd& C) {
    const size_t n = size_t(C.rows());
    const size_t total = n * (n - 1) / 2;
    const size_t stride = std::max<size_t>(1, total / kPerSpace);
    size_t flat = 0;
    for (size_t i = 0; i + 1 < n; ++i)
      for (size_t j = i + 1; j < n; ++j, ++flat) {
        if (flat % stride != 0) continue;
        double d = C(int(i), int(j));
        if (d > 0) vals.push_back(d * d);
      }
  };
  push(a.C);
  push(b.C);
  if (vals.empty()) return 1.0;
  size_t mid = vals.size() / 2;
  std::nth_element(vals.begin(), vals.begin() + long(mid), vals.end());
  return vals[mid];
}

inline double resolve_eps(const MetricMeasureSpace& a, const MetricMeasureSpace& b,
                          const GwOptions& opt) {
  if (opt.eps_reg > 0) return opt.eps_reg;
  return std::clamp(5e-2 * median_squared_distance(a, b), 1e-4, 1.0);
}

// Deterministic pair ordering so gw(A,B) and gw(B,A) run the identical solve
// (one transposed): costs match bit-exactly, satisfying symmetry by
// construction rather than by convergence luck.
inline bool swap_to_canonical(const MetricMeasureSpace& a, const MetricMeasureSpace& b) {
  if (a.size() != b.size()) return a.size() > b.size();
  const double* pa = a.C.data();
  const double* pb = b.C.data();
  for (Eigen::Index i = 0; i < a.C.size(); ++i)
    if (pa[i] != pb[i]) return pa[i] > pb[i];
  for (Eigen::Index i = 0; i < a.p.size(); ++i)
    if (a.p(i) != b.p(i)) return a.p(i) > b.p(i);
  return false;
}

// Solver body without input validation (all-pairs callers validate up front).
// `want_plan` false keeps the coupling in thread-local scratch, sparing a
// megabyte-scale allocation per call on cost-only workloads.
inline GwResult gw_solve(const MetricMeasureSpace& a, const MetricMeasureSpace& b,
                         const GwOptions& opt, bool want_plan = true) {
  if (swap_to_canonical(a, b)) {
    GwResult r = gw_solve(b, a, opt, want_plan);
    if (want_plan) r.T.transposeInPlace();
    return r;
  }
  const int n1 = a.size(), n2 = b.size();
  const double eps = detail::resolve_eps(a, b, opt);
  const bool big = int64_t(n1) * int64_t(n2) >= detail::kFloatGemmCells;

  // The linearized cost is constC - 2 C1 T C2 with constC_ij = c1_i + c2_j.
  VectorXd c1 = (a.C.array().square().matrix() * a.p);
  VectorXd c2 = (b.C.array().square().matrix() * b.p);

  detail::Workspace& ws = detail::Workspace::local();
  MatrixXd T_owned;
  if (want_plan) T_owned.resize(n1, n2);
  auto T = want_plan ? Eigen::Map<MatrixXd>(T_owned.data(), n1, n2)
                     : detail::mapped(ws.T, n1, n2);

  // Start at the independent coupling, tilted by a fixed rank-one ramp so
  // mirror-symmetric configurations break ties the same way every run.
  VectorXd ramp1 = VectorXd::Zero(n1), ramp2 = VectorXd::Zero(n2);
  if (n1 > 1) ramp1.setLinSpaced(n1, -1.0, 1.0);
  if (n2 > 1) ramp2.setLinSpaced(n2, -1.0, 1.0);
  T.noalias() = a.p * b.p.transpose();
  T.noalias() += 0.25 * a.p.cwiseProduct(ramp1) * b.p.cwiseProduct(ramp2).transpose();

  auto M = detail::mapped(ws.M, n1, n2);
  auto G = detail::mapped(ws.G, n1, n2);
  if (big) {
    detail::mapped(ws.C1f, n1, n1) = a.C.cast<float>();
    detail::mapped(ws.C2f, n2, n2) = b.C.cast<float>();
  }

  // One linearization per pass: G serves both the cost of the current
  // coupling and the cost matrix of the next transport solve.
  auto linearize = [&] {
    if (big) {
      Eigen::Map<const MatrixXf> C1f(ws.C1f.data(), n1, n1);
      Eigen::Map<const MatrixXf> C2f(ws.C2f.data(), n2, n2);
      auto Tf = detail::mapped(ws.Tf, n1, n2);
      auto CTf = detail::mapped(ws.CTf, n1, n2);
      auto Gf = detail::mapped(ws.Gf, n1, n2);
      Tf = T.cast<float>();
      CTf.noalias() = C1f * Tf;
      Gf.noalias() = CTf * C2f;
      G = Gf.cast<double>();
    } else {
      auto CT = detail::mapped(ws.CT, n1, n2);
      CT.noalias() = a.C * T;
      G.noalias() = CT * b.C;
    }
    const double lin = c1.dot(T.rowwise().sum()) + c2.dot(T.colwise().sum().transpose());
    const double quad = (G.array() * T.array()).sum();
    return lin - 2.0 * quad;
  };

  GwResult r;
  VectorXd f = VectorXd::Zero(n1), g = VectorXd::Zero(n2);
  double prev = std::numeric_limits<double>::infinity();
  int non_improving = 0;
  Eigen::Map<MatrixXd>& T_map = T;
  for (int it = 0;; ++it) {
    const double cost = linearize();
    r.cost = cost;
    if (it > 0) {
      if (cost >= prev - 1e-15 * std::max(1.0, std::abs(prev))) {
        if (++non_improving >= 3) r.cost_decreased = false;
      } else {
        non_improving = 0;
      }
      if (std::abs(prev - cost) <= opt.tol * std::max(1.0, std::abs(prev))) {
        r.converged = true;
        break;
      }
    }
    prev = cost;
    if (it == opt.outer_iters) break;
    r.outer_iters = it + 1;

    M.array() = ((-2.0 * G.array()).colwise() + c1.array()).rowwise() + c2.transpose().array();
    if (it == 0) {
      // Seed the duals to cancel the separable part of the linearized cost;
      // the scaling walk then only has to span the range of the cross term.
      f = c1.array() - 2.0 * G.maxCoeff();
      g = c2;
    }
    detail::sinkhorn_driver(M, a.p, b.p, eps, opt.sink, f, g, &T_map);
  }
  if (want_plan) r.T = std::move(T_owned);
  return r;
}

}  // namespace detail

// Couples two metric-measure spaces by alternately linearizing the squared
// metric-distortion objective and solving the linearization with entropic
// transport, warm-starting each solve from the previous duals.
inline GwResult entropic_gw(const MetricMeasureSpace& a, const MetricMeasureSpace& b,
                            const GwOptions& opt = {}) {
  opt.validate();
  a.validate();
  b.validate();
  return detail::gw_solve(a, b, opt);
}

// ---------------------------------------------------------------------------
// All-pairs costs
// ---------------------------------------------------------------------------

struct GwMatrixResult {
  MatrixXd D;               // symmetric coupling costs, zero diagonal
  size_t warned_pairs = 0;  // pairs whose outer costs stopped improving
};

// Upper-triangle pair costs, computed in parallel with a write-once-per-cell
// contract and mirrored; the diagonal is zero by definition. Solver failures
// are collected and reported together.
inline GwMatrixResult gw_distance_matrix(const std::vector<const MetricMeasureSpace*>& spaces,
                                         const GwOptions& opt = {}) {
  opt.validate();
  const int n = int(spaces.size());
  if (n < 1) throw ParameterError("pairwise costs need at least one space");
  for (const auto* s : spaces) s->validate();

  GwMatrixResult res;
  res.D = MatrixXd::Zero(n, n);
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(size_t(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
  std::vector<std::string> failures;
  std::atomic<size_t> warned{0};
  std::mutex mu;
  parallel_for(int64_t(pairs.size()), [&](int64_t k) {
    auto [i, j] = pairs[size_t(k)];
    try {
      auto r = detail::gw_solve(*spaces[size_t(i)], *spaces[size_t(j)], opt, /*want_plan=*/false);
      res.D(i, j) = r.cost;
      res.D(j, i) = r.cost;
      if (!r.cost_decreased) warned.fetch_add(1);
    } catch (const Error& e) {
      std::lock_guard<std::mutex> lock(mu);
      failures.push_back("(" + std::to_string(i) + "," + std::to_string(j) + "): " + e.what());
    }
  });
  if (!failures.empty()) {
    std::sort(failures.begin(), failures.end());
    std::string msg = "transport failed for " + std::to_string(failures.size()) + " pair(s): ";
    for (size_t i = 0; i < std::min<size_t>(failures.size(), 8); ++i) {
      if (i) msg += "; ";
      msg += failures[i];
    }
    throw NumericError(msg);
  }
  res.warned_pairs = warned.load();
  return res;
}

inline GwMatrixResult gw_distance_matrix(const std::vector<MetricMeasureSpace>& spaces,
                                         const GwOptions& opt = {}) {
  std::vector<const MetricMeasureSpace*> ptrs;
  ptrs.reserve(spaces.size());
  for (const auto& s : spaces) ptrs.push_back(&s);
  return gw_distance_matrix(ptrs, opt);
}

// ---------------------------------------------------------------------------
// Barycenter
// ---------------------------------------------------------------------------

struct BarycenterOptions {
  int size = 0;       // number of support points (required, >= 2)
  int max_iters = 10;
  double tol = 1e-4;  // relative Frobenius change of the center distances
  uint64_t seed = 1;  // deterministic symmetric init
  GwOptions gw;

  void validate() const {
    gw.validate();
    if (size < 2) throw ParameterError("barycenter needs at least two support points");
    if (max_iters < 1) throw ParameterError("need at least one barycenter iteration");
    if (!(tol > 0)) throw ParameterError("barycenter tolerance must be positive");
  }
};

struct BarycenterResult {
  MetricMeasureSpace space;   // uniform weights
  std::vector<double> costs;  // coupling cost from this center to each input
  double objective = 0;       // weighted sum of costs
  int iters = 0;
};

// Fixed-point averaging of metric-measure spaces under coupling costs:
// alternately couples the current center to every input (in parallel, merged
// in index order) and re-estimates the center distances from the couplings.
// Returns the center the reported costs were solved against, so the triple
// (center, costs, objective) is always consistent.
inline BarycenterResult gw_barycenter(const std::vector<const MetricMeasureSpace*>& spaces,
                                      const std::vector<double>& lambda,
                                      const BarycenterOptions& opt) {
  opt.validate();
  if (spaces.empty()) throw ParameterError("barycenter needs at least one space");
  if (lambda.size() != spaces.size()) throw ParameterError("one weight per space required");
  double lsum = 0;
  for (double l : lambda) {
    if (!(l >= 0)) throw ParameterError("barycenter weights must be nonnegative");
    lsum += l;
  }
  if (std::abs(lsum - 1.0) > 1e-6) throw ParameterError("barycenter weights must sum to one");
  int64_t support = 0;
  for (const auto* s : spaces) {
    s->validate();
    support += s->size();
  }
  const int m = opt.size;
  if (int64_t(m) > support) throw ParameterError("barycenter size exceeds the total input support");

  MetricMeasureSpace center;
  center.p = VectorXd::Constant(m, 1.0 / m);

  // Symmetric random start scaled to the weighted mean input distance.
  double mean_d = 0;
  for (size_t s = 0; s < spaces.size(); ++s) mean_d += lambda[s] * spaces[s]->C.mean();
  if (!(mean_d > 0)) mean_d = 1.0;
  Rng rng(seed_mix({opt.seed, 0x67776263u}));
  center.C = MatrixXd::Zero(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      double d = mean_d * (0.5 + rng.next_double());
      center.C(i, j) = d;
      center.C(j, i) = d;
    }

  BarycenterResult out;
  out.costs.assign(spaces.size(), 0.0);
  for (int it = 0;; ++it) {
    std::vector<MatrixXd> Ts(spaces.size());
    std::vector<std::string> failures;
    std::mutex mu;
    parallel_for(int64_t(spaces.size()), [&](int64_t s) {
      try {
        auto r = detail::gw_solve(center, *spaces[size_t(s)], opt.gw);
        Ts[size_t(s)] = std::move(r.T);
        out.costs[size_t(s)] = r.cost;
      } catch (const Error& e) {
        std::lock_guard<std::mutex> lock(mu);
        failures.push_back("input " + std::to_string(s) + ": " + e.what());
      }
    });
    if (!failures.empty()) {
      std::sort(failures.begin(), failures.end());
      std::string msg = "barycenter coupling failed: ";
      for (size_t i = 0; i < failures.size(); ++i) msg += (i ? "; " : "") + failures[i];
      throw NumericError(msg);
    }
    out.objective = 0;
    for (size_t s = 0; s < spaces.size(); ++s) out.objective += lambda[s] * out.costs[s];
    out.iters = it + 1;
    if (it + 1 == opt.max_iters) break;

    // C* <- m^2 sum_s lambda_s T_s C_s T_s^T (uniform center weights),
    // symmetrized with a zero diagonal.
    MatrixXd next = MatrixXd::Zero(m, m);
    for (size_t s = 0; s < spaces.size(); ++s)
      next.noalias() += lambda[s] * (Ts[s] * spaces[s]->C * Ts[s].transpose());
    next *= double(m) * double(m);
    next = ((next + next.transpose()) * 0.5).eval();
    next.diagonal().setZero();

    const double denom = std::max(1.0, center.C.norm());
    const double delta = (next - center.C).norm() / denom;
    if (delta < opt.tol) break;  // costs stay consistent with the kept center
    center.C = std::move(next);
  }

  out.space = std::move(center);
  return out;
}

// ---------------------------------------------------------------------------
// Pairwise-cost file format: "PSGW", version, n, n*n float32 costs row-major,
// then the content hash of the heatmap bundle the costs were derived from.
// ---------------------------------------------------------------------------

constexpr uint16_t kGwMatrixVersion = 1;

inline void save_gw_matrix(const MatrixXd& D, uint64_t source_hash, const std::string& path) {
  if (D.rows() != D.cols()) throw ParameterError("cost matrix must be square");
  io::atomic_write(path, [&](std::ostream& os) {
    io::write_bytes(os, "PSGW", 4);
    io::write_u16(os, kGwMatrixVersion);
    io::write_u32(os, uint32_t(D.rows()));
    for (int i = 0; i < D.rows(); ++i)
      for (int j = 0; j < D.cols(); ++j) io::write_f32(os, float(D(i, j)));
    io::write_u64(os, source_hash);
  });
}

inline std::pair<MatrixXd, uint64_t> load_gw_matrix(const std::string& path) {
  auto is = io::open_input(path);
  io::expect_magic(is, "PSGW");
  io::expect_version(is, kGwMatrixVersion);
  uint32_t n = io::read_u32(is, "matrix size");
  MatrixXd D(n, n);
  for (uint32_t i = 0; i < n; ++i)
    for (uint32_t j = 0; j < n; ++j) D(i, j) = io::read_f32(is, "cost value");
  uint64_t hash = io::read_u64(is, "source hash");
  return {std::move(D), hash};
}

}  // namespace psieve::transport
