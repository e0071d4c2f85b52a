#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fixture.hpp"
#include "psieve/lrp.hpp"
#include "psieve/transport.hpp"

using namespace psieve;
using transport::BarycenterOptions;
using transport::GwOptions;
using transport::MetricMeasureSpace;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Relevance-shaped cloud: one dominant tight blob plus sparse background
// points, the silhouette heatmap point clouds actually have.
lrp::PointCloud relevance_cloud(uint64_t seed, int n, bool uniform_weights = false) {
  Rng rng(seed);
  lrp::PointCloud pc;
  double wsum = 0;
  for (int i = 0; i < n; ++i) {
    double r, c, w;
    if (rng.next_double() < 0.85) {
      r = 11 + 9 * rng.next_double();
      c = 8 + 14 * rng.next_double();
      w = 0.5 + rng.next_double();
    } else {
      r = 31 * rng.next_double();
      c = 31 * rng.next_double();
      w = 0.05 + 0.1 * rng.next_double();
    }
    pc.rows.push_back(r);
    pc.cols.push_back(c);
    pc.weights.push_back(uniform_weights ? 1.0 / n : w);
    wsum += w;
  }
  if (!uniform_weights)
    for (auto& w : pc.weights) w /= wsum;
  return pc;
}

// Two well-separated blobs: spaces whose pair costs plateau early, used to
// exercise the non-improving-cost warning path.
lrp::PointCloud two_blob_cloud(uint64_t seed, int n) {
  Rng rng(seed);
  lrp::PointCloud pc;
  double wsum = 0;
  for (int i = 0; i < n; ++i) {
    double r, c;
    double pick = rng.next_double();
    if (pick < 0.45) {
      r = 8 + 3 * rng.next_double();
      c = 9 + 3 * rng.next_double();
    } else if (pick < 0.9) {
      r = 20 + 4 * rng.next_double();
      c = 18 + 4 * rng.next_double();
    } else {
      r = 31 * rng.next_double();
      c = 31 * rng.next_double();
    }
    double w = 0.2 + rng.next_double();
    pc.rows.push_back(r);
    pc.cols.push_back(c);
    pc.weights.push_back(w);
    wsum += w;
  }
  for (auto& w : pc.weights) w /= wsum;
  return pc;
}

double median_distance(const MetricMeasureSpace& s) {
  std::vector<double> d;
  for (int i = 0; i < s.C.rows(); ++i)
    for (int j = i + 1; j < s.C.cols(); ++j) d.push_back(s.C(i, j));
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + long(d.size() / 2), d.end());
  return d[d.size() / 2];
}

// cost ≤ 1e-3 (max C)^2 at eps = 1e-2 median(C)^2: the identity coupling is
// free, the slack absorbs entropic blur.
double identity_eps(const MetricMeasureSpace& s) {
  double med = median_distance(s);
  return 1e-2 * med * med;
}

double identity_tol(const MetricMeasureSpace& s) {
  return 1e-3 * s.C.maxCoeff() * s.C.maxCoeff();
}

MetricMeasureSpace two_point_space(double offdiag) {
  MetricMeasureSpace s;
  s.C.resize(2, 2);
  s.C << 0, offdiag, offdiag, 0;
  s.p = VectorXd::Constant(2, 0.5);
  return s;
}

MetricMeasureSpace three_point_space(double d01, double d02, double d12) {
  MetricMeasureSpace s;
  s.C.resize(3, 3);
  s.C << 0, d01, d02, d01, 0, d12, d02, d12, 0;
  s.p = VectorXd::Constant(3, 1.0 / 3.0);
  return s;
}

// Exact minimum of the coupling quadratic over the transport polytope for
// tiny instances: enumerate every face (active set of zeroed cells), take the
// stationary point of the restricted quadratic where it exists, keep feasible
// candidates. Faces of all dimensions cover the vertices.
double polytope_minimum(const MetricMeasureSpace& A, const MetricMeasureSpace& B) {
  const int n1 = A.size(), n2 = B.size(), N = n1 * n2;
  VectorXd c1 = A.C.array().square().matrix() * A.p;
  VectorXd c2 = B.C.array().square().matrix() * B.p;
  VectorXd lin(N);
  MatrixXd Q(N, N);
  for (int i = 0; i < n1; ++i)
    for (int j = 0; j < n2; ++j) {
      lin(i * n2 + j) = c1(i) + c2(j);
      for (int k = 0; k < n1; ++k)
        for (int l = 0; l < n2; ++l)
          Q(i * n2 + j, k * n2 + l) = -2.0 * A.C(i, k) * B.C(j, l);
    }
  MatrixXd Aeq = MatrixXd::Zero(n1 + n2, N);
  VectorXd beq(n1 + n2);
  for (int i = 0; i < n1; ++i) {
    for (int j = 0; j < n2; ++j) Aeq(i, i * n2 + j) = 1;
    beq(i) = A.p(i);
  }
  for (int j = 0; j < n2; ++j) {
    for (int i = 0; i < n1; ++i) Aeq(n1 + j, i * n2 + j) = 1;
    beq(n1 + j) = B.p(j);
  }
  auto energy = [&](const VectorXd& t) { return lin.dot(t) + t.dot(Q * t); };

  double best = std::numeric_limits<double>::infinity();
  for (int mask = 0; mask < (1 << N); ++mask) {
    std::vector<int> free_ix;
    for (int v = 0; v < N; ++v)
      if (!(mask >> v & 1)) free_ix.push_back(v);
    const int F = int(free_ix.size());
    if (F == 0) continue;
    MatrixXd Af(n1 + n2, F);
    for (int f = 0; f < F; ++f) Af.col(f) = Aeq.col(free_ix[size_t(f)]);
    Eigen::FullPivLU<MatrixXd> lu(Af);
    lu.setThreshold(1e-10);
    VectorXd t0f = lu.solve(beq);
    if ((Af * t0f - beq).lpNorm<Eigen::Infinity>() > 1e-9) continue;
    MatrixXd Nf = lu.kernel();
    const int d = (lu.rank() < F) ? int(Nf.cols()) : 0;

    MatrixXd Qf(F, F);
    VectorXd lf(F);
    for (int r = 0; r < F; ++r) {
      lf(r) = lin(free_ix[size_t(r)]);
      for (int c = 0; c < F; ++c) Qf(r, c) = Q(free_ix[size_t(r)], free_ix[size_t(c)]);
    }
    std::vector<VectorXd> cands;
    cands.push_back(t0f);
    if (d > 0) {
      MatrixXd H = Nf.transpose() * Qf * Nf;
      VectorXd g = Nf.transpose() * (lf + 2.0 * Qf * t0f);
      Eigen::FullPivLU<MatrixXd> luh(2.0 * H);
      luh.setThreshold(1e-10);
      VectorXd z = luh.solve(-g);
      if (((2.0 * H) * z + g).lpNorm<Eigen::Infinity>() < 1e-8) cands.push_back(t0f + Nf * z);
    }
    for (const auto& tf : cands) {
      if (tf.minCoeff() < -1e-10) continue;
      VectorXd t = VectorXd::Zero(N);
      for (int f = 0; f < F; ++f) t(free_ix[size_t(f)]) = std::max(0.0, tf(f));
      if ((Aeq * t - beq).lpNorm<Eigen::Infinity>() > 1e-9) continue;
      best = std::min(best, energy(t));
    }
  }
  return best;
}

std::string temp_path(const char* stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

}  // namespace

TEST(Sinkhorn, MarginalsWithinTolerance) {
  Rng rng(7);
  int n = 30, m = 40;
  MatrixXd M(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) M(i, j) = rng.next_double();
  VectorXd p(n), q(m);
  for (int i = 0; i < n; ++i) p(i) = 0.2 + rng.next_double();
  for (int j = 0; j < m; ++j) q(j) = 0.2 + rng.next_double();
  p /= p.sum();
  q /= q.sum();

  auto r = transport::sinkhorn(M, p, q, 0.05);
  EXPECT_LE((r.T.rowwise().sum() - p).lpNorm<Eigen::Infinity>(), 1e-7);
  EXPECT_LE((r.T.colwise().sum().transpose() - q).lpNorm<Eigen::Infinity>(), 1e-7);
  EXPECT_GE(r.T.minCoeff(), 0.0);
}

TEST(Sinkhorn, ZeroCostGivesProductCoupling) {
  VectorXd p(3), q(4);
  p << 0.2, 0.5, 0.3;
  q << 0.1, 0.4, 0.3, 0.2;
  auto r = transport::sinkhorn(MatrixXd::Zero(3, 4), p, q, 0.1);
  EXPECT_LE((r.T - p * q.transpose()).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(Sinkhorn, SinglePointPair) {
  auto r = transport::sinkhorn(MatrixXd::Zero(1, 1), VectorXd::Ones(1), VectorXd::Ones(1), 0.5);
  ASSERT_EQ(r.T.rows(), 1);
  EXPECT_NEAR(r.T(0, 0), 1.0, 1e-12);
}

TEST(Sinkhorn, SharpensIdentityFavoringCost) {
  MatrixXd M(2, 2);
  M << 0, 1, 1, 0;
  VectorXd u = VectorXd::Constant(2, 0.5);
  auto r = transport::sinkhorn(M, u, u, 0.01);
  EXPECT_LT(r.T(0, 1), 1e-3);
  EXPECT_LT(r.T(1, 0), 1e-3);
  EXPECT_NEAR(r.T(0, 0), 0.5, 1e-3);
  EXPECT_NEAR(r.T(1, 1), 0.5, 1e-3);
}

TEST(Sinkhorn, WarmStartReusesDuals) {
  Rng rng(3);
  int n = 25, m = 30;
  MatrixXd M(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) M(i, j) = rng.next_double();
  VectorXd p = VectorXd::Constant(n, 1.0 / n), q = VectorXd::Constant(m, 1.0 / m);

  auto cold = transport::sinkhorn(M, p, q, 0.05);
  auto warm = transport::sinkhorn(M, p, q, 0.05, {}, &cold.f, &cold.g);
  EXPECT_LT(warm.iters, cold.iters);
  EXPECT_LE((cold.T - warm.T).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(Sinkhorn, RejectsBadInputs) {
  VectorXd u = VectorXd::Constant(2, 0.5);
  MatrixXd M = MatrixXd::Zero(2, 2);
  EXPECT_THROW(transport::sinkhorn(M, u, VectorXd::Constant(3, 1.0 / 3), 0.1), ParameterError);
  EXPECT_THROW(transport::sinkhorn(M, u, u, 0.0), ParameterError);
  EXPECT_THROW(transport::sinkhorn(M, u, u, -1.0), ParameterError);
  VectorXd bad(2);
  bad << 0.9, 0.2;  // off the simplex
  EXPECT_THROW(transport::sinkhorn(M, bad, u, 0.1), ParameterError);
  bad << 1.0, 0.0;  // zero entry
  EXPECT_THROW(transport::sinkhorn(M, bad, u, 0.1), ParameterError);
  MatrixXd inf = M;
  inf(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(transport::sinkhorn(inf, u, u, 0.1), ParameterError);
}

TEST(Sinkhorn, ReportsStuckMarginals) {
  auto A = transport::space_from_cloud(two_blob_cloud(7, 40));
  GwOptions opt;
  opt.eps_reg = 1e-4;  // far sharper than one scaling pass can satisfy
  opt.sink.max_iters = 1;
  try {
    transport::entropic_gw(A, A, opt);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration"), std::string::npos) << e.what();
  }
}

TEST(MetricSpace, PixelDistanceIsEuclidean) {
  lrp::PointCloud pc;
  pc.rows = {0, 3};
  pc.cols = {0, 4};
  pc.weights = {0.5, 0.5};
  auto s = transport::space_from_cloud(pc);
  EXPECT_DOUBLE_EQ(s.C(0, 1), 5.0);
  EXPECT_DOUBLE_EQ(s.C(1, 0), 5.0);
  EXPECT_DOUBLE_EQ(s.C(0, 0), 0.0);
}

TEST(MetricSpace, RigidMotionLeavesDistances) {
  auto pc = relevance_cloud(11, 25);
  auto a = transport::space_from_cloud(pc);
  double th = 0.77, dx = 4.2, dy = -1.3;
  lrp::PointCloud moved;
  for (size_t i = 0; i < pc.size(); ++i) {
    moved.rows.push_back(std::cos(th) * pc.rows[i] - std::sin(th) * pc.cols[i] + dx);
    moved.cols.push_back(std::sin(th) * pc.rows[i] + std::cos(th) * pc.cols[i] + dy);
    moved.weights.push_back(pc.weights[i]);
  }
  auto b = transport::space_from_cloud(moved);
  EXPECT_LE((a.C - b.C).lpNorm<Eigen::Infinity>(), 1e-9);
}

TEST(MetricSpace, ValidatesShape) {
  MetricMeasureSpace s = two_point_space(1.0);
  s.C(0, 1) = -1;
  s.C(1, 0) = -1;
  EXPECT_THROW(s.validate(), ParameterError);

  s = two_point_space(1.0);
  s.C(0, 1) = 2;  // asymmetric
  EXPECT_THROW(s.validate(), ParameterError);

  s = two_point_space(1.0);
  s.C(0, 0) = 0.5;  // nonzero diagonal
  EXPECT_THROW(s.validate(), ParameterError);

  s = two_point_space(1.0);
  s.p << 0.9, 0.3;  // off the simplex
  EXPECT_THROW(s.validate(), ParameterError);
}

TEST(GromovWasserstein, IdentityCostWithinEntropicBias) {
  auto A = transport::space_from_cloud(relevance_cloud(5, 60));
  GwOptions opt;
  opt.eps_reg = identity_eps(A);
  auto r = transport::entropic_gw(A, A, opt);
  EXPECT_LE(r.cost, identity_tol(A));
  EXPECT_GE(r.cost, -1e-9);
  // every returned coupling is feasible
  EXPECT_LE((r.T.rowwise().sum() - A.p).lpNorm<Eigen::Infinity>(), 1e-7);
  EXPECT_LE((r.T.colwise().sum().transpose() - A.p).lpNorm<Eigen::Infinity>(), 1e-7);
}

TEST(GromovWasserstein, TwoPointClosedForm) {
  // uniform two-point spaces: cost over the one-parameter coupling family is
  // cost(t) = 4ts(a^2 + b^2) + 2(a-b)^2 (t^2 + s^2), s = 1/2 - t, minimized at
  // a vertex with value (a-b)^2 / 2.
  const double a = 1.0, b = 2.0;
  double grid_min = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 500; ++k) {
    double t = k * 1e-3, s = 0.5 - t;
    grid_min = std::min(grid_min, 4 * t * s * (a * a + b * b) + 2 * (a - b) * (a - b) * (t * t + s * s));
  }
  EXPECT_NEAR(grid_min, 0.5, 1e-12);

  GwOptions opt;
  opt.eps_reg = 1e-3 * b * b;
  auto r = transport::entropic_gw(two_point_space(a), two_point_space(b), opt);
  EXPECT_NEAR(r.cost, 0.5, 0.05 * 0.5);
  EXPECT_LE(std::abs(r.cost - grid_min), 0.01 * grid_min);
}

TEST(GromovWasserstein, ThreePointPolytopeOracle) {
  struct Case {
    double a[3], b[3];
  };
  const Case cases[] = {
      {{1.0, 2.0, 2.5}, {1.2, 2.2, 3.0}},
      {{1.0, 1.0, 1.0}, {2.0, 2.0, 2.0}},
      {{0.5, 3.0, 2.8}, {1.0, 1.1, 1.9}},
      {{1.0, 4.0, 4.2}, {3.9, 1.05, 4.1}},
  };
  for (const auto& cs : cases) {
    auto A = three_point_space(cs.a[0], cs.a[1], cs.a[2]);
    auto B = three_point_space(cs.b[0], cs.b[1], cs.b[2]);
    double oracle = polytope_minimum(A, B);
    ASSERT_GT(oracle, 1e-3);  // stay away from zero so relative error is meaningful
    double scale = std::max(A.C.maxCoeff(), B.C.maxCoeff());
    GwOptions opt;
    opt.eps_reg = 1e-3 * scale * scale;
    auto r = transport::entropic_gw(A, B, opt);
    EXPECT_LE(std::abs(r.cost - oracle), 0.01 * oracle)
        << "oracle " << oracle << " solver " << r.cost;
  }
  // isomorphic triangles land at zero for both
  auto A = three_point_space(2.0, 2.0, 3.0);
  auto B = three_point_space(2.0, 3.0, 2.0);
  EXPECT_NEAR(polytope_minimum(A, B), 0.0, 1e-10);
  GwOptions opt;
  opt.eps_reg = 1e-3 * 9.0;
  EXPECT_NEAR(transport::entropic_gw(A, B, opt).cost, 0.0, 1e-4);
}

TEST(GromovWasserstein, SymmetricInArguments) {
  auto A = transport::space_from_cloud(relevance_cloud(5, 60));
  auto B = transport::space_from_cloud(relevance_cloud(9, 47));
  auto r1 = transport::entropic_gw(A, B);
  auto r2 = transport::entropic_gw(B, A);
  EXPECT_LE(std::abs(r1.cost - r2.cost), 1e-6 * std::max(1.0, std::abs(r1.cost)));
  EXPECT_LE((r1.T - r2.T.transpose()).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(GromovWasserstein, IsometryAndRelabelInvariance) {
  auto pc = relevance_cloud(5, 50);
  auto A = transport::space_from_cloud(pc);
  GwOptions opt;
  opt.eps_reg = identity_eps(A);
  double tol = identity_tol(A);

  Rng rng(31);
  for (int k = 0; k < 10; ++k) {
    double th = 2 * M_PI * rng.next_double();
    double dx = 10 * rng.next_double(), dy = 10 * rng.next_double();
    bool reflect = rng.next_double() < 0.5;
    int n = int(pc.size());
    std::vector<int> perm(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) perm[size_t(i)] = i;
    for (int i = n - 1; i > 0; --i)
      std::swap(perm[size_t(i)], perm[rng.next_range(0, uint32_t(i))]);
    lrp::PointCloud q;
    for (int i = 0; i < n; ++i) {
      double r0 = pc.rows[size_t(perm[size_t(i)])], c0 = pc.cols[size_t(perm[size_t(i)])];
      if (reflect) c0 = -c0;
      q.rows.push_back(std::cos(th) * r0 - std::sin(th) * c0 + dx);
      q.cols.push_back(std::sin(th) * r0 + std::cos(th) * c0 + dy);
      q.weights.push_back(pc.weights[size_t(perm[size_t(i)])]);
    }
    auto B = transport::space_from_cloud(q);
    EXPECT_LE(transport::entropic_gw(A, B, opt).cost, tol) << "transform " << k;
  }
}

TEST(GromovWasserstein, FlagsNonImprovingOuterLoop) {
  auto B = transport::space_from_cloud(two_blob_cloud(29, 25));
  auto C = transport::space_from_cloud(two_blob_cloud(54, 31));
  GwOptions opt;
  opt.eps_reg = 3.0;
  opt.tol = 1e-12;
  opt.outer_iters = 12;
  auto r = transport::entropic_gw(B, C, opt);  // plateaus without converging: a warning, not an error
  EXPECT_FALSE(r.cost_decreased);
  EXPECT_FALSE(r.converged);
}

TEST(GromovWasserstein, ValidatesOptions) {
  auto A = two_point_space(1.0);
  GwOptions opt;
  opt.outer_iters = 0;
  EXPECT_THROW(transport::entropic_gw(A, A, opt), ParameterError);
  opt = {};
  opt.tol = 0;
  EXPECT_THROW(transport::entropic_gw(A, A, opt), ParameterError);
  opt = {};
  opt.eps_reg = -0.5;
  EXPECT_THROW(transport::entropic_gw(A, A, opt), ParameterError);
}

TEST(DistanceMatrix, SingleSpaceIsZero) {
  std::vector<MetricMeasureSpace> sp{two_point_space(1.0)};
  auto r = transport::gw_distance_matrix(sp, {});
  ASSERT_EQ(r.D.rows(), 1);
  EXPECT_EQ(r.D(0, 0), 0.0);
}

TEST(DistanceMatrix, MirroredAndDeterministic) {
  std::vector<MetricMeasureSpace> sp;
  for (int i = 0; i < 8; ++i)
    sp.push_back(transport::space_from_cloud(relevance_cloud(100 + uint64_t(i), 40 + i)));
  sp.push_back(sp[0]);  // duplicated space

  auto r1 = transport::gw_distance_matrix(sp, {});
  auto r2 = transport::gw_distance_matrix(sp, {});
  EXPECT_TRUE(r1.D == r2.D);                          // rerun is bit-identical
  EXPECT_TRUE(r1.D == MatrixXd(r1.D.transpose()));    // mirrored, not recomputed
  EXPECT_EQ(r1.D.diagonal().lpNorm<Eigen::Infinity>(), 0.0);
  // duplicate pair sits within the identity tolerance
  EXPECT_LE(r1.D(0, 8), identity_tol(sp[0]));
}

TEST(DistanceMatrix, PermutationEquivariant) {
  std::vector<MetricMeasureSpace> sp;
  for (int i = 0; i < 6; ++i)
    sp.push_back(transport::space_from_cloud(relevance_cloud(200 + uint64_t(i), 35 + 2 * i)));
  auto d = transport::gw_distance_matrix(sp, {}).D;
  std::vector<MetricMeasureSpace> rev(sp.rbegin(), sp.rend());
  auto dr = transport::gw_distance_matrix(rev, {}).D;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) EXPECT_EQ(dr(5 - i, 5 - j), d(i, j));
}

TEST(DistanceMatrix, ReportsFailingPairs) {
  std::vector<MetricMeasureSpace> sp;
  for (int i = 0; i < 3; ++i)
    sp.push_back(transport::space_from_cloud(two_blob_cloud(7 + uint64_t(i), 40 + i)));
  GwOptions opt;
  opt.eps_reg = 1e-4;
  opt.sink.max_iters = 1;
  try {
    transport::gw_distance_matrix(sp, opt);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("(0,1)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("pair"), std::string::npos) << msg;
  }
}

TEST(Barycenter, TwoPointInterpolation) {
  auto A = two_point_space(1.0);
  auto B = two_point_space(3.0);
  BarycenterOptions bo;
  bo.size = 2;
  bo.gw.eps_reg = 1e-3 * 9.0;
  auto r = transport::gw_barycenter({&A, &B}, {0.5, 0.5}, bo);
  ASSERT_EQ(r.space.size(), 2);
  EXPECT_NEAR(r.space.C(0, 1), 2.0, 0.2);  // closed-form blend of the off-diagonals
  EXPECT_EQ(r.space.C(0, 0), 0.0);
  EXPECT_NEAR(r.space.p(0), 0.5, 1e-12);
  ASSERT_EQ(r.costs.size(), 2u);
  EXPECT_NEAR(r.objective, 0.5 * (r.costs[0] + r.costs[1]), 1e-12);
}

TEST(Barycenter, SingleSpaceFixedPoint) {
  // uniform-measure space: the space is its own barycenter, and the iteration
  // recovers it to within the identity tolerance
  auto A = transport::space_from_cloud(relevance_cloud(5, 20, /*uniform_weights=*/true));
  BarycenterOptions bo;
  bo.size = A.size();
  bo.max_iters = 40;
  bo.tol = 1e-6;
  bo.gw.eps_reg = identity_eps(A);
  auto r = transport::gw_barycenter({&A}, {1.0}, bo);

  GwOptions pin;
  pin.eps_reg = identity_eps(A);
  EXPECT_LE(transport::entropic_gw(r.space, A, pin).cost, identity_tol(A));
}

TEST(Barycenter, TwoIdenticalSpacesFixedPoint) {
  auto A = transport::space_from_cloud(relevance_cloud(5, 12, /*uniform_weights=*/true));
  BarycenterOptions bo;
  bo.size = A.size();
  bo.max_iters = 40;
  bo.tol = 1e-6;
  bo.gw.eps_reg = identity_eps(A);
  auto r = transport::gw_barycenter({&A, &A}, {0.5, 0.5}, bo);

  GwOptions pin;
  pin.eps_reg = identity_eps(A);
  EXPECT_LE(transport::entropic_gw(r.space, A, pin).cost, identity_tol(A));
}

TEST(Barycenter, DeterministicForSeed) {
  auto A = transport::space_from_cloud(relevance_cloud(3, 15));
  auto B = transport::space_from_cloud(relevance_cloud(4, 18));
  BarycenterOptions bo;
  bo.size = 10;
  bo.max_iters = 5;
  auto r1 = transport::gw_barycenter({&A, &B}, {0.5, 0.5}, bo);
  auto r2 = transport::gw_barycenter({&A, &B}, {0.5, 0.5}, bo);
  EXPECT_TRUE(r1.space.C == r2.space.C);
  EXPECT_EQ(r1.objective, r2.objective);
}

TEST(Barycenter, ValidatesArguments) {
  auto A = two_point_space(1.0);
  BarycenterOptions bo;
  bo.size = 1;
  EXPECT_THROW(transport::gw_barycenter({&A}, {1.0}, bo), ParameterError);
  bo.size = 2;
  EXPECT_THROW(transport::gw_barycenter({}, {}, bo), ParameterError);
  EXPECT_THROW(transport::gw_barycenter({&A}, {0.5, 0.5}, bo), ParameterError);
  EXPECT_THROW(transport::gw_barycenter({&A}, {0.7}, bo), ParameterError);  // off the simplex
  bo.size = 5;  // more support than the inputs carry
  EXPECT_THROW(transport::gw_barycenter({&A}, {1.0}, bo), ParameterError);
}

TEST(GwMatrixFile, RoundTripsBitExact) {
  std::vector<MetricMeasureSpace> sp;
  for (int i = 0; i < 5; ++i)
    sp.push_back(transport::space_from_cloud(relevance_cloud(300 + uint64_t(i), 30)));
  MatrixXd D = transport::gw_distance_matrix(sp, {}).D;

  auto p1 = temp_path("psieve_gw_rt1.psgw");
  auto p2 = temp_path("psieve_gw_rt2.psgw");
  transport::save_gw_matrix(D, 0xabcdef12u, p1);
  auto [D2, hash] = transport::load_gw_matrix(p1);
  EXPECT_EQ(hash, 0xabcdef12u);
  ASSERT_EQ(D2.rows(), D.rows());
  // entries survive the f32 narrowing exactly on reload
  for (int i = 0; i < D.rows(); ++i)
    for (int j = 0; j < D.cols(); ++j) EXPECT_EQ(float(D(i, j)), float(D2(i, j)));

  transport::save_gw_matrix(D2, hash, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(b1, b2);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST(GwMatrixFile, RejectsForeignAndTruncated) {
  auto pf = temp_path("psieve_gw_foreign.psgw");
  {
    std::ofstream os(pf, std::ios::binary);
    os << "PSDSjunkjunkjunk";
  }
  EXPECT_THROW(transport::load_gw_matrix(pf), FormatError);

  auto pt = temp_path("psieve_gw_trunc.psgw");
  transport::save_gw_matrix(MatrixXd::Zero(3, 3), 7, pt);
  auto sz = std::filesystem::file_size(pt);
  std::filesystem::resize_file(pt, sz - 6);
  EXPECT_THROW(transport::load_gw_matrix(pt), FormatError);
  std::filesystem::remove(pf);
  std::filesystem::remove(pt);
}
