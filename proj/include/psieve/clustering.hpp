#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "psieve/common.hpp"
#include "psieve/transport.hpp"

namespace psieve::clustering {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PCAModel {
  VectorXd mean;
  MatrixXd directions;   // feature_dim x d, orthonormal columns, strongest first
  VectorXd eigenvalues;  // kept sample-covariance eigenvalues, descending
  bool rank_reduced = false;

  VectorXd transform(const VectorXd& x) const { return directions.transpose() * (x - mean); }
};

struct PCAResult {
  PCAModel model;
  MatrixXd reduced;  // n x d, rows follow the input rows
};

// Mean-centered projection onto the top-d eigenvectors of the sample
// covariance. When the feature dimension exceeds the sample count the
// eigenproblem is solved on the n x n Gram matrix instead. Directions whose
// eigenvalue vanishes (relative to the largest) are dropped with a flag
// rather than returning noise axes.
inline PCAResult pca_fit_transform(const MatrixXd& X, int d = 10) {
  const int n = int(X.rows()), dim = int(X.cols());
  if (d < 1) throw ParameterError("reduction dimension must be positive");
  if (n <= d) throw ParameterError("need more samples than reduced dimensions");

  PCAResult out;
  out.model.mean = X.colwise().mean();
  MatrixXd Xc = X.rowwise() - out.model.mean.transpose();

  VectorXd evals;   // descending
  MatrixXd evecs;   // columns match evals
  if (dim <= n) {
    MatrixXd cov = Xc.transpose() * Xc / double(n - 1);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
    evals = es.eigenvalues().reverse();
    evecs = es.eigenvectors().rowwise().reverse();
  } else {
    MatrixXd gram = Xc * Xc.transpose() / double(n - 1);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram);
    VectorXd gvals = es.eigenvalues().reverse();
    MatrixXd gvecs = es.eigenvectors().rowwise().reverse();
    evals = gvals;
    evecs.resize(dim, gvals.size());
    for (int i = 0; i < gvals.size(); ++i) {
      if (gvals(i) > 0) {
        evecs.col(i) = Xc.transpose() * gvecs.col(i) / std::sqrt(gvals(i) * double(n - 1));
      } else {
        evecs.col(i).setZero();
      }
    }
  }

  double lead = std::max(evals(0), 0.0);
  int rank = 0;
  while (rank < evals.size() && evals(rank) > lead * 1e-10 && evals(rank) > 0) ++rank;
  int keep = std::min(d, rank);
  if (keep < d) out.model.rank_reduced = true;
  if (keep == 0) throw NumericError("covariance has no positive spectrum");

  out.model.directions = evecs.leftCols(keep);
  out.model.eigenvalues = evals.head(keep);
  // sign convention: the largest-magnitude entry of each direction is positive
  for (int c = 0; c < keep; ++c) {
    int at = 0;
    out.model.directions.col(c).cwiseAbs().maxCoeff(&at);
    if (out.model.directions(at, c) < 0) out.model.directions.col(c) = -out.model.directions.col(c);
  }
  out.reduced = Xc * out.model.directions;
  return out;
}

// ---------------------------------------------------------------------------
// Euclidean k-means
// ---------------------------------------------------------------------------

struct ClusterModel {
  int k = 0;
  std::vector<int> assignments;
  MatrixXd centers;               // k x d
  std::vector<double> objective;  // within-cluster sum of squares per pass
  int iters = 0;
};

namespace detail {

// D^2-weighted index draw for k-means++; a zero total falls back to the first
// index not yet chosen so duplicated points cannot stall seeding.
inline int sample_by_weight(const VectorXd& w, const std::vector<int>& taken, Rng& rng) {
  double total = w.sum();
  if (total <= 0) {
    for (int i = 0; i < w.size(); ++i)
      if (std::find(taken.begin(), taken.end(), i) == taken.end()) return i;
    return 0;
  }
  double r = rng.next_double() * total;
  double acc = 0;
  for (int i = 0; i < w.size(); ++i) {
    acc += w(i);
    if (r < acc) return i;
  }
  return int(w.size()) - 1;
}

}  // namespace detail

inline ClusterModel kmeans_pp_euclidean(const MatrixXd& Y, int k, uint64_t seed,
                                        int max_iters = 100) {
  const int n = int(Y.rows());
  if (k < 1) throw ParameterError("need at least one cluster");
  if (k > n) throw ParameterError("more clusters than samples");
  if (max_iters < 1) throw ParameterError("iteration cap must be positive");

  Rng rng(seed);
  ClusterModel model;
  model.k = k;
  model.centers.resize(k, Y.cols());

  std::vector<int> chosen;
  chosen.push_back(int(rng.next_range(0, uint32_t(n - 1))));
  model.centers.row(0) = Y.row(chosen[0]);
  VectorXd d2 = (Y.rowwise() - Y.row(chosen[0])).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    int pick = detail::sample_by_weight(d2, chosen, rng);
    chosen.push_back(pick);
    model.centers.row(c) = Y.row(pick);
    d2 = d2.cwiseMin((Y.rowwise() - Y.row(pick)).rowwise().squaredNorm());
  }

  model.assignments.assign(size_t(n), -1);
  for (int pass = 0; pass < max_iters; ++pass) {
    // assignment, ties to the lower cluster index
    bool changed = false;
    double wcss = 0;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = (Y.row(i) - model.centers.row(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        double dc = (Y.row(i) - model.centers.row(c)).squaredNorm();
        if (dc < bd) {
          bd = dc;
          best = c;
        }
      }
      if (model.assignments[size_t(i)] != best) changed = true;
      model.assignments[size_t(i)] = best;
      wcss += bd;
    }
    model.objective.push_back(wcss);
    model.iters = pass + 1;
    if (!changed && pass > 0) break;

    // mean update
    MatrixXd sums = MatrixXd::Zero(k, Y.cols());
    std::vector<int> counts(size_t(k), 0);
    for (int i = 0; i < n; ++i) {
      sums.row(model.assignments[size_t(i)]) += Y.row(i);
      counts[size_t(model.assignments[size_t(i)])]++;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[size_t(c)] > 0) {
        model.centers.row(c) = sums.row(c) / double(counts[size_t(c)]);
      } else {
        // empty cluster: reseed at the point farthest from its current center
        int far = 0;
        (Y.rowwise() - model.centers.row(c)).rowwise().squaredNorm().maxCoeff(&far);
        model.centers.row(c) = Y.row(far);
      }
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Coupling-metric k-means
// ---------------------------------------------------------------------------

struct GwKmeansOptions {
  int k = 2;
  int max_iters = 20;
  uint64_t seed = 1;
  transport::GwOptions gw;   // assignment and barycenter inner solves
  int barycenter_iters = 3;  // fixed-point budget per update step

  void validate() const {
    gw.validate();
    if (k < 1) throw ParameterError("need at least one cluster");
    if (max_iters < 1) throw ParameterError("iteration cap must be positive");
    if (barycenter_iters < 1) throw ParameterError("barycenter budget must be positive");
  }
};

struct GwClusterModel {
  int k = 0;
  std::vector<int> assignments;
  std::vector<transport::MetricMeasureSpace> centers;
  std::vector<double> objective;  // sum of coupling costs to owned centers per round
  int iters = 0;
};

namespace detail {

// Cost of one space against one center; failures surface as NaN so the
// caller can reject the candidate column and keep bookkeeping exact.
inline double center_cost(const transport::MetricMeasureSpace& center,
                          const transport::MetricMeasureSpace& space,
                          const transport::GwOptions& opt) {
  return transport::detail::gw_solve(center, space, opt, /*want_plan=*/false).cost;
}

}  // namespace detail

// k-means over metric-measure spaces: k-means++ seeding on coupling costs,
// assignment to the cheapest center, barycenter updates. A refreshed center
// is kept only when it lowers its cluster's total cost, so the recorded
// objective never increases. `pair_costs` (full pairwise cost matrix) feeds
// seeding and the first assignment; it is computed here when absent.
inline GwClusterModel gw_kmeans(const std::vector<const transport::MetricMeasureSpace*>& spaces,
                                const GwKmeansOptions& opt,
                                const MatrixXd* pair_costs = nullptr) {
  opt.validate();
  const int n = int(spaces.size());
  if (n < 1) throw ParameterError("clustering needs at least one space");
  if (opt.k > n) throw ParameterError("more clusters than spaces");
  for (const auto* s : spaces) s->validate();

  MatrixXd owned;
  if (!pair_costs) {
    owned = transport::gw_distance_matrix(spaces, opt.gw).D;
    pair_costs = &owned;
  }
  if (pair_costs->rows() != n || pair_costs->cols() != n)
    throw ParameterError("pair cost matrix does not match the space list");
  const MatrixXd& M = *pair_costs;
  const int k = opt.k;

  // k-means++ seeding with coupling costs as squared distances
  Rng rng(opt.seed);
  std::vector<int> chosen;
  chosen.push_back(int(rng.next_range(0, uint32_t(n - 1))));
  VectorXd d2 = M.col(chosen[0]).cwiseMax(0.0);
  for (int c = 1; c < k; ++c) {
    int pick = detail::sample_by_weight(d2, chosen, rng);
    chosen.push_back(pick);
    d2 = d2.cwiseMin(M.col(pick).cwiseMax(0.0));
  }

  GwClusterModel model;
  model.k = k;
  model.centers.reserve(size_t(k));
  MatrixXd cost(n, k);  // cost of each space against each current center
  for (int c = 0; c < k; ++c) {
    model.centers.push_back(*spaces[size_t(chosen[size_t(c)])]);
    cost.col(c) = M.col(chosen[size_t(c)]);
  }

  model.assignments.assign(size_t(n), -1);
  size_t attempted = 0, failed = 0;
  std::vector<int> failed_samples;

  for (int round = 0; round < opt.max_iters; ++round) {
    bool changed = false;
    double objective = 0;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (cost(i, c) < cost(i, best)) best = c;
      if (model.assignments[size_t(i)] != best) changed = true;
      model.assignments[size_t(i)] = best;
      objective += cost(i, best);
    }
    model.objective.push_back(objective);
    model.iters = round + 1;
    if (!changed && round > 0) break;
    if (round + 1 == opt.max_iters) break;

    // empty clusters grab the space farthest from their current center
    for (int c = 0; c < k; ++c) {
      if (std::count(model.assignments.begin(), model.assignments.end(), c) > 0) continue;
      int far = 0;
      cost.col(c).maxCoeff(&far);
      model.centers[size_t(c)] = *spaces[size_t(far)];
      cost.col(c) = M.col(far);
      model.assignments[size_t(far)] = c;
    }

    // update step: candidate barycenter per cluster, kept only when better
    for (int c = 0; c < k; ++c) {
      std::vector<const transport::MetricMeasureSpace*> members;
      std::vector<int> member_ix;
      for (int i = 0; i < n; ++i)
        if (model.assignments[size_t(i)] == c) {
          members.push_back(spaces[size_t(i)]);
          member_ix.push_back(i);
        }
      if (members.empty()) continue;

      std::vector<int> sizes;
      for (const auto* s : members) sizes.push_back(s->size());
      std::nth_element(sizes.begin(), sizes.begin() + long(sizes.size() / 2), sizes.end());
      transport::BarycenterOptions bo;
      bo.size = std::max(2, sizes[sizes.size() / 2]);
      bo.max_iters = opt.barycenter_iters;
      bo.seed = seed_mix({opt.seed, uint64_t(round) + 1, uint64_t(c)});
      bo.gw = opt.gw;

      VectorXd cand_col(n);
      bool cand_ok = true;
      try {
        std::vector<double> lambda(members.size(), 1.0 / double(members.size()));
        auto bary = transport::gw_barycenter(members, lambda, bo);
        std::atomic<size_t> col_failed{0};
        std::mutex mu;
        parallel_for(int64_t(n), [&](int64_t i) {
          try {
            cand_col(Eigen::Index(i)) = detail::center_cost(bary.space, *spaces[size_t(i)], opt.gw);
          } catch (const Error&) {
            col_failed.fetch_add(1);
            std::lock_guard<std::mutex> lock(mu);
            failed_samples.push_back(int(i));
          }
        });
        attempted += size_t(n);
        failed += col_failed.load();
        if (col_failed.load() > 0) {
          cand_ok = false;
        } else {
          double cand_sum = 0, cur_sum = 0;
          for (int i : member_ix) {
            cand_sum += cand_col(i);
            cur_sum += cost(i, c);
          }
          if (cand_sum < cur_sum) {
            model.centers[size_t(c)] = std::move(bary.space);
            cost.col(c) = cand_col;
          }
        }
      } catch (const Error&) {
        // barycenter solve failed outright: keep the current center
        attempted += members.size();
        failed += members.size();
        for (int i : member_ix) failed_samples.push_back(i);
        cand_ok = false;
      }
      (void)cand_ok;
    }

    if (attempted > 0 && double(failed) > 0.1 * double(attempted)) {
      std::sort(failed_samples.begin(), failed_samples.end());
      failed_samples.erase(std::unique(failed_samples.begin(), failed_samples.end()),
                           failed_samples.end());
      std::string msg = "coupling solves failed for " + std::to_string(failed) + " of " +
                        std::to_string(attempted) + " pairs; samples:";
      for (size_t i = 0; i < std::min<size_t>(failed_samples.size(), 16); ++i)
        msg += " " + std::to_string(failed_samples[i]);
      throw ClusteringError(msg);
    }
  }
  return model;
}

}  // namespace psieve::clustering
