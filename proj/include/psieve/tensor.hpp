#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "psieve/common.hpp"
#include "psieve/dataset.hpp"

namespace psieve::net {

// Dense NCHW tensor. Vectors (logits, flattened activations) use h = w = 1.
template <typename Real>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<Real> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_) { resize(n_, c_, h_, w_); }

  void resize(int n_, int c_, int h_, int w_) {
    n = n_;
    c = c_;
    h = h_;
    w = w_;
    v.assign(size_t(n) * c * h * w, Real(0));
  }

  size_t size() const { return v.size(); }
  int chw() const { return c * h * w; }

  Real& at(int ni, int ci, int hi, int wi) {
    return v[((size_t(ni) * c + ci) * h + hi) * w + wi];
  }
  Real at(int ni, int ci, int hi, int wi) const {
    return v[((size_t(ni) * c + ci) * h + hi) * w + wi];
  }

  Real* sample(int ni) { return v.data() + size_t(ni) * chw(); }
  const Real* sample(int ni) const { return v.data() + size_t(ni) * chw(); }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

  std::string shape_str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

template <typename Real>
using MatRM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatCM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename Real>
using VecX = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

// Unit-interval tensor from 8-bit images.
template <typename Real>
Tensor<Real> images_to_tensor(const std::vector<const data::Image*>& batch) {
  Tensor<Real> t(int(batch.size()), data::kChannels, data::kImageSide, data::kImageSide);
  for (int ni = 0; ni < t.n; ++ni)
    for (int ci = 0; ci < t.c; ++ci)
      for (int hi = 0; hi < t.h; ++hi)
        for (int wi = 0; wi < t.w; ++wi)
          t.at(ni, ci, hi, wi) = Real(batch[size_t(ni)]->at(hi, wi, ci)) / Real(255);
  return t;
}

template <typename Real>
Tensor<Real> image_to_tensor(const data::Image& img) {
  return images_to_tensor<Real>({&img});
}

}  // namespace psieve::net
