#pragma once

// Dense building blocks with hand-written backward passes. Activations are
// row-major matrices with one row per sequence position (or per pixel).

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>
#include <cmath>
#include <numbers>
#include <vector>

namespace seqpolicy {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <typename S>
using MatMap = Eigen::Map<Mat<S>>;
template <typename S>
using RowVecMap = Eigen::Map<RowVec<S>>;
// Storage behind mapped tensors. A fixed alignment keeps Eigen's peeling,
// and so the floating-point result, independent of where malloc lands.
template <typename S>
using AlignedVector = std::vector<S, Eigen::aligned_allocator<S>>;

template <typename S>
inline S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
}

template <typename S>
inline S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
  const S pdf = std::exp(S(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<S> / std::numbers::sqrt2_v<S>;
  return cdf + x * pdf;
}

// Elementwise GELU over a matrix; `cdf` keeps Phi(x) for the backward pass.
template <typename S>
Mat<S> gelu_forward(const Mat<S>& x, Mat<S>& cdf) {
  cdf = (S(0.5) * (S(1) + (x.array() * S(std::numbers::sqrt2 / 2)).erf())).matrix();
  return x.cwiseProduct(cdf);
}

// d gelu / dx from the saved input and Phi(x).
template <typename S>
Mat<S> gelu_derivative(const Mat<S>& x, const Mat<S>& cdf) {
  const S inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<S> / std::numbers::sqrt2_v<S>;
  return (cdf.array() + x.array() * (x.array().square() * S(-0.5)).exp() * inv_sqrt_2pi).matrix();
}

template <typename S>
struct NormCache {
  Mat<S> xhat;
  std::vector<S> rstd;
};

inline constexpr double kNormEps = 1e-5;

template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const RowVecMap<S>& gamma, const RowVecMap<S>& beta, NormCache<S>& cache) {
  const Eigen::Index n = x.rows(), d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(static_cast<size_t>(n));
  Mat<S> y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().mean();
    const S rstd = S(1) / std::sqrt(var + S(kNormEps));
    cache.rstd[static_cast<size_t>(i)] = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
    y.row(i) = cache.xhat.row(i).cwiseProduct(gamma) + beta;
  }
  return y;
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const NormCache<S>& cache, const RowVecMap<S>& gamma,
                           RowVecMap<S> dgamma, RowVecMap<S> dbeta) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  Mat<S> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    dgamma += dy.row(i).cwiseProduct(cache.xhat.row(i));
    dbeta += dy.row(i);
    const RowVec<S> dxhat = dy.row(i).cwiseProduct(gamma);
    const S mean_dxhat = dxhat.mean();
    const S mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
    dx.row(i) = cache.rstd[static_cast<size_t>(i)] *
                (dxhat.array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

// GroupNorm over a (pixels x channels) map; statistics pool every pixel of
// each contiguous channel group.
template <typename S>
Mat<S> group_norm(const Mat<S>& x, int groups, const RowVecMap<S>& gamma, const RowVecMap<S>& beta,
                  NormCache<S>& cache) {
  const Eigen::Index p = x.rows(), c = x.cols(), per = c / groups;
  cache.xhat.resize(p, c);
  cache.rstd.resize(static_cast<size_t>(groups));
  for (int g = 0; g < groups; ++g) {
    auto block = x.middleCols(g * per, per);
    const S mean = block.mean();
    const S var = (block.array() - mean).square().mean();
    const S rstd = S(1) / std::sqrt(var + S(kNormEps));
    cache.rstd[static_cast<size_t>(g)] = rstd;
    cache.xhat.middleCols(g * per, per) = (block.array() - mean) * rstd;
  }
  Mat<S> y(p, c);
  for (Eigen::Index i = 0; i < p; ++i) y.row(i) = cache.xhat.row(i).cwiseProduct(gamma) + beta;
  return y;
}

template <typename S>
Mat<S> group_norm_backward(const Mat<S>& dy, int groups, const NormCache<S>& cache, const RowVecMap<S>& gamma,
                           RowVecMap<S> dgamma, RowVecMap<S> dbeta) {
  const Eigen::Index p = dy.rows(), c = dy.cols(), per = c / groups;
  dgamma += dy.cwiseProduct(cache.xhat).colwise().sum();
  dbeta += dy.colwise().sum();
  Mat<S> dxhat = dy;
  for (Eigen::Index i = 0; i < p; ++i) dxhat.row(i) = dxhat.row(i).cwiseProduct(gamma);
  Mat<S> dx(p, c);
  for (int g = 0; g < groups; ++g) {
    auto dh = dxhat.middleCols(g * per, per);
    auto xh = cache.xhat.middleCols(g * per, per);
    const S mean_dh = dh.mean();
    const S mean_dh_xh = dh.cwiseProduct(xh).mean();
    dx.middleCols(g * per, per) =
        cache.rstd[static_cast<size_t>(g)] * (dh.array() - mean_dh - xh.array() * mean_dh_xh);
  }
  return dx;
}

// 3x3 "same" convolution on a side x side map stored as (pixels x channels),
// lowered to a matrix product: col[pixel, (ky*3 + kx)*C + c].
template <typename S>
Mat<S> im2col3x3(const Mat<S>& x, int side) {
  const Eigen::Index c = x.cols();
  Mat<S> col = Mat<S>::Zero(x.rows(), 9 * c);
  for (int r = 0; r < side; ++r) {
    for (int q = 0; q < side; ++q) {
      const Eigen::Index row = r * side + q;
      for (int ky = 0; ky < 3; ++ky) {
        const int sr = r + ky - 1;
        if (sr < 0 || sr >= side) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sq = q + kx - 1;
          if (sq < 0 || sq >= side) continue;
          col.row(row).segment((ky * 3 + kx) * c, c) = x.row(sr * side + sq);
        }
      }
    }
  }
  return col;
}

template <typename S>
Mat<S> col2im3x3(const Mat<S>& dcol, int side, Eigen::Index channels) {
  Mat<S> dx = Mat<S>::Zero(static_cast<Eigen::Index>(side) * side, channels);
  for (int r = 0; r < side; ++r) {
    for (int q = 0; q < side; ++q) {
      const Eigen::Index row = r * side + q;
      for (int ky = 0; ky < 3; ++ky) {
        const int sr = r + ky - 1;
        if (sr < 0 || sr >= side) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sq = q + kx - 1;
          if (sq < 0 || sq >= side) continue;
          dx.row(sr * side + sq) += dcol.row(row).segment((ky * 3 + kx) * channels, channels);
        }
      }
    }
  }
  return dx;
}

// Row-wise softmax in place.
template <typename S>
void softmax_rows(Mat<S>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const S mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
}

}  // namespace seqpolicy
