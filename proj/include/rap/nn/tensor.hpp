#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "rap/common.hpp"

namespace rap::nn {

// Dense row-major tensor. Rank <= 4 in practice ([n], [m,n], [C,H,W], [Co,Ci,kh,kw]).
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(numel_of(shape), fill);
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= size_t(d);
    return n;
  }
  size_t numel() const { return data.size(); }

  int dim(int i) const { return shape[size_t(i)]; }
  int rank() const { return int(shape.size()); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // 2-D Eigen views; tensor must be rank 2 (or reshaped logically by caller).
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<Mat> mat(int rows, int cols) { return Eigen::Map<Mat>(ptr(), rows, cols); }
  Eigen::Map<const Mat> mat(int rows, int cols) const {
    return Eigen::Map<const Mat>(ptr(), rows, cols);
  }
  Eigen::Map<Mat> mat2d() { return mat(shape[0], shape[1]); }
  Eigen::Map<const Mat> mat2d() const { return mat(shape[0], shape[1]); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(T(0)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename T>
Tensor<T> tensor_from(const std::vector<int>& shape, const std::vector<T>& v) {
  Tensor<T> t(shape);
  if (t.numel() != v.size()) throw ShapeMismatch("tensor_from: size mismatch");
  t.data = v;
  return t;
}

}  // namespace rap::nn
