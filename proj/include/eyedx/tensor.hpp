#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "eyedx/common.hpp"

namespace eyedx {

// Dense 2-D tensor, row-major. Vectors are (n, 1) columns, scalars (1, 1).
// Scalar type is float for training/inference and double for gradient checks.
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols)
      : rows_(rows), cols_(cols),
        data_(static_cast<std::size_t>(rows) * cols, S(0)) {
    if (rows < 0 || cols < 0) throw ShapeError("negative tensor dimension");
  }

  static Tensor scalar(S v) {
    Tensor t(1, 1);
    t.data_[0] = v;
    return t;
  }

  static Tensor column(std::initializer_list<S> vals) {
    Tensor t(static_cast<int>(vals.size()), 1);
    int i = 0;
    for (S v : vals) t.data_[i++] = v;
    return t;
  }

  // row-major fill: {r0c0, r0c1, ..., r1c0, ...}
  static Tensor from_rows(int rows, int cols, std::initializer_list<S> vals) {
    Tensor t(rows, cols);
    if (vals.size() != t.data_.size())
      throw ShapeError("from_rows: value count does not match shape");
    int i = 0;
    for (S v : vals) t.data_[i++] = v;
    return t;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  S at(int r, int c) const {
    return data_[static_cast<std::size_t>(r) * cols_ + c];
  }
  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  S& operator[](std::size_t i) { return data_[i]; }
  S operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  std::string shape_str() const {
    return "(" + std::to_string(rows_) + "," + std::to_string(cols_) + ")";
  }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void fill(S v) {
    for (S& x : data_) x = v;
  }

  Tensor<double> to_double() const {
    Tensor<double> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<double>(data_[i]);
    return out;
  }

  Tensor<float> to_float() const {
    Tensor<float> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<float>(data_[i]);
    return out;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<S> data_;
};

}  // namespace eyedx
