#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "tslora/errors.hpp"

namespace tslora {

class Rng;

// Dense row-major matrix of 64-bit floats.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0);

  static Matrix identity(int n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> values);
  static Matrix gaussian(int r, int c, double stddev, Rng& rng);

  double& operator()(int r, int c) {
    return data[static_cast<size_t>(r) * cols + c];
  }
  double operator()(int r, int c) const {
    return data[static_cast<size_t>(r) * cols + c];
  }

  size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const {
    return rows == o.rows && cols == o.cols;
  }
  std::string shape_str() const;
  void fill(double v);
  bool all_finite() const;
};

// C = A * B. Throws DimensionError naming both shapes on mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// C = A^T * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double c);

// y += c * x (same shape)
void axpy(Matrix& y, double c, const Matrix& x);
void add_inplace(Matrix& y, const Matrix& x);

double max_abs_diff(const Matrix& a, const Matrix& b);
bool bit_equal(const Matrix& a, const Matrix& b);

}  // namespace tslora
