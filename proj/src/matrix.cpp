#include "tslora/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "tslora/rng.hpp"

namespace tslora {

Matrix::Matrix(int r, int c, double fill_value)
    : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill_value) {
  if (r < 0 || c < 0 || (r == 0) != (c == 0)) {
    throw DimensionError("matrix dimensions must be positive, got " +
                         std::to_string(r) + "x" + std::to_string(c));
  }
}

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) {
    m(i, i) = 1.0;
  }
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> values) {
  const int r = static_cast<int>(values.size());
  const int c = r > 0 ? static_cast<int>(values.begin()->size()) : 0;
  Matrix m(r, c);
  int i = 0;
  for (const auto& row : values) {
    if (static_cast<int>(row.size()) != c) {
      throw DimensionError("ragged initializer rows");
    }
    int j = 0;
    for (double v : row) {
      m(i, j++) = v;
    }
    ++i;
  }
  return m;
}

Matrix Matrix::gaussian(int r, int c, double stddev, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data) {
    v = rng.gaussian(0.0, stddev);
  }
  return m;
}

std::string Matrix::shape_str() const {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

void Matrix::fill(double v) {
  std::ranges::fill(data, v);
}

bool Matrix::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw DimensionError("matmul: inner dimensions disagree: " + a.shape_str() +
                         " vs " + b.shape_str());
  }
  Matrix c(a.rows, b.cols);
  // ikj order streams rows of b and c.
  for (int i = 0; i < a.rows; ++i) {
    double* ci = &c.data[static_cast<size_t>(i) * c.cols];
    const double* ai = &a.data[static_cast<size_t>(i) * a.cols];
    for (int k = 0; k < a.cols; ++k) {
      const double aik = ai[k];
      const double* bk = &b.data[static_cast<size_t>(k) * b.cols];
      for (int j = 0; j < b.cols; ++j) {
        ci[j] += aik * bk[j];
      }
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) {
    throw DimensionError("matmul_nt: inner dimensions disagree: " +
                         a.shape_str() + " vs " + b.shape_str() + "^T");
  }
  Matrix c(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const double* ai = &a.data[static_cast<size_t>(i) * a.cols];
    double* ci = &c.data[static_cast<size_t>(i) * c.cols];
    for (int j = 0; j < b.rows; ++j) {
      const double* bj = &b.data[static_cast<size_t>(j) * b.cols];
      double acc = 0.0;
      for (int k = 0; k < a.cols; ++k) {
        acc += ai[k] * bj[k];
      }
      ci[j] = acc;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) {
    throw DimensionError("matmul_tn: inner dimensions disagree: " +
                         a.shape_str() + "^T vs " + b.shape_str());
  }
  Matrix c(a.cols, b.cols);
  for (int k = 0; k < a.rows; ++k) {
    const double* ak = &a.data[static_cast<size_t>(k) * a.cols];
    const double* bk = &b.data[static_cast<size_t>(k) * b.cols];
    for (int i = 0; i < a.cols; ++i) {
      const double aki = ak[i];
      double* ci = &c.data[static_cast<size_t>(i) * c.cols];
      for (int j = 0; j < b.cols; ++j) {
        ci[j] += aki * bk[j];
      }
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i) {
    for (int j = 0; j < a.cols; ++j) {
      t(j, i) = a(i, j);
    }
  }
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("add: shape mismatch: " + a.shape_str() + " vs " +
                         b.shape_str());
  }
  Matrix c = a;
  for (size_t i = 0; i < c.data.size(); ++i) {
    c.data[i] += b.data[i];
  }
  return c;
}

Matrix scale(const Matrix& a, double c) {
  Matrix out = a;
  for (double& v : out.data) {
    v *= c;
  }
  return out;
}

void axpy(Matrix& y, double c, const Matrix& x) {
  if (!y.same_shape(x)) {
    throw DimensionError("axpy: shape mismatch: " + y.shape_str() + " vs " +
                         x.shape_str());
  }
  for (size_t i = 0; i < y.data.size(); ++i) {
    y.data[i] += c * x.data[i];
  }
}

void add_inplace(Matrix& y, const Matrix& x) {
  axpy(y, 1.0, x);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("max_abs_diff: shape mismatch: " + a.shape_str() +
                         " vs " + b.shape_str());
  }
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  }
  return m;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    return false;
  }
  return std::memcmp(a.data.data(), b.data.data(),
                     a.data.size() * sizeof(double)) == 0;
}

}  // namespace tslora
