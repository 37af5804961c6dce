#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dsmoe {

// Dense row-major matrix of 64-bit floats; the universal numeric carrier.
// Public operations keep the no-NaN/no-Inf invariant: any op that can
// produce a non-finite value scans its result and throws NumericalError.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols);                // zero-filled
    Matrix(int rows, int cols, double fill);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int size() const { return static_cast<int>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    double* row(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const double* row(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    std::span<double> row_span(int r) { return {row(r), static_cast<std::size_t>(cols_)}; }
    std::span<const double> row_span(int r) const { return {row(r), static_cast<std::size_t>(cols_)}; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    void fill(double v);
    void zero() { fill(0.0); }
    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    // Throws NumericalError naming `what` if any entry is NaN/Inf.
    void check_finite(const char* what) const;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

std::string shape_str(const Matrix& m);

// c = a·b
Matrix matmul(const Matrix& a, const Matrix& b);
void matmul_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate);

// c = aᵀ·b (used for weight gradients: W_grad += xᵀ·dy)
Matrix matmul_tn(const Matrix& a, const Matrix& b);
void matmul_tn_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate);

Matrix transposed(const Matrix& a);

void add_into(Matrix& dst, const Matrix& src);                 // dst += src
void axpy_into(Matrix& dst, double alpha, const Matrix& src);  // dst += alpha·src
Matrix hadamard(const Matrix& a, const Matrix& b);
void scale_inplace(Matrix& m, double s);

double max_abs_diff(const Matrix& a, const Matrix& b);
bool bit_equal(const Matrix& a, const Matrix& b);

}  // namespace dsmoe
