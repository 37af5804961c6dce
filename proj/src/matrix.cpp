#include "dsmoe/matrix.hpp"

#include <cmath>
#include <cstring>

#include "dsmoe/error.hpp"

namespace dsmoe {

namespace {

void require_nonneg(int rows, int cols) {
    if (rows < 0 || cols < 0) {
        throw ShapeError("Matrix: negative dimensions " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
}

}  // namespace

Matrix::Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
    require_nonneg(rows, cols);
    data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
}

Matrix::Matrix(int rows, int cols, double fill) : rows_(rows), cols_(cols) {
    require_nonneg(rows, cols);
    data_.assign(static_cast<std::size_t>(rows) * cols, fill);
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m;
    m.rows_ = static_cast<int>(rows.size());
    m.cols_ = rows.size() ? static_cast<int>(rows.begin()->size()) : 0;
    m.data_.reserve(static_cast<std::size_t>(m.rows_) * m.cols_);
    for (const auto& r : rows) {
        if (static_cast<int>(r.size()) != m.cols_) {
            throw ShapeError("Matrix::from_rows: ragged rows");
        }
        m.data_.insert(m.data_.end(), r.begin(), r.end());
    }
    return m;
}

void Matrix::fill(double v) {
    for (auto& x : data_) x = v;
}

void Matrix::check_finite(const char* what) const {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            throw NumericalError(std::string(what) + ": non-finite value in " + shape_str(*this) +
                                 " matrix");
        }
    }
}

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void matmul_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: dimension mismatch " + shape_str(a) + " x " + shape_str(b));
    }
    if (out.rows() != a.rows() || out.cols() != b.cols()) {
        out = Matrix(a.rows(), b.cols());
    } else if (!accumulate) {
        out.zero();
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    for (int i = 0; i < m; ++i) {
        const double* arow = a.row(i);
        double* crow = out.row(i);
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b.row(p);
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    out.check_finite("matmul");
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out;
    matmul_into(out, a, b, false);
    return out;
}

void matmul_tn_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: dimension mismatch " + shape_str(a) + "ᵀ x " + shape_str(b));
    }
    if (out.rows() != a.cols() || out.cols() != b.cols()) {
        out = Matrix(a.cols(), b.cols());
    } else if (!accumulate) {
        out.zero();
    }
    const int k = a.rows(), m = a.cols(), n = b.cols();
    for (int p = 0; p < k; ++p) {
        const double* arow = a.row(p);
        const double* brow = b.row(p);
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = out.row(i);
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    out.check_finite("matmul_tn");
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    Matrix out;
    matmul_tn_into(out, a, b, false);
    return out;
}

Matrix transposed(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        const double* arow = a.row(i);
        for (int j = 0; j < a.cols(); ++j) {
            t(j, i) = arow[j];
        }
    }
    return t;
}

void add_into(Matrix& dst, const Matrix& src) {
    if (!dst.same_shape(src)) {
        throw ShapeError("add_into: shape mismatch " + shape_str(dst) + " vs " + shape_str(src));
    }
    double* d = dst.data();
    const double* s = src.data();
    for (int i = 0; i < dst.size(); ++i) d[i] += s[i];
    dst.check_finite("add_into");
}

void axpy_into(Matrix& dst, double alpha, const Matrix& src) {
    if (!dst.same_shape(src)) {
        throw ShapeError("axpy_into: shape mismatch " + shape_str(dst) + " vs " + shape_str(src));
    }
    double* d = dst.data();
    const double* s = src.data();
    for (int i = 0; i < dst.size(); ++i) d[i] += alpha * s[i];
    dst.check_finite("axpy_into");
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("hadamard: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    Matrix out(a.rows(), a.cols());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
    out.check_finite("hadamard");
    return out;
}

void scale_inplace(Matrix& m, double s) {
    double* p = m.data();
    for (int i = 0; i < m.size(); ++i) p[i] *= s;
    m.check_finite("scale_inplace");
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("max_abs_diff: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    double md = 0.0;
    for (int i = 0; i < a.size(); ++i) {
        md = std::max(md, std::fabs(a.data()[i] - b.data()[i]));
    }
    return md;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0;
}

}  // namespace dsmoe
