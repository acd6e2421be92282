/*
 * Copyright 2026 The nmgsim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Dense linear algebra and fixed-step integration used by the simulator and
// the modal analysis. Everything here is pure: no hidden state, safe to call
// from several threads on disjoint inputs.

#include "nmg/core.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace nmg {

// ---------------------------------------------------------------------------
// DenseMatrix

template <class T>
class DenseMatrix {
public:
    using value_type = T;

    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
        return m;
    }

    /// Row-major construction; throws when the entry count does not match.
    static DenseMatrix from_rows(std::size_t rows, std::size_t cols, std::vector<T> entries) {
        if (entries.size() != rows * cols)
            throw std::invalid_argument("DenseMatrix: entry count does not match shape");
        DenseMatrix m;
        m.rows_ = rows;
        m.cols_ = cols;
        m.data_ = std::move(entries);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool square() const noexcept { return rows_ == cols_; }

    T& operator()(std::size_t i, std::size_t j) {
        assert(i < rows_ && j < cols_);
        return data_[i * cols_ + j];
    }
    const T& operator()(std::size_t i, std::size_t j) const {
        assert(i < rows_ && j < cols_);
        return data_[i * cols_ + j];
    }

    std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }

    DenseMatrix transpose() const {
        DenseMatrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    bool operator==(const DenseMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = DenseMatrix<double>;
using ComplexMatrix = DenseMatrix<Complex>;

template <class T>
DenseMatrix<T> operator*(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matrix product: shape mismatch");
    DenseMatrix<T> c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T aik = a(i, k);
            if (aik == T{}) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

template <class T>
std::vector<T> operator*(const DenseMatrix<T>& a, std::span<const T> x) {
    if (a.cols() != x.size()) throw std::invalid_argument("matrix-vector product: shape mismatch");
    std::vector<T> y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        T s{};
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

template <class T>
std::vector<T> operator*(const DenseMatrix<T>& a, const std::vector<T>& x) {
    return a * std::span<const T>(x);
}

template <class T>
double norm_inf(const DenseMatrix<T>& a) {
    double best = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (const T& v : a.row(i)) s += std::abs(v);
        best = std::max(best, s);
    }
    return best;
}

template <class T>
double norm_fro(const DenseMatrix<T>& a) {
    double s = 0.0;
    for (const T& v : a.data()) s += std::norm(Complex(v));
    return std::sqrt(s);
}

template <class T>
double norm_inf(std::span<const T> x) {
    double best = 0.0;
    for (const T& v : x) best = std::max(best, static_cast<double>(std::abs(v)));
    return best;
}

template <class T>
double norm2(std::span<const T> x) {
    double s = 0.0;
    for (const T& v : x) s += std::norm(Complex(v));
    return std::sqrt(s);
}

inline double norm_inf(const std::vector<double>& x) { return norm_inf(std::span<const double>(x)); }
inline double norm2(const std::vector<Complex>& x) { return norm2(std::span<const Complex>(x)); }

// ---------------------------------------------------------------------------
// LU with partial pivoting

enum class PivotPolicy {
    Throw,      ///< SingularMatrix when a pivot falls below 1e-12 * ||A||_inf
    Regularize, ///< replace tiny pivots (inverse iteration wants near-singular shifts)
};

template <class T>
class LuDecomposition {
public:
    static constexpr double kSingularTolerance = 1e-12;

    explicit LuDecomposition(DenseMatrix<T> a, PivotPolicy policy = PivotPolicy::Throw)
        : lu_(std::move(a)), perm_(lu_.rows()) {
        if (!lu_.square()) throw std::invalid_argument("LU: matrix must be square");
        const std::size_t n = lu_.rows();
        std::iota(perm_.begin(), perm_.end(), std::size_t{0});
        const double anorm = norm_inf(lu_);
        const double floor = policy == PivotPolicy::Throw
                                 ? kSingularTolerance * anorm
                                 : std::numeric_limits<double>::epsilon() * std::max(anorm, 1e-300);
        for (std::size_t k = 0; k < n; ++k) {
            std::size_t p = k;
            double best = std::abs(lu_(k, k));
            for (std::size_t i = k + 1; i < n; ++i)
                if (std::abs(lu_(i, k)) > best) {
                    best = std::abs(lu_(i, k));
                    p = i;
                }
            if (best <= floor || anorm == 0.0) {
                if (policy == PivotPolicy::Throw)
                    throw SingularMatrix("LU: pivot " + std::to_string(best) + " below tolerance at column " +
                                         std::to_string(k));
                lu_(p, k) = T{floor > 0.0 ? floor : 1e-300};
            }
            if (p != k) {
                for (std::size_t j = 0; j < n; ++j) std::swap(lu_(k, j), lu_(p, j));
                std::swap(perm_[k], perm_[p]);
            }
            const T pivot = lu_(k, k);
            for (std::size_t i = k + 1; i < n; ++i) {
                const T m = lu_(i, k) / pivot;
                lu_(i, k) = m;
                if (m == T{}) continue;
                for (std::size_t j = k + 1; j < n; ++j) lu_(i, j) -= m * lu_(k, j);
            }
        }
    }

    std::size_t size() const noexcept { return lu_.rows(); }

    std::vector<T> solve(std::span<const T> b) const {
        const std::size_t n = lu_.rows();
        if (b.size() != n) throw std::invalid_argument("LU solve: size mismatch");
        std::vector<T> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = b[perm_[i]];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < i; ++j) x[i] -= lu_(i, j) * x[j];
        for (std::size_t i = n; i-- > 0;) {
            for (std::size_t j = i + 1; j < n; ++j) x[i] -= lu_(i, j) * x[j];
            x[i] /= lu_(i, i);
        }
        return x;
    }

    std::vector<T> solve(const std::vector<T>& b) const { return solve(std::span<const T>(b)); }

private:
    DenseMatrix<T> lu_;
    std::vector<std::size_t> perm_;
};

inline std::vector<double> lu_solve(const Matrix& a, std::span<const double> b) {
    return LuDecomposition<double>(a).solve(b);
}
inline std::vector<double> lu_solve(const Matrix& a, const std::vector<double>& b) {
    return lu_solve(a, std::span<const double>(b));
}

template <class T>
DenseMatrix<T> inverse(const DenseMatrix<T>& a) {
    LuDecomposition<T> lu(a);
    const std::size_t n = a.rows();
    DenseMatrix<T> inv(n, n);
    std::vector<T> e(n);
    for (std::size_t j = 0; j < n; ++j) {
        std::fill(e.begin(), e.end(), T{});
        e[j] = T{1};
        auto col = lu.solve(e);
        for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
    }
    return inv;
}

// ---------------------------------------------------------------------------
// Null space by Gauss-Jordan elimination with full pivoting. Returns an
// orthonormal-free basis (each vector has a unit entry at its free column).

inline std::vector<std::vector<double>> null_space(const Matrix& m, double rel_tol = 1e-10) {
    const std::size_t rows = m.rows(), cols = m.cols();
    Matrix a = m;
    const double scale = std::max(norm_inf(m), 1e-300);
    std::vector<std::size_t> colperm(cols);
    std::iota(colperm.begin(), colperm.end(), std::size_t{0});
    std::size_t rank = 0;
    for (; rank < std::min(rows, cols); ++rank) {
        std::size_t pi = rank, pj = rank;
        double best = 0.0;
        for (std::size_t i = rank; i < rows; ++i)
            for (std::size_t j = rank; j < cols; ++j)
                if (std::abs(a(i, j)) > best) {
                    best = std::abs(a(i, j));
                    pi = i;
                    pj = j;
                }
        if (best <= rel_tol * scale) break;
        if (pi != rank)
            for (std::size_t j = 0; j < cols; ++j) std::swap(a(rank, j), a(pi, j));
        if (pj != rank) {
            for (std::size_t i = 0; i < rows; ++i) std::swap(a(i, rank), a(i, pj));
            std::swap(colperm[rank], colperm[pj]);
        }
        const double piv = a(rank, rank);
        for (std::size_t j = 0; j < cols; ++j) a(rank, j) /= piv;
        for (std::size_t i = 0; i < rows; ++i) {
            if (i == rank) continue;
            const double f = a(i, rank);
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < cols; ++j) a(i, j) -= f * a(rank, j);
        }
    }
    std::vector<std::vector<double>> basis;
    for (std::size_t free = rank; free < cols; ++free) {
        std::vector<double> v(cols, 0.0);
        v[colperm[free]] = 1.0;
        for (std::size_t r = 0; r < rank; ++r) v[colperm[r]] = -a(r, free);
        basis.push_back(std::move(v));
    }
    return basis;
}

/// Left null space: vectors w with w^T m = 0.
inline std::vector<std::vector<double>> left_null_space(const Matrix& m, double rel_tol = 1e-10) {
    return null_space(m.transpose(), rel_tol);
}

// ---------------------------------------------------------------------------
// Real nonsymmetric eigenproblem: balance -> Householder Hessenberg ->
// Francis double-shift QR for the values; inverse iteration for vectors.

struct EigenDecomposition {
    std::vector<Complex> values;
    ComplexMatrix right_vectors; ///< column k pairs with values[k]
    ComplexMatrix left_vectors;  ///< column k is w_k with w_k^H A = lambda_k w_k^H, w_k^H v_k = 1
    std::vector<bool> degenerate; ///< true where biorthogonalisation failed (defective cluster)
};

namespace detail {

struct Balanced {
    Matrix a;
    std::vector<double> scale; // A_bal = D^-1 A D, D = diag(scale)
};

inline Balanced balance(Matrix a) {
    constexpr double radix = 2.0;
    constexpr double sqrdx = radix * radix;
    const std::size_t n = a.rows();
    std::vector<double> scale(n, 1.0);
    bool done = false;
    while (!done) {
        done = true;
        for (std::size_t i = 0; i < n; ++i) {
            double r = 0.0, c = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                if (j != i) {
                    c += std::abs(a(j, i));
                    r += std::abs(a(i, j));
                }
            if (c == 0.0 || r == 0.0) continue;
            double g = r / radix;
            double f = 1.0;
            const double s = c + r;
            while (c < g) {
                f *= radix;
                c *= sqrdx;
            }
            g = r * radix;
            while (c > g) {
                f /= radix;
                c /= sqrdx;
            }
            if ((c + r) / f < 0.95 * s) {
                done = false;
                scale[i] *= f;
                for (std::size_t j = 0; j < n; ++j) a(i, j) /= f;
                for (std::size_t j = 0; j < n; ++j) a(j, i) *= f;
            }
        }
    }
    return {std::move(a), std::move(scale)};
}

inline void hessenberg(Matrix& h) {
    const std::size_t n = h.rows();
    if (n < 3) return;
    std::vector<double> ort(n, 0.0);
    for (std::size_t m = 1; m + 1 < n; ++m) {
        double scale = 0.0;
        for (std::size_t i = m; i < n; ++i) scale += std::abs(h(i, m - 1));
        if (scale == 0.0) continue;
        double hh = 0.0;
        for (std::size_t i = n; i-- > m;) {
            ort[i] = h(i, m - 1) / scale;
            hh += ort[i] * ort[i];
        }
        double g = std::sqrt(hh);
        if (ort[m] > 0) g = -g;
        hh -= ort[m] * g;
        ort[m] -= g;
        for (std::size_t j = m; j < n; ++j) {
            double f = 0.0;
            for (std::size_t i = n; i-- > m;) f += ort[i] * h(i, j);
            f /= hh;
            for (std::size_t i = m; i < n; ++i) h(i, j) -= f * ort[i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            double f = 0.0;
            for (std::size_t j = n; j-- > m;) f += ort[j] * h(i, j);
            f /= hh;
            for (std::size_t j = m; j < n; ++j) h(i, j) -= f * ort[j];
        }
        ort[m] *= scale;
        h(m, m - 1) = scale * g;
    }
    for (std::size_t i = 2; i < n; ++i)
        for (std::size_t j = 0; j + 1 < i; ++j) h(i, j) = 0.0;
}

inline double sign_of(double a, double b) { return b >= 0.0 ? std::abs(a) : -std::abs(a); }

// Francis double-shift QR on an upper Hessenberg matrix (values only).
inline std::vector<Complex> hessenberg_qr(Matrix a, double deflation_tol) {
    const int n = static_cast<int>(a.rows());
    std::vector<Complex> w(static_cast<std::size_t>(n));
    if (n == 0) return w;
    const double eps = std::numeric_limits<double>::epsilon();
    double anorm = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = std::max(i - 1, 0); j < n; ++j) anorm += std::abs(a(i, j));
    const long sweep_cap = 100L * n;
    long sweeps = 0;
    int nn = n - 1;
    double t = 0.0;
    double p = 0, q = 0, r = 0, s = 0, x = 0, y = 0, z = 0, ww = 0;
    while (nn >= 0) {
        int its = 0;
        int l;
        do {
            for (l = nn; l > 0; --l) {
                s = std::abs(a(l - 1, l - 1)) + std::abs(a(l, l));
                if (s == 0.0) s = anorm;
                if (std::abs(a(l, l - 1)) <= deflation_tol * s) {
                    a(l, l - 1) = 0.0;
                    break;
                }
            }
            x = a(nn, nn);
            if (l == nn) {
                w[nn--] = x + t;
            } else {
                y = a(nn - 1, nn - 1);
                ww = a(nn, nn - 1) * a(nn - 1, nn);
                if (l == nn - 1) {
                    p = 0.5 * (y - x);
                    q = p * p + ww;
                    z = std::sqrt(std::abs(q));
                    x += t;
                    if (q >= 0.0) {
                        z = p + sign_of(z, p);
                        w[nn - 1] = w[nn] = x + z;
                        if (z != 0.0) w[nn] = x - ww / z;
                    } else {
                        w[nn] = Complex(x + p, -z);
                        w[nn - 1] = std::conj(w[nn]);
                    }
                    nn -= 2;
                } else {
                    if (++sweeps > sweep_cap)
                        throw NoConvergence("eigenvalue QR iteration exceeded " + std::to_string(sweep_cap) +
                                            " sweeps");
                    if (its > 0 && its % 10 == 0) {
                        t += x;
                        for (int i = 0; i <= nn; ++i) a(i, i) -= x;
                        s = std::abs(a(nn, nn - 1)) + std::abs(a(nn - 1, nn - 2));
                        y = x = 0.75 * s;
                        ww = -0.4375 * s * s;
                    }
                    ++its;
                    int m;
                    for (m = nn - 2; m >= l; --m) {
                        z = a(m, m);
                        r = x - z;
                        s = y - z;
                        p = (r * s - ww) / a(m + 1, m) + a(m, m + 1);
                        q = a(m + 1, m + 1) - z - r - s;
                        r = a(m + 2, m + 1);
                        s = std::abs(p) + std::abs(q) + std::abs(r);
                        p /= s;
                        q /= s;
                        r /= s;
                        if (m == l) break;
                        const double u = std::abs(a(m, m - 1)) * (std::abs(q) + std::abs(r));
                        const double v = std::abs(p) * (std::abs(a(m - 1, m - 1)) + std::abs(z) +
                                                        std::abs(a(m + 1, m + 1)));
                        if (u <= eps * v) break;
                    }
                    for (int i = m; i < nn - 1; ++i) {
                        a(i + 2, i) = 0.0;
                        if (i != m) a(i + 2, i - 1) = 0.0;
                    }
                    for (int k = m; k < nn; ++k) {
                        if (k != m) {
                            p = a(k, k - 1);
                            q = a(k + 1, k - 1);
                            r = 0.0;
                            if (k + 1 != nn) r = a(k + 2, k - 1);
                            if ((x = std::abs(p) + std::abs(q) + std::abs(r)) != 0.0) {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        if ((s = sign_of(std::sqrt(p * p + q * q + r * r), p)) != 0.0) {
                            if (k == m) {
                                if (l != m) a(k, k - 1) = -a(k, k - 1);
                            } else {
                                a(k, k - 1) = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for (int j = k; j <= nn; ++j) {
                                p = a(k, j) + q * a(k + 1, j);
                                if (k + 1 != nn) {
                                    p += r * a(k + 2, j);
                                    a(k + 2, j) -= p * z;
                                }
                                a(k + 1, j) -= p * y;
                                a(k, j) -= p * x;
                            }
                            const int mmin = nn < k + 3 ? nn : k + 3;
                            for (int i = l; i <= mmin; ++i) {
                                p = x * a(i, k) + y * a(i, k + 1);
                                if (k + 1 != nn) {
                                    p += z * a(i, k + 2);
                                    a(i, k + 2) -= p * r;
                                }
                                a(i, k + 1) -= p * q;
                                a(i, k) -= p;
                            }
                        }
                    }
                }
            }
        } while (l + 1 < nn);
    }
    return w;
}

inline ComplexMatrix shifted(const Matrix& a, Complex lambda) {
    const std::size_t n = a.rows();
    ComplexMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m(i, j) = a(i, j);
    for (std::size_t i = 0; i < n; ++i) m(i, i) -= lambda;
    return m;
}

inline void normalize(std::vector<Complex>& v) {
    const double nv = norm2(v);
    if (nv > 0.0)
        for (auto& c : v) c /= nv;
}

// Inverse iteration for the columns of a cluster of (numerically) equal
// eigenvalues; vectors are kept orthogonal to the ones already found.
inline std::vector<std::vector<Complex>> inverse_iteration_cluster(const Matrix& a, Complex lambda,
                                                                   std::size_t count) {
    const std::size_t n = a.rows();
    const double anorm = std::max(norm_inf(a), 1e-300);
    // A tiny offset keeps the shifted matrix away from exact singularity
    // without degrading the convergence factor.
    const Complex shift = lambda + Complex(anorm * 1e-13, anorm * 1e-13);
    LuDecomposition<Complex> lu(shifted(a, shift), PivotPolicy::Regularize);
    std::vector<std::vector<Complex>> out;
    for (std::size_t k = 0; k < count; ++k) {
        std::vector<Complex> v(n);
        for (std::size_t i = 0; i < n; ++i)
            v[i] = Complex(1.0 + 0.37 * static_cast<double>((i * (k + 3)) % 7),
                           0.11 * static_cast<double>((i + 2 * k) % 5));
        for (int it = 0; it < 4; ++it) {
            for (const auto& u : out) {
                Complex dot{};
                for (std::size_t i = 0; i < n; ++i) dot += std::conj(u[i]) * v[i];
                for (std::size_t i = 0; i < n; ++i) v[i] -= dot * u[i];
            }
            normalize(v);
            v = lu.solve(v);
            normalize(v);
        }
        for (const auto& u : out) {
            Complex dot{};
            for (std::size_t i = 0; i < n; ++i) dot += std::conj(u[i]) * v[i];
            for (std::size_t i = 0; i < n; ++i) v[i] -= dot * u[i];
        }
        normalize(v);
        out.push_back(std::move(v));
    }
    return out;
}

} // namespace detail

/// Relative deflation tolerance on Hessenberg subdiagonals.
inline constexpr double kEigenDeflationTolerance = 1e-12;

/// Eigenvalues only (balanced Hessenberg QR).
inline std::vector<Complex> eigenvalues(const Matrix& a) {
    if (!a.square()) throw std::invalid_argument("eigenvalues: matrix must be square");
    for (double v : a.data())
        if (!std::isfinite(v)) throw std::invalid_argument("eigenvalues: non-finite entry");
    auto bal = detail::balance(a);
    detail::hessenberg(bal.a);
    return detail::hessenberg_qr(std::move(bal.a), kEigenDeflationTolerance);
}

/// Right eigenvector of A for a (computed) eigenvalue, unit 2-norm.
inline std::vector<Complex> right_eigenvector(const Matrix& a, Complex lambda) {
    auto bal = detail::balance(a);
    auto v = detail::inverse_iteration_cluster(bal.a, lambda, 1).front();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bal.scale[i];
    detail::normalize(v);
    return v;
}

/// Left eigenvector w (w^H A = lambda w^H), unit 2-norm.
inline std::vector<Complex> left_eigenvector(const Matrix& a, Complex lambda) {
    // w^H A = lambda w^H  <=>  A^T conj(w) = lambda conj(w)
    auto u = right_eigenvector(a.transpose(), lambda);
    for (auto& c : u) c = std::conj(c);
    return u;
}

/// Full decomposition with biorthonormal left/right vectors.
inline EigenDecomposition eig_real(const Matrix& a) {
    EigenDecomposition out;
    out.values = eigenvalues(a);
    const std::size_t n = a.rows();
    out.right_vectors = ComplexMatrix(n, n);
    out.left_vectors = ComplexMatrix(n, n);
    out.degenerate.assign(n, false);
    if (n == 0) return out;

    auto bal = detail::balance(a);
    const Matrix bal_t = bal.a.transpose();
    const double anorm = std::max(norm_inf(bal.a), 1e-300);
    const double cluster_tol = 1e-8 * anorm;

    std::vector<bool> done(n, false);
    for (std::size_t k = 0; k < n; ++k) {
        if (done[k]) continue;
        std::vector<std::size_t> cluster;
        for (std::size_t j = k; j < n; ++j)
            if (!done[j] && std::abs(out.values[j] - out.values[k]) <= cluster_tol) cluster.push_back(j);
        const Complex lam = out.values[k];
        auto right = detail::inverse_iteration_cluster(bal.a, lam, cluster.size());
        auto left_t = detail::inverse_iteration_cluster(bal_t, lam, cluster.size());
        const std::size_t m = cluster.size();
        // back-transform: v = D v_b, w = D^-1 conj(u_b)
        for (auto& v : right)
            for (std::size_t i = 0; i < n; ++i) v[i] *= bal.scale[i];
        std::vector<std::vector<Complex>> left(m);
        for (std::size_t c = 0; c < m; ++c) {
            left[c].resize(n);
            for (std::size_t i = 0; i < n; ++i) left[c][i] = std::conj(left_t[c][i]) / bal.scale[i];
        }
        for (auto& v : right) detail::normalize(v);
        for (auto& w : left) detail::normalize(w);
        // Biorthonormalise: W <- W M^{-H}, M = W^H V.
        ComplexMatrix gram(m, m);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < m; ++c) {
                Complex s{};
                for (std::size_t i = 0; i < n; ++i) s += std::conj(left[r][i]) * right[c][i];
                gram(r, c) = s;
            }
        bool degenerate = false;
        ComplexMatrix ginv;
        try {
            double gmax = 0.0;
            for (auto v : gram.data()) gmax = std::max(gmax, std::abs(v));
            if (gmax < 1e-13) throw SingularMatrix("gram");
            ginv = inverse(gram);
        } catch (const SingularMatrix&) {
            degenerate = true;
        }
        for (std::size_t c = 0; c < m; ++c) {
            const std::size_t col = cluster[c];
            for (std::size_t i = 0; i < n; ++i) out.right_vectors(i, col) = right[c][i];
            for (std::size_t i = 0; i < n; ++i) {
                Complex s{};
                if (!degenerate)
                    for (std::size_t r = 0; r < m; ++r) s += left[r][i] * std::conj(ginv(c, r));
                else
                    s = left[c][i];
                out.left_vectors(i, col) = s;
            }
            out.degenerate[col] = degenerate;
            done[col] = true;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Classical fourth-order Runge-Kutta

/// f(t, x, dxdt) writes the derivative into dxdt.
using RhsFunction = std::function<void(double, std::span<const double>, std::span<double>)>;

class Rk4Workspace {
public:
    explicit Rk4Workspace(std::size_t n = 0) { resize(n); }

    void resize(std::size_t n) {
        k1_.assign(n, 0.0);
        k2_.assign(n, 0.0);
        k3_.assign(n, 0.0);
        k4_.assign(n, 0.0);
        tmp_.assign(n, 0.0);
    }

    /// Advances x in place by one step of size h.
    template <class F>
    void step(F&& f, std::span<double> x, double t, double h) {
        const std::size_t n = x.size();
        if (k1_.size() != n) resize(n);
        if (!(h > 0.0)) throw std::invalid_argument("rk4: step must be positive");
        f(t, std::span<const double>(x.data(), n), std::span<double>(k1_));
        check(k1_);
        for (std::size_t i = 0; i < n; ++i) tmp_[i] = x[i] + 0.5 * h * k1_[i];
        f(t + 0.5 * h, std::span<const double>(tmp_), std::span<double>(k2_));
        check(k2_);
        for (std::size_t i = 0; i < n; ++i) tmp_[i] = x[i] + 0.5 * h * k2_[i];
        f(t + 0.5 * h, std::span<const double>(tmp_), std::span<double>(k3_));
        check(k3_);
        for (std::size_t i = 0; i < n; ++i) tmp_[i] = x[i] + h * k3_[i];
        f(t + h, std::span<const double>(tmp_), std::span<double>(k4_));
        check(k4_);
        for (std::size_t i = 0; i < n; ++i) x[i] += h / 6.0 * (k1_[i] + 2.0 * k2_[i] + 2.0 * k3_[i] + k4_[i]);
    }

private:
    static void check(const std::vector<double>& k) {
        for (std::size_t i = 0; i < k.size(); ++i)
            if (!std::isfinite(k[i]))
                throw NonFiniteDerivative("rk4: non-finite derivative in component " + std::to_string(i));
    }

    std::vector<double> k1_, k2_, k3_, k4_, tmp_;
};

inline std::vector<double> rk4_step(const RhsFunction& f, std::span<const double> x, double t, double h) {
    std::vector<double> out(x.begin(), x.end());
    Rk4Workspace ws(out.size());
    ws.step(f, std::span<double>(out), t, h);
    return out;
}

} // namespace nmg
