#pragma once

#include "cellid/core.hpp"
#include "cellid/signals.hpp"

#include <unsupported/Eigen/FFT>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace cellid {

/// ZOH impulse response of the fractional integrator 1/s^alpha:
/// h[0] = 0, h[k] = ts^alpha / (alpha Gamma(alpha)) (k^alpha - (k-1)^alpha).
inline std::vector<double> fractional_impulse(double alpha, double ts, std::size_t k_max) {
    require(alpha > 0.0 && alpha <= 1.0, "fractional order must lie in (0, 1]");
    require(ts > 0.0, "sampling period must be positive");
    require(k_max >= 1, "impulse response needs at least one sample after k = 0");
    const double gain = std::pow(ts, alpha) / (alpha * std::tgamma(alpha));
    std::vector<double> h(k_max + 1, 0.0);
    for (std::size_t k = 1; k <= k_max; ++k) {
        const auto kd = static_cast<double>(k);
        h[k] = gain * (std::pow(kd, alpha) - std::pow(kd - 1.0, alpha));
    }
    return h;
}

/// Sampled Warburg impedance A_w / sqrt(s): the alpha = 1/2 case scaled by a_w.
inline std::vector<double> warburg_impulse(double a_w, double ts, std::size_t k_max) {
    require(a_w > 0.0, "Warburg coefficient must be positive");
    auto w = fractional_impulse(0.5, ts, k_max);
    for (double& v : w) {
        v *= a_w;
    }
    return w;
}

/// Discrete state-space model (a, b, c) without feedthrough, sampled at `ts`.
/// For the Warburg element it models Z_w / (A_w sqrt(ts)); the coefficient
/// enters only through the output path.
struct WarburgRealization {
    Matrix a;
    Vector b;
    RowVector c;
    double ts = 1.0;

    Eigen::Index order() const noexcept { return a.rows(); }
};

struct ContinuousRealization {
    Matrix a_bar;
    Vector b_bar;
    RowVector c_bar;
};

struct HoKalmanOptions {
    /// Rows = columns of the Hankel matrix. Zero selects the largest square
    /// Hankel the impulse supports, floor(K/2) for Markov samples 1..K.
    std::size_t hankel_size = 0;
    /// Relative singular-value cutoff for the rank decision.
    double rank_tol = 1e-12;
    /// Hankels up to this size are factored densely; larger ones iteratively.
    std::size_t dense_limit = 400;
};

namespace detail {

/// Square Hankel matrix H[i][j] = h[1 + shift + i + j] applied through FFT
/// correlation, so the m x m matrix is never formed.
class HankelOperator {
public:
    HankelOperator(std::span<const double> impulse, std::size_t m, std::size_t shift) : m_(m) {
        fft_size_ = 1;
        while (fft_size_ < 3 * m) {
            fft_size_ <<= 1;
        }
        std::vector<Complex> g(fft_size_, Complex(0.0, 0.0));
        for (std::size_t t = 0; t + 1 < 2 * m; ++t) {
            g[t] = impulse[1 + shift + t];
        }
        fft_.fwd(spectrum_, g);
    }

    Matrix apply(const Matrix& x) const {
        Matrix y(static_cast<Eigen::Index>(m_), x.cols());
        std::vector<Complex> buf(fft_size_);
        std::vector<Complex> freq;
        std::vector<Complex> back;
        for (Eigen::Index col = 0; col < x.cols(); ++col) {
            std::fill(buf.begin(), buf.end(), Complex(0.0, 0.0));
            for (std::size_t j = 0; j < m_; ++j) {
                buf[j] = x(static_cast<Eigen::Index>(m_ - 1 - j), col);
            }
            fft_.fwd(freq, buf);
            for (std::size_t f = 0; f < fft_size_; ++f) {
                freq[f] *= spectrum_[f];
            }
            fft_.inv(back, freq);
            for (std::size_t i = 0; i < m_; ++i) {
                y(static_cast<Eigen::Index>(i), col) = back[i + m_ - 1].real();
            }
        }
        return y;
    }

private:
    std::size_t m_;
    std::size_t fft_size_;
    std::vector<Complex> spectrum_;
    mutable Eigen::FFT<double> fft_;
};

inline Matrix dense_hankel(std::span<const double> impulse, std::size_t m, std::size_t shift) {
    Matrix h(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = impulse[1 + shift + i + j];
        }
    }
    return h;
}

inline Matrix orthonormalize(const Matrix& x) {
    Eigen::HouseholderQR<Matrix> qr(x);
    return qr.householderQ() * Matrix::Identity(x.rows(), x.cols());
}

struct HankelFactors {
    Matrix u;  // m x n left singular vectors
    Matrix v;  // m x n right singular vectors
    Vector s;  // n leading singular values, descending
    double s_max = 0.0;
};

/// Leading singular triplets of a symmetric Hankel matrix by block subspace
/// iteration with Rayleigh-Ritz extraction. For symmetric H, singular values
/// are |eigenvalues| and v = u * sign(eigenvalue).
inline HankelFactors iterative_hankel_factors(const HankelOperator& op, std::size_t m, std::size_t n) {
    const auto mi = static_cast<Eigen::Index>(m);
    const auto p = static_cast<Eigen::Index>(std::min<std::size_t>(m, n + 10));
    const auto ni = static_cast<Eigen::Index>(n);

    std::mt19937_64 engine(0x5eedULL);
    std::normal_distribution<double> normal;
    Matrix q(mi, p);
    for (Eigen::Index j = 0; j < p; ++j) {
        for (Eigen::Index i = 0; i < mi; ++i) {
            q(i, j) = normal(engine);
        }
    }
    q = orthonormalize(q);

    constexpr int max_iterations = 2000;
    constexpr double tol = 1e-12;
    for (int it = 0; it < max_iterations; ++it) {
        const Matrix z = op.apply(q);
        Matrix t = q.transpose() * z;
        t = 0.5 * (t + t.transpose()).eval();
        Eigen::SelfAdjointEigenSolver<Matrix> es(t);

        std::vector<Eigen::Index> order(static_cast<std::size_t>(p));
        for (Eigen::Index j = 0; j < p; ++j) {
            order[static_cast<std::size_t>(j)] = j;
        }
        std::sort(order.begin(), order.end(), [&](Eigen::Index l, Eigen::Index r) {
            return std::abs(es.eigenvalues()(l)) > std::abs(es.eigenvalues()(r));
        });
        Matrix w(p, p);
        Vector lambda(p);
        for (Eigen::Index j = 0; j < p; ++j) {
            w.col(j) = es.eigenvectors().col(order[static_cast<std::size_t>(j)]);
            lambda(j) = es.eigenvalues()(order[static_cast<std::size_t>(j)]);
        }
        const Matrix ritz = q * w;
        const Matrix hritz = z * w;

        const double scale = std::abs(lambda(0));
        bool converged = true;
        for (Eigen::Index j = 0; j < ni && converged; ++j) {
            converged = (hritz.col(j) - lambda(j) * ritz.col(j)).norm() <= tol * scale;
        }
        if (converged || it + 1 == max_iterations) {
            HankelFactors f;
            f.u = ritz.leftCols(ni);
            f.s = lambda.head(ni).cwiseAbs();
            f.v = f.u;
            for (Eigen::Index j = 0; j < ni; ++j) {
                if (lambda(j) < 0.0) {
                    f.v.col(j) *= -1.0;
                }
            }
            f.s_max = scale;
            return f;
        }
        q = orthonormalize(hritz);
    }
    return {};
}

}  // namespace detail

/// Ho-Kalman realization of order `order` from Markov parameters
/// impulse[1..]. The SVD factors are split evenly (square-root balancing),
/// and state signs are fixed so that every entry of c is non-negative.
inline WarburgRealization ho_kalman(std::span<const double> impulse, std::size_t order,
                                    const HoKalmanOptions& options = {}, double ts = 1.0) {
    require(order >= 1, "realization order must be at least 1");
    require(impulse.size() >= 4 * order + 2, "impulse needs at least 4*order + 2 samples");
    require(ts > 0.0, "sampling period must be positive");

    const std::size_t k_max = impulse.size() - 1;
    const std::size_t m = options.hankel_size == 0 ? k_max / 2 : options.hankel_size;
    require(m >= order, "Hankel size must be at least the realization order");
    require(2 * m <= k_max, "Hankel size needs 2*size Markov parameters after k = 0");

    const auto n = static_cast<Eigen::Index>(order);
    detail::HankelFactors f;
    Matrix shifted_v;
    Matrix u_t_shifted;
    if (m <= options.dense_limit) {
        const Matrix h = detail::dense_hankel(impulse, m, 0);
        Eigen::BDCSVD<Matrix> svd(h, Eigen::ComputeThinU | Eigen::ComputeThinV);
        f.u = svd.matrixU().leftCols(n);
        f.v = svd.matrixV().leftCols(n);
        f.s = svd.singularValues().head(n);
        f.s_max = svd.singularValues()(0);
    } else {
        const detail::HankelOperator op(impulse, m, 0);
        f = detail::iterative_hankel_factors(op, m, order);
    }

    if (!(f.s_max > 0.0) || f.s(n - 1) <= options.rank_tol * f.s_max) {
        throw DegenerateOrderError("Hankel matrix has numerical rank below the requested order " +
                                   std::to_string(order));
    }

    for (Eigen::Index j = 0; j < n; ++j) {
        if (f.u(0, j) < 0.0) {
            f.u.col(j) *= -1.0;
            f.v.col(j) *= -1.0;
        }
    }

    if (m <= options.dense_limit) {
        shifted_v = detail::dense_hankel(impulse, m, 1) * f.v;
    } else {
        const detail::HankelOperator shifted(impulse, m, 1);
        shifted_v = shifted.apply(f.v);
    }
    const Vector inv_sqrt = f.s.cwiseSqrt().cwiseInverse();
    const Vector sqrt_s = f.s.cwiseSqrt();

    WarburgRealization r;
    r.a = inv_sqrt.asDiagonal() * (f.u.transpose() * shifted_v) * inv_sqrt.asDiagonal();
    r.b = sqrt_s.asDiagonal() * f.v.row(0).transpose();
    r.c = (sqrt_s.asDiagonal() * f.u.row(0).transpose()).transpose();
    r.ts = ts;

    if (spectral_radius(r.a) >= 1.0) {
        throw Error("Ho-Kalman realization of order " + std::to_string(order) + " is not stable");
    }
    return r;
}

/// Markov parameters of a realization: w[0] = 0, w[k] = c a^(k-1) b.
inline std::vector<double> realization_impulse(const WarburgRealization& r, std::size_t k_max) {
    std::vector<double> w(k_max + 1, 0.0);
    Vector x = r.b;
    for (std::size_t k = 1; k <= k_max; ++k) {
        w[k] = r.c.dot(x);
        x = r.a * x;
    }
    return w;
}

/// 100 * rms(w - w_hat) / rms(w), in percent.
inline double relative_error(std::span<const double> w, std::span<const double> w_hat) {
    require(w.size() == w_hat.size(), "relative error needs sequences of equal length");
    double err = 0.0;
    double ref = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
        err += (w[k] - w_hat[k]) * (w[k] - w_hat[k]);
        ref += w[k] * w[k];
    }
    if (!(ref > 0.0)) {
        throw Error("relative error undefined for a zero-energy reference");
    }
    return 100.0 * std::sqrt(err / ref);
}

/// Principal matrix logarithm. Diagonalizes when the eigenvector basis is
/// well conditioned (cond <= 1e8); otherwise defers to Eigen's inverse
/// scaling-and-squaring implementation.
inline Matrix matrix_log(const Matrix& a) {
    require(a.rows() == a.cols(), "matrix logarithm needs a square matrix");
    Eigen::EigenSolver<Matrix> es(a);
    const Eigen::VectorXcd lambda = es.eigenvalues();
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
        const Complex l = lambda(i);
        if (std::abs(l.imag()) <= 1e-12 * std::max(1.0, std::abs(l)) && l.real() <= 0.0) {
            throw Error("principal logarithm undefined: eigenvalue on the closed negative real axis");
        }
    }
    const ComplexMatrix v = es.eigenvectors();
    Eigen::JacobiSVD<ComplexMatrix> svd(v);
    const auto& sv = svd.singularValues();
    const double cond = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1) : INFINITY;
    if (cond > 1e8) {
        return a.log();
    }
    Eigen::VectorXcd log_lambda(lambda.size());
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
        log_lambda(i) = std::log(lambda(i));
    }
    const ComplexMatrix l = v * log_lambda.asDiagonal() * v.inverse();
    return l.real();
}

/// ZOH-inverse of a discrete realization: a_bar = ln(a)/ts,
/// b_bar = -(I - a)^{-1} a_bar b, c_bar = c.
inline ContinuousRealization to_continuous(const WarburgRealization& r) {
    const Matrix identity = Matrix::Identity(r.a.rows(), r.a.cols());
    Eigen::FullPivLU<Matrix> lu(identity - r.a);
    if (!lu.isInvertible()) {
        throw Error("cannot convert to continuous time: I - a is singular");
    }
    ContinuousRealization out;
    out.a_bar = matrix_log(r.a) / r.ts;
    out.b_bar = -lu.solve(out.a_bar * r.b);
    out.c_bar = r.c;
    return out;
}

/// H(e^{jw}) = c (e^{jw} I - a)^{-1} b for w in rad/sample.
inline std::vector<Complex> freq_response(const WarburgRealization& r, std::span<const double> omegas) {
    std::vector<Complex> out;
    out.reserve(omegas.size());
    const ComplexMatrix a = r.a.cast<Complex>();
    const Eigen::VectorXcd b = r.b.cast<Complex>();
    const Eigen::RowVectorXcd c = r.c.cast<Complex>();
    for (double w : omegas) {
        require(w > 0.0 && w <= std::numbers::pi, "discrete frequency must lie in (0, pi]");
        const Complex z = std::polar(1.0, w);
        const ComplexMatrix m = z * ComplexMatrix::Identity(a.rows(), a.cols()) - a;
        out.push_back((c * m.partialPivLu().solve(b))(0));
    }
    return out;
}

/// H(jw) = c_bar (jw I - a_bar)^{-1} b_bar for w in rad/s.
inline std::vector<Complex> freq_response(const ContinuousRealization& r, std::span<const double> omegas) {
    std::vector<Complex> out;
    out.reserve(omegas.size());
    const ComplexMatrix a = r.a_bar.cast<Complex>();
    const Eigen::VectorXcd b = r.b_bar.cast<Complex>();
    const Eigen::RowVectorXcd c = r.c_bar.cast<Complex>();
    for (double w : omegas) {
        require(w > 0.0, "frequency must be positive");
        const ComplexMatrix m = Complex(0.0, w) * ComplexMatrix::Identity(a.rows(), a.cols()) - a;
        out.push_back((c * m.partialPivLu().solve(b))(0));
    }
    return out;
}

/// Normalized ideal Warburg element 1/sqrt(jw), with sqrt(j) = e^{j pi/4}.
/// With w in rad/sample this is Z_w / (A_w sqrt(ts)) at w/ts rad/s.
inline Complex ideal_warburg(double omega) {
    return std::polar(1.0 / std::sqrt(omega), -std::numbers::pi / 4.0);
}

inline double magnitude_db(Complex h) { return 20.0 * std::log10(std::abs(h)); }
inline double phase_deg(Complex h) { return std::arg(h) * 180.0 / std::numbers::pi; }

/// Realization file: header `matrix,row,col,value`, one line per entry of
/// a, b and c, plus `ts,0,0,<value>`.
inline void write_realization(const WarburgRealization& r, std::ostream& os) {
    os << "matrix,row,col,value\n" << std::setprecision(17);
    os << "ts,0,0," << r.ts << '\n';
    for (Eigen::Index i = 0; i < r.a.rows(); ++i) {
        for (Eigen::Index j = 0; j < r.a.cols(); ++j) {
            os << "a," << i << ',' << j << ',' << r.a(i, j) << '\n';
        }
    }
    for (Eigen::Index i = 0; i < r.b.size(); ++i) {
        os << "b," << i << ",0," << r.b(i) << '\n';
    }
    for (Eigen::Index j = 0; j < r.c.size(); ++j) {
        os << "c,0," << j << ',' << r.c(j) << '\n';
    }
}

inline void write_realization(const WarburgRealization& r, const std::string& path) {
    std::ofstream os(path);
    if (!os) {
        throw Error("cannot open " + path + " for writing");
    }
    write_realization(r, os);
}

inline WarburgRealization read_realization(std::istream& is) {
    std::string line;
    std::size_t line_no = 1;
    if (!std::getline(is, line) || detail::trim(line) != "matrix,row,col,value") {
        throw ParseError(1, "expected header 'matrix,row,col,value'");
    }
    struct Entry {
        std::string name;
        Eigen::Index row;
        Eigen::Index col;
        double value;
    };
    std::vector<Entry> entries;
    Eigen::Index n = 0;
    double ts = 1.0;
    while (std::getline(is, line)) {
        ++line_no;
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto fields = detail::split_csv(line);
        if (fields.size() != 4) {
            throw ParseError(line_no, "expected 4 columns, found " + std::to_string(fields.size()));
        }
        const auto row = detail::parse_double(fields[1]);
        const auto col = detail::parse_double(fields[2]);
        const auto value = detail::parse_double(fields[3]);
        if (!row || !col || !value || !std::isfinite(*value) || *row < 0 || *col < 0) {
            throw ParseError(line_no, "malformed realization entry");
        }
        const std::string name(detail::trim(fields[0]));
        if (name == "ts") {
            ts = *value;
            continue;
        }
        if (name != "a" && name != "b" && name != "c") {
            throw ParseError(line_no, "unknown matrix '" + name + "'");
        }
        entries.push_back({name, static_cast<Eigen::Index>(*row), static_cast<Eigen::Index>(*col), *value});
        n = std::max({n, entries.back().row + 1, entries.back().col + 1});
    }
    WarburgRealization r;
    r.a = Matrix::Zero(n, n);
    r.b = Vector::Zero(n);
    r.c = RowVector::Zero(n);
    r.ts = ts;
    for (const auto& e : entries) {
        if (e.name == "a") {
            r.a(e.row, e.col) = e.value;
        } else if (e.name == "b") {
            r.b(e.row) = e.value;
        } else {
            r.c(e.col) = e.value;
        }
    }
    return r;
}

inline WarburgRealization read_realization(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw Error("cannot open " + path);
    }
    return read_realization(is);
}

/// Order-7 realization of the normalized Warburg impulse over k = 0..10000,
/// computed once per process.
inline const WarburgRealization& reference_realization() {
    static const WarburgRealization r = ho_kalman(warburg_impulse(1.0, 1.0, 10000), 7);
    return r;
}

}  // namespace cellid
