#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cellid {

using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Matrix = Eigen::MatrixXd;
using ComplexMatrix = Eigen::MatrixXcd;
using Complex = std::complex<double>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A regressor matrix lost column rank. `column` indexes the first column
/// (in the caller's ordering) found to be linearly dependent on the others.
class RankError : public Error {
public:
    RankError(std::size_t column, std::string name, const std::string& what)
        : Error(what), column_(column), name_(std::move(name)) {}

    std::size_t column() const noexcept { return column_; }
    const std::string& column_name() const noexcept { return name_; }

private:
    std::size_t column_;
    std::string name_;
};

/// Malformed input file; `line` is 1-based.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Requested realization order exceeds the numerical rank of the Hankel matrix.
class DegenerateOrderError : public Error {
public:
    using Error::Error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw std::invalid_argument(message);
    }
}

inline Vector to_vector(std::span<const double> values) {
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline std::vector<double> to_std(const Vector& v) {
    return {v.data(), v.data() + v.size()};
}

inline double rms(std::span<const double> values) {
    if (values.empty()) {
        return 0.0;
    }
    double acc = 0.0;
    for (double v : values) {
        acc += v * v;
    }
    return std::sqrt(acc / static_cast<double>(values.size()));
}

inline double spectral_radius(const Matrix& a) {
    if (a.size() == 0) {
        return 0.0;
    }
    Eigen::EigenSolver<Matrix> es(a, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

struct LeastSquaresResult {
    Vector theta;
    double sum_squared_residual = 0.0;
    double residual_rms = 0.0;
};

/// Rank-revealing least squares: columns are equilibrated to unit norm and the
/// system is solved by column-pivoted Householder QR. A pivot below
/// `rank_tol` times the leading pivot raises RankError naming that column.
inline LeastSquaresResult solve_least_squares(const Matrix& phi, const Vector& y, double rank_tol = 1e-10,
                                              std::span<const std::string> names = {}) {
    require(phi.rows() == y.size(), "least squares: regressor rows and output length differ");
    require(phi.rows() >= phi.cols(), "least squares: fewer equations than unknowns");

    auto column_name = [&](Eigen::Index j) {
        return j < static_cast<Eigen::Index>(names.size()) ? names[static_cast<std::size_t>(j)]
                                                           : "column " + std::to_string(j);
    };

    Vector scale(phi.cols());
    for (Eigen::Index j = 0; j < phi.cols(); ++j) {
        const double n = phi.col(j).norm();
        if (!(n > 0.0) || !std::isfinite(n)) {
            throw RankError(static_cast<std::size_t>(j), column_name(j),
                            "rank-deficient regressor: " + column_name(j) + " is identically zero");
        }
        scale(j) = 1.0 / n;
    }
    const Matrix scaled = phi * scale.asDiagonal();

    Eigen::ColPivHouseholderQR<Matrix> qr(scaled);
    qr.setThreshold(rank_tol);
    if (qr.rank() < phi.cols()) {
        const Eigen::Index j = qr.colsPermutation().indices()(qr.rank());
        throw RankError(static_cast<std::size_t>(j), column_name(j),
                        "rank-deficient regressor: " + column_name(j) +
                            " is linearly dependent on the other columns");
    }

    LeastSquaresResult out;
    out.theta = scale.asDiagonal() * qr.solve(y);
    const Vector r = y - phi * out.theta;
    out.sum_squared_residual = r.squaredNorm();
    out.residual_rms = std::sqrt(out.sum_squared_residual / static_cast<double>(y.size()));
    return out;
}

}  // namespace cellid
