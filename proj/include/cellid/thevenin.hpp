#pragma once

#include "cellid/core.hpp"
#include "cellid/signals.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace cellid {

/// Companion-form observer matrix A0 with output row C = [1, 0, ..., 0].
/// A0 = [c | I; 0], where c holds the negated characteristic-polynomial
/// coefficients, so A0 + L C keeps the same structure for any L.
struct ObserverMatrix {
    Matrix a0;
    std::vector<Complex> eigenvalues;

    Eigen::Index order() const noexcept { return a0.rows(); }

    RowVector c_row() const {
        RowVector c = RowVector::Zero(order());
        c(0) = 1.0;
        return c;
    }

    /// Eigenvalues must close under conjugation, lie inside the unit disk and
    /// have positive real part.
    static ObserverMatrix from_eigenvalues(std::vector<Complex> lambda) {
        require(!lambda.empty(), "observer needs at least one eigenvalue");
        for (const auto& l : lambda) {
            require(l.real() > 0.0 && std::abs(l) < 1.0,
                    "observer eigenvalues must have positive real part and lie inside the unit disk");
        }
        // poly[j] multiplies z^(n-j); poly[0] = 1.
        std::vector<Complex> poly{Complex(1.0, 0.0)};
        for (const auto& l : lambda) {
            std::vector<Complex> next(poly.size() + 1, Complex(0.0, 0.0));
            for (std::size_t j = 0; j < poly.size(); ++j) {
                next[j] += poly[j];
                next[j + 1] -= l * poly[j];
            }
            poly = std::move(next);
        }
        const auto n = static_cast<Eigen::Index>(lambda.size());
        ObserverMatrix obs;
        obs.a0 = Matrix::Zero(n, n);
        for (Eigen::Index j = 0; j < n; ++j) {
            const Complex coef = poly[static_cast<std::size_t>(j + 1)];
            require(std::abs(coef.imag()) <= 1e-12 * std::max(1.0, std::abs(coef)),
                    "complex observer eigenvalues must come in conjugate pairs");
            obs.a0(j, 0) = -coef.real();
            if (j + 1 < n) {
                obs.a0(j, j + 1) = 1.0;
            }
        }
        obs.eigenvalues = std::move(lambda);
        return obs;
    }
};

/// s[k+1] = A0^T s[k] + C^T u[k] from s[0] = 0; row k of the result is s[k]^T.
inline Matrix observer_filter(const Matrix& a0, std::span<const double> signal) {
    const Eigen::Index n = a0.rows();
    Matrix out(static_cast<Eigen::Index>(signal.size()), n);
    std::vector<double> s(static_cast<std::size_t>(n), 0.0);
    std::vector<double> next(static_cast<std::size_t>(n), 0.0);
    for (std::size_t k = 0; k < signal.size(); ++k) {
        const auto row = static_cast<Eigen::Index>(k);
        for (Eigen::Index i = 0; i < n; ++i) {
            out(row, i) = s[static_cast<std::size_t>(i)];
        }
        for (Eigen::Index i = 0; i < n; ++i) {
            double acc = 0.0;
            for (Eigen::Index j = 0; j < n; ++j) {
                acc += a0(j, i) * s[static_cast<std::size_t>(j)];
            }
            next[static_cast<std::size_t>(i)] = acc;
        }
        next[0] += signal[k];
        s.swap(next);
    }
    return out;
}

inline Matrix observer_filter(const ObserverMatrix& obs, std::span<const double> signal) {
    return observer_filter(obs.a0, signal);
}

/// Thevenin model in observer form:
///   x[k+1] = (A0 + L C) x[k] + (b_a - L r0) i[k]
///   v[k]   = C x[k] + ocv0 - inv_c0 q[k] - r0 i[k],   q[k] = ts sum_{j<k} i[j].
struct TheveninParams {
    Matrix a0;
    Vector x0;
    Vector b_a;
    double r0 = 0.0;
    Vector l_gain;
    double ocv0 = 0.0;
    double inv_c0 = 0.0;

    Eigen::Index order() const noexcept { return a0.rows(); }

    RowVector c_row() const {
        RowVector c = RowVector::Zero(order());
        c(0) = 1.0;
        return c;
    }
    Matrix a() const { return a0 + l_gain * c_row(); }
    Vector b() const { return b_a - l_gain * r0; }
    bool stable() const { return spectral_radius(a()) < 1.0; }
    double c0() const { return 1.0 / inv_c0; }

    /// Parameters for a given plant (a, b) in observable canonical form
    /// expressed around the observer a0.
    static TheveninParams from_plant(const Matrix& a0, const Matrix& a, const Vector& b, double r0, double ocv0,
                                     double inv_c0, const Vector& x0) {
        require(a.rows() == a0.rows() && b.size() == a0.rows() && x0.size() == a0.rows(),
                "plant and observer dimensions differ");
        TheveninParams p;
        p.a0 = a0;
        p.l_gain = a.col(0) - a0.col(0);
        require((a - a0 - p.l_gain * p.c_row()).cwiseAbs().maxCoeff() <= 1e-14 * std::max(1.0, a.norm()),
                "plant matrix is not in the observer's companion form");
        p.x0 = x0;
        p.b_a = b + p.l_gain * r0;
        p.r0 = r0;
        p.ocv0 = ocv0;
        p.inv_c0 = inv_c0;
        return p;
    }
};

struct TheveninTrajectory {
    std::vector<double> voltage;
    std::vector<double> ocv;
    double final_ocv = 0.0;
    Vector final_x;
    bool stable = true;
};

inline TheveninTrajectory thevenin_simulate(const TheveninParams& p, std::span<const double> current, double ts,
                                            double ocv_init, const Vector& x_init) {
    require(x_init.size() == p.order(), "initial state length must match the model order");
    const Matrix a = p.a();
    const Vector b = p.b();
    TheveninTrajectory out;
    out.stable = spectral_radius(a) < 1.0;
    out.voltage.resize(current.size());
    out.ocv.resize(current.size());
    double ocv = ocv_init;
    Vector x = x_init;
    for (std::size_t k = 0; k < current.size(); ++k) {
        out.ocv[k] = ocv;
        out.voltage[k] = x(0) + ocv - p.r0 * current[k];
        ocv -= ts * p.inv_c0 * current[k];
        x = a * x + b * current[k];
    }
    out.final_ocv = ocv;
    out.final_x = std::move(x);
    return out;
}

/// Piecewise simulation chained through OCV and state.
inline TheveninTrajectory thevenin_simulate(const PiecewiseModel<TheveninParams>& model,
                                            const SampledSignal& current) {
    require(!model.segments.empty() && model.segments.size() == model.plan.count(),
            "one parameter set per segment required");
    require(model.plan.total() == current.size(), "segment plan must cover the whole signal");
    TheveninTrajectory out;
    double ocv = model.segments.front().ocv0;
    Vector x = model.segments.front().x0;
    for (std::size_t s = 0; s < model.plan.count(); ++s) {
        const auto seg = current.values().subspan(model.plan.offset(s), model.plan.lengths[s]);
        auto part = thevenin_simulate(model.segments[s], seg, current.ts(), ocv, x);
        out.voltage.insert(out.voltage.end(), part.voltage.begin(), part.voltage.end());
        out.ocv.insert(out.ocv.end(), part.ocv.begin(), part.ocv.end());
        out.stable = out.stable && part.stable;
        ocv = part.final_ocv;
        x = std::move(part.final_x);
    }
    out.final_ocv = ocv;
    out.final_x = std::move(x);
    return out;
}

/// Regressor blocks when both the initial OCV and state are unknown.
/// Widths n, n, 1, n, 1, 1, n, n.
struct Segment1Blocks {
    Matrix phi_a;  // C A0^k
    Matrix phi_b;  // filtered current
    Vector phi_c;  // -i
    Matrix phi_d;  // filtered voltage
    Vector phi_e;  // 1
    Vector phi_f;  // -q
    Matrix phi_g;  // -filtered unit step
    Matrix phi_h;  // filtered q
    Vector y;
    double ts = 1.0;
    Matrix a0;

    Eigen::Index order() const noexcept { return a0.rows(); }
    Eigen::Index rows() const noexcept { return y.size(); }

    Matrix stacked() const {
        const Eigen::Index n = order();
        Matrix phi(rows(), 5 * n + 3);
        phi << phi_a, phi_b, phi_c, phi_d, phi_e, phi_f, phi_g, phi_h;
        return phi;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        const auto add = [&](const std::string& block, Eigen::Index width) {
            for (Eigen::Index j = 0; j < width; ++j) {
                out.push_back(width == 1 ? block : block + "[" + std::to_string(j) + "]");
            }
        };
        const Eigen::Index n = order();
        add("theta_A", n);
        add("theta_B", n);
        add("theta_C", 1);
        add("theta_D", n);
        add("theta_E", 1);
        add("theta_F", 1);
        add("theta_G", n);
        add("theta_H", n);
        return out;
    }
};

/// Regressor blocks when OCV[0] and x[0] are known:
/// y = v - ocv0 - C A0^k x0 and phi_i = v_F - ocv0 1_F.
struct SegmentIBlocks {
    Matrix phi_b;
    Vector phi_c;
    Matrix phi_i;
    Vector phi_f;
    Matrix phi_h;
    Vector y;
    double ts = 1.0;
    Matrix a0;

    Eigen::Index order() const noexcept { return a0.rows(); }
    Eigen::Index rows() const noexcept { return y.size(); }
};

namespace detail {

inline Matrix free_response_rows(const Matrix& a0, std::size_t rows) {
    const Eigen::Index n = a0.rows();
    Matrix out(static_cast<Eigen::Index>(rows), n);
    if (rows == 0) {
        return out;
    }
    out.setZero();
    out(0, 0) = 1.0;
    // Rows of a stable A0 decay geometrically; stop once they are far below
    // double resolution so later arithmetic never touches subnormals.
    constexpr double negligible = 1e-200;
    for (Eigen::Index k = 1; k < static_cast<Eigen::Index>(rows); ++k) {
        double peak = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            double acc = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += out(k - 1, i) * a0(i, j);
            }
            out(k, j) = acc;
            peak = std::max(peak, std::abs(acc));
        }
        if (peak < negligible) {
            out.row(k).setZero();
            break;
        }
    }
    return out;
}

}  // namespace detail

inline Segment1Blocks build_regressors_segment1(std::span<const double> current, std::span<const double> voltage,
                                                double ts, const ObserverMatrix& obs) {
    require(current.size() == voltage.size(), "current and voltage lengths differ");
    const auto rows = static_cast<Eigen::Index>(current.size());
    const auto q = cumulative_charge(current, ts);
    const std::vector<double> ones(current.size(), 1.0);

    Segment1Blocks b;
    b.ts = ts;
    b.a0 = obs.a0;
    b.phi_a = detail::free_response_rows(obs.a0, current.size());
    b.phi_b = observer_filter(obs, current);
    b.phi_c = -to_vector(current);
    b.phi_d = observer_filter(obs, voltage);
    b.phi_e = Vector::Ones(rows);
    b.phi_f = -to_vector(q);
    b.phi_g = -observer_filter(obs, ones);
    b.phi_h = observer_filter(obs, q);
    b.y = to_vector(voltage);
    return b;
}

inline SegmentIBlocks build_regressors_segment_i(std::span<const double> current, std::span<const double> voltage,
                                                 double ts, const ObserverMatrix& obs, double ocv0,
                                                 const Vector& x0) {
    require(current.size() == voltage.size(), "current and voltage lengths differ");
    require(x0.size() == obs.order(), "initial state length must match the observer order");
    const auto q = cumulative_charge(current, ts);
    const std::vector<double> ones(current.size(), 1.0);

    SegmentIBlocks b;
    b.ts = ts;
    b.a0 = obs.a0;
    b.phi_b = observer_filter(obs, current);
    b.phi_c = -to_vector(current);
    b.phi_i = observer_filter(obs, voltage) - ocv0 * observer_filter(obs, ones);
    b.phi_f = -to_vector(q);
    b.phi_h = observer_filter(obs, q);
    b.y = to_vector(voltage).array() - ocv0;
    b.y -= detail::free_response_rows(obs.a0, current.size()) * x0;
    return b;
}

/// Ordinary least squares over all eight blocks, including theta_G and
/// theta_H as free parameters.
inline LeastSquaresResult unconstrained_ls(const Segment1Blocks& blocks, double rank_tol = 1e-10) {
    const auto names = blocks.names();
    return solve_least_squares(blocks.stacked(), blocks.y, rank_tol, names);
}

/// Constrained problem for segment 1, Theta = [A, B, C, D, E, F].
/// Psi(Theta) Theta reproduces the full regression under
/// theta_G = theta_D theta_E and theta_H = theta_D theta_F.
class Segment1Problem {
public:
    explicit Segment1Problem(const Segment1Blocks& blocks) : b_(blocks), n_(blocks.order()) {}

    Eigen::Index size() const noexcept { return 3 * n_ + 3; }
    const Vector& y() const noexcept { return b_.y; }

    Matrix psi(const Vector& theta) const {
        Matrix out(b_.rows(), size());
        out << b_.phi_a, b_.phi_b, b_.phi_c, coupled(theta), b_.phi_e, b_.phi_f;
        return out;
    }

    Matrix jacobian(const Vector& theta) const {
        const Vector d = theta.segment(2 * n_ + 1, n_);
        Matrix out(b_.rows(), size());
        out << b_.phi_a, b_.phi_b, b_.phi_c, coupled(theta), b_.phi_e + b_.phi_g * d, b_.phi_f + b_.phi_h * d;
        return out;
    }

private:
    Matrix coupled(const Vector& theta) const {
        const double e = theta(3 * n_ + 1);
        const double f = theta(3 * n_ + 2);
        return b_.phi_d + b_.phi_g * e + b_.phi_h * f;
    }

    const Segment1Blocks& b_;
    Eigen::Index n_;
};

/// Constrained problem for segment i, Theta = [B, C, D, F].
class SegmentIProblem {
public:
    explicit SegmentIProblem(const SegmentIBlocks& blocks) : b_(blocks), n_(blocks.order()) {}

    Eigen::Index size() const noexcept { return 2 * n_ + 2; }
    const Vector& y() const noexcept { return b_.y; }

    Matrix psi(const Vector& theta) const {
        Matrix out(b_.rows(), size());
        out << b_.phi_b, b_.phi_c, b_.phi_i + b_.phi_h * theta(2 * n_ + 1), b_.phi_f;
        return out;
    }

    Matrix jacobian(const Vector& theta) const {
        const Vector d = theta.segment(n_ + 1, n_);
        Matrix out(b_.rows(), size());
        out << b_.phi_b, b_.phi_c, b_.phi_i + b_.phi_h * theta(2 * n_ + 1), b_.phi_f + b_.phi_h * d;
        return out;
    }

private:
    const SegmentIBlocks& b_;
    Eigen::Index n_;
};

struct JacobiOptions {
    double tol = 1e-10;
    int max_iter = 200;
};

struct JacobiResult {
    Vector theta;                     // best-cost iterate
    double cost = 0.0;                // V = 0.5 |Y - Psi Theta|^2 at theta
    std::vector<double> cost_history; // V at Theta^(0), Theta^(1), ...
    int iterations = 0;
    bool converged = false;
    bool monotone = true;             // V(j) <= V(j-1) + 1e-12 throughout
};

template <class Problem>
double constrained_cost(const Problem& problem, const Vector& theta) {
    return 0.5 * (problem.y() - problem.psi(theta) * theta).squaredNorm();
}

/// Theta(j) = [J^T Psi]^{-1} J^T Y with Psi and J evaluated at Theta(j-1),
/// applied as an increment on the residual. Columns are scaled by the norms of
/// Psi before the small square solve.
template <class Problem>
JacobiResult jacobi_constrained(const Problem& problem, const Vector& theta_init, const JacobiOptions& options = {}) {
    require(theta_init.size() == problem.size(), "initial parameter vector has the wrong length");
    JacobiResult out;
    Vector theta = theta_init;
    double cost = constrained_cost(problem, theta);
    out.cost_history.push_back(cost);
    out.theta = theta;
    out.cost = cost;

    for (int it = 1; it <= options.max_iter; ++it) {
        const Matrix psi = problem.psi(theta);
        const Matrix jac = problem.jacobian(theta);
        const Vector r = problem.y() - psi * theta;

        Vector scale(psi.cols());
        for (Eigen::Index j = 0; j < psi.cols(); ++j) {
            const double nrm = psi.col(j).norm();
            scale(j) = nrm > 0.0 ? 1.0 / nrm : 1.0;
        }
        const Matrix m = scale.asDiagonal() * (jac.transpose() * psi) * scale.asDiagonal();
        const Vector rhs = scale.asDiagonal() * (jac.transpose() * r);
        Eigen::FullPivLU<Matrix> lu(m);
        lu.setThreshold(1e-13);
        if (!lu.isInvertible()) {
            throw Error("singular Jacobi iteration matrix");
        }
        const Vector delta = scale.asDiagonal() * lu.solve(rhs);

        const Vector next = theta + delta;
        const double next_cost = constrained_cost(problem, next);
        out.cost_history.push_back(next_cost);
        if (next_cost > cost + 1e-12) {
            out.monotone = false;
        }
        if (next_cost < out.cost) {
            out.cost = next_cost;
            out.theta = next;
        }
        out.iterations = it;
        const double step = delta.norm() / std::max(theta.norm(), std::numeric_limits<double>::min());
        theta = next;
        cost = next_cost;
        if (step < options.tol) {
            out.converged = true;
            break;
        }
    }
    return out;
}

/// Initial Theta for segment 1 from a least-squares fit on the identifiable
/// blocks [A, B, C, D, E, F]. With M = (I - A0)^{-1}, the dropped blocks obey
///   -1_F[k]^T = -C M + C A0^k M  and  q_F[k]^T = q[k] C M - ts i_F[k]^T M,
/// so the restricted model is the reduced fit under the exact change of
/// variables applied below.
inline Vector reduced_init(const Segment1Blocks& blocks, double rank_tol = 1e-10) {
    const Eigen::Index n = blocks.order();
    Matrix phi(blocks.rows(), 3 * n + 3);
    phi << blocks.phi_a, blocks.phi_b, blocks.phi_c, blocks.phi_d, blocks.phi_e, blocks.phi_f;
    auto names = blocks.names();
    names.resize(static_cast<std::size_t>(3 * n + 3));
    const Vector t = solve_least_squares(phi, blocks.y, rank_tol, names).theta;

    const Matrix m = (Matrix::Identity(n, n) - blocks.a0).inverse();
    const Vector d = t.segment(2 * n + 1, n);
    const double denom = 1.0 - m.row(0).dot(d);
    if (std::abs(denom) < 1e-12) {
        throw Error("observer reparametrization is singular for this A0");
    }
    Vector theta = t;
    const double e = t(3 * n + 1) / denom;
    const double f = t(3 * n + 2) / denom;
    theta(3 * n + 1) = e;
    theta(3 * n + 2) = f;
    theta.segment(0, n) = t.segment(0, n) - m * d * e;
    theta.segment(n, n) = t.segment(n, n) + blocks.ts * m * d * f;
    return theta;
}

/// Segment-i analogue on the blocks [B, C, I, F].
inline Vector reduced_init(const SegmentIBlocks& blocks, double rank_tol = 1e-10) {
    const Eigen::Index n = blocks.order();
    Matrix phi(blocks.rows(), 2 * n + 2);
    phi << blocks.phi_b, blocks.phi_c, blocks.phi_i, blocks.phi_f;
    std::vector<std::string> names;
    for (Eigen::Index j = 0; j < n; ++j) {
        names.push_back("theta_B[" + std::to_string(j) + "]");
    }
    names.push_back("theta_C");
    for (Eigen::Index j = 0; j < n; ++j) {
        names.push_back("theta_D[" + std::to_string(j) + "]");
    }
    names.push_back("theta_F");
    const Vector t = solve_least_squares(phi, blocks.y, rank_tol, names).theta;

    const Matrix m = (Matrix::Identity(n, n) - blocks.a0).inverse();
    const Vector d = t.segment(n + 1, n);
    const double denom = 1.0 - m.row(0).dot(d);
    if (std::abs(denom) < 1e-12) {
        throw Error("observer reparametrization is singular for this A0");
    }
    Vector theta = t;
    const double f = t(2 * n + 1) / denom;
    theta(2 * n + 1) = f;
    theta.segment(0, n) = t.segment(0, n) + blocks.ts * m * d * f;
    return theta;
}

struct TheveninSegmentFit {
    TheveninParams params;
    JacobiResult jacobi;
    double cost = 0.0;
    double residual_rms = 0.0;
};

inline TheveninSegmentFit estimate_segment1(std::span<const double> current, std::span<const double> voltage,
                                            double ts, const ObserverMatrix& obs, const JacobiOptions& options = {}) {
    require(current.size() >= static_cast<std::size_t>(5 * obs.order() + 3),
            "segment 1 needs at least 5*order + 3 samples");
    const auto blocks = build_regressors_segment1(current, voltage, ts, obs);
    const Segment1Problem problem(blocks);
    TheveninSegmentFit fit;
    fit.jacobi = jacobi_constrained(problem, reduced_init(blocks), options);
    const Eigen::Index n = obs.order();
    const Vector& t = fit.jacobi.theta;
    fit.params.a0 = obs.a0;
    fit.params.x0 = t.segment(0, n);
    fit.params.b_a = t.segment(n, n);
    fit.params.r0 = t(2 * n);
    fit.params.l_gain = t.segment(2 * n + 1, n);
    fit.params.ocv0 = t(3 * n + 1);
    fit.params.inv_c0 = t(3 * n + 2);
    fit.cost = fit.jacobi.cost;
    fit.residual_rms = std::sqrt(2.0 * fit.cost / static_cast<double>(current.size()));
    return fit;
}

inline TheveninSegmentFit estimate_segment_i(std::span<const double> current, std::span<const double> voltage,
                                             double ts, const ObserverMatrix& obs, double ocv0, const Vector& x0,
                                             const JacobiOptions& options = {}) {
    require(current.size() >= static_cast<std::size_t>(2 * obs.order() + 2),
            "segment needs at least 2*order + 2 samples");
    const auto blocks = build_regressors_segment_i(current, voltage, ts, obs, ocv0, x0);
    const SegmentIProblem problem(blocks);
    TheveninSegmentFit fit;
    fit.jacobi = jacobi_constrained(problem, reduced_init(blocks), options);
    const Eigen::Index n = obs.order();
    const Vector& t = fit.jacobi.theta;
    fit.params.a0 = obs.a0;
    fit.params.x0 = x0;
    fit.params.b_a = t.segment(0, n);
    fit.params.r0 = t(n);
    fit.params.l_gain = t.segment(n + 1, n);
    fit.params.ocv0 = ocv0;
    fit.params.inv_c0 = t(2 * n + 1);
    fit.cost = fit.jacobi.cost;
    fit.residual_rms = std::sqrt(2.0 * fit.cost / static_cast<double>(current.size()));
    return fit;
}

/// Observer eigenvalue candidates, one list of `order` eigenvalues each.
struct ObserverGrid {
    std::size_t order = 1;
    std::vector<std::vector<Complex>> candidates;

    /// Order 1: 0.01..0.99 step 0.01. Order 2: distinct unordered pairs of
    /// that real grid, then conjugate pairs r e^{+-j phi} with r = 0.1..0.95
    /// step 0.05 and phi = k pi/36 in (0, pi/2).
    static ObserverGrid defaults(std::size_t order) {
        require(order == 1 || order == 2, "default observer grids exist for orders 1 and 2");
        ObserverGrid g;
        g.order = order;
        std::vector<double> reals;
        for (int k = 1; k <= 99; ++k) {
            reals.push_back(0.01 * k);
        }
        if (order == 1) {
            for (double r : reals) {
                g.candidates.push_back({Complex(r, 0.0)});
            }
            return g;
        }
        for (std::size_t a = 0; a < reals.size(); ++a) {
            for (std::size_t b = a + 1; b < reals.size(); ++b) {
                g.candidates.push_back({Complex(reals[a], 0.0), Complex(reals[b], 0.0)});
            }
        }
        for (int ri = 2; ri <= 19; ++ri) {
            const double r = 0.05 * ri;
            for (int k = 1; k < 18; ++k) {
                const Complex l = std::polar(r, k * std::numbers::pi / 36.0);
                g.candidates.push_back({l, std::conj(l)});
            }
        }
        return g;
    }

    static ObserverGrid single(std::vector<Complex> eigenvalues) {
        ObserverGrid g;
        g.order = eigenvalues.size();
        g.candidates.push_back(std::move(eigenvalues));
        return g;
    }
};

/// Grid file: header `re,im`, one eigenvalue per row. For order 1 every row
/// must be real. For order 2 real rows combine into distinct unordered pairs
/// and a row with im > 0 contributes the conjugate pair.
inline ObserverGrid read_grid(std::istream& is, std::size_t order) {
    require(order == 1 || order == 2, "grid files are defined for orders 1 and 2");
    std::string line;
    if (!std::getline(is, line) || detail::trim(line) != "re,im") {
        throw ParseError(1, "expected header 're,im'");
    }
    std::vector<double> reals;
    std::vector<Complex> complex;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto fields = detail::split_csv(line);
        if (fields.size() != 2) {
            throw ParseError(line_no, "expected 2 columns, found " + std::to_string(fields.size()));
        }
        const auto re = detail::parse_double(fields[0]);
        const auto im = detail::parse_double(fields[1]);
        if (!re || !im || !std::isfinite(*re) || !std::isfinite(*im)) {
            throw ParseError(line_no, "malformed eigenvalue");
        }
        if (!(*re > 0.0) || std::abs(Complex(*re, *im)) >= 1.0) {
            throw ParseError(line_no, "eigenvalue must have positive real part and lie inside the unit disk");
        }
        if (*im == 0.0) {
            reals.push_back(*re);
        } else if (order == 1) {
            throw ParseError(line_no, "order-1 grids take real eigenvalues only");
        } else if (*im > 0.0) {
            complex.emplace_back(*re, *im);
        } else {
            throw ParseError(line_no, "list complex eigenvalues by their positive-imaginary member");
        }
    }
    ObserverGrid g;
    g.order = order;
    if (order == 1) {
        for (double r : reals) {
            g.candidates.push_back({Complex(r, 0.0)});
        }
    } else {
        for (std::size_t a = 0; a < reals.size(); ++a) {
            for (std::size_t b = a + 1; b < reals.size(); ++b) {
                g.candidates.push_back({Complex(reals[a], 0.0), Complex(reals[b], 0.0)});
            }
        }
        for (const auto& l : complex) {
            g.candidates.push_back({l, std::conj(l)});
        }
    }
    return g;
}

inline ObserverGrid read_grid(const std::string& path, std::size_t order) {
    std::ifstream is(path);
    if (!is) {
        throw Error("cannot open " + path);
    }
    return read_grid(is, order);
}

struct ObserverSearchResult {
    ObserverMatrix observer;
    TheveninSegmentFit fit;
    std::size_t candidate = 0;   // index into the grid
    std::size_t evaluated = 0;   // candidates that produced an estimate
};

namespace detail {

/// 0.5 |r|^2 of the least-squares fit of the last column on the others, read
/// off the triangular factor of [Phi | y]. Infinite when Phi is numerically
/// rank-deficient.
inline double least_squares_cost(Matrix& augmented, double rank_tol = 1e-10) {
    const Eigen::Index p = augmented.cols() - 1;
    for (Eigen::Index j = 0; j < p; ++j) {
        const double nrm = augmented.col(j).norm();
        if (!(nrm > 0.0)) {
            return std::numeric_limits<double>::infinity();
        }
        augmented.col(j) /= nrm;
    }
    Eigen::HouseholderQR<Eigen::Ref<Matrix>> qr(augmented);
    const auto& r = qr.matrixQR();
    double max_diag = 0.0;
    for (Eigen::Index j = 0; j < p; ++j) {
        max_diag = std::max(max_diag, std::abs(r(j, j)));
    }
    for (Eigen::Index j = 0; j < p; ++j) {
        if (std::abs(r(j, j)) <= rank_tol * max_diag) {
            return std::numeric_limits<double>::infinity();
        }
    }
    return 0.5 * r(p, p) * r(p, p);
}

/// Cost of the restricted fit for one observer. The restricted model is an
/// exact reparametrization of the fit on the identifiable blocks, so its
/// minimum cost is that fit's residual.
class Segment1Ranker {
public:
    Segment1Ranker(std::span<const double> current, std::span<const double> voltage, double ts)
        : current_(current), voltage_(voltage), q_(cumulative_charge(current, ts)) {}

    double operator()(const ObserverMatrix& obs) const {
        const Eigen::Index n = obs.order();
        const auto rows = static_cast<Eigen::Index>(current_.size());
        Matrix m(rows, 3 * n + 4);
        m.leftCols(n) = free_response_rows(obs.a0, current_.size());
        m.middleCols(n, n) = observer_filter(obs, current_);
        m.col(2 * n) = -to_vector(current_);
        m.middleCols(2 * n + 1, n) = observer_filter(obs, voltage_);
        m.col(3 * n + 1).setOnes();
        m.col(3 * n + 2) = -to_vector(q_);
        m.col(3 * n + 3) = to_vector(voltage_);
        return least_squares_cost(m);
    }

private:
    std::span<const double> current_;
    std::span<const double> voltage_;
    std::vector<double> q_;
};

class SegmentIRanker {
public:
    SegmentIRanker(std::span<const double> current, std::span<const double> voltage, double ts, double ocv0,
                   const Vector& x0)
        : current_(current), voltage_(voltage), q_(cumulative_charge(current, ts)), ocv0_(ocv0), x0_(x0),
          ones_(current.size(), 1.0) {}

    double operator()(const ObserverMatrix& obs) const {
        const Eigen::Index n = obs.order();
        const auto rows = static_cast<Eigen::Index>(current_.size());
        Matrix m(rows, 2 * n + 3);
        m.leftCols(n) = observer_filter(obs, current_);
        m.col(n) = -to_vector(current_);
        m.middleCols(n + 1, n) = observer_filter(obs, voltage_) - ocv0_ * observer_filter(obs, ones_);
        m.col(2 * n + 1) = -to_vector(q_);
        m.col(2 * n + 2) = to_vector(voltage_).array() - ocv0_;
        m.col(2 * n + 2) -= free_response_rows(obs.a0, current_.size()) * x0_;
        return least_squares_cost(m);
    }

private:
    std::span<const double> current_;
    std::span<const double> voltage_;
    std::vector<double> q_;
    double ocv0_;
    Vector x0_;
    std::vector<double> ones_;
};

/// Ranks every candidate by its restricted minimum cost (ties to the earlier
/// candidate), then runs the full estimator on the winner.
template <class Ranker, class Estimator>
ObserverSearchResult search_grid(const ObserverGrid& grid, const Ranker& rank, Estimator&& estimate) {
    if (grid.candidates.empty()) {
        throw Error("observer grid is empty");
    }
    double best_cost = std::numeric_limits<double>::infinity();
    std::optional<std::size_t> best;
    std::size_t evaluated = 0;
    for (std::size_t c = 0; c < grid.candidates.size(); ++c) {
        const double cost = rank(ObserverMatrix::from_eigenvalues(grid.candidates[c]));
        if (!std::isfinite(cost)) {
            continue;
        }
        ++evaluated;
        if (cost < best_cost) {
            best_cost = cost;
            best = c;
        }
    }
    if (!best) {
        throw Error("no observer candidate gives an identifiable regression");
    }
    const auto obs = ObserverMatrix::from_eigenvalues(grid.candidates[*best]);
    return {obs, estimate(obs), *best, evaluated};
}

}  // namespace detail

/// Evaluates the restricted segment-1 fit for every grid observer and returns
/// the one with the lowest cost V; ties go to the earlier candidate.
inline ObserverSearchResult observer_search(std::span<const double> current, std::span<const double> voltage,
                                            double ts, const ObserverGrid& grid, const JacobiOptions& options = {}) {
    const detail::Segment1Ranker rank(current, voltage, ts);
    return detail::search_grid(grid, rank, [&](const ObserverMatrix& obs) {
        return estimate_segment1(current, voltage, ts, obs, options);
    });
}

/// Segment-i search with known boundary OCV and state.
inline ObserverSearchResult observer_search(std::span<const double> current, std::span<const double> voltage,
                                            double ts, const ObserverGrid& grid, double ocv0, const Vector& x0,
                                            const JacobiOptions& options = {}) {
    const detail::SegmentIRanker rank(current, voltage, ts, ocv0, x0);
    return detail::search_grid(grid, rank, [&](const ObserverMatrix& obs) {
        return estimate_segment_i(current, voltage, ts, obs, ocv0, x0, options);
    });
}

struct TheveninIdentification {
    PiecewiseModel<TheveninParams> model;
    std::vector<JacobiResult> reports;
    std::vector<std::vector<Complex>> observers;
};

/// Piecewise MOLI identification; each segment runs its own observer search
/// and later segments start from the simulated terminal OCV and state.
inline TheveninIdentification thevenin_identify(const DischargeRecord& record, std::size_t order,
                                                const SegmentPlan& plan, const ObserverGrid& grid,
                                                const JacobiOptions& options = {}) {
    require(order == 1 || order == 2, "Thevenin identification supports orders 1 and 2");
    require(grid.order == order, "observer grid order differs from the model order");
    plan.validate(5 * order + 3, record.size());
    TheveninIdentification out;
    out.model.plan = plan;
    double ocv = 0.0;
    Vector x = Vector::Zero(static_cast<Eigen::Index>(order));
    for (std::size_t s = 0; s < plan.count(); ++s) {
        const auto i = record.current.values().subspan(plan.offset(s), plan.lengths[s]);
        const auto v = record.voltage.values().subspan(plan.offset(s), plan.lengths[s]);
        auto found = s == 0 ? observer_search(i, v, record.ts(), grid, options)
                            : observer_search(i, v, record.ts(), grid, ocv, x, options);
        const auto sim = thevenin_simulate(found.fit.params, i, record.ts(), found.fit.params.ocv0,
                                           found.fit.params.x0);
        ocv = sim.final_ocv;
        x = sim.final_x;
        out.model.segments.push_back(found.fit.params);
        out.model.residual_rms.push_back(found.fit.residual_rms);
        out.reports.push_back(std::move(found.fit.jacobi));
        out.observers.push_back(found.observer.eigenvalues);
    }
    return out;
}

struct RcPair {
    double r = 0.0;
    double c = 0.0;
    double tau() const { return r * c; }
};

struct RcExtraction {
    std::vector<RcPair> pairs;       // descending time constant
    std::vector<Complex> poles;      // discrete poles of A
    bool valid = true;
    std::string reason;
};

/// Reads C (zI - A)^{-1} B as sum_i -R_i (1 - p_i)/(z - p_i), the ZOH image of
/// sum_i R_i/(1 + R_i C_i s), and returns the (R_i, C_i) pairs.
inline RcExtraction extract_rc(const Matrix& a, const Vector& b, const RowVector& c, double ts) {
    require(ts > 0.0, "sampling period must be positive");
    RcExtraction out;
    Eigen::EigenSolver<Matrix> es(a);
    const Eigen::VectorXcd p = es.eigenvalues();
    const ComplexMatrix v = es.eigenvectors();
    const ComplexMatrix w = v.inverse();
    const Eigen::VectorXcd wb = w * b.cast<Complex>();
    const Eigen::RowVectorXcd cv = c.cast<Complex>() * v;

    for (Eigen::Index i = 0; i < p.size(); ++i) {
        out.poles.push_back(p(i));
        if (std::abs(p(i).imag()) > 1e-12) {
            out.valid = false;
            out.reason = "complex pole";
            continue;
        }
        const double pr = p(i).real();
        if (!(pr > 0.0 && pr < 1.0)) {
            out.valid = false;
            out.reason = "pole outside (0, 1) has no RC interpretation";
            continue;
        }
        const double residue = (cv(i) * wb(i)).real();
        const double r = -residue / (1.0 - pr);
        const double tau = -ts / std::log(pr);
        out.pairs.push_back({r, tau / r});
        if (!(r > 0.0)) {
            out.valid = false;
            out.reason = "non-positive resistance";
        }
    }
    std::sort(out.pairs.begin(), out.pairs.end(), [](const RcPair& l, const RcPair& r) {
        return std::abs(l.tau()) > std::abs(r.tau());
    });
    return out;
}

inline RcExtraction extract_rc(const TheveninParams& p, double ts) {
    return extract_rc(p.a(), p.b(), p.c_row(), ts);
}

/// Observable canonical (A, B) for the RC ladder: C (zI - A)^{-1} B =
/// sum_i -R_i (1 - p_i)/(z - p_i) with p_i = exp(-ts/(R_i C_i)).
inline std::pair<Matrix, Vector> rc_canonical(std::span<const RcPair> pairs, double ts) {
    require(!pairs.empty(), "need at least one RC pair");
    const auto n = static_cast<Eigen::Index>(pairs.size());
    std::vector<double> poles;
    std::vector<double> residues;
    for (const auto& rc : pairs) {
        require(rc.r > 0.0 && rc.c > 0.0, "RC pairs need positive R and C");
        const double p = std::exp(-ts / (rc.r * rc.c));
        poles.push_back(p);
        residues.push_back(-rc.r * (1.0 - p));
    }
    // den[j] multiplies z^(n-j).
    std::vector<double> den{1.0};
    for (double p : poles) {
        std::vector<double> next(den.size() + 1, 0.0);
        for (std::size_t j = 0; j < den.size(); ++j) {
            next[j] += den[j];
            next[j + 1] -= p * den[j];
        }
        den = std::move(next);
    }
    // num[j] multiplies z^(n-1-j).
    std::vector<double> num(static_cast<std::size_t>(n), 0.0);
    for (std::size_t i = 0; i < poles.size(); ++i) {
        std::vector<double> part{residues[i]};
        for (std::size_t j = 0; j < poles.size(); ++j) {
            if (j == i) {
                continue;
            }
            std::vector<double> next(part.size() + 1, 0.0);
            for (std::size_t m = 0; m < part.size(); ++m) {
                next[m] += part[m];
                next[m + 1] -= poles[j] * part[m];
            }
            part = std::move(next);
        }
        for (std::size_t m = 0; m < part.size(); ++m) {
            num[m] += part[m];
        }
    }
    Matrix a = Matrix::Zero(n, n);
    Vector b(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        a(j, 0) = -den[static_cast<std::size_t>(j + 1)];
        if (j + 1 < n) {
            a(j, j + 1) = 1.0;
        }
        b(j) = num[static_cast<std::size_t>(j)];
    }
    return {a, b};
}

}  // namespace cellid
