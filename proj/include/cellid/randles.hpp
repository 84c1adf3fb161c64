#pragma once

#include "cellid/core.hpp"
#include "cellid/signals.hpp"
#include "cellid/warburg.hpp"

#include <array>
#include <string>
#include <vector>

namespace cellid {

/// Simplified Randles model: OCV capacitor C0, series resistance R_b and a
/// Warburg element given by a normalized realization scaled by
/// aw_scaled = sqrt(ts) * A_w.
struct RandlesParams {
    double ocv0 = 0.0;
    Vector xw0_scaled;  // sqrt(ts) * A_w * x_w[0]
    double inv_c0 = 0.0;
    double aw_scaled = 0.0;
    double rb = 0.0;

    double c0() const { return 1.0 / inv_c0; }
    double a_w(double ts) const { return aw_scaled / std::sqrt(ts); }

    /// True when every parameter carries its physical sign.
    bool physical() const { return inv_c0 > 0.0 && aw_scaled > 0.0 && rb >= 0.0; }

    /// Unscaled diffusion state x_w[0].
    Vector diffusion_state() const {
        if (aw_scaled == 0.0) {
            return Vector::Zero(xw0_scaled.size());
        }
        return xw0_scaled / aw_scaled;
    }

    static RandlesParams from_physical(double ocv0, double c0, double a_w, double rb, double ts,
                                       const Vector& xw0) {
        require(c0 != 0.0, "C0 must be non-zero");
        const double s = std::sqrt(ts) * a_w;
        return {ocv0, s * xw0, 1.0 / c0, s, rb};
    }
};

struct RandlesTrajectory {
    std::vector<double> voltage;
    std::vector<double> ocv;
    double final_ocv = 0.0;
    Vector final_xw;
};

/// OCV[k+1] = OCV[k] - ts/C0 i[k], x_w[k+1] = a x_w[k] + b i[k],
/// v[k] = OCV[k] - aw_scaled c x_w[k] - R_b i[k].
inline RandlesTrajectory randles_simulate(const RandlesParams& p, const WarburgRealization& r,
                                          std::span<const double> current, double ts, double ocv_init,
                                          const Vector& xw_init) {
    require(xw_init.size() == r.order(), "diffusion state length must match the realization order");
    RandlesTrajectory out;
    out.voltage.resize(current.size());
    out.ocv.resize(current.size());
    double ocv = ocv_init;
    Vector x = xw_init;
    for (std::size_t k = 0; k < current.size(); ++k) {
        out.ocv[k] = ocv;
        out.voltage[k] = ocv - p.aw_scaled * r.c.dot(x) - p.rb * current[k];
        ocv -= ts * p.inv_c0 * current[k];
        x = r.a * x + r.b * current[k];
    }
    out.final_ocv = ocv;
    out.final_xw = std::move(x);
    return out;
}

/// Piecewise simulation; segment 0 starts from its own ocv0 and diffusion
/// state, later segments inherit the terminal states of their predecessor.
inline RandlesTrajectory randles_simulate(const PiecewiseModel<RandlesParams>& model, const WarburgRealization& r,
                                          const SampledSignal& current) {
    require(!model.segments.empty() && model.segments.size() == model.plan.count(),
            "one parameter set per segment required");
    require(model.plan.total() == current.size(), "segment plan must cover the whole signal");
    RandlesTrajectory out;
    double ocv = model.segments.front().ocv0;
    Vector x = model.segments.front().diffusion_state();
    for (std::size_t s = 0; s < model.plan.count(); ++s) {
        const auto seg = current.values().subspan(model.plan.offset(s), model.plan.lengths[s]);
        auto part = randles_simulate(model.segments[s], r, seg, current.ts(), ocv, x);
        out.voltage.insert(out.voltage.end(), part.voltage.begin(), part.voltage.end());
        out.ocv.insert(out.ocv.end(), part.ocv.begin(), part.ocv.end());
        ocv = part.final_ocv;
        x = std::move(part.final_xw);
    }
    out.final_ocv = ocv;
    out.final_xw = std::move(x);
    return out;
}

/// States of (a, b, I) driven by the current from rest: column k holds x_w0[k].
inline Matrix zero_state_response(const WarburgRealization& r, std::span<const double> current) {
    Matrix x(r.order(), static_cast<Eigen::Index>(current.size()));
    Vector state = Vector::Zero(r.order());
    for (std::size_t k = 0; k < current.size(); ++k) {
        x.col(static_cast<Eigen::Index>(k)) = state;
        state = r.a * state + r.b * current[k];
    }
    return x;
}

struct RandlesFit {
    RandlesParams params;
    Vector theta;
    double residual_rms = 0.0;
};

/// Unknown OCV[0] and diffusion state. Row k of the regressor is
/// [1, -c a^k, -q_d[k], -c x_w0[k], -i[k]] against
/// theta = [OCV0, aw_scaled x_w[0], 1/C0, aw_scaled, R_b].
inline RandlesFit randles_identify_segment1(std::span<const double> current, std::span<const double> voltage,
                                            double ts, const WarburgRealization& r) {
    require(current.size() == voltage.size(), "current and voltage lengths differ");
    const Eigen::Index n = r.order();
    require(current.size() >= static_cast<std::size_t>(n + 4), "segment 1 needs at least order + 4 samples");
    const auto rows = static_cast<Eigen::Index>(current.size());
    const auto q = cumulative_charge(current, ts);
    const Matrix x0 = zero_state_response(r, current);

    Matrix phi(rows, n + 4);
    RowVector free = r.c;
    for (Eigen::Index k = 0; k < rows; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        phi(k, 0) = 1.0;
        phi.block(k, 1, 1, n) = -free;
        phi(k, n + 1) = -q[ku];
        phi(k, n + 2) = -r.c.dot(x0.col(k));
        phi(k, n + 3) = -current[ku];
        free = free * r.a;
    }
    std::vector<std::string> names{"OCV0"};
    for (Eigen::Index j = 0; j < n; ++j) {
        names.push_back("xw0[" + std::to_string(j) + "]");
    }
    names.insert(names.end(), {"1/C0", "Aw*sqrt(ts)", "Rb"});

    const auto ls = solve_least_squares(phi, to_vector(voltage), 1e-10, names);
    RandlesFit fit;
    fit.theta = ls.theta;
    fit.residual_rms = ls.residual_rms;
    fit.params = {ls.theta(0), ls.theta.segment(1, n), ls.theta(n + 1), ls.theta(n + 2), ls.theta(n + 3)};
    return fit;
}

/// Known boundary OCV and diffusion state. Row k is
/// [-q_d[k], -c (a^k x_w[0] + x_w0[k]), -i[k]] against [1/C0, aw_scaled, R_b],
/// with y[k] = v[k] - ocv_boundary.
inline RandlesFit randles_identify_segment_i(std::span<const double> current, std::span<const double> voltage,
                                             double ts, const WarburgRealization& r, double ocv_boundary,
                                             const Vector& xw_boundary) {
    require(current.size() == voltage.size(), "current and voltage lengths differ");
    require(current.size() >= 3, "segment needs at least 3 samples");
    require(xw_boundary.size() == r.order(), "diffusion state length must match the realization order");
    const auto rows = static_cast<Eigen::Index>(current.size());
    const auto q = cumulative_charge(current, ts);

    Matrix phi(rows, 3);
    Vector y(rows);
    Vector x = xw_boundary;  // a^k x_w[0] + x_w0[k] is the full state trajectory
    for (Eigen::Index k = 0; k < rows; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        phi(k, 0) = -q[ku];
        phi(k, 1) = -r.c.dot(x);
        phi(k, 2) = -current[ku];
        y(k) = voltage[ku] - ocv_boundary;
        x = r.a * x + r.b * current[ku];
    }
    static const std::array<std::string, 3> names{"1/C0", "Aw*sqrt(ts)", "Rb"};
    const auto ls = solve_least_squares(phi, y, 1e-10, names);
    RandlesFit fit;
    fit.theta = ls.theta;
    fit.residual_rms = ls.residual_rms;
    fit.params = {ocv_boundary, ls.theta(1) * xw_boundary, ls.theta(0), ls.theta(1), ls.theta(2)};
    return fit;
}

/// Segment-by-segment identification with OCV and diffusion state chained by
/// simulating each identified segment forward.
inline PiecewiseModel<RandlesParams> randles_identify(const DischargeRecord& record, const SegmentPlan& plan,
                                                      const WarburgRealization& r) {
    plan.validate(static_cast<std::size_t>(r.order()) + 4, record.size());
    PiecewiseModel<RandlesParams> model;
    model.plan = plan;
    double ocv = 0.0;
    Vector x = Vector::Zero(r.order());
    for (std::size_t s = 0; s < plan.count(); ++s) {
        const auto i = record.current.values().subspan(plan.offset(s), plan.lengths[s]);
        const auto v = record.voltage.values().subspan(plan.offset(s), plan.lengths[s]);
        const auto fit = s == 0 ? randles_identify_segment1(i, v, record.ts(), r)
                                : randles_identify_segment_i(i, v, record.ts(), r, ocv, x);
        model.segments.push_back(fit.params);
        model.residual_rms.push_back(fit.residual_rms);
        const auto sim = randles_simulate(fit.params, r, i, record.ts(), fit.params.ocv0,
                                          s == 0 ? fit.params.diffusion_state() : x);
        ocv = sim.final_ocv;
        x = sim.final_xw;
    }
    return model;
}

}  // namespace cellid
