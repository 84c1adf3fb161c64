#pragma once

#include "cellid/core.hpp"
#include "cellid/signals.hpp"

#include <array>
#include <string>
#include <vector>

namespace cellid {

/// Series-resistance model: OCV on a capacitor C0 in series with R0.
/// `ocv0` is the OCV at the first sample of the segment.
struct SreParams {
    double ocv0 = 0.0;
    double c0 = 1.0;
    double r0 = 0.0;

    friend bool operator==(const SreParams&, const SreParams&) = default;
};

struct SreTrajectory {
    std::vector<double> voltage;
    std::vector<double> ocv;
    double final_ocv = 0.0;  // OCV one step past the last sample
};

/// OCV[k+1] = OCV[k] - ts/C0 i[k], v[k] = OCV[k] - R0 i[k], from OCV[0] = ocv_init.
inline SreTrajectory sre_simulate_segment(const SreParams& p, std::span<const double> current, double ts,
                                          double ocv_init) {
    require(p.c0 != 0.0, "C0 must be non-zero");
    SreTrajectory out;
    out.voltage.resize(current.size());
    out.ocv.resize(current.size());
    double ocv = ocv_init;
    for (std::size_t k = 0; k < current.size(); ++k) {
        out.ocv[k] = ocv;
        out.voltage[k] = ocv - p.r0 * current[k];
        ocv -= ts / p.c0 * current[k];
    }
    out.final_ocv = ocv;
    return out;
}

/// Single-segment simulation starting at p.ocv0.
inline SampledSignal sre_simulate(const SreParams& p, const SampledSignal& current) {
    return {sre_simulate_segment(p, current.values(), current.ts(), p.ocv0).voltage, current.ts()};
}

/// Piecewise simulation: segment i runs with its own (C0, R0) and inherits the
/// OCV where segment i-1 ended. Only segments[0].ocv0 seeds the chain.
inline SreTrajectory sre_simulate(const PiecewiseModel<SreParams>& model, const SampledSignal& current) {
    require(model.segments.size() == model.plan.count(), "one parameter set per segment required");
    model.plan.validate(1, current.size());
    require(model.plan.total() == current.size(), "segment plan must cover the whole signal");
    SreTrajectory out;
    double ocv = model.segments.empty() ? 0.0 : model.segments.front().ocv0;
    for (std::size_t s = 0; s < model.plan.count(); ++s) {
        const auto seg = current.values().subspan(model.plan.offset(s), model.plan.lengths[s]);
        auto part = sre_simulate_segment(model.segments[s], seg, current.ts(), ocv);
        out.voltage.insert(out.voltage.end(), part.voltage.begin(), part.voltage.end());
        out.ocv.insert(out.ocv.end(), part.ocv.begin(), part.ocv.end());
        ocv = part.final_ocv;
    }
    out.final_ocv = ocv;
    return out;
}

struct SreFit {
    SreParams params;
    Vector theta;  // [OCV0, 1/C0, R0] for segment 1, [1/C0, R0] otherwise
    double residual_rms = 0.0;
};

/// Segment with unknown initial OCV: y[k] = v[k], phi[k] = [1, -q_d[k], -i[k]].
inline SreFit sre_identify_segment1(std::span<const double> current, std::span<const double> voltage, double ts) {
    require(current.size() == voltage.size(), "current and voltage lengths differ");
    require(current.size() >= 3, "segment 1 needs at least 3 samples");
    const auto n = static_cast<Eigen::Index>(current.size());
    const auto q = cumulative_charge(current, ts);
    Matrix phi(n, 3);
    for (Eigen::Index k = 0; k < n; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        phi(k, 0) = 1.0;
        phi(k, 1) = -q[ku];
        phi(k, 2) = -current[ku];
    }
    static const std::array<std::string, 3> names{"OCV0", "1/C0", "R0"};
    const auto ls = solve_least_squares(phi, to_vector(voltage), 1e-10, names);
    return {{ls.theta(0), 1.0 / ls.theta(1), ls.theta(2)}, ls.theta, ls.residual_rms};
}

/// Segment with known initial OCV: y[k] = v[k] - ocv_boundary, phi[k] = [-q_d[k], -i[k]].
inline SreFit sre_identify_segment_i(std::span<const double> current, std::span<const double> voltage, double ts,
                                     double ocv_boundary) {
    require(current.size() == voltage.size(), "current and voltage lengths differ");
    require(current.size() >= 2, "segment needs at least 2 samples");
    const auto n = static_cast<Eigen::Index>(current.size());
    const auto q = cumulative_charge(current, ts);
    Matrix phi(n, 2);
    Vector y(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        phi(k, 0) = -q[ku];
        phi(k, 1) = -current[ku];
        y(k) = voltage[ku] - ocv_boundary;
    }
    static const std::array<std::string, 2> names{"1/C0", "R0"};
    const auto ls = solve_least_squares(phi, y, 1e-10, names);
    return {{ocv_boundary, 1.0 / ls.theta(0), ls.theta(1)}, ls.theta, ls.residual_rms};
}

/// Segment-by-segment identification; the boundary OCV for segment i is the
/// simulated OCV of the identified segment i-1 one step past its end.
inline PiecewiseModel<SreParams> sre_identify(const DischargeRecord& record, const SegmentPlan& plan) {
    plan.validate(3, record.size());
    PiecewiseModel<SreParams> model;
    model.plan = plan;
    double ocv = 0.0;
    for (std::size_t s = 0; s < plan.count(); ++s) {
        const auto i = record.current.values().subspan(plan.offset(s), plan.lengths[s]);
        const auto v = record.voltage.values().subspan(plan.offset(s), plan.lengths[s]);
        const auto fit = s == 0 ? sre_identify_segment1(i, v, record.ts())
                                : sre_identify_segment_i(i, v, record.ts(), ocv);
        model.segments.push_back(fit.params);
        model.residual_rms.push_back(fit.residual_rms);
        ocv = sre_simulate_segment(fit.params, i, record.ts(), fit.params.ocv0).final_ocv;
    }
    return model;
}

}  // namespace cellid
