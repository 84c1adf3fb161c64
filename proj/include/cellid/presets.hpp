#pragma once

#include "cellid/randles.hpp"
#include "cellid/signals.hpp"
#include "cellid/thevenin.hpp"

#include <array>
#include <string_view>
#include <vector>

namespace cellid {

/// Named synthetic generators with desk-scale magnitudes of a 18650-class
/// lithium-ion cell. Time constants are in seconds, resistances in ohm,
/// capacitances in farad.

struct RandlesPreset {
    double ocv0;
    double c0;
    double a_w;
    double rb;

    RandlesParams params(double ts, Eigen::Index order) const {
        return RandlesParams::from_physical(ocv0, c0, a_w, rb, ts, Vector::Zero(order));
    }
};

struct TheveninPreset {
    double ocv0;
    double c0;
    double r0;
    std::vector<RcPair> rc;

    std::size_t order() const { return rc.size(); }

    /// Plant in companion form, started from rest, with A0 = A.
    TheveninParams params(double ts) const {
        const auto [a, b] = rc_canonical(rc, ts);
        return TheveninParams::from_plant(a, a, b, r0, ocv0, 1.0 / c0, Vector::Zero(a.rows()));
    }
};

inline RandlesPreset paper_mrandles() { return {4.166, 4093.8, 0.0047, 0.1205}; }

inline TheveninPreset paper_m1() { return {4.165, 2439.3, 0.1206, {{0.0153, 531.69}}}; }

inline TheveninPreset paper_m2() { return {4.1633, 2368.3, 0.1202, {{0.0183, 211.17}, {0.0063, 5.7168}}}; }

inline constexpr std::array<std::string_view, 3> preset_names{"paper-mrandles", "paper-m1", "paper-m2"};

inline constexpr double pulse_amplitude = 0.75;
inline constexpr double pulse_on_s = 10.0;
inline constexpr double pulse_off_s = 10.0;
inline constexpr double default_ts = 0.008;

/// 0.75 A discharge pulses, 10 s on and 10 s off.
inline SampledSignal discharge_pulses(double duration_s, double ts = default_ts) {
    return pulse_train(pulse_amplitude, pulse_on_s, pulse_off_s, duration_s, ts);
}

}  // namespace cellid
