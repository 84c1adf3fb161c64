// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include "cellid/evalkit.hpp"
#include "cellid/presets.hpp"
#include "cellid/randles.hpp"
#include "cellid/sre.hpp"
#include "cellid/thevenin.hpp"
#include "cellid/warburg.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

using namespace cellid;

namespace {

constexpr double ts = default_ts;

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void check(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

double rel_err(double est, double truth) { return std::abs(est - truth) / std::abs(truth); }

// 1
void warburg_error(Outcome& o) {
    const Stopwatch clock;
    const auto w = warburg_impulse(1.0, 1.0, 10000);
    const auto r = ho_kalman(w, 7);
    const double e = relative_error(w, realization_impulse(r, 10000));
    const double secs = clock.seconds();
    o.detail << "E_10000 = " << e << " %, " << secs << " s";
    o.check(e <= 0.5, "E_10000 <= 0.45 + 0.05 %");
    o.check(secs < 10.0, "runtime < 10 s");
}

// 2
void warburg_frequency(Outcome& o) {
    const auto& r = reference_realization();
    std::vector<double> omega;
    const int points = 200;
    for (int k = 0; k < points; ++k) {
        const double rel = std::pow(10.0, -3.0 + std::log10(20.0) * k / (points - 1));
        omega.push_back(rel * std::numbers::pi);
    }
    const auto h = freq_response(r, omega);
    double worst_mag = 0.0;
    double worst_phase = 0.0;
    double worst_phase_at = 0.0;
    for (std::size_t k = 0; k < omega.size(); ++k) {
        worst_mag = std::max(worst_mag, std::abs(magnitude_db(h[k]) - magnitude_db(ideal_warburg(omega[k]))));
        const double dp = std::abs(phase_deg(h[k]) + 45.0);
        if (dp > worst_phase) {
            worst_phase = dp;
            worst_phase_at = omega[k] / std::numbers::pi;
        }
    }
    o.detail << "max |dmag| = " << worst_mag << " dB, max |phase + 45| = " << worst_phase << " deg at "
             << worst_phase_at << " w_N";
    o.check(worst_mag <= 0.5, "magnitude within 0.5 dB");
    o.check(worst_phase <= 2.0, "phase within 2 deg");
}

// 3
void continuous_conversion(Outcome& o) {
    double worst = 0.0;
    for (double t : {1.0, ts}) {
        auto r = reference_realization();
        r.ts = t;
        const auto c = to_continuous(r);
        worst = std::max(worst, (Matrix((c.a_bar * t).exp()) - r.a).norm() / r.a.norm());
    }
    const auto printed = read_realization(std::string(CELLID_ASSET_DIR) + "/warburg_order7_printed.csv");
    const auto pc = to_continuous(printed);
    const double back = (Matrix((pc.a_bar * printed.ts).exp()) - printed.a).norm() / printed.a.norm();
    worst = std::max(worst, back);
    // The printed continuous matrix carries a common factor 1e-3 / ts.
    const double a00 = pc.a_bar(0, 0) * printed.ts / 1e-3;
    const double b0 = pc.b_bar(0) * printed.ts;
    o.detail << "exp round trip " << worst << ", a_bar[0,0] = " << a00 << "e-3/ts (printed -0.3835), b_bar[0] = "
             << b0 << "/ts (printed 0.1881)";
    o.check(worst <= 1e-8, "exp(a_bar ts) = a within 1e-8");
    o.check(rel_err(a00, -0.3835) <= 0.01, "a_bar[0,0] within 1%");
    o.check(rel_err(b0, 0.1881) <= 0.01, "b_bar[0] within 1%");
}

struct TheveninTrip {
    std::size_t order;
    SampledSignal current;
    SampledSignal voltage;
    TheveninIdentification id;
};

std::vector<TheveninTrip> thevenin_trips;

// 4
void noise_free_round_trips(Outcome& o) {
    const auto i = discharge_pulses(400.0);
    o.check(i.size() >= 50000, "at least 50000 samples");
    const auto plan = SegmentPlan::single(i.size());

    {
        const Stopwatch clock;
        const auto q = paper_m1();
        const SreParams truth{q.ocv0, q.c0, q.r0};
        const auto v = sre_simulate(truth, i);
        const auto m = sre_identify(DischargeRecord(i, v), plan);
        const auto& p = m.segments[0];
        const double worst = std::max({rel_err(p.ocv0, truth.ocv0), rel_err(p.c0, truth.c0), rel_err(p.r0, truth.r0)});
        const double fit = bfr(v, piecewise_simulate(m, i));
        const double secs = clock.seconds();
        o.detail << "SRE rel " << worst << " BFR " << fit << " (" << secs << " s); ";
        o.check(worst <= 1e-6 && fit >= 99.99 && secs < 60.0, "SRE");
    }
    {
        const Stopwatch clock;
        const auto& r = reference_realization();
        const auto q = paper_mrandles();
        const auto truth = q.params(ts, r.order());
        const SampledSignal v(randles_simulate(truth, r, i.values(), ts, truth.ocv0, Vector::Zero(r.order())).voltage,
                              ts);
        const auto m = randles_identify(DischargeRecord(i, v), plan, r);
        const auto& p = m.segments[0];
        const double worst = std::max({rel_err(p.ocv0, q.ocv0), rel_err(p.c0(), q.c0), rel_err(p.a_w(ts), q.a_w),
                                       rel_err(p.rb, q.rb)});
        const double fit = bfr(v, piecewise_simulate(m, r, i));
        const double secs = clock.seconds();
        o.detail << "Randles(7) rel " << worst << " BFR " << fit << " (" << secs << " s); ";
        o.check(worst <= 1e-6 && fit >= 99.99 && secs < 60.0, "Randles");
    }
    for (const auto& q : {paper_m1(), paper_m2()}) {
        const Stopwatch clock;
        const auto truth = q.params(ts);
        const SampledSignal v(thevenin_simulate(truth, i.values(), ts, truth.ocv0, truth.x0).voltage, ts);
        auto id = thevenin_identify(DischargeRecord(i, v), q.order(), plan, ObserverGrid::defaults(q.order()));
        const auto& p = id.model.segments[0];
        const auto rc = extract_rc(p, ts);
        double worst = std::max({rel_err(p.ocv0, q.ocv0), rel_err(p.c0(), q.c0), rel_err(p.r0, q.r0)});
        if (rc.valid && rc.pairs.size() == q.order()) {
            for (std::size_t j = 0; j < q.order(); ++j) {
                worst = std::max({worst, rel_err(rc.pairs[j].r, q.rc[j].r), rel_err(rc.pairs[j].c, q.rc[j].c)});
            }
        } else {
            worst = INFINITY;
        }
        const double fit = bfr(v, piecewise_simulate(id.model, i));
        const double secs = clock.seconds();
        o.detail << "Thevenin(" << q.order() << ") rel " << worst << " BFR " << fit << " (" << secs << " s); ";
        o.check(worst <= 1e-4 && fit >= 99.99 && secs < 60.0, "Thevenin order " + std::to_string(q.order()));
        thevenin_trips.push_back({q.order(), i, v, std::move(id)});
    }
}

// 5
void monte_carlo_robustness(Outcome& o) {
    const Stopwatch clock;
    const auto& r = reference_realization();
    const auto q = paper_mrandles();
    const auto truth = q.params(ts, r.order());
    const auto i = discharge_pulses(400.0);
    const SampledSignal v(randles_simulate(truth, r, i.values(), ts, truth.ocv0, Vector::Zero(r.order())).voltage, ts);
    const DischargeRecord clean(i, v);
    const auto plan = SegmentPlan::single(i.size());
    const auto identify = [&](const DischargeRecord& rec) {
        const auto m = randles_identify(rec, plan, r);
        return TrialEstimate{flatten(parameter_table(m, ts)), piecewise_simulate(m, r, rec.current)};
    };
    const std::vector<std::string> estimated{"OCV0", "1/C0", "Aw*sqrt(ts)", "Rb"};
    const std::vector<std::pair<std::string, double>> truth_values{
        {"OCV0", truth.ocv0}, {"1/C0", truth.inv_c0}, {"Aw*sqrt(ts)", truth.aw_scaled},
        {"Rb", truth.rb},     {"C0", q.c0},           {"Aw", q.a_w}};

    std::vector<MonteCarloReport> reports;
    for (double snr : {20.0, 10.0, 0.0}) {
        MonteCarloConfig cfg;
        cfg.snr_db = snr;
        cfg.trials = 100;
        cfg.base_seed = 1;
        cfg.truth = truth_values;
        reports.push_back(monte_carlo(clean, identify, cfg));
    }
    for (std::size_t s = 0; s < reports.size(); ++s) {
        const auto& rep = reports[s];
        const double limit = s == 0 ? 0.03 : 0.05;
        o.detail << *rep.snr_db << " dB:";
        for (const auto& name : estimated) {
            const auto& st = rep.parameter(name);
            const double bias = rel_err(st.mean, st.truth);
            o.detail << ' ' << name << " bias " << bias * 100.0 << "% sd " << st.std_dev << ';';
            if (s != 1) {
                o.check(bias <= limit, name + " mean at " + std::to_string(int(*rep.snr_db)) + " dB");
            }
        }
        const auto& c0 = rep.parameter("C0");
        o.detail << " (C0 " << c0.mean << " +- " << c0.std_dev << ", failures " << rep.failures << ") ";
    }
    for (const auto& st : reports[0].parameters) {
        const double s20 = st.std_dev;
        const double s10 = reports[1].parameter(st.name).std_dev;
        const double s0 = reports[2].parameter(st.name).std_dev;
        o.check(s20 < s10 && s10 < s0, "sd of " + st.name + " increasing as SNR falls");
    }
    const double secs = clock.seconds();
    o.detail << secs << " s";
    o.check(secs < 600.0, "runtime < 10 min");
}

// 6
void jacobi_minimizer(Outcome& o) {
    o.check(!thevenin_trips.empty(), "round trips available");
    for (const auto& trip : thevenin_trips) {
        const auto obs = ObserverMatrix::from_eigenvalues(trip.id.observers[0]);
        const auto blocks = build_regressors_segment1(trip.current.values(), trip.voltage.values(), ts, obs);
        const Segment1Problem problem(blocks);
        const auto& report = trip.id.reports[0];
        // Costs below this are rounding noise of the residual itself.
        const double floor = 0.5 * blocks.y.squaredNorm() * 1e-28;
        bool non_increasing = true;
        for (std::size_t j = 1; j < report.cost_history.size(); ++j) {
            non_increasing = non_increasing && report.cost_history[j] <= report.cost_history[j - 1] + floor;
        }
        const double v0 = constrained_cost(problem, report.theta);
        bool strict_min = true;
        for (Eigen::Index j = 0; j < report.theta.size(); ++j) {
            for (double d : {-1e-5, 1e-5}) {
                Vector t = report.theta;
                t(j) += d;
                strict_min = strict_min && constrained_cost(problem, t) > v0;
            }
        }
        o.detail << "order " << trip.order << ": " << report.iterations << " iterations, V " << v0
                 << (non_increasing ? ", non-increasing" : ", increased") << (strict_min ? ", strict min; " : "; ");
        o.check(non_increasing, "V non-increasing, order " + std::to_string(trip.order));
        o.check(strict_min, "strict local minimum, order " + std::to_string(trip.order));
    }
}

// 7
void piecewise_stitching(Outcome& o) {
    const auto& r = reference_realization();
    const auto i = discharge_pulses(1200.0);
    const SegmentPlan plan{{50000, 50000, 50000}};
    auto p1 = paper_mrandles().params(ts, r.order());
    auto p2 = p1;
    auto p3 = p1;
    p2.inv_c0 = 1.0 / 3500.0;
    p3.inv_c0 = 1.0 / 2800.0;
    const PiecewiseModel<RandlesParams> truth{plan, {p1, p2, p3}, {}};
    const SampledSignal v(randles_simulate(truth, r, i).voltage, ts);

    const auto model = randles_identify(DischargeRecord(i, v), plan, r);
    const auto traj = randles_simulate(model, r, i);
    double jump = 0.0;
    for (std::size_t s = 1; s < plan.count(); ++s) {
        const std::size_t k = plan.offset(s);
        const double carried = traj.ocv[k - 1] - ts * model.segments[s - 1].inv_c0 * i[k - 1];
        jump = std::max({jump, std::abs(traj.ocv[k] - carried), std::abs(model.segments[s].ocv0 - carried)});
    }
    const double fit = bfr(v, SampledSignal(traj.voltage, ts));
    o.detail << "C0 = " << model.segments[0].c0() << ", " << model.segments[1].c0() << ", " << model.segments[2].c0()
             << "; max boundary jump " << jump << " V; overall BFR " << fit << " %";
    o.check(jump < 1e-12, "boundary jumps < 1e-12 V");
    o.check(fit >= 99.9, "overall BFR >= 99.9 %");
}

// 8
void bfr_metric(Outcome& o) {
    const SampledSignal ref({1.0, 2.0, 3.0, 6.0}, 1.0);
    const double a = bfr(ref, ref);
    const double b = bfr(ref, SampledSignal::constant(3.0, 4, 1.0));
    const double c = bfr(SampledSignal({0.0, 2.0}, 1.0), SampledSignal({2.0, 0.0}, 1.0));
    o.detail << "examples " << a << ", " << b << ", " << c;
    o.check(a == 100.0 && b == 0.0 && c == -100.0, "metric examples exact");

    const auto i = discharge_pulses(2000.0);
    const SreParams p{4.166, 4093.8, 0.1205};
    const auto v = sre_simulate(p, i);
    const auto sim = sre_simulate({p.ocv0, p.c0 * 0.98, p.r0 * 1.01}, i);
    const auto windows = parse_windows("1:50000,50001:100000,100001:150000,150001:200000,200001:250000");
    const auto report = bfr_report(v, sim, windows);
    bool ok = report.windows.size() == 5 && windows == consecutive_windows(5, 50000);
    for (std::size_t w = 0; w < report.windows.size(); ++w) {
        const auto r = v.slice(w * 50000, 50000);
        const auto s = sim.slice(w * 50000, 50000);
        ok = ok && report.windows[w].bfr == bfr(r, s) && report.windows[w].window.size() == 50000;
    }
    o.detail << "; windows W0..W4 = " << report.windows.front().window.label() << " .. "
             << report.windows.back().window.label();
    o.check(ok, "five 50000-sample windows");
}

}  // namespace

int main() {
    std::cout.precision(6);
    const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
        {"Warburg approximation error", warburg_error},
        {"Warburg frequency match", warburg_frequency},
        {"continuous conversion consistency", continuous_conversion},
        {"noise-free round trips", noise_free_round_trips},
        {"Monte Carlo robustness", monte_carlo_robustness},
        {"Jacobi minimizer correctness", jacobi_minimizer},
        {"piecewise stitching", piecewise_stitching},
        {"BFR metric", bfr_metric},
    };
    int failed = 0;
    for (std::size_t c = 0; c < criteria.size(); ++c) {
        Outcome o;
        o.detail.precision(6);
        try {
            criteria[c].second(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << " [exception: " << e.what() << "]";
        }
        failed += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c + 1 << ": " << criteria[c].first << " | "
                  << o.detail.str() << std::endl;
    }
    std::cout << criteria.size() - static_cast<std::size_t>(failed) << "/" << criteria.size() << " criteria passed"
              << std::endl;
    return failed == 0 ? 0 : 1;
}
