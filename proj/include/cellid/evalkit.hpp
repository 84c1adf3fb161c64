#pragma once

#include "cellid/core.hpp"
#include "cellid/randles.hpp"
#include "cellid/signals.hpp"
#include "cellid/sre.hpp"
#include "cellid/thevenin.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace cellid {

/// Sample range [begin, end), zero-based. Text form is one-based inclusive,
/// so the first 50000 samples read "1:50000".
struct Window {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const noexcept { return end - begin; }
    std::string label() const { return std::to_string(begin + 1) + ":" + std::to_string(end); }
    bool operator==(const Window&) const = default;
};

inline Window parse_window(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) {
        throw Error("window '" + std::string(text) + "' is not of the form first:last");
    }
    const auto first = detail::parse_double(detail::trim(text.substr(0, colon)));
    const auto last = detail::parse_double(detail::trim(text.substr(colon + 1)));
    const auto whole = [](const std::optional<double>& x) { return x && *x >= 1.0 && *x == std::floor(*x); };
    if (!whole(first) || !whole(last)) {
        throw Error("window '" + std::string(text) + "' needs positive integer sample numbers (first sample is 1)");
    }
    if (*last < *first) {
        throw Error("window '" + std::string(text) + "' ends before it starts");
    }
    return {static_cast<std::size_t>(*first) - 1, static_cast<std::size_t>(*last)};
}

inline std::vector<Window> parse_windows(std::string_view text) {
    std::vector<Window> out;
    for (auto part : detail::split_csv(text)) {
        out.push_back(parse_window(part));
    }
    return out;
}

/// `count` back-to-back windows of `length` samples starting at sample 1.
inline std::vector<Window> consecutive_windows(std::size_t count, std::size_t length) {
    std::vector<Window> out;
    for (std::size_t w = 0; w < count; ++w) {
        out.push_back({w * length, (w + 1) * length});
    }
    return out;
}

/// Best fit rate in percent: 100 (1 - |ref - sim| / |ref - mean(ref)|) with
/// Euclidean norms over the window. Can be negative.
inline double bfr(std::span<const double> reference, std::span<const double> simulated, Window window) {
    require(window.begin < window.end, "BFR window is empty");
    require(window.end <= reference.size() && window.end <= simulated.size(),
            "BFR window " + window.label() + " exceeds the signal length");
    const auto ref = reference.subspan(window.begin, window.size());
    const auto sim = simulated.subspan(window.begin, window.size());
    double mean = 0.0;
    for (double x : ref) {
        mean += x;
    }
    mean /= static_cast<double>(ref.size());
    double err = 0.0;
    double dev = 0.0;
    for (std::size_t k = 0; k < ref.size(); ++k) {
        err += (ref[k] - sim[k]) * (ref[k] - sim[k]);
        dev += (ref[k] - mean) * (ref[k] - mean);
    }
    if (!(dev > 0.0)) {
        throw Error("BFR undefined: reference is constant on window " + window.label());
    }
    return 100.0 * (1.0 - std::sqrt(err) / std::sqrt(dev));
}

inline double bfr(const SampledSignal& reference, const SampledSignal& simulated, Window window) {
    return bfr(reference.values(), simulated.values(), window);
}

inline double bfr(const SampledSignal& reference, const SampledSignal& simulated) {
    require(reference.size() == simulated.size(), "reference and simulated lengths differ");
    return bfr(reference, simulated, Window{0, reference.size()});
}

struct WindowBfr {
    Window window;
    double bfr = 0.0;
};

struct BfrReport {
    std::vector<WindowBfr> windows;
    double overall = 0.0;  // over the full common length
};

inline void check_windows(std::span<const Window> windows) {
    for (std::size_t w = 1; w < windows.size(); ++w) {
        require(windows[w].begin >= windows[w - 1].end,
                "windows " + windows[w - 1].label() + " and " + windows[w].label() + " overlap or are out of order");
    }
}

inline BfrReport bfr_report(const SampledSignal& reference, const SampledSignal& simulated,
                            std::span<const Window> windows) {
    check_windows(windows);
    BfrReport report;
    for (const auto& w : windows) {
        report.windows.push_back({w, bfr(reference, simulated, w)});
    }
    report.overall = bfr(reference, simulated);
    return report;
}

inline void write_bfr_report(const BfrReport& report, std::ostream& os) {
    os << "window,first,last,bfr\n" << std::setprecision(17);
    for (const auto& w : report.windows) {
        os << w.window.label() << ',' << w.window.begin + 1 << ',' << w.window.end << ',' << w.bfr << '\n';
    }
    os << "overall,,," << report.overall << '\n';
}

// Piecewise simulation with OCV and internal states carried across segment
// boundaries.

inline SampledSignal piecewise_simulate(const PiecewiseModel<SreParams>& model, const SampledSignal& current) {
    return {sre_simulate(model, current).voltage, current.ts()};
}

inline SampledSignal piecewise_simulate(const PiecewiseModel<RandlesParams>& model, const WarburgRealization& r,
                                        const SampledSignal& current) {
    return {randles_simulate(model, r, current).voltage, current.ts()};
}

inline SampledSignal piecewise_simulate(const PiecewiseModel<TheveninParams>& model, const SampledSignal& current) {
    return {thevenin_simulate(model, current).voltage, current.ts()};
}

struct ParameterRow {
    std::size_t segment = 1;  // one-based
    std::string name;
    double value = 0.0;
};

using ParameterTable = std::vector<ParameterRow>;

inline ParameterTable parameter_table(const PiecewiseModel<SreParams>& model) {
    ParameterTable out;
    for (std::size_t s = 0; s < model.segments.size(); ++s) {
        const auto& p = model.segments[s];
        out.push_back({s + 1, "OCV0", p.ocv0});
        out.push_back({s + 1, "1/C0", 1.0 / p.c0});
        out.push_back({s + 1, "R0", p.r0});
        out.push_back({s + 1, "C0", p.c0});
    }
    return out;
}

/// Estimator coordinates first, then the physical C0 and A_w derived from them.
inline ParameterTable parameter_table(const PiecewiseModel<RandlesParams>& model, double ts) {
    ParameterTable out;
    for (std::size_t s = 0; s < model.segments.size(); ++s) {
        const auto& p = model.segments[s];
        out.push_back({s + 1, "OCV0", p.ocv0});
        out.push_back({s + 1, "1/C0", p.inv_c0});
        out.push_back({s + 1, "Aw*sqrt(ts)", p.aw_scaled});
        out.push_back({s + 1, "Rb", p.rb});
        out.push_back({s + 1, "C0", p.c0()});
        out.push_back({s + 1, "Aw", p.a_w(ts)});
    }
    return out;
}

/// RC values come from the identified (A, B); they are NaN when the model
/// has no RC-ladder interpretation.
inline ParameterTable parameter_table(const PiecewiseModel<TheveninParams>& model, double ts) {
    ParameterTable out;
    for (std::size_t s = 0; s < model.segments.size(); ++s) {
        const auto& p = model.segments[s];
        out.push_back({s + 1, "OCV0", p.ocv0});
        out.push_back({s + 1, "1/C0", p.inv_c0});
        out.push_back({s + 1, "R0", p.r0});
        out.push_back({s + 1, "C0", p.c0()});
        const auto rc = extract_rc(p, ts);
        for (Eigen::Index j = 0; j < p.order(); ++j) {
            const auto idx = std::to_string(j + 1);
            const bool ok = rc.valid && static_cast<std::size_t>(j) < rc.pairs.size();
            const double nan = std::numeric_limits<double>::quiet_NaN();
            out.push_back({s + 1, "R" + idx, ok ? rc.pairs[static_cast<std::size_t>(j)].r : nan});
            out.push_back({s + 1, "C" + idx, ok ? rc.pairs[static_cast<std::size_t>(j)].c : nan});
        }
    }
    return out;
}

inline void write_parameter_table(const ParameterTable& table, std::ostream& os) {
    os << "segment,parameter,value\n" << std::setprecision(17);
    for (const auto& row : table) {
        os << row.segment << ',' << row.name << ',' << row.value << '\n';
    }
}

inline ParameterTable read_parameter_table(std::istream& is) {
    std::string line;
    std::size_t line_no = 1;
    if (!std::getline(is, line) || detail::trim(line) != "segment,parameter,value") {
        throw ParseError(1, "expected header 'segment,parameter,value'");
    }
    ParameterTable out;
    while (std::getline(is, line)) {
        ++line_no;
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto f = detail::split_csv(line);
        if (f.size() != 3) {
            throw ParseError(line_no, "expected 3 fields");
        }
        const auto seg = detail::parse_double(f[0]);
        const auto value = detail::parse_double(f[2]);
        if (!seg || *seg < 1.0 || !value) {
            throw ParseError(line_no, "bad segment number or value");
        }
        out.push_back({static_cast<std::size_t>(*seg), std::string(detail::trim(f[1])), *value});
    }
    return out;
}

/// Flat name -> value list; names get an "@s" suffix when there is more than
/// one segment.
inline std::vector<std::pair<std::string, double>> flatten(const ParameterTable& table) {
    bool multi = false;
    for (const auto& row : table) {
        multi = multi || row.segment > 1;
    }
    std::vector<std::pair<std::string, double>> out;
    for (const auto& row : table) {
        out.emplace_back(multi ? row.name + "@" + std::to_string(row.segment) : row.name, row.value);
    }
    return out;
}

struct TrialEstimate {
    std::vector<std::pair<std::string, double>> parameters;
    SampledSignal simulated;  // model output on the trial's current
};

using Identifier = std::function<TrialEstimate(const DischargeRecord&)>;

struct MonteCarloConfig {
    std::optional<double> snr_db;  // no value: noise-free
    std::size_t trials = 100;
    std::uint64_t base_seed = 1;
    std::vector<Window> windows;
    std::vector<std::pair<std::string, double>> truth;
};

struct Statistic {
    std::string name;
    double truth = std::numeric_limits<double>::quiet_NaN();
    double mean = 0.0;
    double std_dev = 0.0;
};

struct WindowStatistic {
    Window window;
    double mean = 0.0;
    double std_dev = 0.0;
};

struct MonteCarloReport {
    std::optional<double> snr_db;
    std::size_t trials = 0;
    std::size_t failures = 0;
    std::vector<std::string> failure_messages;
    std::vector<Statistic> parameters;
    std::vector<WindowStatistic> windows;
    WindowStatistic overall;

    const Statistic& parameter(std::string_view name) const {
        for (const auto& p : parameters) {
            if (p.name == name) {
                return p;
            }
        }
        throw Error("no parameter named " + std::string(name) + " in the report");
    }
};

namespace detail {

/// Mean and sample standard deviation, summed in index order.
inline std::pair<double, double> mean_std(const std::vector<double>& x) {
    if (x.empty()) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        return {nan, nan};
    }
    double sum = 0.0;
    for (double v : x) {
        sum += v;
    }
    const double mean = sum / static_cast<double>(x.size());
    if (x.size() < 2) {
        return {mean, 0.0};
    }
    double ss = 0.0;
    for (double v : x) {
        ss += (v - mean) * (v - mean);
    }
    return {mean, std::sqrt(ss / static_cast<double>(x.size() - 1))};
}

}  // namespace detail

/// Trial t adds noise with seed base_seed + t to the clean voltage, identifies
/// on the noisy record and scores the resimulation against the clean voltage.
/// Trials that throw or return non-finite values are counted as failures and
/// left out of the statistics.
inline MonteCarloReport monte_carlo(const DischargeRecord& clean, const Identifier& identify,
                                    const MonteCarloConfig& config) {
    require(config.trials >= 1, "Monte Carlo needs at least one trial");
    check_windows(config.windows);
    for (const auto& w : config.windows) {
        require(w.end <= clean.size(), "window " + w.label() + " exceeds the record length");
    }

    MonteCarloReport report;
    report.snr_db = config.snr_db;
    report.trials = config.trials;
    std::vector<std::string> names;
    std::vector<std::vector<double>> values;
    std::vector<std::vector<double>> window_bfr(config.windows.size());
    std::vector<double> overall;

    for (std::size_t t = 0; t < config.trials; ++t) {
        const DischargeRecord noisy(clean.current, add_noise(clean.voltage, config.snr_db, config.base_seed + t));
        TrialEstimate est;
        std::vector<double> scores;
        double total = 0.0;
        try {
            est = identify(noisy);
            for (const auto& w : config.windows) {
                scores.push_back(bfr(clean.voltage, est.simulated, w));
            }
            total = bfr(clean.voltage, est.simulated);
        } catch (const Error& e) {
            ++report.failures;
            report.failure_messages.push_back("trial " + std::to_string(t) + ": " + e.what());
            continue;
        } catch (const std::logic_error& e) {
            ++report.failures;
            report.failure_messages.push_back("trial " + std::to_string(t) + ": " + e.what());
            continue;
        }
        bool finite = std::isfinite(total);
        for (const auto& [name, v] : est.parameters) {
            finite = finite && std::isfinite(v);
        }
        for (double s : scores) {
            finite = finite && std::isfinite(s);
        }
        if (!finite) {
            ++report.failures;
            report.failure_messages.push_back("trial " + std::to_string(t) + ": non-finite estimate or fit");
            continue;
        }
        if (names.empty()) {
            for (const auto& [name, v] : est.parameters) {
                names.push_back(name);
            }
            values.resize(names.size());
        }
        if (est.parameters.size() != names.size()) {
            throw Error("identifier returned a different parameter list on trial " + std::to_string(t));
        }
        for (std::size_t j = 0; j < names.size(); ++j) {
            values[j].push_back(est.parameters[j].second);
        }
        for (std::size_t w = 0; w < scores.size(); ++w) {
            window_bfr[w].push_back(scores[w]);
        }
        overall.push_back(total);
    }

    for (std::size_t j = 0; j < names.size(); ++j) {
        Statistic s;
        s.name = names[j];
        for (const auto& [tn, tv] : config.truth) {
            if (tn == names[j]) {
                s.truth = tv;
            }
        }
        std::tie(s.mean, s.std_dev) = detail::mean_std(values[j]);
        report.parameters.push_back(std::move(s));
    }
    for (std::size_t w = 0; w < config.windows.size(); ++w) {
        const auto [m, sd] = detail::mean_std(window_bfr[w]);
        report.windows.push_back({config.windows[w], m, sd});
    }
    const auto [m, sd] = detail::mean_std(overall);
    report.overall = {Window{0, clean.size()}, m, sd};
    return report;
}

/// CSV with header kind,name,truth,mean,std. `meta` rows carry the SNR
/// ("inf" when noise-free), trial and failure counts in the mean column.
inline void write_monte_carlo_report(const MonteCarloReport& report, std::ostream& os) {
    os << "kind,name,truth,mean,std\n" << std::setprecision(17);
    os << "meta,snr_db,,";
    if (report.snr_db) {
        os << *report.snr_db;
    } else {
        os << "inf";
    }
    os << ",\n";
    os << "meta,trials,," << report.trials << ",\n";
    os << "meta,failures,," << report.failures << ",\n";
    for (const auto& p : report.parameters) {
        os << "param," << p.name << ',';
        if (std::isfinite(p.truth)) {
            os << p.truth;
        }
        os << ',' << p.mean << ',' << p.std_dev << '\n';
    }
    for (const auto& w : report.windows) {
        os << "bfr," << w.window.label() << ",," << w.mean << ',' << w.std_dev << '\n';
    }
    os << "bfr,overall,," << report.overall.mean << ',' << report.overall.std_dev << '\n';
}

}  // namespace cellid
