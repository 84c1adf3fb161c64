#pragma once

#include "cellid/evalkit.hpp"
#include "cellid/presets.hpp"
#include "cellid/randles.hpp"
#include "cellid/signals.hpp"
#include "cellid/sre.hpp"
#include "cellid/thevenin.hpp"
#include "cellid/warburg.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace cellid::cli {

enum class Model { sre, randles, thevenin1, thevenin2 };

inline std::optional<Model> parse_model(std::string_view name) {
    if (name == "sre") {
        return Model::sre;
    }
    if (name == "randles") {
        return Model::randles;
    }
    if (name == "thevenin1") {
        return Model::thevenin1;
    }
    if (name == "thevenin2") {
        return Model::thevenin2;
    }
    return std::nullopt;
}

inline bool is_thevenin(Model m) { return m == Model::thevenin1 || m == Model::thevenin2; }
inline std::size_t thevenin_order(Model m) { return m == Model::thevenin1 ? 1 : 2; }

/// Everything a subcommand needs. Unset optionals mean "not given".
struct RunConfig {
    std::string subcommand;

    // shared
    std::uint64_t seed = 1;
    std::optional<std::string> out;
    std::optional<double> ts;

    // data generation and identification
    std::optional<std::string> model;
    std::optional<std::string> preset;
    std::optional<double> ocv0;
    std::optional<double> c0;
    std::optional<double> r0;
    double duration = 400.0;
    std::optional<double> snr_db;
    std::optional<std::string> in;
    std::optional<std::string> segments;
    std::optional<std::size_t> segment_length;
    std::optional<std::string> grid;
    std::size_t trials = 100;
    std::optional<std::string> windows;
    std::optional<std::string> ref;
    std::optional<std::string> sim;

    // Warburg approximation
    std::size_t order = 7;
    std::size_t kmax = 10000;
    std::size_t hankel = 0;
    std::optional<std::string> realization;
    double wmin = 1e-3;
    double wmax = 1.0;
    std::size_t points = 200;

    double sample_period() const { return ts.value_or(default_ts); }
};

namespace detail {

inline bool preset_fits(Model m, std::string_view preset) {
    switch (m) {
        case Model::sre:
            return true;
        case Model::randles:
            return preset == "paper-mrandles";
        case Model::thevenin1:
            return preset == "paper-m1";
        case Model::thevenin2:
            return preset == "paper-m2";
    }
    return false;
}

inline std::optional<std::vector<std::size_t>> parse_lengths(std::string_view text) {
    std::vector<std::size_t> out;
    for (auto part : cellid::detail::split_csv(text)) {
        const auto v = cellid::detail::parse_double(part);
        if (!v || *v < 1.0 || *v != std::floor(*v)) {
            return std::nullopt;
        }
        out.push_back(static_cast<std::size_t>(*v));
    }
    return out;
}

inline void check_generator(const RunConfig& c, std::optional<Model> m, std::vector<std::string>& errors) {
    if (!m) {
        return;
    }
    if (c.preset) {
        if (std::find(preset_names.begin(), preset_names.end(), *c.preset) == preset_names.end()) {
            errors.push_back("unknown preset '" + *c.preset + "' (paper-mrandles, paper-m1, paper-m2)");
        } else if (!preset_fits(*m, *c.preset)) {
            errors.push_back("preset '" + *c.preset + "' does not describe model '" + *c.model + "'");
        }
    } else if (*m == Model::sre) {
        for (const auto& [name, value] : {std::pair{"--ocv0", c.ocv0}, {"--c0", c.c0}, {"--r0", c.r0}}) {
            if (!value) {
                errors.push_back("model sre needs " + std::string(name) + " or a --preset");
            }
        }
    }
    if (c.c0 && !(*c.c0 > 0.0)) {
        errors.push_back("--c0 must be positive");
    }
    if (c.r0 && *c.r0 < 0.0) {
        errors.push_back("--r0 must be non-negative");
    }
    if (!(c.duration > 0.0)) {
        errors.push_back("--duration must be positive");
    }
}

inline void check_plan(const RunConfig& c, std::vector<std::string>& errors) {
    if (c.segments && c.segment_length) {
        errors.push_back("--segments and --segment-length are mutually exclusive");
    }
    if (c.segments && !parse_lengths(*c.segments)) {
        errors.push_back("--segments must be a comma-separated list of positive integers");
    }
    if (c.segment_length && *c.segment_length == 0) {
        errors.push_back("--segment-length must be positive");
    }
}

inline void check_windows(const RunConfig& c, std::vector<std::string>& errors) {
    if (!c.windows) {
        return;
    }
    try {
        cellid::check_windows(parse_windows(*c.windows));
    } catch (const std::exception& e) {
        errors.push_back(std::string("--windows: ") + e.what());
    }
}

}  // namespace detail

/// Every violation in the configuration, in a stable order.
inline std::vector<std::string> validate(const RunConfig& c) {
    std::vector<std::string> errors;
    const auto& sub = c.subcommand;
    if (c.ts && !(*c.ts > 0.0)) {
        errors.push_back("--ts must be positive");
    }

    std::optional<Model> model;
    if (sub == "simulate" || sub == "identify" || sub == "montecarlo") {
        if (!c.model) {
            errors.push_back("--model is required (sre, randles, thevenin1, thevenin2)");
        } else if (!(model = parse_model(*c.model))) {
            errors.push_back("unknown model '" + *c.model + "' (sre, randles, thevenin1, thevenin2)");
        }
        if (c.grid && model && !is_thevenin(*model)) {
            errors.push_back("--grid applies only to thevenin1 and thevenin2");
        }
        if (c.snr_db && !std::isfinite(*c.snr_db)) {
            errors.push_back("--snr must be finite; omit it for noise-free data");
        }
    }
    if (sub == "simulate" || sub == "montecarlo") {
        detail::check_generator(c, model, errors);
    }
    if (sub == "identify" || sub == "montecarlo") {
        detail::check_plan(c, errors);
    }
    if (sub == "identify" && !c.in) {
        errors.push_back("--in is required");
    }
    if (sub == "montecarlo") {
        if (c.trials < 1) {
            errors.push_back("--trials must be at least 1");
        }
        detail::check_windows(c, errors);
    }
    if (sub == "approx" || sub == "bode") {
        if (c.order < 1) {
            errors.push_back("--order must be at least 1");
        }
        if (c.kmax < 4 * c.order + 1) {
            errors.push_back("--kmax must be at least 4*order + 1");
        }
        if (c.hankel != 0 && c.hankel < c.order) {
            errors.push_back("--hankel must be 0 (largest square) or at least the order");
        }
        if (c.hankel != 0 && 2 * c.hankel > c.kmax) {
            errors.push_back("--hankel needs 2*hankel Markov samples; raise --kmax");
        }
    }
    if (sub == "bode") {
        if (!(c.wmin > 0.0) || !(c.wmax <= 1.0) || !(c.wmin < c.wmax)) {
            errors.push_back("--wmin and --wmax must satisfy 0 < wmin < wmax <= 1");
        }
        if (c.points < 2) {
            errors.push_back("--points must be at least 2");
        }
    }
    if (sub == "bfr") {
        if (!c.ref) {
            errors.push_back("--ref is required");
        }
        if (!c.sim) {
            errors.push_back("--sim is required");
        }
        detail::check_windows(c, errors);
    }
    return errors;
}

namespace detail {

class Output {
public:
    Output(const std::optional<std::string>& path, std::ostream& fallback) : os_(&fallback) {
        if (path) {
            file_.open(*path);
            if (!file_) {
                throw Error("cannot open " + *path + " for writing");
            }
            os_ = &file_;
        }
    }
    std::ostream& stream() { return *os_; }

private:
    std::ofstream file_;
    std::ostream* os_;
};

inline void info(std::ostream& log, const std::string& message) { log << "cellid: info: " << message << '\n'; }

struct Generator {
    Model model;
    SampledSignal current;
    SampledSignal voltage;
    std::vector<double> ocv;
    ParameterTable truth;
};

inline Generator generate(const RunConfig& c, Model m) {
    const double ts = c.sample_period();
    Generator g{m, discharge_pulses(c.duration, ts), {}, {}, {}};
    require(g.current.size() > 0, "--duration is shorter than one sample");
    const auto i = g.current.values();
    switch (m) {
        case Model::sre: {
            SreParams p{};
            if (c.preset == "paper-mrandles") {
                const auto q = paper_mrandles();
                p = {q.ocv0, q.c0, q.rb};
            } else if (c.preset) {
                const auto q = *c.preset == "paper-m1" ? paper_m1() : paper_m2();
                p = {q.ocv0, q.c0, q.r0};
            }
            p.ocv0 = c.ocv0.value_or(p.ocv0);
            p.c0 = c.c0.value_or(p.c0);
            p.r0 = c.r0.value_or(p.r0);
            const auto traj = sre_simulate_segment(p, i, ts, p.ocv0);
            g.voltage = {traj.voltage, ts};
            g.ocv = traj.ocv;
            g.truth = parameter_table(PiecewiseModel<SreParams>{SegmentPlan::single(i.size()), {p}, {}});
            break;
        }
        case Model::randles: {
            auto q = paper_mrandles();
            q.ocv0 = c.ocv0.value_or(q.ocv0);
            q.c0 = c.c0.value_or(q.c0);
            q.rb = c.r0.value_or(q.rb);
            const auto& r = reference_realization();
            const auto p = q.params(ts, r.order());
            const auto traj = randles_simulate(p, r, i, ts, p.ocv0, Vector::Zero(r.order()));
            g.voltage = {traj.voltage, ts};
            g.ocv = traj.ocv;
            g.truth = parameter_table(PiecewiseModel<RandlesParams>{SegmentPlan::single(i.size()), {p}, {}}, ts);
            break;
        }
        case Model::thevenin1:
        case Model::thevenin2: {
            auto q = m == Model::thevenin1 ? paper_m1() : paper_m2();
            q.ocv0 = c.ocv0.value_or(q.ocv0);
            q.c0 = c.c0.value_or(q.c0);
            q.r0 = c.r0.value_or(q.r0);
            const auto p = q.params(ts);
            const auto traj = thevenin_simulate(p, i, ts, p.ocv0, p.x0);
            g.voltage = {traj.voltage, ts};
            g.ocv = traj.ocv;
            g.truth = parameter_table(PiecewiseModel<TheveninParams>{SegmentPlan::single(i.size()), {p}, {}}, ts);
            break;
        }
    }
    return g;
}

inline SegmentPlan make_plan(const RunConfig& c, std::size_t samples) {
    if (c.segments) {
        return {*parse_lengths(*c.segments)};
    }
    if (c.segment_length) {
        return SegmentPlan::uniform(samples, *c.segment_length);
    }
    return SegmentPlan::single(samples);
}

struct Identified {
    ParameterTable table;
    SampledSignal simulated;
};

/// Identifies `model` on the part of `record` covered by `plan` and
/// resimulates it on the same samples.
inline Identified identify(Model model, const DischargeRecord& record, const SegmentPlan& plan,
                           const std::optional<ObserverGrid>& grid, std::ostream* log) {
    const double ts = record.ts();
    const auto covered = record.current.slice(0, plan.total());
    switch (model) {
        case Model::sre: {
            const auto m = sre_identify(record, plan);
            return {parameter_table(m), piecewise_simulate(m, covered)};
        }
        case Model::randles: {
            const auto& r = reference_realization();
            const auto m = randles_identify(record, plan, r);
            return {parameter_table(m, ts), piecewise_simulate(m, r, covered)};
        }
        case Model::thevenin1:
        case Model::thevenin2: {
            const auto order = thevenin_order(model);
            const auto id = thevenin_identify(record, order, plan, grid ? *grid : ObserverGrid::defaults(order));
            if (log) {
                for (std::size_t s = 0; s < id.reports.size(); ++s) {
                    std::ostringstream msg;
                    msg << "segment " << s + 1 << ": observer";
                    for (const auto& l : id.observers[s]) {
                        msg << ' ' << l;
                    }
                    msg << ", " << id.reports[s].iterations << " Jacobi iterations, V = " << id.reports[s].cost;
                    info(*log, msg.str());
                }
            }
            return {parameter_table(id.model, ts), piecewise_simulate(id.model, covered)};
        }
    }
    throw Error("unhandled model");
}

inline std::optional<ObserverGrid> load_grid(const RunConfig& c, Model m) {
    if (!c.grid || !is_thevenin(m)) {
        return std::nullopt;
    }
    return read_grid(*c.grid, thevenin_order(m));
}

inline std::vector<double> log_space(double lo, double hi, std::size_t n) {
    std::vector<double> out(n);
    const double a = std::log10(lo);
    const double b = std::log10(hi);
    for (std::size_t k = 0; k < n; ++k) {
        out[k] = std::pow(10.0, a + (b - a) * static_cast<double>(k) / static_cast<double>(n - 1));
    }
    out.back() = hi;
    return out;
}

inline WarburgRealization approximate(const RunConfig& c) {
    HoKalmanOptions opt;
    opt.hankel_size = c.hankel;
    return ho_kalman(warburg_impulse(1.0, 1.0, c.kmax), c.order, opt, 1.0);
}

inline int cmd_simulate(const RunConfig& c, std::ostream& out, std::ostream& log) {
    const auto g = generate(c, *parse_model(*c.model));
    const DischargeRecord rec(g.current, add_noise(g.voltage, c.snr_db, c.seed));
    Output o(c.out, out);
    write_record(rec, o.stream());
    info(log, "simulated " + std::to_string(rec.size()) + " samples");
    return 0;
}

inline int cmd_identify(const RunConfig& c, std::ostream& out, std::ostream& log) {
    const auto model = *parse_model(*c.model);
    const auto rec = read_record(*c.in);
    if (c.ts && std::abs(*c.ts - rec.ts()) > 1e-9 * rec.ts()) {
        throw Error("--ts differs from the sampling period of " + *c.in);
    }
    const auto plan = make_plan(c, rec.size());
    const auto id = identify(model, rec, plan, load_grid(c, model), &log);
    Output o(c.out, out);
    write_parameter_table(id.table, o.stream());
    std::ostringstream msg;
    msg << std::setprecision(6) << "resimulation BFR " << bfr(rec.voltage.slice(0, plan.total()), id.simulated)
        << " %";
    info(log, msg.str());
    return 0;
}

inline int cmd_approx(const RunConfig& c, std::ostream& out, std::ostream& log) {
    const auto start = std::chrono::steady_clock::now();
    const auto r = approximate(c);
    const double e = relative_error(warburg_impulse(1.0, 1.0, c.kmax), realization_impulse(r, c.kmax));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.realization) {
        write_realization(r, *c.realization);
    }
    Output o(c.out, out);
    o.stream() << "order,kmax,e_percent\n" << std::setprecision(17) << c.order << ',' << c.kmax << ',' << e << '\n';
    std::ostringstream msg;
    msg << std::setprecision(4) << "E_" << c.kmax << " = " << e << " % (" << secs << " s)";
    info(log, msg.str());
    return 0;
}

inline int cmd_bode(const RunConfig& c, std::ostream& out, std::ostream&) {
    const auto r = c.realization ? read_realization(*c.realization) : approximate(c);
    const double ts = c.sample_period();
    const auto rel = log_space(c.wmin, c.wmax, c.points);
    std::vector<double> theta(rel.size());
    std::transform(rel.begin(), rel.end(), theta.begin(), [](double x) { return x * std::numbers::pi; });
    const auto h = freq_response(r, theta);
    Output o(c.out, out);
    auto& os = o.stream();
    os << "omega_over_nyquist,omega_rad_s,mag_db,phase_deg,ideal_mag_db,ideal_phase_deg\n" << std::setprecision(17);
    for (std::size_t k = 0; k < rel.size(); ++k) {
        const auto ideal = ideal_warburg(theta[k]);
        os << rel[k] << ',' << theta[k] / ts << ',' << magnitude_db(h[k]) << ',' << phase_deg(h[k]) << ','
           << magnitude_db(ideal) << ',' << phase_deg(ideal) << '\n';
    }
    return 0;
}

inline int cmd_bfr(const RunConfig& c, std::ostream& out, std::ostream&) {
    const auto ref = read_record(*c.ref);
    const auto sim = read_record(*c.sim);
    const auto windows = c.windows ? parse_windows(*c.windows) : std::vector<Window>{};
    const auto report = bfr_report(ref.voltage, sim.voltage, windows);
    Output o(c.out, out);
    write_bfr_report(report, o.stream());
    return 0;
}

inline int cmd_montecarlo(const RunConfig& c, std::ostream& out, std::ostream& log) {
    const auto model = *parse_model(*c.model);
    const auto g = generate(c, model);
    const DischargeRecord clean(g.current, g.voltage);
    const auto plan = make_plan(c, clean.size());
    if (plan.total() != clean.size()) {
        throw Error("segment plan covers " + std::to_string(plan.total()) + " of " + std::to_string(clean.size()) +
                    " samples; Monte Carlo needs the whole record");
    }
    const auto grid = load_grid(c, model);

    // Truth per segment: the generating parameters with the OCV reached at
    // each segment start.
    ParameterTable truth;
    for (std::size_t s = 0; s < plan.count(); ++s) {
        for (auto row : g.truth) {
            row.segment = s + 1;
            if (row.name == "OCV0") {
                row.value = g.ocv[plan.offset(s)];
            }
            truth.push_back(row);
        }
    }

    MonteCarloConfig mc;
    mc.snr_db = c.snr_db;
    mc.trials = c.trials;
    mc.base_seed = c.seed;
    mc.windows = c.windows ? parse_windows(*c.windows) : std::vector<Window>{};
    mc.truth = flatten(truth);
    const auto report = monte_carlo(
        clean,
        [&](const DischargeRecord& noisy) {
            auto id = identify(model, noisy, plan, grid, nullptr);
            return TrialEstimate{flatten(id.table), std::move(id.simulated)};
        },
        mc);
    Output o(c.out, out);
    write_monte_carlo_report(report, o.stream());
    info(log, std::to_string(report.trials) + " trials, " + std::to_string(report.failures) + " failed");
    for (const auto& m : report.failure_messages) {
        info(log, m);
    }
    return 0;
}

}  // namespace detail

/// Parser bound to `config`. Each subcommand carries the shared --seed,
/// --out and --ts flags so that its help lists them.
inline std::unique_ptr<CLI::App> make_app(RunConfig& c) {
    auto app = std::make_unique<CLI::App>("Equivalent-circuit battery model identification toolkit", "cellid");
    app->require_subcommand(1);

    const auto shared = [&c](CLI::App* s) {
        s->add_option("--seed", c.seed, "Noise seed; Monte Carlo trial t uses seed + t")->capture_default_str();
        s->add_option("--out", c.out, "Output CSV path (default: standard output)");
        s->add_option("--ts", c.ts, "Sampling period in seconds (default 0.008)");
    };
    const auto generator = [&c](CLI::App* s) {
        s->add_option("--model", c.model, "Model: sre, randles, thevenin1 or thevenin2");
        s->add_option("--preset", c.preset, "Parameter preset: paper-mrandles, paper-m1 or paper-m2");
        s->add_option("--ocv0", c.ocv0, "Initial open-circuit voltage in V (overrides the preset)");
        s->add_option("--c0", c.c0, "Bulk capacitance C0 in F (overrides the preset)");
        s->add_option("--r0", c.r0, "Series resistance in ohm, R0 or Rb (overrides the preset)");
        s->add_option("--duration", c.duration, "Length of the 0.75 A 10 s/10 s pulse train in s")
            ->capture_default_str();
    };
    const auto plan = [&c](CLI::App* s) {
        s->add_option("--segments", c.segments, "Comma-separated segment lengths in samples");
        s->add_option("--segment-length", c.segment_length,
                      "Uniform segment length; a short remainder joins the last segment");
        s->add_option("--grid", c.grid, "Observer eigenvalue grid CSV with header re,im (Thevenin only)");
    };
    const auto warburg = [&c](CLI::App* s) {
        s->add_option("--order", c.order, "Realization order")->capture_default_str();
        s->add_option("--kmax", c.kmax, "Markov parameters used, k = 1..kmax")->capture_default_str();
        s->add_option("--hankel", c.hankel, "Hankel block size; 0 picks the largest square one")
            ->capture_default_str();
    };

    auto* sim = app->add_subcommand("simulate", "Generate a synthetic discharge record (t,i_bat,v_bat)");
    generator(sim);
    sim->add_option("--snr", c.snr_db, "Add Gaussian voltage noise at this SNR in dB");
    shared(sim);

    auto* id = app->add_subcommand("identify", "Identify a model from a record; writes segment,parameter,value");
    id->add_option("--model", c.model, "Model: sre, randles, thevenin1 or thevenin2");
    id->add_option("--in", c.in, "Input record CSV (t,i_bat,v_bat)");
    plan(id);
    shared(id);

    auto* ap = app->add_subcommand("approx", "Approximate the Warburg impulse response; writes order,kmax,e_percent");
    warburg(ap);
    ap->add_option("--realization", c.realization, "Also write the realization CSV to this path");
    shared(ap);

    auto* bo = app->add_subcommand("bode", "Frequency response of the Warburg realization against the ideal element");
    warburg(bo);
    bo->add_option("--realization", c.realization, "Read the realization from this CSV instead of computing it");
    bo->add_option("--wmin", c.wmin, "Lowest frequency as a fraction of Nyquist")->capture_default_str();
    bo->add_option("--wmax", c.wmax, "Highest frequency as a fraction of Nyquist")->capture_default_str();
    bo->add_option("--points", c.points, "Number of log-spaced frequencies")->capture_default_str();
    shared(bo);

    auto* bf = app->add_subcommand("bfr", "Best fit rate of a simulated record against a reference");
    bf->add_option("--ref", c.ref, "Reference record CSV");
    bf->add_option("--sim", c.sim, "Simulated record CSV");
    bf->add_option("--windows", c.windows, "Windows as first:last sample numbers, 1-based, e.g. 1:50000,50001:100000");
    shared(bf);

    auto* mc = app->add_subcommand("montecarlo", "Repeated identification under voltage noise; writes a summary CSV");
    generator(mc);
    mc->add_option("--snr", c.snr_db, "Noise level in dB (omit for noise-free trials)");
    mc->add_option("--trials", c.trials, "Number of trials")->capture_default_str();
    mc->add_option("--windows", c.windows, "BFR windows as first:last sample numbers, 1-based");
    plan(mc);
    shared(mc);

    for (auto* s : app->get_subcommands({})) {
        s->callback([&c, s] { c.subcommand = s->get_name(); });
    }
    return app;
}

/// Runs one command line (without the program name). Results go to `out`
/// unless --out is given; diagnostics go to `err` as "cellid: ..." lines.
/// Returns 0 on success, 2 for usage or configuration errors and 1 when the
/// command itself fails.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig config;
    auto app = make_app(config);
    if (!args.empty() && !args.front().starts_with('-') && !app->get_subcommand_no_throw(args.front())) {
        err << "cellid: error: unknown subcommand '" << args.front() << "'\n" << app->help();
        return 2;
    }
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app->parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app->exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "cellid: error: " << e.what() << '\n' << app->help();
        return 2;
    }

    const auto errors = validate(config);
    if (!errors.empty()) {
        for (const auto& e : errors) {
            err << "cellid: error: " << config.subcommand << ": " << e << '\n';
        }
        return 2;
    }

    try {
        if (config.subcommand == "simulate") {
            return detail::cmd_simulate(config, out, err);
        }
        if (config.subcommand == "identify") {
            return detail::cmd_identify(config, out, err);
        }
        if (config.subcommand == "approx") {
            return detail::cmd_approx(config, out, err);
        }
        if (config.subcommand == "bode") {
            return detail::cmd_bode(config, out, err);
        }
        if (config.subcommand == "bfr") {
            return detail::cmd_bfr(config, out, err);
        }
        return detail::cmd_montecarlo(config, out, err);
    } catch (const std::exception& e) {
        err << "cellid: error: " << config.subcommand << ": " << e.what() << '\n';
        return 1;
    }
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace cellid::cli
