#pragma once

#include "cellid/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cellid {

/// Uniformly sampled real time series. Immutable once built.
class SampledSignal {
public:
    SampledSignal() = default;

    SampledSignal(std::vector<double> values, double ts) : values_(std::move(values)), ts_(ts) {
        require(ts_ > 0.0 && std::isfinite(ts_), "sampling period must be positive and finite");
        for (std::size_t k = 0; k < values_.size(); ++k) {
            require(std::isfinite(values_[k]), "non-finite sample at index " + std::to_string(k));
        }
    }

    static SampledSignal constant(double value, std::size_t n, double ts) {
        return {std::vector<double>(n, value), ts};
    }

    std::span<const double> values() const noexcept { return values_; }
    double ts() const noexcept { return ts_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }
    double operator[](std::size_t k) const { return values_[k]; }

    SampledSignal slice(std::size_t begin, std::size_t count) const {
        require(begin + count <= values_.size(), "slice exceeds signal length");
        return {std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(begin),
                                    values_.begin() + static_cast<std::ptrdiff_t>(begin + count)),
                ts_};
    }

    double peak_to_peak() const {
        if (values_.empty()) {
            return 0.0;
        }
        const auto [lo, hi] = std::minmax_element(values_.begin(), values_.end());
        return *hi - *lo;
    }

    friend bool operator==(const SampledSignal&, const SampledSignal&) = default;

private:
    std::vector<double> values_;
    double ts_ = 1.0;
};

inline double soc_from_charge(double q_d, double q_max) {
    require(q_max > 0.0, "cell capacity q_max must be positive");
    return (1.0 - q_d / q_max) * 100.0;
}

inline double initial_charge(double soc0, double q_max) {
    require(q_max > 0.0, "cell capacity q_max must be positive");
    require(soc0 >= 0.0 && soc0 <= 100.0, "initial SOC must lie in [0, 100] percent");
    return (1.0 - soc0 / 100.0) * q_max;
}

/// Capacity, removed charge and the SOC derived from them.
class ChargeState {
public:
    ChargeState(double q_max, double q_d) : q_max_(q_max), q_d_(q_d), soc_(soc_from_charge(q_d, q_max)) {}

    static ChargeState from_soc(double soc, double q_max) { return {q_max, initial_charge(soc, q_max)}; }

    double q_max() const noexcept { return q_max_; }
    double q_d() const noexcept { return q_d_; }
    double soc() const noexcept { return soc_; }

private:
    double q_max_;
    double q_d_;
    double soc_;
};

/// Removed charge q_d[k+1] = q_d[k] + ts * i[k], starting from q0.
inline SampledSignal integrate_charge(const SampledSignal& current, double q0 = 0.0) {
    std::vector<double> q(current.size());
    double acc = q0;
    for (std::size_t k = 0; k < current.size(); ++k) {
        q[k] = acc;
        acc += current.ts() * current[k];
    }
    return {std::move(q), current.ts()};
}

/// Same recursion on a raw span; used by the regressor builders.
inline std::vector<double> cumulative_charge(std::span<const double> current, double ts) {
    std::vector<double> q(current.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < current.size(); ++k) {
        q[k] = acc;
        acc += ts * current[k];
    }
    return q;
}

/// Rectangular discharge pulses starting in the ON phase.
inline SampledSignal pulse_train(double amplitude, double on_s, double off_s, double total_s, double ts) {
    require(on_s > 0.0 && off_s > 0.0 && total_s > 0.0 && ts > 0.0, "pulse durations must be positive");
    require(std::isfinite(amplitude), "pulse amplitude must be finite");
    const auto samples = [ts](double seconds) { return static_cast<std::size_t>(std::llround(seconds / ts)); };
    const std::size_t on = samples(on_s);
    const std::size_t off = samples(off_s);
    const std::size_t n = samples(total_s);
    require(on > 0 && off > 0, "pulse phases must span at least one sample");

    std::vector<double> values(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        if (k % (on + off) < on) {
            values[k] = amplitude;
        }
    }
    return {std::move(values), ts};
}

/// Standard normal deviates from std::mt19937_64 via the Marsaglia polar
/// method. The engine is bit-specified by the standard and the transform is
/// local, so a seed yields identical sequences on every platform.
class GaussianSource {
public:
    explicit GaussianSource(std::uint64_t seed) : engine_(seed) {}

    double operator()() {
        if (spare_) {
            const double v = *spare_;
            spare_.reset();
            return v;
        }
        double u = 0.0;
        double v = 0.0;
        double s = 0.0;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        return u * f;
    }

private:
    // 53 random bits mapped onto [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    std::mt19937_64 engine_;
    std::optional<double> spare_;
};

/// Noise standard deviation for a given SNR: peak-to-peak / 10^(snr/20).
inline double noise_sigma(const SampledSignal& signal, double snr_db) {
    return signal.peak_to_peak() / std::pow(10.0, snr_db / 20.0);
}

/// Adds zero-mean white Gaussian noise. An empty `snr_db` means a noise-free
/// copy; there is no floating-point infinity sentinel.
inline SampledSignal add_noise(const SampledSignal& signal, std::optional<double> snr_db, std::uint64_t seed) {
    if (!snr_db) {
        return signal;
    }
    require(std::isfinite(*snr_db), "SNR must be finite; omit it for a noise-free signal");
    require(signal.peak_to_peak() > 0.0, "cannot scale noise to a constant signal");
    const double sigma = noise_sigma(signal, *snr_db);
    GaussianSource gauss(seed);
    std::vector<double> out(signal.values().begin(), signal.values().end());
    for (double& v : out) {
        v += sigma * gauss();
    }
    return {std::move(out), signal.ts()};
}

/// Contiguous segment lengths N_i used by the piecewise estimators.
struct SegmentPlan {
    std::vector<std::size_t> lengths;

    static SegmentPlan single(std::size_t n) { return {{n}}; }

    /// Splits `total` samples into segments of `length`; a shorter remainder
    /// is merged into the last segment.
    static SegmentPlan uniform(std::size_t total, std::size_t length) {
        require(length > 0, "segment length must be positive");
        SegmentPlan plan;
        std::size_t used = 0;
        while (total - used >= 2 * length) {
            plan.lengths.push_back(length);
            used += length;
        }
        if (total > used) {
            plan.lengths.push_back(total - used);
        }
        return plan;
    }

    std::size_t total() const { return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0}); }
    std::size_t count() const { return lengths.size(); }

    std::size_t offset(std::size_t segment) const {
        return std::accumulate(lengths.begin(), lengths.begin() + static_cast<std::ptrdiff_t>(segment),
                               std::size_t{0});
    }

    void validate(std::size_t min_length, std::size_t record_length) const {
        require(!lengths.empty(), "segment plan is empty");
        for (std::size_t i = 0; i < lengths.size(); ++i) {
            require(lengths[i] >= min_length, "segment " + std::to_string(i + 1) + " has " +
                                                  std::to_string(lengths[i]) + " samples, fewer than the " +
                                                  std::to_string(min_length) + " required");
        }
        require(total() <= record_length, "segment plan covers more samples than the record holds");
    }
};

/// Per-segment parameters of a piecewise LTI model. Each entry carries the
/// initial state of its segment, so boundary values are explicit.
template <class Params>
struct PiecewiseModel {
    SegmentPlan plan;
    std::vector<Params> segments;
    std::vector<double> residual_rms;
};

/// Current/voltage pair sharing one time base. `truth` optionally carries the
/// generating parameters of synthetic data; it is not persisted to CSV.
struct DischargeRecord {
    SampledSignal current;
    SampledSignal voltage;
    std::vector<std::pair<std::string, double>> truth;

    DischargeRecord() = default;
    DischargeRecord(SampledSignal i, SampledSignal v, std::vector<std::pair<std::string, double>> meta = {})
        : current(std::move(i)), voltage(std::move(v)), truth(std::move(meta)) {
        require(current.size() == voltage.size(), "current and voltage lengths differ");
        require(current.ts() == voltage.ts(), "current and voltage sampling periods differ");
    }

    double ts() const noexcept { return current.ts(); }
    std::size_t size() const noexcept { return current.size(); }

    DischargeRecord slice(std::size_t begin, std::size_t count) const {
        return {current.slice(begin, count), voltage.slice(begin, count)};
    }
};

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) {
            break;
        }
        start = comma + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

inline std::optional<double> parse_double(std::string_view text) {
    text = trim(text);
    if (!text.empty() && text.front() == '+') {
        text.remove_prefix(1);
    }
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
        return std::nullopt;
    }
    return value;
}

}  // namespace detail

inline constexpr std::string_view record_header = "t,i_bat,v_bat";

inline void write_record(const DischargeRecord& record, std::ostream& os) {
    os << record_header << '\n';
    os << std::setprecision(17);
    for (std::size_t k = 0; k < record.size(); ++k) {
        os << static_cast<double>(k) * record.ts() << ',' << record.current[k] << ',' << record.voltage[k] << '\n';
    }
}

inline void write_record(const DischargeRecord& record, const std::string& path) {
    std::ofstream os(path);
    if (!os) {
        throw Error("cannot open " + path + " for writing");
    }
    write_record(record, os);
}

inline DischargeRecord read_record(std::istream& is) {
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(is, line)) {
        throw ParseError(1, "empty file; expected header '" + std::string(record_header) + "'");
    }
    ++line_no;
    if (detail::trim(line) != record_header) {
        throw ParseError(line_no, "expected header '" + std::string(record_header) + "'");
    }

    std::vector<double> t;
    std::vector<double> current;
    std::vector<double> voltage;
    while (std::getline(is, line)) {
        ++line_no;
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto fields = detail::split_csv(line);
        if (fields.size() != 3) {
            throw ParseError(line_no, "expected 3 columns, found " + std::to_string(fields.size()));
        }
        double row[3];
        for (std::size_t c = 0; c < 3; ++c) {
            const auto value = detail::parse_double(fields[c]);
            if (!value) {
                throw ParseError(line_no, "column " + std::to_string(c + 1) + " is not a number");
            }
            if (!std::isfinite(*value)) {
                throw ParseError(line_no, "column " + std::to_string(c + 1) + " is not finite");
            }
            row[c] = *value;
        }
        t.push_back(row[0]);
        current.push_back(row[1]);
        voltage.push_back(row[2]);
    }

    if (t.size() < 2) {
        throw ParseError(line_no, "need at least two samples to determine the sampling period");
    }
    const double ts = t[1] - t[0];
    if (!(ts > 0.0)) {
        throw ParseError(3, "time stamps must increase");
    }
    for (std::size_t k = 1; k < t.size(); ++k) {
        const double step = t[k] - t[k - 1];
        if (std::abs(step - ts) > 1e-9 * ts) {
            throw ParseError(k + 2, "non-uniform time step");
        }
    }
    return {SampledSignal(std::move(current), ts), SampledSignal(std::move(voltage), ts)};
}

inline DischargeRecord read_record(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw Error("cannot open " + path);
    }
    return read_record(is);
}

}  // namespace cellid
