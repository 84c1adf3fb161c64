#include <catch2/catch_amalgamated.hpp>

#include "cellid/thevenin.hpp"

#include <cmath>
#include <random>
#include <sstream>

using namespace cellid;
using Catch::Approx;

namespace {

constexpr double ts = 0.008;

SampledSignal paper_pulses(double seconds) { return pulse_train(0.75, 10.0, 10.0, seconds, ts); }

struct Plant {
    Matrix a;
    Vector b;
    double r0;
    double ocv0;
    double inv_c0;
    Vector x0;

    TheveninParams around(const Matrix& a0) const { return TheveninParams::from_plant(a0, a, b, r0, ocv0, inv_c0, x0); }
};

Plant m1_plant() {
    const std::vector<RcPair> rc{{0.0153, 531.69}};
    auto [a, b] = rc_canonical(rc, ts);
    return {a, b, 0.1206, 4.165, 1.0 / 2439.3, Vector::Constant(1, -0.004)};
}

Plant m2_plant() {
    const std::vector<RcPair> rc{{0.0183, 211.17}, {0.0063, 5.7168}};
    auto [a, b] = rc_canonical(rc, ts);
    Vector x0(2);
    x0 << -0.003, 0.002;
    return {a, b, 0.1202, 4.1633, 1.0 / 2368.3, x0};
}

std::vector<double> simulate(const Plant& p, std::span<const double> i) {
    return thevenin_simulate(p.around(p.a), i, ts, p.ocv0, p.x0).voltage;
}

Vector constrained_theta(const TheveninParams& p) {
    const Eigen::Index n = p.order();
    Vector t(3 * n + 3);
    t << p.x0, p.b_a, p.r0, p.l_gain, p.ocv0, p.inv_c0;
    return t;
}

}  // namespace

TEST_CASE("ObserverMatrix") {
    const auto obs = ObserverMatrix::from_eigenvalues({Complex(0.3, 0.0), Complex(0.5, 0.0)});
    Matrix expected(2, 2);
    expected << 0.8, 1.0, -0.15, 0.0;
    CHECK((obs.a0 - expected).norm() < 1e-15);

    const auto cplx = ObserverMatrix::from_eigenvalues({std::polar(0.9, 0.3), std::polar(0.9, -0.3)});
    Eigen::VectorXcd ev = Eigen::EigenSolver<Matrix>(cplx.a0).eigenvalues();
    CHECK(std::abs(std::abs(ev(0)) - 0.9) < 1e-12);
    CHECK(std::abs(std::abs(ev(0).imag()) - 0.9 * std::sin(0.3)) < 1e-12);

    CHECK_THROWS_AS(ObserverMatrix::from_eigenvalues({Complex(-0.2, 0.0)}), std::invalid_argument);
    CHECK_THROWS_AS(ObserverMatrix::from_eigenvalues({Complex(1.0, 0.0)}), std::invalid_argument);
    CHECK_THROWS_AS(ObserverMatrix::from_eigenvalues({Complex(0.5, 0.1), Complex(0.5, 0.2)}), std::invalid_argument);
}

TEST_CASE("observer_filter") {
    Matrix half = Matrix::Constant(1, 1, 0.5);
    CHECK(observer_filter(half, std::vector<double>(20, 0.0)).isZero());

    std::vector<double> impulse(30, 0.0);
    impulse[0] = 1.0;
    const Matrix s = observer_filter(half, impulse);
    CHECK(s(0, 0) == 0.0);
    for (Eigen::Index k = 1; k < 30; ++k) {
        CHECK(s(k, 0) == Approx(std::pow(0.5, static_cast<double>(k - 1))).epsilon(1e-15));
    }

    const auto obs = ObserverMatrix::from_eigenvalues({Complex(0.6, 0.2), Complex(0.6, -0.2)});
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    std::vector<double> u1(200), u2(200), mix(200);
    for (std::size_t k = 0; k < u1.size(); ++k) {
        u1[k] = g(rng);
        u2[k] = g(rng);
        mix[k] = 2.0 * u1[k] - 3.0 * u2[k];
    }
    const Matrix lhs = observer_filter(obs, mix);
    const Matrix rhs = 2.0 * observer_filter(obs, u1) - 3.0 * observer_filter(obs, u2);
    CHECK((lhs - rhs).norm() < 1e-12);
}

TEST_CASE("segment-1 regressor blocks") {
    const auto i = paper_pulses(40.0);
    const auto plant = m2_plant();
    const auto v = simulate(plant, i.values());
    const auto obs = ObserverMatrix::from_eigenvalues({Complex(0.9, 0.0), Complex(0.5, 0.0)});
    const auto b = build_regressors_segment1(i.values(), v, ts, obs);

    CHECK(b.phi_e.isOnes());
    CHECK(b.phi_a.row(0) == obs.c_row());
    CHECK(b.stacked().cols() == 5 * 2 + 3);
    CHECK(b.phi_a.cols() + b.phi_b.cols() + 1 + b.phi_d.cols() + 1 + 1 + b.phi_g.cols() + b.phi_h.cols() == 13);

    SECTION("true parameters satisfy the regression exactly") {
        for (const auto& lambda : std::vector<std::vector<Complex>>{{Complex(0.9, 0), Complex(0.5, 0)},
                                                                    {std::polar(0.7, 0.4), std::polar(0.7, -0.4)},
                                                                    {Complex(0.99, 0), Complex(0.98, 0)}}) {
            const auto o = ObserverMatrix::from_eigenvalues(lambda);
            const auto blocks = build_regressors_segment1(i.values(), v, ts, o);
            const auto truth = plant.around(o.a0);
            const Vector theta = constrained_theta(truth);
            const Vector r = blocks.y - Segment1Problem(blocks).psi(theta) * theta;
            CHECK(r.cwiseAbs().maxCoeff() < 1e-9);
        }
    }

    SECTION("dropped blocks are spanned by the kept ones") {
        const Matrix m = (Matrix::Identity(2, 2) - obs.a0).inverse();
        for (Eigen::Index k : {0, 1, 17, 4000}) {
            const RowVector one_f = -b.phi_g.row(k);
            const RowVector expect1 = m.row(0) - b.phi_a.row(k) * m;
            CHECK((one_f - expect1).norm() < 1e-9 * (1.0 + expect1.norm()));
            const RowVector q_f = b.phi_h.row(k);
            const RowVector expect2 = -b.phi_f(k) * m.row(0) - ts * b.phi_b.row(k) * m;
            CHECK((q_f - expect2).norm() < 1e-9 * (1.0 + expect2.norm()));
        }
    }

    SECTION("the full unconstrained regression is rank-deficient") {
        try {
            unconstrained_ls(b);
            FAIL("expected RankError");
        } catch (const RankError& e) {
            CHECK(e.column_name().rfind("theta_", 0) == 0);
        }
    }
}

TEST_CASE("unconstrained_ls on generic blocks") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g;
    const auto random_blocks = [&](Eigen::Index rows) {
        Segment1Blocks b;
        b.a0 = Matrix::Constant(1, 1, 0.5);
        const auto fill = [&](Eigen::Index c) {
            Matrix m(rows, c);
            for (Eigen::Index r = 0; r < rows; ++r) {
                for (Eigen::Index j = 0; j < c; ++j) {
                    m(r, j) = g(rng);
                }
            }
            return m;
        };
        b.phi_a = fill(1);
        b.phi_b = fill(1);
        b.phi_c = fill(1);
        b.phi_d = fill(1);
        b.phi_e = fill(1);
        b.phi_f = fill(1);
        b.phi_g = fill(1);
        b.phi_h = fill(1);
        b.y = fill(1);
        return b;
    };

    SECTION("consistent restrictions are recovered") {
        auto b = random_blocks(200);
        Vector truth(8);
        truth << 0.2, -1.0, 0.5, 0.3, 4.0, 0.01, 0.3 * 4.0, 0.3 * 0.01;
        b.y = b.stacked() * truth;
        const auto fit = unconstrained_ls(b);
        CHECK((fit.theta - truth).norm() < 1e-10);
        CHECK(fit.theta(6) == Approx(fit.theta(3) * fit.theta(4)).epsilon(1e-10));
        CHECK(fit.theta(7) == Approx(fit.theta(3) * fit.theta(5)).epsilon(1e-10));
    }
    SECTION("square system has zero residual") {
        const auto b = random_blocks(8);
        CHECK(unconstrained_ls(b).sum_squared_residual < 1e-20);
    }
    SECTION("duplicate column is reported") {
        auto b = random_blocks(50);
        b.phi_h = b.phi_b;
        CHECK_THROWS_AS(unconstrained_ls(b), RankError);
    }
}

TEST_CASE("jacobi_constrained") {
    SECTION("inactive restrictions reduce to one least-squares step") {
        const auto i = paper_pulses(40.0);
        const auto v = simulate(m1_plant(), i.values());
        auto b = build_regressors_segment1(i.values(), v, ts, ObserverMatrix::from_eigenvalues({Complex(0.8, 0)}));
        b.phi_g.setZero();
        b.phi_h.setZero();
        auto noisy = b.y;
        std::mt19937_64 rng(5);
        std::normal_distribution<double> g(0.0, 1e-3);
        for (Eigen::Index k = 0; k < noisy.size(); ++k) {
            noisy(k) += g(rng);
        }
        b.y = noisy;
        Matrix phi(b.rows(), 6);
        phi << b.phi_a, b.phi_b, b.phi_c, b.phi_d, b.phi_e, b.phi_f;
        const Vector ls = solve_least_squares(phi, b.y).theta;
        JacobiOptions one;
        one.max_iter = 1;
        const auto res = jacobi_constrained(Segment1Problem(b), Vector::Zero(6), one);
        CHECK((res.theta - ls).norm() < 1e-8 * ls.norm());
        const auto full = jacobi_constrained(Segment1Problem(b), Vector::Zero(6));
        CHECK(full.converged);
        CHECK(full.iterations <= 3);
    }

    SECTION("noise-free order 1: monotone descent to the truth from a perturbed start") {
        const auto i = paper_pulses(400.0);
        const auto plant = m1_plant();
        const auto v = simulate(plant, i.values());
        const auto obs = ObserverMatrix::from_eigenvalues({Complex(0.95, 0)});
        const auto b = build_regressors_segment1(i.values(), v, ts, obs);
        const Segment1Problem problem(b);
        const Vector truth = constrained_theta(plant.around(obs.a0));
        Vector start = truth;
        start(2) *= 1.3;  // L
        start(3) *= 0.999;  // OCV0
        const auto res = jacobi_constrained(problem, start);
        CHECK(res.converged);
        CHECK(res.monotone);
        for (std::size_t j = 1; j < res.cost_history.size(); ++j) {
            CHECK(res.cost_history[j] <= res.cost_history[j - 1] + 1e-12);
        }
        for (Eigen::Index j = 0; j < truth.size(); ++j) {
            CHECK(res.theta(j) == Approx(truth(j)).epsilon(1e-6).margin(1e-12));
        }
        for (Eigen::Index j = 0; j < truth.size(); ++j) {
            for (double d : {-1e-5, 1e-5}) {
                Vector t = res.theta;
                t(j) += d;
                CHECK(constrained_cost(problem, t) > res.cost);
            }
        }
    }
}

TEST_CASE("reduced init maps exactly onto the restricted parameters") {
    const auto i = paper_pulses(100.0);
    const auto plant = m2_plant();
    const auto v = simulate(plant, i.values());
    const auto obs = ObserverMatrix::from_eigenvalues({Complex(0.9, 0.0), Complex(0.6, 0.0)});
    const Vector truth = constrained_theta(plant.around(obs.a0));
    const Vector init = reduced_init(build_regressors_segment1(i.values(), v, ts, obs));
    for (Eigen::Index j = 0; j < truth.size(); ++j) {
        CHECK(init(j) == Approx(truth(j)).epsilon(1e-6).margin(1e-12));
    }
}

TEST_CASE("observer_search") {
    const auto i = paper_pulses(100.0);
    const auto plant = m1_plant();
    const auto v = simulate(plant, i.values());

    SECTION("single candidate") {
        const auto res = observer_search(i.values(), v, ts, ObserverGrid::single({Complex(0.42, 0)}));
        CHECK(res.observer.eigenvalues[0] == Complex(0.42, 0));
        CHECK(res.candidate == 0);
    }
    SECTION("order-1 grid selects the cost minimizer") {
        const auto grid = ObserverGrid::defaults(1);
        REQUIRE(grid.candidates.size() == 99);
        const auto noisy = add_noise(SampledSignal(v, ts), 40.0, 3);
        const auto res = observer_search(i.values(), noisy.values(), ts, grid);
        const detail::Segment1Ranker rank(i.values(), noisy.values(), ts);
        double best = INFINITY;
        std::size_t arg = 0;
        for (std::size_t c = 0; c < grid.candidates.size(); ++c) {
            const auto obs = ObserverMatrix::from_eigenvalues(grid.candidates[c]);
            const auto f = estimate_segment1(i.values(), noisy.values(), ts, obs);
            CHECK(rank(obs) == Approx(f.cost).epsilon(1e-8));
            if (f.cost < best) {
                best = f.cost;
                arg = c;
            }
        }
        CHECK(res.candidate == arg);
        CHECK(res.fit.cost == Approx(best).epsilon(1e-12));
        CHECK(res.evaluated == grid.candidates.size());
    }
    SECTION("empty grid") {
        ObserverGrid empty;
        CHECK_THROWS_AS(observer_search(i.values(), v, ts, empty), Error);
    }
}

TEST_CASE("default order-2 grid") {
    const auto grid = ObserverGrid::defaults(2);
    CHECK(grid.candidates.size() == 4851 + 18 * 17);
    for (const auto& c : grid.candidates) {
        REQUIRE(c.size() == 2);
        CHECK(c[0].real() > 0.0);
        CHECK(c[1].real() > 0.0);
        CHECK(std::abs(c[0]) < 1.0);
    }
}

TEST_CASE("grid CSV") {
    std::istringstream in("re,im\n0.5,0\n0.7,0\n0.9,0\n0.6,0.2\n");
    const auto g2 = read_grid(in, 2);
    CHECK(g2.candidates.size() == 4);
    CHECK(g2.candidates[3][1] == std::conj(g2.candidates[3][0]));

    std::istringstream bad("re,im\n0.5,0\n-0.2,0\n");
    try {
        read_grid(bad, 1);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
    std::istringstream complex1("re,im\n0.5,0.1\n");
    CHECK_THROWS_AS(read_grid(complex1, 1), ParseError);
}

TEST_CASE("thevenin_simulate") {
    const auto plant = m1_plant();
    const auto p = plant.around(Matrix::Constant(1, 1, 0.3));
    const std::vector<double> z(50, 0.0);
    const auto rest = thevenin_simulate(p, z, ts, 4.0, Vector::Zero(1));
    for (double x : rest.voltage) {
        CHECK(x == 4.0);
    }
    CHECK(rest.stable);

    const auto i1 = paper_pulses(20.0);
    std::vector<double> i2(i1.size()), sum(i1.size());
    for (std::size_t k = 0; k < i1.size(); ++k) {
        i2[k] = 0.3 * std::sin(0.01 * static_cast<double>(k));
        sum[k] = i1[k] + i2[k];
    }
    const auto va = thevenin_simulate(p, i1.values(), ts, 0.0, Vector::Zero(1)).voltage;
    const auto vb = thevenin_simulate(p, i2, ts, 0.0, Vector::Zero(1)).voltage;
    const auto vs = thevenin_simulate(p, sum, ts, 0.0, Vector::Zero(1)).voltage;
    for (std::size_t k = 0; k < sum.size(); ++k) {
        REQUIRE(vs[k] == Approx(va[k] + vb[k]).margin(1e-12));
    }

    auto unstable = p;
    unstable.l_gain(0) = 0.9;
    CHECK_FALSE(thevenin_simulate(unstable, z, ts, 4.0, Vector::Zero(1)).stable);
}

TEST_CASE("extract_rc") {
    SECTION("order 1 construct then extract") {
        const std::vector<RcPair> rc{{0.0153, 531.69}};
        const auto [a, b] = rc_canonical(rc, ts);
        const auto ex = extract_rc(a, b, RowVector::Ones(1), ts);
        REQUIRE(ex.valid);
        CHECK(ex.pairs[0].r == Approx(0.0153).epsilon(1e-9));
        CHECK(ex.pairs[0].c == Approx(531.69).epsilon(1e-9));
    }
    SECTION("order 2 comes back sorted by time constant") {
        const std::vector<RcPair> rc{{0.0063, 5.7168}, {0.0183, 211.17}};
        const auto [a, b] = rc_canonical(rc, ts);
        RowVector c = RowVector::Zero(2);
        c(0) = 1.0;
        const auto ex = extract_rc(a, b, c, ts);
        REQUIRE(ex.valid);
        REQUIRE(ex.pairs.size() == 2);
        CHECK(ex.pairs[0].tau() > ex.pairs[1].tau());
        CHECK(ex.pairs[0].r == Approx(0.0183).epsilon(1e-8));
        CHECK(ex.pairs[0].c == Approx(211.17).epsilon(1e-8));
        CHECK(ex.pairs[1].r == Approx(0.0063).epsilon(1e-8));
        CHECK(ex.pairs[1].c == Approx(5.7168).epsilon(1e-8));
    }
    SECTION("integrator and complex poles are not RC pairs") {
        const auto integ = extract_rc(Matrix::Ones(1, 1), Vector::Ones(1), RowVector::Ones(1), ts);
        CHECK_FALSE(integ.valid);
        Matrix rot(2, 2);
        rot << 0.8, 1.0, -0.5, 0.0;
        RowVector c = RowVector::Zero(2);
        c(0) = 1.0;
        const auto osc = extract_rc(rot, Vector::Ones(2), c, ts);
        CHECK_FALSE(osc.valid);
        CHECK(osc.poles.size() == 2);
    }
}

TEST_CASE("thevenin_identify round trips") {
    SECTION("order 1") {
        const auto i = paper_pulses(400.0);
        const auto plant = m1_plant();
        const auto v = simulate(plant, i.values());
        const DischargeRecord rec(i, SampledSignal(v, ts));
        const auto id = thevenin_identify(rec, 1, SegmentPlan::single(i.size()), ObserverGrid::defaults(1));
        const auto& p = id.model.segments[0];
        CHECK(p.ocv0 == Approx(4.165).epsilon(1e-4));
        CHECK(p.c0() == Approx(2439.3).epsilon(1e-4));
        CHECK(p.r0 == Approx(0.1206).epsilon(1e-4));
        const auto rc = extract_rc(p, ts);
        REQUIRE(rc.valid);
        CHECK(rc.pairs[0].r == Approx(0.0153).epsilon(1e-4));
        CHECK(rc.pairs[0].c == Approx(531.69).epsilon(1e-4));
        CHECK(id.reports[0].monotone);
    }

    SECTION("observer choice does not change the simulated voltage") {
        const auto i = paper_pulses(100.0);
        const auto plant = m2_plant();
        const auto v = simulate(plant, i.values());
        const auto f1 = estimate_segment1(i.values(), v, ts, ObserverMatrix::from_eigenvalues({Complex(0.9, 0), Complex(0.2, 0)}));
        const auto f2 = estimate_segment1(i.values(), v, ts, ObserverMatrix::from_eigenvalues({std::polar(0.5, 0.5), std::polar(0.5, -0.5)}));
        const auto s1 = thevenin_simulate(f1.params, i.values(), ts, f1.params.ocv0, f1.params.x0).voltage;
        const auto s2 = thevenin_simulate(f2.params, i.values(), ts, f2.params.ocv0, f2.params.x0).voltage;
        double acc = 0.0;
        for (std::size_t k = 0; k < s1.size(); ++k) {
            acc += (s1[k] - s2[k]) * (s1[k] - s2[k]);
        }
        CHECK(std::sqrt(acc / static_cast<double>(s1.size())) < 1e-6);
    }
}
