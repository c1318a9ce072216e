#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mvsim/error.hpp"
#include "mvsim/frozen.hpp"

using namespace mvsim;

namespace {

const EmpiricalMeasure kDelta0 = EmpiricalMeasure::uniform({0.0}, 1);
const EmpiricalMeasure kDelta1 = EmpiricalMeasure::uniform({1.0}, 1);

std::vector<double> pt(double v) { return {v}; }

double second_moment(const std::vector<double>& v) {
    double s = 0;
    for (double e : v) s += e * e;
    return s / v.size();
}

// Stationary second moment of the Euler chain y' = y - k h y + (m y + c) sqrt(h) z
// with a centred mean field.
double euler_stationary_m2(double k, double m, double c, double h) {
    return c * c / (2 * k - k * k * h - m * m);
}

}  // namespace

TEST(SimulateFrozen, ExampleCollapsesAtDeltaZero) {
    const auto model = make_model("reference");
    const auto path = simulate_frozen(*model, kDelta0, FrozenInit::standard(1), 200.0);
    EXPECT_NEAR(second_moment(path.y_xi.front()), 1.0, 0.25);
    // Mean-square decay rate 2k - m^2 over t = 200: factor e^{-16.6}.
    EXPECT_LT(second_moment(path.y_xi.back()), 1e-6);
    EXPECT_LT(second_moment(path.y_y0.back()), 1e-6);
}

TEST(SimulateFrozen, OuStationaryVariance) {
    OuTestParams o;
    o.k = 2.0;
    o.sigma = 0.5;
    const auto model = build_ou_test_model(o);
    FrozenOptions opts;
    opts.n_particles = 4000;
    const auto path = simulate_frozen(*model, kDelta0, FrozenInit::standard(1), 5.0, opts);
    const double h = opts.resolve_dt(*model);
    const double expected = euler_stationary_m2(o.k, 0.0, o.sigma, h);
    EXPECT_NEAR(expected, o.sigma * o.sigma / (2 * o.k), 0.01 * expected);
    EXPECT_NEAR(second_moment(path.y_xi.back()), expected, 0.1 * expected);
    // The y0 cloud is driven by the same W and has forgotten its start.
    EXPECT_NEAR(second_moment(path.y_y0.back()), expected, 0.1 * expected);
}

TEST(SimulateFrozen, ZeroDynamicsAreConstant) {
    const auto model = build_functional_model({});
    FrozenOptions opts;
    opts.dt = 0.1;
    opts.record_every = 3;
    const auto path = simulate_frozen(*model, kDelta0, FrozenInit::standard(1), 1.0, opts);
    ASSERT_EQ(path.times.size(), 5u);
    EXPECT_DOUBLE_EQ(path.times.back(), 1.0);
    EXPECT_EQ(path.y_xi.front(), path.y_xi.back());
    EXPECT_EQ(path.y_y0.back(), std::vector<double>(256, 0.0));
}

TEST(SimulateFrozen, AntitheticHalvesMirror) {
    OuTestParams o;
    const auto model = build_ou_test_model(o);
    FrozenOptions opts;
    opts.n_particles = 10;
    opts.antithetic = true;
    const auto path = simulate_frozen(*model, kDelta0, FrozenInit::standard(1), 1.0, opts);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(path.y_xi.back()[i], -path.y_xi.back()[i + 5]);
}

TEST(SimulateFrozen, RejectsBadInput) {
    const auto model = make_model("reference");
    EXPECT_THROW(simulate_frozen(*model, kDelta0, FrozenInit::at_point({0, 0}), 1.0), DimensionError);
    EXPECT_THROW(simulate_frozen(*model, EmpiricalMeasure::uniform({0, 0}, 2),
                                 FrozenInit::standard(1), 1.0),
                 DimensionError);
    EXPECT_THROW(simulate_frozen(*model, kDelta0, FrozenInit::standard(1), -1.0), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Mixing, OuRateIsTwiceTheDrift) {
    OuTestParams o;
    o.k = 0.5;
    const auto model = build_ou_test_model(o);
    const auto r = mixing_rate(*model, kDelta0, pt(-1), pt(1), 10.0);
    EXPECT_NEAR(r.rate, 2 * o.k, 0.1 * 2 * o.k);
    EXPECT_GT(r.r_squared, 0.999);
    EXPECT_TRUE(std::isnan(r.guaranteed_rate));
}

TEST(Mixing, IdenticalStartsAreAnError) {
    const auto model = build_ou_test_model({});
    EXPECT_THROW(mixing_rate(*model, kDelta0, pt(0.5), pt(0.5), 5.0), EstimationError);
}

TEST(Mixing, NonContractingModelIsAnError) {
    FunctionalModelSpec spec;
    spec.h2 = [](const EmpiricalMeasure&, std::span<const double> y, const EmpiricalMeasure&,
                 std::span<double> out) { out[0] = 0.3 * y[0]; };
    const auto model = build_functional_model(spec);
    try {
        mixing_rate(*model, kDelta0, pt(-1), pt(1), 5.0);
        FAIL() << "expected EstimationError";
    } catch (const EstimationError& e) {
        EXPECT_NE(std::string(e.what()).find("not contracting"), std::string::npos);
    }
}

TEST(Mixing, ExampleBeatsGuaranteedRate) {
    const auto model = make_model("reference");
    SamplerOptions so;
    so.common_mu = true;
    const auto probe = probe_dissipativity(*model, gaussian_pair_sampler(model->dims(), so), 400);
    MixingOptions mo;
    mo.probe = &probe;
    const auto r = mixing_rate(*model, kDelta1, pt(-1), pt(1), 8.0 / model->fast_rate(), mo);
    EXPECT_NEAR(r.guaranteed_rate, probe.beta1 - probe.beta2 - probe.lipschitz_h2_gamma2, 1e-15);
    EXPECT_GT(r.guaranteed_rate, 0.0);
    EXPECT_TRUE(r.meets_guarantee) << r.rate << " < " << r.guaranteed_rate;
    EXPECT_GE(r.rate, r.guaranteed_rate);
}

// ---------------------------------------------------------------------------

TEST(Invariant, ExampleSecondMomentAtDeltaOne) {
    const auto p = ReferenceParams::for_moment_order(3);
    const auto model = build_reference_model(p);
    InvariantOptions opts;
    opts.samples_per_particle = 16;
    const auto inv = estimate_invariant(*model, kDelta1, opts);
    const double c = p.theta * std::numbers::pi / 4;
    const double h = FrozenOptions{}.resolve_dt(*model);
    const double oracle = euler_stationary_m2(p.k, p.m, c, h);
    const double continuum = c * c / (2 * p.k - p.m * p.m);
    EXPECT_NEAR(continuum, 2.0086e-4, 1e-7);
    EXPECT_NEAR(oracle / continuum, 1.0, 0.01);
    EXPECT_NEAR(inv.second_moment, oracle, 4 * inv.second_moment_stderr + 1e-12);
    EXPECT_LT(inv.second_moment_stderr, 0.1 * oracle);
    EXPECT_NEAR(inv.mean[0], 0.0, 4 * inv.mean_stderr[0] + 1e-12);
    EXPECT_GE(inv.eta.size(), 100u);
    EXPECT_LT(inv.burn_in, inv.horizon);
    EXPECT_NEAR(inv.burn_in, 5 / inv.rate, 2 * h);
}

TEST(Invariant, ExampleCollapsesAtDeltaZero) {
    const auto model = make_model("reference");
    const auto inv = estimate_invariant(*model, kDelta0);
    EXPECT_LT(inv.eta.second_moment(), 1e-6);
}

TEST(Invariant, OuSecondMomentIsHalf) {
    const auto model = build_ou_test_model({});
    InvariantOptions opts;
    opts.samples_per_particle = 32;
    const auto inv = estimate_invariant(*model, kDelta0, opts);
    const double oracle = euler_stationary_m2(1.0, 0.0, 1.0, 0.01);
    EXPECT_NEAR(oracle, 0.5, 0.003);
    EXPECT_NEAR(inv.second_moment, oracle, 4 * inv.second_moment_stderr);
    EXPECT_NEAR(inv.eta.second_moment(), inv.second_moment, 1e-12);
}

TEST(Invariant, InvariantUnderRestart) {
    const auto model = build_ou_test_model({});
    InvariantOptions opts;
    opts.samples_per_particle = 32;
    const auto first = estimate_invariant(*model, kDelta0, opts);

    // Restart each particle from an atom of the first estimate.
    const auto eta = first.eta;
    InvariantOptions again = opts;
    again.seed = 99;
    again.rate = first.rate;
    again.burn_in_rates = 0.0;
    again.init = FrozenInit{[eta](rng::NormalStream& rs, std::span<double> out) {
                                const auto j = static_cast<std::size_t>(rs.uniform() * eta.size());
                                out[0] = eta.atom(std::min(j, eta.size() - 1))[0];
                            },
                            {0.0}};
    const auto second = estimate_invariant(*model, kDelta0, again);
    const double se_m = std::hypot(first.mean_stderr[0], second.mean_stderr[0]);
    const double se_2 = std::hypot(first.second_moment_stderr, second.second_moment_stderr);
    EXPECT_LT(std::abs(first.mean[0] - second.mean[0]), 3 * se_m);
    EXPECT_LT(std::abs(first.second_moment - second.second_moment), 3 * se_2);
}

TEST(Invariant, NonStationarityIsDetected) {
    const auto model = build_ou_test_model({});
    InvariantOptions opts;
    opts.rate = 100.0;  // far too optimistic: burn-in 0.05 from y = 50
    opts.init = FrozenInit::at_point({50.0});
    try {
        estimate_invariant(*model, kDelta0, opts);
        FAIL() << "expected EstimationError";
    } catch (const EstimationError& e) {
        EXPECT_NE(std::string(e.what()).find("non-stationary"), std::string::npos);
    }
}

TEST(Invariant, DeterministicForSeed) {
    const auto model = make_model("reference");
    const auto a = estimate_invariant(*model, kDelta1);
    const auto b = estimate_invariant(*model, kDelta1);
    EXPECT_EQ(a.eta.atoms(), b.eta.atoms());
}

// ---------------------------------------------------------------------------

TEST(Hbar, ExampleAtDeltaZeroIsSinPlusTwo) {
    const auto model = make_model("reference");
    const auto inv = estimate_invariant(*model, kDelta0);
    for (double x : {-2.0, 0.0, 0.7, 3.0}) {
        EXPECT_NEAR(estimate_hbar(*model, pt(x), kDelta0, inv)[0], std::sin(x) + 2.0, 1e-6);
    }
}

TEST(Hbar, FastIndependentDriftIsExact) {
    const auto model = make_model("slow-only-test");
    const auto mu = EmpiricalMeasure::uniform({0.2, -0.4, 1.1}, 1);
    const auto inv = estimate_invariant(*model, mu);
    for (double x : {-1.0, 0.5}) {
        const auto h = model->h1(pt(x), mu, pt(0.0), inv.eta);
        EXPECT_NEAR(estimate_hbar(*model, pt(x), mu, inv)[0], h[0], 1e-13);
        EXPECT_DOUBLE_EQ(h[0], std::sin(x) + mu.mean()[0]);
    }
}

TEST(Hbar, MatchesDirectAverage) {
    const auto model = make_model("reference");
    const auto mu = EmpiricalMeasure::uniform({0.5, 1.5}, 1);
    const auto inv = estimate_invariant(*model, mu);
    const double x = 0.3;
    double cos_mean = 0;
    for (std::size_t j = 0; j < inv.eta.size(); ++j) cos_mean += std::cos(inv.eta.atom(j)[0]);
    cos_mean /= inv.eta.size();
    // sin x + mean(mu) + E cos(y) + int cos(y) eta
    EXPECT_NEAR(estimate_hbar(*model, pt(x), mu, inv)[0], std::sin(x) + 1.0 + 2 * cos_mean, 1e-13);
    EXPECT_EQ(estimate_hbar(*model, pt(x), mu, inv), estimate_hbar(*model, pt(x), mu, inv));
}

TEST(Hbar, LipschitzOverSampledPairs) {
    const auto model = make_model("reference");
    const auto sampler = gaussian_pair_sampler(model->dims(), {.seed = 5, .atoms = 16});
    double worst = 0;
    for (std::size_t i = 0; i < 12; ++i) {
        const auto pair = sampler(i);
        const auto& a = pair.first;
        const auto& b = pair.second;
        // Common random numbers: both invariant estimates share the seed.
        const auto ia = estimate_invariant(*model, a.mu);
        const auto ib = estimate_invariant(*model, b.mu);
        const double dh = estimate_hbar(*model, a.x, a.mu, ia)[0] - estimate_hbar(*model, b.x, b.mu, ib)[0];
        const double dx = a.x[0] - b.x[0];
        const double w = wasserstein2(a.mu, b.mu);
        const double denom = dx * dx + w * w;
        if (denom > 1e-12) worst = std::max(worst, dh * dh / denom);
    }
    // |sin'| <= 1, mean is 1-Lipschitz in W2, the cos terms move with eta only
    // through the theta-scaled offset: (1 + 1 + small)^2 / 2-ish.
    EXPECT_GT(worst, 0.0);
    EXPECT_LT(worst, 4.0);
}

// ---------------------------------------------------------------------------

TEST(Centering, OwnMeanVanishes) {
    const auto model = make_model("reference");
    const auto mu = EmpiricalMeasure::uniform({-0.3, 0.8}, 1);
    const auto inv = estimate_invariant(*model, mu);
    for (double x : {-1.0, 0.0, 2.5}) EXPECT_LT(centering_check(*model, pt(x), mu, inv), 1e-12);
}

TEST(Centering, UserFunctionals) {
    const auto model = make_model("reference");
    const auto inv = estimate_invariant(*model, kDelta1);
    SlowFunctional zero;
    zero.bind = [](const EmpiricalMeasure&, const EmpiricalMeasure&) -> BoundField {
        return [](std::span<const double>, std::span<const double>, std::span<double> out) {
            out[0] = 0.0;
        };
    };
    EXPECT_EQ(centering_residual(zero, pt(0), kDelta1, inv), 0.0);

    SlowFunctional centred;
    centred.bind = [](const EmpiricalMeasure&, const EmpiricalMeasure& nu) -> BoundField {
        const double m = nu.mean()[0];
        return [m](std::span<const double>, std::span<const double> y, std::span<double> out) {
            out[0] = y[0] - m;
        };
    };
    EXPECT_LT(centering_residual(centred, pt(0), kDelta1, inv), 1e-12);
}

// ---------------------------------------------------------------------------

TEST(Fingerprint, ResolvesMicroShifts) {
    const auto a = EmpiricalMeasure::uniform({0.1, 0.2, 0.3}, 1);
    EXPECT_EQ(moment_fingerprint(a), moment_fingerprint(EmpiricalMeasure::uniform({0.3, 0.1, 0.2}, 1)));
    EXPECT_EQ(moment_fingerprint(a), moment_fingerprint(EmpiricalMeasure::uniform({0.1, 0.2, 0.3 + 1e-9}, 1)));
    EXPECT_NE(moment_fingerprint(a), moment_fingerprint(EmpiricalMeasure::uniform({0.1, 0.2, 0.31}, 1)));
    EXPECT_EQ(moment_fingerprint(EmpiricalMeasure::uniform({0, 0, 1, 1}, 2)).size(), 8u);
}

TEST(AveragedCache, InterpolatesDirectEstimate) {
    const auto model = make_model("reference");
    AveragedCache cache(model);
    const auto mu = EmpiricalMeasure::uniform({-0.5, 0.0, 0.5, 1.0}, 1);
    const auto map = cache.bind(mu);
    EXPECT_EQ(cache.builds(), 1u);
    EXPECT_GT(cache.rate(), 0.0);
    const auto inv = cache.invariant(mu);
    EXPECT_EQ(cache.builds(), 1u);
    for (double x : {-0.9, 0.123, 0.77, 1.4}) {
        double out = 0;
        map(pt(x), std::span<double>(&out, 1));
        const double direct = estimate_hbar(*model, pt(x), mu, *inv)[0];
        // Linear interpolation of sin over a grid of spacing ~5e-3.
        EXPECT_NEAR(out, direct, 5e-6);
    }
    // Off-grid falls back to the direct average.
    double far = 0;
    map(pt(40.0), std::span<double>(&far, 1));
    EXPECT_NEAR(far, estimate_hbar(*model, pt(40.0), mu, *inv)[0], 1e-13);

    cache.bind(EmpiricalMeasure::uniform({-0.5, 0.0, 0.5, 1.2}, 1));
    EXPECT_EQ(cache.builds(), 2u);
}
