#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mvsim/error.hpp"
#include "mvsim/model.hpp"

using namespace mvsim;

namespace {

const double kZero = 0.0;
const double kOne = 1.0;

EmpiricalMeasure delta(double v) { return EmpiricalMeasure::dirac({&v, 1}); }
std::vector<double> pt(double v) { return {v}; }

}  // namespace

TEST(ReferenceModel, ThirdOrderDefaults) {
    const auto p = ReferenceParams::for_moment_order(3);
    EXPECT_DOUBLE_EQ(p.k, 1.0 / 24);
    EXPECT_DOUBLE_EQ(p.lambda, 1.0 / 96);
    EXPECT_DOUBLE_EQ(p.m, 1.0 / 192);
    EXPECT_DOUBLE_EQ(p.theta, 1.0 / 192);
    EXPECT_GT(2 * p.k - p.m * p.m, 0.0);
}

TEST(ReferenceModel, PointValues) {
    const auto model = build_reference_model(ReferenceParams::for_moment_order(3));
    EXPECT_DOUBLE_EQ(model->h1(pt(0), delta(0), pt(0), delta(0))[0], 2.0);
    EXPECT_DOUBLE_EQ(model->gamma1(pt(0), delta(0))[0], 0.0);
    EXPECT_DOUBLE_EQ(model->h2(delta(0), pt(1), delta(0))[0], -1.0 / 24);
}

TEST(ReferenceModel, MatchesDirectFormulasOnClouds) {
    ReferenceParams p = ReferenceParams::for_moment_order(2, 1.3, 0.7, 2.1);
    const auto model = build_reference_model(p);
    const auto mu = EmpiricalMeasure::uniform({-0.4, 0.9, 2.5}, 1);
    const auto nu = EmpiricalMeasure::uniform({0.2, -1.1}, 1);
    const double x = 0.35, y = -0.8;
    double mx = 0, cq = 0, sx = 0, at = 0, my = 0;
    for (double a : {-0.4, 0.9, 2.5}) {
        mx += a / 3;
        sx += std::sin(x + a) / 3;
        at += std::atan(a) / 3;
    }
    for (double b : {0.2, -1.1}) {
        cq += std::cos(p.q * b) / 2;
        my += b / 2;
    }
    EXPECT_NEAR(model->h1(pt(x), mu, pt(y), nu)[0], std::sin(p.a * x) + mx + std::cos(p.b * y) + cq,
                1e-14);
    EXPECT_NEAR(model->gamma1(pt(x), mu)[0], sx, 1e-14);
    EXPECT_NEAR(model->h2(mu, pt(y), nu)[0], -p.k * y + p.lambda * my, 1e-15);
    EXPECT_NEAR(model->gamma2(mu, pt(y), nu)[0], p.m * y + p.theta * at, 1e-15);
}

TEST(ReferenceModel, RejectsNonPositiveParameters) {
    ReferenceParams p;
    p.k = 0.0;
    EXPECT_THROW(build_reference_model(p), ConfigError);
    p = ReferenceParams{};
    p.theta = -1.0;
    EXPECT_THROW(build_reference_model(p), ConfigError);
    EXPECT_THROW(ReferenceParams::for_moment_order(0), ConfigError);
}

TEST(ReferenceModelProperty, FastCoefficientsAffine) {
    // h2, gamma2 are affine in (y, int y nu, int arctan mu): evaluate at a
    // convex combination of two inputs whose measures are Diracs.
    const auto model = build_reference_model({});
    for (int t = 0; t < 50; ++t) {
        const double y1 = std::sin(t), y2 = std::cos(3.0 * t) * 2;
        const double n1 = 0.3 * t - 4, n2 = -0.1 * t;
        const double a1 = std::tan(0.01 * t), a2 = 0.5;  // arctan-values of the mu Diracs
        const double s = 0.25 + 0.01 * t;
        auto eval = [&](double y, double n, double a) {
            const auto mu = delta(std::tan(a));
            const auto nu = delta(n);
            return std::pair{model->h2(mu, pt(y), nu)[0], model->gamma2(mu, pt(y), nu)[0]};
        };
        const auto [h_1, g_1] = eval(y1, n1, a1);
        const auto [h_2, g_2] = eval(y2, n2, a2);
        const auto [h_c, g_c] = eval(s * y1 + (1 - s) * y2, s * n1 + (1 - s) * n2, s * a1 + (1 - s) * a2);
        EXPECT_NEAR(h_c, s * h_1 + (1 - s) * h_2, 1e-14);
        EXPECT_NEAR(g_c, s * g_1 + (1 - s) * g_2, 1e-14);
    }
}

TEST(ModelProperty, OutputDimensionsAndFinitenessOnFuzzedInputs) {
    for (const auto& name : registered_models()) {
        const auto model = make_model(name);
        const auto sampler = gaussian_pair_sampler(model->dims(), {.seed = 3, .atoms = 16});
        for (std::size_t i = 0; i < 40; ++i) {
            const auto pair = sampler(i);
            const auto& in = pair.first;
            const auto d = model->dims();
            EXPECT_EQ(model->h1(in.x, in.mu, in.y, in.nu).size(), d.n);
            EXPECT_EQ(model->gamma1(in.x, in.mu).size(), d.n * d.d1);
            EXPECT_EQ(model->h2(in.mu, in.y, in.nu).size(), d.m);
            EXPECT_EQ(model->gamma2(in.mu, in.y, in.nu).size(), d.m * d.d2);
        }
    }
}

TEST(Model, DimensionChecks) {
    const auto model = make_model("reference");
    const std::vector<double> two{1.0, 2.0};
    EXPECT_THROW(model->h1(two, delta(0), pt(0), delta(0)), DimensionError);
    EXPECT_THROW(model->h1(pt(0), EmpiricalMeasure::uniform(two, 2), pt(0), delta(0)),
                 DimensionError);
}

TEST(Registry, UnknownNamesAndKeys) {
    EXPECT_THROW(make_model("nope"), ConfigError);
    EXPECT_THROW(make_model("reference", {{"kk", 1.0}}), ConfigError);
    EXPECT_THROW(make_model("reference", {{"p", 2.5}}), ConfigError);
    const auto m = make_model("reference", {{"p", 2}});
    EXPECT_EQ(m->p(), 2);
    EXPECT_DOUBLE_EQ(m->h2(delta(0), pt(1), delta(0))[0], -1.0 / 16);
    const auto ou = make_model("ou-test", {{"k", 2.0}, {"sigma", 0.5}});
    EXPECT_DOUBLE_EQ(ou->h2(delta(0), pt(1), delta(0))[0], -2.0);
    EXPECT_DOUBLE_EQ(ou->gamma2(delta(0), pt(1), delta(0))[0], 0.5);
}

TEST(SlowOnlyModel, DropsFastTerms) {
    const auto model = make_model("slow-only-test");
    const auto nu = EmpiricalMeasure::uniform({3.0, -2.0}, 1);
    EXPECT_DOUBLE_EQ(model->h1(pt(0.5), delta(1.0), pt(4.0), nu)[0], std::sin(0.5) + 1.0);
}

TEST(FunctionalModel, DefaultsToZero) {
    FunctionalModelSpec spec;
    spec.h1 = [](auto x, const auto&, auto, const auto&, auto out) { out[0] = 2.0 * x[0]; };
    const auto model = build_functional_model(spec);
    EXPECT_DOUBLE_EQ(model->h1(pt(1.5), delta(0), pt(0), delta(0))[0], 3.0);
    EXPECT_DOUBLE_EQ(model->gamma2(delta(0), pt(1), delta(0))[0], 0.0);
}

TEST(FunctionalModel, NonFiniteOutputRejected) {
    FunctionalModelSpec spec;
    spec.h1 = [](auto x, const auto&, auto, const auto&, auto out) { out[0] = 1.0 / x[0]; };
    const auto model = build_functional_model(spec);
    EXPECT_THROW(model->h1(pt(0), delta(0), pt(0), delta(0)), NonFiniteError);
}

// ---------------------------------------------------------------------------

TEST(ProbeLipschitz, IdenticalPairsAreDegenerate) {
    const auto model = make_model("reference");
    const PairSampler same = [](std::size_t) {
        InputPoint a{pt(0.2), delta(0.1), pt(-0.3), delta(0.4)};
        return InputPair{a, a};
    };
    EXPECT_THROW(probe_lipschitz(*model, same, 5), EstimationError);
    const PairSampler mixed = [](std::size_t i) {
        InputPoint a{pt(0.2), delta(0.1), pt(-0.3), delta(0.4)};
        InputPoint b = a;
        if (i % 2) b.x = pt(1.2);
        return InputPair{a, b};
    };
    const auto r = probe_lipschitz(*model, mixed, 6);
    EXPECT_EQ(r.degenerate, 3u);
    EXPECT_EQ(r.pairs, 6u);
}

TEST(ProbeLipschitz, LinearModelQuotientIsOne) {
    FunctionalModelSpec spec;
    spec.h1 = [](auto x, const auto&, auto, const auto&, auto out) { out[0] = x[0]; };
    const auto model = build_functional_model(spec);
    SamplerOptions opts;
    opts.x_only = true;
    const auto r = probe_lipschitz(*model, gaussian_pair_sampler(model->dims(), opts), 100);
    EXPECT_NEAR(r.lipschitz_h1_gamma1, 1.0, 1e-12);
    EXPECT_GE(r.worst_ratio, 0.0);
}

TEST(ProbeLipschitz, ExampleBelowClosedFormConstant) {
    const auto p = ReferenceParams::for_moment_order(3);
    const auto model = build_reference_model(p);
    const double bound = std::max({2 * p.k * p.k + 2 * p.m * p.m, 2 * p.lambda * p.lambda,
                                   2 * p.theta * p.theta});
    const auto r = probe_lipschitz(*model, gaussian_pair_sampler(model->dims()), 400);
    EXPECT_LE(r.lipschitz_h2_gamma2, bound);
    EXPECT_GT(r.lipschitz_h2_gamma2, 0.0);

    // mu frozen, y-only variation: quotient is exactly k^2 + m^2.
    const PairSampler y_only = [](std::size_t i) {
        const auto mu = EmpiricalMeasure::uniform({0.3, -0.2}, 1);
        const auto nu = EmpiricalMeasure::uniform({1.0, 0.5}, 1);
        return InputPair{{pt(0), mu, pt(0.1 * i), nu}, {pt(0), mu, pt(-1.0 - 0.2 * i), nu}};
    };
    const auto ry = probe_lipschitz(*model, y_only, 10);
    EXPECT_NEAR(ry.lipschitz_h2_gamma2, p.k * p.k + p.m * p.m, 1e-15);
}

TEST(Dissipativity, FitRecoversKnownConstants) {
    // v = -2|dy|^2 + 0.5 W^2 exactly on every pair.
    const std::vector<double> a{1.0, 2.0, 0.5, 0.0, 3.0};
    const std::vector<double> b{0.0, 1.0, 2.0, 1.0, 0.5};
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) v[i] = -2.0 * a[i] + 0.5 * b[i];
    const auto [b1, b2] = fit_dissipativity_constants(a, b, v);
    EXPECT_NEAR(b1, 2.0, 1e-9);
    EXPECT_NEAR(b2, 0.5, 1e-9);
}

TEST(Dissipativity, IdenticalFastInputsGiveZero) {
    const auto model = make_model("reference");
    const PairSampler same_y = [](std::size_t i) {
        const auto mu = EmpiricalMeasure::uniform({0.3, -0.2}, 1);
        const auto nu = EmpiricalMeasure::uniform({1.0, 0.5}, 1);
        InputPoint a{pt(0), mu, pt(0.7), nu};
        InputPoint b{pt(0), mu, pt(i == 0 ? 0.7 : 1.7), nu};
        return InputPair{a, b};
    };
    const auto r = probe_dissipativity(*model, same_y, 2);
    EXPECT_EQ(r.degenerate, 1u);
}

TEST(Dissipativity, OuTestRecoversTwoK) {
    OuTestParams o;
    o.k = 0.2;
    const auto model = build_ou_test_model(o);
    SamplerOptions opts;
    opts.common_mu = true;
    const auto r = probe_dissipativity(*model, gaussian_pair_sampler(model->dims(), opts), 200);
    EXPECT_NEAR(r.beta1, 2 * o.k, 1e-9);
    EXPECT_NEAR(r.beta2, 0.0, 1e-9);
    EXPECT_NEAR(r.lipschitz_h2_gamma2, o.k * o.k, 1e-12);
    EXPECT_TRUE(r.pass);
}

TEST(Dissipativity, ExampleEqualNuBound) {
    const auto p = ReferenceParams::for_moment_order(3);
    const auto model = build_reference_model(p);
    SamplerOptions opts;
    opts.common_mu = true;
    opts.common_nu = true;
    const auto r = probe_dissipativity(*model, gaussian_pair_sampler(model->dims(), opts), 200);
    EXPECT_GE(r.beta1, 2 * p.k - (2 * p.p - 1) * p.m * p.m - p.lambda);
    EXPECT_NEAR(r.beta1, 2 * p.k - (2 * p.p - 1) * p.m * p.m, 1e-12);
}

TEST(Dissipativity, ExampleDefaultsPassAtOrderThree) {
    const auto model = make_model("reference");
    SamplerOptions opts;
    opts.common_mu = true;
    const auto r = probe_dissipativity(*model, gaussian_pair_sampler(model->dims(), opts), 400);
    EXPECT_EQ(r.p, 3);
    EXPECT_TRUE(r.pass) << "beta1=" << r.beta1 << " beta2=" << r.beta2
                        << " L=" << r.lipschitz_h2_gamma2;
    EXPECT_EQ(r.pass, r.beta1 - r.beta2 > 4.0 * r.p * r.lipschitz_h2_gamma2);
    EXPECT_NEAR(r.alpha1(), r.beta1 - 6 * r.lipschitz_h2_gamma2, 1e-15);
    EXPECT_NEAR(r.alpha2(), r.beta2 + 5 * r.lipschitz_h2_gamma2, 1e-15);
}

TEST(Dissipativity, AnyOrderOption) {
    // h2 = -0.1 y, gamma2 = 0.1 y: 0.2 - (2p-1)/100 > 4p/50 holds up to p=2.
    FunctionalModelSpec spec;
    spec.p = 4;
    spec.h2 = [](const auto&, auto y, const auto&, auto out) { out[0] = -0.1 * y[0]; };
    spec.gamma2 = [](const auto&, auto y, const auto&, auto out) { out[0] = 0.1 * y[0]; };
    const auto model = build_functional_model(spec);
    SamplerOptions opts;
    opts.common_mu = true;
    const auto sampler = gaussian_pair_sampler(model->dims(), opts);
    const auto exact = probe_dissipativity(*model, sampler, 100);
    EXPECT_FALSE(exact.pass);
    DissipativityOptions any;
    any.any_order_up_to_p = true;
    const auto relaxed = probe_dissipativity(*model, sampler, 100, any);
    EXPECT_TRUE(relaxed.pass);
    EXPECT_EQ(relaxed.p, 2);
}
