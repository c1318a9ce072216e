#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mvsim/error.hpp"
#include "mvsim/experiments.hpp"
#include "mvsim/parallel.hpp"

using namespace mvsim;

namespace {

std::string config_error(const std::string& text) {
    try {
        parse_run_config_text(text, "cfg.yaml");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

// Small and fast: slow-only model, few particles, short horizon.
RunConfig tiny(const std::string& model = "slow-only-test") {
    RunConfig c;
    c.model = model;
    c.particles = 40;
    c.replicas = 3;
    c.horizon = 0.25;
    c.ladder = {0.25, 0.125, 0.0625, 0.03125};
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(RunConfig, MinimalFileGetsDefaults) {
    const auto c = parse_run_config_text("model: reference\n");
    const RunConfig d;
    EXPECT_EQ(c.model, "reference");
    EXPECT_EQ(c.particles, d.particles);
    EXPECT_EQ(c.replicas, d.replicas);
    EXPECT_EQ(c.ladder, d.ladder);
    EXPECT_EQ(c.to_json(), d.to_json());
    EXPECT_EQ(parse_run_config_text("").to_json(), d.to_json());
}

TEST(RunConfig, ShortLadderIsRejected) {
    const auto msg = config_error("ladder: [0.5, 0.25, 0.125]\n");
    EXPECT_NE(msg.find("ladder length >= 4"), std::string::npos) << msg;
    EXPECT_NE(msg.find("cfg.yaml:1:"), std::string::npos) << msg;
}

TEST(RunConfig, EpsilonOutsideUnitIntervalIsRejected) {
    EXPECT_NE(config_error("ladder: [1.5, 0.5, 0.25, 0.125]\n").find("(0,1)"), std::string::npos);
    EXPECT_NE(config_error("sim: {epsilon: 1.5}\n").find("(0,1)"), std::string::npos);
    EXPECT_NE(config_error("ladder: [0.5, 0.5, 0.25, 0.125]\n").find("distinct"), std::string::npos);
}

TEST(RunConfig, UnknownKeysReportTheirLine) {
    const auto msg = config_error("model: reference\nsim:\n  particles: 10\n  partciles: 20\n");
    EXPECT_NE(msg.find("cfg.yaml:4:3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("partciles"), std::string::npos) << msg;
    EXPECT_NE(config_error("colour: blue\n").find("unknown key 'colour'"), std::string::npos);
    EXPECT_NE(config_error("sim: {particles: many}\n").find("wrong type"), std::string::npos);
    EXPECT_NE(config_error("model: nope\n").find("nope"), std::string::npos);
}

TEST(RunConfig, LadderIsSortedDescending) {
    const auto c = parse_run_config_text("ladder: [0.125, 0.5, 0.0625, 0.25]\nparams: {k: 0.05}\n");
    EXPECT_EQ(c.ladder, (std::vector<double>{0.5, 0.25, 0.125, 0.0625}));
    EXPECT_DOUBLE_EQ(c.params.at("k"), 0.05);
}

TEST(RunConfig, DefaultYamlRoundTrips) {
    const auto text = default_config_yaml();
    EXPECT_EQ(parse_run_config_text(text).to_json(), RunConfig{}.to_json());
}

TEST(SlopeFit, RescalingShiftsOnlyTheIntercept) {
    const std::vector<double> eps{0.5, 0.25, 0.125, 0.0625, 0.03125};
    std::vector<double> err{0.31, 0.17, 0.07, 0.041, 0.018}, scaled;
    for (double e : err) scaled.push_back(e * 8.0);  // a power of two keeps the logs exact
    const auto a = fit_log_slope(eps, err);
    const auto b = fit_log_slope(eps, scaled);
    EXPECT_NEAR(a.slope, b.slope, 1e-13);
    EXPECT_NEAR(a.ci[1] - a.ci[0], b.ci[1] - b.ci[0], 1e-13);
    EXPECT_NEAR(b.intercept - a.intercept, std::log(8.0), 1e-12);
    EXPECT_LE(a.ci[0], a.slope);
    EXPECT_GE(a.ci[1], a.slope);
}

TEST(SlopeFit, ExactPowerLawAndStudentInterval) {
    const std::vector<double> x{1, 2, 4, 8};
    std::vector<double> y;
    for (double v : x) y.push_back(3 * std::pow(v, 1.5));
    const auto f = fit_log_slope(x, y);
    EXPECT_NEAR(f.slope, 1.5, 1e-12);
    EXPECT_NEAR(f.ci[1] - f.ci[0], 0.0, 1e-9);
    // Scipy: slope 0.7, stderr 0.1, t_{0.975, 2} = 4.302652729911275.
    const std::vector<double> lx{1, 2, 3, 4};
    std::vector<double> ly{std::exp(0.0), std::exp(0.9), std::exp(1.2), std::exp(2.1)};
    std::vector<double> ex;
    for (double v : lx) ex.push_back(std::exp(v));
    const auto g = fit_log_slope(ex, ly);
    EXPECT_NEAR(g.slope, 0.66, 1e-12);
    const double se = std::sqrt((0.0036 + 0.0324 + 0.0324 + 0.0036) / 2.0 / 5.0);
    EXPECT_NEAR(g.ci[1] - g.slope, 4.302652729911275 * se, 1e-9);
    EXPECT_THROW(fit_log_slope(std::vector<double>{1, 2}, std::vector<double>{1, 2}), EstimationError);
    EXPECT_THROW(fit_log_slope(x, std::vector<double>{1, 0, 2, 3}), EstimationError);
}

TEST(RateReport, FlagsAndOrdering) {
    auto r = make_rate_report("s", "l", {{0.1, 1e-3, 1e-4, 4}, {0.4, 4e-3, 1e-4, 4}, {0.2, 2e-3, 1e-4, 4}},
                              4, 7, 1e-12);
    EXPECT_EQ(r.ladder.front().epsilon, 0.4);
    EXPECT_NEAR(r.fit.slope, 1.0, 1e-12);
    EXPECT_FALSE(r.noise_dominated);
    EXPECT_FALSE(r.exact);
    auto noisy = make_rate_report("s", "l", {{0.4, 4e-3, 2e-3, 4}, {0.2, 2e-3, 1e-4, 4}, {0.1, 1e-3, 1e-4, 4}},
                                  4, 7, 1e-12);
    EXPECT_TRUE(noisy.noise_dominated);
    auto exact = make_rate_report("s", "l", {{0.4, 0, 0, 4}, {0.2, 1e-30, 0, 4}, {0.1, 0, 0, 4}}, 4, 7, 1e-24);
    EXPECT_TRUE(exact.exact);
    EXPECT_TRUE(std::isnan(exact.fit.slope));
    const auto j = exact.to_json();
    EXPECT_TRUE(j["slope"].is_null());
    EXPECT_EQ(j["flags"][0], "exact averaging");
    EXPECT_THROW(make_rate_report("s", "l", {{0.4, 1, 0, 4}, {0.2, 0, 0, 4}, {0.1, 1, 0, 4}}, 4, 7, 1e-24),
                 EstimationError);
}

TEST(Kendall, MatchesReferenceValues) {
    // Perfectly increasing: tau 1, exact p = 1/n!.
    const std::vector<double> x{1, 2, 3, 4, 5, 6};
    const auto inc = kendall_tau(x, std::vector<double>{1, 2, 3, 4, 5, 6});
    EXPECT_DOUBLE_EQ(inc.tau, 1.0);
    EXPECT_TRUE(inc.exact);
    EXPECT_NEAR(inc.p_positive, 1.0 / 720, 1e-15);
    EXPECT_DOUBLE_EQ(inc.p_negative, 1.0);
    // scipy.stats.kendalltau, exact two-sided p.
    const auto mid = kendall_tau(x, std::vector<double>{3, 1, 2, 6, 5, 4});
    EXPECT_NEAR(mid.tau, 1.0 / 3, 1e-12);
    EXPECT_NEAR(2 * mid.p_positive, 0.46944444444444444, 1e-12);
    const auto high = kendall_tau(x, std::vector<double>{2, 1, 3, 4, 6, 5});
    EXPECT_NEAR(high.tau, 11.0 / 15, 1e-12);
    EXPECT_NEAR(2 * high.p_positive, 0.05555555555555555, 1e-12);
    // Constant series: no trend.
    const auto flat = kendall_tau(x, std::vector<double>(6, 2.0));
    EXPECT_EQ(flat.tau, 0.0);
    EXPECT_EQ(flat.p_negative, 1.0);
    // Large n falls back to the normal approximation.
    std::vector<double> bx, by;
    for (int i = 0; i < 30; ++i) {
        bx.push_back(i);
        by.push_back(-i + 3 * std::sin(i));
    }
    const auto big = kendall_tau(bx, by);
    EXPECT_FALSE(big.exact);
    EXPECT_LT(big.tau, -0.5);
    EXPECT_LT(big.p_negative, 1e-4);
}

TEST(Studies, StrongRateReportsExactAveraging) {
    const auto reports = strong_rate_study(tiny());
    ASSERT_EQ(reports.size(), 2u);
    for (const auto& r : reports) {
        EXPECT_TRUE(r.exact) << r.label;
        for (const auto& p : r.ladder) EXPECT_LE(p.error, 1e-24);
    }
}

TEST(Studies, HigherMomentSlopeDoublesOnSamePaths) {
    auto c = tiny("reference");
    c.particles = 100;
    c.replicas = 2;
    c.horizon = 0.5;
    c.invariant_particles = 64;
    c.grid_nodes = 64;
    const auto reports = strong_rate_study(c);
    ASSERT_EQ(reports.size(), 2u);
    EXPECT_FALSE(reports[0].exact);
    // Errors decrease with epsilon and p=4 decays about twice as fast.
    for (std::size_t i = 0; i + 1 < reports[0].ladder.size(); ++i)
        EXPECT_LT(reports[0].ladder[i + 1].error, reports[0].ladder[i].error);
    EXPECT_NEAR(reports[1].fit.slope / reports[0].fit.slope, 2.0, 0.35);
}

TEST(Studies, CltRateVanishesWithoutFluctuations) {
    auto c = tiny();
    c.test_functions = {"tanh", "cos", "constant"};
    c.upsilon_atoms = 4;
    c.upsilon_replicas = 2;
    const auto reports = clt_weak_rate_study(c);
    ASSERT_EQ(reports.size(), 3u);
    for (const auto& r : reports) {
        EXPECT_TRUE(r.exact) << r.label;
        EXPECT_TRUE(r.details["monotone"].get<bool>());
        for (const auto& p : r.ladder) EXPECT_LE(p.error, 1e-11);
    }
}

TEST(Studies, ConstantTestFunctionGivesZeroExactly) {
    auto c = tiny("reference");
    c.particles = 30;
    c.replicas = 2;
    c.horizon = 1.0 / 16;
    c.test_functions = {"constant"};
    c.invariant_particles = 32;
    c.grid_nodes = 32;
    c.upsilon_nodes = 2;
    c.upsilon_atoms = 4;
    c.upsilon_replicas = 2;
    const auto reports = clt_weak_rate_study(c);
    for (const auto& p : reports[0].ladder) EXPECT_EQ(p.error, 0.0);
}

TEST(Studies, FluctuationOfZeroIsZero) {
    auto c = tiny("reference");
    c.fluctuation_functional = "zero";
    c.invariant_particles = 32;
    const auto r = fluctuation_study(c);
    EXPECT_TRUE(r.exact);
    for (const auto& p : r.ladder) EXPECT_EQ(p.error, 0.0);
}

TEST(Studies, UncenteredFunctionalIsRejected) {
    auto c = tiny("reference");
    c.invariant_particles = 32;
    FluctuationFunctional g;
    g.raw.bind = [](const EmpiricalMeasure&, const EmpiricalMeasure&) -> BoundField {
        return [](std::span<const double>, std::span<const double> y, std::span<double> out) {
            out[0] = std::cos(y[0]);  // about 1 under the frozen law
        };
    };
    g.center = false;
    EXPECT_THROW(fluctuation_study(c, g), ConfigError);
    g.center = true;
    EXPECT_NO_THROW(fluctuation_study(c, g));
}

TEST(Studies, FluctuationSpreadIsStableAcrossReplicaCounts) {
    auto c = tiny("reference");
    c.particles = 20;
    c.horizon = 0.125;
    c.invariant_particles = 32;
    c.grid_nodes = 32;
    c.ladder = {0.5, 0.25, 0.125, 0.0625};
    c.replicas = 16;
    const auto few = fluctuation_study(c);
    c.replicas = 32;
    const auto many = fluctuation_study(c);
    for (std::size_t e = 0; e < c.ladder.size(); ++e) {
        // Per-replica spread, not the stderr, should not depend on R.
        const double sd_few = few.ladder[e].stderr_ * std::sqrt(16.0);
        const double sd_many = many.ladder[e].stderr_ * std::sqrt(32.0);
        EXPECT_GT(sd_few, 0.0);
        EXPECT_GT(sd_many / sd_few, 0.5);
        EXPECT_LT(sd_many / sd_few, 2.0);
        EXPECT_LT(many.ladder[e].stderr_, few.ladder[e].stderr_);
    }
    EXPECT_LE(few.details["centering_residual"].get<double>(), 1e-6);
}

TEST(Studies, MomentsOfDecoupledFastFreeModelAreFlat) {
    auto c = tiny();
    const auto t = moment_uniformity_study(c);
    // X does not see epsilon at all here.
    const auto& slow = t.statistics[0];
    for (double v : slow.mean) EXPECT_EQ(v, slow.mean.front());
    EXPECT_FALSE(slow.growth);
    EXPECT_TRUE(t.failures.empty()) << t.failures.front();
}

TEST(Output, AtomicWriteAndEnvelope) {
    const auto dir = std::filesystem::temp_directory_path() / "mvsim_out_test";
    std::filesystem::remove_all(dir);
    RunConfig c;
    c.seed = 42;
    const auto r = make_rate_report("strong-rate", "p=2", {{0.4, 4e-3, 1e-4, 4}, {0.2, 2e-3, 1e-4, 4},
                                                           {0.1, 1e-3, 1e-4, 4}}, 4, 42, 1e-24);
    const std::vector<RateReport> reports{r};
    write_rate_outputs(dir.string(), "strong-rate", c, reports);
    const auto j = nlohmann::json::parse(slurp(dir / "report.json"));
    EXPECT_EQ(j["schema_version"], kReportSchemaVersion);
    EXPECT_EQ(j["seed"], 42);
    EXPECT_EQ(j["config"], c.to_json());
    EXPECT_EQ(j["result"]["reports"][0]["label"], "p=2");
    const auto csv = slurp(dir / "ladder.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "epsilon,error,stderr,replicas");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    EXPECT_TRUE(std::filesystem::exists(dir / "ladder_p_2.csv"));
    EXPECT_NE(slurp(dir / "plot.gp").find("ladder_p_2.csv"), std::string::npos);
    for (const auto& e : std::filesystem::directory_iterator(dir))
        EXPECT_EQ(e.path().extension() == ".tmp", false);
    std::filesystem::remove_all(dir);
}

TEST(Determinism, StudiesIgnoreThreadCount) {
    auto c = tiny("reference");
    c.particles = 30;
    c.replicas = 3;
    c.horizon = 0.125;
    c.invariant_particles = 32;
    c.grid_nodes = 32;
    std::vector<RateReport> one, many;
    with_threads(1, [&] { one = strong_rate_study(c); });
    with_threads(4, [&] { many = strong_rate_study(c); });
    for (std::size_t k = 0; k < one.size(); ++k)
        for (std::size_t e = 0; e < one[k].ladder.size(); ++e)
            EXPECT_EQ(one[k].ladder[e].error, many[k].ladder[e].error);
}
