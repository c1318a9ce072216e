#include "mvsim/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "mvsim/error.hpp"
#include "mvsim/parallel.hpp"
#include "mvsim/stats.hpp"

namespace mvsim {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

// Mean and standard error over replicas; stderr is NaN for a single replica.
std::pair<double, double> replica_summary(std::span<const double> v) {
    const double m = sample_mean(v);
    return {m, v.size() > 1 ? standard_error(v) : kNaN};
}

}  // namespace

SlopeFit fit_log_slope(std::span<const double> x, std::span<const double> y, double level) {
    if (x.size() != y.size()) throw DimensionError("fit_log_slope: size mismatch");
    if (x.size() < 3) throw EstimationError("slope fit underdetermined: fewer than three points");
    std::vector<double> lx(x.size()), ly(y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0))
            throw EstimationError("slope fit underdetermined: non-positive value on the ladder");
        lx[i] = std::log(x[i]);
        ly[i] = std::log(y[i]);
    }
    const LinearFit lf = fit_line(lx, ly);
    SlopeFit out;
    out.slope = lf.slope;
    out.intercept = lf.intercept;
    out.r_squared = lf.r_squared;
    out.points = x.size();
    const boost::math::students_t dist(static_cast<double>(x.size() - 2));
    const double q = boost::math::quantile(boost::math::complement(dist, (1.0 - level) / 2.0));
    const double half = q * lf.slope_stderr;
    out.ci = {lf.slope - half, lf.slope + half};
    return out;
}

nlohmann::json RateReport::to_json() const {
    nlohmann::json j;
    j["study"] = study;
    j["label"] = label;
    auto& rows = j["ladder"] = nlohmann::json::array();
    for (const auto& p : ladder)
        rows.push_back({{"epsilon", p.epsilon},
                        {"error", p.error},
                        {"stderr", number_or_null(p.stderr_)},
                        {"replicas", p.replicas}});
    j["slope"] = number_or_null(fit.slope);
    j["intercept"] = number_or_null(fit.intercept);
    j["slope_ci"] = {number_or_null(fit.ci[0]), number_or_null(fit.ci[1])};
    j["r_squared"] = number_or_null(fit.r_squared);
    j["replicas"] = replicas;
    j["seed"] = seed;
    j["wall_seconds"] = wall_seconds;
    auto& flags = j["flags"] = nlohmann::json::array();
    if (exact) flags.push_back("exact averaging");
    if (noise_dominated) flags.push_back("noise-dominated");
    j["details"] = details;
    return j;
}

RateReport make_rate_report(std::string study, std::string label, std::vector<LadderPoint> ladder,
                            std::size_t replicas, std::uint64_t seed, double exact_threshold,
                            bool allow_unfitted) {
    RateReport r;
    r.study = std::move(study);
    r.label = std::move(label);
    std::sort(ladder.begin(), ladder.end(),
              [](const LadderPoint& a, const LadderPoint& b) { return a.epsilon > b.epsilon; });
    r.ladder = std::move(ladder);
    r.replicas = replicas;
    r.seed = seed;
    r.exact = std::all_of(r.ladder.begin(), r.ladder.end(),
                          [&](const LadderPoint& p) { return std::abs(p.error) <= exact_threshold; });
    if (r.exact) return r;
    for (std::size_t i = 0; i + 1 < r.ladder.size(); ++i) {
        const double gap = std::abs(r.ladder[i].error - r.ladder[i + 1].error);
        const double se = std::max(r.ladder[i].stderr_, r.ladder[i + 1].stderr_);
        if (se > 0.5 * gap) r.noise_dominated = true;
    }
    std::vector<double> eps, err;
    for (const auto& p : r.ladder) {
        eps.push_back(p.epsilon);
        err.push_back(p.error);
    }
    try {
        r.fit = fit_log_slope(eps, err);
    } catch (const EstimationError& e) {
        if (!allow_unfitted) throw;
        r.details["fit_error"] = e.what();
    }
    return r;
}

KendallResult kendall_tau(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DimensionError("kendall_tau: size mismatch");
    const std::size_t n = x.size();
    KendallResult out;
    out.n = n;
    if (n < 2) return out;

    const auto score = [&](std::span<const std::size_t> perm) {
        long long s = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dx = x[i] - x[j];
                const double dy = y[perm[i]] - y[perm[j]];
                s += ((dx > 0) - (dx < 0)) * ((dy > 0) - (dy < 0));
            }
        return s;
    };
    const auto tie_sum = [n](std::span<const double> v, auto term) {
        std::vector<double> s(v.begin(), v.end());
        std::sort(s.begin(), s.end());
        double acc = 0;
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            while (j < n && s[j] == s[i]) ++j;
            acc += term(static_cast<double>(j - i));
            i = j;
        }
        return acc;
    };
    const double n0 = n * (n - 1) / 2.0;
    const double n1 = tie_sum(x, [](double t) { return t * (t - 1) / 2; });
    const double n2 = tie_sum(y, [](double t) { return t * (t - 1) / 2; });
    std::vector<std::size_t> identity(n);
    std::iota(identity.begin(), identity.end(), 0);
    const long long s_obs = score(identity);
    const double denom = std::sqrt((n0 - n1) * (n0 - n2));
    if (denom == 0.0) return out;  // a constant series carries no trend
    out.tau = static_cast<double>(s_obs) / denom;

    if (n <= 8) {
        out.exact = true;
        std::vector<std::size_t> perm = identity;
        std::size_t total = 0, ge = 0, le = 0;
        do {
            const long long s = score(perm);
            ++total;
            ge += s >= s_obs;
            le += s <= s_obs;
        } while (std::next_permutation(perm.begin(), perm.end()));
        out.p_positive = static_cast<double>(ge) / static_cast<double>(total);
        out.p_negative = static_cast<double>(le) / static_cast<double>(total);
        return out;
    }
    const auto v_term = [](double t) { return t * (t - 1) * (2 * t + 5); };
    const double dn = static_cast<double>(n);
    const double var = (dn * (dn - 1) * (2 * dn + 5) - tie_sum(x, v_term) - tie_sum(y, v_term)) / 18.0;
    const boost::math::normal norm;
    const double s = static_cast<double>(s_obs);
    // Continuity correction of one unit on the score.
    out.p_positive = boost::math::cdf(boost::math::complement(norm, (s - 1) / std::sqrt(var)));
    out.p_negative = boost::math::cdf(norm, (s + 1) / std::sqrt(var));
    return out;
}

double test_function(const std::string& name, double x) {
    if (name == "tanh") return std::tanh(x);
    if (name == "rational") return x / (1 + x * x);
    if (name == "cos") return std::cos(x);
    if (name == "constant") return 1.0;
    throw ConfigError("unknown test function '" + name + "'");
}

StudyContext make_study_context(const RunConfig& cfg) {
    StudyContext ctx;
    ctx.model = make_model(cfg.model, cfg.params);
    ctx.init = cfg.initial.build(ctx.model->dims());
    const SimConfig sc = cfg.sim(cfg.ladder.front());
    const auto cloud = initial_cloud(*ctx.model, sc, ctx.init, rng::StreamId{cfg.seed, 0});
    CacheOptions co;
    co.grid_nodes = cfg.grid_nodes;
    co.invariant.n_particles = cfg.invariant_particles;
    co.invariant.samples_per_particle = cfg.invariant_samples;
    co.invariant.seed = cfg.seed;
    co.invariant.rate = measure_contraction_rate(*ctx.model, cloud.slow_law(), cfg.seed);
    ctx.cache = std::make_shared<AveragedCache>(ctx.model, co);
    return ctx;
}

LimitOptions limit_options(const RunConfig& cfg) {
    LimitOptions lo;
    lo.upsilon_nodes = cfg.upsilon_nodes;
    lo.upsilon_stride = cfg.upsilon_stride;
    lo.upsilon.atoms = cfg.upsilon_atoms;
    lo.upsilon.psi.replicas = cfg.upsilon_replicas;
    lo.upsilon.psi.seed = cfg.seed;
    return lo;
}

// ---------------------------------------------------------------------------

std::vector<RateReport> strong_rate_study(const RunConfig& cfg) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    const StudyContext ctx = make_study_context(cfg);
    const std::size_t R = cfg.replicas;
    const std::size_t L = cfg.ladder.size();
    const std::size_t P = cfg.moment_orders.size();
    // values[(r * L + e) * P + k]
    std::vector<double> values(R * L * P);
    parallel_for(
        R,
        [&](std::size_t r) {
            const auto replica = static_cast<std::uint32_t>(r);
            const auto xbar =
                simulate_averaged(*ctx.model, cfg.sim(cfg.ladder.front()), *ctx.cache, ctx.init, replica);
            for (std::size_t e = 0; e < L; ++e) {
                const auto sys = simulate_system(*ctx.model, cfg.sim(cfg.ladder[e]), ctx.init, replica,
                                                 {.keep_fast = false});
                if (sys.b_increments != xbar.b_increments)
                    throw Error("strong rate: system and averaged runs are not coupled");
                const std::size_t N = sys.n_particles;
                const std::size_t n = sys.n;
                std::vector<double> sup(N, 0.0);
                for (std::size_t t = 0; t < sys.x.size(); ++t)
                    for (std::size_t i = 0; i < N; ++i) {
                        double d2 = 0;
                        for (std::size_t c = 0; c < n; ++c) {
                            const double d = sys.x[t][i * n + c] - xbar.x[t][i * n + c];
                            d2 += d * d;
                        }
                        sup[i] = std::max(sup[i], std::sqrt(d2));
                    }
                for (std::size_t k = 0; k < P; ++k) {
                    double acc = 0;
                    for (double s : sup) acc += std::pow(s, cfg.moment_orders[k]);
                    values[(r * L + e) * P + k] = acc / static_cast<double>(N);
                }
            }
        },
        1);

    std::vector<RateReport> reports;
    for (std::size_t k = 0; k < P; ++k) {
        std::vector<LadderPoint> ladder;
        for (std::size_t e = 0; e < L; ++e) {
            std::vector<double> per(R);
            for (std::size_t r = 0; r < R; ++r) per[r] = values[(r * L + e) * P + k];
            const auto [m, se] = replica_summary(per);
            ladder.push_back({cfg.ladder[e], m, se, R});
        }
        const int p = cfg.moment_orders[k];
        auto rep = make_rate_report("strong-rate", "p=" + std::to_string(p), std::move(ladder), R,
                                    cfg.seed, std::pow(1e-12, p));
        rep.details["moment_order"] = p;
        rep.details["expected_slope"] = p / 2.0;
        rep.details["contraction_rate"] = ctx.cache->options().invariant.rate;
        reports.push_back(std::move(rep));
    }
    const double wall = seconds_since(start);
    for (auto& r : reports) r.wall_seconds = wall;
    return reports;
}

std::vector<RateReport> clt_weak_rate_study(const RunConfig& cfg) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    const StudyContext ctx = make_study_context(cfg);
    const std::size_t R = cfg.replicas;
    const std::size_t L = cfg.ladder.size();
    const std::size_t F = cfg.test_functions.size();
    const std::size_t T = cfg.sim(cfg.ladder.front()).macro_steps() + 1;
    const LimitOptions lo = limit_options(cfg);

    // psi_u[(r * F + f) * T + t], psi_eps[((r * L + e) * F + f) * T + t]
    std::vector<double> psi_u(R * F * T), psi_eps(R * L * F * T);
    const auto cloud_mean = [&](const std::vector<double>& block, std::size_t n, const std::string& phi) {
        const std::size_t N = block.size() / n;
        double acc = 0;
        for (std::size_t i = 0; i < N; ++i) acc += test_function(phi, block[i * n]);
        return acc / static_cast<double>(N);
    };
    parallel_for(
        R,
        [&](std::size_t r) {
            const auto replica = static_cast<std::uint32_t>(r);
            const SimConfig sc = cfg.sim(cfg.ladder.front());
            const auto xbar = simulate_averaged(*ctx.model, sc, *ctx.cache, ctx.init, replica);
            const auto coeffs = numerical_limit_coefficients(ctx.model, ctx.cache, lo);
            const auto u = simulate_limit_U(*ctx.model, sc, coeffs, xbar);
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t t = 0; t < T; ++t)
                    psi_u[(r * F + f) * T + t] = cloud_mean(u.x[t], u.n, cfg.test_functions[f]);
            for (std::size_t e = 0; e < L; ++e) {
                const double eps = cfg.ladder[e];
                const auto sys = simulate_system(*ctx.model, cfg.sim(eps), ctx.init, replica,
                                                 {.keep_fast = false});
                const auto dev = deviation_paths(sys, xbar, eps);
                for (std::size_t f = 0; f < F; ++f)
                    for (std::size_t t = 0; t < T; ++t)
                        psi_eps[((r * L + e) * F + f) * T + t] =
                            cloud_mean(dev.u[t], dev.n, cfg.test_functions[f]);
            }
        },
        1);

    std::vector<RateReport> reports;
    for (std::size_t f = 0; f < F; ++f) {
        std::vector<LadderPoint> ladder;
        nlohmann::json argmax = nlohmann::json::array();
        for (std::size_t e = 0; e < L; ++e) {
            double best = -1.0, best_se = kNaN;
            std::size_t best_t = 0;
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> d(R);
                for (std::size_t r = 0; r < R; ++r)
                    d[r] = psi_eps[((r * L + e) * F + f) * T + t] - psi_u[(r * F + f) * T + t];
                const auto [m, se] = replica_summary(d);
                if (std::abs(m) > best) {
                    best = std::abs(m);
                    best_se = se;
                    best_t = t;
                }
            }
            ladder.push_back({cfg.ladder[e], best, best_se, R});
            argmax.push_back(best_t);
        }
        // Nonincreasing as epsilon decreases, up to one combined stderr.
        bool monotone = true;
        for (std::size_t e = 0; e + 1 < L; ++e) {
            const double se = std::hypot(std::isfinite(ladder[e].stderr_) ? ladder[e].stderr_ : 0.0,
                                         std::isfinite(ladder[e + 1].stderr_) ? ladder[e + 1].stderr_ : 0.0);
            if (ladder[e + 1].error > ladder[e].error + se) monotone = false;
        }
        auto rep = make_rate_report("clt-rate", "phi=" + cfg.test_functions[f], ladder, R, cfg.seed,
                                    1e-14, true);
        rep.details["monotone"] = monotone;
        rep.details["argmax_step"] = argmax;
        rep.details["expected_slope"] = 0.5;
        reports.push_back(std::move(rep));
    }
    const double wall = seconds_since(start);
    for (auto& r : reports) r.wall_seconds = wall;
    return reports;
}

// ---------------------------------------------------------------------------

FluctuationFunctional fast_drift_part(std::shared_ptr<const Model> model) {
    FluctuationFunctional g;
    g.raw.dim = 1;
    g.raw.bind = [model](const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) -> BoundField {
        std::shared_ptr<const BoundCoefficients> full = model->bind(mu, nu);
        std::shared_ptr<const BoundCoefficients> slow = model->bind(mu, model->fast_origin());
        const Dims d = model->dims();
        return [full, slow, d](std::span<const double> x, std::span<const double> y, std::span<double> out) {
            std::vector<double> a(d.n), b(d.n), origin(d.m, 0.0);
            full->h1(x, y, a);
            slow->h1(x, origin, b);
            out[0] = a[0] - b[0];
        };
    };
    return g;
}

RateReport fluctuation_study(const RunConfig& cfg) {
    const auto model = make_model(cfg.model, cfg.params);
    if (cfg.fluctuation_functional == "zero") {
        FluctuationFunctional g;
        g.raw.bind = [](const EmpiricalMeasure&, const EmpiricalMeasure&) -> BoundField {
            return [](std::span<const double>, std::span<const double>, std::span<double> out) { out[0] = 0.0; };
        };
        g.center = false;
        return fluctuation_study(cfg, g);
    }
    return fluctuation_study(cfg, fast_drift_part(model));
}

RateReport fluctuation_study(const RunConfig& cfg, const FluctuationFunctional& g) {
    cfg.validate();
    if (g.raw.dim != 1) throw DimensionError("fluctuation: g must be scalar");
    const auto start = std::chrono::steady_clock::now();
    const StudyContext ctx = make_study_context(cfg);
    std::shared_ptr<AveragedCache> center;
    if (g.center) center = std::make_shared<AveragedCache>(ctx.model, g.raw, ctx.cache->options());

    // g as used along the path; also the functional handed to the centering check.
    SlowFunctional used;
    used.dim = 1;
    used.bind = [raw = g.raw, center](const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) -> BoundField {
        BoundField f = raw.bind(mu, nu);
        if (!center) return f;
        PointMap mean = center->bind(mu);
        return [f, mean](std::span<const double> x, std::span<const double> y, std::span<double> out) {
            double m = 0;
            f(x, y, out);
            mean(x, std::span<double>(&m, 1));
            out[0] -= m;
        };
    };

    const SimConfig sc0 = cfg.sim(cfg.ladder.front());
    const auto mu0 = initial_cloud(*ctx.model, sc0, ctx.init, rng::StreamId{cfg.seed, 0}).slow_law();
    const auto inv0 = center ? center->invariant(mu0) : ctx.cache->invariant(mu0);
    const std::vector<double> x_probe(ctx.model->dims().n, cfg.probe_x);
    const double residual = centering_residual(used, x_probe, mu0, *inv0);
    if (!(residual <= cfg.centering_tolerance))
        throw ConfigError("fluctuation: g fails the centering check (residual " +
                          std::to_string(residual) + ")");

    const FunctionalFactory factory = [used](const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
        BoundField f = used.bind(mu, nu);
        return PointFunctional([f](std::span<const double> x, std::span<const double> y) {
            double v = 0;
            f(x, y, std::span<double>(&v, 1));
            return v;
        });
    };
    const std::size_t R = cfg.replicas;
    const std::size_t L = cfg.ladder.size();
    std::vector<double> values(R * L);
    parallel_for(
        R,
        [&](std::size_t r) {
            for (std::size_t e = 0; e < L; ++e) {
                const auto sys = simulate_system(*ctx.model, cfg.sim(cfg.ladder[e]), ctx.init,
                                                 static_cast<std::uint32_t>(r),
                                                 {.integrand = &factory, .keep_fast = false});
                values[r * L + e] = sample_mean(sys.integral);
            }
        },
        1);

    std::vector<LadderPoint> ladder;
    nlohmann::json signed_means = nlohmann::json::array();
    for (std::size_t e = 0; e < L; ++e) {
        std::vector<double> per(R);
        for (std::size_t r = 0; r < R; ++r) per[r] = values[r * L + e];
        const auto [m, se] = replica_summary(per);
        ladder.push_back({cfg.ladder[e], std::abs(m), se, R});
        signed_means.push_back(m);
    }
    auto rep = make_rate_report("fluctuation", "g", std::move(ladder), R, cfg.seed, 1e-14);
    rep.details["centering_residual"] = residual;
    rep.details["signed_mean"] = signed_means;
    rep.details["expected_slope_at_least"] = 0.5;
    rep.wall_seconds = seconds_since(start);
    return rep;
}

// ---------------------------------------------------------------------------

nlohmann::json MomentTable::to_json() const {
    nlohmann::json j;
    j["ladder"] = ladder;
    auto& stats = j["statistics"] = nlohmann::json::array();
    for (const auto& s : statistics) {
        nlohmann::json se = nlohmann::json::array();
        for (double v : s.stderr_) se.push_back(number_or_null(v));
        stats.push_back({{"name", s.name},
                         {"mean", s.mean},
                         {"stderr", se},
                         {"kendall_tau", s.trend.tau},
                         {"p_growth", s.trend.p_negative},
                         {"exact_p", s.trend.exact},
                         {"growth", s.growth}});
    }
    j["fast_sup_growth"] = {{"slope", number_or_null(fast_sup_growth.slope)},
                            {"slope_ci", {number_or_null(fast_sup_growth.ci[0]),
                                          number_or_null(fast_sup_growth.ci[1])}},
                            {"bound", 1.0},
                            {"within_bound", growth_within_bound}};
    j["failures"] = failures;
    j["replicas"] = replicas;
    j["seed"] = seed;
    j["wall_seconds"] = wall_seconds;
    return j;
}

MomentTable moment_uniformity_study(const RunConfig& cfg) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    const auto model = make_model(cfg.model, cfg.params);
    const auto init = cfg.initial.build(model->dims());
    const std::size_t R = cfg.replicas;
    const std::size_t L = cfg.ladder.size();
    constexpr std::size_t S = 4;
    // values[(r * L + e) * S + s]
    std::vector<double> values(R * L * S);
    const auto sq = [](std::span<const double> v) {
        double s = 0;
        for (double x : v) s += x * x;
        return s;
    };
    parallel_for(
        R,
        [&](std::size_t r) {
            for (std::size_t e = 0; e < L; ++e) {
                const auto p = simulate_system(*model, cfg.sim(cfg.ladder[e]), init,
                                               static_cast<std::uint32_t>(r));
                const std::size_t N = p.n_particles;
                std::vector<double> sup_x(N, 0.0);
                double fast_pt = 0, y0_pt = 0;
                for (std::size_t t = 0; t < p.x.size(); ++t) {
                    double mxi = 0, my0 = 0;
                    for (std::size_t i = 0; i < N; ++i) {
                        sup_x[i] = std::max(sup_x[i], sq({p.x[t].data() + i * p.n, p.n}));
                        mxi += sq({p.y_xi[t].data() + i * p.m, p.m});
                        my0 += sq({p.y_y0[t].data() + i * p.m, p.m});
                    }
                    fast_pt = std::max(fast_pt, mxi / static_cast<double>(N));
                    y0_pt = std::max(y0_pt, my0 / static_cast<double>(N));
                }
                double* out = &values[(r * L + e) * S];
                out[0] = sample_mean(sup_x);
                out[1] = fast_pt;
                out[2] = y0_pt;
                out[3] = sample_mean(p.fast_sup_sq);
            }
        },
        1);

    MomentTable table;
    table.ladder = cfg.ladder;
    table.replicas = R;
    table.seed = cfg.seed;
    const char* names[S] = {"E sup_t |X|^2", "sup_t E|Y^xi|^2", "sup_t E|Y^y0|^2",
                            "E sup_t |Y^xi|^2"};
    for (std::size_t s = 0; s < S; ++s) {
        MomentStatistic stat;
        stat.name = names[s];
        for (std::size_t e = 0; e < L; ++e) {
            std::vector<double> per(R);
            for (std::size_t r = 0; r < R; ++r) per[r] = values[(r * L + e) * S + s];
            const auto [m, se] = replica_summary(per);
            stat.mean.push_back(m);
            stat.stderr_.push_back(se);
        }
        stat.trend = kendall_tau(cfg.ladder, stat.mean);
        // Growth as epsilon decreases is a negative association with epsilon.
        stat.growth = stat.trend.p_negative < cfg.trend_alpha;
        // The uniform-in-epsilon claims concern the slow sup-moment and the
        // pointwise fast moment; the sup-in-time fast moment may grow.
        if (stat.growth && (s == 0 || s == 1))
            table.failures.push_back("growth trend in " + stat.name + " (Kendall tau " +
                                     std::to_string(stat.trend.tau) + ", p " +
                                     std::to_string(stat.trend.p_negative) + ")");
        table.statistics.push_back(std::move(stat));
    }
    std::vector<double> inv_eps;
    for (double e : cfg.ladder) inv_eps.push_back(1.0 / e);
    table.fast_sup_growth = fit_log_slope(inv_eps, table.statistics[3].mean);
    table.growth_within_bound = table.fast_sup_growth.ci[0] <= 1.0;
    if (!table.growth_within_bound)
        table.failures.push_back("E sup_t |Y^xi|^2 grows faster than 1/eps (slope " +
                                 std::to_string(table.fast_sup_growth.slope) + ")");
    table.wall_seconds = seconds_since(start);
    return table;
}

// ---------------------------------------------------------------------------

void write_atomic(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write '" + tmp.string() + "'");
        out << content;
        out.flush();
        if (!out) throw Error("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, target);
}

nlohmann::json report_envelope(const std::string& command, const RunConfig& cfg,
                               nlohmann::json payload) {
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["command"] = command;
    j["seed"] = cfg.seed;
    j["config"] = cfg.to_json();
    j["result"] = std::move(payload);
    return j;
}

std::string ladder_csv(const RateReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "epsilon,error,stderr,replicas\n";
    for (const auto& p : report.ladder)
        os << p.epsilon << "," << p.error << "," << p.stderr_ << "," << p.replicas << "\n";
    return os.str();
}

std::string gnuplot_script(std::span<const RateReport> reports,
                           std::span<const std::string> csv_files) {
    std::ostringstream os;
    os << "set datafile separator ','\n"
          "set logscale xy\n"
          "set xlabel 'epsilon'\n"
          "set ylabel 'error'\n"
          "set key left top\n"
          "plot ";
    for (std::size_t i = 0; i < reports.size() && i < csv_files.size(); ++i) {
        if (i) os << ", \\\n     ";
        os << "'" << csv_files[i] << "' every ::1 using 1:2:3 with yerrorlines title '"
           << reports[i].label << "'";
    }
    os << "\n";
    return os.str();
}

void write_rate_outputs(const std::string& dir, const std::string& command, const RunConfig& cfg,
                        std::span<const RateReport> reports, nlohmann::json extra) {
    namespace fs = std::filesystem;
    nlohmann::json payload;
    payload["reports"] = nlohmann::json::array();
    for (const auto& r : reports) payload["reports"].push_back(r.to_json());
    if (!extra.is_null()) payload["extra"] = std::move(extra);
    std::vector<std::string> files;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        std::string name = "ladder_" + reports[i].label + ".csv";
        std::replace_if(name.begin(), name.end(), [](char c) { return c == '=' || c == '/'; }, '_');
        write_atomic((fs::path(dir) / name).string(), ladder_csv(reports[i]));
        files.push_back(name);
    }
    if (!reports.empty()) write_atomic((fs::path(dir) / "ladder.csv").string(), ladder_csv(reports[0]));
    write_atomic((fs::path(dir) / "plot.gp").string(), gnuplot_script(reports, files));
    write_atomic((fs::path(dir) / "report.json").string(),
                 report_envelope(command, cfg, std::move(payload)).dump(2) + "\n");
}

}  // namespace mvsim
