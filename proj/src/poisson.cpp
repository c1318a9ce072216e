#include "mvsim/poisson.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mvsim/error.hpp"
#include "mvsim/parallel.hpp"
#include "mvsim/stats.hpp"
#include "stepping.hpp"

namespace mvsim {

using detail::Scratch;
using detail::view;

namespace {

double resolve_dt(const Model& model, const PoissonOptions& o) {
    FrozenOptions f;
    f.dt = o.dt;
    return f.resolve_dt(model);
}

// Deterministic equal-weight particle approximation of nu with `count` atoms:
// even index stride for uniform laws, stratified inverse CDF over atom order
// for weighted ones.
std::vector<double> background_from(const EmpiricalMeasure& nu, std::size_t count) {
    const std::size_t m = nu.dim();
    std::vector<double> out(count * m);
    if (nu.is_uniform()) {
        for (std::size_t b = 0; b < count; ++b) {
            const auto a = nu.atom(b * nu.size() / count);
            std::copy(a.begin(), a.end(), out.begin() + b * m);
        }
        return out;
    }
    double cum = nu.weight(0);
    std::size_t j = 0;
    for (std::size_t b = 0; b < count; ++b) {
        const double u = (static_cast<double>(b) + 0.5) / static_cast<double>(count);
        while (u > cum && j + 1 < nu.size()) cum += nu.weight(++j);
        const auto a = nu.atom(j);
        std::copy(a.begin(), a.end(), out.begin() + b * m);
    }
    return out;
}

struct Source {
    std::uint32_t index;
    bool negate;
};

Source source_of(std::size_t r, std::size_t count, bool antithetic) {
    const std::size_t half = count / 2;
    if (antithetic && r >= half && r - half < half) return {static_cast<std::uint32_t>(r - half), true};
    return {static_cast<std::uint32_t>(r), false};
}

// Integrals of h1(x_g, Y^{k,r}_s, nu_s) [- h1(x_g, Z^r_s, eta_s)] over fast time for
// G slow points, K start points and R inner replicas; replica r uses the same
// W for every start and for its companion.
struct FlowProblem {
    const Model* model = nullptr;
    const EmpiricalMeasure* mu = nullptr;
    std::span<const double> xs;  // G x n
    std::vector<double> starts;  // K x m
    std::vector<double> background;
    bool companion = false;
    std::vector<double> companion_start;  // R x m
    std::vector<double> companion_background;
    std::size_t replicas = 1;
    double dt = 0.0;
    std::size_t steps = 0;  // to t_cut
    // The background reads its noise from this step on (continuing a flow).
    std::size_t background_offset = 0;
    bool twice = false;
    bool antithetic = true;
    rng::StreamId id;
};

struct FlowResult {
    std::size_t G = 0, K = 0, R = 0, n = 1;
    std::vector<double> cut;    // ((g * K + k) * R + r) * n + c
    std::vector<double> twice;  // same layout, empty unless requested
    std::vector<double> last;   // integrand at t_cut, same layout
    std::size_t at(std::size_t g, std::size_t k, std::size_t r) const { return ((g * K + k) * R + r) * n; }
};

FlowResult run_flow(FlowProblem& p) {
    const Model& model = *p.model;
    const Dims d = model.dims();
    const std::size_t n = d.n, m = d.m, d2 = d.d2;
    FlowResult res;
    res.n = n;
    res.G = p.xs.size() / n;
    res.K = p.starts.size() / m;
    res.R = p.replicas;
    const std::size_t G = res.G, K = res.K, R = res.R;
    const std::size_t total = (p.twice ? 2 : 1) * p.steps;
    const std::size_t size = G * K * R * n;
    std::vector<double> acc(size, 0.0);
    res.cut.assign(size, 0.0);
    res.last.assign(size, 0.0);
    if (p.twice) res.twice.assign(size, 0.0);

    // Y clouds: K x R x m, index (k * R + r) * m.
    std::vector<double> y(K * R * m);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t r = 0; r < R; ++r)
            std::copy_n(p.starts.begin() + k * m, m, y.begin() + (k * R + r) * m);
    std::vector<double>& bg = p.background;
    std::vector<double>& cz = p.companion_start;
    std::vector<double>& cbg = p.companion_background;
    const std::size_t B = bg.size() / m;
    const double sqrt_dt = std::sqrt(p.dt);

    for (std::size_t step = 0; step <= total; ++step) {
        const auto main = model.bind(*p.mu, EmpiricalMeasure::uniform(bg, m));
        std::shared_ptr<const BoundCoefficients> comp;
        if (p.companion) comp = model.bind(*p.mu, EmpiricalMeasure::uniform(cbg, m));
        const double w = step == 0 ? 0.5 * p.dt : p.dt;
        const bool at_cut = step == p.steps;
        const bool at_twice = p.twice && step == total;
        const bool last_step = step == total;
        const auto counter = static_cast<std::uint32_t>(step);

        parallel_for(
            R,
            [&](std::size_t r) {
                Scratch hz(n), hy(n), a(m), g2(m * d2), dw(d2);
                for (std::size_t g = 0; g < G; ++g) {
                    const auto x = p.xs.subspan(g * n, n);
                    if (p.companion) {
                        comp->h1(x, std::span<const double>(cz).subspan(r * m, m), view(hz));
                        detail::check_finite(view(hz), "companion", r, "h1");
                    }
                    for (std::size_t k = 0; k < K; ++k) {
                        main->h1(x, std::span<const double>(y).subspan((k * R + r) * m, m), view(hy));
                        detail::check_finite(view(hy), "inner Y", r, "h1");
                        const std::size_t base = res.at(g, k, r);
                        for (std::size_t c = 0; c < n; ++c) {
                            const double f = hy[c] - (p.companion ? hz[c] : 0.0);
                            acc[base + c] += w * f;
                            if (at_cut) {
                                res.cut[base + c] = acc[base + c] - 0.5 * p.dt * f;
                                res.last[base + c] = f;
                            }
                            if (at_twice) res.twice[base + c] = acc[base + c] - 0.5 * p.dt * f;
                        }
                    }
                }
                if (last_step) return;
                const Source src = source_of(r, R, p.antithetic);
                rng::NormalStream ws(p.id, rng::Tag::kPoisson, src.index, counter, src.negate);
                for (double& e : dw) e = sqrt_dt * ws.normal();
                for (std::size_t k = 0; k < K; ++k)
                    detail::fast_update(*main, std::span<double>(y).subspan((k * R + r) * m, m),
                                        view(dw), p.dt, 1.0, view(a), view(g2), "inner Y", r);
                if (p.companion)
                    detail::fast_update(*comp, std::span<double>(cz).subspan(r * m, m), view(dw), p.dt,
                                        1.0, view(a), view(g2), "companion", r);
            },
            4);
        if (last_step) break;

        parallel_for(B, [&](std::size_t b) {
            Scratch a(m), g2(m * d2), dw(d2);
            rng::NormalStream ws(p.id, rng::Tag::kBackground, static_cast<std::uint32_t>(b),
                                 static_cast<std::uint32_t>(step + p.background_offset));
            for (double& e : dw) e = sqrt_dt * ws.normal();
            detail::fast_update(*main, std::span<double>(bg).subspan(b * m, m), view(dw), p.dt, 1.0,
                                view(a), view(g2), "background", b);
            if (p.companion)
                detail::fast_update(*comp, std::span<double>(cbg).subspan(b * m, m), view(dw), p.dt,
                                    1.0, view(a), view(g2), "companion background", b);
        });
    }
    return res;
}

// Per-unit values (antithetic pairs averaged) of fn(r) for r in [0, R).
template <class Fn>
std::vector<double> unit_values(std::size_t R, bool antithetic, Fn&& fn) {
    const std::size_t half = antithetic ? R / 2 : 0;
    std::vector<double> out;
    out.reserve(R - half);
    for (std::size_t u = 0; u < R - half; ++u)
        out.push_back(u < half ? 0.5 * (fn(u) + fn(u + half)) : fn(u));
    return out;
}

FlowProblem base_problem(const Model& model, const EmpiricalMeasure& mu, std::span<const double> xs,
                         const EmpiricalMeasure& nu, const PoissonOptions& o) {
    if (o.replicas < 1) throw ConfigError("poisson: need at least one replica");
    if (o.max_background < 1) throw ConfigError("poisson: max_background must be positive");
    if (nu.dim() != model.dims().m) throw DimensionError("poisson: nu has wrong dimension");
    if (mu.dim() != model.dims().n) throw DimensionError("poisson: mu has wrong dimension");
    if (xs.empty() || xs.size() % model.dims().n != 0)
        throw DimensionError("poisson: x has wrong dimension");
    FlowProblem p;
    p.model = &model;
    p.mu = &mu;
    p.xs = xs;
    p.background = background_from(nu, o.max_background);
    p.replicas = o.replicas;
    p.dt = resolve_dt(model, o);
    p.antithetic = o.antithetic;
    p.twice = o.check_tail;
    p.id = {o.seed, o.replica};
    return p;
}

void set_horizon(FlowProblem& p, const InvariantEstimate& inv, const PoissonOptions& o) {
    double t_cut = o.t_cut;
    if (!(t_cut > 0.0)) {
        if (!(inv.rate > 0.0))
            throw EstimationError("poisson: contraction rate must be positive to set the horizon");
        // The squared gap decays at rate; the integrand itself at rate / 2.
        t_cut = 24.0 / inv.rate;
    }
    p.steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(t_cut / p.dt)));
}

void check_y(const Model& model, std::span<const double> y) {
    if (y.size() != model.dims().m) throw DimensionError("poisson: y has wrong dimension");
}

}  // namespace

PsiEstimate solve_psi(const Model& model, std::span<const double> x, const EmpiricalMeasure& mu,
                      std::span<const double> y, const EmpiricalMeasure& nu,
                      const InvariantEstimate& inv, const PoissonOptions& options) {
    check_y(model, y);
    if (x.size() != model.dims().n) throw DimensionError("solve_psi: x has wrong dimension");
    FlowProblem p = base_problem(model, mu, x, nu, options);
    set_horizon(p, inv, options);
    const std::size_t m = model.dims().m;
    const std::size_t R = options.replicas;
    p.starts.assign(y.begin(), y.end());
    p.companion = true;
    p.companion_background = background_from(inv.eta, options.max_background);
    p.companion_start.resize(R * m);
    const rng::StreamId id{options.seed, options.replica};
    for (std::size_t r = 0; r < R; ++r) {
        const Source src = source_of(r, R, options.antithetic);
        rng::NormalStream pick(id, rng::Tag::kCompanion, src.index, 0);
        const auto j = std::min(static_cast<std::size_t>(pick.uniform() * inv.eta.size()),
                                inv.eta.size() - 1);
        const auto a = inv.eta.atom(j);
        std::copy(a.begin(), a.end(), p.companion_start.begin() + r * m);
    }
    const FlowResult res = run_flow(p);
    const std::size_t n = res.n;

    PsiEstimate est;
    est.t_cut = static_cast<double>(p.steps) * p.dt;
    est.replicas = R;
    est.tail_change = options.check_tail ? 0.0 : std::numeric_limits<double>::quiet_NaN();
    for (std::size_t c = 0; c < n; ++c) {
        const auto cut = unit_values(R, options.antithetic, [&](std::size_t r) { return res.cut[res.at(0, 0, r) + c]; });
        const auto last = unit_values(R, options.antithetic, [&](std::size_t r) { return res.last[res.at(0, 0, r) + c]; });
        est.value.push_back(sample_mean(cut));
        est.stderr_.push_back(standard_error(cut));
        const double tail = std::abs(sample_mean(last)) * 2.0 / std::max(inv.rate, 1e-300);
        est.tail_bound = std::max(est.tail_bound, tail);
        if (!options.check_tail) continue;
        const auto diff = unit_values(R, options.antithetic, [&](std::size_t r) {
            return res.twice[res.at(0, 0, r) + c] - res.cut[res.at(0, 0, r) + c];
        });
        const double change = std::abs(sample_mean(diff));
        est.tail_change = std::max(est.tail_change, change);
        const double allowed = options.tail_sigmas * standard_error(diff) + 2.0 * tail +
                               1e-12 * (1.0 + std::abs(est.value.back()));
        if (change > allowed) {
            std::ostringstream msg;
            msg << "solve_psi: integral not settled at t_cut = " << est.t_cut << " (doubling moves it by "
                << change << ", allowed " << allowed << "); the model may not be mixing";
            throw EstimationError(msg.str());
        }
    }
    for (double v : est.value)
        if (!std::isfinite(v)) throw NonFiniteError("solve_psi: non-finite value");
    return est;
}

namespace {

// Central-difference starts y +/- h e_j, j = 0..m-1, appended to `starts`.
void push_fd_starts(std::vector<double>& starts, std::span<const double> y, double h) {
    for (std::size_t j = 0; j < y.size(); ++j)
        for (double sign : {1.0, -1.0}) {
            std::vector<double> s(y.begin(), y.end());
            s[j] += sign * h;
            starts.insert(starts.end(), s.begin(), s.end());
        }
}

struct GradientCell {
    double value;
    double se;
};

// d_y Psi entry (c, j) for slow point g and FD block `block` (2m starts each).
GradientCell gradient_entry(const FlowResult& res, const std::vector<double>& values, std::size_t g,
                            std::size_t block, std::size_t m, std::size_t c, std::size_t j, double h,
                            bool antithetic) {
    const std::size_t kp = block * 2 * m + 2 * j;
    const auto units = unit_values(res.R, antithetic, [&](std::size_t r) {
        return (values[res.at(g, kp, r) + c] - values[res.at(g, kp + 1, r) + c]) / (2.0 * h);
    });
    return {sample_mean(units), standard_error(units)};
}

}  // namespace

PsiGradient dy_psi(const Model& model, std::span<const double> x, const EmpiricalMeasure& mu,
                   std::span<const double> y, const EmpiricalMeasure& nu,
                   const InvariantEstimate& inv, double h, const PoissonOptions& options) {
    check_y(model, y);
    if (x.size() != model.dims().n) throw DimensionError("dy_psi: x has wrong dimension");
    if (!(h > 0.0)) throw ConfigError("dy_psi: h must be positive");
    FlowProblem p = base_problem(model, mu, x, nu, options);
    set_horizon(p, inv, options);
    push_fd_starts(p.starts, y, h);
    const FlowResult res = run_flow(p);

    const Dims d = model.dims();
    PsiGradient out;
    out.n = d.n;
    out.m = d.m;
    out.d2 = d.d2;
    constexpr double kFloor = 1e-10;
    for (std::size_t c = 0; c < d.n; ++c)
        for (std::size_t j = 0; j < d.m; ++j) {
            const auto cell = gradient_entry(res, res.cut, 0, 0, d.m, c, j, h, options.antithetic);
            if (cell.se > kFloor && std::abs(cell.value) < 2.0 * cell.se) {
                std::ostringstream msg;
                msg << "dy_psi: entry (" << c << ", " << j << ") = " << cell.value
                    << " is within two standard errors (" << cell.se
                    << ") of zero; increase replicas";
                throw EstimationError(msg.str());
            }
            if (options.check_tail) {
                const auto far = gradient_entry(res, res.twice, 0, 0, d.m, c, j, h, options.antithetic);
                const auto last = gradient_entry(res, res.last, 0, 0, d.m, c, j, h, options.antithetic);
                const double allowed = options.tail_sigmas * std::hypot(cell.se, far.se) + kFloor +
                                       4.0 * std::abs(last.value) / inv.rate;
                if (std::abs(far.value - cell.value) > allowed)
                    throw EstimationError("dy_psi: gradient not settled at t_cut; the model may not be mixing");
            }
            out.gradient.push_back(cell.value);
            out.gradient_stderr.push_back(cell.se);
        }
    const auto g2 = model.gamma2(mu, y, nu);
    out.times_gamma2.assign(d.n * d.d2, 0.0);
    for (std::size_t c = 0; c < d.n; ++c)
        for (std::size_t k = 0; k < d.d2; ++k)
            for (std::size_t j = 0; j < d.m; ++j)
                out.times_gamma2[c * d.d2 + k] += out.gradient[c * d.m + j] * g2[j * d.d2 + k];
    return out;
}

std::vector<double> psd_sqrt(std::span<const double> matrix, std::size_t n, double tolerance) {
    if (matrix.size() != n * n) throw DimensionError("psd_sqrt: matrix has wrong size");
    Eigen::MatrixXd a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (matrix[i * n + j] + matrix[j * n + i]);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a);
    if (eig.info() != Eigen::Success) throw EstimationError("psd_sqrt: eigen decomposition failed");
    Eigen::VectorXd lambda = eig.eigenvalues();
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
        if (lambda(i) < -tolerance) {
            std::ostringstream msg;
            msg << "psd_sqrt: eigenvalue " << lambda(i) << " is negative; estimator inconsistent";
            throw EstimationError(msg.str());
        }
        lambda(i) = std::sqrt(std::max(lambda(i), 0.0));
    }
    const Eigen::MatrixXd root = eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
    std::vector<double> out(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = root(i, j);
    return out;
}

std::vector<UpsilonEstimate> estimate_upsilon_many(const Model& model, std::span<const double> xs,
                                                   const EmpiricalMeasure& mu,
                                                   const InvariantEstimate& inv,
                                                   const UpsilonOptions& options) {
    if (options.atoms < 1) throw ConfigError("estimate_upsilon: need at least one atom");
    if (!(options.h > 0.0)) throw ConfigError("estimate_upsilon: h must be positive");
    const Dims d = model.dims();
    const EmpiricalMeasure& eta = inv.eta;
    FlowProblem p = base_problem(model, mu, xs, eta, options.psi);
    set_horizon(p, inv, options.psi);
    p.twice = false;
    const std::size_t M = std::min(options.atoms, eta.size());
    std::vector<double> atoms;
    for (std::size_t a = 0; a < M; ++a) {
        const auto y = eta.atom(a * eta.size() / M);
        atoms.insert(atoms.end(), y.begin(), y.end());
        push_fd_starts(p.starts, y, options.h);
    }
    const FlowResult res = run_flow(p);

    std::vector<UpsilonEstimate> out;
    const std::size_t n = d.n;
    for (std::size_t g = 0; g < res.G; ++g) {
        // Per-atom outer products, n x n each.
        std::vector<std::vector<double>> products(n * n, std::vector<double>(M));
        for (std::size_t a = 0; a < M; ++a) {
            const auto y = std::span<const double>(atoms).subspan(a * d.m, d.m);
            const auto g2 = model.gamma2(mu, y, eta);
            std::vector<double> v(n * d.d2, 0.0);
            for (std::size_t c = 0; c < n; ++c)
                for (std::size_t j = 0; j < d.m; ++j) {
                    const double grad =
                        gradient_entry(res, res.cut, g, a, d.m, c, j, options.h, options.psi.antithetic).value;
                    for (std::size_t k = 0; k < d.d2; ++k) v[c * d.d2 + k] += grad * g2[j * d.d2 + k];
                }
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t k = 0; k < d.d2; ++k) s += v[i * d.d2 + k] * v[j * d.d2 + k];
                    products[i * n + j][a] = s;
                }
        }
        UpsilonEstimate est;
        est.n = n;
        est.atoms = atoms;
        for (const auto& series : products) {
            est.raw.push_back(sample_mean(series));
            est.raw_stderr.push_back(standard_error(series));
        }
        for (double v : est.raw)
            if (!std::isfinite(v)) throw NonFiniteError("estimate_upsilon: non-finite covariance");
        est.matrix = psd_sqrt(est.raw, n);
        out.push_back(std::move(est));
    }
    return out;
}

UpsilonEstimate estimate_upsilon(const Model& model, std::span<const double> x,
                                 const EmpiricalMeasure& mu, const InvariantEstimate& inv,
                                 const UpsilonOptions& options) {
    if (x.size() != model.dims().n) throw DimensionError("estimate_upsilon: x has wrong dimension");
    return std::move(estimate_upsilon_many(model, x, mu, inv, options).front());
}

std::vector<double> generator_residual(const Model& model, std::span<const double> x,
                                       const EmpiricalMeasure& mu, std::span<const double> y,
                                       const EmpiricalMeasure& nu, const InvariantEstimate& inv,
                                       double delta, const GeneratorOptions& options) {
    check_y(model, y);
    if (x.size() != model.dims().n) throw DimensionError("generator_residual: x has wrong dimension");
    if (options.outer < 1) throw ConfigError("generator_residual: need at least one outer copy");
    const Dims d = model.dims();
    const std::size_t m = d.m;
    const PoissonOptions& po = options.psi;
    const double dt = resolve_dt(model, po);
    const auto outer_steps = static_cast<std::size_t>(std::llround(delta / dt));
    if (!(delta > 0.0) || outer_steps < 1 ||
        std::abs(static_cast<double>(outer_steps) * dt - delta) > 1e-9 * delta) {
        std::ostringstream msg;
        msg << "generator_residual: delta = " << delta << " is not a positive multiple of the step " << dt;
        throw ConfigError(msg.str());
    }

    // Run from (y, nu).
    FlowProblem base = base_problem(model, mu, x, nu, po);
    set_horizon(base, inv, po);
    base.twice = false;
    base.starts.assign(y.begin(), y.end());
    FlowProblem shifted = base;

    // Outer copies and the nu flow over [0, delta].
    const std::size_t O = options.outer;
    std::vector<double> outer(O * m);
    for (std::size_t o = 0; o < O; ++o) std::copy(y.begin(), y.end(), outer.begin() + o * m);
    std::vector<double>& bg = shifted.background;
    const rng::StreamId id{po.seed, po.replica};
    const double sqrt_dt = std::sqrt(dt);
    for (std::size_t s = 0; s < outer_steps; ++s) {
        const auto c = model.bind(mu, EmpiricalMeasure::uniform(bg, m));
        const auto counter = static_cast<std::uint32_t>(s);
        parallel_for(O, [&](std::size_t o) {
            Scratch a(m), g2(m * d.d2), dw(d.d2);
            const Source src = source_of(o, O, po.antithetic);
            rng::NormalStream ws(id, rng::Tag::kPoissonOuter, src.index, counter, src.negate);
            for (double& e : dw) e = sqrt_dt * ws.normal();
            detail::fast_update(*c, std::span<double>(outer).subspan(o * m, m), view(dw), dt, 1.0,
                                view(a), view(g2), "outer Y", o);
        });
        parallel_for(bg.size() / m, [&](std::size_t b) {
            Scratch a(m), g2(m * d.d2), dw(d.d2);
            rng::NormalStream ws(id, rng::Tag::kBackground, static_cast<std::uint32_t>(b), counter);
            for (double& e : dw) e = sqrt_dt * ws.normal();
            detail::fast_update(*c, std::span<double>(bg).subspan(b * m, m), view(dw), dt, 1.0,
                                view(a), view(g2), "background", b);
        });
    }
    shifted.starts = std::move(outer);
    shifted.background_offset = outer_steps;

    const FlowResult r0 = run_flow(base);
    const FlowResult r1 = run_flow(shifted);
    const auto h1 = model.h1(x, mu, y, nu);
    const auto hbar = estimate_hbar(model, x, mu, inv);
    std::vector<double> out(d.n);
    for (std::size_t c = 0; c < d.n; ++c) {
        double a = 0.0;
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t r = 0; r < r1.R; ++r) a += r1.cut[r1.at(0, o, r) + c];
        a /= static_cast<double>(O * r1.R);
        double b = 0.0;
        for (std::size_t r = 0; r < r0.R; ++r) b += r0.cut[r0.at(0, 0, r) + c];
        b /= static_cast<double>(r0.R);
        out[c] = (a - b) / delta + h1[c] - hbar[c];
        if (!std::isfinite(out[c])) throw NonFiniteError("generator_residual: non-finite residual");
    }
    return out;
}

}  // namespace mvsim
