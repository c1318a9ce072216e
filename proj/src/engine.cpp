#include "mvsim/engine.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

#include "mvsim/error.hpp"
#include "mvsim/parallel.hpp"
#include "stepping.hpp"

namespace mvsim {

std::size_t SimConfig::macro_steps() const {
    if (horizon == 0.0) return 0;
    const double ratio = horizon / dt;
    const double rounded = std::round(ratio);
    if (std::abs(ratio - rounded) > 1e-9 * std::max(1.0, ratio))
        throw ConfigError("horizon must be an integer multiple of dt");
    return static_cast<std::size_t>(rounded);
}

std::size_t SimConfig::resolve_substeps(const Model& model) const {
    const double rate = model.fast_rate();
    std::size_t s = substeps;
    if (s == 0) {
        s = static_cast<std::size_t>(std::ceil(dt * rate / (epsilon * fast_cfl) - 1e-9));
        s = std::max<std::size_t>(s, 1);
    }
    const double ratio = dt / static_cast<double>(s) / epsilon * rate;
    if (ratio > fast_cfl * (1.0 + 1e-9)) {
        std::ostringstream msg;
        msg << "fast step too large: (dt/substeps)/epsilon * rate = " << ratio << " exceeds "
            << fast_cfl << "; raise substeps";
        throw UnsupportedError(msg.str());
    }
    return s;
}

void SimConfig::validate() const {
    if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in (0, 1]");
    if (!(dt > 0.0)) throw ConfigError("dt must be positive");
    if (!(horizon >= 0.0)) throw ConfigError("horizon must be non-negative");
    if (n_particles < 2) throw ConfigError("n_particles must be >= 2");
    if (replicas < 1) throw ConfigError("replicas must be >= 1");
    if (!(fast_cfl > 0.0)) throw ConfigError("fast_cfl must be positive");
    macro_steps();
}

InitialConditions InitialConditions::standard(const Dims& dims) {
    return {gaussian(0.0, 1.0), gaussian(0.0, 1.0), std::vector<double>(dims.m, 0.0)};
}

StateSampler InitialConditions::gaussian(double mean, double sd) {
    return [mean, sd](rng::NormalStream& rs, std::span<double> out) {
        for (double& v : out) v = mean + sd * rs.normal();
    };
}

StateSampler InitialConditions::constant(std::vector<double> value) {
    return [value](rng::NormalStream&, std::span<double> out) {
        if (out.size() != value.size()) throw DimensionError("constant sampler: dimension mismatch");
        std::copy(value.begin(), value.end(), out.begin());
    };
}

ParticleCloud initial_cloud(const Model& model, const SimConfig& cfg,
                            const InitialConditions& init, rng::StreamId id) {
    const Dims d = model.dims();
    if (init.y0.size() != d.m) throw DimensionError("initial conditions: y0 has wrong dimension");
    ParticleCloud c;
    c.n_particles = cfg.n_particles;
    c.n = d.n;
    c.m = d.m;
    c.x.resize(c.n_particles * d.n);
    c.y_xi.resize(c.n_particles * d.m);
    c.y_y0.resize(c.n_particles * d.m);
    for (std::size_t i = 0; i < c.n_particles; ++i) {
        const auto p = static_cast<std::uint32_t>(i);
        rng::NormalStream slow(id, rng::Tag::kInitSlow, p, 0);
        init.slow(slow, std::span<double>(c.x).subspan(i * d.n, d.n));
        rng::NormalStream fast(id, rng::Tag::kInitFast, p, 0);
        init.fast(fast, std::span<double>(c.y_xi).subspan(i * d.m, d.m));
        std::copy(init.y0.begin(), init.y0.end(), c.y_y0.begin() + i * d.m);
    }
    for (double v : c.x)
        if (!std::isfinite(v)) throw NonFiniteError("initial slow sample is not finite");
    for (double v : c.y_xi)
        if (!std::isfinite(v)) throw NonFiniteError("initial fast sample is not finite");
    return c;
}

using detail::check_finite;
using detail::fast_update;
using detail::Scratch;
using detail::sq_norm;
using detail::view;

ParticleCloud step(const Model& model, const ParticleCloud& cloud, const SimConfig& cfg,
                   rng::StreamId id, StepTrace* trace) {
    const Dims d = model.dims();
    const std::size_t substeps = cfg.resolve_substeps(model);
    const std::size_t N = cloud.n_particles;
    const double delta = cfg.dt / static_cast<double>(substeps);
    const double drift_scale = delta / cfg.epsilon;
    const double noise_scale = 1.0 / std::sqrt(cfg.epsilon);
    const double sqrt_delta = std::sqrt(delta);

    if (trace && trace->fast_sup_sq && trace->fast_sup_sq->size() != N)
        trace->fast_sup_sq->assign(N, 0.0);
    if (trace && trace->integral && trace->integral->size() != N) trace->integral->assign(N, 0.0);

    const EmpiricalMeasure mu = cloud.slow_law();
    ParticleCloud next = cloud;
    std::vector<double> slow_drift(N * d.n, 0.0);

    for (std::size_t j = 0; j < substeps; ++j) {
        const EmpiricalMeasure nu = next.fast_law();
        const auto coeffs = model.bind(mu, nu);
        PointFunctional g;
        if (trace && trace->integrand && trace->integral) g = (*trace->integrand)(mu, nu);
        const auto micro = static_cast<std::uint32_t>(cloud.step * substeps + j);

        parallel_for(N, [&](std::size_t i) {
            Scratch h(d.n), a(d.m), s(d.m * d.d2), dw(d.d2);
            const std::span<const double> xi(next.x.data() + i * d.n, d.n);
            const std::span<double> y_xi(next.y_xi.data() + i * d.m, d.m);
            const std::span<double> y_y0(next.y_y0.data() + i * d.m, d.m);

            // Slow drift at the left point of the micro step.
            coeffs->h1(xi, y_y0, view(h));
            check_finite(view(h), "X", i, "h1");
            for (std::size_t r = 0; r < d.n; ++r) slow_drift[i * d.n + r] += h[r] * delta;
            if (g) (*trace->integral)[i] += g(xi, y_y0) * delta;

            // Both fast clouds see the same W increment.
            rng::NormalStream w(id, rng::Tag::kFastNoise, static_cast<std::uint32_t>(i), micro);
            for (double& e : dw) e = sqrt_delta * w.normal();
            fast_update(*coeffs, y_xi, view(dw), drift_scale, noise_scale, view(a), view(s), "Yxi", i);
            fast_update(*coeffs, y_y0, view(dw), drift_scale, noise_scale, view(a), view(s), "Yy0", i);
            if (trace && trace->fast_sup_sq) {
                double& sup = (*trace->fast_sup_sq)[i];
                sup = std::max(sup, sq_norm(y_xi));
            }
        });
    }

    const auto coeffs = model.bind(mu, next.fast_law());
    const double sqrt_dt = std::sqrt(cfg.dt);
    if (trace && trace->b_increments) trace->b_increments->assign(N * d.d1, 0.0);
    parallel_for(N, [&](std::size_t i) {
        Scratch g1(d.n * d.d1), db(d.d1);
        rng::NormalStream b(id, rng::Tag::kSlowNoise, static_cast<std::uint32_t>(i),
                            static_cast<std::uint32_t>(cloud.step));
        for (double& e : db) e = sqrt_dt * b.normal();
        if (trace && trace->b_increments)
            std::copy(db.begin(), db.end(), trace->b_increments->begin() + i * d.d1);
        const std::span<double> xi(next.x.data() + i * d.n, d.n);
        coeffs->gamma1(xi, view(g1));
        check_finite(view(g1), "X", i, "gamma1");
        for (std::size_t r = 0; r < d.n; ++r) {
            double noise = 0.0;
            for (std::size_t k = 0; k < d.d1; ++k) noise += g1[r * d.d1 + k] * db[k];
            xi[r] += slow_drift[i * d.n + r] + noise;
        }
        check_finite(xi, "X", i, "state");
    });
    next.step = cloud.step + 1;
    next.time = static_cast<double>(next.step) * cfg.dt;
    return next;
}

PathBundle simulate_system(const Model& model, const SimConfig& cfg, const InitialConditions& init,
                           std::uint32_t replica, const SimulateOptions& options) {
    cfg.validate();
    const Dims d = model.dims();
    const std::size_t steps = cfg.macro_steps();
    if (steps > 0) cfg.resolve_substeps(model);
    const rng::StreamId id{cfg.seed, replica};

    ParticleCloud cloud = initial_cloud(model, cfg, init, id);
    PathBundle out;
    out.n_particles = cfg.n_particles;
    out.n = d.n;
    out.m = d.m;
    out.d1 = d.d1;
    out.replica = replica;
    out.times.push_back(0.0);
    out.x.push_back(cloud.x);
    if (options.keep_fast) {
        out.y_xi.push_back(cloud.y_xi);
        out.y_y0.push_back(cloud.y_y0);
    }
    out.fast_sup_sq.resize(cfg.n_particles);
    for (std::size_t i = 0; i < cfg.n_particles; ++i)
        out.fast_sup_sq[i] = sq_norm(std::span<const double>(cloud.y_xi).subspan(i * d.m, d.m));
    if (options.integrand) out.integral.assign(cfg.n_particles, 0.0);

    for (std::size_t s = 0; s < steps; ++s) {
        std::vector<double> db;
        StepTrace trace;
        trace.b_increments = &db;
        trace.fast_sup_sq = &out.fast_sup_sq;
        if (options.integrand) {
            trace.integral = &out.integral;
            trace.integrand = options.integrand;
        }
        cloud = step(model, cloud, cfg, id, &trace);
        out.times.push_back(cloud.time);
        out.x.push_back(cloud.x);
        if (options.keep_fast) {
            out.y_xi.push_back(cloud.y_xi);
            out.y_y0.push_back(cloud.y_y0);
        }
        out.b_increments.push_back(std::move(db));
    }
    return out;
}

PointMap FastIndependentDrift::bind(const EmpiricalMeasure& mu) {
    const auto origin = model_->fast_origin();
    std::shared_ptr<const BoundCoefficients> coeffs = model_->bind(mu, origin);
    const std::vector<double> y(model_->dims().m, 0.0);
    return [coeffs, y](std::span<const double> x, std::span<double> out) {
        coeffs->h1(x, y, out);
    };
}

PathBundle simulate_averaged(const Model& model, const SimConfig& cfg, AveragedDrift& hbar,
                             const InitialConditions& init, std::uint32_t replica,
                             const std::vector<std::vector<double>>* b_increments) {
    cfg.validate();
    const Dims d = model.dims();
    const std::size_t steps = cfg.macro_steps();
    const std::size_t N = cfg.n_particles;
    if (b_increments) {
        if (b_increments->size() != steps)
            throw DimensionError("simulate_averaged: stored B covers a different grid");
        for (const auto& block : *b_increments)
            if (block.size() != N * d.d1)
                throw DimensionError("simulate_averaged: stored B block has wrong size");
    }
    const rng::StreamId id{cfg.seed, replica};
    std::vector<double> x = initial_cloud(model, cfg, init, id).x;

    PathBundle out;
    out.n_particles = N;
    out.n = d.n;
    out.m = d.m;
    out.d1 = d.d1;
    out.replica = replica;
    out.times.push_back(0.0);
    out.x.push_back(x);
    const double sqrt_dt = std::sqrt(cfg.dt);
    const auto origin = model.fast_origin();

    for (std::size_t s = 0; s < steps; ++s) {
        const EmpiricalMeasure mu = EmpiricalMeasure::uniform(x, d.n);
        const PointMap drift = hbar.bind(mu);
        const auto coeffs = model.bind(mu, origin);
        std::vector<double> db(N * d.d1);
        if (b_increments) {
            db = (*b_increments)[s];
        } else {
            for (std::size_t i = 0; i < N; ++i) {
                rng::NormalStream b(id, rng::Tag::kSlowNoise, static_cast<std::uint32_t>(i),
                                    static_cast<std::uint32_t>(s));
                for (std::size_t k = 0; k < d.d1; ++k) db[i * d.d1 + k] = sqrt_dt * b.normal();
            }
        }
        parallel_for(N, [&](std::size_t i) {
            Scratch h(d.n), g1(d.n * d.d1);
            const std::span<double> xi(x.data() + i * d.n, d.n);
            drift(xi, view(h));
            check_finite(view(h), "Xbar", i, "hbar1");
            coeffs->gamma1(xi, view(g1));
            check_finite(view(g1), "Xbar", i, "gamma1");
            for (std::size_t r = 0; r < d.n; ++r) {
                double noise = 0.0;
                for (std::size_t k = 0; k < d.d1; ++k) noise += g1[r * d.d1 + k] * db[i * d.d1 + k];
                xi[r] += h[r] * cfg.dt + noise;
            }
            check_finite(xi, "Xbar", i, "state");
        });
        out.times.push_back(static_cast<double>(s + 1) * cfg.dt);
        out.x.push_back(x);
        out.b_increments.push_back(std::move(db));
    }
    return out;
}

CoupledPaths simulate_coupled_averaged(const Model& model, const SimConfig& cfg,
                                       AveragedDrift& hbar, const InitialConditions& init,
                                       std::uint32_t replica, const SimulateOptions& options) {
    CoupledPaths out;
    out.system = simulate_system(model, cfg, init, replica, options);
    out.averaged = simulate_averaged(model, cfg, hbar, init, replica, &out.system.b_increments);
    return out;
}

void write_paths_csv(std::ostream& out, std::span<const PathBundle> bundles) {
    if (bundles.empty()) return;
    const PathBundle& first = bundles.front();
    out << "replica,particle,t";
    for (std::size_t r = 0; r < first.n; ++r) out << ",x" << r;
    for (std::size_t r = 0; r < first.m; ++r) out << ",yxi" << r;
    for (std::size_t r = 0; r < first.m; ++r) out << ",yy0" << r;
    out << '\n';
    out.precision(17);
    for (const PathBundle& b : bundles) {
        const bool fast = !b.y_xi.empty();
        for (std::size_t t = 0; t < b.times.size(); ++t)
            for (std::size_t i = 0; i < b.n_particles; ++i) {
                out << b.replica << ',' << i << ',' << b.times[t];
                for (std::size_t r = 0; r < b.n; ++r) out << ',' << b.x[t][i * b.n + r];
                for (std::size_t r = 0; r < b.m; ++r) {
                    out << ',';
                    if (fast) out << b.y_xi[t][i * b.m + r];
                }
                for (std::size_t r = 0; r < b.m; ++r) {
                    out << ',';
                    if (fast) out << b.y_y0[t][i * b.m + r];
                }
                out << '\n';
            }
    }
}

}  // namespace mvsim
