#include "mvsim/limit.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <string>

#include "mvsim/error.hpp"
#include "mvsim/parallel.hpp"
#include "mvsim/rng.hpp"

namespace mvsim {

LimitCoefficients LimitCoefficients::zero(const Dims& dims) {
    LimitCoefficients c;
    c.dims = dims;
    c.bind = [](const EmpiricalMeasure&, std::size_t) {
        BoundLimitCoefficients b;
        const auto fill = [](std::span<const double>, std::span<double> out) {
            std::fill(out.begin(), out.end(), 0.0);
        };
        const auto fill_atom = [](std::span<const double>, std::size_t, std::span<double> out) {
            std::fill(out.begin(), out.end(), 0.0);
        };
        b.dx_hbar = fill;
        b.dmu_hbar = fill_atom;
        b.dx_gamma1 = fill;
        b.dmu_gamma1 = fill_atom;
        b.upsilon = fill;
        b.drift_average = fill;
        b.diffusion_average = fill;
        return b;
    };
    return c;
}

namespace {

struct UpsilonTable {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t nodes = 0;
    std::size_t step = 0;
    std::vector<double> values;  // nodes x n x n
};

double rms(std::span<const double> u, std::size_t rows) {
    double s = 0.0;
    for (double v : u) s += v * v;
    return std::sqrt(s / static_cast<double>(rows));
}

}  // namespace

LimitCoefficients numerical_limit_coefficients(std::shared_ptr<const Model> model,
                                               std::shared_ptr<AveragedCache> cache,
                                               const LimitOptions& options) {
    if (!model || !cache) throw ConfigError("limit coefficients: null model or cache");
    if (options.upsilon_nodes < 2) throw ConfigError("limit coefficients: upsilon_nodes < 2");
    if (options.upsilon_stride == 0) throw ConfigError("limit coefficients: upsilon_stride = 0");
    if (!(options.direction_step > 0.0) || !(options.gamma_step > 0.0))
        throw ConfigError("limit coefficients: steps must be positive");
    const Dims dims = model->dims();
    if (cache->functional().dim != dims.n)
        throw DimensionError("limit coefficients: cache functional is not R^n valued");

    struct Shared {
        std::mutex mutex;
        std::shared_ptr<const UpsilonTable> table;
    };
    auto shared = std::make_shared<Shared>();

    LimitCoefficients out;
    out.dims = dims;
    out.bind = [model, cache, options, dims, shared](const EmpiricalMeasure& mu,
                                                     std::size_t step) {
        const std::size_t n = dims.n;
        const std::size_t d1 = dims.d1;
        auto law = std::make_shared<const EmpiricalMeasure>(mu);
        BoundLimitCoefficients b;

        const PointMap hbar = cache->bind(mu);
        const double hx = options.dx_step > 0.0 ? options.dx_step : cache->grid_step(mu);
        b.dx_hbar = [hbar, hx, n](std::span<const double> x, std::span<double> res) {
            std::vector<double> xs(x.begin(), x.end()), up(n), down(n);
            for (std::size_t k = 0; k < n; ++k) {
                xs[k] = x[k] + hx;
                hbar(xs, up);
                xs[k] = x[k] - hx;
                hbar(xs, down);
                xs[k] = x[k];
                for (std::size_t r = 0; r < n; ++r) res[r * n + k] = (up[r] - down[r]) / (2.0 * hx);
            }
        };

        const SlowFunctional& functional = cache->functional();
        b.dmu_hbar = [cache, functional, law, n, h = options.lions_step](
                         std::span<const double> x, std::size_t atom, std::span<double> res) {
            for (std::size_t r = 0; r < n; ++r) {
                const MeasureFunctional f = [&](const EmpiricalMeasure& m) {
                    return average_over_invariant(functional, x, m, *cache->invariant_uncached(m))[r];
                };
                const auto grad = lions_derivative(f, *law, atom, h);
                for (std::size_t k = 0; k < n; ++k) res[r * n + k] = grad[k];
            }
        };

        std::shared_ptr<const BoundCoefficients> bound = model->bind(mu, model->fast_origin());
        b.dx_gamma1 = [bound, n, d1, rel = options.gamma_step](std::span<const double> x,
                                                                std::span<double> res) {
            std::vector<double> xs(x.begin(), x.end()), up(n * d1), down(n * d1);
            for (std::size_t k = 0; k < n; ++k) {
                const double h = rel * (1.0 + std::abs(x[k]));
                xs[k] = x[k] + h;
                bound->gamma1(xs, up);
                xs[k] = x[k] - h;
                bound->gamma1(xs, down);
                xs[k] = x[k];
                for (std::size_t e = 0; e < n * d1; ++e) res[e * n + k] = (up[e] - down[e]) / (2.0 * h);
            }
        };
        b.dmu_gamma1 = [model, law, n, d1, h = options.lions_step](
                           std::span<const double> x, std::size_t atom, std::span<double> res) {
            for (std::size_t e = 0; e < n * d1; ++e) {
                const MeasureFunctional f = [&](const EmpiricalMeasure& m) {
                    return model->gamma1(x, m)[e];
                };
                const auto grad = lions_derivative(f, *law, atom, h);
                for (std::size_t k = 0; k < n; ++k) res[e * n + k] = grad[k];
            }
        };

        // Directional derivative along the whole cloud: the averaged mu-term is
        // d/dtau of the coefficient under the law displaced by tau * u.
        const auto [lo, hi] = AveragedCache::grid_range(mu);
        b.drift_average = [cache, law, n, lo, hi, step_size = options.direction_step](
                              std::span<const double> u, std::span<double> res) {
            const std::size_t N = law->size();
            const double scale = rms(u, N);
            if (scale == 0.0) {
                std::fill(res.begin(), res.end(), 0.0);
                return;
            }
            const double tau = step_size / scale;
            const PointMap up = cache->bind_uncached(law->displaced(u, tau), lo, hi);
            const PointMap down = cache->bind_uncached(law->displaced(u, -tau), lo, hi);
            parallel_for(N, [&](std::size_t i) {
                std::vector<double> a(n), c(n);
                up(law->atom(i), a);
                down(law->atom(i), c);
                for (std::size_t r = 0; r < n; ++r) res[i * n + r] = (a[r] - c[r]) / (2.0 * tau);
            });
        };
        b.diffusion_average = [model, law, n, d1, step_size = options.direction_step](
                                  std::span<const double> u, std::span<double> res) {
            const std::size_t N = law->size();
            const double scale = rms(u, N);
            if (scale == 0.0) {
                std::fill(res.begin(), res.end(), 0.0);
                return;
            }
            const double tau = step_size / scale;
            const auto up = model->bind(law->displaced(u, tau), model->fast_origin());
            const auto down = model->bind(law->displaced(u, -tau), model->fast_origin());
            parallel_for(N, [&](std::size_t i) {
                std::vector<double> a(n * d1), c(n * d1);
                up->gamma1(law->atom(i), a);
                down->gamma1(law->atom(i), c);
                for (std::size_t e = 0; e < n * d1; ++e)
                    res[i * n * d1 + e] = (a[e] - c[e]) / (2.0 * tau);
            });
        };

        if (n == 1) {
            std::shared_ptr<const UpsilonTable> table;
            {
                std::lock_guard lock(shared->mutex);
                table = shared->table;
            }
            if (!table || step < table->step || step >= table->step + options.upsilon_stride) {
                auto fresh = std::make_shared<UpsilonTable>();
                fresh->lo = lo;
                fresh->hi = hi;
                fresh->nodes = options.upsilon_nodes;
                fresh->step = step;
                std::vector<double> xs(fresh->nodes);
                for (std::size_t g = 0; g < fresh->nodes; ++g)
                    xs[g] = lo + (hi - lo) * static_cast<double>(g) /
                                     static_cast<double>(fresh->nodes - 1);
                const auto inv = cache->invariant(mu);
                for (const auto& est : estimate_upsilon_many(*model, xs, mu, *inv, options.upsilon))
                    fresh->values.push_back(est.matrix[0]);
                table = fresh;
                std::lock_guard lock(shared->mutex);
                shared->table = table;
            }
            b.upsilon = [table](std::span<const double> x, std::span<double> res) {
                const double pos = std::clamp((x[0] - table->lo) / (table->hi - table->lo), 0.0, 1.0) *
                                   static_cast<double>(table->nodes - 1);
                const std::size_t i = std::min(static_cast<std::size_t>(pos), table->nodes - 2);
                const double t = pos - static_cast<double>(i);
                res[0] = (1.0 - t) * table->values[i] + t * table->values[i + 1];
            };
        } else {
            b.upsilon = [](std::span<const double>, std::span<double>) {
                throw UnsupportedError("upsilon table: only one-dimensional slow states");
            };
        }
        return b;
    };
    return out;
}

PathBundle simulate_limit_U(const Model& model, const SimConfig& cfg,
                            const LimitCoefficients& coeffs, const PathBundle& xbar) {
    const Dims d = model.dims();
    if (coeffs.dims.n != d.n || coeffs.dims.d1 != d.d1 || xbar.n != d.n || xbar.d1 != d.d1)
        throw DimensionError("simulate_limit_U: dimensions of model, coefficients and path differ");
    if (!coeffs.bind) throw ConfigError("simulate_limit_U: coefficients not set");
    if (xbar.x.size() < 2 || xbar.b_increments.size() + 1 != xbar.x.size())
        throw ConfigError("simulate_limit_U: averaged run must carry its B increments");
    const std::size_t N = xbar.n_particles;
    const std::size_t n = d.n;
    const std::size_t d1 = d.d1;
    const rng::StreamId id{cfg.seed, xbar.replica};

    PathBundle out;
    out.n_particles = N;
    out.n = n;
    out.m = d.m;
    out.d1 = d1;
    out.replica = xbar.replica;
    out.times = xbar.times;

    std::vector<double> u(N * n, 0.0);
    out.x.push_back(u);
    std::vector<double> drift_avg(N * n), diff_avg(N * n * d1);
    for (std::size_t s = 0; s + 1 < xbar.x.size(); ++s) {
        const double dt = xbar.times[s + 1] - xbar.times[s];
        const EmpiricalMeasure mu = EmpiricalMeasure::uniform(xbar.x[s], n);
        const BoundLimitCoefficients bound = coeffs.bind(mu, s);

        if (bound.drift_average) {
            bound.drift_average(u, drift_avg);
        } else {
            parallel_for(N, [&](std::size_t i) {
                std::vector<double> mat(n * n);
                std::fill_n(drift_avg.begin() + i * n, n, 0.0);
                for (std::size_t j = 0; j < N; ++j) {
                    bound.dmu_hbar(mu.atom(i), j, mat);
                    for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t k = 0; k < n; ++k)
                            drift_avg[i * n + r] += mu.weight(j) * mat[r * n + k] * u[j * n + k];
                }
            }, 1);
        }
        if (bound.diffusion_average) {
            bound.diffusion_average(u, diff_avg);
        } else {
            parallel_for(N, [&](std::size_t i) {
                std::vector<double> mat(n * d1 * n);
                std::fill_n(diff_avg.begin() + i * n * d1, n * d1, 0.0);
                for (std::size_t j = 0; j < N; ++j) {
                    bound.dmu_gamma1(mu.atom(i), j, mat);
                    for (std::size_t e = 0; e < n * d1; ++e)
                        for (std::size_t k = 0; k < n; ++k)
                            diff_avg[i * n * d1 + e] += mu.weight(j) * mat[e * n + k] * u[j * n + k];
                }
            }, 1);
        }

        const auto& db = xbar.b_increments[s];
        std::vector<double> next(N * n);
        parallel_for(N, [&](std::size_t i) {
            const auto x = mu.atom(i);
            const std::span<const double> ui(u.data() + i * n, n);
            std::vector<double> a(n * n), g(n * d1 * n), ups(n * n), dv(n);
            bound.dx_hbar(x, a);
            bound.dx_gamma1(x, g);
            bound.upsilon(x, ups);
            rng::NormalStream vs(id, rng::Tag::kLimitNoise, static_cast<std::uint32_t>(i),
                                 static_cast<std::uint32_t>(s));
            for (auto& v : dv) v = std::sqrt(dt) * vs.normal();
            for (std::size_t r = 0; r < n; ++r) {
                double drift = drift_avg[i * n + r];
                for (std::size_t k = 0; k < n; ++k) drift += a[r * n + k] * ui[k];
                double value = ui[r] + drift * dt;
                for (std::size_t c = 0; c < d1; ++c) {
                    const std::size_t e = r * d1 + c;
                    double sigma = diff_avg[i * n * d1 + e];
                    for (std::size_t k = 0; k < n; ++k) sigma += g[e * n + k] * ui[k];
                    value += sigma * db[i * d1 + c];
                }
                for (std::size_t k = 0; k < n; ++k) value += ups[r * n + k] * dv[k];
                if (!std::isfinite(value))
                    throw NonFiniteError("simulate_limit_U: non-finite state at particle " +
                                         std::to_string(i) + ", step " + std::to_string(s));
                next[i * n + r] = value;
            }
        });
        u = std::move(next);
        out.x.push_back(u);
    }
    return out;
}

DeviationPaths deviation_paths(const PathBundle& system, const PathBundle& averaged,
                               double epsilon) {
    if (!(epsilon > 0.0)) throw ConfigError("deviation_paths: epsilon must be positive");
    if (system.n_particles != averaged.n_particles || system.n != averaged.n ||
        system.times != averaged.times || system.x.size() != averaged.x.size())
        throw ConfigError("deviation_paths: grid mismatch between the two runs");
    if (system.x.empty() || system.x.front() != averaged.x.front())
        throw ConfigError("deviation_paths: runs do not share initial samples");
    DeviationPaths out;
    out.n_particles = system.n_particles;
    out.n = system.n;
    out.epsilon = epsilon;
    out.times = system.times;
    const double scale = 1.0 / std::sqrt(epsilon);
    out.u.reserve(system.x.size());
    for (std::size_t t = 0; t < system.x.size(); ++t) {
        std::vector<double> block(system.x[t].size());
        for (std::size_t k = 0; k < block.size(); ++k)
            block[k] = (system.x[t][k] - averaged.x[t][k]) * scale;
        out.u.push_back(std::move(block));
    }
    return out;
}

}  // namespace mvsim
