#include "mvsim/frozen.hpp"

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

FrozenInit FrozenInit::standard(std::size_t m) {
    return {InitialConditions::gaussian(0.0, 1.0), std::vector<double>(m, 0.0)};
}

FrozenInit FrozenInit::at_point(std::vector<double> y0) {
    return {InitialConditions::constant(y0), y0};
}

double FrozenOptions::resolve_dt(const Model& model) const {
    const double h = dt > 0.0 ? dt : 0.01 / model.fast_rate();
    if (!(h > 0.0) || !std::isfinite(h)) throw ConfigError("frozen: step must be positive");
    return h;
}

namespace {

// Antithetic partner bookkeeping: the second half of the cloud replays the
// first half's streams with flipped signs.
struct Source {
    std::uint32_t particle;
    bool negate;
};

Source source_of(std::size_t i, std::size_t n, bool antithetic) {
    const std::size_t half = n / 2;
    if (antithetic && i >= half && i - half < half)
        return {static_cast<std::uint32_t>(i - half), true};
    return {static_cast<std::uint32_t>(i), false};
}

}  // namespace

FrozenSimulator::FrozenSimulator(const Model& model, EmpiricalMeasure mu, const FrozenInit& init,
                                 const FrozenOptions& options)
    : model_(model),
      mu_(std::move(mu)),
      options_(options),
      n_particles_(options.n_particles),
      m_(model.dims().m),
      d2_(model.dims().d2),
      dt_(options.resolve_dt(model)) {
    if (n_particles_ < 1) throw ConfigError("frozen: need at least one particle");
    if (mu_.dim() != model.dims().n) throw DimensionError("frozen: mu has wrong dimension");
    if (init.y0.size() != m_) throw DimensionError("frozen: y0 has wrong dimension");
    y_xi_.resize(n_particles_ * m_);
    y_y0_.resize(n_particles_ * m_);
    const rng::StreamId id{options.seed, options.replica};
    for (std::size_t i = 0; i < n_particles_; ++i) {
        const Source src = source_of(i, n_particles_, options.antithetic);
        rng::NormalStream rs(id, rng::Tag::kFrozenInit, src.particle, 0, src.negate);
        init.xi(rs, std::span<double>(y_xi_).subspan(i * m_, m_));
        std::copy(init.y0.begin(), init.y0.end(), y_y0_.begin() + i * m_);
    }
    detail::check_finite(y_xi_, "initial frozen state", 0, "xi");
}

void FrozenSimulator::advance(std::size_t steps) {
    const rng::StreamId id{options_.seed, options_.replica};
    const double sqrt_dt = std::sqrt(dt_);
    for (std::size_t s = 0; s < steps; ++s) {
        const auto coeffs = model_.bind(mu_, fast_law());
        const auto counter = static_cast<std::uint32_t>(step_);
        parallel_for(n_particles_, [&](std::size_t i) {
            Scratch a(m_), g(m_ * d2_), dw(d2_);
            const Source src = source_of(i, n_particles_, options_.antithetic);
            rng::NormalStream w(id, options_.tag, src.particle, counter, src.negate);
            for (double& e : dw) e = sqrt_dt * w.normal();
            detail::fast_update(*coeffs, std::span<double>(y_xi_).subspan(i * m_, m_), view(dw),
                                dt_, 1.0, view(a), view(g), "frozen Yxi", i);
            detail::fast_update(*coeffs, std::span<double>(y_y0_).subspan(i * m_, m_), view(dw),
                                dt_, 1.0, view(a), view(g), "frozen Yy0", i);
        });
        ++step_;
    }
}

FrozenPath simulate_frozen(const Model& model, const EmpiricalMeasure& mu, const FrozenInit& init,
                           double horizon, const FrozenOptions& options) {
    if (!(horizon >= 0.0)) throw ConfigError("frozen: horizon must be non-negative");
    FrozenSimulator sim(model, mu, init, options);
    const auto steps = static_cast<std::size_t>(std::llround(horizon / sim.dt()));
    const std::size_t every = std::max<std::size_t>(options.record_every, 1);
    FrozenPath path;
    path.n_particles = sim.n_particles();
    path.m = model.dims().m;
    auto record = [&] {
        path.times.push_back(sim.time());
        path.y_xi.push_back(sim.y_xi());
        path.y_y0.push_back(sim.y_y0());
    };
    record();
    for (std::size_t done = 0; done < steps;) {
        const std::size_t chunk = std::min(every, steps - done);
        sim.advance(chunk);
        done += chunk;
        record();
    }
    return path;
}

MixingReport mixing_rate(const Model& model, const EmpiricalMeasure& mu, std::span<const double> a,
                         std::span<const double> b, double horizon, const MixingOptions& options) {
    const std::size_t m = model.dims().m;
    if (a.size() != m || b.size() != m) throw DimensionError("mixing_rate: start has wrong dimension");
    if (std::equal(a.begin(), a.end(), b.begin()))
        throw EstimationError("mixing_rate: identical starts give a zero gap; rate undefined");
    FrozenOptions fo;
    fo.n_particles = options.n_particles;
    fo.dt = options.dt;
    fo.seed = options.seed;
    // Common W: both simulators address the same streams.
    FrozenSimulator sa(model, mu, FrozenInit::at_point({a.begin(), a.end()}), fo);
    FrozenSimulator sb(model, mu, FrozenInit::at_point({b.begin(), b.end()}), fo);
    const auto steps = static_cast<std::size_t>(std::ceil(horizon / sa.dt()));
    if (steps < 2) throw ConfigError("mixing_rate: horizon shorter than two steps");

    MixingReport report;
    report.guaranteed_rate = std::numeric_limits<double>::quiet_NaN();
    auto gap = [&] {
        double s = 0.0;
        for (std::size_t k = 0; k < sa.y_xi().size(); ++k) {
            const double d = sa.y_xi()[k] - sb.y_xi()[k];
            s += d * d;
        }
        return s / static_cast<double>(sa.n_particles());
    };
    report.times.push_back(0.0);
    report.gaps.push_back(gap());
    for (std::size_t s = 0; s < steps; ++s) {
        sa.advance(1);
        sb.advance(1);
        const double g = gap();
        if (!(g > 0.0)) break;  // collapsed exactly; the rest carries no information
        report.times.push_back(sa.time());
        report.gaps.push_back(g);
    }
    if (report.gaps.size() < 3) throw EstimationError("mixing_rate: gap vanished immediately");
    std::vector<double> logs(report.gaps.size());
    for (std::size_t k = 0; k < logs.size(); ++k) logs[k] = std::log(report.gaps[k]);
    const LinearFit fit = fit_line(report.times, logs);
    if (!(fit.slope < 0.0)) {
        std::ostringstream msg;
        msg << "mixing_rate: model not contracting (fitted log-gap slope " << fit.slope << ")";
        throw EstimationError(msg.str());
    }
    report.rate = -fit.slope;
    report.intercept = fit.intercept;
    report.r_squared = fit.r_squared;
    if (options.probe) {
        const auto& p = *options.probe;
        report.guaranteed_rate = p.beta1 - p.beta2 - p.lipschitz_h2_gamma2;
        report.meets_guarantee = report.rate >= report.guaranteed_rate;
    }
    return report;
}

double measure_contraction_rate(const Model& model, const EmpiricalMeasure& mu, std::uint64_t seed) {
    const std::size_t m = model.dims().m;
    const std::vector<double> a(m, -1.0), b(m, 1.0);
    MixingOptions opts;
    opts.seed = seed;
    return mixing_rate(model, mu, a, b, 8.0 / model.fast_rate(), opts).rate;
}

InvariantEstimate estimate_invariant(const Model& model, const EmpiricalMeasure& mu,
                                     const InvariantOptions& options) {
    const std::size_t m = model.dims().m;
    if (options.samples_per_particle < 2)
        throw ConfigError("estimate_invariant: need at least two samples per particle");
    const double rate = options.rate > 0.0 ? options.rate
                                           : measure_contraction_rate(model, mu, options.seed);
    FrozenOptions fo;
    fo.n_particles = options.n_particles;
    fo.dt = options.dt;
    fo.seed = options.seed;
    fo.replica = options.replica;
    fo.antithetic = options.antithetic;
    const FrozenInit init =
        options.init ? *options.init : FrozenInit::at_point(std::vector<double>(m, 0.0));
    FrozenSimulator sim(model, mu, init, fo);

    const double burn = options.burn_in_rates / rate;
    const double thin = options.thinning_rates / rate;
    const auto burn_steps = static_cast<std::size_t>(std::ceil(burn / sim.dt()));
    const auto thin_steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(thin / sim.dt())));
    sim.advance(burn_steps);
    const double burned = sim.time();

    const std::size_t S = options.samples_per_particle;
    const std::size_t N = sim.n_particles();
    std::vector<double> atoms;
    atoms.reserve(S * N * m);
    for (std::size_t s = 0; s < S; ++s) {
        sim.advance(thin_steps);
        atoms.insert(atoms.end(), sim.y_xi().begin(), sim.y_xi().end());
    }

    // Batches are independent units: single particles, or antithetic pairs.
    const std::size_t half = options.antithetic ? N / 2 : 0;
    const std::size_t units = N - half;
    auto members = [&](std::size_t u, auto&& fn) {
        fn(u);
        if (u < half) fn(u + half);
    };
    struct Summary {
        double mean, stderr_, early, late, drift_se;
    };
    // f(particle, sample) -> value; per-unit time averages, plus the paired
    // late-minus-early difference.
    auto summarize = [&](auto&& f) {
        std::vector<double> avg(units), diff(units), early(units), late(units);
        const std::size_t h = S / 2;
        for (std::size_t u = 0; u < units; ++u) {
            double e = 0.0, l = 0.0, count = 0.0;
            members(u, [&](std::size_t i) {
                for (std::size_t s = 0; s < S; ++s) (s < h ? e : l) += f(i, s);
                count += 1.0;
            });
            e /= count * static_cast<double>(h);
            l /= count * static_cast<double>(S - h);
            early[u] = e;
            late[u] = l;
            avg[u] = (e * static_cast<double>(h) + l * static_cast<double>(S - h)) / static_cast<double>(S);
            diff[u] = l - e;
        }
        return Summary{sample_mean(avg), standard_error(avg), sample_mean(early), sample_mean(late),
                       standard_error(diff)};
    };
    auto value = [&](std::size_t i, std::size_t s, std::size_t r) { return atoms[(s * N + i) * m + r]; };

    auto check = [&](const Summary& sm, const char* what) {
        const double floor = 1e-14 + 1e-9 * std::abs(sm.mean);
        if (std::abs(sm.late - sm.early) > options.stationarity_sigmas * sm.drift_se + floor) {
            std::ostringstream msg;
            msg << "estimate_invariant: non-stationary " << what << " (early " << sm.early
                << ", late " << sm.late << "); increase burn-in or horizon";
            throw EstimationError(msg.str());
        }
    };

    InvariantEstimate est{.eta = EmpiricalMeasure::uniform(atoms, m)};
    est.burn_in = burned;
    est.horizon = sim.time();
    est.thinning = static_cast<double>(thin_steps) * sim.dt();
    est.rate = rate;
    est.batches = units;
    for (std::size_t r = 0; r < m; ++r) {
        const Summary sm = summarize([&](std::size_t i, std::size_t s) { return value(i, s, r); });
        check(sm, "mean");
        est.mean.push_back(sm.mean);
        est.mean_stderr.push_back(sm.stderr_);
    }
    const Summary sq = summarize([&](std::size_t i, std::size_t s) {
        double acc = 0.0;
        for (std::size_t r = 0; r < m; ++r) acc += value(i, s, r) * value(i, s, r);
        return acc;
    });
    check(sq, "second moment");
    est.second_moment = sq.mean;
    est.second_moment_stderr = sq.stderr_;
    return est;
}

SlowFunctional slow_drift_functional(std::shared_ptr<const Model> model) {
    SlowFunctional f;
    f.dim = model->dims().n;
    f.bind = [model](const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) -> BoundField {
        std::shared_ptr<const BoundCoefficients> c = model->bind(mu, nu);
        return [c](std::span<const double> x, std::span<const double> y, std::span<double> out) {
            c->h1(x, y, out);
        };
    };
    return f;
}

namespace {

std::vector<double> average_bound(const BoundField& field, std::size_t dim,
                                  std::span<const double> x, const EmpiricalMeasure& eta) {
    std::vector<double> acc(dim, 0.0);
    Scratch v(dim);
    for (std::size_t j = 0; j < eta.size(); ++j) {
        field(x, eta.atom(j), view(v));
        const double w = eta.weight(j);
        for (std::size_t r = 0; r < dim; ++r) acc[r] += w * v[r];
    }
    for (double e : acc)
        if (!std::isfinite(e)) throw NonFiniteError("average over invariant measure is not finite");
    return acc;
}

double norm(std::span<const double> v) { return std::sqrt(detail::sq_norm(v)); }

}  // namespace

std::vector<double> average_over_invariant(const SlowFunctional& f, std::span<const double> x,
                                           const EmpiricalMeasure& mu,
                                           const InvariantEstimate& inv) {
    return average_bound(f.bind(mu, inv.eta), f.dim, x, inv.eta);
}

std::vector<double> estimate_hbar(const Model& model, std::span<const double> x,
                                  const EmpiricalMeasure& mu, const InvariantEstimate& inv) {
    if (x.size() != model.dims().n) throw DimensionError("estimate_hbar: x has wrong dimension");
    const auto c = model.bind(mu, inv.eta);
    const BoundField f = [&c](std::span<const double> xx, std::span<const double> y,
                              std::span<double> out) { c->h1(xx, y, out); };
    return average_bound(f, model.dims().n, x, inv.eta);
}

double centering_check(const Model& model, std::span<const double> x, const EmpiricalMeasure& mu,
                       const InvariantEstimate& inv) {
    const auto hbar = estimate_hbar(model, x, mu, inv);
    const auto c = model.bind(mu, inv.eta);
    const BoundField centered = [&](std::span<const double> xx, std::span<const double> y,
                                    std::span<double> out) {
        c->h1(xx, y, out);
        for (std::size_t r = 0; r < out.size(); ++r) out[r] -= hbar[r];
    };
    return norm(average_bound(centered, model.dims().n, x, inv.eta));
}

double centering_residual(const SlowFunctional& g, std::span<const double> x,
                          const EmpiricalMeasure& mu, const InvariantEstimate& inv) {
    return norm(average_over_invariant(g, x, mu, inv));
}

// ---------------------------------------------------------------------------

std::vector<long long> moment_fingerprint(const EmpiricalMeasure& mu) {
    std::vector<long long> key;
    for (std::size_t r = 0; r < mu.dim(); ++r)
        for (int k = 1; k <= 4; ++k) {
            const double moment = mu.expect([&](std::span<const double> a) { return std::pow(a[r], k); });
            key.push_back(std::llround(moment * 1e6));
        }
    return key;
}

AveragedCache::AveragedCache(std::shared_ptr<const Model> model, SlowFunctional functional,
                             CacheOptions options)
    : model_(std::move(model)), functional_(std::move(functional)), options_(std::move(options)) {
    if (options_.grid_nodes < 2) throw ConfigError("averaged cache: need at least two grid nodes");
}

AveragedCache::AveragedCache(std::shared_ptr<const Model> model, CacheOptions options)
    : AveragedCache(model, slow_drift_functional(model), std::move(options)) {
    direct_ = model_->slow_drift_ignores_fast();
}

double AveragedCache::resolve_rate(const EmpiricalMeasure& mu) {
    double rate = options_.invariant.rate;
    if (rate <= 0.0) {
        std::lock_guard lock(mutex_);
        rate = rate_;
    }
    if (rate <= 0.0) {
        rate = measure_contraction_rate(*model_, mu, options_.invariant.seed);
        std::lock_guard lock(mutex_);
        if (options_.reuse_rate && rate_ <= 0.0) rate_ = rate;
    }
    return rate;
}

std::pair<double, double> AveragedCache::grid_range(const EmpiricalMeasure& mu) {
    const auto [lo_it, hi_it] = std::minmax_element(mu.atoms().begin(), mu.atoms().end());
    const double pad = 0.25 * (*hi_it - *lo_it) + 0.5;
    return {*lo_it - pad, *hi_it + pad};
}

double AveragedCache::grid_step(const EmpiricalMeasure& mu) const {
    const auto [lo, hi] = grid_range(mu);
    return (hi - lo) / static_cast<double>(options_.grid_nodes - 1);
}

std::shared_ptr<const InvariantEstimate> AveragedCache::invariant_uncached(const EmpiricalMeasure& mu) {
    InvariantOptions io = options_.invariant;
    io.rate = resolve_rate(mu);
    return std::make_shared<const InvariantEstimate>(estimate_invariant(*model_, mu, io));
}

std::shared_ptr<AveragedCache::Entry> AveragedCache::build_entry(const EmpiricalMeasure& mu,
                                                                 std::pair<double, double> range) {
    auto entry = std::make_shared<Entry>();
    if (direct_) return entry;
    entry->inv = invariant_uncached(mu);
    if (model_->dims().n != 1) return entry;
    entry->lo = range.first;
    entry->hi = range.second;
    const std::size_t G = options_.grid_nodes;
    const std::size_t dim = functional_.dim;
    entry->values.resize(G * dim);
    const BoundField field = functional_.bind(mu, entry->inv->eta);
    parallel_for(
        G,
        [&](std::size_t g) {
            const double x =
                entry->lo + (entry->hi - entry->lo) * static_cast<double>(g) / static_cast<double>(G - 1);
            const auto v = average_bound(field, dim, std::span<const double>(&x, 1), entry->inv->eta);
            std::copy(v.begin(), v.end(), entry->values.begin() + g * dim);
        },
        8);
    return entry;
}

std::shared_ptr<const AveragedCache::Entry> AveragedCache::entry_for(const EmpiricalMeasure& mu) {
    if (direct_) return std::make_shared<const Entry>();  // no averaging, nothing to tabulate
    const auto key = moment_fingerprint(mu);
    {
        std::lock_guard lock(mutex_);
        const auto it = entries_.find(key);
        if (it != entries_.end()) return it->second;
    }
    auto entry = build_entry(mu, grid_range(mu));
    std::lock_guard lock(mutex_);
    ++builds_;
    entries_[key] = entry;  // last write wins
    return entry;
}

std::shared_ptr<const InvariantEstimate> AveragedCache::invariant(const EmpiricalMeasure& mu) {
    if (direct_) return invariant_uncached(mu);
    return entry_for(mu)->inv;
}

PointMap AveragedCache::make_map(std::shared_ptr<const Entry> entry, const EmpiricalMeasure& mu) const {
    const std::size_t dim = functional_.dim;
    const std::size_t G = options_.grid_nodes;
    if (direct_) {
        auto field = std::make_shared<const BoundField>(functional_.bind(mu, model_->fast_origin()));
        return [field, m = model_->dims().m](std::span<const double> x, std::span<double> out) {
            const std::vector<double> y(m, 0.0);
            (*field)(x, y, out);
        };
    }
    auto field = std::make_shared<const BoundField>(functional_.bind(mu, entry->inv->eta));
    return [entry, field, dim, G](std::span<const double> x, std::span<double> out) {
        if (x.size() == 1 && !entry->values.empty() && x[0] >= entry->lo && x[0] <= entry->hi) {
            const double pos = (x[0] - entry->lo) / (entry->hi - entry->lo) * static_cast<double>(G - 1);
            const std::size_t i = std::min(static_cast<std::size_t>(pos), G - 2);
            const double t = pos - static_cast<double>(i);
            for (std::size_t r = 0; r < dim; ++r)
                out[r] = (1.0 - t) * entry->values[i * dim + r] + t * entry->values[(i + 1) * dim + r];
            return;
        }
        const auto v = average_bound(*field, dim, x, entry->inv->eta);
        std::copy(v.begin(), v.end(), out.begin());
    };
}

PointMap AveragedCache::bind(const EmpiricalMeasure& mu) { return make_map(entry_for(mu), mu); }

PointMap AveragedCache::bind_uncached(const EmpiricalMeasure& mu, double lo, double hi) {
    if (!(hi > lo)) throw ConfigError("averaged cache: empty grid range");
    return make_map(build_entry(mu, {lo, hi}), mu);
}

}  // namespace mvsim
