#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <utility>
#include <span>
#include <vector>

#include "mvsim/engine.hpp"
#include "mvsim/measure.hpp"
#include "mvsim/model.hpp"
#include "mvsim/rng.hpp"

namespace mvsim {

/// Starting law of the frozen fast pair: the xi cloud draws from `xi`, the
/// second cloud starts at the point y0.
struct FrozenInit {
    StateSampler xi;
    std::vector<double> y0;

    /// xi ~ N(0, I), y0 = 0.
    static FrozenInit standard(std::size_t m);
    /// Both clouds start at the point y0.
    static FrozenInit at_point(std::vector<double> y0);
};

struct FrozenOptions {
    std::size_t n_particles = 256;
    /// Fast-time step; 0 selects 0.01 / model.fast_rate().
    double dt = 0.0;
    std::uint64_t seed = 1;
    std::uint32_t replica = 0;
    /// Particles i and i + N/2 see negated normals (initial draws included).
    bool antithetic = false;
    /// Keep every k-th step in simulate_frozen.
    std::size_t record_every = 1;
    rng::Tag tag = rng::Tag::kFrozen;

    double resolve_dt(const Model& model) const;
};

/// Frozen fast pair (Y^{mu,xi}, Y^{mu,y0}) in fast time: common W per particle,
/// mu fixed, nu refreshed from the xi cloud every step.
class FrozenSimulator {
public:
    FrozenSimulator(const Model& model, EmpiricalMeasure mu, const FrozenInit& init,
                    const FrozenOptions& options);

    void advance(std::size_t steps);
    double time() const { return static_cast<double>(step_) * dt_; }
    double dt() const { return dt_; }
    std::size_t steps_taken() const { return step_; }
    std::size_t n_particles() const { return n_particles_; }
    const std::vector<double>& y_xi() const { return y_xi_; }
    const std::vector<double>& y_y0() const { return y_y0_; }
    EmpiricalMeasure fast_law() const { return EmpiricalMeasure::uniform(y_xi_, m_); }

private:
    const Model& model_;
    EmpiricalMeasure mu_;
    FrozenOptions options_;
    std::size_t n_particles_;
    std::size_t m_;
    std::size_t d2_;
    double dt_;
    std::size_t step_ = 0;
    std::vector<double> y_xi_;
    std::vector<double> y_y0_;
};

struct FrozenPath {
    std::size_t n_particles = 0;
    std::size_t m = 1;
    std::vector<double> times;
    std::vector<std::vector<double>> y_xi;
    std::vector<std::vector<double>> y_y0;
};

FrozenPath simulate_frozen(const Model& model, const EmpiricalMeasure& mu, const FrozenInit& init,
                           double horizon, const FrozenOptions& options = {});

struct MixingOptions {
    std::size_t n_particles = 256;
    double dt = 0.0;
    std::uint64_t seed = 1;
    /// Probe result to compare the fitted rate against beta1 - beta2 - L.
    const AssumptionReport* probe = nullptr;
};

struct MixingReport {
    double rate = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    /// beta1 - beta2 - L_{h2,gamma2} from the probe, NaN without one.
    double guaranteed_rate;
    bool meets_guarantee = false;
    std::vector<double> times;
    std::vector<double> gaps;
};

/// Fits E|Y^a_t - Y^b_t|^2 ~ C exp(-rate t) for two clouds started at the
/// points a and b and driven by common W. Throws EstimationError when the
/// starts coincide or the gap does not decay.
MixingReport mixing_rate(const Model& model, const EmpiricalMeasure& mu, std::span<const double> a,
                         std::span<const double> b, double horizon,
                         const MixingOptions& options = {});

/// Contraction rate with the default starts -1 and +1 per coordinate and a
/// horizon of 8 / fast_rate.
double measure_contraction_rate(const Model& model, const EmpiricalMeasure& mu,
                                std::uint64_t seed = 1);

struct InvariantOptions {
    std::size_t n_particles = 256;
    std::size_t samples_per_particle = 8;
    double dt = 0.0;
    /// Contraction rate; 0 measures it with measure_contraction_rate.
    double rate = 0.0;
    double burn_in_rates = 5.0;
    double thinning_rates = 1.0;
    bool antithetic = true;
    std::uint64_t seed = 1;
    std::uint32_t replica = 0;
    /// Start of the xi cloud; empty means a point mass at the origin.
    std::optional<FrozenInit> init;
    /// Batch disagreement beyond this many standard errors is non-stationary.
    double stationarity_sigmas = 5.0;
};

struct InvariantEstimate {
    EmpiricalMeasure eta;
    double burn_in = 0.0;
    double horizon = 0.0;
    double thinning = 0.0;
    double rate = 0.0;
    /// Independent units behind the standard errors.
    std::size_t batches = 0;
    /// Per coordinate.
    std::vector<double> mean{};
    std::vector<double> mean_stderr{};
    double second_moment = 0.0;
    double second_moment_stderr = 0.0;
};

/// eta^mu from one long run pooled over the cloud: burn-in, then one cloud
/// snapshot per thinning interval. Standard errors treat each particle (or
/// antithetic pair) as one batch; stationarity compares the early and late
/// halves of each batch.
InvariantEstimate estimate_invariant(const Model& model, const EmpiricalMeasure& mu,
                                     const InvariantOptions& options = {});

/// Vector observable of (x, mu, y, nu), bound per (mu, nu) like the model.
using BoundField =
    std::function<void(std::span<const double> x, std::span<const double> y, std::span<double> out)>;
struct SlowFunctional {
    std::size_t dim = 1;
    std::function<BoundField(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu)> bind;
};

/// The slow drift h1 as a SlowFunctional.
SlowFunctional slow_drift_functional(std::shared_ptr<const Model> model);

/// int f(x, mu, y, eta) eta(dy) with eta in the measure slot too.
std::vector<double> average_over_invariant(const SlowFunctional& f, std::span<const double> x,
                                           const EmpiricalMeasure& mu, const InvariantEstimate& inv);

/// hbar1(x, mu) against the estimated invariant measure.
std::vector<double> estimate_hbar(const Model& model, std::span<const double> x,
                                  const EmpiricalMeasure& mu, const InvariantEstimate& inv);

/// |int (h1(x, mu, y, eta) - hbar1(x, mu)) eta(dy)|.
double centering_check(const Model& model, std::span<const double> x, const EmpiricalMeasure& mu,
                       const InvariantEstimate& inv);

/// |int g(x, mu, y, eta) eta(dy)| for a functional that should be centered.
double centering_residual(const SlowFunctional& g, std::span<const double> x,
                          const EmpiricalMeasure& mu, const InvariantEstimate& inv);

// ---------------------------------------------------------------------------

/// Key for caching per-law quantities: per-coordinate raw moments of order
/// 1..4 rounded to 1e-6.
std::vector<long long> moment_fingerprint(const EmpiricalMeasure& mu);

struct CacheOptions {
    std::size_t grid_nodes = 512;
    InvariantOptions invariant{};
    /// Measure the contraction rate once, at the first law seen, and reuse it.
    bool reuse_rate = true;
};

/// Averages a SlowFunctional against eta^mu. For one-dimensional slow states
/// values are tabulated on an x-grid per law fingerprint and linearly
/// interpolated; otherwise (or off-grid) they are estimated on demand.
class AveragedCache final : public AveragedDrift {
public:
    AveragedCache(std::shared_ptr<const Model> model, SlowFunctional functional,
                  CacheOptions options = {});
    /// Averages the model's own h1.
    explicit AveragedCache(std::shared_ptr<const Model> model, CacheOptions options = {});

    PointMap bind(const EmpiricalMeasure& mu) override;

    /// Invariant estimate used for this law (built on first use).
    std::shared_ptr<const InvariantEstimate> invariant(const EmpiricalMeasure& mu);

    /// Fresh estimate with the cache's seed and rate, bypassing the
    /// fingerprint (which cannot resolve finite-difference perturbations).
    std::shared_ptr<const InvariantEstimate> invariant_uncached(const EmpiricalMeasure& mu);
    /// Same as bind but rebuilt on every call over the given x-range.
    PointMap bind_uncached(const EmpiricalMeasure& mu, double lo, double hi);

    /// x-range tabulated for a law: its support padded by a quarter of its
    /// width plus 0.5 on each side.
    static std::pair<double, double> grid_range(const EmpiricalMeasure& mu);
    double grid_step(const EmpiricalMeasure& mu) const;

    const CacheOptions& options() const { return options_; }
    const Model& model() const { return *model_; }
    const SlowFunctional& functional() const { return functional_; }
    double rate() const { return rate_; }
    std::size_t builds() const { return builds_; }

private:
    struct Entry {
        std::shared_ptr<const InvariantEstimate> inv;
        double lo = 0.0;
        double hi = 0.0;
        std::vector<double> values;  // grid_nodes x dim
    };
    double resolve_rate(const EmpiricalMeasure& mu);
    std::shared_ptr<Entry> build_entry(const EmpiricalMeasure& mu, std::pair<double, double> range);
    std::shared_ptr<const Entry> entry_for(const EmpiricalMeasure& mu);
    PointMap make_map(std::shared_ptr<const Entry> entry, const EmpiricalMeasure& mu) const;

    std::shared_ptr<const Model> model_;
    SlowFunctional functional_;
    CacheOptions options_;
    std::mutex mutex_;
    std::map<std::vector<long long>, std::shared_ptr<const Entry>> entries_;
    double rate_ = 0.0;
    std::size_t builds_ = 0;
    bool direct_ = false;
};

}  // namespace mvsim
