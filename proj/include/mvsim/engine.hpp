#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "mvsim/measure.hpp"
#include "mvsim/model.hpp"
#include "mvsim/rng.hpp"

namespace mvsim {

struct SimConfig {
    double epsilon = 1.0 / 16.0;
    /// Macro step in slow time.
    double dt = 1.0 / 64.0;
    std::size_t n_particles = 2000;
    double horizon = 1.0;
    std::uint64_t seed = 1;
    /// Fast micro steps per macro step; 0 picks the smallest count with
    /// (dt / substeps) / epsilon <= fast_cfl / model.fast_rate().
    std::size_t substeps = 0;
    std::size_t replicas = 1;
    double fast_cfl = 0.1;

    std::size_t macro_steps() const;
    std::size_t resolve_substeps(const Model& model) const;
    void validate() const;
};

/// Draws one initial state into `out` from a stream dedicated to one particle.
using StateSampler = std::function<void(rng::NormalStream&, std::span<double>)>;

struct InitialConditions {
    StateSampler slow;  // rho
    StateSampler fast;  // xi
    std::vector<double> y0;

    /// rho ~ N(0, I_n), xi ~ N(0, I_m), y0 = 0.
    static InitialConditions standard(const Dims& dims);
    static StateSampler gaussian(double mean, double sd);
    static StateSampler constant(std::vector<double> value);
};

/// Row-major particle states: x is N x n, y_xi and y_y0 are N x m.
struct ParticleCloud {
    std::size_t n_particles = 0;
    std::size_t n = 1;
    std::size_t m = 1;
    std::vector<double> x;
    std::vector<double> y_xi;
    std::vector<double> y_y0;
    double time = 0.0;
    std::size_t step = 0;

    EmpiricalMeasure slow_law() const { return EmpiricalMeasure::uniform(x, n); }
    EmpiricalMeasure fast_law() const { return EmpiricalMeasure::uniform(y_xi, m); }
};

ParticleCloud initial_cloud(const Model& model, const SimConfig& cfg,
                            const InitialConditions& init, rng::StreamId id);

/// Scalar observable of (x, y) for fixed (mu, nu).
using PointFunctional = std::function<double(std::span<const double> x, std::span<const double> y)>;
/// Binds an observable g(x, mu, y, nu) to the laws of the current micro step.
using FunctionalFactory =
    std::function<PointFunctional(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu)>;

/// Optional per-step outputs. Null members are skipped.
struct StepTrace {
    /// Receives the N x d1 increments of B used for the slow step.
    std::vector<double>* b_increments = nullptr;
    /// Running max over micro steps of |Y^xi_i|^2, per particle.
    std::vector<double>* fast_sup_sq = nullptr;
    /// Left-point Riemann sum of int g(X, mu, Y^y0, nu) ds, per particle.
    std::vector<double>* integral = nullptr;
    const FunctionalFactory* integrand = nullptr;
};

/// One macro step of the coupled system with frozen slow law, micro-stepped
/// fast clouds sharing W, and a single Euler step for X.
ParticleCloud step(const Model& model, const ParticleCloud& cloud, const SimConfig& cfg,
                   rng::StreamId id, StepTrace* trace = nullptr);

struct PathBundle {
    std::size_t n_particles = 0;
    std::size_t n = 1;
    std::size_t m = 1;
    std::size_t d1 = 1;
    std::uint32_t replica = 0;
    std::vector<double> times;
    /// Snapshots on the macro grid, one per entry of `times`.
    std::vector<std::vector<double>> x;
    std::vector<std::vector<double>> y_xi;
    std::vector<std::vector<double>> y_y0;
    /// B increments, one N x d1 block per macro step (times.size() - 1 blocks).
    std::vector<std::vector<double>> b_increments;
    /// Per particle: max over the micro grid of |Y^xi|^2.
    std::vector<double> fast_sup_sq;
    /// Per particle: int_0^T g ds when an integrand was supplied.
    std::vector<double> integral;
};

struct SimulateOptions {
    const FunctionalFactory* integrand = nullptr;
    /// Keep fast snapshots (the averaged runs never need them).
    bool keep_fast = true;
};

PathBundle simulate_system(const Model& model, const SimConfig& cfg, const InitialConditions& init,
                           std::uint32_t replica = 0, const SimulateOptions& options = {});

// ---------------------------------------------------------------------------
// Averaged equation

using PointMap = std::function<void(std::span<const double> x, std::span<double> out)>;

/// x -> hbar1(x, mu) for a given slow law. `bind` may build caches and is
/// called from one thread at a time; the returned map must be safe to call
/// concurrently.
class AveragedDrift {
public:
    virtual ~AveragedDrift() = default;
    virtual PointMap bind(const EmpiricalMeasure& mu) = 0;
};

/// hbar1 = h1 for models whose slow drift ignores (y, nu); evaluates h1 at
/// y = 0 and nu = delta_0 without any averaging.
class FastIndependentDrift final : public AveragedDrift {
public:
    explicit FastIndependentDrift(std::shared_ptr<const Model> model) : model_(std::move(model)) {}
    PointMap bind(const EmpiricalMeasure& mu) override;

private:
    std::shared_ptr<const Model> model_;
};

/// Mean-field Euler scheme for dXbar = hbar1 dt + gamma1 dB. When `b_increments`
/// is given it must hold one N x d1 block per macro step; otherwise B is drawn
/// from the same streams simulate_system uses, so the two runs are coupled
/// either way.
PathBundle simulate_averaged(const Model& model, const SimConfig& cfg, AveragedDrift& hbar,
                             const InitialConditions& init, std::uint32_t replica = 0,
                             const std::vector<std::vector<double>>* b_increments = nullptr);

struct CoupledPaths {
    PathBundle system;
    PathBundle averaged;
};

/// X^eps and Xbar from identical rho samples and identical B increments.
CoupledPaths simulate_coupled_averaged(const Model& model, const SimConfig& cfg,
                                       AveragedDrift& hbar, const InitialConditions& init,
                                       std::uint32_t replica = 0,
                                       const SimulateOptions& options = {});

/// Columns: replica, particle, t, x..., yxi..., yy0...
void write_paths_csv(std::ostream& out, std::span<const PathBundle> bundles);

}  // namespace mvsim
