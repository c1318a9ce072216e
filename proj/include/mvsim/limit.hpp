#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mvsim/engine.hpp"
#include "mvsim/frozen.hpp"
#include "mvsim/measure.hpp"
#include "mvsim/model.hpp"
#include "mvsim/poisson.hpp"

namespace mvsim {

/// Coefficients of the linear fluctuation equation with the slow law fixed.
/// Every member must be safe to call concurrently. Matrices are row-major:
///   dx_hbar, dmu_hbar, upsilon: n x n (row = output coordinate)
///   dx_gamma1, dmu_gamma1: (n*d1) x n, row r*d1+c holds d gamma1[r][c].
struct BoundLimitCoefficients {
    using XMap = std::function<void(std::span<const double> x, std::span<double> out)>;
    using AtomMap =
        std::function<void(std::span<const double> x, std::size_t atom, std::span<double> out)>;
    /// u (N x n) -> per particle i the cloud average over j of a
    /// mu-derivative evaluated at (x_i, x_j) times u_j.
    using CloudMap = std::function<void(std::span<const double> u, std::span<double> out)>;

    XMap dx_hbar;
    AtomMap dmu_hbar;
    XMap dx_gamma1;
    AtomMap dmu_gamma1;
    XMap upsilon;

    /// Optional whole-cloud forms of the averaged mu-terms (N x n and
    /// N x n*d1). When absent the simulator sums dmu_hbar / dmu_gamma1 over
    /// atoms, which costs N^2 evaluations per step.
    CloudMap drift_average;
    CloudMap diffusion_average;
};

struct LimitCoefficients {
    Dims dims;
    /// Binds to the slow law at macro step `step`; called from one thread.
    std::function<BoundLimitCoefficients(const EmpiricalMeasure& mu, std::size_t step)> bind;

    /// Every coefficient zero.
    static LimitCoefficients zero(const Dims& dims);
};

struct LimitOptions {
    /// Central-difference step in x for hbar1; 0 uses the cache grid spacing.
    double dx_step = 0.0;
    /// Relative step for x-derivatives of gamma1.
    double gamma_step = 1e-5;
    /// rms displacement of the cloud used for the whole-cloud mu-terms.
    double direction_step = 1e-3;
    /// Per-atom step for dmu_hbar / dmu_gamma1; 0 picks the measure default.
    double lions_step = 0.0;
    UpsilonOptions upsilon{};
    /// x-nodes of the upsilon table over the cache grid range.
    std::size_t upsilon_nodes = 9;
    /// Macro steps between upsilon table refreshes.
    std::size_t upsilon_stride = 16;
};

/// Finite-difference coefficients from an averaged-drift cache (whose
/// functional must be the model's h1) and Poisson estimates of upsilon.
/// mu-derivatives re-estimate the invariant measure at displaced laws with
/// the cache seed and rate. The upsilon table needs n = 1.
LimitCoefficients numerical_limit_coefficients(std::shared_ptr<const Model> model,
                                               std::shared_ptr<AveragedCache> cache,
                                               const LimitOptions& options = {});

/// Euler scheme for the linear fluctuation equation along a stored averaged
/// run: U_0 = 0, the B increments are taken from `xbar`, and V is drawn from
/// its own stream. Returns the U snapshots in the `x` member.
PathBundle simulate_limit_U(const Model& model, const SimConfig& cfg,
                            const LimitCoefficients& coeffs, const PathBundle& xbar);

struct DeviationPaths {
    std::size_t n_particles = 0;
    std::size_t n = 1;
    double epsilon = 0.0;
    std::vector<double> times;
    /// (X^eps - Xbar) / sqrt(eps), one N x n block per time.
    std::vector<std::vector<double>> u;
};

/// Throws ConfigError unless both runs share particle count, dimension,
/// time grid and initial samples.
DeviationPaths deviation_paths(const PathBundle& system, const PathBundle& averaged,
                               double epsilon);

}  // namespace mvsim
