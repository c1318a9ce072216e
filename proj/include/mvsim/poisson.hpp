#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mvsim/frozen.hpp"
#include "mvsim/measure.hpp"
#include "mvsim/model.hpp"

namespace mvsim {

struct PoissonOptions {
    /// Inner copies of Y^{y} per start point.
    std::size_t replicas = 256;
    /// Particles carrying the nu flow; nu is resampled to this many equal-weight atoms.
    std::size_t max_background = 512;
    /// Fast-time step; 0 selects the frozen default.
    double dt = 0.0;
    /// Truncation horizon; 0 selects 24 / inv.rate.
    double t_cut = 0.0;
    /// Also integrate to 2 t_cut and require agreement.
    bool check_tail = true;
    double tail_sigmas = 3.0;
    bool antithetic = true;
    std::uint64_t seed = 1;
    std::uint32_t replica = 0;
};

struct PsiEstimate {
    std::vector<double> value;
    std::vector<double> stderr_;
    double t_cut = 0.0;
    std::size_t replicas = 0;
    /// Geometric extrapolation of the dropped tail, max over coordinates.
    double tail_bound = 0.0;
    /// max |Psi(2 t_cut) - Psi(t_cut)|; NaN when the check is off.
    double tail_change = 0.0;
};

/// Psi(x, mu, y, nu) = int_0^t_cut E[h1(x, mu, Y_s^{y}, nu_s) - hbar1(x, mu)] ds.
/// nu_s is carried by a background cloud started from nu; the hbar1 term is
/// realised by a stationary companion cloud started from inv.eta and driven by
/// the same W as Y^{y}, so the integrand decays pathwise.
PsiEstimate solve_psi(const Model& model, std::span<const double> x, const EmpiricalMeasure& mu,
                      std::span<const double> y, const EmpiricalMeasure& nu,
                      const InvariantEstimate& inv, const PoissonOptions& options = {});

struct PsiGradient {
    std::size_t n = 1;
    std::size_t m = 1;
    std::size_t d2 = 1;
    /// d_y Psi, n x m.
    std::vector<double> gradient;
    std::vector<double> gradient_stderr;
    /// d_y Psi * gamma2(mu, y, nu), n x d2.
    std::vector<double> times_gamma2;
};

/// Central differences of Psi in y with common random numbers across the
/// +/- evaluations. Throws EstimationError when an entry is not resolved
/// above twice its standard error (and above an absolute floor).
PsiGradient dy_psi(const Model& model, std::span<const double> x, const EmpiricalMeasure& mu,
                   std::span<const double> y, const EmpiricalMeasure& nu,
                   const InvariantEstimate& inv, double h = 1e-3,
                   const PoissonOptions& options = {});

struct UpsilonOptions {
    PoissonOptions psi{.replicas = 32, .check_tail = false};
    /// eta atoms averaged over (evenly strided through inv.eta).
    std::size_t atoms = 64;
    double h = 1e-3;
};

struct UpsilonEstimate {
    std::size_t n = 1;
    /// Symmetric PSD root, n x n.
    std::vector<double> matrix;
    /// Averaged outer product of d_y Psi * gamma2, n x n.
    std::vector<double> raw;
    /// Monte Carlo standard error of each raw entry over the atoms.
    std::vector<double> raw_stderr;
    /// The eta atoms used, atoms x m.
    std::vector<double> atoms;
};

/// Upsilon(x, mu) with nu = inv.eta.
UpsilonEstimate estimate_upsilon(const Model& model, std::span<const double> x,
                                 const EmpiricalMeasure& mu, const InvariantEstimate& inv,
                                 const UpsilonOptions& options = {});

/// Upsilon at several x from one fast simulation (the Y clouds do not depend
/// on x). xs is a row-major list of slow states.
std::vector<UpsilonEstimate> estimate_upsilon_many(const Model& model, std::span<const double> xs,
                                                   const EmpiricalMeasure& mu,
                                                   const InvariantEstimate& inv,
                                                   const UpsilonOptions& options = {});

/// Symmetric PSD square root of a symmetric n x n matrix; throws
/// EstimationError on eigenvalues below -tolerance.
std::vector<double> psd_sqrt(std::span<const double> matrix, std::size_t n,
                             double tolerance = 1e-10);

struct GeneratorOptions {
    PoissonOptions psi{.replicas = 8, .check_tail = false};
    /// Outer copies of Y over [0, delta].
    std::size_t outer = 256;
};

/// [E Psi(Y_delta, nu_delta) - Psi(y, nu)] / delta + h1(x, mu, y, nu) - hbar1(x, mu),
/// which vanishes as delta -> 0 when Psi solves the Poisson equation. delta
/// must be a multiple of the fast step.
std::vector<double> generator_residual(const Model& model, std::span<const double> x,
                                       const EmpiricalMeasure& mu, std::span<const double> y,
                                       const EmpiricalMeasure& nu, const InvariantEstimate& inv,
                                       double delta, const GeneratorOptions& options = {});

}  // namespace mvsim
