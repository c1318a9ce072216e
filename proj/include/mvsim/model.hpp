#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mvsim/measure.hpp"

namespace mvsim {

/// Slow state n, fast state m, slow noise d1, fast noise d2.
struct Dims {
    std::size_t n = 1;
    std::size_t m = 1;
    std::size_t d1 = 1;
    std::size_t d2 = 1;
};

/// Coefficients with the slow law mu and fast law nu already fixed. Every
/// measure integral a model needs is computed once when binding, so the
/// pointwise calls below are O(1) in the number of particles.
///
/// Matrices are row-major: gamma1 is n x d1, gamma2 is m x d2.
class BoundCoefficients {
public:
    virtual ~BoundCoefficients() = default;
    virtual void h1(std::span<const double> x, std::span<const double> y,
                    std::span<double> out) const = 0;
    virtual void gamma1(std::span<const double> x, std::span<double> out) const = 0;
    virtual void h2(std::span<const double> y, std::span<double> out) const = 0;
    virtual void gamma2(std::span<const double> y, std::span<double> out) const = 0;
};

/// A multiscale McKean-Vlasov system
///   dX = h1(X, L_X, Y^{y0}, L_{Y^xi}) dt + gamma1(X, L_X) dB
///   dY = eps^-1 h2(L_X, Y, L_{Y^xi}) dt + eps^-1/2 gamma2(L_X, Y, L_{Y^xi}) dW.
///
/// Implementations must be immutable after construction; `bind` and the
/// bound evaluators are called concurrently.
class Model {
public:
    virtual ~Model() = default;

    virtual std::string name() const = 0;
    virtual Dims dims() const = 0;
    /// Moment order of the dissipativity hypothesis.
    virtual int p() const = 0;
    /// Characteristic contraction rate of the fast drift, used to size fast
    /// time steps.
    virtual double fast_rate() const { return 1.0; }
    /// h1 does not depend on (y, nu); averaging is then the identity.
    virtual bool slow_drift_ignores_fast() const { return false; }

    virtual std::unique_ptr<BoundCoefficients> bind(const EmpiricalMeasure& mu,
                                                    const EmpiricalMeasure& nu) const = 0;

    // Pointwise forms with dimension checks. Each call binds afresh.
    std::vector<double> h1(std::span<const double> x, const EmpiricalMeasure& mu,
                           std::span<const double> y, const EmpiricalMeasure& nu) const;
    std::vector<double> gamma1(std::span<const double> x, const EmpiricalMeasure& mu) const;
    std::vector<double> h2(const EmpiricalMeasure& mu, std::span<const double> y,
                           const EmpiricalMeasure& nu) const;
    std::vector<double> gamma2(const EmpiricalMeasure& mu, std::span<const double> y,
                               const EmpiricalMeasure& nu) const;

    /// Dirac at the origin of R^m; placeholder nu for slow-only evaluations.
    EmpiricalMeasure fast_origin() const;
};

/// Parameters of the one-dimensional reference system with
///   h1 = sin(ax) + int x mu + cos(by) + int cos(qy) nu,  gamma1 = int sin(x+x') mu(dx'),
///   h2 = -k y + lambda int y nu,                          gamma2 = m y + theta int arctan(x) mu.
struct ReferenceParams {
    double a = 1.0;
    double b = 1.0;
    double q = 1.0;
    double k = 1.0 / 24.0;
    double lambda = 1.0 / 96.0;
    double m = 1.0 / 192.0;
    double theta = 1.0 / 192.0;
    int p = 3;

    /// k = 1/(8p), lambda = 1/(32p), m = 1/(64p), theta = 1/(64p).
    static ReferenceParams for_moment_order(int p, double a = 1.0, double b = 1.0,
                                            double q = 1.0);
};

std::shared_ptr<const Model> build_reference_model(const ReferenceParams& params);

/// Reference system with the two fast-dependent terms of h1 removed; the slow
/// equation decouples, so averaging is exact.
std::shared_ptr<const Model> build_slow_only_model(const ReferenceParams& params);

/// Ornstein-Uhlenbeck test system:
///   h1 = -alpha x + beta y, gamma1 = sigma1, h2 = -k y, gamma2 = sigma.
struct OuTestParams {
    double alpha = 1.0;
    double beta = 1.0;
    double sigma1 = 0.0;
    double k = 1.0;
    double sigma = 1.0;
    int p = 2;
};
std::shared_ptr<const Model> build_ou_test_model(const OuTestParams& params);

/// Model assembled from plain callables; measures are passed through to every
/// pointwise call, so this is meant for small tests and prototypes.
struct FunctionalModelSpec {
    std::string name = "functional";
    Dims dims;
    int p = 2;
    double fast_rate = 1.0;
    std::function<void(std::span<const double> x, const EmpiricalMeasure& mu,
                       std::span<const double> y, const EmpiricalMeasure& nu, std::span<double>)>
        h1;
    std::function<void(std::span<const double> x, const EmpiricalMeasure& mu, std::span<double>)>
        gamma1;
    std::function<void(const EmpiricalMeasure& mu, std::span<const double> y,
                       const EmpiricalMeasure& nu, std::span<double>)>
        h2;
    std::function<void(const EmpiricalMeasure& mu, std::span<const double> y,
                       const EmpiricalMeasure& nu, std::span<double>)>
        gamma2;
};
/// Missing callables default to zero.
std::shared_ptr<const Model> build_functional_model(FunctionalModelSpec spec);

using ModelParams = std::map<std::string, double>;

/// Registry: "reference", "ou-test", "slow-only-test". Unknown names or
/// parameter keys throw ConfigError.
std::shared_ptr<const Model> make_model(const std::string& name, const ModelParams& params = {});
std::vector<std::string> registered_models();

// ---------------------------------------------------------------------------
// Hypothesis probes

/// One sampled argument tuple (x, mu, y, nu).
struct InputPoint {
    std::vector<double> x;
    EmpiricalMeasure mu;
    std::vector<double> y;
    EmpiricalMeasure nu;
};

struct InputPair {
    InputPoint first;
    InputPoint second;
};

using PairSampler = std::function<InputPair(std::size_t index)>;

struct SamplerOptions {
    std::uint64_t seed = 11;
    std::size_t atoms = 64;
    /// Both members of a pair share mu (needed by the dissipativity probe).
    bool common_mu = false;
    /// Both members of a pair share nu.
    bool common_nu = false;
    /// Only x differs within a pair.
    bool x_only = false;
};

/// Gaussian points and Gaussian empirical measures. Pair kinds rotate between
/// independent draws, small joint perturbations, and translated measures with
/// aligned fast-state shifts.
PairSampler gaussian_pair_sampler(const Dims& dims, const SamplerOptions& options = {});

/// Sampled constants for the Lipschitz and dissipativity hypotheses.
/// Unestimated fields are NaN.
struct AssumptionReport {
    std::string hypothesis;
    std::size_t pairs = 0;
    std::size_t degenerate = 0;
    double worst_ratio = 0.0;
    double lipschitz_h1_gamma1 = std::numeric_limits<double>::quiet_NaN();
    double lipschitz_h2_gamma2 = std::numeric_limits<double>::quiet_NaN();
    double beta1 = std::numeric_limits<double>::quiet_NaN();
    double beta2 = std::numeric_limits<double>::quiet_NaN();
    int p = 1;
    bool pass = false;

    double alpha1() const { return beta1 - 2.0 * p * lipschitz_h2_gamma2; }
    double alpha2() const { return beta2 + (2.0 * p - 1.0) * lipschitz_h2_gamma2; }
};

/// Largest observed Lipschitz quotients for (h1, gamma1) and (h2, gamma2).
/// Pairs with a zero denominator are counted as degenerate and skipped.
AssumptionReport probe_lipschitz(const Model& model, const PairSampler& sampler,
                                 std::size_t n_pairs);

struct DissipativityOptions {
    /// Accept when the inequality holds for some p' <= p instead of exactly p.
    bool any_order_up_to_p = false;
    /// L_{h2,gamma2} to test against; NaN runs probe_lipschitz with the
    /// default Gaussian sampler and the same pair count.
    double lipschitz_h2_gamma2 = std::numeric_limits<double>::quiet_NaN();
};

/// Fits the tightest (beta1, beta2) with
///   2<dy, dh2> + (2p-1)|dgamma2|^2 <= -beta1 |dy|^2 + beta2 W2^2(nu1, nu2)
/// over the sampled pairs (maximising beta1 - beta2), and checks
/// beta1 - beta2 > 4 p L_{h2,gamma2}.
AssumptionReport probe_dissipativity(const Model& model, const PairSampler& sampler,
                                     std::size_t n_pairs, const DissipativityOptions& options = {});

/// Maximise beta1 - beta2 subject to -beta1*a_i + beta2*b_i >= v_i, beta2 >= 0.
/// Exposed for testing; returns {beta1, beta2}.
std::pair<double, double> fit_dissipativity_constants(std::span<const double> a,
                                                      std::span<const double> b,
                                                      std::span<const double> v);

}  // namespace mvsim
