#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvsim/config.hpp"
#include "mvsim/frozen.hpp"
#include "mvsim/limit.hpp"

namespace mvsim {

struct LadderPoint {
    double epsilon = 0.0;
    double error = 0.0;
    double stderr_ = 0.0;
    std::size_t replicas = 0;
};

struct SlopeFit {
    double slope = std::numeric_limits<double>::quiet_NaN();
    double intercept = std::numeric_limits<double>::quiet_NaN();
    /// Student-t interval at the requested level.
    std::array<double, 2> ci{std::numeric_limits<double>::quiet_NaN(),
                             std::numeric_limits<double>::quiet_NaN()};
    double r_squared = std::numeric_limits<double>::quiet_NaN();
    std::size_t points = 0;
};

/// Least squares of log(y) on log(x). Throws EstimationError with fewer than
/// three points or a non-positive value.
SlopeFit fit_log_slope(std::span<const double> x, std::span<const double> y, double level = 0.95);

struct RateReport {
    std::string study;
    /// Series name, e.g. "p=2" or "phi=tanh".
    std::string label;
    /// Sorted by epsilon, descending.
    std::vector<LadderPoint> ladder;
    SlopeFit fit;
    std::size_t replicas = 0;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;
    /// Every error below the exactness threshold; no slope is fitted.
    bool exact = false;
    /// Some stderr exceeds half the gap between neighbouring errors.
    bool noise_dominated = false;
    nlohmann::json details = nlohmann::json::object();

    nlohmann::json to_json() const;
};

/// Sorts the ladder, sets the flags and fits the slope unless exact. With
/// allow_unfitted a failed fit leaves the slope NaN and records details.fit_error.
RateReport make_rate_report(std::string study, std::string label, std::vector<LadderPoint> ladder,
                            std::size_t replicas, std::uint64_t seed, double exact_threshold,
                            bool allow_unfitted = false);

struct KendallResult {
    double tau = 0.0;  // tau-b
    std::size_t n = 0;
    /// One-sided p-values for positive and negative association.
    double p_positive = 1.0;
    double p_negative = 1.0;
    /// Permutation distribution enumerated (n <= 8); normal approximation otherwise.
    bool exact = false;
};

KendallResult kendall_tau(std::span<const double> x, std::span<const double> y);

/// Scalar test function by name: tanh, rational (x / (1 + x^2)), cos, constant.
double test_function(const std::string& name, double x);

// ---------------------------------------------------------------------------
// Studies. Replicas run in parallel; every draw is addressed by
// (seed, replica, particle, step), so results do not depend on scheduling.

struct StudyContext {
    std::shared_ptr<const Model> model;
    InitialConditions init;
    std::shared_ptr<AveragedCache> cache;
};

/// Model, initial laws, and an averaged-drift cache whose contraction rate is
/// measured up front at the initial slow law of replica 0.
StudyContext make_study_context(const RunConfig& cfg);

LimitOptions limit_options(const RunConfig& cfg);

/// E sup_t |X^eps - Xbar|^p per moment order, all orders from the same paths.
std::vector<RateReport> strong_rate_study(const RunConfig& cfg);

/// max_t |psi(L(U^eps_t)) - psi(L(U_t))| per test function. details carry
/// "monotone" (nonincreasing as epsilon decreases, up to one stderr).
std::vector<RateReport> clt_weak_rate_study(const RunConfig& cfg);

/// g(x, mu, y, nu); scalar.
struct FluctuationFunctional {
    SlowFunctional raw;
    /// Subtract the eta^mu average along the path, which centers g by construction.
    bool center = true;
};

/// The fast part of the model drift, h1(x, mu, y, nu) - h1(x, mu, 0, delta_0),
/// first coordinate. For the reference model these are its cosine terms.
FluctuationFunctional fast_drift_part(std::shared_ptr<const Model> model);

/// |E int_0^T g ds| along Y^{y0}. Throws ConfigError when g fails the
/// centering check at the initial law.
RateReport fluctuation_study(const RunConfig& cfg, const FluctuationFunctional& g);
/// Uses cfg.fluctuation_functional.
RateReport fluctuation_study(const RunConfig& cfg);

struct MomentStatistic {
    std::string name;
    std::vector<double> mean;  // per ladder entry
    std::vector<double> stderr_;
    KendallResult trend;       // against epsilon
    bool growth = false;       // significant increase as epsilon decreases
};

struct MomentTable {
    std::vector<double> ladder;
    /// E sup_t |X|^2, sup_t E|Y^xi|^2, sup_t E|Y^y0|^2, E sup_t |Y^xi|^2.
    std::vector<MomentStatistic> statistics;
    /// Fit of log E sup_t |Y^xi|^2 on log(1/eps).
    SlopeFit fast_sup_growth;
    bool growth_within_bound = false;
    std::vector<std::string> failures;
    std::size_t replicas = 0;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;

    nlohmann::json to_json() const;
};

MomentTable moment_uniformity_study(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Output

/// Writes content to path through a temporary file and a rename.
void write_atomic(const std::string& path, const std::string& content);

inline constexpr int kReportSchemaVersion = 1;

/// Wraps a payload with schema_version, command, seed, and the full config.
nlohmann::json report_envelope(const std::string& command, const RunConfig& cfg,
                               nlohmann::json payload);

/// Columns: epsilon, error, stderr, replicas.
std::string ladder_csv(const RateReport& report);

/// gnuplot script drawing each ladder file on log-log axes.
std::string gnuplot_script(std::span<const RateReport> reports,
                           std::span<const std::string> csv_files);

/// report.json, ladder.csv (first series), ladder_<label>.csv per series and plot.gp.
void write_rate_outputs(const std::string& dir, const std::string& command, const RunConfig& cfg,
                        std::span<const RateReport> reports, nlohmann::json extra = {});

}  // namespace mvsim
