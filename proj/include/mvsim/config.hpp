#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvsim/engine.hpp"
#include "mvsim/model.hpp"

namespace mvsim {

/// Laws of the initial data: rho ~ N(rho_mean, rho_sd^2), xi ~ N(xi_mean,
/// xi_sd^2) per coordinate, y0 constant in every coordinate.
struct InitialSpec {
    double rho_mean = 0.0;
    double rho_sd = 1.0;
    double xi_mean = 0.0;
    double xi_sd = 1.0;
    double y0 = 0.0;

    InitialConditions build(const Dims& dims) const;
};

struct RunConfig {
    std::string model = "reference";
    ModelParams params;
    std::uint64_t seed = 1;

    // Simulation. `epsilon` is used by single-run commands; studies use the ladder.
    double epsilon = 1.0 / 16;
    double dt = 1.0 / 64;
    std::size_t particles = 2000;
    double horizon = 1.0;
    std::size_t replicas = 16;
    std::size_t substeps = 0;
    double fast_cfl = 0.1;
    InitialSpec initial;

    /// epsilon ladder; stored sorted descending.
    std::vector<double> ladder{1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128, 1.0 / 256, 1.0 / 512};

    // Strong rate: moment orders computed from the same paths.
    std::vector<int> moment_orders{2, 4};
    // Weak rate: phi in psi(mu) = int phi dmu. Names: tanh, rational, cos, constant.
    std::vector<std::string> test_functions{"tanh", "rational", "cos"};
    // Fluctuation: "cos-term" (fast cosine terms of the reference drift) or "zero".
    std::string fluctuation_functional = "cos-term";
    double centering_tolerance = 1e-6;
    // Moment uniformity: one-sided significance level of the trend test.
    double trend_alpha = 0.05;

    // Averaged drift and limit coefficients.
    std::size_t grid_nodes = 512;
    std::size_t invariant_particles = 256;
    std::size_t invariant_samples = 8;
    std::size_t upsilon_nodes = 9;
    std::size_t upsilon_stride = 16;
    std::size_t upsilon_atoms = 64;
    std::size_t upsilon_replicas = 32;

    // Frozen / Poisson probe point.
    std::vector<double> probe_mu{1.0};
    double probe_x = 0.5;
    double probe_y = 0.5;

    std::string output_dir = "out";
    bool write_paths = false;

    SimConfig sim(double eps) const;
    /// Throws ConfigError on violated invariants.
    void validate() const;
    nlohmann::json to_json() const;
};

/// Parses YAML. Unknown keys and type errors throw ConfigError with
/// "<source>:<line>:<column>" positions.
RunConfig parse_run_config_text(const std::string& text, const std::string& source = "<string>");
RunConfig parse_run_config(const std::string& path);

/// Every key with its default, as YAML (used by --help).
std::string default_config_yaml();

}  // namespace mvsim
