#pragma once

// Shared helpers for the Euler loops of the engine and the frozen simulator.

#include <boost/container/small_vector.hpp>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>

#include "mvsim/error.hpp"
#include "mvsim/model.hpp"

namespace mvsim::detail {

using Scratch = boost::container::small_vector<double, 8>;

inline std::span<double> view(Scratch& s) { return {s.data(), s.size()}; }

[[noreturn]] inline void non_finite(const char* state, std::size_t particle, const char* term) {
    std::ostringstream msg;
    msg << "non-finite " << state << " at particle " << particle << " (term " << term << ")";
    throw NonFiniteError(msg.str());
}

inline void check_finite(std::span<const double> v, const char* state, std::size_t particle,
                         const char* term) {
    for (double e : v)
        if (!std::isfinite(e)) non_finite(state, particle, term);
}

// y <- y + h2(y) * drift_scale + gamma2(y) * dw * noise_scale
inline void fast_update(const BoundCoefficients& c, std::span<double> y, std::span<const double> dw,
                        double drift_scale, double noise_scale, std::span<double> drift,
                        std::span<double> diffusion, const char* state, std::size_t particle) {
    const std::size_t m = y.size();
    const std::size_t d2 = dw.size();
    c.h2(y, drift);
    check_finite(drift, state, particle, "h2");
    c.gamma2(y, diffusion);
    check_finite(diffusion, state, particle, "gamma2");
    for (std::size_t r = 0; r < m; ++r) {
        double noise = 0.0;
        for (std::size_t k = 0; k < d2; ++k) noise += diffusion[r * d2 + k] * dw[k];
        y[r] += drift[r] * drift_scale + noise * noise_scale;
    }
    check_finite(y, state, particle, "state");
}

inline double sq_norm(std::span<const double> v) {
    double s = 0.0;
    for (double e : v) s += e * e;
    return s;
}

}  // namespace mvsim::detail
