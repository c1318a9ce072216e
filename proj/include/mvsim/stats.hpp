#pragma once

#include <cstddef>
#include <span>

namespace mvsim {

/// Ordinary least squares y = intercept + slope * x.
struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    /// Standard error of the slope (NaN with fewer than three points).
    double slope_stderr = 0.0;
    std::size_t n = 0;
};

LinearFit fit_line(std::span<const double> x, std::span<const double> y);

double sample_mean(std::span<const double> v);
/// Unbiased sample variance; 0 for fewer than two values.
double sample_variance(std::span<const double> v);
/// sd / sqrt(n).
double standard_error(std::span<const double> v);

}  // namespace mvsim
