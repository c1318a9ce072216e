#include "mvsim/stats.hpp"

#include <cmath>
#include <limits>

#include "mvsim/error.hpp"

namespace mvsim {

LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DimensionError("fit_line: x and y differ in length");
    const std::size_t n = x.size();
    if (n < 2) throw EstimationError("fit_line: need at least two points");
    const double mx = sample_mean(x);
    const double my = sample_mean(y);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (!(sxx > 0.0)) throw EstimationError("fit_line: x values are all equal");
    LinearFit fit;
    fit.n = n;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    const double sse = std::max(0.0, syy - fit.slope * sxy);
    fit.r_squared = syy > 0.0 ? 1.0 - sse / syy : 1.0;
    fit.slope_stderr = n > 2 ? std::sqrt(sse / static_cast<double>(n - 2) / sxx)
                             : std::numeric_limits<double>::quiet_NaN();
    return fit;
}

double sample_mean(std::span<const double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double e : v) s += e;
    return s / static_cast<double>(v.size());
}

double sample_variance(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = sample_mean(v);
    double s = 0.0;
    for (double e : v) s += (e - m) * (e - m);
    return s / static_cast<double>(v.size() - 1);
}

double standard_error(std::span<const double> v) {
    return std::sqrt(sample_variance(v) / static_cast<double>(v.size()));
}

}  // namespace mvsim
