#include "mvsim/measure.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mvsim/error.hpp"

namespace mvsim {

EmpiricalMeasure::EmpiricalMeasure(std::vector<double> atoms, std::vector<double> weights,
                                   std::size_t dim)
    : atoms_(std::move(atoms)), weights_(std::move(weights)), dim_(dim) {
    if (dim_ == 0) throw DimensionError("empirical measure: dimension must be positive");
    if (atoms_.empty()) throw Error("empirical measure: at least one atom required");
    if (atoms_.size() % dim_ != 0)
        throw DimensionError("empirical measure: atom buffer is not a multiple of the dimension");
    for (double v : atoms_)
        if (!std::isfinite(v)) throw NonFiniteError("empirical measure: non-finite atom");
    if (!weights_.empty()) {
        if (weights_.size() != size())
            throw DimensionError("empirical measure: weight count differs from atom count");
        double total = 0.0;
        for (double w : weights_) {
            if (!(w >= 0.0)) throw Error("empirical measure: negative weight");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12) throw Error("empirical measure: weights must sum to 1");
    }
}

EmpiricalMeasure EmpiricalMeasure::uniform(std::vector<double> atoms, std::size_t dim) {
    return EmpiricalMeasure(std::move(atoms), {}, dim);
}

EmpiricalMeasure EmpiricalMeasure::weighted(std::vector<double> atoms, std::vector<double> weights,
                                            std::size_t dim) {
    return EmpiricalMeasure(std::move(atoms), std::move(weights), dim);
}

EmpiricalMeasure EmpiricalMeasure::dirac(std::span<const double> point) {
    return EmpiricalMeasure(std::vector<double>(point.begin(), point.end()), {}, point.size());
}

std::vector<double> EmpiricalMeasure::mean() const {
    std::vector<double> m(dim_, 0.0);
    const std::size_t n = size();
    for (std::size_t i = 0; i < n; ++i) {
        const double w = weight(i);
        for (std::size_t j = 0; j < dim_; ++j) m[j] += w * atoms_[i * dim_ + j];
    }
    return m;
}

double EmpiricalMeasure::second_moment() const {
    return expect([](std::span<const double> a) {
        double s = 0.0;
        for (double v : a) s += v * v;
        return s;
    });
}

EmpiricalMeasure EmpiricalMeasure::shifted_atom(std::size_t i, std::size_t j, double delta) const {
    if (i >= size() || j >= dim_) throw DimensionError("shifted_atom: index out of range");
    std::vector<double> atoms = atoms_;
    atoms[i * dim_ + j] += delta;
    return EmpiricalMeasure(std::move(atoms), weights_, dim_);
}

EmpiricalMeasure EmpiricalMeasure::displaced(std::span<const double> direction, double tau) const {
    if (direction.size() != atoms_.size())
        throw DimensionError("displaced: direction shape differs from atoms");
    std::vector<double> atoms = atoms_;
    for (std::size_t k = 0; k < atoms.size(); ++k) atoms[k] += tau * direction[k];
    return EmpiricalMeasure(std::move(atoms), weights_, dim_);
}

namespace {

double wasserstein2_1d(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2) {
    auto sorted = [](const EmpiricalMeasure& mu) {
        std::vector<std::pair<double, double>> v(mu.size());
        for (std::size_t i = 0; i < mu.size(); ++i) v[i] = {mu.atom(i)[0], mu.weight(i)};
        std::sort(v.begin(), v.end());
        return v;
    };
    const auto a = sorted(mu1);
    const auto b = sorted(mu2);
    // Quantile coupling: sweep both CDFs, pairing overlapping mass.
    std::size_t i = 0, j = 0;
    double wa = a[0].second, wb = b[0].second, cost = 0.0;
    while (i < a.size() && j < b.size()) {
        const double mass = std::min(wa, wb);
        const double diff = a[i].first - b[j].first;
        cost += mass * diff * diff;
        wa -= mass;
        wb -= mass;
        if (wa <= 1e-15 && i < a.size()) {
            if (++i < a.size()) wa = a[i].second;
        }
        if (wb <= 1e-15 && j < b.size()) {
            if (++j < b.size()) wb = b[j].second;
        }
    }
    return std::sqrt(std::max(cost, 0.0));
}

double wasserstein2_assignment(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2) {
    const std::size_t n = mu1.size();
    const std::size_t d = mu1.dim();
    std::vector<double> cost(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double c = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = mu1.atom(i)[k] - mu2.atom(j)[k];
                c += diff * diff;
            }
            cost[i * n + j] = c;
        }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double c = 0.0;
        for (std::size_t i = 0; i < n && c < best; ++i) c += cost[i * n + perm[i]];
        best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return std::sqrt(best / static_cast<double>(n));
}

}  // namespace

double wasserstein2(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2) {
    if (mu1.dim() != mu2.dim()) throw DimensionError("wasserstein2: dimension mismatch");
    if (mu1.dim() == 1) return wasserstein2_1d(mu1, mu2);
    if (!mu1.is_uniform() || !mu2.is_uniform() || mu1.size() != mu2.size() || mu1.size() > 10)
        throw UnsupportedError(
            "wasserstein2: d > 1 requires uniform measures with equal atom count <= 10");
    return wasserstein2_assignment(mu1, mu2);
}

std::vector<double> integrate(const EmpiricalMeasure& mu,
                              const std::function<std::vector<double>(std::span<const double>)>& f) {
    std::vector<double> acc;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const auto value = f(mu.atom(i));
        if (acc.empty()) acc.assign(value.size(), 0.0);
        if (value.size() != acc.size()) throw DimensionError("integrate: inconsistent output size");
        for (std::size_t k = 0; k < value.size(); ++k) {
            if (!std::isfinite(value[k])) {
                std::ostringstream msg;
                msg << "integrate: non-finite value at atom " << i << " (";
                for (std::size_t j = 0; j < mu.dim(); ++j) msg << (j ? ", " : "") << mu.atom(i)[j];
                msg << ")";
                throw NonFiniteError(msg.str());
            }
            acc[k] += mu.weight(i) * value[k];
        }
    }
    return acc;
}

std::vector<double> lions_derivative(const MeasureFunctional& f, const EmpiricalMeasure& mu,
                                     std::size_t i, double h) {
    if (i >= mu.size()) throw DimensionError("lions_derivative: atom index out of range");
    const auto atom = mu.atom(i);
    if (h <= 0.0) {
        double norm = 0.0;
        for (double v : atom) norm += v * v;
        h = 1e-4 * (1.0 + std::sqrt(norm));
    }
    // Uniform clouds give the familiar factor N.
    const double scale = 1.0 / mu.weight(i);
    std::vector<double> grad(mu.dim());
    for (std::size_t j = 0; j < mu.dim(); ++j) {
        const double up = f(mu.shifted_atom(i, j, h));
        const double down = f(mu.shifted_atom(i, j, -h));
        grad[j] = scale * (up - down) / (2.0 * h);
        if (!std::isfinite(grad[j]))
            throw NonFiniteError("lions_derivative: non-finite difference quotient");
    }
    return grad;
}

}  // namespace mvsim
