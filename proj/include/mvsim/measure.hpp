#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace mvsim {

/// Weighted cloud of atoms in R^d standing in for a probability law with
/// finite second moment. Atoms are stored row-major (atom i occupies
/// [i*d, (i+1)*d)). An empty weight vector means uniform weights.
class EmpiricalMeasure {
public:
    static EmpiricalMeasure uniform(std::vector<double> atoms, std::size_t dim);
    static EmpiricalMeasure weighted(std::vector<double> atoms, std::vector<double> weights,
                                     std::size_t dim);
    static EmpiricalMeasure dirac(std::span<const double> point);

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return atoms_.size() / dim_; }
    bool is_uniform() const { return weights_.empty(); }

    std::span<const double> atom(std::size_t i) const {
        return {atoms_.data() + i * dim_, dim_};
    }
    double weight(std::size_t i) const {
        return weights_.empty() ? 1.0 / static_cast<double>(size()) : weights_[i];
    }
    const std::vector<double>& atoms() const { return atoms_; }

    std::vector<double> mean() const;
    /// mu(|.|^2).
    double second_moment() const;

    /// Scalar expectation of f over the atoms.
    template <class F>
    double expect(F&& f) const {
        double acc = 0.0;
        const std::size_t n = size();
        for (std::size_t i = 0; i < n; ++i) acc += weight(i) * f(atom(i));
        return acc;
    }

    /// Copy with atom i moved by delta along coordinate j.
    EmpiricalMeasure shifted_atom(std::size_t i, std::size_t j, double delta) const;
    /// Copy with every atom moved by tau * direction (row-major, same shape as atoms()).
    EmpiricalMeasure displaced(std::span<const double> direction, double tau) const;

private:
    EmpiricalMeasure(std::vector<double> atoms, std::vector<double> weights, std::size_t dim);

    std::vector<double> atoms_;
    std::vector<double> weights_;
    std::size_t dim_ = 1;
};

/// L2-Wasserstein distance. Exact in 1-D via the quantile coupling; for d > 1
/// only uniform measures with equal atom count <= 10 are accepted and solved by
/// exhaustive assignment.
double wasserstein2(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2);

/// mu(f) for a vector-valued f. Throws NonFiniteError naming the atom when f
/// is not finite there.
std::vector<double> integrate(const EmpiricalMeasure& mu,
                              const std::function<std::vector<double>(std::span<const double>)>& f);

using MeasureFunctional = std::function<double(const EmpiricalMeasure&)>;

/// Finite-particle L-derivative: N times the central difference of f under
/// moving atom i by +-h along each coordinate. `h <= 0` selects
/// 1e-4 * (1 + |atom_i|).
std::vector<double> lions_derivative(const MeasureFunctional& f, const EmpiricalMeasure& mu,
                                     std::size_t i, double h = 0.0);

}  // namespace mvsim
