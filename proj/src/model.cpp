#include "mvsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mvsim/error.hpp"
#include "mvsim/rng.hpp"

namespace mvsim {
namespace {

void require_finite(std::span<const double> values, const char* what) {
    for (double v : values)
        if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + ": non-finite output");
}

void require_size(std::size_t got, std::size_t want, const char* what) {
    if (got != want) {
        std::ostringstream msg;
        msg << what << ": expected dimension " << want << ", got " << got;
        throw DimensionError(msg.str());
    }
}

double mean_of(const EmpiricalMeasure& mu) { return mu.mean()[0]; }

// ---------------------------------------------------------------------------
// Reference system

class ReferenceBound final : public BoundCoefficients {
public:
    ReferenceBound(const ReferenceParams& p, bool with_fast_terms, const EmpiricalMeasure& mu,
                 const EmpiricalMeasure& nu)
        : p_(p), with_fast_(with_fast_terms) {
        mu_mean_ = mean_of(mu);
        mu_cos_ = mu.expect([](auto a) { return std::cos(a[0]); });
        mu_sin_ = mu.expect([](auto a) { return std::sin(a[0]); });
        mu_atan_ = mu.expect([](auto a) { return std::atan(a[0]); });
        nu_mean_ = mean_of(nu);
        nu_cos_ = with_fast_ ? nu.expect([q = p.q](auto a) { return std::cos(q * a[0]); }) : 0.0;
    }

    void h1(std::span<const double> x, std::span<const double> y,
            std::span<double> out) const override {
        double v = std::sin(p_.a * x[0]) + mu_mean_;
        if (with_fast_) v += std::cos(p_.b * y[0]) + nu_cos_;
        out[0] = v;
    }
    void gamma1(std::span<const double> x, std::span<double> out) const override {
        // int sin(x + x') mu(dx') = sin x int cos + cos x int sin
        out[0] = std::sin(x[0]) * mu_cos_ + std::cos(x[0]) * mu_sin_;
    }
    void h2(std::span<const double> y, std::span<double> out) const override {
        out[0] = -p_.k * y[0] + p_.lambda * nu_mean_;
    }
    void gamma2(std::span<const double> y, std::span<double> out) const override {
        out[0] = p_.m * y[0] + p_.theta * mu_atan_;
    }

private:
    ReferenceParams p_;
    bool with_fast_;
    double mu_mean_, mu_cos_, mu_sin_, mu_atan_, nu_mean_, nu_cos_;
};

class ReferenceModel final : public Model {
public:
    ReferenceModel(const ReferenceParams& p, bool with_fast_terms)
        : p_(p), with_fast_(with_fast_terms) {}
    std::string name() const override { return with_fast_ ? "reference" : "slow-only-test"; }
    Dims dims() const override { return {1, 1, 1, 1}; }
    int p() const override { return p_.p; }
    double fast_rate() const override { return std::max(p_.k, p_.m * p_.m); }
    bool slow_drift_ignores_fast() const override { return !with_fast_; }
    std::unique_ptr<BoundCoefficients> bind(const EmpiricalMeasure& mu,
                                            const EmpiricalMeasure& nu) const override {
        return std::make_unique<ReferenceBound>(p_, with_fast_, mu, nu);
    }

private:
    ReferenceParams p_;
    bool with_fast_;
};

void validate(const ReferenceParams& p) {
    const double values[] = {p.a, p.b, p.q, p.k, p.lambda, p.m, p.theta};
    const char* names[] = {"a", "b", "q", "k", "lambda", "m", "theta"};
    for (std::size_t i = 0; i < 7; ++i)
        if (!(values[i] > 0.0) || !std::isfinite(values[i]))
            throw ConfigError(std::string("reference: parameter ") + names[i] + " must be positive");
    if (p.p < 1) throw ConfigError("reference: p must be >= 1");
    if (!(2.0 * p.k - p.m * p.m > 0.0))
        throw ConfigError("reference: 2k - m^2 must be positive");
}

// ---------------------------------------------------------------------------
// OU test system

class OuBound final : public BoundCoefficients {
public:
    explicit OuBound(const OuTestParams& p) : p_(p) {}
    void h1(std::span<const double> x, std::span<const double> y,
            std::span<double> out) const override {
        out[0] = -p_.alpha * x[0] + p_.beta * y[0];
    }
    void gamma1(std::span<const double>, std::span<double> out) const override {
        out[0] = p_.sigma1;
    }
    void h2(std::span<const double> y, std::span<double> out) const override {
        out[0] = -p_.k * y[0];
    }
    void gamma2(std::span<const double>, std::span<double> out) const override {
        out[0] = p_.sigma;
    }

private:
    OuTestParams p_;
};

class OuModel final : public Model {
public:
    explicit OuModel(const OuTestParams& p) : p_(p) {}
    std::string name() const override { return "ou-test"; }
    Dims dims() const override { return {1, 1, 1, 1}; }
    int p() const override { return p_.p; }
    double fast_rate() const override { return p_.k; }
    std::unique_ptr<BoundCoefficients> bind(const EmpiricalMeasure&,
                                            const EmpiricalMeasure&) const override {
        return std::make_unique<OuBound>(p_);
    }

private:
    OuTestParams p_;
};

// ---------------------------------------------------------------------------
// Callable-backed model. The bound object keeps its own copies of the measures.

class FunctionalBound final : public BoundCoefficients {
public:
    FunctionalBound(const FunctionalModelSpec& spec, const EmpiricalMeasure& mu,
                    const EmpiricalMeasure& nu)
        : spec_(spec), mu_(mu), nu_(nu) {}
    void h1(std::span<const double> x, std::span<const double> y,
            std::span<double> out) const override {
        std::fill(out.begin(), out.end(), 0.0);
        if (spec_.h1) spec_.h1(x, mu_, y, nu_, out);
    }
    void gamma1(std::span<const double> x, std::span<double> out) const override {
        std::fill(out.begin(), out.end(), 0.0);
        if (spec_.gamma1) spec_.gamma1(x, mu_, out);
    }
    void h2(std::span<const double> y, std::span<double> out) const override {
        std::fill(out.begin(), out.end(), 0.0);
        if (spec_.h2) spec_.h2(mu_, y, nu_, out);
    }
    void gamma2(std::span<const double> y, std::span<double> out) const override {
        std::fill(out.begin(), out.end(), 0.0);
        if (spec_.gamma2) spec_.gamma2(mu_, y, nu_, out);
    }

private:
    FunctionalModelSpec spec_;
    EmpiricalMeasure mu_;
    EmpiricalMeasure nu_;
};

class FunctionalModel final : public Model {
public:
    explicit FunctionalModel(FunctionalModelSpec spec) : spec_(std::move(spec)) {}
    std::string name() const override { return spec_.name; }
    Dims dims() const override { return spec_.dims; }
    int p() const override { return spec_.p; }
    double fast_rate() const override { return spec_.fast_rate; }
    std::unique_ptr<BoundCoefficients> bind(const EmpiricalMeasure& mu,
                                            const EmpiricalMeasure& nu) const override {
        return std::make_unique<FunctionalBound>(spec_, mu, nu);
    }

private:
    FunctionalModelSpec spec_;
};

}  // namespace

// ---------------------------------------------------------------------------

std::vector<double> Model::h1(std::span<const double> x, const EmpiricalMeasure& mu,
                              std::span<const double> y, const EmpiricalMeasure& nu) const {
    const Dims d = dims();
    require_size(x.size(), d.n, "h1 x");
    require_size(mu.dim(), d.n, "h1 mu");
    require_size(y.size(), d.m, "h1 y");
    require_size(nu.dim(), d.m, "h1 nu");
    std::vector<double> out(d.n);
    bind(mu, nu)->h1(x, y, out);
    require_finite(out, "h1");
    return out;
}

std::vector<double> Model::gamma1(std::span<const double> x, const EmpiricalMeasure& mu) const {
    const Dims d = dims();
    require_size(x.size(), d.n, "gamma1 x");
    require_size(mu.dim(), d.n, "gamma1 mu");
    std::vector<double> out(d.n * d.d1);
    bind(mu, fast_origin())->gamma1(x, out);
    require_finite(out, "gamma1");
    return out;
}

std::vector<double> Model::h2(const EmpiricalMeasure& mu, std::span<const double> y,
                              const EmpiricalMeasure& nu) const {
    const Dims d = dims();
    require_size(mu.dim(), d.n, "h2 mu");
    require_size(y.size(), d.m, "h2 y");
    require_size(nu.dim(), d.m, "h2 nu");
    std::vector<double> out(d.m);
    bind(mu, nu)->h2(y, out);
    require_finite(out, "h2");
    return out;
}

std::vector<double> Model::gamma2(const EmpiricalMeasure& mu, std::span<const double> y,
                                  const EmpiricalMeasure& nu) const {
    const Dims d = dims();
    require_size(mu.dim(), d.n, "gamma2 mu");
    require_size(y.size(), d.m, "gamma2 y");
    require_size(nu.dim(), d.m, "gamma2 nu");
    std::vector<double> out(d.m * d.d2);
    bind(mu, nu)->gamma2(y, out);
    require_finite(out, "gamma2");
    return out;
}

EmpiricalMeasure Model::fast_origin() const {
    const std::vector<double> zero(dims().m, 0.0);
    return EmpiricalMeasure::dirac(zero);
}

ReferenceParams ReferenceParams::for_moment_order(int p, double a, double b, double q) {
    if (p < 1) throw ConfigError("reference: p must be >= 1");
    ReferenceParams out;
    out.a = a;
    out.b = b;
    out.q = q;
    out.p = p;
    out.k = 1.0 / (8.0 * p);
    out.lambda = 1.0 / (32.0 * p);
    out.m = 1.0 / (64.0 * p);
    out.theta = 1.0 / (64.0 * p);
    return out;
}

std::shared_ptr<const Model> build_reference_model(const ReferenceParams& params) {
    validate(params);
    return std::make_shared<ReferenceModel>(params, true);
}

std::shared_ptr<const Model> build_slow_only_model(const ReferenceParams& params) {
    validate(params);
    return std::make_shared<ReferenceModel>(params, false);
}

std::shared_ptr<const Model> build_ou_test_model(const OuTestParams& params) {
    if (!(params.k > 0.0)) throw ConfigError("ou-test: k must be positive");
    if (params.p < 1) throw ConfigError("ou-test: p must be >= 1");
    return std::make_shared<OuModel>(params);
}

std::shared_ptr<const Model> build_functional_model(FunctionalModelSpec spec) {
    if (spec.dims.n == 0 || spec.dims.m == 0 || spec.dims.d1 == 0 || spec.dims.d2 == 0)
        throw DimensionError("functional model: dimensions must be positive");
    return std::make_shared<FunctionalModel>(std::move(spec));
}

namespace {

double take(ModelParams& params, const std::string& key, double fallback) {
    const auto it = params.find(key);
    if (it == params.end()) return fallback;
    const double v = it->second;
    params.erase(it);
    return v;
}

int take_order(ModelParams& params, int fallback) {
    const double v = take(params, "p", fallback);
    if (v != std::floor(v) || v < 1) throw ConfigError("model parameter p must be an integer >= 1");
    return static_cast<int>(v);
}

void reject_leftovers(const std::string& model, const ModelParams& params) {
    if (params.empty()) return;
    std::string keys;
    for (const auto& [k, _] : params) keys += (keys.empty() ? "" : ", ") + k;
    throw ConfigError("model " + model + ": unknown parameter(s): " + keys);
}

}  // namespace

std::shared_ptr<const Model> make_model(const std::string& name, const ModelParams& given) {
    ModelParams params = given;
    if (name == "reference" || name == "slow-only-test") {
        const int p = take_order(params, 3);
        const double a = take(params, "a", 1.0);
        const double b = take(params, "b", 1.0);
        const double q = take(params, "q", 1.0);
        ReferenceParams e = ReferenceParams::for_moment_order(p, a, b, q);
        e.k = take(params, "k", e.k);
        e.lambda = take(params, "lambda", e.lambda);
        e.m = take(params, "m", e.m);
        e.theta = take(params, "theta", e.theta);
        reject_leftovers(name, params);
        return name == "reference" ? build_reference_model(e) : build_slow_only_model(e);
    }
    if (name == "ou-test") {
        OuTestParams o;
        o.p = take_order(params, o.p);
        o.alpha = take(params, "alpha", o.alpha);
        o.beta = take(params, "beta", o.beta);
        o.sigma1 = take(params, "sigma1", o.sigma1);
        o.k = take(params, "k", o.k);
        o.sigma = take(params, "sigma", o.sigma);
        reject_leftovers(name, params);
        return build_ou_test_model(o);
    }
    throw ConfigError("unknown model '" + name + "' (known: reference, ou-test, slow-only-test)");
}

std::vector<std::string> registered_models() { return {"reference", "ou-test", "slow-only-test"}; }

// ---------------------------------------------------------------------------
// Probes

PairSampler gaussian_pair_sampler(const Dims& dims, const SamplerOptions& options) {
    return [dims, options](std::size_t index) {
        rng::NormalStream rs(rng::StreamId{options.seed, 0}, rng::Tag::kProbe,
                             static_cast<std::uint32_t>(index), 0);
        const std::size_t nx = dims.n == 1 ? options.atoms : std::min<std::size_t>(options.atoms, 8);
        const std::size_t ny = dims.m == 1 ? options.atoms : std::min<std::size_t>(options.atoms, 8);

        auto point = [&rs](std::size_t d, double scale) {
            std::vector<double> v(d);
            for (double& e : v) e = scale * rs.normal();
            return v;
        };
        auto cloud = [&rs](std::size_t count, std::size_t d) {
            const double loc = rs.normal();
            const double scale = 0.5 + rs.uniform();
            std::vector<double> atoms(count * d);
            for (double& e : atoms) e = loc + scale * rs.normal();
            return atoms;
        };
        auto jitter = [&rs](std::vector<double> v, double size) {
            for (double& e : v) e += size * rs.normal();
            return v;
        };
        auto translate = [](std::vector<double> v, std::span<const double> shift) {
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += shift[i % shift.size()];
            return v;
        };

        const auto x1 = point(dims.n, 2.0);
        const auto y1 = point(dims.m, 2.0);
        const auto mu1 = cloud(nx, dims.n);
        const auto nu1 = cloud(ny, dims.m);
        std::vector<double> x2, y2, mu2, nu2;
        switch (index % 4) {
            case 0:  // independent
                x2 = point(dims.n, 2.0);
                y2 = point(dims.m, 2.0);
                mu2 = cloud(nx, dims.n);
                nu2 = cloud(ny, dims.m);
                break;
            case 1:  // small joint perturbation
                x2 = jitter(x1, 0.1);
                y2 = jitter(y1, 0.1);
                mu2 = jitter(mu1, 0.1);
                nu2 = jitter(nu1, 0.1);
                break;
            case 2: {  // translated measures, fast shift aligned with the nu translation
                const auto sx = point(dims.n, 1.0);
                const auto sy = point(dims.m, 1.0);
                x2 = translate(x1, sx);
                y2 = translate(y1, sy);
                mu2 = translate(mu1, sx);
                nu2 = translate(nu1, sy);
                break;
            }
            default:  // fast state only
                x2 = x1;
                y2 = point(dims.m, 2.0);
                mu2 = mu1;
                nu2 = nu1;
                break;
        }
        if (options.common_mu) mu2 = mu1;
        if (options.common_nu) nu2 = nu1;
        if (options.x_only) {
            y2 = y1;
            mu2 = mu1;
            nu2 = nu1;
        }
        return InputPair{
            {x1, EmpiricalMeasure::uniform(mu1, dims.n), y1, EmpiricalMeasure::uniform(nu1, dims.m)},
            {x2, EmpiricalMeasure::uniform(mu2, dims.n), y2, EmpiricalMeasure::uniform(nu2, dims.m)}};
    };
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

struct Evaluated {
    std::vector<double> h1, gamma1, h2, gamma2;
};

Evaluated evaluate(const Model& model, const InputPoint& pt) {
    return {model.h1(pt.x, pt.mu, pt.y, pt.nu), model.gamma1(pt.x, pt.mu),
            model.h2(pt.mu, pt.y, pt.nu), model.gamma2(pt.mu, pt.y, pt.nu)};
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

AssumptionReport probe_lipschitz(const Model& model, const PairSampler& sampler,
                                 std::size_t n_pairs) {
    if (n_pairs == 0) throw Error("probe_lipschitz: n_pairs must be >= 1");
    AssumptionReport report;
    report.hypothesis = "H1";
    report.p = model.p();
    report.beta1 = report.beta2 = kNaN;
    double l1 = 0.0, l2 = 0.0;
    std::size_t informative = 0;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const InputPair pair = sampler(i);
        ++report.pairs;
        const Evaluated a = evaluate(model, pair.first);
        const Evaluated b = evaluate(model, pair.second);
        const double wmu = std::pow(wasserstein2(pair.first.mu, pair.second.mu), 2);
        const double wnu = std::pow(wasserstein2(pair.first.nu, pair.second.nu), 2);
        const double dy = sq_dist(pair.first.y, pair.second.y);
        const double denom2 = wmu + dy + wnu;
        const double denom1 = sq_dist(pair.first.x, pair.second.x) + denom2;
        if (denom1 <= 0.0) {
            ++report.degenerate;
            continue;
        }
        ++informative;
        l1 = std::max(l1, (sq_dist(a.h1, b.h1) + sq_dist(a.gamma1, b.gamma1)) / denom1);
        if (denom2 > 0.0)
            l2 = std::max(l2, (sq_dist(a.h2, b.h2) + sq_dist(a.gamma2, b.gamma2)) / denom2);
    }
    if (informative == 0) throw EstimationError("probe_lipschitz: no informative pairs");
    report.lipschitz_h1_gamma1 = l1;
    report.lipschitz_h2_gamma2 = l2;
    report.worst_ratio = std::max(l1, l2);
    report.pass = std::isfinite(l1) && std::isfinite(l2);
    return report;
}

std::pair<double, double> fit_dissipativity_constants(std::span<const double> a,
                                                      std::span<const double> b,
                                                      std::span<const double> v) {
    // For fixed beta2 the best beta1 is min_i (beta2*b_i - v_i)/a_i over a_i > 0;
    // beta1 - beta2 is then concave piecewise-linear in beta2.
    double lo = 0.0;
    bool any_y = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > 0.0) {
            any_y = true;
        } else if (v[i] > 0.0) {
            if (!(b[i] > 0.0)) return {-std::numeric_limits<double>::infinity(), 0.0};
            lo = std::max(lo, v[i] / b[i]);
        }
    }
    if (!any_y) throw EstimationError("dissipativity fit: no pair with distinct fast states");
    auto beta1_at = [&](double beta2) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i] > 0.0) best = std::min(best, (beta2 * b[i] - v[i]) / a[i]);
        return best;
    };
    auto objective = [&](double beta2) { return beta1_at(beta2) - beta2; };

    double hi = std::max(1.0, 2.0 * lo);
    while (hi < 1e12 && objective(2.0 * hi) > objective(hi)) hi *= 2.0;
    hi *= 2.0;
    double left = lo, right = hi;
    for (int it = 0; it < 200 && right - left > 1e-14 * (1.0 + right); ++it) {
        const double m1 = left + (right - left) / 3.0;
        const double m2 = right - (right - left) / 3.0;
        if (objective(m1) < objective(m2))
            left = m1;
        else
            right = m2;
    }
    double beta2 = 0.5 * (left + right);
    if (objective(lo) >= objective(beta2)) beta2 = lo;
    return {beta1_at(beta2), beta2};
}

AssumptionReport probe_dissipativity(const Model& model, const PairSampler& sampler,
                                     std::size_t n_pairs, const DissipativityOptions& options) {
    if (n_pairs == 0) throw Error("probe_dissipativity: n_pairs must be >= 1");
    const double lip = std::isfinite(options.lipschitz_h2_gamma2)
                           ? options.lipschitz_h2_gamma2
                           : probe_lipschitz(model, gaussian_pair_sampler(model.dims()), n_pairs)
                                 .lipschitz_h2_gamma2;

    // Per-pair ingredients; the order enters only through (2p'-1)|dgamma2|^2.
    std::vector<double> dy2(n_pairs), w2(n_pairs), drift(n_pairs), diff2(n_pairs);
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const InputPair pair = sampler(i);
        const InputPoint& s = pair.first;
        const InputPoint& t = pair.second;
        if (wasserstein2(s.mu, t.mu) != 0.0)
            throw Error("probe_dissipativity: sampler must hold mu common within each pair");
        const auto h2a = model.h2(s.mu, s.y, s.nu);
        const auto h2b = model.h2(t.mu, t.y, t.nu);
        const auto g2a = model.gamma2(s.mu, s.y, s.nu);
        const auto g2b = model.gamma2(t.mu, t.y, t.nu);
        double inner = 0.0;
        for (std::size_t j = 0; j < s.y.size(); ++j) inner += (s.y[j] - t.y[j]) * (h2a[j] - h2b[j]);
        dy2[i] = sq_dist(s.y, t.y);
        w2[i] = std::pow(wasserstein2(s.nu, t.nu), 2);
        drift[i] = 2.0 * inner;
        diff2[i] = sq_dist(g2a, g2b);
    }

    AssumptionReport report;
    report.hypothesis = "H2";
    report.pairs = n_pairs;
    report.lipschitz_h1_gamma1 = kNaN;
    report.lipschitz_h2_gamma2 = lip;
    for (std::size_t i = 0; i < n_pairs; ++i)
        if (dy2[i] + w2[i] == 0.0) ++report.degenerate;

    const int p_max = model.p();
    const int p_min = options.any_order_up_to_p ? 1 : p_max;
    bool have = false;
    for (int order = p_max; order >= p_min; --order) {
        std::vector<double> value(n_pairs);
        double worst = 0.0;
        for (std::size_t i = 0; i < n_pairs; ++i) {
            value[i] = drift[i] + (2.0 * order - 1.0) * diff2[i];
            if (dy2[i] + w2[i] > 0.0) worst = std::max(worst, value[i] / (dy2[i] + w2[i]));
        }
        const auto [beta1, beta2] = fit_dissipativity_constants(dy2, w2, value);
        const bool ok = beta1 > 0.0 && beta1 - beta2 > 4.0 * order * lip;
        if (!have || ok) {
            report.beta1 = beta1;
            report.beta2 = beta2;
            report.p = order;
            report.worst_ratio = worst;
            report.pass = ok;
            have = true;
        }
        if (ok) break;
    }
    return report;
}

}  // namespace mvsim
