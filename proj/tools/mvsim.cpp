#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mvsim/config.hpp"
#include "mvsim/error.hpp"
#include "mvsim/experiments.hpp"
#include "mvsim/frozen.hpp"
#include "mvsim/limit.hpp"
#include "mvsim/parallel.hpp"
#include "mvsim/poisson.hpp"

using namespace mvsim;
using json = nlohmann::json;

namespace {

struct GlobalFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::size_t threads = 0;
    bool json = false;
    bool paths = false;
};

RunConfig load(const GlobalFlags& flags) {
    RunConfig cfg = flags.config.empty() ? RunConfig{} : parse_run_config(flags.config);
    if (flags.seed) cfg.seed = *flags.seed;
    if (flags.out) cfg.output_dir = *flags.out;
    if (flags.paths) cfg.write_paths = true;
    cfg.validate();
    return cfg;
}

std::filesystem::path out_dir(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    return cfg.output_dir;
}

void finish(const GlobalFlags& flags, const RunConfig& cfg, const std::string& command, json payload) {
    const auto report = report_envelope(command, cfg, std::move(payload));
    write_atomic((out_dir(cfg) / "report.json").string(), report.dump(2) + "\n");
    if (flags.json)
        std::cout << report.dump(2) << "\n";
    else
        std::cerr << command << ": wrote " << (std::filesystem::path(cfg.output_dir) / "report.json").string()
                  << "\n";
}

EmpiricalMeasure probe_law(const RunConfig& cfg, const Model& model) {
    const std::size_t n = model.dims().n;
    if (cfg.probe_mu.size() % n != 0) throw ConfigError("probe.mu: atom count must be a multiple of n");
    return EmpiricalMeasure::uniform(cfg.probe_mu, n);
}

InvariantOptions invariant_options(const RunConfig& cfg) {
    InvariantOptions io;
    io.n_particles = cfg.invariant_particles;
    io.samples_per_particle = cfg.invariant_samples;
    io.seed = cfg.seed;
    return io;
}

json invariant_json(const InvariantEstimate& inv) {
    return {{"atoms", inv.eta.size()},
            {"mean", inv.mean},
            {"mean_stderr", inv.mean_stderr},
            {"second_moment", inv.second_moment},
            {"second_moment_stderr", inv.second_moment_stderr},
            {"rate", inv.rate},
            {"burn_in", inv.burn_in},
            {"horizon", inv.horizon},
            {"thinning", inv.thinning},
            {"batches", inv.batches}};
}

std::vector<double> point(double v, std::size_t dim) { return std::vector<double>(dim, v); }

// ---------------------------------------------------------------------------

void cmd_simulate(const GlobalFlags& flags) {
    const RunConfig cfg = load(flags);
    const auto start = std::chrono::steady_clock::now();
    const auto model = make_model(cfg.model, cfg.params);
    const auto init = cfg.initial.build(model->dims());
    const SimConfig sc = cfg.sim(cfg.epsilon);
    std::vector<PathBundle> runs(cfg.replicas);
    parallel_for(
        cfg.replicas,
        [&](std::size_t r) {
            runs[r] = simulate_system(*model, sc, init, static_cast<std::uint32_t>(r),
                                      {.keep_fast = cfg.write_paths});
        },
        1);
    json reps = json::array();
    for (const auto& run : runs) {
        const auto mu = EmpiricalMeasure::uniform(run.x.back(), run.n);
        reps.push_back({{"replica", run.replica},
                        {"x_mean", mu.mean()},
                        {"x_second_moment", mu.second_moment()},
                        {"fast_sup_sq_mean", std::accumulate(run.fast_sup_sq.begin(), run.fast_sup_sq.end(), 0.0) /
                                                 static_cast<double>(run.fast_sup_sq.size())}});
    }
    if (cfg.write_paths) {
        std::ostringstream csv;
        write_paths_csv(csv, runs);
        write_atomic((out_dir(cfg) / "paths.csv").string(), csv.str());
    }
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    finish(flags, cfg, "simulate",
           {{"epsilon", cfg.epsilon},
            {"substeps", sc.resolve_substeps(*model)},
            {"macro_steps", sc.macro_steps()},
            {"endpoints", reps},
            {"wall_seconds", wall}});
}

void cmd_frozen_invariant(const GlobalFlags& flags) {
    const RunConfig cfg = load(flags);
    const auto model = make_model(cfg.model, cfg.params);
    const auto mu = probe_law(cfg, *model);
    const auto inv = estimate_invariant(*model, mu, invariant_options(cfg));
    std::ostringstream csv;
    csv.precision(17);
    const std::size_t m = inv.eta.dim();
    csv << "atom";
    for (std::size_t c = 0; c < m; ++c) csv << ",y" << c;
    csv << "\n";
    for (std::size_t i = 0; i < inv.eta.size(); ++i) {
        csv << i;
        for (double v : inv.eta.atom(i)) csv << "," << v;
        csv << "\n";
    }
    write_atomic((out_dir(cfg) / "eta.csv").string(), csv.str());
    finish(flags, cfg, "frozen-invariant", {{"mu", cfg.probe_mu}, {"invariant", invariant_json(inv)}});
}

void cmd_hbar(const GlobalFlags& flags, std::size_t points) {
    const RunConfig cfg = load(flags);
    if (points < 2) throw ConfigError("hbar: --points must be at least 2");
    const auto model = make_model(cfg.model, cfg.params);
    const auto mu = probe_law(cfg, *model);
    const auto inv = estimate_invariant(*model, mu, invariant_options(cfg));
    const std::size_t n = model->dims().n;
    const auto [lo, hi] = AveragedCache::grid_range(mu);
    std::ostringstream csv;
    csv.precision(17);
    csv << "x";
    for (std::size_t c = 0; c < n; ++c) csv << ",hbar" << c;
    csv << "\n";
    std::vector<std::vector<double>> values(points);
    parallel_for(
        points,
        [&](std::size_t g) {
            const double x = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(points - 1);
            values[g] = estimate_hbar(*model, point(x, n), mu, inv);
        },
        4);
    for (std::size_t g = 0; g < points; ++g) {
        csv << lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(points - 1);
        for (double v : values[g]) csv << "," << v;
        csv << "\n";
    }
    write_atomic((out_dir(cfg) / "hbar.csv").string(), csv.str());
    const auto x_probe = point(cfg.probe_x, n);
    finish(flags, cfg, "hbar",
           {{"mu", cfg.probe_mu},
            {"x", cfg.probe_x},
            {"hbar", estimate_hbar(*model, x_probe, mu, inv)},
            {"centering_residual", centering_check(*model, x_probe, mu, inv)},
            {"range", {lo, hi}},
            {"points", points},
            {"invariant", invariant_json(inv)}});
}

void cmd_poisson_check(const GlobalFlags& flags) {
    const RunConfig cfg = load(flags);
    const auto model = make_model(cfg.model, cfg.params);
    const Dims d = model->dims();
    const auto mu = probe_law(cfg, *model);
    const auto inv = estimate_invariant(*model, mu, invariant_options(cfg));
    const auto x = point(cfg.probe_x, d.n);
    const auto y = point(cfg.probe_y, d.m);
    PoissonOptions po;
    po.seed = cfg.seed;
    const auto psi = solve_psi(*model, x, mu, y, inv.eta, inv, po);
    json grad;
    try {
        const auto g = dy_psi(*model, x, mu, y, inv.eta, inv, 1e-3, po);
        grad = {{"gradient", g.gradient}, {"stderr", g.gradient_stderr}, {"times_gamma2", g.times_gamma2}};
    } catch (const EstimationError& e) {
        grad = {{"error", e.what()}};
    }
    json upsilon;
    try {
        UpsilonOptions uo = limit_options(cfg).upsilon;
        const auto u = estimate_upsilon(*model, x, mu, inv, uo);
        upsilon = {{"matrix", u.matrix}, {"raw", u.raw}, {"raw_stderr", u.raw_stderr}, {"atoms", u.atoms.size() / d.m}};
    } catch (const Error& e) {
        upsilon = {{"error", e.what()}};
    }
    const double h = FrozenOptions{}.resolve_dt(*model);
    json residuals = json::array();
    GeneratorOptions go;
    go.psi.seed = cfg.seed;
    for (int k : {1, 2, 4}) {
        const double delta = k * h;
        residuals.push_back({{"delta", delta}, {"residual", generator_residual(*model, x, mu, y, inv.eta, inv, delta, go)}});
    }
    finish(flags, cfg, "poisson-check",
           {{"mu", cfg.probe_mu},
            {"x", x},
            {"y", y},
            {"psi", {{"value", psi.value},
                     {"stderr", psi.stderr_},
                     {"t_cut", psi.t_cut},
                     {"tail_bound", psi.tail_bound},
                     {"tail_change", std::isfinite(psi.tail_change) ? json(psi.tail_change) : json()}}},
            {"dy_psi", grad},
            {"upsilon", upsilon},
            {"generator_residual", residuals},
            {"invariant", invariant_json(inv)}});
}

void cmd_clt_sim(const GlobalFlags& flags) {
    const RunConfig cfg = load(flags);
    const StudyContext ctx = make_study_context(cfg);
    const SimConfig sc = cfg.sim(cfg.epsilon);
    const LimitOptions lo = limit_options(cfg);
    struct Endpoints {
        std::vector<double> u_eps, u;
    };
    std::vector<Endpoints> ends(cfg.replicas);
    parallel_for(
        cfg.replicas,
        [&](std::size_t r) {
            const auto replica = static_cast<std::uint32_t>(r);
            const auto xbar = simulate_averaged(*ctx.model, sc, *ctx.cache, ctx.init, replica);
            const auto sys = simulate_system(*ctx.model, sc, ctx.init, replica, {.keep_fast = false});
            const auto dev = deviation_paths(sys, xbar, cfg.epsilon);
            const auto coeffs = numerical_limit_coefficients(ctx.model, ctx.cache, lo);
            const auto lim = simulate_limit_U(*ctx.model, sc, coeffs, xbar);
            ends[r] = {dev.u.back(), lim.x.back()};
        },
        1);
    const std::size_t n = ctx.model->dims().n;
    std::ostringstream csv;
    csv.precision(17);
    csv << "replica,particle";
    for (std::size_t c = 0; c < n; ++c) csv << ",u_eps" << c;
    for (std::size_t c = 0; c < n; ++c) csv << ",u" << c;
    csv << "\n";
    json summary = json::array();
    for (std::size_t r = 0; r < ends.size(); ++r) {
        const std::size_t N = ends[r].u.size() / n;
        for (std::size_t i = 0; i < N; ++i) {
            csv << r << "," << i;
            for (std::size_t c = 0; c < n; ++c) csv << "," << ends[r].u_eps[i * n + c];
            for (std::size_t c = 0; c < n; ++c) csv << "," << ends[r].u[i * n + c];
            csv << "\n";
        }
        const auto a = EmpiricalMeasure::uniform(ends[r].u_eps, n);
        const auto b = EmpiricalMeasure::uniform(ends[r].u, n);
        summary.push_back({{"replica", r},
                           {"u_eps_mean", a.mean()},
                           {"u_mean", b.mean()},
                           {"u_eps_second_moment", a.second_moment()},
                           {"u_second_moment", b.second_moment()}});
    }
    write_atomic((out_dir(cfg) / "endpoints.csv").string(), csv.str());
    finish(flags, cfg, "clt-sim", {{"epsilon", cfg.epsilon}, {"horizon", cfg.horizon}, {"replicas", summary}});
}

void cmd_rates(const GlobalFlags& flags, const std::string& command,
               const std::function<std::vector<RateReport>(const RunConfig&)>& study) {
    const RunConfig cfg = load(flags);
    const auto reports = study(cfg);
    write_rate_outputs(cfg.output_dir, command, cfg, reports);
    if (flags.json) {
        std::cout << std::ifstream((std::filesystem::path(cfg.output_dir) / "report.json").string()).rdbuf();
        return;
    }
    for (const auto& r : reports) {
        std::cerr << command << " " << r.label << ": ";
        if (r.exact)
            std::cerr << "exact averaging";
        else
            std::cerr << "slope " << r.fit.slope << " [" << r.fit.ci[0] << ", " << r.fit.ci[1] << "]";
        if (r.noise_dominated) std::cerr << " (noise-dominated)";
        std::cerr << "\n";
    }
}

void cmd_moments(const GlobalFlags& flags) {
    const RunConfig cfg = load(flags);
    const auto table = moment_uniformity_study(cfg);
    std::ostringstream csv;
    csv.precision(17);
    csv << "epsilon";
    for (const auto& s : table.statistics) csv << "," << s.name << "," << s.name << "_stderr";
    csv << "\n";
    for (std::size_t e = 0; e < table.ladder.size(); ++e) {
        csv << table.ladder[e];
        for (const auto& s : table.statistics) csv << "," << s.mean[e] << "," << s.stderr_[e];
        csv << "\n";
    }
    write_atomic((out_dir(cfg) / "moments.csv").string(), csv.str());
    finish(flags, cfg, "moments", table.to_json());
    for (const auto& f : table.failures) std::cerr << "moments: " << f << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multiscale McKean-Vlasov simulator and rate studies"};
    app.require_subcommand(1);
    app.footer("Configuration (YAML) keys and defaults:\n\n" + default_config_yaml());

    GlobalFlags flags;
    std::size_t hbar_points = 41;
    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config, "YAML run configuration")->check(CLI::ExistingFile);
        sub->add_option("--seed", flags.seed, "Override the seed (u64)");
        sub->add_option("--out", flags.out, "Output directory");
        sub->add_option("--threads", flags.threads, "Worker threads (0 = all cores)");
        sub->add_flag("--json", flags.json, "Print the report to stdout");
    };

    std::vector<std::pair<CLI::App*, std::function<void()>>> commands;
    const auto add = [&](const std::string& name, const std::string& help, std::function<void()> run) {
        CLI::App* sub = app.add_subcommand(name, help);
        add_common(sub);
        commands.emplace_back(sub, std::move(run));
        return sub;
    };
    add("simulate", "Run the coupled system at sim.epsilon", [&] { cmd_simulate(flags); })
        ->add_flag("--paths", flags.paths, "Also write paths.csv");
    add("frozen-invariant", "Estimate the frozen invariant law at probe.mu (eta.csv)",
        [&] { cmd_frozen_invariant(flags); });
    add("hbar", "Tabulate the averaged drift at probe.mu (hbar.csv)", [&] { cmd_hbar(flags, hbar_points); })
        ->add_option("--points", hbar_points, "Grid points");
    add("poisson-check", "Poisson corrector, its y-gradient, Upsilon and generator residuals at the probe",
        [&] { cmd_poisson_check(flags); });
    add("clt-sim", "Endpoint samples of U^eps and U at sim.epsilon (endpoints.csv)", [&] { cmd_clt_sim(flags); });
    add("strong-rate", "Strong averaging rate over the ladder",
        [&] { cmd_rates(flags, "strong-rate", strong_rate_study); });
    add("clt-rate", "Weak CLT rate over the ladder", [&] { cmd_rates(flags, "clt-rate", clt_weak_rate_study); });
    add("fluctuation", "Decay of the centered fluctuation integral", [&] {
        cmd_rates(flags, "fluctuation", [](const RunConfig& c) { return std::vector<RateReport>{fluctuation_study(c)}; });
    });
    add("moments", "Moment uniformity in epsilon", [&] { cmd_moments(flags); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        for (auto& [sub, run] : commands)
            if (sub->parsed()) with_threads(flags.threads, run);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
