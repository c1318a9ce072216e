#include "mvsim/config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "mvsim/error.hpp"

namespace mvsim {

InitialConditions InitialSpec::build(const Dims& dims) const {
    InitialConditions init;
    init.slow = InitialConditions::gaussian(rho_mean, rho_sd);
    init.fast = InitialConditions::gaussian(xi_mean, xi_sd);
    init.y0.assign(dims.m, y0);
    return init;
}

SimConfig RunConfig::sim(double eps) const {
    SimConfig c;
    c.epsilon = eps;
    c.dt = dt;
    c.n_particles = particles;
    c.horizon = horizon;
    c.seed = seed;
    c.substeps = substeps;
    c.replicas = replicas;
    c.fast_cfl = fast_cfl;
    return c;
}

void RunConfig::validate() const {
    if (ladder.size() < 4) throw ConfigError("config: ladder length >= 4 required for slope fitting");
    for (double e : ladder)
        if (!(e > 0.0 && e < 1.0)) throw ConfigError("config: ladder values must lie in (0,1)");
    for (std::size_t i = 1; i < ladder.size(); ++i)
        if (!(ladder[i] < ladder[i - 1]))
            throw ConfigError("config: ladder values must be distinct");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("config: epsilon must lie in (0,1)");
    if (replicas == 0) throw ConfigError("config: replicas must be positive");
    if (!(initial.rho_sd >= 0.0) || !(initial.xi_sd >= 0.0))
        throw ConfigError("config: initial standard deviations must be >= 0");
    for (int p : moment_orders)
        if (p < 1) throw ConfigError("config: moment orders must be >= 1");
    static const std::set<std::string> phis{"tanh", "rational", "cos", "constant"};
    for (const auto& f : test_functions)
        if (!phis.count(f)) throw ConfigError("config: unknown test function '" + f + "'");
    if (fluctuation_functional != "cos-term" && fluctuation_functional != "zero")
        throw ConfigError("config: fluctuation functional must be cos-term or zero");
    if (!(trend_alpha > 0.0 && trend_alpha < 1.0)) throw ConfigError("config: trend_alpha in (0,1)");
    if (!(centering_tolerance > 0.0)) throw ConfigError("config: centering_tolerance must be > 0");
    if (grid_nodes < 2 || upsilon_nodes < 2) throw ConfigError("config: grids need >= 2 nodes");
    if (upsilon_stride == 0 || upsilon_atoms == 0 || upsilon_replicas == 0 ||
        invariant_particles < 2 || invariant_samples == 0)
        throw ConfigError("config: averaging and limit sizes must be positive");
    if (probe_mu.empty()) throw ConfigError("config: probe.mu needs at least one atom");
    sim(epsilon).validate();
    make_model(model, params);
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["model"] = model;
    j["params"] = nlohmann::json::object();
    for (const auto& [k, v] : params) j["params"][k] = v;
    j["seed"] = seed;
    j["sim"] = {{"epsilon", epsilon},   {"dt", dt},         {"particles", particles},
                {"horizon", horizon},   {"replicas", replicas}, {"substeps", substeps},
                {"fast_cfl", fast_cfl}};
    j["initial"] = {{"rho_mean", initial.rho_mean}, {"rho_sd", initial.rho_sd},
                    {"xi_mean", initial.xi_mean},   {"xi_sd", initial.xi_sd},
                    {"y0", initial.y0}};
    j["ladder"] = ladder;
    j["strong"] = {{"moment_orders", moment_orders}};
    j["clt"] = {{"test_functions", test_functions}};
    j["fluctuation"] = {{"functional", fluctuation_functional},
                        {"centering_tolerance", centering_tolerance}};
    j["moments"] = {{"trend_alpha", trend_alpha}};
    j["averaging"] = {{"grid_nodes", grid_nodes},
                      {"invariant_particles", invariant_particles},
                      {"invariant_samples", invariant_samples}};
    j["limit"] = {{"upsilon_nodes", upsilon_nodes},
                  {"upsilon_stride", upsilon_stride},
                  {"upsilon_atoms", upsilon_atoms},
                  {"upsilon_replicas", upsilon_replicas}};
    j["probe"] = {{"mu", probe_mu}, {"x", probe_x}, {"y", probe_y}};
    j["output"] = {{"dir", output_dir}, {"paths", write_paths}};
    return j;
}

namespace {

class Reader {
public:
    explicit Reader(std::string source) : source_(std::move(source)) {}

    [[noreturn]] void fail(const YAML::Node& node, const std::string& what) const {
        const auto mark = node.Mark();
        std::ostringstream os;
        os << source_;
        if (mark.line >= 0) os << ":" << mark.line + 1 << ":" << mark.column + 1;
        os << ": " << what;
        throw ConfigError(os.str());
    }

    template <class T>
    T scalar(const YAML::Node& node, const std::string& key) const {
        if (!node.IsScalar()) fail(node, "'" + key + "' must be a scalar");
        try {
            return node.as<T>();
        } catch (const YAML::Exception&) {
            fail(node, "'" + key + "' has the wrong type");
        }
    }

    template <class T>
    std::vector<T> sequence(const YAML::Node& node, const std::string& key) const {
        if (!node.IsSequence()) fail(node, "'" + key + "' must be a list");
        std::vector<T> out;
        for (const auto& item : node) out.push_back(scalar<T>(item, key));
        return out;
    }

    /// Runs the handler registered for each key; unknown keys are errors.
    void section(const YAML::Node& node, const std::string& name,
                 const std::map<std::string, std::function<void(const YAML::Node&)>>& handlers) const {
        if (!node.IsMap()) fail(node, "'" + name + "' must be a mapping");
        for (const auto& kv : node) {
            const auto key = kv.first.as<std::string>();
            const auto it = handlers.find(key);
            if (it == handlers.end())
                fail(kv.first, "unknown key '" + key + "'" + (name.empty() ? "" : " in '" + name + "'"));
            it->second(kv.second);
        }
    }

private:
    std::string source_;
};

}  // namespace

RunConfig parse_run_config_text(const std::string& text, const std::string& source) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(source + ":" + std::to_string(e.mark.line + 1) + ":" +
                          std::to_string(e.mark.column + 1) + ": " + e.msg);
    }
    RunConfig c;
    if (root.IsNull()) {
        c.validate();
        return c;
    }
    const Reader r(source);
    using Handlers = std::map<std::string, std::function<void(const YAML::Node&)>>;
    auto num = [&](double& target, const char* key) {
        return [&target, &r, key](const YAML::Node& n) { target = r.scalar<double>(n, key); };
    };
    auto count = [&](std::size_t& target, const char* key) {
        return [&target, &r, key](const YAML::Node& n) {
            const auto v = r.scalar<long long>(n, key);
            if (v < 0) r.fail(n, std::string("'") + key + "' must be >= 0");
            target = static_cast<std::size_t>(v);
        };
    };

    const Handlers top{
        {"model", [&](const YAML::Node& n) { c.model = r.scalar<std::string>(n, "model"); }},
        {"params",
         [&](const YAML::Node& n) {
             if (!n.IsMap()) r.fail(n, "'params' must be a mapping");
             for (const auto& kv : n)
                 c.params[kv.first.as<std::string>()] =
                     r.scalar<double>(kv.second, kv.first.as<std::string>());
         }},
        {"seed", [&](const YAML::Node& n) { c.seed = r.scalar<std::uint64_t>(n, "seed"); }},
        {"ladder",
         [&](const YAML::Node& n) {
             c.ladder = r.sequence<double>(n, "ladder");
             if (c.ladder.size() < 4) r.fail(n, "ladder length >= 4 required for slope fitting");
             for (double e : c.ladder)
                 if (!(e > 0.0 && e < 1.0)) r.fail(n, "ladder values must lie in (0,1)");
             std::sort(c.ladder.begin(), c.ladder.end(), std::greater<>());
             if (std::adjacent_find(c.ladder.begin(), c.ladder.end()) != c.ladder.end())
                 r.fail(n, "ladder values must be distinct");
         }},
        {"sim",
         [&](const YAML::Node& n) {
             r.section(n, "sim",
                       {{"epsilon", num(c.epsilon, "epsilon")},
                        {"dt", num(c.dt, "dt")},
                        {"particles", count(c.particles, "particles")},
                        {"horizon", num(c.horizon, "horizon")},
                        {"replicas", count(c.replicas, "replicas")},
                        {"substeps", count(c.substeps, "substeps")},
                        {"fast_cfl", num(c.fast_cfl, "fast_cfl")}});
         }},
        {"initial",
         [&](const YAML::Node& n) {
             r.section(n, "initial",
                       {{"rho_mean", num(c.initial.rho_mean, "rho_mean")},
                        {"rho_sd", num(c.initial.rho_sd, "rho_sd")},
                        {"xi_mean", num(c.initial.xi_mean, "xi_mean")},
                        {"xi_sd", num(c.initial.xi_sd, "xi_sd")},
                        {"y0", num(c.initial.y0, "y0")}});
         }},
        {"strong",
         [&](const YAML::Node& n) {
             r.section(n, "strong", {{"moment_orders", [&](const YAML::Node& v) {
                                          c.moment_orders = r.sequence<int>(v, "moment_orders");
                                      }}});
         }},
        {"clt",
         [&](const YAML::Node& n) {
             r.section(n, "clt", {{"test_functions", [&](const YAML::Node& v) {
                                       c.test_functions = r.sequence<std::string>(v, "test_functions");
                                   }}});
         }},
        {"fluctuation",
         [&](const YAML::Node& n) {
             r.section(n, "fluctuation",
                       {{"functional",
                         [&](const YAML::Node& v) {
                             c.fluctuation_functional = r.scalar<std::string>(v, "functional");
                         }},
                        {"centering_tolerance", num(c.centering_tolerance, "centering_tolerance")}});
         }},
        {"moments",
         [&](const YAML::Node& n) {
             r.section(n, "moments", {{"trend_alpha", num(c.trend_alpha, "trend_alpha")}});
         }},
        {"averaging",
         [&](const YAML::Node& n) {
             r.section(n, "averaging",
                       {{"grid_nodes", count(c.grid_nodes, "grid_nodes")},
                        {"invariant_particles", count(c.invariant_particles, "invariant_particles")},
                        {"invariant_samples", count(c.invariant_samples, "invariant_samples")}});
         }},
        {"limit",
         [&](const YAML::Node& n) {
             r.section(n, "limit",
                       {{"upsilon_nodes", count(c.upsilon_nodes, "upsilon_nodes")},
                        {"upsilon_stride", count(c.upsilon_stride, "upsilon_stride")},
                        {"upsilon_atoms", count(c.upsilon_atoms, "upsilon_atoms")},
                        {"upsilon_replicas", count(c.upsilon_replicas, "upsilon_replicas")}});
         }},
        {"probe",
         [&](const YAML::Node& n) {
             r.section(n, "probe",
                       {{"mu", [&](const YAML::Node& v) { c.probe_mu = r.sequence<double>(v, "mu"); }},
                        {"x", num(c.probe_x, "x")},
                        {"y", num(c.probe_y, "y")}});
         }},
        {"output",
         [&](const YAML::Node& n) {
             r.section(n, "output",
                       {{"dir", [&](const YAML::Node& v) { c.output_dir = r.scalar<std::string>(v, "dir"); }},
                        {"paths", [&](const YAML::Node& v) { c.write_paths = r.scalar<bool>(v, "paths"); }}});
         }},
    };
    r.section(root, "", top);
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return c;
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config_text(ss.str(), path);
}

std::string default_config_yaml() {
    const auto j = RunConfig{}.to_json();
    YAML::Emitter out;
    out << YAML::BeginMap;
    std::function<void(const nlohmann::json&)> emit = [&](const nlohmann::json& v) {
        if (v.is_object()) {
            out << YAML::BeginMap;
            for (const auto& [k, x] : v.items()) {
                out << YAML::Key << k << YAML::Value;
                emit(x);
            }
            out << YAML::EndMap;
        } else if (v.is_array()) {
            out << YAML::Flow << YAML::BeginSeq;
            for (const auto& x : v) emit(x);
            out << YAML::EndSeq;
        } else if (v.is_string()) {
            out << v.get<std::string>();
        } else if (v.is_boolean()) {
            out << v.get<bool>();
        } else if (v.is_number_integer() || v.is_number_unsigned()) {
            out << v.get<long long>();
        } else {
            // Shortest round-trip form, e.g. 1e-06 rather than 9.9999999999999995e-07.
            std::array<char, 32> buf{};
            const auto end = std::to_chars(buf.data(), buf.data() + buf.size(), v.get<double>()).ptr;
            out << std::string(buf.data(), end);
        }
    };
    for (const auto& [k, x] : j.items()) {
        out << YAML::Key << k << YAML::Value;
        emit(x);
    }
    out << YAML::EndMap;
    return out.c_str();
}

}  // namespace mvsim
