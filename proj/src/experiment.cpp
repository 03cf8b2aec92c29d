#include "mvlab/experiment.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>

#include "mvlab/bounds.hpp"
#include "mvlab/coupling.hpp"
#include "mvlab/ibp.hpp"
#include "mvlab/rng.hpp"
#include "mvlab/transport.hpp"

namespace mvlab {

using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string join_path(const std::string& parent, const std::string& key) {
    return parent.empty() ? key : parent + "." + key;
}

/**
 * @brief Reads one JSON object, recording defaults into a resolved copy.
 *
 * Every key the schema asks for is marked as used; finish() rejects the rest.
 */
class Reader {
public:
    Reader(const json& in, std::string path, json& out) : in_(in), path_(std::move(path)), out_(out) {
        if (!in_.is_object()) throw ConfigError(describe() + " must be an object");
        out_ = json::object();
    }

    std::string describe() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
    std::string key_path(const std::string& key) const { return "'" + join_path(path_, key) + "'"; }

    bool has(const std::string& key) const { return in_.contains(key); }

    double real(const std::string& key, std::optional<double> def, const std::function<bool(double)>& ok = {},
                const char* what = "") {
        const json* v = find(key);
        double x;
        if (v == nullptr) {
            if (!def) throw ConfigError("missing required key " + key_path(key));
            x = *def;
        } else {
            if (!v->is_number()) throw ConfigError(key_path(key) + " must be a number");
            x = v->get<double>();
        }
        if (!std::isfinite(x) || (ok && !ok(x))) throw ConfigError(key_path(key) + " must be " + what);
        out_[key] = x;
        return x;
    }

    std::int64_t integer(const std::string& key, std::optional<std::int64_t> def, std::int64_t lo,
                         std::int64_t hi = std::numeric_limits<std::int64_t>::max()) {
        const json* v = find(key);
        std::int64_t x;
        if (v == nullptr) {
            if (!def) throw ConfigError("missing required key " + key_path(key));
            x = *def;
        } else {
            if (!v->is_number_integer()) throw ConfigError(key_path(key) + " must be an integer");
            if (v->is_number_unsigned() && v->get<std::uint64_t>() > static_cast<std::uint64_t>(hi)) {
                throw ConfigError(key_path(key) + " is out of range");
            }
            x = v->get<std::int64_t>();
        }
        if (x < lo || x > hi) {
            throw ConfigError(key_path(key) + " must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        }
        out_[key] = x;
        return x;
    }

    std::uint64_t unsigned_integer(const std::string& key, std::uint64_t def) {
        const json* v = find(key);
        std::uint64_t x = def;
        if (v != nullptr) {
            if (!v->is_number_unsigned()) throw ConfigError(key_path(key) + " must be a nonnegative integer");
            x = v->get<std::uint64_t>();
        }
        out_[key] = x;
        return x;
    }

    std::string string(const std::string& key, std::optional<std::string> def, const std::vector<std::string>& allowed) {
        const json* v = find(key);
        std::string x;
        if (v == nullptr) {
            if (!def) throw ConfigError("missing required key " + key_path(key));
            x = *def;
        } else {
            if (!v->is_string()) throw ConfigError(key_path(key) + " must be a string");
            x = v->get<std::string>();
        }
        if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), x) == allowed.end()) {
            std::string list;
            for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
            throw ConfigError(key_path(key) + " must be one of: " + list);
        }
        out_[key] = x;
        return x;
    }

    std::vector<double> vector(const std::string& key, std::optional<std::vector<double>> def, std::size_t size = 0) {
        const json* v = find(key);
        std::vector<double> x;
        if (v == nullptr) {
            if (!def) throw ConfigError("missing required key " + key_path(key));
            x = *def;
        } else {
            if (!v->is_array()) throw ConfigError(key_path(key) + " must be an array of numbers");
            for (const auto& e : *v) {
                if (!e.is_number()) throw ConfigError(key_path(key) + " must be an array of numbers");
                x.push_back(e.get<double>());
            }
        }
        for (double e : x) {
            if (!std::isfinite(e)) throw ConfigError(key_path(key) + " has a non-finite entry");
        }
        if (size > 0 && x.size() != size) {
            throw ConfigError(key_path(key) + " must have " + std::to_string(size) + " entries");
        }
        out_[key] = x;
        return x;
    }

    std::vector<std::vector<double>> matrix(const std::string& key, std::optional<std::vector<std::vector<double>>> def,
                                            std::size_t d) {
        const json* v = find(key);
        std::vector<std::vector<double>> x;
        if (v == nullptr) {
            if (!def) throw ConfigError("missing required key " + key_path(key));
            x = *def;
        } else {
            const std::string msg = key_path(key) + " must be a " + std::to_string(d) + "x" + std::to_string(d) +
                                    " array of rows";
            if (!v->is_array() || v->size() != d) throw ConfigError(msg);
            for (const auto& row : *v) {
                if (!row.is_array() || row.size() != d) throw ConfigError(msg);
                std::vector<double> r;
                for (const auto& e : row) {
                    if (!e.is_number() || !std::isfinite(e.get<double>())) throw ConfigError(msg);
                    r.push_back(e.get<double>());
                }
                x.push_back(r);
            }
        }
        out_[key] = x;
        return x;
    }

    /// Child object; an absent key reads as {} when optional.
    Reader object(const std::string& key, bool required) {
        const json* v = find(key);
        if (v == nullptr && required) throw ConfigError("missing required key " + key_path(key));
        static const json empty = json::object();
        return Reader(v == nullptr ? empty : *v, join_path(path_, key), out_[key]);
    }

    void finish() const {
        for (const auto& [k, v] : in_.items()) {
            if (used_.count(k) == 0) throw ConfigError("unknown key '" + join_path(path_, k) + "'");
        }
    }

private:
    const json* find(const std::string& key) {
        used_.insert(key);
        const auto it = in_.find(key);
        return it == in_.end() ? nullptr : &*it;
    }

    const json& in_;
    std::string path_;
    json& out_;
    std::set<std::string> used_;
};

bool positive(double x) { return x > 0.0; }
bool nonnegative(double x) { return x >= 0.0; }

std::vector<std::vector<double>> zeros(std::size_t d) { return std::vector<std::vector<double>>(d, std::vector<double>(d, 0.0)); }

std::vector<std::vector<double>> identity(std::size_t d) {
    auto m = zeros(d);
    for (std::size_t i = 0; i < d; ++i) m[i][i] = 1.0;
    return m;
}

int resolve_model(Reader r) {
    const std::string name = r.string("name", std::nullopt, {"linear_meanfield_delay", "ou", "constant_drift"});
    int dim = 1;
    if (name == "linear_meanfield_delay") {
        dim = static_cast<int>(r.integer("dim", std::nullopt, 1, kMaxDim));
        const auto d = static_cast<std::size_t>(dim);
        r.matrix("A0", std::nullopt, d);
        r.matrix("A1", zeros(d), d);
        r.matrix("B", zeros(d), d);
        r.matrix("sigma", identity(d), d);
    } else if (name == "ou") {
        dim = static_cast<int>(r.integer("dim", 1, 1, kMaxDim));
        r.real("theta", 1.0);
        r.real("sigma", 1.0, nonnegative, "nonnegative");
    } else {
        dim = static_cast<int>(r.vector("c", std::nullopt).size());
        if (dim < 1 || dim > kMaxDim) throw ConfigError(r.key_path("c") + " must have 1 to 16 entries");
        r.real("sigma", 0.0, nonnegative, "nonnegative");
    }
    r.finish();
    return dim;
}

void resolve_init(Reader r, int dim) {
    r.string("kind", "constant", {"constant", "bridge"});
    r.vector("mean", std::vector<double>(static_cast<std::size_t>(dim), 0.0), static_cast<std::size_t>(dim));
    r.real("spread", 0.0, nonnegative, "nonnegative");
    r.real("bridge_scale", 0.0, nonnegative, "nonnegative");
    r.finish();
}

void resolve_functional(Reader r, int dim) {
    const std::string name = r.string(
        "name", std::nullopt, {"constant", "linear", "exp_linear_capped", "tanh_point", "sin_point", "gaussian_average"});
    const auto d = static_cast<std::size_t>(dim);
    if (name == "constant") {
        r.real("c", 1.0);
    } else if (name == "gaussian_average") {
        r.real("width", 1.0, positive, "positive");
    } else {
        r.vector("a", std::nullopt, d);
        if (name == "exp_linear_capped") r.real("cap", 5.0);
    }
    r.finish();
}

void resolve_eta(Reader r, int dim) {
    const std::string name = r.string("name", std::nullopt, {"zero", "linear_ramp", "constant", "affine", "sine"});
    const auto d = static_cast<std::size_t>(dim);
    if (name == "linear_ramp" || name == "constant") {
        r.vector("v", std::nullopt, d);
    } else if (name == "affine") {
        r.vector("a", std::nullopt, d);
        r.vector("b", std::nullopt, d);
    } else if (name == "sine") {
        r.vector("v", std::nullopt, d);
        r.real("omega", 1.0);
    }
    r.finish();
}

void resolve_test_function(Reader r, int dim) {
    const std::string name = r.string("name", std::nullopt, {"constant", "coordinate", "squared_norm", "gaussian_bump"});
    if (name == "constant") {
        r.real("c", 1.0);
    } else if (name == "coordinate") {
        r.integer("i", 0, 0, dim - 1);
    } else if (name == "gaussian_bump") {
        r.vector("center", std::vector<double>(static_cast<std::size_t>(dim), 0.0), static_cast<std::size_t>(dim));
        r.real("width", 1.0, positive, "positive");
    }
    r.finish();
}

std::vector<double> resolve_times(Reader& r, const std::string& key, std::vector<double> def, double T, double h) {
    auto times = r.vector(key, std::move(def));
    for (double t : times) {
        if (t < 0.0 || t > T * (1.0 + 1e-12)) throw ConfigError(r.key_path(key) + " entries must lie in [0, T]");
        try {
            static_cast<void>(grid_index(t, 0.0, h));
        } catch (const std::out_of_range&) {
            throw ConfigError(r.key_path(key) + " entries must be multiples of r0/m");
        }
    }
    return times;
}

}  // namespace

const std::vector<std::string>& experiment_kinds() {
    static const std::vector<std::string> kinds{"simulate",      "picard", "contract",      "exo",       "harnack",
                                                "power-harnack", "ibp",    "shift-harnack", "fpke-check"};
    return kinds;
}

json parse_config_text(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1, col = 1;
        const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        for (std::size_t i = 0; i < end; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        std::string detail = e.what();
        const auto cut = detail.find(": ", detail.find("column"));
        if (cut != std::string::npos) detail = detail.substr(cut + 2);
        throw ConfigError("parse error at line " + std::to_string(line) + ", column " + std::to_string(col) + ": " +
                          detail);
    }
}

json resolve_config(const json& raw, const std::optional<std::string>& kind, const std::optional<std::uint64_t>& seed) {
    json out;
    Reader r(raw, "", out);
    std::string exp;
    if (r.has("experiment")) {
        exp = r.string("experiment", std::nullopt, experiment_kinds());
        if (kind && *kind != exp) {
            throw ConfigError("'experiment' is \"" + exp + "\" but the subcommand is \"" + *kind + "\"");
        }
    } else {
        if (!kind) throw ConfigError("missing required key 'experiment'");
        exp = r.string("experiment", *kind, experiment_kinds());
    }

    Reader g = r.object("grid", true);
    const double r0 = g.real("r0", std::nullopt, positive, "positive");
    const int m = static_cast<int>(g.integer("m", std::nullopt, 1, 1 << 20));
    g.finish();
    const double h = r0 / m;
    const int dim = resolve_model(r.object("model", true));
    const double T = r.real("T", std::nullopt, positive, "positive");
    try {
        static_cast<void>(grid_index(T, 0.0, h));
    } catch (const std::out_of_range&) {
        throw ConfigError("'T' must be a multiple of r0/m");
    }
    r.unsigned_integer("seed", 0);
    if (seed) out["seed"] = *seed;
    r.integer("n_particles", 1000, 1);
    resolve_init(r.object("init", false), dim);

    const bool coupled = exp == "contract" || exp == "exo" || exp == "harnack" || exp == "power-harnack";
    if (coupled) resolve_init(r.object("init_nu", false), dim);

    if (exp == "simulate") {
        auto times = resolve_times(r, "snapshot_times", {T}, T, h);
        std::sort(times.begin(), times.end());
        out["snapshot_times"] = times;
        r.integer("snapshot_particles", 100, 0);
    } else if (exp == "picard") {
        r.integer("picard_iters", 6, 2, 100);
        r.real("picard_window", 0.0, nonnegative, "nonnegative");
    } else if (exp == "contract") {
        resolve_times(r, "checkpoints", {T}, T, h);
        r.integer("eps_points", 128, 2, 1 << 20);
        r.integer("bound_points", 101, 2, 1 << 20);
    } else if (exp == "exo") {
        r.integer("eps_points", 128, 2, 1 << 20);
        const double fs = r.real("fit_start", std::min(1.0, T), nonnegative, "nonnegative");
        const double fe = r.real("fit_end", T, positive, "positive");
        if (!(fe > fs) || fe > T * (1.0 + 1e-12)) throw ConfigError("'fit_start' < 'fit_end' <= T is required");
        r.integer("fit_points", 10, 2, 10000);
    } else if (exp == "harnack" || exp == "power-harnack") {
        if (!(T > r0)) throw ConfigError("'T' must exceed grid.r0 for Harnack experiments");
        resolve_functional(r.object("f", true), dim);
        r.integer("n_samples", 100000, 2);
        r.integer("batch", 8192, 1);
        r.integer("certificate_stride", 0, 0);
        if (exp == "power-harnack") r.real("p", 2.0, [](double p) { return p > 1.0; }, "greater than 1");
    } else if (exp == "ibp" || exp == "shift-harnack") {
        if (!(T > r0)) throw ConfigError("'T' must exceed grid.r0 for shift experiments");
        resolve_functional(r.object("f", true), dim);
        resolve_eta(r.object("eta", true), dim);
        r.integer("n_samples", 100000, 2);
        r.integer("batch", 8192, 1);
        if (exp == "ibp") {
            const auto bins = r.vector("density_bins", std::vector<double>{8, 16, 32});
            for (double b : bins) {
                if (b < 1 || b != std::floor(b)) throw ConfigError("'density_bins' entries must be positive integers");
            }
        } else {
            const auto ps = r.vector("p", std::vector<double>{2.0});
            for (double p : ps) {
                if (!(p == 0.0 || p > 1.0)) throw ConfigError("'p' entries must be 0 (log variant) or greater than 1");
            }
        }
    } else if (exp == "fpke-check") {
        resolve_test_function(r.object("test_function", true), dim);
        resolve_times(r, "t_check", {T}, T, h);
    }
    r.finish();

    try {
        const CoefficientModel model = model_from_config(out["model"], r0);
        const bool additive = model.diffusion_kind() == DiffusionKind::additive;
        if ((exp == "harnack" || exp == "power-harnack" || exp == "ibp" || exp == "shift-harnack") && !additive) {
            throw ConfigError("'model' must have additive invertible noise for " + exp);
        }
        if (exp == "ibp") {
            if (!functional_from_config(out["f"]).derivative) throw ConfigError("'f' has no directional derivative");
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("'model': ") + e.what());
    }
    return out;
}

CoefficientModel model_from_config(const json& model, double r0) {
    const std::string name = model.at("name").get<std::string>();
    auto mat = [](const json& j) {
        const auto rows = j.get<std::vector<std::vector<double>>>();
        Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t k = 0; k < rows.size(); ++k) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
        }
        return m;
    };
    if (name == "linear_meanfield_delay") {
        return make_linear_meanfield_delay(model.at("dim").get<int>(), mat(model.at("A0")), mat(model.at("A1")),
                                           mat(model.at("B")), mat(model.at("sigma")), r0);
    }
    if (name == "ou") {
        return make_ou(model.at("dim").get<int>(), model.at("theta").get<double>(), model.at("sigma").get<double>(), r0);
    }
    if (name == "constant_drift") {
        const auto c = model.at("c").get<std::vector<double>>();
        return make_constant_drift(c, model.at("sigma").get<double>(), r0);
    }
    throw ConfigError("unknown model '" + name + "'");
}

InitialLaw init_from_config(const json& init) {
    InitialLaw law;
    law.kind = init.at("kind").get<std::string>() == "bridge" ? InitialLaw::Kind::bridge : InitialLaw::Kind::constant;
    law.mean = init.at("mean").get<std::vector<double>>();
    law.spread = init.at("spread").get<double>();
    law.bridge_scale = init.at("bridge_scale").get<double>();
    return law;
}

PathFunctional functional_from_config(const json& f) {
    const std::string name = f.at("name").get<std::string>();
    if (name == "constant") return functional_constant(f.at("c").get<double>());
    if (name == "gaussian_average") return functional_gaussian_average(f.at("width").get<double>());
    const auto a = f.at("a").get<std::vector<double>>();
    if (name == "linear") return functional_linear(a);
    if (name == "exp_linear_capped") return functional_exp_linear_capped(a, f.at("cap").get<double>());
    if (name == "tanh_point") return functional_tanh_point(a);
    if (name == "sin_point") return functional_sin_point(a);
    throw ConfigError("unknown functional '" + name + "'");
}

CameronMartinVector eta_from_config(const json& eta, const PathGrid& grid, int dim) {
    const std::string name = eta.at("name").get<std::string>();
    if (name == "zero") return eta_zero(grid, dim);
    if (name == "linear_ramp") return eta_linear_ramp(grid, eta.at("v").get<std::vector<double>>());
    if (name == "constant") return eta_constant(grid, eta.at("v").get<std::vector<double>>());
    if (name == "affine") {
        return eta_affine(grid, eta.at("a").get<std::vector<double>>(), eta.at("b").get<std::vector<double>>());
    }
    if (name == "sine") return eta_sine(grid, eta.at("v").get<std::vector<double>>(), eta.at("omega").get<double>());
    throw ConfigError("unknown eta '" + name + "'");
}

TestFunction test_function_from_config(const json& f) {
    const std::string name = f.at("name").get<std::string>();
    if (name == "constant") return TestFunction::constant(f.at("c").get<double>());
    if (name == "coordinate") return TestFunction::coordinate(f.at("i").get<int>());
    if (name == "squared_norm") return TestFunction::squared_norm();
    if (name == "gaussian_bump") {
        return TestFunction::gaussian_bump(f.at("center").get<std::vector<double>>(), f.at("width").get<double>());
    }
    throw ConfigError("unknown test function '" + name + "'");
}

std::vector<std::string> experiment_outputs(const std::string& kind) {
    if (kind == "simulate") return {"snapshots.csv", "moments.csv"};
    if (kind == "picard") return {"picard.csv"};
    if (kind == "contract") return {"contract.csv", "bound.csv", "w2.csv"};
    if (kind == "exo") return {"exo.csv", "w2.csv"};
    if (kind == "harnack" || kind == "power-harnack") return {"harnack.csv"};
    if (kind == "ibp") return {"ibp.csv", "density.csv"};
    if (kind == "shift-harnack") return {"shift.csv"};
    if (kind == "fpke-check") return {"fpke.csv"};
    throw ConfigError("unknown experiment '" + kind + "'");
}

std::string format_value(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

/// CSV file with a fixed header; numbers go through format_value.
class Csv {
public:
    Csv(const std::filesystem::path& path, const std::vector<std::string>& header) : os_(path, std::ios::binary) {
        if (!os_) throw std::runtime_error("cannot write " + path.string());
        row_strings(header);
    }

    Csv& add(double v) { return add_text(format_value(v)); }
    Csv& add(std::size_t v) { return add_text(std::to_string(v)); }
    Csv& add_text(const std::string& s) {
        cells_.push_back(s);
        return *this;
    }
    void end() {
        row_strings(cells_);
        cells_.clear();
    }

private:
    void row_strings(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
        os_ << '\n';
        if (!os_) throw std::runtime_error("write failed");
    }

    std::ofstream os_;
    std::vector<std::string> cells_;
};

std::vector<std::string> coords(const std::string& prefix, int d) {
    std::vector<std::string> out;
    for (int i = 0; i < d; ++i) out.push_back(prefix + std::to_string(i));
    return out;
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

struct Common {
    std::string kind;
    PathGrid grid{1.0, 1};
    CoefficientModel model;
    double T;
    std::uint64_t seed;
    std::size_t n;
    InitialLaw init;
};

Common common_from(const json& cfg) {
    const PathGrid grid(cfg.at("grid").at("r0").get<double>(), cfg.at("grid").at("m").get<int>());
    return {cfg.at("experiment").get<std::string>(),
            grid,
            model_from_config(cfg.at("model"), grid.r0()),
            cfg.at("T").get<double>(),
            cfg.at("seed").get<std::uint64_t>(),
            cfg.at("n_particles").get<std::size_t>(),
            init_from_config(cfg.at("init"))};
}

SimConfig sim_config(const Common& c) {
    SimConfig sc;
    sc.n_particles = c.n;
    sc.T = c.T;
    sc.grid = c.grid;
    sc.seed = c.seed;
    return sc;
}

CameronMartinVector eta_for(const json& cfg, const Common& c) {
    return eta_from_config(cfg.at("eta"), c.grid, c.model.dim());
}

void run_simulate(const json& cfg, const Common& c, const std::filesystem::path& dir, std::ostream& summary) {
    SimOptions opt;
    opt.snapshot_times = cfg.at("snapshot_times").get<std::vector<double>>();
    const auto init = c.init.sample(c.grid, c.n, rng::derive_key(c.seed, "init"));
    const auto res = simulate_mckean(c.model, init, sim_config(c), opt);
    const int d = c.model.dim();
    const auto limit = std::min(c.n, cfg.at("snapshot_particles").get<std::size_t>());
    Csv snaps(dir / "snapshots.csv", concat({"t", "particle", "t_offset"}, coords("x_", d)));
    for (const auto& s : res.snapshots) {
        for (std::size_t i = 0; i < limit; ++i) {
            const SegmentView v = s.measure.particle(i);
            for (std::size_t k = 0; k < v.points(); ++k) {
                snaps.add(s.t).add(i).add(c.grid.theta(static_cast<int>(k)));
                for (double x : v.point(k)) snaps.add(x);
                snaps.end();
            }
        }
    }
    Csv mom(dir / "moments.csv", concat({"t", "n_particles", "second_moment"}, coords("mean_", d)));
    for (const auto& s : res.snapshots) {
        mom.add(s.t).add(c.n).add(s.measure.second_moment());
        for (double x : s.measure.endpoint_mean()) mom.add(x);
        mom.end();
    }
    summary << "simulate: " << res.snapshots.size() << " snapshot(s) of " << c.n << " particles, E||X_T||^2 = "
            << format_value(res.final_measure.second_moment()) << "\n";
}

void run_picard(const json& cfg, const Common& c, const std::filesystem::path& dir, std::ostream& summary) {
    SimConfig sc = sim_config(c);
    sc.picard_iters = cfg.at("picard_iters").get<int>();
    sc.picard_window = cfg.at("picard_window").get<double>();
    const auto init = c.init.sample(c.grid, c.n, rng::derive_key(c.seed, "init"));
    const auto res = picard_solve(c.model, init, sc);
    Csv csv(dir / "picard.csv", {"window", "t_start", "t_end", "t0", "iteration", "gap", "ratio"});
    double worst = 0.0;
    for (std::size_t w = 0; w < res.report.windows.size(); ++w) {
        const auto& win = res.report.windows[w];
        for (std::size_t n = 0; n < win.gaps.size(); ++n) {
            const double ratio = n == 0 ? std::nan("") : win.ratios[n - 1];
            if (n >= 2 && std::isfinite(ratio)) worst = std::max(worst, ratio);
            csv.add(w).add(win.t_start).add(win.t_end).add(res.report.t0).add(n).add(win.gaps[n]).add(ratio).end();
        }
    }
    summary << "picard: t0 = " << format_value(res.report.t0) << ", " << res.report.windows.size()
            << " window(s), max ratio for n >= 2: " << format_value(worst) << "\n";
}

struct PairedRun {
    SimulationOutput x, y;
};

PairedRun paired_run(const json& cfg, const Common& c, const std::vector<double>& times) {
    SimOptions opt;
    opt.snapshot_times = times;
    const InitialLaw nu0 = init_from_config(cfg.at("init_nu"));
    const std::uint64_t key = rng::derive_key(c.seed, "init");
    auto x = simulate_mckean(c.model, c.init.sample(c.grid, c.n, key), sim_config(c), opt);
    auto y = simulate_mckean(c.model, nu0.sample(c.grid, c.n, key), sim_config(c), opt);
    return {std::move(x), std::move(y)};
}

void write_w2_row(Csv& csv, double t, std::size_t n, const W2Estimate& w) {
    csv.add(t).add(n).add_text(w.method).add(w.w2).add_text(w.converged ? "1" : "0").end();
}

void run_contract(const json& cfg, const Common& c, const std::filesystem::path& dir, std::ostream& summary) {
    auto times = cfg.at("checkpoints").get<std::vector<double>>();
    times.insert(times.begin(), 0.0);
    const PairedRun run = paired_run(cfg, c, times);
    const auto params = ContractionParams::from_constants(c.model.constants(), c.grid.r0());
    EpsGrid eg;
    eg.points = cfg.at("eps_points").get<std::size_t>();
    const double w0 = paired_cost(run.x.snapshots.front().measure, run.y.snapshots.front().measure);
    Csv csv(dir / "contract.csv",
            {"t", "paired_cost", "w2_sq", "method", "bound", "eps_star", "delta_star", "dominated"});
    std::vector<std::pair<double, W2Estimate>> w2s;
    std::size_t dominated = 0;
    for (std::size_t i = 1; i < run.x.snapshots.size(); ++i) {
        const auto& xs = run.x.snapshots[i];
        const auto& ys = run.y.snapshots[i];
        const double pc = paired_cost(xs.measure, ys.measure);
        const W2Estimate w = w2_auto(xs.measure.batch(), ys.measure.batch());
        const BoundValue b = contraction_bound(params, w0, xs.t, eg);
        const bool ok = pc <= b.bound;
        dominated += ok ? 1 : 0;
        csv.add(xs.t).add(pc).add(w.w2 * w.w2).add_text(w.method).add(b.bound).add(b.eps_star).add(b.delta_star);
        csv.add_text(ok ? "1" : "0").end();
        w2s.emplace_back(xs.t, w);
    }
    Csv bcsv(dir / "bound.csv", {"t", "bound", "eps_star", "delta_star"});
    const auto np = cfg.at("bound_points").get<std::size_t>();
    for (std::size_t k = 0; k < np; ++k) {
        const double t = c.T * static_cast<double>(k) / static_cast<double>(np - 1);
        const BoundValue b = contraction_bound(params, w0, t, eg);
        bcsv.add(t).add(b.bound).add(b.eps_star).add(b.delta_star).end();
    }
    Csv wcsv(dir / "w2.csv", {"t", "n_particles", "method", "w2", "converged"});
    for (const auto& [t, w] : w2s) write_w2_row(wcsv, t, c.n, w);
    summary << "contract: bound dominates the paired cost at " << dominated << " of " << w2s.size()
            << " checkpoint(s)\n";
}

/// Least-squares slope of y against x.
double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    return sxy / sxx;
}

void run_exo(const json& cfg, const Common& c, const std::filesystem::path& dir, std::ostream& summary) {
    const auto params = ContractionParams::from_constants(c.model.constants(), c.grid.r0());
    EpsGrid eg;
    eg.points = cfg.at("eps_points").get<std::size_t>();
    const ExoResult ex = exo_criterion(params, eg);
    const double fs = cfg.at("fit_start").get<double>(), fe = cfg.at("fit_end").get<double>();
    const auto np = cfg.at("fit_points").get<std::size_t>();
    const double h = c.grid.dt();
    std::vector<double> times;
    for (std::size_t k = 0; k < np; ++k) {
        const double t = fs + (fe - fs) * static_cast<double>(k) / static_cast<double>(np - 1);
        const double snapped = static_cast<double>(std::llround(t / h)) * h;
        if (times.empty() || snapped > times.back()) times.push_back(snapped);
    }
    const PairedRun run = paired_run(cfg, c, times);
    std::vector<double> ts, logs;
    Csv wcsv(dir / "w2.csv", {"t", "n_particles", "method", "w2", "converged"});
    std::vector<std::pair<double, W2Estimate>> rows;
    for (std::size_t i = 0; i < run.x.snapshots.size(); ++i) {
        const W2Estimate w = w2_auto(run.x.snapshots[i].measure.batch(), run.y.snapshots[i].measure.batch());
        rows.emplace_back(run.x.snapshots[i].t, w);
        if (w.w2 > 0.0) {
            ts.push_back(run.x.snapshots[i].t);
            logs.push_back(std::log(w.w2 * w.w2));
        }
    }
    const double slope = ts.size() >= 2 ? fit_slope(ts, logs) : std::nan("");
    Csv csv(dir / "exo.csv",
            {"holds", "lhs_min", "rhs", "best_rate", "best_eps", "best_delta", "fitted_slope", "fit_start", "fit_end"});
    csv.add_text(ex.holds ? "1" : "0").add(ex.lhs_min).add(ex.rhs).add(ex.best_rate).add(ex.best_eps);
    csv.add(ex.best_delta).add(slope).add(fs).add(fe).end();
    for (const auto& [t, w] : rows) write_w2_row(wcsv, t, c.n, w);
    summary << "exo: criterion " << (ex.holds ? "holds" : "fails") << ", best rate " << format_value(ex.best_rate)
            << ", fitted slope of log W2^2 " << format_value(slope) << "\n";
}

void run_harnack(const json& cfg, const Common& c, const std::filesystem::path& dir, std::ostream& summary) {
    HarnackConfig hc;
    hc.grid = c.grid;
    hc.T = c.T;
    hc.n_flow = c.n;
    hc.n_samples = cfg.at("n_samples").get<std::size_t>();
    hc.batch = cfg.at("batch").get<std::size_t>();
    hc.seed = c.seed;
    hc.certificate_stride = cfg.at("certificate_stride").get<std::size_t>();
    const InitialLaw nu0 = init_from_config(cfg.at("init_nu"));
    const PathFunctional f = functional_from_config(cfg.at("f"));
    const HarnackReport r = c.kind == "harnack"
                                ? log_harnack_check(c.model, c.init, nu0, f, hc)
                                : power_harnack_check(c.model, c.init, nu0, f, cfg.at("p").get<double>(), hc);
    Csv csv(dir / "harnack.csv", {"T", "p", "lhs", "rhs", "entropy_term", "margin", "stderr", "n_samples",
                                  "lhs_se", "rhs_se", "entropy_se", "weight_mean", "weight_se", "max_merge_gap",
                                  "max_certificate_ratio"});
    csv.add(r.T).add(r.p).add(r.lhs).add(r.rhs).add(r.entropy_term).add(r.margin).add(r.std_error).add(r.n_samples);
    csv.add(r.lhs_se).add(r.rhs_se).add(r.entropy_se).add(r.weight_mean).add(r.weight_se).add(r.max_merge_gap);
    csv.add(r.max_certificate_ratio).end();
    summary << c.kind << ": margin " << format_value(r.margin) << " (stderr " << format_value(r.std_error)
            << "), E exp(l) = " << format_value(r.weight_mean) << "\n";
}

IbpConfig ibp_config(const json& cfg, const Common& c) {
    IbpConfig ic;
    ic.grid = c.grid;
    ic.T = c.T;
    ic.n_flow = c.n;
    ic.n_samples = cfg.at("n_samples").get<std::size_t>();
    ic.batch = cfg.at("batch").get<std::size_t>();
    ic.seed = c.seed;
    return ic;
}

void run_ibp(const json& cfg, const Common& c, const std::filesystem::path& dir, std::ostream& summary) {
    const IbpConfig ic = ibp_config(cfg, c);
    const CameronMartinVector eta = eta_for(cfg, c);
    const IbpReport r = ibp_check(c.model, c.init, eta, functional_from_config(cfg.at("f")), ic);
    std::vector<std::size_t> bins;
    for (double b : cfg.at("density_bins").get<std::vector<double>>()) bins.push_back(static_cast<std::size_t>(b));
    const DensityBoundReport db = density_bound_check(c.model, c.init, eta, ic, bins);
    Csv csv(dir / "ibp.csv", {"T", "h", "eta_id", "lhs", "rhs", "lhs_se", "rhs_se", "diff_se", "weight_mean",
                              "weight_se", "weight_sq_mean", "weight_sq_se", "n_samples"});
    csv.add(r.T).add(r.h).add_text(cfg.at("eta").at("name").get<std::string>()).add(r.lhs).add(r.rhs).add(r.lhs_se);
    csv.add(r.rhs_se).add(r.diff_se).add(r.weight_mean).add(r.weight_se).add(r.weight_sq_mean).add(r.weight_sq_se);
    csv.add(r.n_samples).end();
    Csv dcsv(dir / "density.csv", {"bins", "g_sq", "g_sq_se", "weight_sq_mean", "weight_sq_se", "bound"});
    for (std::size_t i = 0; i < db.bins.size(); ++i) {
        dcsv.add(db.bins[i]).add(db.g_sq[i]).add(db.g_sq_se[i]).add(db.weight_sq_mean).add(db.weight_sq_se);
        dcsv.add(db.bound).end();
    }
    summary << "ibp: lhs " << format_value(r.lhs) << ", rhs " << format_value(r.rhs) << " (paired stderr "
            << format_value(r.diff_se) << ")\n";
}

void run_shift(const json& cfg, const Common& c, const std::filesystem::path& dir, std::ostream& summary) {
    const IbpConfig ic = ibp_config(cfg, c);
    const CameronMartinVector eta = eta_for(cfg, c);
    const PathFunctional f = functional_from_config(cfg.at("f"));
    Csv csv(dir / "shift.csv", {"T", "p", "eta_id", "lhs", "rhs", "factor", "margin", "stderr", "n_samples"});
    double worst = std::numeric_limits<double>::infinity();
    for (double p : cfg.at("p").get<std::vector<double>>()) {
        const ShiftHarnackReport r = shift_harnack_check(c.model, c.init, eta, f, p, ic);
        csv.add(r.T).add(r.p).add_text(cfg.at("eta").at("name").get<std::string>()).add(r.lhs).add(r.rhs);
        csv.add(r.factor).add(r.margin).add(r.std_error).add(r.n_samples).end();
        worst = std::min(worst, r.std_error > 0.0 ? r.margin / r.std_error : r.margin);
    }
    summary << "shift-harnack: smallest margin in stderr units " << format_value(worst) << "\n";
}

void run_fpke(const json& cfg, const Common& c, const std::filesystem::path& dir, std::ostream& summary) {
    SimOptions opt;
    opt.record = true;
    const auto init = c.init.sample(c.grid, c.n, rng::derive_key(c.seed, "init"));
    const auto res = simulate_mckean(c.model, init, sim_config(c), opt);
    const TestFunction f = test_function_from_config(cfg.at("test_function"));
    Csv csv(dir / "fpke.csv", {"t", "h", "residual", "mean", "stderr", "n"});
    double worst = 0.0;
    for (double t : cfg.at("t_check").get<std::vector<double>>()) {
        const FpkeResidual r = verify_fpke_weak_form(*res.flow, c.model, f, t);
        csv.add(t).add(c.grid.dt()).add(r.residual).add(r.mean).add(r.std_error).add(r.n).end();
        worst = std::max(worst, r.std_error > 0.0 ? r.residual / r.std_error : r.residual);
    }
    summary << "fpke-check: largest residual in stderr units " << format_value(worst) << "\n";
}

}  // namespace

void run_experiment(const json& resolved, const std::filesystem::path& out_dir, std::ostream& summary) {
    const Common c = common_from(resolved);
    std::filesystem::create_directories(out_dir);
    json manifest;
    manifest["tool"] = "mvlab";
    manifest["version"] = kVersion;
    manifest["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION);
    manifest["experiment"] = c.kind;
    manifest["seed"] = c.seed;
    manifest["config"] = resolved;
    manifest["outputs"] = experiment_outputs(c.kind);
    {
        std::ofstream os(out_dir / "manifest.json", std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + (out_dir / "manifest.json").string());
        os << manifest.dump(2) << '\n';
    }
    if (c.kind == "simulate") {
        run_simulate(resolved, c, out_dir, summary);
    } else if (c.kind == "picard") {
        run_picard(resolved, c, out_dir, summary);
    } else if (c.kind == "contract") {
        run_contract(resolved, c, out_dir, summary);
    } else if (c.kind == "exo") {
        run_exo(resolved, c, out_dir, summary);
    } else if (c.kind == "harnack" || c.kind == "power-harnack") {
        run_harnack(resolved, c, out_dir, summary);
    } else if (c.kind == "ibp") {
        run_ibp(resolved, c, out_dir, summary);
    } else if (c.kind == "shift-harnack") {
        run_shift(resolved, c, out_dir, summary);
    } else {
        run_fpke(resolved, c, out_dir, summary);
    }
}

}  // namespace mvlab
