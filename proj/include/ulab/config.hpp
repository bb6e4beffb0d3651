#ifndef ULAB_CONFIG_HPP
#define ULAB_CONFIG_HPP

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ulab/adversary.hpp"
#include "ulab/approx_unlearn.hpp"
#include "ulab/dataset.hpp"
#include "ulab/error.hpp"
#include "ulab/model.hpp"

namespace ulab {

/// Parses the TOML subset used for experiment files: [section] headers,
/// key = value lines, # comments, and values that are strings, integers,
/// floats, booleans or single-line arrays of those. Returns
/// {"section": {"key": value}}; keys before any header land in "".
inline nlohmann::json parse_toml(const std::string& text, const std::string& origin = "config") {
    using nlohmann::json;
    json root = json::object();
    std::string section;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;

    auto fail = [&](const std::string& what) -> void {
        throw Error(ErrorCode::Parse, origin + ":" + std::to_string(line_no) + ": " + what, line_no);
    };
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) {
            return std::string();
        }
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    // Drops a trailing comment that is not inside a string.
    auto strip_comment = [](const std::string& s) {
        bool quoted = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) {
                quoted = !quoted;
            } else if (s[i] == '#' && !quoted) {
                return s.substr(0, i);
            }
        }
        return s;
    };
    std::function<json(const std::string&)> scalar = [&](const std::string& v) -> json {
        if (v.size() >= 2 && v.front() == '"' && v.back() == '"') {
            std::string out;
            for (std::size_t i = 1; i + 1 < v.size(); ++i) {
                if (v[i] == '\\' && i + 2 < v.size()) {
                    const char c = v[++i];
                    out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
                } else {
                    out += v[i];
                }
            }
            return out;
        }
        if (v == "true") {
            return true;
        }
        if (v == "false") {
            return false;
        }
        if (v == "inf" || v == "+inf") {
            return std::numeric_limits<double>::infinity();
        }
        std::string digits;
        for (char c : v) {
            if (c != '_') {
                digits += c;
            }
        }
        if (digits.empty()) {
            fail("missing value");
        }
        const bool is_float = digits.find_first_of(".eE") != std::string::npos;
        try {
            std::size_t used = 0;
            if (is_float) {
                const double x = std::stod(digits, &used);
                if (used == digits.size()) {
                    return x;
                }
            } else {
                const long long x = std::stoll(digits, &used);
                if (used == digits.size()) {
                    return x;
                }
            }
        } catch (const std::exception&) {
        }
        fail("cannot parse value '" + v + "'");
        return nullptr;
    };

    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(strip_comment(raw));
        if (line.empty()) {
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) {
                fail("malformed section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (!root.contains(section)) {
                root[section] = json::object();
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail("expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            fail("empty key");
        }
        for (char c : key) {
            if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') {
                fail("invalid key '" + key + "'");
            }
        }
        json& table = root[section];
        if (table.contains(key)) {
            fail("duplicate key '" + key + "'");
        }
        if (!value.empty() && value.front() == '[') {
            if (value.back() != ']') {
                fail("arrays must close on the same line");
            }
            json arr = json::array();
            const std::string body = trim(value.substr(1, value.size() - 2));
            std::string item;
            bool quoted = false;
            for (char c : body + ",") {
                if (c == '"') {
                    quoted = !quoted;
                }
                if (c == ',' && !quoted) {
                    const std::string t = trim(item);
                    if (!t.empty()) {
                        arr.push_back(scalar(t));
                    }
                    item.clear();
                } else {
                    item += c;
                }
            }
            table[key] = std::move(arr);
        } else {
            table[key] = scalar(value);
        }
    }
    return root;
}

struct DatasetSpec {
    std::string source = "blobs"; // blobs | idx | csv
    std::size_t classes = 10;
    std::size_t per_class = 500;
    std::size_t dim = 20;
    double spread = 0.6;
    double mean_distance = 2.0;
    std::string images;
    std::string labels;
    std::size_t limit = 5000;
    std::string csv;
    double test_fraction = 0.2;
};

struct ModelSpec {
    std::string kind = "logistic"; // logistic | mlp
    std::size_t hidden = 32;
    std::string activation = "relu";
    double l2 = 1e-4;
};

struct HealingSpec {
    double primary_fraction = 0.7;
    std::size_t budget = 25;
    std::vector<std::string> scenarios{"class", "worst_logits"};
    int target_class = 0;
    std::vector<std::string> methods{"fisher", "influence"};
    bool random_control = true;
    std::size_t twin_q = 1;
    std::optional<double> delta; // unset: 10th-percentile default
    double shrinkage = 0.1;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    ModelSpec model;
    TrainConfig train = [] {
        TrainConfig t;
        t.epochs = 10;
        t.learning_rate = 1e-2;
        return t;
    }();
    std::size_t sisa_shards = 5;
    std::size_t sisa_slices = 3;
    std::vector<double> fractions{0.05, 0.10, 0.20, 0.30};
    FisherConfig fisher;
    std::size_t fisher_minibatch = 0; // 0: the whole request in one step
    InfluenceConfig influence;
    std::size_t influence_minibatch = 25;
    AdversaryConfig adversary;
    HealingSpec healing;
    std::size_t repetitions = 5;
    std::uint64_t seed = 0;

    void validate() const;
    std::string to_toml() const;
};

namespace detail {

template <typename T>
void read(const nlohmann::json& table, const char* key, T& out) {
    if (table.contains(key)) {
        try {
            out = table.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw Error(ErrorCode::Parse, std::string("config: wrong type for '") + key + "'");
        }
    }
}

inline void check_keys(const nlohmann::json& table, const std::string& section,
                       std::initializer_list<const char*> known) {
    for (const auto& [key, value] : table.items()) {
        bool ok = false;
        for (const char* k : known) {
            ok = ok || key == k;
        }
        if (!ok) {
            throw Error(ErrorCode::Parse, "config: unknown key '" + key + "' in [" + section + "]");
        }
    }
}

inline std::string fmt_double(double v) {
    if (std::isinf(v)) {
        return "inf";
    }
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    std::string s = buf;
    if (s.find_first_of(".eEn") == std::string::npos) {
        s += ".0";
    }
    return s;
}

inline std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') {
            out += '\\';
        }
        out += c;
    }
    return out + "\"";
}

template <typename T, typename F>
std::string array(const std::vector<T>& xs, F&& fmt) {
    std::string out = "[";
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out += (i ? ", " : "") + fmt(xs[i]);
    }
    return out + "]";
}

} // namespace detail

inline ExperimentConfig config_from_toml(const std::string& text, const std::string& origin = "config") {
    using detail::read;
    const auto root = parse_toml(text, origin);
    ExperimentConfig c;
    for (const auto& [section, table] : root.items()) {
        if (section == "run") {
            detail::check_keys(table, section, {"seed", "repetitions"});
            read(table, "seed", c.seed);
            read(table, "repetitions", c.repetitions);
        } else if (section == "dataset") {
            detail::check_keys(table, section,
                               {"source", "classes", "per_class", "dim", "spread", "mean_distance", "images",
                                "labels", "limit", "csv", "test_fraction"});
            auto& d = c.dataset;
            read(table, "source", d.source);
            read(table, "classes", d.classes);
            read(table, "per_class", d.per_class);
            read(table, "dim", d.dim);
            read(table, "spread", d.spread);
            read(table, "mean_distance", d.mean_distance);
            read(table, "images", d.images);
            read(table, "labels", d.labels);
            read(table, "limit", d.limit);
            read(table, "csv", d.csv);
            read(table, "test_fraction", d.test_fraction);
        } else if (section == "model") {
            detail::check_keys(table, section, {"kind", "hidden", "activation", "l2"});
            read(table, "kind", c.model.kind);
            read(table, "hidden", c.model.hidden);
            read(table, "activation", c.model.activation);
            read(table, "l2", c.model.l2);
        } else if (section == "train") {
            detail::check_keys(table, section, {"epochs", "learning_rate", "batch_size", "optimizer"});
            read(table, "epochs", c.train.epochs);
            read(table, "learning_rate", c.train.learning_rate);
            read(table, "batch_size", c.train.batch_size);
            std::string opt = "adam";
            read(table, "optimizer", opt);
            require(opt == "adam" || opt == "sgd", "config: optimizer must be adam or sgd");
            c.train.optimizer = opt == "adam" ? Optimizer::Adam : Optimizer::Sgd;
        } else if (section == "sisa") {
            detail::check_keys(table, section, {"shards", "slices"});
            read(table, "shards", c.sisa_shards);
            read(table, "slices", c.sisa_slices);
        } else if (section == "sweep") {
            detail::check_keys(table, section, {"fractions"});
            read(table, "fractions", c.fractions);
        } else if (section == "fisher") {
            detail::check_keys(table, section, {"sigma", "damping", "mode", "clip_norm", "minibatch", "estimator"});
            read(table, "sigma", c.fisher.sigma);
            read(table, "damping", c.fisher.damping);
            read(table, "minibatch", c.fisher_minibatch);
            std::string mode = "newton_plus_noise";
            read(table, "mode", mode);
            require(mode == "newton_plus_noise" || mode == "noise_only",
                    "config: fisher.mode must be newton_plus_noise or noise_only");
            c.fisher.mode = mode == "noise_only" ? FisherMode::NoiseOnly : FisherMode::NewtonPlusNoise;
            std::string est = "sampled";
            read(table, "estimator", est);
            require(est == "sampled" || est == "exact", "config: fisher.estimator must be sampled or exact");
            c.fisher.estimator = est == "exact" ? FisherEstimator::ExactEnumeration : FisherEstimator::SampledLabel;
            if (table.contains("clip_norm")) {
                c.fisher.clip_norm = table.at("clip_norm").get<double>();
            }
        } else if (section == "influence") {
            detail::check_keys(table, section,
                               {"solver", "depth", "scale", "exact", "damping", "batch_r", "batch_f", "clip_norm",
                                "cg_tol", "cg_max_iter", "sign", "minibatch"});
            auto& f = c.influence;
            std::string solver = "lissa";
            read(table, "solver", solver);
            require(solver == "lissa" || solver == "cg", "config: influence.solver must be lissa or cg");
            f.solver = solver == "cg" ? InfluenceSolver::ConjugateGradient : InfluenceSolver::Lissa;
            read(table, "depth", f.lissa_depth);
            read(table, "scale", f.lissa_scale);
            read(table, "exact", f.lissa_exact);
            read(table, "damping", f.damping);
            read(table, "batch_r", f.batch_r);
            read(table, "batch_f", f.batch_f);
            read(table, "cg_tol", f.cg_tol);
            read(table, "cg_max_iter", f.cg_max_iter);
            read(table, "minibatch", c.influence_minibatch);
            std::string sign = "subtract";
            read(table, "sign", sign);
            require(sign == "subtract" || sign == "newton", "config: influence.sign must be subtract or newton");
            f.sign = sign == "newton" ? InfluenceSign::Classical : InfluenceSign::Subtract;
            if (table.contains("clip_norm")) {
                f.clip_norm = table.at("clip_norm").get<double>();
            }
        } else if (section == "adversary") {
            detail::check_keys(table, section, {"knowledge", "budget", "fraction", "target_class"});
            auto& a = c.adversary;
            std::string k = "blind";
            read(table, "knowledge", k);
            require(k == "blind" || k == "output" || k == "param", "config: adversary.knowledge must be blind, output or param");
            a.knowledge = k == "blind" ? Knowledge::Blind : k == "output" ? Knowledge::OutputAware : Knowledge::ParameterAware;
            if (table.contains("fraction")) {
                a.budget = Budget::of_fraction(table.at("fraction").get<double>());
            }
            if (table.contains("budget")) {
                a.budget = Budget::of_count(table.at("budget").get<std::size_t>());
            }
            if (table.contains("target_class")) {
                const int t = table.at("target_class").get<int>();
                a.target_class = t >= 0 ? std::optional<int>(t) : std::nullopt;
            }
        } else if (section == "healing") {
            detail::check_keys(table, section,
                               {"primary_fraction", "budget", "scenarios", "target_class", "methods",
                                "random_control", "twin_q", "delta", "shrinkage"});
            auto& h = c.healing;
            read(table, "primary_fraction", h.primary_fraction);
            read(table, "budget", h.budget);
            read(table, "scenarios", h.scenarios);
            read(table, "target_class", h.target_class);
            read(table, "methods", h.methods);
            read(table, "random_control", h.random_control);
            read(table, "twin_q", h.twin_q);
            read(table, "shrinkage", h.shrinkage);
            if (table.contains("delta")) {
                h.delta = table.at("delta").get<double>();
            }
        } else {
            throw Error(ErrorCode::Parse, origin + ": unknown section [" + section + "]");
        }
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot read config " + path);
    }
    std::ostringstream text;
    text << in.rdbuf();
    return config_from_toml(text.str(), path);
}

inline void ExperimentConfig::validate() const {
    require(dataset.source == "blobs" || dataset.source == "idx" || dataset.source == "csv",
            "config: dataset.source must be blobs, idx or csv");
    require(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0, "config: dataset.test_fraction must lie in (0, 1)");
    require(model.kind == "logistic" || model.kind == "mlp", "config: model.kind must be logistic or mlp");
    require(model.activation == "relu" || model.activation == "tanh", "config: model.activation must be relu or tanh");
    require(train.epochs > 0, "config: train.epochs must be positive");
    train.validate();
    require(sisa_shards > 0 && sisa_slices > 0, "config: sisa shards and slices must be positive");
    for (double f : fractions) {
        require(f > 0.0 && f < 1.0, "config: sweep fractions must lie in (0, 1)");
    }
    fisher.validate();
    influence.validate();
    require(influence_minibatch > 0, "config: influence.minibatch must be positive");
    require(repetitions > 0, "config: run.repetitions must be positive");
    require(healing.primary_fraction > 0.0 && healing.primary_fraction < 1.0,
            "config: healing.primary_fraction must lie in (0, 1)");
    require(healing.budget > 0, "config: healing.budget must be positive");
    require(!healing.methods.empty(), "config: healing grid needs at least one start method");
    for (const auto& m : healing.methods) {
        require(m == "fisher" || m == "influence", "config: healing.methods entries must be fisher or influence");
    }
    require(!healing.scenarios.empty(), "config: healing needs at least one scenario");
    for (const auto& s : healing.scenarios) {
        require(s == "class" || s == "worst_logits" || s == "blind" || s == "param",
                "config: healing.scenarios entries must be class, worst_logits, blind or param");
    }
    require(healing.twin_q > 0, "config: healing.twin_q must be positive");
    require(!healing.delta || *healing.delta >= 0.0, "config: healing.delta must be non-negative");
    require(healing.shrinkage >= 0.0 && healing.shrinkage <= 1.0, "config: healing.shrinkage must lie in [0, 1]");
}

/// Canonical text form; parsing it back yields the same configuration.
inline std::string ExperimentConfig::to_toml() const {
    using detail::fmt_double;
    using detail::quote;
    std::ostringstream o;
    auto num = [](double v) { return fmt_double(v); };
    o << "[run]\nseed = " << seed << "\nrepetitions = " << repetitions << "\n\n";
    o << "[dataset]\nsource = " << quote(dataset.source) << "\nclasses = " << dataset.classes
      << "\nper_class = " << dataset.per_class << "\ndim = " << dataset.dim << "\nspread = " << num(dataset.spread)
      << "\nmean_distance = " << num(dataset.mean_distance) << "\nimages = " << quote(dataset.images)
      << "\nlabels = " << quote(dataset.labels) << "\nlimit = " << dataset.limit << "\ncsv = " << quote(dataset.csv)
      << "\ntest_fraction = " << num(dataset.test_fraction) << "\n\n";
    o << "[model]\nkind = " << quote(model.kind) << "\nhidden = " << model.hidden
      << "\nactivation = " << quote(model.activation) << "\nl2 = " << num(model.l2) << "\n\n";
    o << "[train]\nepochs = " << train.epochs << "\nlearning_rate = " << num(train.learning_rate)
      << "\nbatch_size = " << train.batch_size
      << "\noptimizer = " << quote(train.optimizer == Optimizer::Adam ? "adam" : "sgd") << "\n\n";
    o << "[sisa]\nshards = " << sisa_shards << "\nslices = " << sisa_slices << "\n\n";
    o << "[sweep]\nfractions = " << detail::array(fractions, num) << "\n\n";
    o << "[fisher]\nsigma = " << num(fisher.sigma) << "\ndamping = " << num(fisher.damping)
      << "\nmode = " << quote(fisher.mode == FisherMode::NoiseOnly ? "noise_only" : "newton_plus_noise")
      << "\nestimator = " << quote(fisher.estimator == FisherEstimator::ExactEnumeration ? "exact" : "sampled")
      << "\nminibatch = " << fisher_minibatch << "\n";
    if (fisher.clip_norm) {
        o << "clip_norm = " << num(*fisher.clip_norm) << "\n";
    }
    o << "\n[influence]\nsolver = " << quote(influence.solver == InfluenceSolver::Lissa ? "lissa" : "cg")
      << "\ndepth = " << influence.lissa_depth << "\nscale = " << num(influence.lissa_scale)
      << "\nexact = " << (influence.lissa_exact ? "true" : "false") << "\ndamping = " << num(influence.damping)
      << "\nbatch_r = " << influence.batch_r << "\nbatch_f = " << influence.batch_f
      << "\ncg_tol = " << num(influence.cg_tol) << "\ncg_max_iter = " << influence.cg_max_iter
      << "\nsign = " << quote(influence.sign == InfluenceSign::Classical ? "newton" : "subtract")
      << "\nminibatch = " << influence_minibatch << "\n";
    if (influence.clip_norm) {
        o << "clip_norm = " << num(*influence.clip_norm) << "\n";
    }
    o << "\n[adversary]\nknowledge = " << quote(to_string(adversary.knowledge)) << "\n";
    if (adversary.budget.count) {
        o << "budget = " << *adversary.budget.count << "\n";
    } else if (adversary.budget.fraction) {
        o << "fraction = " << num(*adversary.budget.fraction) << "\n";
    }
    o << "target_class = " << (adversary.target_class ? *adversary.target_class : -1) << "\n\n";
    o << "[healing]\nprimary_fraction = " << num(healing.primary_fraction) << "\nbudget = " << healing.budget
      << "\nscenarios = " << detail::array(healing.scenarios, quote) << "\ntarget_class = " << healing.target_class
      << "\nmethods = " << detail::array(healing.methods, quote)
      << "\nrandom_control = " << (healing.random_control ? "true" : "false") << "\ntwin_q = " << healing.twin_q
      << "\nshrinkage = " << num(healing.shrinkage) << "\n";
    if (healing.delta) {
        o << "delta = " << num(*healing.delta) << "\n";
    }
    return o.str();
}

/// Dataset named by the config, before any splitting.
inline Dataset load_dataset(const DatasetSpec& spec, std::uint64_t seed) {
    if (spec.source == "blobs") {
        return generate_blobs(spec.classes, spec.per_class, spec.dim, spec.spread, derive_seed(seed, {0xb10b}),
                              spec.mean_distance);
    }
    if (spec.source == "idx") {
        return load_idx(spec.images, spec.labels, spec.limit);
    }
    return load_csv(spec.csv);
}

inline Architecture architecture_for(const ExperimentConfig& cfg, const Dataset& d) {
    if (cfg.model.kind == "logistic") {
        return Architecture::logistic(d.feature_dim(), d.num_classes(), cfg.model.l2);
    }
    return Architecture::mlp(d.feature_dim(), d.num_classes(), cfg.model.hidden,
                             cfg.model.activation == "relu" ? Activation::ReLU : Activation::Tanh, cfg.model.l2);
}

} // namespace ulab

#endif
