// Command-line front end: single-step operations on the primary split and
// full experiment runs that write report.json, summary.csv and curves.csv.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ulab/adversary.hpp"
#include "ulab/approx_unlearn.hpp"
#include "ulab/config.hpp"
#include "ulab/exact_unlearn.hpp"
#include "ulab/harness.hpp"
#include "ulab/similarity_healing.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";

    std::string method;
    std::string knowledge;
    std::optional<std::size_t> budget;
    std::optional<double> fraction;
    std::optional<int> target_class;
    std::string requests;
    std::vector<std::string> ids;
    std::string model;
    std::string mode = "remain";
    std::string metric = "raw_l2";
    std::optional<std::size_t> epochs;
    std::string in;
};

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

ulab::ExperimentConfig load(const Options& o) {
    if (o.config.empty()) {
        throw UsageError("--config is required");
    }
    // A config that cannot be read or validated is bad input, not a runtime failure.
    ulab::ExperimentConfig cfg;
    try {
        cfg = ulab::load_config(o.config);
    } catch (const ulab::Error& e) {
        throw UsageError(e.what());
    }
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    return cfg;
}

/// The split used by the single-step commands: training happens on the
/// primary part, the backup part supplies healing candidates.
struct Workspace {
    ulab::ExperimentConfig cfg;
    ulab::PreparedData data;
    ulab::Dataset primary;
    ulab::Dataset backup;
};

Workspace workspace(const Options& o) {
    Workspace w{load(o), {}, {}, {}};
    w.data = ulab::prepare_data(w.cfg);
    auto [primary, backup] = ulab::split_primary_backup(
        w.data.train, {w.cfg.healing.primary_fraction, ulab::derive_seed(w.cfg.seed, {0xbac})});
    w.primary = std::move(primary);
    w.backup = std::move(backup);
    fs::create_directories(o.out);
    return w;
}

ulab::ModelState base_model(const Workspace& w, const Options& o) {
    if (!o.model.empty()) {
        return ulab::load_checkpoint(o.model);
    }
    const fs::path saved = fs::path(o.out) / "model.ulck";
    if (fs::exists(saved)) {
        return ulab::load_checkpoint(saved);
    }
    return ulab::train_base_model(w.cfg, w.primary, w.data.arch);
}

ulab::SampleId parse_id(const std::string& text) {
    std::size_t used = 0;
    ulab::SampleId id = 0;
    try {
        id = std::stoull(text, &used, 16);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != text.size()) {
        throw ulab::Error(ulab::ErrorCode::Parse, "cannot parse sample id '" + text + "' (expected hex)");
    }
    return id;
}

std::vector<ulab::SampleId> read_requests(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ulab::Error(ulab::ErrorCode::Io, "cannot read " + path);
    }
    std::vector<ulab::SampleId> ids;
    try {
        const json j = json::parse(in);
        for (const auto& r : j.at("requests")) {
            ids.push_back(parse_id(r.at("id").get<std::string>()));
        }
    } catch (const json::exception& e) {
        throw ulab::Error(ulab::ErrorCode::Parse, path + ": " + e.what());
    }
    return ids;
}

/// Ids named by --ids, else --requests, else the saved requests.json, else a
/// blind draw using the configured adversary budget.
std::vector<ulab::SampleId> request_ids(const Workspace& w, const Options& o) {
    if (!o.ids.empty()) {
        std::vector<ulab::SampleId> ids;
        for (const auto& s : o.ids) {
            ids.push_back(parse_id(s));
        }
        return ids;
    }
    if (!o.requests.empty()) {
        return read_requests(o.requests);
    }
    const fs::path saved = fs::path(o.out) / "requests.json";
    if (fs::exists(saved)) {
        return read_requests(saved.string());
    }
    ulab::AdversaryConfig adv = w.cfg.adversary;
    adv.knowledge = ulab::Knowledge::Blind;
    adv.seed = ulab::derive_seed(w.cfg.seed, {0xadd});
    return ulab::requests_blind(w.primary, adv).ids;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    out << j.dump(2) << '\n';
    if (!out) {
        throw ulab::Error(ulab::ErrorCode::Io, "cannot write " + path.string());
    }
    std::cout << j.dump() << '\n';
}

int cmd_train(const Options& o) {
    const auto w = workspace(o);
    const auto m = ulab::train_base_model(w.cfg, w.primary, w.data.arch);
    const auto digest = ulab::save_checkpoint(m, fs::path(o.out) / "model.ulck");
    write_json(fs::path(o.out) / "train.json", {{"accuracy", ulab::accuracy(m, w.data.test)},
                                                {"train_size", w.primary.size()},
                                                {"checkpoint", "model.ulck"},
                                                {"digest", ulab::to_hex(digest)}});
    return 0;
}

int cmd_sisa_train(const Options& o) {
    const auto w = workspace(o);
    const auto e = ulab::sisa_train(w.primary, ulab::sisa_config_for(w.cfg, w.data.arch));
    const auto digest = ulab::save_ensemble(e, fs::path(o.out) / "sisa");
    write_json(fs::path(o.out) / "sisa-train.json", {{"accuracy", ulab::sisa_accuracy(e, w.data.test)},
                                                     {"manifest", "sisa/manifest.json"},
                                                     {"digest", ulab::to_hex(digest)}});
    return 0;
}

int cmd_attack(const Options& o) {
    const auto w = workspace(o);
    ulab::AdversaryConfig adv = w.cfg.adversary;
    adv.seed = ulab::derive_seed(w.cfg.seed, {0xadd});
    if (!o.knowledge.empty()) {
        adv.knowledge = o.knowledge == "blind"    ? ulab::Knowledge::Blind
                        : o.knowledge == "output" ? ulab::Knowledge::OutputAware
                                                  : ulab::Knowledge::ParameterAware;
    }
    if (o.budget) {
        adv.budget = ulab::Budget::of_count(*o.budget);
    } else if (o.fraction) {
        adv.budget = ulab::Budget::of_fraction(*o.fraction);
    }
    if (o.target_class) {
        adv.target_class = *o.target_class >= 0 ? o.target_class : std::nullopt;
    }
    std::optional<ulab::ModelState> m;
    if (adv.knowledge != ulab::Knowledge::Blind) {
        m = base_model(w, o);
    }
    const auto list = ulab::generate_requests(w.primary, adv, m ? &*m : nullptr, w.cfg.influence);
    write_json(fs::path(o.out) / "requests.json", list.to_json());
    return 0;
}

int cmd_unlearn(const Options& o) {
    if (o.method.empty()) {
        throw UsageError("--method is required");
    }
    const auto w = workspace(o);
    const auto ids = request_ids(w, o);
    ulab::validate_membership(w.primary, ids);
    const fs::path out = o.out;
    json result = {{"method", o.method}, {"removed", ids.size()}};
    if (o.method == "sisa") {
        const fs::path dir = out / "sisa";
        const auto e = fs::exists(dir / "manifest.json")
                           ? ulab::load_ensemble(dir)
                           : ulab::sisa_train(w.primary, ulab::sisa_config_for(w.cfg, w.data.arch));
        auto [after, info] = ulab::sisa_unlearn(e, ids);
        const auto digest = ulab::save_ensemble(after, out / "sisa-unlearned");
        result["accuracy"] = ulab::sisa_accuracy(after, w.data.test);
        result["retrained_shards"] = info.retrained_shards;
        result["manifest"] = "sisa-unlearned/manifest.json";
        result["digest"] = ulab::to_hex(digest);
    } else {
        ulab::ModelState m;
        if (o.method == "naive") {
            const auto d_r = ulab::remove_by_ids(w.primary, ids);
            m = ulab::train_gold(d_r, w.data.arch,
                                 ulab::detail::base_train_config(w.cfg, ulab::derive_seed(w.cfg.seed, {0x901d})));
        } else {
            json steps;
            m = ulab::run_approx(w.cfg, o.method, base_model(w, o), w.primary, ids,
                                 ulab::derive_seed(w.cfg.seed, {0xa11}), &steps);
            result["steps"] = steps;
        }
        const auto digest = ulab::save_checkpoint(m, out / "unlearned.ulck");
        result["accuracy"] = ulab::accuracy(m, w.data.test);
        result["checkpoint"] = "unlearned.ulck";
        result["digest"] = ulab::to_hex(digest);
    }
    write_json(out / "unlearn.json", result);
    return 0;
}

ulab::MetricSpec metric_named(const std::string& name) {
    for (const auto& m : ulab::twin_metric_variants()) {
        if (m.name() == name) {
            return m;
        }
    }
    throw UsageError("unknown metric '" + name + "'");
}

int cmd_heal(const Options& o) {
    const auto w = workspace(o);
    const auto ids = request_ids(w, o);
    ulab::validate_membership(w.primary, ids);
    const fs::path out = o.out;
    const fs::path start_path = o.model.empty() ? out / "unlearned.ulck" : fs::path(o.model);
    const auto start = ulab::load_checkpoint(start_path);
    Options plain = o;
    plain.model.clear();
    const auto base = base_model(w, plain);
    const auto d_r = ulab::remove_by_ids(w.primary, ids);
    const auto forget = ulab::select_by_ids(w.primary, ids);

    ulab::HealConfig hc;
    hc.epochs = o.epochs.value_or((w.cfg.train.epochs + 1) / 2);
    hc.train_cfg.batch_size = w.cfg.train.batch_size;
    hc.train_cfg.seed = ulab::derive_seed(w.cfg.seed, {0x4ea1});
    std::vector<ulab::Sample> replacements;
    json result = {{"mode", o.mode}, {"epochs", hc.epochs}};
    if (o.mode == "twins") {
        hc.mode = ulab::HealMode::RemainPlusTwins;
        auto spec = metric_named(o.metric);
        spec.shrinkage = spec.kind == ulab::MetricKind::Mahalanobis ? w.cfg.healing.shrinkage : spec.shrinkage;
        hc.metric = spec;
        const auto metric = ulab::Metric::fit(spec, d_r, &base);
        const double delta = w.cfg.healing.delta
                                 ? *w.cfg.healing.delta
                                 : ulab::default_delta(d_r, w.backup, metric, ulab::derive_seed(w.cfg.seed, {0xde1}));
        const auto index = ulab::build_twin_index(forget, w.backup, metric, delta, w.cfg.healing.twin_q);
        ulab::write_twin_csv(index, out / "twins.csv");
        auto rep = ulab::twin_replacements(index, ids, w.backup);
        for (auto id : rep.skipped) {
            std::clog << "warning: no twin within delta for " << ulab::to_hex(id) << '\n';
        }
        replacements = std::move(rep.samples);
        result["metric"] = spec.name();
        result["delta"] = delta;
    } else if (o.mode == "random") {
        hc.mode = ulab::HealMode::RemainPlusRandom;
        replacements = ulab::random_replacements(w.backup, std::min(ids.size(), w.backup.size()),
                                                 ulab::derive_seed(w.cfg.seed, {0x7a9d}));
    } else {
        hc.mode = ulab::HealMode::RemainOnly;
    }
    const auto healed = ulab::heal(start, d_r, replacements, hc, ids);
    const auto digest = ulab::save_checkpoint(healed.state, out / "healed.ulck");
    result["start_accuracy"] = ulab::accuracy(start, w.data.test);
    result["accuracy"] = ulab::accuracy(healed.state, w.data.test);
    result["train_size"] = healed.train_size;
    result["replacements"] = replacements.size();
    result["checkpoint"] = "healed.ulck";
    result["digest"] = ulab::to_hex(digest);
    write_json(out / "heal.json", result);
    return 0;
}

int cmd_sweep(const Options& o) {
    const auto cfg = load(o);
    const auto report = ulab::run_sweep(cfg, o.out);
    ulab::write_report(report, o.out);
    ulab::print_summary_table(report, std::cout);
    for (const auto& warning : report.warnings) {
        std::clog << "warning: " << warning << '\n';
    }
    return 0;
}

int cmd_healing(const Options& o) {
    const auto cfg = load(o);
    const auto report = ulab::run_healing_protocol(cfg, o.out);
    ulab::write_report(report, o.out);
    ulab::print_summary_table(report, std::cout);
    ulab::print_healing_table(report, std::cout);
    for (const auto& warning : report.warnings) {
        std::clog << "warning: " << warning << '\n';
    }
    return 0;
}

int cmd_report(const Options& o) {
    const fs::path dir = o.in.empty() ? fs::path(o.out) : fs::path(o.in);
    const auto report = ulab::load_report(dir / "report.json");
    const fs::path config = dir / report.config_file;
    if (fs::exists(config) && ulab::file_digest(config) != report.config_digest) {
        throw ulab::Error(ulab::ErrorCode::Parse, "config digest mismatch for " + config.string());
    }
    ulab::write_report(report, dir);
    ulab::print_summary_table(report, std::cout);
    if (!report.healing.empty()) {
        ulab::print_healing_table(report, std::cout);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Machine unlearning laboratory: exact and approximate unlearning, adversarial requests, healing"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("--config", o.config, "Experiment file (TOML subset)");
    app.add_option("--seed", o.seed, "Master seed, overrides [run] seed");
    app.add_option("--out", o.out, "Output directory")->capture_default_str();

    auto* train = app.add_subcommand("train", "Train the base model on the primary split");
    auto* sisa = app.add_subcommand("sisa-train", "Train a sharded, sliced ensemble on the primary split");
    auto* unlearn = app.add_subcommand("unlearn", "Remove requested samples from a trained model");
    unlearn->add_option("--method", o.method, "naive | sisa | fisher | influence")
        ->check(CLI::IsMember({"naive", "sisa", "fisher", "influence"}));
    auto* attack = app.add_subcommand("attack", "Generate adversarial unlearn requests");
    attack->add_option("--knowledge", o.knowledge, "blind | output | param")
        ->check(CLI::IsMember({"blind", "output", "param"}));
    attack->add_option("--budget", o.budget, "Number of requests");
    attack->add_option("--fraction", o.fraction, "Requests as a fraction of the primary split");
    attack->add_option("--target-class", o.target_class, "Restrict requests to one class (-1: any)");
    auto* heal = app.add_subcommand("heal", "Fine-tune an unlearned model on remaining data plus replacements");
    heal->add_option("--mode", o.mode, "remain | twins | random")->check(CLI::IsMember({"remain", "twins", "random"}));
    heal->add_option("--metric", o.metric, "raw_l2 | raw_mahalanobis | feature_cosine | feature_mahalanobis");
    heal->add_option("--epochs", o.epochs, "Fine-tuning epochs (default: half the training epochs, rounded up)");
    for (auto* sub : {unlearn, heal}) {
        sub->add_option("--requests", o.requests, "Request file written by attack");
        sub->add_option("--ids", o.ids, "Sample ids (hex)")->delimiter(',');
        sub->add_option("--model", o.model, "Checkpoint to start from");
    }
    attack->add_option("--model", o.model, "Checkpoint to attack");
    auto* sweep = app.add_subcommand("sweep", "Removal-fraction sweep over every unlearning method");
    auto* healing = app.add_subcommand("healing-protocol", "Unlearn, pick representatives, heal over the grid");
    auto* report = app.add_subcommand("report", "Rewrite summary.csv and curves.csv from report.json");
    report->add_option("--in", o.in, "Report directory (default: --out)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (*train) {
            return cmd_train(o);
        }
        if (*sisa) {
            return cmd_sisa_train(o);
        }
        if (*unlearn) {
            return cmd_unlearn(o);
        }
        if (*attack) {
            return cmd_attack(o);
        }
        if (*heal) {
            return cmd_heal(o);
        }
        if (*sweep) {
            return cmd_sweep(o);
        }
        if (*healing) {
            return cmd_healing(o);
        }
        if (*report) {
            return cmd_report(o);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    } catch (const ulab::Error& e) {
        std::cerr << "error [" << ulab::to_string(e.code()) << "]: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
