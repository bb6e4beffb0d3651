#ifndef ULAB_HARNESS_HPP
#define ULAB_HARNESS_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "ulab/adversary.hpp"
#include "ulab/approx_unlearn.hpp"
#include "ulab/config.hpp"
#include "ulab/dataset.hpp"
#include "ulab/error.hpp"
#include "ulab/exact_unlearn.hpp"
#include "ulab/hash.hpp"
#include "ulab/model.hpp"
#include "ulab/parallel.hpp"
#include "ulab/similarity_healing.hpp"

namespace ulab {

/// One evaluated model (or a failed attempt to produce one).
struct RunRecord {
    std::string stage;
    std::string method;
    std::string scenario;
    std::optional<double> fraction;
    std::size_t rep = 0;
    std::uint64_t seed = 0;
    std::optional<double> accuracy;
    double wall_time_s = 0.0;
    std::string status = "ok";
    std::string error;
    std::string checkpoint; // relative to the report directory
    std::string checkpoint_digest;
    nlohmann::json extra = nlohmann::json::object();

    bool ok() const { return status == "ok" && accuracy.has_value(); }
};

inline RunRecord make_record(std::string stage, std::string method, std::string scenario,
                             std::optional<double> fraction = std::nullopt, std::size_t rep = 0,
                             std::uint64_t seed = 0) {
    RunRecord r;
    r.stage = std::move(stage);
    r.method = std::move(method);
    r.scenario = std::move(scenario);
    r.fraction = fraction;
    r.rep = rep;
    r.seed = seed;
    return r;
}

struct SummaryRow {
    std::string stage;
    std::string method;
    std::string scenario;
    std::optional<double> fraction;
    std::size_t runs = 0; // successful runs
    std::size_t failed = 0;
    double mean_acc = 0.0;
    double std_acc = 0.0;
    double mean_time_s = 0.0;
    std::optional<std::size_t> representative_rep;
};

/// Best and worst healed accuracy for one (scenario, start method, epochs) cell.
struct HealingCell {
    std::string scenario;
    std::string start_method;
    std::size_t epochs = 0;
    double start_acc = 0.0;
    double gold_acc = 0.0;
    bool collapsed = false;
    std::optional<double> best_acc;
    std::string best_config;
    std::optional<double> worst_acc;
    std::string worst_config;
    std::optional<double> delta_pp; // (best - gold) in percentage points
    std::optional<double> twin_best_acc;
    std::string twin_best_config;
    std::optional<double> remain_only_acc;
    std::optional<double> random_acc;
};

struct TwinSearch {
    std::string scenario;
    std::string metric;
    double delta = 0.0;
    std::size_t matched = 0;
    std::vector<SampleId> skipped;
    std::string file;
    std::string error;
};

struct MetricsReport {
    std::string kind; // sweep | healing
    std::uint64_t seed = 0;
    std::string config_file;
    std::string config_digest;
    std::vector<RunRecord> records;
    std::vector<HealingCell> healing;
    std::vector<TwinSearch> twins;
    std::vector<std::string> warnings;
};

/// Index of the value closest to the mean; ties go to the lowest index.
inline std::size_t representative_index(std::span<const double> values) {
    require(!values.empty(), "representative_index: no values");
    double mean = 0.0;
    for (double v : values) {
        mean += v;
    }
    mean /= static_cast<double>(values.size());
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (std::abs(values[i] - mean) < std::abs(values[best] - mean)) {
            best = i;
        }
    }
    return best;
}

/// Groups records by (stage, method, scenario) in first-appearance order.
inline std::vector<SummaryRow> summarize(std::span<const RunRecord> records) {
    std::vector<SummaryRow> rows;
    std::vector<std::vector<const RunRecord*>> members;
    std::map<std::tuple<std::string, std::string, std::string>, std::size_t> index;
    for (const auto& r : records) {
        const auto key = std::make_tuple(r.stage, r.method, r.scenario);
        auto it = index.find(key);
        if (it == index.end()) {
            it = index.emplace(key, rows.size()).first;
            SummaryRow row;
            row.stage = r.stage;
            row.method = r.method;
            row.scenario = r.scenario;
            row.fraction = r.fraction;
            rows.push_back(std::move(row));
            members.emplace_back();
        }
        members[it->second].push_back(&r);
    }
    for (std::size_t g = 0; g < rows.size(); ++g) {
        auto& row = rows[g];
        std::vector<double> accs;
        std::vector<std::size_t> reps;
        double time = 0.0;
        for (const RunRecord* r : members[g]) {
            time += r->wall_time_s;
            if (r->ok()) {
                accs.push_back(*r->accuracy);
                reps.push_back(r->rep);
            } else {
                ++row.failed;
            }
        }
        row.runs = accs.size();
        row.mean_time_s = time / static_cast<double>(members[g].size());
        if (accs.empty()) {
            continue;
        }
        for (double a : accs) {
            row.mean_acc += a;
        }
        row.mean_acc /= static_cast<double>(accs.size());
        if (accs.size() > 1) {
            double ss = 0.0;
            for (double a : accs) {
                ss += (a - row.mean_acc) * (a - row.mean_acc);
            }
            row.std_acc = std::sqrt(ss / static_cast<double>(accs.size() - 1));
        }
        row.representative_rep = reps[representative_index(accs)];
    }
    return rows;
}

namespace detail {

inline double round_time(double seconds) { return std::round(seconds * 1000.0) / 1000.0; }

inline std::string fraction_label(double f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "fraction=%.2f", f);
    return buf;
}

inline std::string safe_name(std::string s) {
    for (char& c : s) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') {
            c = '_';
        }
    }
    return s;
}

inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline std::optional<double> opt_double(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return std::nullopt;
    }
    return j.at(key).get<double>();
}

/// Persists evaluated models under <root>/checkpoints.
class ArtifactStore {
public:
    explicit ArtifactStore(std::filesystem::path root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_ / "checkpoints");
    }

    const std::filesystem::path& root() const { return root_; }

    void model(RunRecord& rec, const ModelState& m) const {
        const std::string rel = "checkpoints/" + cell_name(rec) + ".ulck";
        rec.checkpoint_digest = to_hex(save_checkpoint(m, root_ / rel));
        rec.checkpoint = rel;
    }

    void ensemble(RunRecord& rec, const SisaEnsemble& e) const {
        const std::string rel = "checkpoints/" + cell_name(rec);
        rec.checkpoint_digest = to_hex(save_ensemble(e, root_ / rel));
        rec.checkpoint = rel + "/manifest.json";
    }

private:
    static std::string cell_name(const RunRecord& r) {
        return safe_name(r.stage + "_" + r.method + "_" + r.scenario + "_r" + std::to_string(r.rep));
    }

    std::filesystem::path root_;
};

/// Runs body, filling accuracy, timing and checkpoint; errors mark the record failed.
inline RunRecord run_cell(RunRecord rec, const std::function<void(RunRecord&)>& body) {
    const auto start = std::chrono::steady_clock::now();
    try {
        body(rec);
    } catch (const std::exception& e) {
        rec.status = "failed";
        rec.accuracy.reset();
        rec.error = e.what();
    }
    rec.wall_time_s = round_time(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    return rec;
}

inline TrainConfig base_train_config(const ExperimentConfig& cfg, std::uint64_t seed) {
    TrainConfig t = cfg.train;
    t.seed = seed;
    return t;
}

inline std::vector<SampleId> sorted_ids(std::vector<SampleId> ids) {
    std::sort(ids.begin(), ids.end());
    return ids;
}

} // namespace detail

/// Writes the canonical config text to dir/config.toml and returns its digest.
inline std::string save_config(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::string text = cfg.to_toml();
    std::ofstream out(dir / "config.toml", std::ios::binary);
    out << text;
    if (!out) {
        throw Error(ErrorCode::Io, "cannot write " + (dir / "config.toml").string());
    }
    return to_hex(fnv1a(text));
}

inline std::string file_digest(const std::filesystem::path& path) {
    const auto bytes = detail::read_file_bytes(path.string());
    Fnv1a h;
    h.update(bytes);
    return to_hex(h.digest());
}

/// Train/test split shared by every stage of an experiment.
struct PreparedData {
    Dataset train;
    Dataset test;
    Architecture arch;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
    const Dataset all = load_dataset(cfg.dataset, cfg.seed);
    auto [train, test] = split_train_test(all, cfg.dataset.test_fraction, derive_seed(cfg.seed, {0x7e57}));
    const Architecture arch = architecture_for(cfg, all);
    return {std::move(train), std::move(test), arch};
}

/// The model M every unlearning method starts from.
inline ModelState train_base_model(const ExperimentConfig& cfg, const Dataset& d, const Architecture& arch) {
    return train(init(arch, derive_seed(cfg.seed, {0x1a17})), d,
                 detail::base_train_config(cfg, derive_seed(cfg.seed, {0x7a1})));
}

inline SisaConfig sisa_config_for(const ExperimentConfig& cfg, const Architecture& arch) {
    SisaConfig s;
    s.num_shards = cfg.sisa_shards;
    s.num_slices = cfg.sisa_slices;
    s.arch = arch;
    s.train_cfg = detail::base_train_config(cfg, derive_seed(cfg.seed, {0x515a}));
    s.seed = derive_seed(cfg.seed, {0x515b});
    return s;
}

/// Approximate unlearning of ids from m (trained on d), one minibatch at a time.
inline ModelState run_approx(const ExperimentConfig& cfg, const std::string& method, const ModelState& m,
                             const Dataset& d, std::span<const SampleId> ids, std::uint64_t seed,
                             nlohmann::json* steps = nullptr) {
    SequentialResult res;
    if (method == "fisher") {
        FisherConfig f = cfg.fisher;
        f.seed = seed;
        const std::size_t mb = cfg.fisher_minibatch > 0 ? cfg.fisher_minibatch : std::max<std::size_t>(1, ids.size());
        res = sequential_unlearn(m, d, ids, f, mb);
    } else if (method == "influence") {
        InfluenceConfig f = cfg.influence;
        f.seed = seed;
        res = sequential_unlearn(m, d, ids, f, cfg.influence_minibatch);
    } else {
        throw Error(ErrorCode::InvalidArgument, "unknown approximate method '" + method + "'");
    }
    if (steps != nullptr) {
        *steps = nlohmann::json::array();
        for (const auto& r : res.log) {
            steps->push_back(r.to_json());
        }
    }
    return res.state;
}

/// Baselines M and M_SISA, then for every removal fraction and repetition the
/// gold retrain, SISA unlearning, Fisher and influence unlearning.
inline MetricsReport run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    MetricsReport report;
    report.kind = "sweep";
    report.seed = cfg.seed;
    report.config_file = "config.toml";
    report.config_digest = save_config(cfg, out_dir);
    const detail::ArtifactStore store(out_dir);
    const PreparedData data = prepare_data(cfg);

    ModelState base;
    report.records.push_back(detail::run_cell(make_record("baseline", "full", "train"), [&](RunRecord& r) {
        r.seed = cfg.seed;
        base = train_base_model(cfg, data.train, data.arch);
        r.accuracy = accuracy(base, data.test);
        store.model(r, base);
    }));
    std::optional<SisaEnsemble> ensemble;
    report.records.push_back(detail::run_cell(make_record("baseline", "sisa", "train"), [&](RunRecord& r) {
        const SisaConfig sc = sisa_config_for(cfg, data.arch);
        r.seed = sc.seed;
        ensemble = sisa_train(data.train, sc);
        r.accuracy = sisa_accuracy(*ensemble, data.test);
        store.ensemble(r, *ensemble);
    }));
    const bool base_ok = report.records[0].ok();

    const std::size_t nf = cfg.fractions.size();
    const std::size_t reps = cfg.repetitions;
    std::vector<std::vector<RunRecord>> cells(nf * reps);
    parallel_for(nf * reps, [&](std::size_t c) {
        const std::size_t fi = c / reps, rep = c % reps;
        const double f = cfg.fractions[fi];
        const std::uint64_t rs = derive_seed(cfg.seed, {0x5eed, fi, rep});
        const std::string scenario = detail::fraction_label(f);
        AdversaryConfig adv;
        adv.budget = Budget::of_fraction(f);
        adv.seed = rs;
        const auto ids = requests_blind(data.train, adv).ids;
        auto make = [&](const char* method, std::uint64_t seed) {
            RunRecord r = make_record("unlearn", method, scenario, f, rep, seed);
            r.extra["removed"] = ids.size();
            return r;
        };
        auto& out = cells[c];
        out.push_back(detail::run_cell(make("gold", derive_seed(rs, {0x901d})), [&](RunRecord& r) {
            const Dataset d_r = remove_by_ids(data.train, ids);
            const auto m = train_gold(d_r, data.arch, detail::base_train_config(cfg, r.seed));
            r.accuracy = accuracy(m, data.test);
            store.model(r, m);
        }));
        out.push_back(detail::run_cell(make("sisa", ensemble ? ensemble->config.seed : 0), [&](RunRecord& r) {
            require(ensemble.has_value(), "sisa baseline unavailable");
            auto [e, rep_info] = sisa_unlearn(*ensemble, ids);
            r.accuracy = sisa_accuracy(e, data.test);
            r.extra["retrained_shards"] = rep_info.retrained_shards;
            store.ensemble(r, e);
        }));
        for (const char* method : {"fisher", "influence"}) {
            out.push_back(detail::run_cell(make(method, derive_seed(rs, {fnv1a(method)})), [&](RunRecord& r) {
                require(base_ok, "baseline model unavailable");
                const auto m = run_approx(cfg, method, base, data.train, ids, r.seed);
                r.accuracy = accuracy(m, data.test);
                store.model(r, m);
            }));
        }
    });
    for (auto& c : cells) {
        for (auto& r : c) {
            if (!r.ok()) {
                report.warnings.push_back(r.stage + "/" + r.method + "/" + r.scenario + "/r" + std::to_string(r.rep) +
                                          " failed: " + r.error);
            }
            report.records.push_back(std::move(r));
        }
    }
    return report;
}

/// Healing data configurations in grid order.
inline std::vector<std::string> healing_configs(bool random_control) {
    std::vector<std::string> out;
    for (const auto& m : twin_metric_variants()) {
        out.push_back("twins_" + m.name());
    }
    out.push_back("remain_only");
    if (random_control) {
        out.push_back("random");
    }
    return out;
}

inline std::vector<std::size_t> healing_epochs(std::size_t n) {
    const std::size_t half = (n + 1) / 2;
    return half == 1 ? std::vector<std::size_t>{1} : std::vector<std::size_t>{1, half};
}

/// Unlearn-request ids for a healing scenario.
inline std::vector<SampleId> scenario_requests(const ExperimentConfig& cfg, const std::string& scenario,
                                               const Dataset& primary, const ModelState& m, std::uint64_t seed) {
    AdversaryConfig adv;
    adv.budget = Budget::of_count(std::min(cfg.healing.budget, primary.size()));
    adv.seed = seed;
    if (scenario == "class") {
        adv.target_class = cfg.healing.target_class;
        return requests_blind(primary, adv).ids;
    }
    if (scenario == "blind") {
        return requests_blind(primary, adv).ids;
    }
    if (scenario == "worst_logits") {
        return requests_output_aware(primary, m, adv).ids;
    }
    return requests_param_aware(primary, m, adv, cfg.influence).ids;
}

/// Split into primary and backup, train M and M_Gold, unlearn the scenario's
/// requests R times per approximate method, pick the representative run, search
/// twins under four metrics and fine-tune over the healing grid.
inline MetricsReport run_healing_protocol(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    MetricsReport report;
    report.kind = "healing";
    report.seed = cfg.seed;
    report.config_file = "config.toml";
    report.config_digest = save_config(cfg, out_dir);
    const detail::ArtifactStore store(out_dir);
    const PreparedData data = prepare_data(cfg);
    auto [primary, backup] = split_primary_backup(data.train, {cfg.healing.primary_fraction, derive_seed(cfg.seed, {0xbac})});
    const double collapse_threshold = 1.5 / static_cast<double>(primary.num_classes());

    ModelState base;
    report.records.push_back(detail::run_cell(make_record("baseline", "full", "primary"), [&](RunRecord& r) {
        r.seed = cfg.seed;
        base = train_base_model(cfg, primary, data.arch);
        r.accuracy = accuracy(base, data.test);
        store.model(r, base);
    }));
    if (!report.records[0].ok()) {
        report.warnings.push_back("baseline training failed: " + report.records[0].error);
        return report;
    }

    for (std::size_t si = 0; si < cfg.healing.scenarios.size(); ++si) {
        const std::string& scenario = cfg.healing.scenarios[si];
        std::vector<SampleId> ids;
        try {
            ids = scenario_requests(cfg, scenario, primary, base, derive_seed(cfg.seed, {0xadd, si}));
        } catch (const std::exception& e) {
            report.warnings.push_back("scenario " + scenario + ": request generation failed: " + e.what());
            continue;
        }
        const Dataset d_r = remove_by_ids(primary, ids);
        const Dataset forget = select_by_ids(primary, ids);

        ModelState gold;
        RunRecord gold_rec = detail::run_cell(make_record("gold", "gold", scenario), [&](RunRecord& r) {
            r.seed = derive_seed(cfg.seed, {0x901d, si});
            gold = train_gold(d_r, data.arch, detail::base_train_config(cfg, r.seed));
            r.accuracy = accuracy(gold, data.test);
            r.extra["removed"] = ids.size();
            store.model(r, gold);
        });
        const std::optional<double> gold_acc = gold_rec.accuracy;
        report.records.push_back(std::move(gold_rec));

        // Representative start model per method.
        std::vector<std::optional<ModelState>> starts(cfg.healing.methods.size());
        std::vector<double> start_accs(cfg.healing.methods.size(), 0.0);
        for (std::size_t mi = 0; mi < cfg.healing.methods.size(); ++mi) {
            const std::string& method = cfg.healing.methods[mi];
            std::vector<RunRecord> recs(cfg.repetitions);
            std::vector<std::optional<ModelState>> models(cfg.repetitions);
            parallel_for(cfg.repetitions, [&](std::size_t rep) {
                recs[rep] = detail::run_cell(
                    make_record("unlearn", method, scenario, std::nullopt, rep, derive_seed(cfg.seed, {0xa11, si, mi, rep})),
                    [&](RunRecord& r) {
                        const auto m = run_approx(cfg, method, base, primary, ids, r.seed);
                        r.accuracy = accuracy(m, data.test);
                        store.model(r, m);
                        models[rep] = m;
                    });
            });
            std::vector<double> accs;
            std::vector<std::size_t> ok_reps;
            for (std::size_t rep = 0; rep < recs.size(); ++rep) {
                if (recs[rep].ok()) {
                    accs.push_back(*recs[rep].accuracy);
                    ok_reps.push_back(rep);
                } else {
                    report.warnings.push_back("unlearn/" + method + "/" + scenario + "/r" + std::to_string(rep) +
                                              " failed: " + recs[rep].error);
                }
            }
            if (!accs.empty()) {
                const std::size_t chosen = ok_reps[representative_index(accs)];
                recs[chosen].extra["representative"] = true;
                starts[mi] = models[chosen];
                start_accs[mi] = *recs[chosen].accuracy;
                if (start_accs[mi] < collapse_threshold) {
                    report.warnings.push_back("scenario " + scenario + ": representative " + method +
                                              " model collapsed (accuracy " + std::to_string(start_accs[mi]) + ")");
                }
            } else {
                report.warnings.push_back("scenario " + scenario + ": every " + method + " run failed, no healing");
            }
            for (auto& r : recs) {
                report.records.push_back(std::move(r));
            }
        }

        // Twin replacements per metric, searched in the backup split.
        std::map<std::string, std::optional<std::vector<Sample>>> replacements;
        for (const auto& spec0 : twin_metric_variants()) {
            MetricSpec spec = spec0;
            if (spec.kind == MetricKind::Mahalanobis) {
                spec.shrinkage = cfg.healing.shrinkage;
            }
            TwinSearch ts;
            ts.scenario = scenario;
            ts.metric = spec.name();
            try {
                const Metric metric = Metric::fit(spec, d_r, &base);
                ts.delta = cfg.healing.delta ? *cfg.healing.delta
                                             : default_delta(d_r, backup, metric, derive_seed(cfg.seed, {0xde1, si}));
                const TwinIndex index = build_twin_index(forget, backup, metric, ts.delta, cfg.healing.twin_q);
                ts.file = "twins_" + detail::safe_name(scenario) + "_" + spec.name() + ".csv";
                write_twin_csv(index, out_dir / ts.file);
                auto rep = twin_replacements(index, ids, backup);
                ts.matched = rep.samples.size();
                ts.skipped = detail::sorted_ids(rep.skipped);
                if (!rep.skipped.empty()) {
                    report.warnings.push_back("scenario " + scenario + ", " + spec.name() + ": " +
                                              std::to_string(rep.skipped.size()) +
                                              " forgotten samples have no twin within delta");
                }
                replacements["twins_" + spec.name()] = std::move(rep.samples);
            } catch (const std::exception& e) {
                ts.error = e.what();
                replacements["twins_" + spec.name()] = std::nullopt;
                report.warnings.push_back("scenario " + scenario + ", " + spec.name() + ": twin search failed: " +
                                          e.what());
            }
            report.twins.push_back(std::move(ts));
        }
        replacements["remain_only"] = std::vector<Sample>{};
        if (cfg.healing.random_control) {
            replacements["random"] = random_replacements(backup, std::min(ids.size(), backup.size()),
                                                         derive_seed(cfg.seed, {0x7a9d, si}));
        }

        const auto configs = healing_configs(cfg.healing.random_control);
        for (std::size_t mi = 0; mi < cfg.healing.methods.size(); ++mi) {
            if (!starts[mi]) {
                continue;
            }
            const std::string& method = cfg.healing.methods[mi];
            for (std::size_t epochs : healing_epochs(cfg.train.epochs)) {
                HealingCell cell;
                cell.scenario = scenario;
                cell.start_method = method;
                cell.epochs = epochs;
                cell.start_acc = start_accs[mi];
                cell.gold_acc = gold_acc.value_or(std::nan(""));
                cell.collapsed = start_accs[mi] < collapse_threshold;
                const std::uint64_t heal_seed = derive_seed(cfg.seed, {0x4ea1, si, mi, epochs});
                std::vector<RunRecord> recs(configs.size());
                parallel_for(configs.size(), [&](std::size_t ci) {
                    const std::string& name = configs[ci];
                    recs[ci] = detail::run_cell(
                        make_record("heal", method, scenario + "/" + name + "/e" + std::to_string(epochs),
                                    std::nullopt, 0, heal_seed),
                        [&](RunRecord& r) {
                            const auto& rep = replacements.at(name);
                            require(rep.has_value(), "no replacements for " + name);
                            HealConfig hc;
                            hc.mode = name == "remain_only" ? HealMode::RemainOnly
                                      : name == "random"    ? HealMode::RemainPlusRandom
                                                            : HealMode::RemainPlusTwins;
                            hc.epochs = epochs;
                            hc.train_cfg.batch_size = cfg.train.batch_size;
                            hc.train_cfg.seed = heal_seed;
                            const auto healed = heal(*starts[mi], d_r, *rep, hc, ids);
                            r.accuracy = accuracy(healed.state, data.test);
                            r.extra = {{"config", name},
                                       {"epochs", epochs},
                                       {"start_acc", start_accs[mi]},
                                       {"train_size", healed.train_size},
                                       {"replacements", rep->size()}};
                            store.model(r, healed.state);
                        });
                });
                for (std::size_t ci = 0; ci < configs.size(); ++ci) {
                    const auto& r = recs[ci];
                    if (!r.ok()) {
                        report.warnings.push_back("heal/" + r.scenario + " from " + method + " failed: " + r.error);
                        continue;
                    }
                    const double acc = *r.accuracy;
                    const std::string& name = configs[ci];
                    if (name == "random") {
                        cell.random_acc = acc;
                        continue;
                    }
                    if (name == "remain_only") {
                        cell.remain_only_acc = acc;
                    } else if (!cell.twin_best_acc || acc > *cell.twin_best_acc) {
                        cell.twin_best_acc = acc;
                        cell.twin_best_config = name;
                    }
                    if (!cell.best_acc || acc > *cell.best_acc) {
                        cell.best_acc = acc;
                        cell.best_config = name;
                    }
                    if (!cell.worst_acc || acc < *cell.worst_acc) {
                        cell.worst_acc = acc;
                        cell.worst_config = name;
                    }
                }
                if (cell.best_acc && gold_acc) {
                    cell.delta_pp = (*cell.best_acc - *gold_acc) * 100.0;
                }
                for (auto& r : recs) {
                    report.records.push_back(std::move(r));
                }
                report.healing.push_back(std::move(cell));
            }
        }
    }
    return report;
}

inline nlohmann::json to_json(const RunRecord& r) {
    return {{"stage", r.stage},
            {"method", r.method},
            {"scenario", r.scenario},
            {"fraction", detail::opt(r.fraction)},
            {"rep", r.rep},
            {"seed", r.seed},
            {"accuracy", detail::opt(r.accuracy)},
            {"wall_time_s", r.wall_time_s},
            {"status", r.status},
            {"error", r.error},
            {"checkpoint", r.checkpoint},
            {"checkpoint_digest", r.checkpoint_digest},
            {"extra", r.extra}};
}

inline RunRecord record_from_json(const nlohmann::json& j) {
    RunRecord r;
    r.stage = j.at("stage").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.scenario = j.at("scenario").get<std::string>();
    r.fraction = detail::opt_double(j, "fraction");
    r.rep = j.at("rep").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.accuracy = detail::opt_double(j, "accuracy");
    r.wall_time_s = j.at("wall_time_s").get<double>();
    r.status = j.at("status").get<std::string>();
    r.error = j.value("error", "");
    r.checkpoint = j.value("checkpoint", "");
    r.checkpoint_digest = j.value("checkpoint_digest", "");
    r.extra = j.value("extra", nlohmann::json::object());
    return r;
}

inline nlohmann::json to_json(const SummaryRow& s) {
    return {{"stage", s.stage},
            {"method", s.method},
            {"scenario", s.scenario},
            {"fraction", detail::opt(s.fraction)},
            {"runs", s.runs},
            {"failed", s.failed},
            {"mean_acc", s.mean_acc},
            {"std_acc", s.std_acc},
            {"mean_time_s", s.mean_time_s},
            {"representative_rep",
             s.representative_rep ? nlohmann::json(*s.representative_rep) : nlohmann::json(nullptr)}};
}

inline nlohmann::json to_json(const HealingCell& c) {
    return {{"scenario", c.scenario},
            {"start_method", c.start_method},
            {"epochs", c.epochs},
            {"start_acc", c.start_acc},
            {"gold_acc", c.gold_acc},
            {"collapsed", c.collapsed},
            {"best_acc", detail::opt(c.best_acc)},
            {"best_config", c.best_config},
            {"worst_acc", detail::opt(c.worst_acc)},
            {"worst_config", c.worst_config},
            {"delta_pp_best_gold", detail::opt(c.delta_pp)},
            {"twin_best_acc", detail::opt(c.twin_best_acc)},
            {"twin_best_config", c.twin_best_config},
            {"remain_only_acc", detail::opt(c.remain_only_acc)},
            {"random_acc", detail::opt(c.random_acc)}};
}

inline HealingCell healing_cell_from_json(const nlohmann::json& j) {
    HealingCell c;
    c.scenario = j.at("scenario").get<std::string>();
    c.start_method = j.at("start_method").get<std::string>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.start_acc = j.at("start_acc").get<double>();
    c.gold_acc = j.at("gold_acc").is_null() ? std::nan("") : j.at("gold_acc").get<double>();
    c.collapsed = j.at("collapsed").get<bool>();
    c.best_acc = detail::opt_double(j, "best_acc");
    c.best_config = j.at("best_config").get<std::string>();
    c.worst_acc = detail::opt_double(j, "worst_acc");
    c.worst_config = j.at("worst_config").get<std::string>();
    c.delta_pp = detail::opt_double(j, "delta_pp_best_gold");
    c.twin_best_acc = detail::opt_double(j, "twin_best_acc");
    c.twin_best_config = j.at("twin_best_config").get<std::string>();
    c.remain_only_acc = detail::opt_double(j, "remain_only_acc");
    c.random_acc = detail::opt_double(j, "random_acc");
    return c;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& rec : r.records) {
        records.push_back(to_json(rec));
    }
    nlohmann::json summary = nlohmann::json::array();
    for (const auto& row : summarize(r.records)) {
        summary.push_back(to_json(row));
    }
    nlohmann::json healing = nlohmann::json::array();
    for (const auto& c : r.healing) {
        healing.push_back(to_json(c));
    }
    nlohmann::json twins = nlohmann::json::array();
    for (const auto& t : r.twins) {
        nlohmann::json skipped = nlohmann::json::array();
        for (SampleId id : t.skipped) {
            skipped.push_back(to_hex(id));
        }
        twins.push_back({{"scenario", t.scenario},
                         {"metric", t.metric},
                         {"delta", t.delta},
                         {"matched", t.matched},
                         {"skipped", skipped},
                         {"file", t.file},
                         {"error", t.error}});
    }
    return {{"schema", 1},
            {"kind", r.kind},
            {"seed", r.seed},
            {"config_file", r.config_file},
            {"config_digest", r.config_digest},
            {"records", records},
            {"summary", summary},
            {"healing", healing},
            {"twins", twins},
            {"warnings", r.warnings}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    if (j.value("schema", 0) != 1) {
        throw Error(ErrorCode::Parse, "report: unsupported schema");
    }
    MetricsReport r;
    r.kind = j.at("kind").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_file = j.at("config_file").get<std::string>();
    r.config_digest = j.at("config_digest").get<std::string>();
    for (const auto& rec : j.at("records")) {
        r.records.push_back(record_from_json(rec));
    }
    for (const auto& c : j.at("healing")) {
        r.healing.push_back(healing_cell_from_json(c));
    }
    for (const auto& t : j.at("twins")) {
        TwinSearch ts;
        ts.scenario = t.at("scenario").get<std::string>();
        ts.metric = t.at("metric").get<std::string>();
        ts.delta = t.at("delta").get<double>();
        ts.matched = t.at("matched").get<std::size_t>();
        for (const auto& id : t.at("skipped")) {
            ts.skipped.push_back(std::stoull(id.get<std::string>(), nullptr, 16));
        }
        ts.file = t.at("file").get<std::string>();
        ts.error = t.at("error").get<std::string>();
        r.twins.push_back(std::move(ts));
    }
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    return r;
}

inline MetricsReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot read " + path.string());
    }
    try {
        return report_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Parse, path.string() + ": " + e.what());
    }
}

inline constexpr const char* summary_header = "stage,method,scenario,mean_acc,std_acc,mean_time_s";
inline constexpr const char* curves_header = "method,fraction,mean_acc,std_acc,mean_time_s";

/// Writes report.json, summary.csv and curves.csv into dir.
inline void write_report(const MetricsReport& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream out(dir / name);
        if (!out) {
            throw Error(ErrorCode::Io, "cannot write " + (dir / name).string());
        }
        return out;
    };
    {
        auto out = open("report.json");
        out << to_json(r).dump(2) << '\n';
    }
    const auto rows = summarize(r.records);
    char buf[128];
    {
        auto out = open("summary.csv");
        out << summary_header << '\n';
        for (const auto& row : rows) {
            std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.3f", row.mean_acc, row.std_acc, row.mean_time_s);
            out << row.stage << ',' << row.method << ',' << row.scenario << ',' << buf << '\n';
        }
    }
    {
        auto out = open("curves.csv");
        out << curves_header << '\n';
        for (const auto& row : rows) {
            if (row.stage != "unlearn" || !row.fraction) {
                continue;
            }
            std::snprintf(buf, sizeof buf, "%.4f,%.6f,%.6f,%.3f", *row.fraction, row.mean_acc, row.std_acc,
                          row.mean_time_s);
            out << row.method << ',' << buf << '\n';
        }
    }
}

/// Human-readable table of a healing report's cells.
inline void print_healing_table(const MetricsReport& r, std::ostream& out) {
    char buf[256];
    out << "scenario        start      epochs  start   gold    best (config)                     worst   dpp\n";
    for (const auto& c : r.healing) {
        std::snprintf(buf, sizeof buf, "%-15s %-10s %6zu  %.4f  %.4f  %.4f %-26s %.4f  %+.2f\n", c.scenario.c_str(),
                      c.start_method.c_str(), c.epochs, c.start_acc, c.gold_acc, c.best_acc.value_or(std::nan("")),
                      ("(" + c.best_config + ")").c_str(), c.worst_acc.value_or(std::nan("")),
                      c.delta_pp.value_or(std::nan("")));
        out << buf;
    }
}

inline void print_summary_table(const MetricsReport& r, std::ostream& out) {
    char buf[256];
    for (const auto& row : summarize(r.records)) {
        std::snprintf(buf, sizeof buf, "%-9s %-10s %-44s n=%-2zu acc %.4f +- %.4f  %.3fs\n", row.stage.c_str(),
                      row.method.c_str(), row.scenario.c_str(), row.runs, row.mean_acc, row.std_acc, row.mean_time_s);
        out << buf;
    }
}

} // namespace ulab

#endif
