#ifndef ULAB_EXACT_UNLEARN_HPP
#define ULAB_EXACT_UNLEARN_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ulab/dataset.hpp"
#include "ulab/error.hpp"
#include "ulab/hash.hpp"
#include "ulab/model.hpp"
#include "ulab/parallel.hpp"
#include "ulab/rng.hpp"

namespace ulab {

/// Naive exact unlearning: a fresh model trained on D_r for the full epoch budget.
inline ModelState train_gold(const Dataset& d_r, const Architecture& arch, const TrainConfig& cfg) {
    require(!d_r.empty(), "train_gold: empty retained set");
    const std::uint64_t seed = derive_seed(cfg.seed, {0x901d});
    return train(init(arch, seed), d_r, cfg);
}

struct SisaConfig {
    std::size_t num_shards = 3;
    std::size_t num_slices = 5;
    Architecture arch;
    TrainConfig train_cfg;
    std::uint64_t seed = 0;
    // Checkpoints beyond this many are written under spill_dir and read back on demand.
    std::size_t memory_checkpoint_cap = std::numeric_limits<std::size_t>::max();
    std::filesystem::path spill_dir;

    void validate() const {
        require(num_shards >= 1, "sisa: num_shards must be >= 1");
        require(num_slices >= 1, "sisa: num_slices must be >= 1");
        arch.validate();
        train_cfg.validate();
    }

    std::size_t epochs_per_slice() const {
        return (train_cfg.epochs + num_slices - 1) / num_slices;
    }
};

/// A slice checkpoint, held in memory or as a file on disk.
class Checkpoint {
public:
    Checkpoint() = default;
    explicit Checkpoint(ModelState state) : state_(std::make_shared<const ModelState>(std::move(state))) {}
    Checkpoint(std::filesystem::path path, std::uint64_t digest) : path_(std::move(path)), digest_(digest) {}

    bool in_memory() const { return state_ != nullptr; }
    const std::filesystem::path& path() const { return path_; }

    ModelState load() const {
        if (state_) {
            return *state_;
        }
        ModelState m = load_checkpoint(path_);
        if (digest_of(m) != digest_) {
            throw Error(ErrorCode::Parse, "spilled checkpoint " + path_.string() + " does not match its digest");
        }
        return m;
    }

private:
    std::shared_ptr<const ModelState> state_;
    std::filesystem::path path_;
    std::uint64_t digest_ = 0;
};

struct SlotAssignment {
    std::size_t shard = 0;
    std::size_t slice = 0;
};

/// k shard models, the k x s slice checkpoints behind them, and the map from
/// sample id to (shard, slice). `data` holds the samples still assigned.
struct SisaEnsemble {
    SisaConfig config;
    Dataset data;
    std::vector<ModelState> shard_models;
    std::vector<std::vector<Checkpoint>> slice_checkpoints;
    std::vector<std::vector<std::vector<SampleId>>> members; // [shard][slice] -> ids
    std::unordered_map<SampleId, SlotAssignment> assignment;
    std::vector<bool> empty_shard;

    std::size_t num_shards() const { return shard_models.size(); }

    std::size_t shard_size(std::size_t shard) const {
        std::size_t n = 0;
        for (const auto& slice : members[shard]) {
            n += slice.size();
        }
        return n;
    }
};

struct SisaUnlearnReport {
    std::vector<std::size_t> retrained_shards;
    std::map<std::size_t, std::size_t> first_affected_slice;
};

namespace detail {

inline std::uint64_t shard_seed(const SisaConfig& cfg, std::size_t shard) { return derive_seed(cfg.seed, {0x5a4d, shard}); }

inline TrainConfig slice_train_cfg(const SisaConfig& cfg, std::size_t shard, std::size_t slice) {
    TrainConfig t = cfg.train_cfg;
    t.epochs = cfg.epochs_per_slice();
    t.seed = derive_seed(cfg.seed, {0x511ce, shard, slice});
    return t;
}

/// Trains slices [from, s) of one shard starting at `state`; slice j trains on
/// the union of slices 0..j. Returns one state per trained slice.
inline std::vector<ModelState> train_shard_slices(const SisaConfig& cfg, const Dataset& data,
                                                  const std::vector<std::vector<SampleId>>& slices,
                                                  std::size_t shard, std::size_t from, ModelState state) {
    std::vector<ModelState> out;
    std::vector<std::size_t> cumulative;
    for (std::size_t j = 0; j < from; ++j) {
        for (SampleId id : slices[j]) {
            cumulative.push_back(*data.index_of(id));
        }
    }
    for (std::size_t j = from; j < slices.size(); ++j) {
        for (SampleId id : slices[j]) {
            cumulative.push_back(*data.index_of(id));
        }
        if (!cumulative.empty()) {
            state = train(state, data.subset(cumulative), slice_train_cfg(cfg, shard, j));
        }
        out.push_back(state);
    }
    return out;
}

inline void store_checkpoints(SisaEnsemble& e) {
    const std::size_t total = e.num_shards() * e.config.num_slices;
    const bool spill = total > e.config.memory_checkpoint_cap && !e.config.spill_dir.empty();
    for (std::size_t i = 0; i < e.num_shards(); ++i) {
        for (std::size_t j = 0; j < e.config.num_slices; ++j) {
            Checkpoint& c = e.slice_checkpoints[i][j];
            if (spill && c.in_memory()) {
                const auto path = e.config.spill_dir / ("shard_" + std::to_string(i)) / ("slice_" + std::to_string(j) + ".ulck");
                const ModelState m = c.load();
                const auto digest = save_checkpoint(m, path);
                c = Checkpoint(path, digest);
            }
        }
    }
}

} // namespace detail

/// Sharded, sliced training. A seeded permutation of the data is dealt
/// round-robin to shards, then each shard's members round-robin to slices.
/// Slice j of a shard trains ceil(N / s) epochs on slices 0..j, continuing
/// from checkpoint j - 1.
inline SisaEnsemble sisa_train(const Dataset& d, const SisaConfig& cfg) {
    cfg.validate();
    require(d.size() >= cfg.num_shards, "sisa_train: dataset has " + std::to_string(d.size()) +
                                            " samples, fewer than " + std::to_string(cfg.num_shards) + " shards");
    require(d.feature_dim() == cfg.arch.feature_dim, "sisa_train: dataset feature_dim does not match architecture");
    SisaEnsemble e;
    e.config = cfg;
    e.data = d;
    const std::size_t k = cfg.num_shards, s = cfg.num_slices;

    std::vector<std::size_t> perm(d.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(cfg.seed, {0xa551}));
    std::shuffle(perm.begin(), perm.end(), rng);

    e.members.assign(k, std::vector<std::vector<SampleId>>(s));
    std::vector<std::size_t> fill(k, 0);
    for (std::size_t p = 0; p < perm.size(); ++p) {
        const std::size_t shard = p % k;
        const std::size_t slice = fill[shard]++ % s;
        const SampleId id = d[perm[p]].id;
        e.members[shard][slice].push_back(id);
        e.assignment[id] = {shard, slice};
    }

    e.shard_models.resize(k);
    e.slice_checkpoints.assign(k, std::vector<Checkpoint>(s));
    e.empty_shard.assign(k, false);
    parallel_for(k, [&](std::size_t i) {
        auto states = detail::train_shard_slices(cfg, d, e.members[i], i, 0, init(cfg.arch, detail::shard_seed(cfg, i)));
        for (std::size_t j = 0; j < s; ++j) {
            e.slice_checkpoints[i][j] = Checkpoint(states[j]);
        }
        e.shard_models[i] = states.back();
    });
    detail::store_checkpoints(e);
    return e;
}

/// Majority vote over the non-empty shards; ties go to the lowest class.
inline int sisa_predict(const SisaEnsemble& e, const Sample& sample) {
    std::vector<std::size_t> votes(e.config.arch.num_classes, 0);
    bool any = false;
    for (std::size_t i = 0; i < e.num_shards(); ++i) {
        if (e.empty_shard[i]) {
            continue;
        }
        any = true;
        ++votes[static_cast<std::size_t>(predict(e.shard_models[i], sample).label)];
    }
    if (!any) {
        throw Error(ErrorCode::NoVoters, "every shard of the ensemble is empty");
    }
    return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

/// Mode of a vote list, lowest class on ties. Exposed for direct testing of
/// the aggregation rule.
inline int majority_vote(std::span<const int> votes, std::size_t num_classes) {
    if (votes.empty()) {
        throw Error(ErrorCode::NoVoters, "no votes to aggregate");
    }
    std::vector<std::size_t> counts(num_classes, 0);
    for (int v : votes) {
        require(v >= 0 && static_cast<std::size_t>(v) < num_classes, "vote outside class range");
        ++counts[static_cast<std::size_t>(v)];
    }
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

inline double sisa_accuracy(const SisaEnsemble& e, const Dataset& d) {
    require(!d.empty(), "sisa_accuracy: empty dataset");
    std::vector<std::vector<int>> shard_labels;
    for (std::size_t i = 0; i < e.num_shards(); ++i) {
        if (!e.empty_shard[i]) {
            shard_labels.push_back(predict_labels(e.shard_models[i], d));
        }
    }
    if (shard_labels.empty()) {
        throw Error(ErrorCode::NoVoters, "every shard of the ensemble is empty");
    }
    std::size_t correct = 0;
    std::vector<int> votes(shard_labels.size());
    for (std::size_t n = 0; n < d.size(); ++n) {
        for (std::size_t v = 0; v < shard_labels.size(); ++v) {
            votes[v] = shard_labels[v][n];
        }
        correct += majority_vote(votes, e.config.arch.num_classes) == d[n].label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(d.size());
}

/// Exact unlearning by partial retraining. Each affected shard restarts from
/// the checkpoint preceding its earliest affected slice and retrains the later
/// slices without the deleted ids. Unaffected shards are untouched; a shard
/// left without data is flagged empty and abstains from voting.
inline std::pair<SisaEnsemble, SisaUnlearnReport> sisa_unlearn(const SisaEnsemble& e, std::span<const SampleId> ids) {
    for (SampleId id : ids) {
        if (!e.assignment.contains(id)) {
            throw Error(ErrorCode::MembershipViolation, "id " + to_hex(id) + " is not assigned in the ensemble", id);
        }
    }
    SisaUnlearnReport report;
    SisaEnsemble out = e;
    if (ids.empty()) {
        return {std::move(out), report};
    }
    out.data = remove_by_ids(e.data, ids);

    std::unordered_set<SampleId> drop(ids.begin(), ids.end());
    for (SampleId id : ids) {
        const auto slot = e.assignment.at(id);
        auto [it, inserted] = report.first_affected_slice.emplace(slot.shard, slot.slice);
        if (!inserted) {
            it->second = std::min(it->second, slot.slice);
        }
        out.assignment.erase(id);
    }
    for (auto [shard, _] : report.first_affected_slice) {
        for (auto& slice : out.members[shard]) {
            std::erase_if(slice, [&](SampleId id) { return drop.contains(id); });
        }
        report.retrained_shards.push_back(shard);
    }

    const auto& affected = report.retrained_shards;
    for (std::size_t i : affected) {
        if (out.shard_size(i) == 0) {
            out.empty_shard[i] = true;
        }
    }
    parallel_for(affected.size(), [&](std::size_t a) {
        const std::size_t i = affected[a];
        const std::size_t from = report.first_affected_slice.at(i);
        if (out.empty_shard[i]) {
            out.shard_models[i] = init(e.config.arch, detail::shard_seed(e.config, i));
            for (std::size_t j = 0; j < e.config.num_slices; ++j) {
                out.slice_checkpoints[i][j] = Checkpoint(out.shard_models[i]);
            }
            return;
        }
        ModelState start = from == 0 ? init(e.config.arch, detail::shard_seed(e.config, i))
                                     : e.slice_checkpoints[i][from - 1].load();
        auto states = detail::train_shard_slices(e.config, out.data, out.members[i], i, from, std::move(start));
        for (std::size_t j = from; j < e.config.num_slices; ++j) {
            out.slice_checkpoints[i][j] = Checkpoint(states[j - from]);
        }
        out.shard_models[i] = states.back();
    });
    detail::store_checkpoints(out);
    return {std::move(out), report};
}

/// Directory layout: shard_<i>/slice_<j>.ulck, data.csv (current members) and
/// manifest.json with the configuration, assignment map, empty-shard flags
/// and the FNV-1a digest of every file. Returns the manifest digest.
inline std::uint64_t save_ensemble(const SisaEnsemble& e, const std::filesystem::path& dir) {
    using nlohmann::json;
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["schema"] = 1;
    manifest["num_shards"] = e.config.num_shards;
    manifest["num_slices"] = e.config.num_slices;
    manifest["seed"] = e.config.seed;
    manifest["arch"] = {{"kind", e.config.arch.kind == ModelKind::Logistic ? "logistic" : "mlp"},
                        {"feature_dim", e.config.arch.feature_dim},
                        {"num_classes", e.config.arch.num_classes},
                        {"hidden_dim", e.config.arch.hidden_dim},
                        {"activation", e.config.arch.activation == Activation::ReLU ? "relu" : "tanh"},
                        {"l2", e.config.arch.l2}};
    manifest["train"] = {{"epochs", e.config.train_cfg.epochs},
                         {"learning_rate", e.config.train_cfg.learning_rate},
                         {"batch_size", e.config.train_cfg.batch_size},
                         {"optimizer", e.config.train_cfg.optimizer == Optimizer::Adam ? "adam" : "sgd"},
                         {"seed", e.config.train_cfg.seed}};
    json assignment = json::array();
    for (std::size_t i = 0; i < e.num_shards(); ++i) {
        for (std::size_t j = 0; j < e.config.num_slices; ++j) {
            for (SampleId id : e.members[i][j]) {
                assignment.push_back({{"id", to_hex(id)}, {"shard", i}, {"slice", j}});
            }
        }
    }
    manifest["assignment"] = std::move(assignment);
    manifest["empty_shards"] = e.empty_shard;
    json files = json::array();
    for (std::size_t i = 0; i < e.num_shards(); ++i) {
        for (std::size_t j = 0; j < e.config.num_slices; ++j) {
            const auto rel = std::filesystem::path("shard_" + std::to_string(i)) / ("slice_" + std::to_string(j) + ".ulck");
            const auto digest = save_checkpoint(e.slice_checkpoints[i][j].load(), dir / rel);
            files.push_back({{"shard", i}, {"slice", j}, {"file", rel.generic_string()}, {"digest", to_hex(digest)}});
        }
    }
    manifest["checkpoints"] = std::move(files);
    save_csv(e.data, (dir / "data.csv").string());
    const auto data_bytes = detail::read_file_bytes((dir / "data.csv").string());
    Fnv1a data_hash;
    data_hash.update(data_bytes);
    manifest["data"] = {{"file", "data.csv"}, {"digest", to_hex(data_hash.digest())}, {"num_classes", e.data.num_classes()}};

    const std::string text = manifest.dump(2);
    std::ofstream out(dir / "manifest.json");
    out << text << '\n';
    if (!out) {
        throw Error(ErrorCode::Io, "cannot write " + (dir / "manifest.json").string());
    }
    return fnv1a(text + "\n");
}

/// Reloads a saved ensemble, verifying every digest recorded in the manifest.
inline SisaEnsemble load_ensemble(const std::filesystem::path& dir, const TrainConfig* train_override = nullptr) {
    using nlohmann::json;
    std::ifstream in(dir / "manifest.json");
    if (!in) {
        throw Error(ErrorCode::Io, "cannot open " + (dir / "manifest.json").string());
    }
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& ex) {
        throw Error(ErrorCode::Parse, "manifest.json: " + std::string(ex.what()));
    }
    SisaEnsemble e;
    e.config.num_shards = manifest.at("num_shards").get<std::size_t>();
    e.config.num_slices = manifest.at("num_slices").get<std::size_t>();
    e.config.seed = manifest.at("seed").get<std::uint64_t>();
    const auto& a = manifest.at("arch");
    e.config.arch.kind = a.at("kind") == "logistic" ? ModelKind::Logistic : ModelKind::Mlp;
    e.config.arch.feature_dim = a.at("feature_dim");
    e.config.arch.num_classes = a.at("num_classes");
    e.config.arch.hidden_dim = a.at("hidden_dim");
    e.config.arch.activation = a.at("activation") == "relu" ? Activation::ReLU : Activation::Tanh;
    e.config.arch.l2 = a.at("l2");
    const auto& t = manifest.at("train");
    e.config.train_cfg.epochs = t.at("epochs");
    e.config.train_cfg.learning_rate = t.at("learning_rate");
    e.config.train_cfg.batch_size = t.at("batch_size");
    e.config.train_cfg.optimizer = t.at("optimizer") == "adam" ? Optimizer::Adam : Optimizer::Sgd;
    e.config.train_cfg.seed = t.at("seed");
    if (train_override) {
        e.config.train_cfg = *train_override;
    }

    const auto& data_meta = manifest.at("data");
    const auto data_path = dir / data_meta.at("file").get<std::string>();
    Fnv1a data_hash;
    data_hash.update(detail::read_file_bytes(data_path.string()));
    if (to_hex(data_hash.digest()) != data_meta.at("digest").get<std::string>()) {
        throw Error(ErrorCode::Parse, data_path.string() + " does not match the manifest digest");
    }
    e.data = load_csv(data_path.string(), "label", data_meta.at("num_classes").get<std::size_t>());

    const std::size_t k = e.config.num_shards, s = e.config.num_slices;
    e.members.assign(k, std::vector<std::vector<SampleId>>(s));
    for (const auto& entry : manifest.at("assignment")) {
        const SampleId id = std::stoull(entry.at("id").get<std::string>(), nullptr, 16);
        const std::size_t i = entry.at("shard"), j = entry.at("slice");
        require(i < k && j < s, "manifest assignment out of range");
        e.members[i][j].push_back(id);
        e.assignment[id] = {i, j};
    }
    e.empty_shard = manifest.at("empty_shards").get<std::vector<bool>>();
    e.slice_checkpoints.assign(k, std::vector<Checkpoint>(s));
    for (const auto& entry : manifest.at("checkpoints")) {
        const std::size_t i = entry.at("shard"), j = entry.at("slice");
        const auto path = dir / entry.at("file").get<std::string>();
        ModelState m = load_checkpoint(path);
        if (to_hex(digest_of(m)) != entry.at("digest").get<std::string>()) {
            throw Error(ErrorCode::Parse, path.string() + " does not match the manifest digest");
        }
        e.slice_checkpoints[i][j] = Checkpoint(std::move(m));
    }
    e.shard_models.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        e.shard_models[i] = e.slice_checkpoints[i][s - 1].load();
    }
    return e;
}

} // namespace ulab

#endif
