#ifndef ULAB_SIMILARITY_HEALING_HPP
#define ULAB_SIMILARITY_HEALING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
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

enum class Space { Raw, Feature };
enum class MetricKind { L2, Cosine, Mahalanobis };

struct MetricSpec {
    Space space = Space::Raw;
    MetricKind kind = MetricKind::L2;
    double shrinkage = 0.1; // Mahalanobis only

    static MetricSpec raw_l2() { return {Space::Raw, MetricKind::L2, 0.1}; }
    static MetricSpec raw_mahalanobis(double lambda = 0.1) { return {Space::Raw, MetricKind::Mahalanobis, lambda}; }
    static MetricSpec feature_cosine() { return {Space::Feature, MetricKind::Cosine, 0.1}; }
    static MetricSpec feature_mahalanobis(double lambda = 0.1) {
        return {Space::Feature, MetricKind::Mahalanobis, lambda};
    }

    void validate() const {
        require(kind != MetricKind::Cosine || space == Space::Feature, "metric: cosine is defined in feature space");
        require(shrinkage >= 0.0 && shrinkage <= 1.0, "metric: shrinkage must lie in [0, 1]");
    }

    std::string name() const {
        const std::string prefix = space == Space::Raw ? "raw_" : "feature_";
        switch (kind) {
        case MetricKind::L2:
            return prefix + "l2";
        case MetricKind::Cosine:
            return prefix + "cosine";
        case MetricKind::Mahalanobis:
            return prefix + "mahalanobis";
        }
        return prefix;
    }
};

/// The four twin metrics used by the healing protocol.
inline std::vector<MetricSpec> twin_metric_variants() {
    return {MetricSpec::raw_l2(), MetricSpec::raw_mahalanobis(), MetricSpec::feature_cosine(),
            MetricSpec::feature_mahalanobis()};
}

/// Raw features or model embedding of a sample.
inline Vector represent(const Sample& s, Space space, const ModelState* m) {
    if (space == Space::Raw) {
        return s.features;
    }
    require(m != nullptr, "metric: feature space needs a model");
    return embed(*m, s);
}

/// Unbiased sample covariance of raw features or embeddings.
inline Matrix fit_covariance(const Dataset& d, Space space, const ModelState* m = nullptr) {
    require(d.size() >= 2, "fit_covariance: need at least 2 samples");
    std::vector<Vector> rows(d.size());
    parallel_for(d.size(), [&](std::size_t i) { rows[i] = represent(d[i], space, m); });
    const Eigen::Index dim = rows.front().size();
    Matrix x(static_cast<Eigen::Index>(rows.size()), dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        x.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    }
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    Matrix cov = (x.transpose() * x) / static_cast<double>(rows.size() - 1);
    return (cov + cov.transpose()) / 2.0;
}

/// (1 - lambda) S + lambda * tr(S) / d * I. A zero-trace S shrinks towards lambda * I.
inline Matrix shrink_covariance(const Matrix& cov, double lambda) {
    require(cov.rows() == cov.cols() && cov.rows() > 0, "shrink_covariance: square matrix required");
    const double d = static_cast<double>(cov.rows());
    const double trace = cov.trace();
    const double target = trace > 0.0 ? trace / d : 1.0;
    Matrix out = (1.0 - lambda) * cov;
    out.diagonal().array() += lambda * target;
    return out;
}

/// A metric ready for evaluation: the model for feature space and the
/// Cholesky factor of the shrunk covariance for Mahalanobis.
class Metric {
public:
    Metric(MetricSpec spec, const ModelState* model = nullptr, const Matrix* covariance = nullptr)
        : spec_(spec) {
        spec_.validate();
        if (spec_.space == Space::Feature) {
            require(model != nullptr, "metric " + spec_.name() + " needs a model");
            model_ = *model;
        }
        if (spec_.kind == MetricKind::Mahalanobis) {
            require(covariance != nullptr, "metric " + spec_.name() + " needs a fitted covariance");
            const Matrix shrunk = shrink_covariance(*covariance, spec_.shrinkage);
            Eigen::LLT<Matrix> llt(shrunk);
            const double scale = std::max(1.0, shrunk.diagonal().cwiseAbs().maxCoeff());
            if (llt.info() != Eigen::Success || !shrunk.allFinite() ||
                llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 1e-12 * std::sqrt(scale)) {
                throw Error(ErrorCode::Covariance, "metric " + spec_.name() + ": covariance is singular after shrinkage");
            }
            chol_ = llt.matrixL();
        }
    }

    /// Fits the covariance over d_r when the metric needs one.
    static Metric fit(MetricSpec spec, const Dataset& d_r, const ModelState* model = nullptr) {
        if (spec.kind != MetricKind::Mahalanobis) {
            return Metric(spec, model);
        }
        const Matrix cov = fit_covariance(d_r, spec.space, model);
        return Metric(spec, model, &cov);
    }

    const MetricSpec& spec() const { return spec_; }

    /// Representation in which the metric is a plain comparison: whitened for
    /// Mahalanobis, unit-normalised for cosine.
    Vector prepare(const Sample& s) const {
        Vector u = represent(s, spec_.space, model_ ? &*model_ : nullptr);
        switch (spec_.kind) {
        case MetricKind::L2:
            return u;
        case MetricKind::Mahalanobis:
            return chol_.triangularView<Eigen::Lower>().solve(u);
        case MetricKind::Cosine: {
            const double n = u.norm();
            if (!(n > 0.0) || !std::isfinite(n)) {
                throw Error(ErrorCode::UndefinedSimilarity, "cosine similarity undefined for a zero-norm embedding",
                            s.id);
            }
            return u / n;
        }
        }
        return u;
    }

    double between(const Vector& pu, const Vector& pv) const {
        if (spec_.kind == MetricKind::Cosine) {
            return std::clamp(1.0 - pu.dot(pv), 0.0, 2.0);
        }
        return (pu - pv).norm();
    }

    double operator()(const Sample& a, const Sample& b) const { return between(prepare(a), prepare(b)); }

private:
    MetricSpec spec_;
    std::optional<ModelState> model_;
    Matrix chol_;
};

inline double distance(const Sample& a, const Sample& b, const Metric& metric) { return metric(a, b); }

enum class SpareOrigin { ReservedFromTrain, BackupSplit };

/// Consumable pool of real samples. Selection is linearizable: a spare is
/// handed out at most once even with concurrent callers.
class SpareSet {
public:
    SpareSet() = default;
    SpareSet(std::vector<Sample> pool, SpareOrigin origin) : origin_(origin), pool_(std::move(pool)) {}
    SpareSet(const SpareSet& other) {
        std::lock_guard lock(other.mutex_);
        origin_ = other.origin_;
        pool_ = other.pool_;
        consumed_ = other.consumed_;
    }
    SpareSet& operator=(const SpareSet& other) {
        if (this != &other) {
            std::scoped_lock lock(mutex_, other.mutex_);
            origin_ = other.origin_;
            pool_ = other.pool_;
            consumed_ = other.consumed_;
        }
        return *this;
    }

    SpareOrigin origin() const { return origin_; }
    std::vector<Sample> pool() const {
        std::lock_guard lock(mutex_);
        return pool_;
    }
    std::vector<SampleId> consumed() const {
        std::lock_guard lock(mutex_);
        return consumed_;
    }
    std::size_t pool_size() const {
        std::lock_guard lock(mutex_);
        return pool_.size();
    }
    std::size_t consumed_size() const {
        std::lock_guard lock(mutex_);
        return consumed_.size();
    }

    /// Nearest pool element to z; ties are broken uniformly with rng. The
    /// element is consumed only when its distance is strictly below delta.
    std::optional<Sample> select(const Sample& z, const Metric& metric, double delta, Rng& rng) {
        std::lock_guard lock(mutex_);
        if (pool_.empty()) {
            return std::nullopt;
        }
        const Vector pz = metric.prepare(z);
        double best = std::numeric_limits<double>::infinity();
        std::vector<std::size_t> ties;
        for (std::size_t i = 0; i < pool_.size(); ++i) {
            const double dist = metric.between(metric.prepare(pool_[i]), pz);
            if (dist < best) {
                best = dist;
                ties.assign(1, i);
            } else if (dist == best) {
                ties.push_back(i);
            }
        }
        if (ties.empty() || !(best < delta)) {
            return std::nullopt;
        }
        std::size_t pick = ties.front();
        if (ties.size() > 1) {
            pick = ties[std::uniform_int_distribution<std::size_t>(0, ties.size() - 1)(rng)];
        }
        Sample chosen = pool_[pick];
        pool_.erase(pool_.begin() + static_cast<std::ptrdiff_t>(pick));
        consumed_.push_back(chosen.id);
        return chosen;
    }

    nlohmann::json manifest() const {
        std::lock_guard lock(mutex_);
        nlohmann::json pool = nlohmann::json::array();
        for (const auto& s : pool_) {
            pool.push_back(to_hex(s.id));
        }
        nlohmann::json consumed = nlohmann::json::array();
        for (SampleId id : consumed_) {
            consumed.push_back(to_hex(id));
        }
        return {{"origin", origin_ == SpareOrigin::ReservedFromTrain ? "reserved_from_train" : "backup_split"},
                {"pool", pool},
                {"consumed", consumed}};
    }

private:
    mutable std::mutex mutex_;
    SpareOrigin origin_ = SpareOrigin::ReservedFromTrain;
    std::vector<Sample> pool_;
    std::vector<SampleId> consumed_;
};

inline std::optional<Sample> select_spare(const Sample& z, SpareSet& pool, const Metric& metric, double delta,
                                          std::uint64_t seed) {
    Rng rng(seed);
    return pool.select(z, metric, delta, rng);
}

/// Sets aside k random samples as spares; the rest keep their original order.
inline std::pair<Dataset, SpareSet> reserve_spare(const Dataset& d, std::size_t k, std::uint64_t seed) {
    require(k < d.size(), "reserve_spare: count must be smaller than the dataset");
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {0x5ba4e}));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> spare(d.size(), false);
    for (std::size_t i = 0; i < k; ++i) {
        spare[order[i]] = true;
    }
    std::vector<std::size_t> keep;
    std::vector<Sample> pool;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (spare[i]) {
            pool.push_back(d[i]);
        } else {
            keep.push_back(i);
        }
    }
    return {d.subset(keep), SpareSet(std::move(pool), SpareOrigin::ReservedFromTrain)};
}

/// 10th percentile (linear interpolation) of the distances from a seeded
/// probe, drawn from probes, to every candidate other than itself.
inline double default_delta(const Dataset& probes, const Dataset& candidates, const Metric& metric,
                            std::uint64_t seed, double percentile = 0.10) {
    require(!probes.empty() && !candidates.empty(), "default_delta: probes and candidates must be non-empty");
    Rng rng(derive_seed(seed, {0xde17a}));
    const Sample& probe = probes[std::uniform_int_distribution<std::size_t>(0, probes.size() - 1)(rng)];
    const Vector pp = metric.prepare(probe);
    std::vector<double> dists;
    dists.reserve(candidates.size());
    for (const auto& c : candidates) {
        if (c.id != probe.id) {
            dists.push_back(metric.between(metric.prepare(c), pp));
        }
    }
    require(!dists.empty(), "default_delta: no candidate besides the probe");
    std::sort(dists.begin(), dists.end());
    const double pos = percentile * static_cast<double>(dists.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, dists.size() - 1);
    return dists[lo] + (pos - static_cast<double>(lo)) * (dists[hi] - dists[lo]);
}

struct Twin {
    SampleId id = 0;
    double distance = 0.0;
};

struct TwinIndex {
    std::map<SampleId, std::vector<Twin>> twins; // ascending distance, then id
    double delta = 0.0;
    std::size_t q = 1;
    std::string metric;

    std::vector<SampleId> unmatched() const {
        std::vector<SampleId> out;
        for (const auto& [id, list] : twins) {
            if (list.empty()) {
                out.push_back(id);
            }
        }
        return out;
    }
};

/// For each protected sample, the up-to-q nearest candidates within delta.
inline TwinIndex build_twin_index(const Dataset& protected_set, const Dataset& candidates, const Metric& metric,
                                  double delta, std::size_t q) {
    require(q > 0, "build_twin_index: q must be positive");
    require(delta >= 0.0, "build_twin_index: delta must be non-negative");
    for (const auto& c : candidates) {
        if (protected_set.contains(c.id)) {
            throw Error(ErrorCode::InvalidArgument, "build_twin_index: candidate " + to_hex(c.id) + " is protected",
                        c.id);
        }
    }
    std::vector<Vector> cand(candidates.size());
    parallel_for(candidates.size(), [&](std::size_t i) { cand[i] = metric.prepare(candidates[i]); });
    std::vector<std::vector<Twin>> lists(protected_set.size());
    parallel_for(protected_set.size(), [&](std::size_t i) {
        const Vector p = metric.prepare(protected_set[i]);
        std::vector<Twin> within;
        for (std::size_t j = 0; j < cand.size(); ++j) {
            const double dist = metric.between(cand[j], p);
            if (dist <= delta) {
                within.push_back({candidates[j].id, dist});
            }
        }
        const auto keep = std::min(q, within.size());
        std::partial_sort(within.begin(), within.begin() + static_cast<std::ptrdiff_t>(keep), within.end(),
                          [](const Twin& a, const Twin& b) {
                              return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
                          });
        within.resize(keep);
        lists[i] = std::move(within);
    });
    TwinIndex index;
    index.delta = delta;
    index.q = q;
    index.metric = metric.spec().name();
    for (std::size_t i = 0; i < protected_set.size(); ++i) {
        index.twins.emplace(protected_set[i].id, std::move(lists[i]));
    }
    return index;
}

inline void write_twin_csv(const TwinIndex& index, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error(ErrorCode::Io, "cannot write " + path.string());
    }
    out << "protected_id,rank,surrogate_id,distance,metric,delta\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", index.delta);
    const std::string delta = buf;
    for (const auto& [id, list] : index.twins) {
        for (std::size_t r = 0; r < list.size(); ++r) {
            std::snprintf(buf, sizeof buf, "%.17g", list[r].distance);
            out << to_hex(id) << ',' << r << ',' << to_hex(list[r].id) << ',' << buf << ',' << index.metric << ','
                << delta << '\n';
        }
    }
    if (!out) {
        throw Error(ErrorCode::Io, "cannot write " + path.string());
    }
}

/// One replacement per forgotten sample: its nearest twin not already taken.
/// Forgotten samples without an available twin are reported in skipped.
struct Replacements {
    std::vector<Sample> samples;
    std::vector<SampleId> skipped;
};

inline Replacements twin_replacements(const TwinIndex& index, std::span<const SampleId> forgotten,
                                      const Dataset& candidates) {
    Replacements out;
    std::unordered_set<SampleId> taken;
    for (SampleId id : forgotten) {
        const auto it = index.twins.find(id);
        bool found = false;
        if (it != index.twins.end()) {
            for (const Twin& t : it->second) {
                if (taken.insert(t.id).second) {
                    out.samples.push_back(candidates.at_id(t.id));
                    found = true;
                    break;
                }
            }
        }
        if (!found) {
            out.skipped.push_back(id);
        }
    }
    return out;
}

/// Uniform seeded draw of count candidates without replacement.
inline std::vector<Sample> random_replacements(const Dataset& candidates, std::size_t count, std::uint64_t seed) {
    require(count <= candidates.size(), "random_replacements: count exceeds the candidate pool");
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {0x7a9d}));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(candidates[order[i]]);
    }
    return out;
}

enum class HealMode { RemainOnly, RemainPlusTwins, RemainPlusRandom };

inline const char* to_string(HealMode mode) {
    switch (mode) {
    case HealMode::RemainOnly:
        return "remain_only";
    case HealMode::RemainPlusTwins:
        return "remain_plus_twins";
    case HealMode::RemainPlusRandom:
        return "remain_plus_random";
    }
    return "?";
}

inline TrainConfig default_heal_train_config() {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.optimizer = Optimizer::Adam;
    return cfg;
}

struct HealConfig {
    HealMode mode = HealMode::RemainOnly;
    std::optional<MetricSpec> metric; // the twin metric, for bookkeeping
    std::size_t epochs = 1;
    TrainConfig train_cfg = default_heal_train_config();
};

struct HealResult {
    ModelState state;
    std::size_t train_size = 0;
    bool degenerated = false; // replacements requested but none supplied
};

/// Fine-tunes m on d_r plus replacements. Replacements must be distinct,
/// absent from d_r and never one of the forgotten ids.
inline HealResult heal(const ModelState& m, const Dataset& d_r, std::span<const Sample> replacements,
                       const HealConfig& cfg, std::span<const SampleId> forgotten = {}) {
    HealResult out;
    std::vector<Sample> extra;
    if (cfg.mode != HealMode::RemainOnly) {
        if (replacements.empty()) {
            std::clog << "warning: " << to_string(cfg.mode) << " without replacements, healing on remaining data only\n";
            out.degenerated = true;
        }
        const std::unordered_set<SampleId> banned(forgotten.begin(), forgotten.end());
        std::unordered_set<SampleId> seen;
        for (const auto& s : replacements) {
            if (d_r.contains(s.id) || banned.count(s.id) > 0 || !seen.insert(s.id).second) {
                throw Error(ErrorCode::InvalidReplacement,
                            "replacement " + to_hex(s.id) + " collides with the healing data or a forgotten sample",
                            s.id);
            }
            extra.push_back(s);
        }
    }
    const Dataset data = concat(d_r, Dataset(d_r.num_classes(), d_r.feature_dim(), std::move(extra)));
    for (SampleId id : forgotten) {
        if (data.contains(id)) {
            throw Error(ErrorCode::InvalidReplacement, "healing data contains forgotten sample " + to_hex(id), id);
        }
    }
    out.train_size = data.size();
    if (cfg.epochs == 0) {
        out.state = m;
        return out;
    }
    TrainConfig tc = cfg.train_cfg;
    tc.epochs = cfg.epochs;
    out.state = train(m, data, tc);
    return out;
}

} // namespace ulab

#endif
