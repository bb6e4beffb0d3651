#ifndef ULAB_ADVERSARY_HPP
#define ULAB_ADVERSARY_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "ulab/approx_unlearn.hpp"
#include "ulab/dataset.hpp"
#include "ulab/error.hpp"
#include "ulab/hash.hpp"
#include "ulab/model.hpp"
#include "ulab/parallel.hpp"
#include "ulab/rng.hpp"

namespace ulab {

enum class Knowledge { Blind, OutputAware, ParameterAware };

inline const char* to_string(Knowledge k) {
    switch (k) {
    case Knowledge::Blind:
        return "blind";
    case Knowledge::OutputAware:
        return "output";
    case Knowledge::ParameterAware:
        return "param";
    }
    return "?";
}

/// Deletion budget as an absolute count or a fraction of the dataset.
struct Budget {
    std::optional<std::size_t> count;
    std::optional<double> fraction;

    static Budget of_count(std::size_t n) { return {n, std::nullopt}; }
    static Budget of_fraction(double f) { return {std::nullopt, f}; }

    std::size_t resolve(std::size_t dataset_size) const {
        require(count.has_value() != fraction.has_value(), "budget: set exactly one of count and fraction");
        if (count) {
            return *count;
        }
        require(*fraction > 0.0 && *fraction <= 1.0, "budget: fraction must lie in (0, 1]");
        return static_cast<std::size_t>(std::llround(*fraction * static_cast<double>(dataset_size)));
    }
};

struct AdversaryConfig {
    Knowledge knowledge = Knowledge::Blind;
    Budget budget = Budget::of_count(25);
    std::optional<int> target_class;
    std::uint64_t seed = 0;
    /// Parameter-aware scoring factors the damped Hessian densely up to this
    /// many parameters and falls back to the iterative solver beyond it.
    std::size_t dense_parameter_limit = 2048;
};

struct RequestList {
    Knowledge knowledge = Knowledge::Blind;
    std::size_t budget = 0;
    std::uint64_t seed = 0;
    std::optional<int> target_class;
    std::vector<SampleId> ids;
    std::vector<double> scores; // parallel to ids; empty for blind requests

    nlohmann::json to_json() const {
        nlohmann::json requests = nlohmann::json::array();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            nlohmann::json r = {{"id", to_hex(ids[i])}};
            if (!scores.empty()) {
                r["score"] = scores[i];
            }
            requests.push_back(std::move(r));
        }
        nlohmann::json j = {{"knowledge", to_string(knowledge)},
                            {"budget", budget},
                            {"seed", seed},
                            {"requests", std::move(requests)}};
        j["target_class"] = target_class ? nlohmann::json(*target_class) : nlohmann::json(nullptr);
        return j;
    }
};

namespace detail {

/// Positions of the samples the adversary may request, and the resolved budget.
inline std::pair<std::vector<std::size_t>, std::size_t> eligible(const Dataset& d, const AdversaryConfig& cfg) {
    const std::size_t budget = cfg.budget.resolve(d.size());
    require(budget > 0, "adversary: budget must be positive");
    require(budget <= d.size(), "adversary: budget " + std::to_string(budget) + " exceeds dataset size " +
                                    std::to_string(d.size()));
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!cfg.target_class || d[i].label == *cfg.target_class) {
            pos.push_back(i);
        }
    }
    if (cfg.target_class) {
        require(*cfg.target_class >= 0 && static_cast<std::size_t>(*cfg.target_class) < d.num_classes(),
                "adversary: target class outside the label range");
        require(budget <= pos.size(), "adversary: budget " + std::to_string(budget) + " exceeds the " +
                                          std::to_string(pos.size()) + " samples of class " +
                                          std::to_string(*cfg.target_class));
    }
    return {pos, budget};
}

/// Top `budget` positions by score; ascending or descending, ties by id.
inline RequestList rank(const Dataset& d, const AdversaryConfig& cfg, std::vector<std::size_t> pos,
                        std::size_t budget, const std::vector<double>& score, bool highest) {
    std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b]) {
            return highest ? score[a] > score[b] : score[a] < score[b];
        }
        return d[a].id < d[b].id;
    });
    RequestList out{cfg.knowledge, budget, cfg.seed, cfg.target_class, {}, {}};
    for (std::size_t i = 0; i < budget; ++i) {
        out.ids.push_back(d[pos[i]].id);
        out.scores.push_back(score[pos[i]]);
    }
    return out;
}

} // namespace detail

/// Seeded uniform sample without replacement, optionally within one class.
inline RequestList requests_blind(const Dataset& d, const AdversaryConfig& cfg) {
    auto [pos, budget] = detail::eligible(d, cfg);
    Rng rng(derive_seed(cfg.seed, {0xb11d}));
    std::shuffle(pos.begin(), pos.end(), rng);
    RequestList out{Knowledge::Blind, budget, cfg.seed, cfg.target_class, {}, {}};
    for (std::size_t i = 0; i < budget; ++i) {
        out.ids.push_back(d[pos[i]].id);
    }
    return out;
}

/// The samples with the lowest true-class logit; ties by id ascending.
inline RequestList requests_output_aware(const Dataset& d, const ModelState& m, const AdversaryConfig& cfg) {
    require(d.feature_dim() == m.arch.feature_dim, "adversary: dataset feature_dim does not match the model");
    auto [pos, budget] = detail::eligible(d, cfg);
    const Matrix z = logits(m, d);
    std::vector<double> score(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        score[i] = z(static_cast<Eigen::Index>(i), d[i].label);
    }
    AdversaryConfig c = cfg;
    c.knowledge = Knowledge::OutputAware;
    return detail::rank(d, c, std::move(pos), budget, score, false);
}

/// Per-sample influence magnitude ||(H + eps I)^-1 grad L(z)|| with H over d.
inline std::vector<double> influence_scores(const Dataset& d, const ModelState& m, const InfluenceConfig& solver,
                                            std::size_t dense_parameter_limit = 2048) {
    solver.validate();
    std::vector<double> score(d.size());
    if (m.arch.parameter_count() <= dense_parameter_limit) {
        const Matrix h = assemble_damped_hessian(m, d, solver.damping);
        const Eigen::LDLT<Matrix> ldlt(h);
        if (ldlt.info() != Eigen::Success) {
            throw Error(ErrorCode::NumericalFailure, "adversary: damped Hessian factorization failed");
        }
        parallel_for(d.size(), [&](std::size_t i) { score[i] = ldlt.solve(sample_grad(m, d[i])).norm(); });
    } else {
        parallel_for(d.size(), [&](std::size_t i) {
            InfluenceConfig c = solver;
            c.seed = derive_seed(solver.seed, {i});
            score[i] = influence_solve(m, d, sample_grad(m, d[i]), c).norm();
        });
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(score[i])) {
            throw Error(ErrorCode::NumericalFailure, "adversary: non-finite influence score", d[i].id);
        }
    }
    return score;
}

/// The samples with the largest influence magnitude; ties by id ascending.
inline RequestList requests_param_aware(const Dataset& d, const ModelState& m, const AdversaryConfig& cfg,
                                        const InfluenceConfig& solver) {
    require(d.feature_dim() == m.arch.feature_dim, "adversary: dataset feature_dim does not match the model");
    auto [pos, budget] = detail::eligible(d, cfg);
    const auto score = influence_scores(d, m, solver, cfg.dense_parameter_limit);
    AdversaryConfig c = cfg;
    c.knowledge = Knowledge::ParameterAware;
    return detail::rank(d, c, std::move(pos), budget, score, true);
}

/// Dispatches on cfg.knowledge, checking that the needed access is granted.
inline RequestList generate_requests(const Dataset& d, const AdversaryConfig& cfg, const ModelState* m = nullptr,
                                     const InfluenceConfig& solver = {}) {
    switch (cfg.knowledge) {
    case Knowledge::Blind:
        return requests_blind(d, cfg);
    case Knowledge::OutputAware:
        require(m != nullptr, "adversary: output-aware requests need prediction access");
        return requests_output_aware(d, *m, cfg);
    case Knowledge::ParameterAware:
        require(m != nullptr, "adversary: parameter-aware requests need model access");
        return requests_param_aware(d, *m, cfg, solver);
    }
    throw Error(ErrorCode::InvalidArgument, "adversary: unknown knowledge level");
}

} // namespace ulab

#endif
