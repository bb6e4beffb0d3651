#ifndef ULAB_APPROX_UNLEARN_HPP
#define ULAB_APPROX_UNLEARN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "ulab/dataset.hpp"
#include "ulab/error.hpp"
#include "ulab/model.hpp"
#include "ulab/rng.hpp"

namespace ulab {

/// Symmetric linear map v -> A v.
using LinearOperator = std::function<Vector(const Vector&)>;

enum class FisherMode { NewtonPlusNoise, NoiseOnly };

struct FisherConfig {
    double sigma = 0.0;
    double damping = 1e-6;
    FisherMode mode = FisherMode::NewtonPlusNoise;
    std::optional<double> clip_norm;
    FisherEstimator estimator = FisherEstimator::SampledLabel;
    std::uint64_t seed = 0;

    void validate() const {
        require(sigma >= 0.0 && std::isfinite(sigma), "fisher: sigma must be finite and >= 0");
        require(damping > 0.0, "fisher: damping must be > 0");
        require(!clip_norm || *clip_norm > 0.0, "fisher: clip_norm must be > 0");
    }
};

enum class InfluenceSolver { Lissa, ConjugateGradient };

/// Subtract applies theta' = theta - (H + eps I)^-1 sum grad L(z) over the forget set.
/// Classical applies the Newton step on the retained objective,
/// theta' = theta + (H + eps I)^-1 sum grad L(z) / |D_r|.
enum class InfluenceSign { Subtract, Classical };

struct InfluenceConfig {
    InfluenceSolver solver = InfluenceSolver::Lissa;
    std::size_t lissa_depth = 100;
    double lissa_scale = 10.0;
    bool lissa_exact = false; // full-batch Hessian at every recursion step
    double damping = 0.01;
    std::size_t batch_r = 64;
    std::size_t batch_f = 64;
    std::optional<double> clip_norm;
    double cg_tol = 1e-8;
    std::size_t cg_max_iter = 500;
    InfluenceSign sign = InfluenceSign::Subtract;
    std::uint64_t seed = 0;

    void validate() const {
        require(lissa_depth > 0, "influence: lissa_depth must be > 0");
        require(lissa_scale > 0.0, "influence: lissa_scale must be > 0");
        require(damping >= 0.0, "influence: damping must be >= 0");
        require(batch_r > 0 && batch_f > 0, "influence: batch sizes must be > 0");
        require(!clip_norm || *clip_norm > 0.0, "influence: clip_norm must be > 0");
        require(cg_tol > 0.0 && cg_max_iter > 0, "influence: cg_tol and cg_max_iter must be > 0");
    }
};

/// Result of one parameter update.
struct UpdateOutcome {
    ModelState state;
    double step_norm = 0.0; // norm of the deterministic step after clipping
    bool clipped = false;
};

namespace detail {

inline void check_finite(const Vector& theta, const char* what) {
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        if (!std::isfinite(theta[i])) {
            throw Error(ErrorCode::NumericalFailure,
                        std::string(what) + " produced a non-finite parameter at index " + std::to_string(i),
                        static_cast<std::uint64_t>(i));
        }
    }
}

inline bool clip(Vector& step, const std::optional<double>& bound) {
    if (!bound) {
        return false;
    }
    const double n = step.norm();
    if (n > *bound) {
        step *= *bound / n;
        return true;
    }
    return false;
}

} // namespace detail

/// The diagonal Fisher update on a raw parameter vector:
///   NewtonPlusNoise: theta - (F + eps)^-1 * g + sigma * (F + eps)^(-1/4) * b
///   NoiseOnly:       theta + sigma * (F + eps)^(-1/4) * b
/// with b ~ N(0, I) drawn from noise_seed, all powers elementwise. The Newton
/// part is clipped to cfg.clip_norm before the noise is added.
inline UpdateOutcome apply_fisher_update(const ModelState& m, const Vector& gradient, const Vector& fisher,
                                         const FisherConfig& cfg, std::uint64_t noise_seed) {
    cfg.validate();
    require(gradient.size() == m.theta.size() && fisher.size() == m.theta.size(),
            "fisher update: gradient/fisher size mismatch");
    UpdateOutcome out{m, 0.0, false};
    const Eigen::ArrayXd damped = fisher.array() + cfg.damping;
    if (cfg.mode == FisherMode::NewtonPlusNoise) {
        Vector step = -(gradient.array() / damped).matrix();
        out.clipped = detail::clip(step, cfg.clip_norm);
        out.step_norm = step.norm();
        out.state.theta += step;
    }
    if (cfg.sigma > 0.0) {
        Rng rng(derive_seed(noise_seed, {0xb015e}));
        std::normal_distribution<double> normal(0.0, 1.0);
        Vector b(m.theta.size());
        for (auto& x : b) {
            x = normal(rng);
        }
        out.state.theta.array() += cfg.sigma * damped.pow(-0.25) * b.array();
    }
    detail::check_finite(out.state.theta, "fisher update");
    return out;
}

/// Fisher unlearning from D_remaining: F is the diagonal Fisher and g the
/// objective gradient, both evaluated on d_r.
inline UpdateOutcome fisher_step(const ModelState& m, const Dataset& d_r, const FisherConfig& cfg) {
    cfg.validate();
    require(!d_r.empty(), "fisher_unlearn: empty retained set");
    const Vector f = fisher_diag(m, d_r, derive_seed(cfg.seed, {0xf1}), cfg.estimator);
    const Vector g = cfg.mode == FisherMode::NewtonPlusNoise ? grad(m, d_r) : Vector::Zero(m.theta.size());
    return apply_fisher_update(m, g, f, cfg, derive_seed(cfg.seed, {0xf2}));
}

inline ModelState fisher_unlearn(const ModelState& m, const Dataset& d_r, const FisherConfig& cfg) {
    return fisher_step(m, d_r, cfg).state;
}

/// LiSSA recursion r_0 = v, r_{j+1} = v + r_j - A_j(r_j) / scale for `depth`
/// steps, returning r_depth / scale. A_j is the damped curvature operator for
/// step j. The run is declared divergent, with the step index attached, on any
/// non-finite value or when ||r_{j+1} - r_j|| has grown for 5 consecutive
/// steps to more than 10x its smallest value so far. Minibatch noise makes
/// short runs of growth common near the fixed point, hence the second bound.
inline Vector lissa_solve(const std::function<Vector(const Vector&, std::size_t)>& damped_op, const Vector& v,
                          std::size_t depth, double scale) {
    require(depth > 0 && scale > 0.0, "lissa: depth and scale must be positive");
    Vector r = v;
    double last_increment = std::numeric_limits<double>::infinity();
    double min_increment = std::numeric_limits<double>::infinity();
    int growth = 0;
    for (std::size_t j = 0; j < depth; ++j) {
        Vector next = v + r - damped_op(r, j) / scale;
        const double increment = (next - r).norm();
        if (!next.allFinite()) {
            throw Error(ErrorCode::Divergence,
                        "LiSSA produced non-finite values at iteration " + std::to_string(j) + "; increase lissa_scale", j);
        }
        growth = increment > last_increment ? growth + 1 : 0;
        min_increment = std::min(min_increment, increment);
        if (growth >= 5 && increment > 10.0 * min_increment) {
            throw Error(ErrorCode::Divergence,
                        "LiSSA iterates grew for 5 consecutive steps at iteration " + std::to_string(j) +
                            "; increase lissa_scale",
                        j);
        }
        last_increment = increment;
        r = std::move(next);
    }
    return r / scale;
}

/// (H + eps I)^-1 v by LiSSA with H estimated on d_r. Each step draws a
/// minibatch of batch_r samples unless the exact (full-batch) mode is on.
inline Vector lissa_inverse_hvp(const ModelState& m, const Dataset& d_r, const Vector& v, const InfluenceConfig& cfg) {
    cfg.validate();
    require(!d_r.empty(), "lissa: empty Hessian source");
    const auto all = refs_of(d_r);
    const bool exact = cfg.lissa_exact || cfg.batch_r >= all.size();
    Rng rng(derive_seed(cfg.seed, {0x1155a}));
    std::vector<std::size_t> idx(all.size());
    std::iota(idx.begin(), idx.end(), 0);
    SampleRefs batch;
    auto op = [&](const Vector& r, std::size_t) -> Vector {
        if (exact) {
            return hvp(m, all, r) + cfg.damping * r;
        }
        batch.clear();
        for (std::size_t k = 0; k < cfg.batch_r; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
            std::swap(idx[k], idx[pick(rng)]);
            batch.push_back(all[idx[k]]);
        }
        return hvp(m, batch, r) + cfg.damping * r;
    };
    return lissa_solve(op, v, cfg.lissa_depth, cfg.lissa_scale);
}

struct CgResult {
    Vector x;
    std::size_t iterations = 0;
    bool converged = false;
    double relative_residual = 0.0;
};

/// Conjugate gradient for A x = v with A symmetric positive definite. Stops
/// when ||r|| / ||v|| <= tol; on hitting max_iter the best iterate is returned
/// with converged = false.
inline CgResult cg_solve(const LinearOperator& op, const Vector& v, double tol, std::size_t max_iter) {
    CgResult res;
    res.x = Vector::Zero(v.size());
    const double vnorm = v.norm();
    if (vnorm == 0.0) {
        res.converged = true;
        return res;
    }
    Vector r = v;
    Vector p = r;
    double rr = r.squaredNorm();
    Vector best = res.x;
    double best_rel = 1.0;
    for (std::size_t it = 0; it < max_iter; ++it) {
        const Vector ap = op(p);
        const double pap = p.dot(ap);
        if (!(pap > 0.0) || !std::isfinite(pap)) {
            break;
        }
        const double alpha = rr / pap;
        res.x += alpha * p;
        r -= alpha * ap;
        res.iterations = it + 1;
        const double rr_next = r.squaredNorm();
        const double rel = std::sqrt(rr_next) / vnorm;
        if (rel < best_rel) {
            best_rel = rel;
            best = res.x;
        }
        if (rel <= tol) {
            res.converged = true;
            res.relative_residual = rel;
            return res;
        }
        p = r + (rr_next / rr) * p;
        rr = rr_next;
    }
    res.x = best;
    res.relative_residual = best_rel;
    return res;
}

inline CgResult cg_inverse_hvp(const ModelState& m, const Dataset& d_r, const Vector& v, const InfluenceConfig& cfg) {
    cfg.validate();
    require(!d_r.empty(), "cg: empty Hessian source");
    const auto all = refs_of(d_r);
    return cg_solve([&](const Vector& x) { return Vector(hvp(m, all, x) + cfg.damping * x); }, v, cfg.cg_tol,
                    cfg.cg_max_iter);
}

/// Dense (H + eps I) assembled column by column from Hessian-vector products.
/// Only sensible for small parameter counts.
inline Matrix assemble_damped_hessian(const ModelState& m, const Dataset& d, double damping) {
    const auto n = m.theta.size();
    const auto all = refs_of(d);
    Matrix h(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        h.col(j) = hvp(m, all, Vector::Unit(n, j));
    }
    h = 0.5 * (h + h.transpose());
    h.diagonal().array() += damping;
    return h;
}

/// Sum of per-sample objective gradients over the forget samples, accumulated
/// in minibatches of batch_f.
inline Vector forget_gradient_sum(const ModelState& m, const Dataset& forget, std::size_t batch_f) {
    Vector v = Vector::Zero(m.theta.size());
    const auto all = refs_of(forget);
    for (std::size_t start = 0; start < all.size(); start += batch_f) {
        const std::size_t stop = std::min(all.size(), start + batch_f);
        std::span<const Sample* const> batch(all.data() + start, stop - start);
        v += grad(m, batch) * static_cast<double>(batch.size());
    }
    return v;
}

/// Inverse-curvature solve x = (H + eps I)^-1 v with H from hessian_source.
inline Vector influence_solve(const ModelState& m, const Dataset& hessian_source, const Vector& v,
                              const InfluenceConfig& cfg) {
    if (v.norm() == 0.0) {
        return Vector::Zero(v.size());
    }
    if (cfg.solver == InfluenceSolver::Lissa) {
        return lissa_inverse_hvp(m, hessian_source, v, cfg);
    }
    return cg_inverse_hvp(m, hessian_source, v, cfg).x;
}

/// Parameter change produced by removing `forget` when the curvature comes
/// from hessian_source (before clipping).
inline Vector influence_direction(const ModelState& m, const Dataset& hessian_source, const Dataset& forget,
                                  const InfluenceConfig& cfg) {
    cfg.validate();
    if (forget.empty()) {
        return Vector::Zero(m.theta.size());
    }
    const Vector x = influence_solve(m, hessian_source, forget_gradient_sum(m, forget, cfg.batch_f), cfg);
    if (cfg.sign == InfluenceSign::Subtract) {
        return -x;
    }
    return x / static_cast<double>(hessian_source.size());
}

/// One-shot influence unlearning of d_u_ids from a model trained on d_full.
/// The Hessian is estimated on D_r = d_full minus d_u_ids.
inline UpdateOutcome influence_step(const ModelState& m, const Dataset& d_full, std::span<const SampleId> d_u_ids,
                                    const InfluenceConfig& cfg) {
    cfg.validate();
    validate_membership(d_full, d_u_ids);
    UpdateOutcome out{m, 0.0, false};
    if (d_u_ids.empty()) {
        return out;
    }
    const Dataset d_r = remove_by_ids(d_full, d_u_ids);
    require(!d_r.empty(), "influence_update: nothing would remain to estimate the Hessian");
    const Dataset forget = select_by_ids(d_full, d_u_ids);
    Vector step = influence_direction(m, d_r, forget, cfg);
    out.clipped = detail::clip(step, cfg.clip_norm);
    out.step_norm = step.norm();
    out.state.theta += step;
    detail::check_finite(out.state.theta, "influence update");
    return out;
}

inline ModelState influence_update(const ModelState& m, const Dataset& d_full, std::span<const SampleId> d_u_ids,
                                   const InfluenceConfig& cfg) {
    return influence_step(m, d_full, d_u_ids, cfg).state;
}

using ApproxMethod = std::variant<FisherConfig, InfluenceConfig>;

inline const char* method_name(const ApproxMethod& method) {
    return std::holds_alternative<FisherConfig>(method) ? "fisher" : "influence";
}

/// One line of the JSON-lines run log.
struct StepRecord {
    std::string method;
    std::size_t minibatch = 0;
    std::size_t removed = 0;
    double step_norm = 0.0;
    bool clipped = false;
    std::optional<double> accuracy;

    nlohmann::json to_json() const {
        nlohmann::json j{{"method", method}, {"minibatch", minibatch}, {"removed", removed},
                         {"step_norm", step_norm}, {"clipped", clipped}};
        j["accuracy"] = accuracy ? nlohmann::json(*accuracy) : nlohmann::json(nullptr);
        return j;
    }
};

inline void write_run_log(std::ostream& out, std::span<const StepRecord> records) {
    for (const auto& r : records) {
        out << r.to_json().dump() << '\n';
    }
}

struct SequentialResult {
    ModelState state;
    Dataset remaining;
    std::vector<StepRecord> log;
};

/// Splits d_u_ids into consecutive minibatches and applies the approximate
/// update once per minibatch, threading the model and shrinking the retained
/// set after every step. Step k uses a seed derived from (method seed, k).
/// When `eval` is given, each record carries the post-step accuracy on it.
inline SequentialResult sequential_unlearn(const ModelState& m, const Dataset& d, std::span<const SampleId> d_u_ids,
                                           const ApproxMethod& method, std::size_t minibatch_size,
                                           const Dataset* eval = nullptr) {
    require(minibatch_size >= 1, "sequential_unlearn: minibatch_size must be >= 1");
    validate_membership(d, d_u_ids);
    SequentialResult res{m, d, {}};
    std::size_t k = 0;
    for (std::size_t start = 0; start < d_u_ids.size(); start += minibatch_size, ++k) {
        const auto batch = d_u_ids.subspan(start, std::min(minibatch_size, d_u_ids.size() - start));
        UpdateOutcome step;
        Dataset after = remove_by_ids(res.remaining, batch);
        if (const auto* f = std::get_if<FisherConfig>(&method)) {
            FisherConfig cfg = *f;
            cfg.seed = derive_seed(f->seed, {k});
            step = fisher_step(res.state, after, cfg);
        } else {
            InfluenceConfig cfg = std::get<InfluenceConfig>(method);
            cfg.seed = derive_seed(cfg.seed, {k});
            step = influence_step(res.state, res.remaining, batch, cfg);
        }
        res.state = std::move(step.state);
        res.remaining = std::move(after);
        StepRecord rec{method_name(method), k, batch.size(), step.step_norm, step.clipped, std::nullopt};
        if (eval != nullptr && !eval->empty()) {
            rec.accuracy = accuracy(res.state, *eval);
        }
        res.log.push_back(std::move(rec));
    }
    return res;
}

} // namespace ulab

#endif
