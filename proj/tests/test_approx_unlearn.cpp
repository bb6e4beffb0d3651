#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "ulab/approx_unlearn.hpp"
#include "ulab/exact_unlearn.hpp"

namespace {

using ulab::Dataset;
using ulab::FisherConfig;
using ulab::InfluenceConfig;
using ulab::Matrix;
using ulab::ModelState;
using ulab::SampleId;
using ulab::Vector;

struct Trained {
    Dataset train, test;
    ModelState model;
};

Trained trained_blobs(std::size_t classes = 5, std::uint64_t seed = 3) {
    const Dataset all = ulab::generate_blobs(classes, 60, 8, 0.5, seed);
    auto [train, test] = ulab::split_train_test(all, 0.25, seed);
    ulab::TrainConfig cfg;
    cfg.epochs = 15;
    cfg.learning_rate = 0.01;
    auto m = ulab::train(ulab::init(ulab::Architecture::logistic(8, classes, 1e-3), 1), train, cfg);
    return {train, test, m};
}

// 6-sample ridge Logistic fixture, fitted to its exact optimum by the Newton oracle.
struct Fixture {
    Dataset d;
    ModelState theta_star;
};

Fixture six_sample_fixture() {
    std::vector<ulab::Sample> s;
    const double pts[6][2] = {{1.0, 0.2}, {0.8, -0.4}, {1.5, 0.9}, {-1.0, 0.1}, {-0.7, -0.9}, {-1.3, 0.6}};
    for (int i = 0; i < 6; ++i) {
        Vector x(2);
        x << pts[i][0], pts[i][1];
        s.push_back(ulab::make_sample(x, i < 3 ? 0 : 1));
    }
    Dataset d(2, 2, s);
    auto m = ulab::init(ulab::Architecture::logistic(2, 2, 0.05), 0);
    return {d, oracle::newton_fit(m, d)};
}

TEST(Fisher, ZeroSigmaNoiseOnlyIsIdentity) {
    const auto t = trained_blobs();
    FisherConfig cfg;
    cfg.mode = ulab::FisherMode::NoiseOnly;
    cfg.sigma = 0.0;
    const auto out = ulab::fisher_unlearn(t.model, t.train, cfg);
    EXPECT_TRUE((out.theta.array() == t.model.theta.array()).all());
}

TEST(Fisher, NewtonStepSolvesDiagonalQuadraticInOneStep) {
    auto m = ulab::init(ulab::Architecture::logistic(2, 2), 0);
    m.theta << 1.0, -2.0, 0.5, 3.0, 0.0, 4.0;
    Vector target(6), a(6);
    target << 0.2, 0.3, -0.4, 1.0, 2.0, -1.0;
    a << 2.0, 0.5, 7.0, 1.0, 3.0, 0.25;
    const Vector g = a.cwiseProduct(m.theta - target);
    FisherConfig cfg;
    cfg.damping = 1e-14;
    const auto out = ulab::apply_fisher_update(m, g, a, cfg, 0);
    EXPECT_LT((out.state.theta - target).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Fisher, ClipBoundsTheNewtonStep) {
    auto m = ulab::init(ulab::Architecture::logistic(2, 2), 0);
    const Vector g = Vector::Constant(6, 10.0);
    const Vector f = Vector::Constant(6, 1.0);
    FisherConfig cfg;
    cfg.clip_norm = 0.5;
    const auto out = ulab::apply_fisher_update(m, g, f, cfg, 0);
    EXPECT_TRUE(out.clipped);
    EXPECT_NEAR(out.state.theta.norm(), 0.5, 1e-12);
}

TEST(Fisher, LargeNoiseCollapsesAccuracy) {
    const auto t = trained_blobs(5);
    ASSERT_GT(ulab::accuracy(t.model, t.test), 0.8);
    FisherConfig cfg;
    cfg.sigma = 1.0;
    cfg.seed = 4;
    const auto out = ulab::fisher_unlearn(t.model, t.train, cfg);
    EXPECT_LT(ulab::accuracy(out, t.test), 0.5);
}

TEST(Fisher, NoiseIsSeeded) {
    const auto t = trained_blobs();
    FisherConfig cfg;
    cfg.sigma = 1e-2;
    cfg.mode = ulab::FisherMode::NoiseOnly;
    cfg.seed = 8;
    const auto a = ulab::fisher_unlearn(t.model, t.train, cfg);
    const auto b = ulab::fisher_unlearn(t.model, t.train, cfg);
    EXPECT_TRUE((a.theta.array() == b.theta.array()).all());
    EXPECT_FALSE((a.theta.array() == t.model.theta.array()).all());
}

TEST(Fisher, NonFiniteResultNamesIndex) {
    auto m = ulab::init(ulab::Architecture::logistic(1, 2), 0);
    Vector g = Vector::Zero(4);
    g[2] = 1e308;
    FisherConfig cfg;
    cfg.damping = 1e-300;
    try {
        ulab::apply_fisher_update(m, g, Vector::Zero(4), cfg, 0);
        FAIL();
    } catch (const ulab::Error& e) {
        EXPECT_EQ(e.code(), ulab::ErrorCode::NumericalFailure);
        EXPECT_EQ(e.where(), 2u);
    }
}

TEST(Lissa, IdentityIsFixedPoint) {
    const Vector v = oracle::random_vector(4, 1);
    auto op = [](const Vector& r, std::size_t) { return r; };
    for (std::size_t depth : {1u, 7u, 50u}) {
        EXPECT_LT((ulab::lissa_solve(op, v, depth, 1.0) - v).norm(), 1e-15);
    }
}

TEST(Lissa, DiagonalInverse) {
    Vector v(2);
    v << 1.0, 1.0;
    auto op = [](const Vector& r, std::size_t) {
        Vector out(2);
        out << 2.0 * r[0], 4.0 * r[1];
        return out;
    };
    const Vector x = ulab::lissa_solve(op, v, 200, 5.0);
    EXPECT_NEAR(x[0], 0.5, 1e-3);
    EXPECT_NEAR(x[1], 0.25, 1e-3);
}

TEST(Lissa, TooSmallScaleDiverges) {
    Vector v(2);
    v << 1.0, 1.0;
    auto op = [](const Vector& r, std::size_t) { return Vector(10.0 * r); };
    try {
        ulab::lissa_solve(op, v, 100, 1.0);
        FAIL();
    } catch (const ulab::Error& e) {
        EXPECT_EQ(e.code(), ulab::ErrorCode::Divergence);
        EXPECT_TRUE(e.where().has_value());
    }
}

TEST(Lissa, ExactModeMatchesDenseSolveOnNineParameterLogistic) {
    const Dataset d = oracle::random_dataset(12, 2, 3, 31);
    auto m = ulab::init(ulab::Architecture::logistic(2, 3), 0);
    m.theta = oracle::random_vector(9, 4, 0.5);
    InfluenceConfig cfg;
    cfg.lissa_exact = true;
    cfg.damping = 0.1;
    cfg.lissa_scale = 3.0;
    cfg.lissa_depth = 600;
    const Vector v = oracle::random_vector(9, 5);
    Matrix h = oracle::logistic_hessian(m, d);
    h.diagonal().array() += cfg.damping;
    const Vector expected = h.ldlt().solve(v);
    EXPECT_LT(oracle::rel_err(ulab::lissa_inverse_hvp(m, d, v, cfg), expected), 1e-3);
}

TEST(Lissa, StochasticModeIsNoisyButClose) {
    const auto t = trained_blobs(3);
    InfluenceConfig cfg;
    cfg.damping = 0.5;
    cfg.lissa_scale = 5.0;
    cfg.lissa_depth = 200;
    cfg.batch_r = 64;
    const Vector v = oracle::random_vector(t.model.theta.size(), 5);
    const Vector expected = ulab::assemble_damped_hessian(t.model, t.train, cfg.damping).ldlt().solve(v);
    EXPECT_LT(oracle::rel_err(ulab::lissa_inverse_hvp(t.model, t.train, v, cfg), expected), 0.25);
}

TEST(Cg, ZeroRightHandSide) {
    auto res = ulab::cg_solve([](const Vector& x) { return x; }, Vector::Zero(3), 1e-10, 10);
    EXPECT_TRUE(res.converged);
    EXPECT_EQ(res.x.norm(), 0.0);
}

TEST(Cg, IdentityConvergesInOneIteration) {
    const Vector v = oracle::random_vector(5, 3);
    auto res = ulab::cg_solve([](const Vector& x) { return x; }, v, 1e-12, 10);
    EXPECT_TRUE(res.converged);
    EXPECT_EQ(res.iterations, 1u);
    EXPECT_LT((res.x - v).norm(), 1e-14);
}

TEST(Cg, MatchesDenseSolveOnLogisticHessians) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Dataset d = oracle::random_dataset(15, 3, 3, seed + 40);
        auto m = ulab::init(ulab::Architecture::logistic(3, 3, 0.01), 0);
        m.theta = oracle::random_vector(12, seed + 2, 0.7);
        InfluenceConfig cfg;
        cfg.damping = 0.05;
        cfg.cg_tol = 1e-9;
        const Vector v = oracle::random_vector(12, seed + 9);
        Matrix h = oracle::logistic_hessian(m, d);
        h.diagonal().array() += cfg.damping;
        const auto res = ulab::cg_inverse_hvp(m, d, v, cfg);
        EXPECT_TRUE(res.converged);
        EXPECT_LT((h * res.x - v).norm() / v.norm(), 1e-8);
        EXPECT_LT(oracle::rel_err(res.x, h.ldlt().solve(v)), 1e-6);
    }
}

TEST(Cg, IterationCapReturnsBestIterate) {
    const Dataset d = oracle::random_dataset(15, 4, 3, 2);
    auto m = ulab::init(ulab::Architecture::logistic(4, 3), 0);
    InfluenceConfig cfg;
    cfg.damping = 1e-3;
    cfg.cg_max_iter = 2;
    cfg.cg_tol = 1e-14;
    const auto res = ulab::cg_inverse_hvp(m, d, oracle::random_vector(15, 1), cfg);
    EXPECT_FALSE(res.converged);
    EXPECT_EQ(res.iterations, 2u);
    EXPECT_LT(res.relative_residual, 1.0);
}

TEST(Influence, EmptyForgetSetIsIdentity) {
    const auto f = six_sample_fixture();
    const auto out = ulab::influence_update(f.theta_star, f.d, {}, InfluenceConfig{});
    EXPECT_TRUE((out.theta.array() == f.theta_star.theta.array()).all());
}

TEST(Influence, ClassicalStepApproachesRetrainAndMatchesDenseOracle) {
    const auto f = six_sample_fixture();
    const std::vector<SampleId> forget{f.d[1].id};
    const Dataset d_r = ulab::remove_by_ids(f.d, forget);
    const auto retrained = oracle::newton_fit(f.theta_star, d_r);

    InfluenceConfig cfg;
    cfg.solver = ulab::InfluenceSolver::ConjugateGradient;
    cfg.sign = ulab::InfluenceSign::Classical;
    cfg.damping = 1e-8;
    cfg.cg_tol = 1e-12;
    const auto out = ulab::influence_update(f.theta_star, f.d, forget, cfg);

    Matrix h = oracle::logistic_hessian(f.theta_star, d_r);
    h.diagonal().array() += cfg.damping;
    const Vector v = oracle::logistic_loop_grad(f.theta_star, ulab::select_by_ids(f.d, forget));
    const Vector expected = f.theta_star.theta + h.ldlt().solve(v) / 5.0;
    EXPECT_LT(oracle::rel_err(out.theta, expected), 1e-8);

    const double before = (f.theta_star.theta - retrained.theta).norm();
    const double after = (out.theta - retrained.theta).norm();
    EXPECT_LT(after, 0.5 * before);
}

TEST(Influence, SubtractSignMatchesDirectUpdate) {
    const auto f = six_sample_fixture();
    const std::vector<SampleId> forget{f.d[4].id, f.d[0].id};
    const Dataset d_r = ulab::remove_by_ids(f.d, forget);
    InfluenceConfig cfg;
    cfg.solver = ulab::InfluenceSolver::ConjugateGradient;
    cfg.damping = 0.01;
    cfg.cg_tol = 1e-12;
    const auto out = ulab::influence_update(f.theta_star, f.d, forget, cfg);
    Matrix h = oracle::logistic_hessian(f.theta_star, d_r);
    h.diagonal().array() += cfg.damping;
    const Vector v = 2.0 * oracle::logistic_loop_grad(f.theta_star, ulab::select_by_ids(f.d, forget));
    EXPECT_LT(oracle::rel_err(out.theta, Vector(f.theta_star.theta - h.ldlt().solve(v))), 1e-8);
}

TEST(Influence, LissaAndCgAgree) {
    const auto f = six_sample_fixture();
    const std::vector<SampleId> forget{f.d[2].id};
    InfluenceConfig cg;
    cg.solver = ulab::InfluenceSolver::ConjugateGradient;
    cg.damping = 0.01;
    cg.cg_tol = 1e-12;
    InfluenceConfig lissa = cg;
    lissa.solver = ulab::InfluenceSolver::Lissa;
    lissa.lissa_exact = true;
    lissa.lissa_scale = 2.0;
    lissa.lissa_depth = 3000;
    const auto a = ulab::influence_update(f.theta_star, f.d, forget, cg);
    const auto b = ulab::influence_update(f.theta_star, f.d, forget, lissa);
    EXPECT_LT(oracle::rel_err(a.theta, b.theta), 1e-3);
}

TEST(Influence, AdditiveInForgetSetForFixedCurvature) {
    const auto t = trained_blobs(3);
    InfluenceConfig cfg;
    cfg.solver = ulab::InfluenceSolver::ConjugateGradient;
    cfg.cg_tol = 1e-11;
    cfg.damping = 0.05;
    std::vector<std::size_t> a_idx{0, 3, 5, 9}, b_idx{11, 14, 20};
    std::vector<std::size_t> ab_idx = a_idx;
    ab_idx.insert(ab_idx.end(), b_idx.begin(), b_idx.end());
    const Vector ua = ulab::influence_direction(t.model, t.train, t.train.subset(a_idx), cfg);
    const Vector ub = ulab::influence_direction(t.model, t.train, t.train.subset(b_idx), cfg);
    const Vector uab = ulab::influence_direction(t.model, t.train, t.train.subset(ab_idx), cfg);
    EXPECT_LT(oracle::rel_err(uab, Vector(ua + ub)), 1e-8);
}

TEST(Influence, MembershipViolationRejected) {
    const auto f = six_sample_fixture();
    const std::vector<SampleId> forget{0x1234};
    try {
        ulab::influence_update(f.theta_star, f.d, forget, InfluenceConfig{});
        FAIL();
    } catch (const ulab::Error& e) {
        EXPECT_EQ(e.code(), ulab::ErrorCode::MembershipViolation);
    }
}

TEST(Influence, ClipAndValueSemantics) {
    const auto t = trained_blobs(3);
    const ModelState copy = t.model;
    InfluenceConfig cfg;
    cfg.solver = ulab::InfluenceSolver::ConjugateGradient;
    cfg.clip_norm = 1e-3;
    const std::vector<SampleId> forget{t.train[0].id, t.train[1].id};
    const auto out = ulab::influence_step(t.model, t.train, forget, cfg);
    EXPECT_TRUE(out.clipped);
    EXPECT_NEAR((out.state.theta - t.model.theta).norm(), 1e-3, 1e-12);
    EXPECT_TRUE((t.model.theta.array() == copy.theta.array()).all());
}

TEST(Sequential, SingleMinibatchEqualsOneShot) {
    const auto t = trained_blobs(3);
    InfluenceConfig cfg;
    cfg.solver = ulab::InfluenceSolver::ConjugateGradient;
    std::vector<SampleId> forget;
    for (std::size_t i = 0; i < 10; ++i) {
        forget.push_back(t.train[i * 7].id);
    }
    const auto one = ulab::influence_update(t.model, t.train, forget, cfg);
    const auto seq = ulab::sequential_unlearn(t.model, t.train, forget, cfg, forget.size());
    EXPECT_TRUE((one.theta.array() == seq.state.theta.array()).all());
    EXPECT_EQ(seq.log.size(), 1u);
}

TEST(Sequential, TwentyFiveInFivesGivesFiveSteps) {
    const auto t = trained_blobs(3);
    std::vector<SampleId> forget;
    for (std::size_t i = 0; i < 25; ++i) {
        forget.push_back(t.train[i].id);
    }
    FisherConfig fcfg;
    fcfg.mode = ulab::FisherMode::NoiseOnly;
    fcfg.sigma = 1e-4;
    const auto res = ulab::sequential_unlearn(t.model, t.train, forget, fcfg, 5, &t.test);
    ASSERT_EQ(res.log.size(), 5u);
    EXPECT_EQ(res.remaining.size(), t.train.size() - 25);
    std::ostringstream out;
    ulab::write_run_log(out, res.log);
    std::istringstream in(out.str());
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("method"), "fisher");
        EXPECT_EQ(j.at("minibatch"), n);
        EXPECT_EQ(j.at("removed"), 5);
        EXPECT_TRUE(j.at("accuracy").is_number());
        ++n;
    }
    EXPECT_EQ(n, 5u);
}

TEST(Sequential, RejectsZeroMinibatch) {
    const auto t = trained_blobs(3);
    EXPECT_THROW(ulab::sequential_unlearn(t.model, t.train, {}, FisherConfig{}, 0), ulab::Error);
}

} // namespace
