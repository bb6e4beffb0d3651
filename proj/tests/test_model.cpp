#include <gtest/gtest.h>

#include "oracles.hpp"
#include "ulab/model.hpp"

namespace {

using ulab::Architecture;
using ulab::Dataset;
using ulab::ModelState;
using ulab::Vector;

ModelState random_model(const Architecture& arch, std::uint64_t seed, double scale = 0.5) {
    ModelState m = ulab::init(arch, seed);
    m.theta = oracle::random_vector(m.theta.size(), seed * 7 + 1, scale);
    return m;
}

TEST(Init, LogisticIsZero) {
    const auto m = ulab::init(Architecture::logistic(2, 3), 4);
    EXPECT_EQ(m.theta.size(), 9);
    EXPECT_EQ(m.theta.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Init, MlpDeterministicAndBounded) {
    const auto arch = Architecture::mlp(5, 3, 8);
    const auto a = ulab::init(arch, 17);
    const auto b = ulab::init(arch, 17);
    EXPECT_TRUE((a.theta.array() == b.theta.array()).all());
    const double a1 = std::sqrt(6.0 / (5 + 8));
    const double a2 = std::sqrt(6.0 / (8 + 3));
    for (Eigen::Index i = 0; i < 40; ++i) {
        EXPECT_LT(std::abs(a.theta[i]), a1);
    }
    for (Eigen::Index i = 48; i < 48 + 24; ++i) {
        EXPECT_LT(std::abs(a.theta[i]), a2);
    }
    EXPECT_GT(a.theta.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Train, ZeroEpochsIsIdentity) {
    const Dataset d = ulab::generate_blobs(2, 10, 3, 0.5, 1);
    const auto m = random_model(Architecture::mlp(3, 2, 4), 3);
    ulab::TrainConfig cfg;
    cfg.epochs = 0;
    const auto out = ulab::train(m, d, cfg);
    EXPECT_TRUE((out.theta.array() == m.theta.array()).all());
}

TEST(Train, SeparableBlobsReachHighAccuracyAndLossDrops) {
    const Dataset d = ulab::generate_blobs(2, 50, 2, 0.1, 7);
    const auto m0 = ulab::init(Architecture::logistic(2, 2), 1);
    ulab::TrainConfig cfg;
    cfg.epochs = 50;
    cfg.learning_rate = 0.01;
    cfg.batch_size = 16;
    const auto m = ulab::train(m0, d, cfg);
    EXPECT_GE(ulab::accuracy(m, d), 0.99);
    EXPECT_LT(ulab::loss(m, d), ulab::loss(m0, d));
}

TEST(Train, MlpLossDecreases) {
    const Dataset d = ulab::generate_blobs(3, 30, 4, 0.8, 2);
    const auto m0 = ulab::init(Architecture::mlp(4, 3, 16, ulab::Activation::Tanh), 5);
    ulab::TrainConfig cfg;
    cfg.epochs = 20;
    cfg.learning_rate = 0.01;
    const auto m = ulab::train(m0, d, cfg);
    EXPECT_LT(ulab::loss(m, d), ulab::loss(m0, d));
}

TEST(Train, EqualSeedsAreBitIdentical) {
    const Dataset d = ulab::generate_blobs(3, 30, 4, 0.8, 2);
    const auto m0 = ulab::init(Architecture::mlp(4, 3, 8), 5);
    ulab::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 42;
    const auto a = ulab::train(m0, d, cfg);
    const auto b = ulab::train(m0, d, cfg);
    EXPECT_TRUE((a.theta.array() == b.theta.array()).all());
    cfg.seed = 43;
    const auto c = ulab::train(m0, d, cfg);
    EXPECT_FALSE((a.theta.array() == c.theta.array()).all());
}

TEST(Train, SgdOptimizerAlsoTrains) {
    const Dataset d = ulab::generate_blobs(2, 20, 2, 0.3, 3);
    const auto m0 = ulab::init(Architecture::logistic(2, 2), 1);
    ulab::TrainConfig cfg;
    cfg.optimizer = ulab::Optimizer::Sgd;
    cfg.learning_rate = 0.5;
    cfg.epochs = 10;
    EXPECT_LT(ulab::loss(ulab::train(m0, d, cfg), d), ulab::loss(m0, d));
}

TEST(Train, EmptyDatasetRejected) {
    const auto m0 = ulab::init(Architecture::logistic(2, 2), 1);
    EXPECT_THROW(ulab::train(m0, Dataset(2, 2), ulab::TrainConfig{}), ulab::Error);
}

TEST(Train, DivergenceReportsStep) {
    const Dataset d = ulab::generate_blobs(2, 20, 2, 0.3, 3);
    auto m0 = ulab::init(Architecture::logistic(2, 2), 1);
    ulab::TrainConfig cfg;
    cfg.optimizer = ulab::Optimizer::Sgd;
    cfg.learning_rate = 1e308;
    cfg.epochs = 5;
    try {
        ulab::train(m0, d, cfg);
        FAIL();
    } catch (const ulab::Error& e) {
        EXPECT_EQ(e.code(), ulab::ErrorCode::Divergence);
        EXPECT_TRUE(e.where().has_value());
    }
}

TEST(Predict, ZeroModelIsUniformAndPicksClassZero) {
    const auto m = ulab::init(Architecture::logistic(3, 4), 1);
    Vector x(3);
    x << 1, -2, 3;
    const auto p = ulab::predict(m, ulab::make_sample(x, 2));
    EXPECT_EQ(p.label, 0);
    for (Eigen::Index c = 0; c < 4; ++c) {
        EXPECT_DOUBLE_EQ(p.probabilities[c], 0.25);
    }
}

TEST(Predict, ProbabilitiesNormalisedAndArgmaxMatchesRecompute) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto arch = seed % 2 ? Architecture::logistic(4, 5) : Architecture::mlp(4, 5, 6);
        const auto m = random_model(arch, seed, 3.0);
        const Vector x = oracle::random_vector(4, seed + 100, 2.0);
        const auto p = ulab::predict(m, ulab::make_sample(x, 0));
        EXPECT_NEAR(p.probabilities.sum(), 1.0, 1e-12);
        EXPECT_GE(p.probabilities.minCoeff(), 0.0);
        EXPECT_LE(p.probabilities.maxCoeff(), 1.0);
        Vector q = (p.logits.array() - p.logits.maxCoeff()).exp();
        q /= q.sum();
        int best = 0;
        for (int c = 1; c < 5; ++c) {
            if (q[c] > q[best]) {
                best = c;
            }
        }
        EXPECT_EQ(p.label, best);
    }
}

TEST(Predict, DimensionMismatch) {
    const auto m = ulab::init(Architecture::logistic(3, 2), 1);
    EXPECT_THROW(ulab::predict(m, ulab::make_sample(Vector::Zero(2), 0)), ulab::Error);
}

TEST(Accuracy, CountingOracle) {
    const Dataset d = oracle::random_dataset(10, 3, 3, 5);
    const auto m = random_model(Architecture::logistic(3, 3), 2, 1.5);
    std::size_t correct = 0;
    for (const auto& s : d) {
        correct += ulab::predict(m, s).label == s.label;
    }
    EXPECT_DOUBLE_EQ(ulab::accuracy(m, d), static_cast<double>(correct) / 10.0);
}

TEST(Accuracy, ZeroModelScoresClassZeroFrequency) {
    const Dataset d = ulab::generate_blobs(4, 25, 3, 0.5, 1);
    EXPECT_DOUBLE_EQ(ulab::accuracy(ulab::init(Architecture::logistic(3, 4), 0), d), 0.25);
}

TEST(Accuracy, PerfectModel) {
    const Dataset d = ulab::generate_blobs(2, 20, 2, 0.01, 1);
    auto m = ulab::init(Architecture::logistic(2, 2), 0);
    ulab::TrainConfig cfg;
    cfg.epochs = 30;
    cfg.learning_rate = 0.05;
    m = ulab::train(m, d, cfg);
    EXPECT_EQ(ulab::accuracy(m, d), 1.0);
}

TEST(Grad, ClosedFormAtZero) {
    const auto m = ulab::init(Architecture::logistic(2, 3), 0);
    Vector x(2);
    x << 0.5, -2.0;
    const auto s = ulab::make_sample(x, 1);
    const Vector g = ulab::sample_grad(m, s);
    for (int c = 0; c < 3; ++c) {
        const double coef = 1.0 / 3.0 - (c == 1 ? 1.0 : 0.0);
        EXPECT_NEAR(g[c * 2 + 0], coef * 0.5, 1e-15);
        EXPECT_NEAR(g[c * 2 + 1], coef * -2.0, 1e-15);
        EXPECT_NEAR(g[6 + c], coef, 1e-15);
    }
}

TEST(Grad, MeanOverDisjointUnion) {
    const Dataset d = oracle::random_dataset(12, 3, 3, 9);
    const auto m = random_model(Architecture::mlp(3, 3, 5), 4);
    std::vector<std::size_t> a_idx{0, 1, 2, 3, 4}, b_idx{5, 6, 7, 8, 9, 10, 11};
    const Dataset a = d.subset(a_idx), b = d.subset(b_idx);
    const Vector lhs = ulab::grad(m, d);
    const Vector rhs = (5.0 * ulab::grad(m, a) + 7.0 * ulab::grad(m, b)) / 12.0;
    EXPECT_LT(oracle::rel_err(lhs, rhs), 1e-12);
}

TEST(Grad, MatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (bool mlp : {false, true}) {
            auto arch = mlp ? Architecture::mlp(3, 3, 4, seed % 2 ? ulab::Activation::Tanh : ulab::Activation::ReLU)
                            : Architecture::logistic(3, 3, 0.01);
            const auto m = random_model(arch, seed + 1);
            const Dataset d = oracle::random_dataset(4, 3, 3, seed + 50);
            const Vector g = ulab::grad(m, d);
            EXPECT_LT(oracle::rel_err(g, oracle::fd_grad(m, d)), 1e-5) << "seed " << seed << " mlp " << mlp;
        }
    }
}

TEST(Grad, EmptySubsetRejected) {
    const auto m = ulab::init(Architecture::logistic(2, 2), 0);
    EXPECT_THROW(ulab::grad(m, Dataset(2, 2)), ulab::Error);
}

TEST(Hvp, ZeroAndLinearity) {
    const Dataset d = oracle::random_dataset(8, 3, 3, 1);
    const auto m = random_model(Architecture::logistic(3, 3, 0.05), 2);
    EXPECT_EQ(ulab::hvp(m, d, Vector::Zero(m.theta.size())).norm(), 0.0);
    const Vector v = oracle::random_vector(m.theta.size(), 3);
    const Vector hv = ulab::hvp(m, d, v);
    EXPECT_LT((ulab::hvp(m, d, 2.5 * v) - 2.5 * hv).norm(), 1e-8);
}

TEST(Hvp, LogisticMatchesDenseHessianOnFixture) {
    // 2-dim, 2-class, 5-sample fixture
    const Dataset d = oracle::random_dataset(5, 2, 2, 77);
    const auto m = random_model(Architecture::logistic(2, 2), 6);
    const auto H = oracle::logistic_hessian(m, d);
    for (std::uint64_t k = 0; k < 5; ++k) {
        const Vector v = oracle::random_vector(m.theta.size(), 10 + k);
        EXPECT_LT((ulab::hvp(m, d, v) - H * v).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(Hvp, LogisticIsSymmetric) {
    const Dataset d = oracle::random_dataset(20, 4, 3, 3);
    const auto m = random_model(Architecture::logistic(4, 3, 0.1), 8);
    for (std::uint64_t k = 0; k < 10; ++k) {
        const Vector u = oracle::random_vector(m.theta.size(), 100 + k);
        const Vector v = oracle::random_vector(m.theta.size(), 200 + k);
        EXPECT_NEAR(u.dot(ulab::hvp(m, d, v)), v.dot(ulab::hvp(m, d, u)), 1e-8);
    }
}

TEST(Hvp, MlpFiniteDifferenceTracksDenseFdHessian) {
    const Dataset d = oracle::random_dataset(6, 3, 2, 4);
    const auto m = random_model(Architecture::mlp(3, 2, 4, ulab::Activation::Tanh), 12);
    const Vector v = oracle::random_vector(m.theta.size(), 13);
    // oracle: directional derivative of the loop loss gradient by nested differences
    const double h = 1e-4;
    ModelState p = m, q = m;
    p.theta += h * v;
    q.theta -= h * v;
    const Vector expected = (oracle::fd_grad(p, d) - oracle::fd_grad(q, d)) / (2 * h);
    EXPECT_LT(oracle::rel_err(ulab::hvp(m, d, v), expected), 1e-4);
}

TEST(Hvp, DimensionMismatch) {
    const Dataset d = oracle::random_dataset(3, 2, 2, 4);
    const auto m = ulab::init(Architecture::logistic(2, 2), 0);
    EXPECT_THROW(ulab::hvp(m, d, Vector::Zero(3)), ulab::Error);
}

TEST(Fisher, NonNegativeAndVanishesWhenConfident) {
    const Dataset d = oracle::random_dataset(10, 3, 3, 1);
    const auto m = random_model(Architecture::mlp(3, 3, 4), 2);
    EXPECT_GE(ulab::fisher_diag(m, d, 1).minCoeff(), 0.0);

    auto confident = ulab::init(Architecture::logistic(1, 2), 0);
    confident.theta << 0.0, 0.0, 60.0, -60.0; // bias makes class 0 certain
    Vector x(1);
    x << 0.3;
    const Dataset one(2, 1, {ulab::make_sample(x, 0)});
    EXPECT_LT(ulab::fisher_diag(confident, one, 9).maxCoeff(), 1e-40);
}

TEST(Fisher, ExactModeMatchesLabelEnumeration) {
    // one sample, 2 classes, 1 feature: enumerate both labels with finite-difference scores
    auto m = ulab::init(Architecture::logistic(1, 2), 0);
    m.theta << 0.7, -0.4, 0.2, 0.1;
    Vector x(1);
    x << 1.3;
    const Dataset one(2, 1, {ulab::make_sample(x, 0)});
    const auto p = ulab::predict(m, one[0]).probabilities;
    Vector expected = Vector::Zero(4);
    for (int y = 0; y < 2; ++y) {
        Vector xs(1);
        xs << 1.3;
        const Dataset dy(2, 1, {ulab::make_sample(xs, y)});
        const Vector score = -oracle::fd_grad(m, dy, 1e-6);
        expected += p[y] * score.cwiseAbs2();
    }
    const Vector exact = ulab::fisher_diag(m, one, 0, ulab::FisherEstimator::ExactEnumeration);
    EXPECT_LT(oracle::rel_err(exact, expected), 1e-6);

    // the sampled estimator is unbiased for it
    Vector mean = Vector::Zero(4);
    const int draws = 4000;
    for (int s = 0; s < draws; ++s) {
        mean += ulab::fisher_diag(m, one, static_cast<std::uint64_t>(s));
    }
    mean /= draws;
    EXPECT_LT(oracle::rel_err(mean, expected), 0.05);
}

TEST(Embed, ShapesAndDeterminism) {
    const auto lm = random_model(Architecture::logistic(3, 4), 1);
    const auto mm = random_model(Architecture::mlp(3, 4, 7), 1);
    const auto s = ulab::make_sample(oracle::random_vector(3, 1), 0);
    EXPECT_EQ(ulab::embed(lm, s).size(), 4);
    EXPECT_EQ(ulab::embed(mm, s).size(), 7);
    EXPECT_TRUE((ulab::embed(mm, s).array() == ulab::embed(mm, s).array()).all());
}

TEST(Embed, MlpEqualsManualFirstLayer) {
    const auto m = random_model(Architecture::mlp(2, 2, 3, ulab::Activation::ReLU), 5, 1.0);
    Vector x(2);
    x << 0.4, -1.1;
    const Vector e = ulab::embed(m, ulab::make_sample(x, 0));
    for (int h = 0; h < 3; ++h) {
        const double pre = m.theta[h * 2] * 0.4 + m.theta[h * 2 + 1] * -1.1 + m.theta[6 + h];
        EXPECT_DOUBLE_EQ(e[h], std::max(pre, 0.0));
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto m = random_model(Architecture::mlp(3, 4, 5, ulab::Activation::Tanh, 0.25), 9);
    const auto dir = oracle::scratch_dir("ckpt");
    const auto digest = ulab::save_checkpoint(m, dir / "m.ulck");
    const auto back = ulab::load_checkpoint(dir / "m.ulck");
    EXPECT_EQ(back.arch, m.arch);
    EXPECT_EQ(back.rng_seed, m.rng_seed);
    EXPECT_TRUE((back.theta.array() == m.theta.array()).all());
    EXPECT_EQ(digest, ulab::digest_of(back));
}

TEST(Checkpoint, CorruptionDetected) {
    const auto m = random_model(Architecture::logistic(2, 2), 9);
    auto bytes = ulab::serialize(m);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ULCK");
    auto flipped = bytes;
    flipped[30] ^= 1;
    EXPECT_THROW(ulab::deserialize(flipped), ulab::Error);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    EXPECT_THROW(ulab::deserialize(truncated), ulab::Error);
    auto magic = bytes;
    magic[0] = 'X';
    try {
        ulab::deserialize(magic);
        FAIL();
    } catch (const ulab::Error& e) {
        EXPECT_EQ(e.code(), ulab::ErrorCode::BadMagic);
    }
}

} // namespace
