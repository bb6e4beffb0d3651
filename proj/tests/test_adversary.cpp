#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "ulab/adversary.hpp"

namespace {

using ulab::AdversaryConfig;
using ulab::Budget;
using ulab::Dataset;
using ulab::Knowledge;
using ulab::SampleId;
using ulab::Vector;

ulab::ModelState trained(const Dataset& d, std::uint64_t seed = 0) {
    ulab::TrainConfig cfg;
    cfg.epochs = 5;
    cfg.learning_rate = 0.01;
    cfg.seed = seed;
    return ulab::train(ulab::init(ulab::Architecture::logistic(d.feature_dim(), d.num_classes(), 1e-3), 0), d, cfg);
}

void expect_members(const Dataset& d, const std::vector<SampleId>& ids) {
    std::set<SampleId> seen(ids.begin(), ids.end());
    EXPECT_EQ(seen.size(), ids.size());
    for (SampleId id : ids) {
        EXPECT_TRUE(d.contains(id));
    }
}

TEST(Budget, ResolvesCountAndFraction) {
    EXPECT_EQ(Budget::of_count(25).resolve(1000), 25u);
    EXPECT_EQ(Budget::of_fraction(0.30).resolve(1000), 300u);
    EXPECT_THROW(Budget{}.resolve(10), ulab::Error);
    EXPECT_THROW(Budget::of_fraction(1.5).resolve(10), ulab::Error);
}

TEST(Blind, ClassTargetedCount) {
    const Dataset d = ulab::generate_blobs(4, 50, 3, 0.5, 1);
    AdversaryConfig cfg;
    cfg.budget = Budget::of_count(25);
    cfg.target_class = 2;
    const auto r = ulab::requests_blind(d, cfg);
    ASSERT_EQ(r.ids.size(), 25u);
    for (SampleId id : r.ids) {
        EXPECT_EQ(d.at_id(id).label, 2);
    }
    expect_members(d, r.ids);
    cfg.budget = Budget::of_count(51);
    EXPECT_THROW(ulab::requests_blind(d, cfg), ulab::Error);
}

TEST(Blind, FractionAndDeterminism) {
    const Dataset d = oracle::random_dataset(1000, 2, 3, 4);
    AdversaryConfig cfg;
    cfg.budget = Budget::of_fraction(0.30);
    cfg.seed = 8;
    const auto a = ulab::requests_blind(d, cfg);
    EXPECT_EQ(a.ids.size(), 300u);
    expect_members(d, a.ids);
    EXPECT_EQ(ulab::requests_blind(d, cfg).ids, a.ids);
    cfg.seed = 9;
    EXPECT_NE(ulab::requests_blind(d, cfg).ids, a.ids);
}

TEST(Blind, ZeroBudgetRejected) {
    const Dataset d = oracle::random_dataset(10, 2, 2, 4);
    AdversaryConfig cfg;
    cfg.budget = Budget::of_count(0);
    EXPECT_THROW(ulab::requests_blind(d, cfg), ulab::Error);
    cfg.budget = Budget::of_count(11);
    EXPECT_THROW(ulab::requests_blind(d, cfg), ulab::Error);
}

TEST(OutputAware, LowestTrueClassLogitsBySortOracle) {
    const Dataset d = ulab::generate_blobs(3, 40, 4, 0.9, 2);
    const auto m = trained(d);
    AdversaryConfig cfg;
    cfg.budget = Budget::of_count(25);
    const auto r = ulab::requests_output_aware(d, m, cfg);
    std::vector<std::pair<double, SampleId>> all;
    for (const auto& s : d) {
        all.emplace_back(ulab::predict(m, s).logits[s.label], s.id);
    }
    std::sort(all.begin(), all.end());
    ASSERT_EQ(r.ids.size(), 25u);
    for (std::size_t i = 0; i < 25; ++i) {
        EXPECT_EQ(r.ids[i], all[i].second);
        EXPECT_DOUBLE_EQ(r.scores[i], all[i].first);
    }
}

TEST(OutputAware, FullBudgetAndUniformTieBreak) {
    const Dataset d = oracle::random_dataset(30, 2, 3, 6);
    const auto zero = ulab::init(ulab::Architecture::logistic(2, 3), 0);
    AdversaryConfig cfg;
    cfg.budget = Budget::of_count(d.size());
    const auto r = ulab::requests_output_aware(d, zero, cfg);
    auto sorted = d.ids();
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(r.ids, sorted);
}

// Brute force: retrain every leave-one-out model exactly and measure how far theta moves.
TEST(ParamAware, TopScoreIsLargestLeaveOneOutMove) {
    const double pts[6][2] = {{1.0, 0.2}, {0.8, -0.4}, {2.5, 1.9}, {-1.0, 0.1}, {-0.7, -0.9}, {0.4, 0.3}};
    std::vector<ulab::Sample> s;
    for (int i = 0; i < 6; ++i) {
        Vector x(2);
        x << pts[i][0], pts[i][1];
        s.push_back(ulab::make_sample(x, i < 3 ? 0 : 1));
    }
    const Dataset d(2, 2, s);
    const auto full = oracle::newton_fit(ulab::init(ulab::Architecture::logistic(2, 2, 0.05), 0), d);
    std::size_t best = 0;
    double best_move = -1.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const std::vector<SampleId> one{d[i].id};
        const auto loo = oracle::newton_fit(full, ulab::remove_by_ids(d, one));
        const double move = (loo.theta - full.theta).norm();
        if (move > best_move) {
            best_move = move;
            best = i;
        }
    }
    AdversaryConfig cfg;
    cfg.budget = Budget::of_count(1);
    ulab::InfluenceConfig solver;
    solver.damping = 1e-6;
    const auto r = ulab::requests_param_aware(d, full, cfg, solver);
    ASSERT_EQ(r.ids.size(), 1u);
    EXPECT_EQ(r.ids[0], d[best].id);

    const auto scores = ulab::influence_scores(d, full, solver);
    for (double sc : scores) {
        EXPECT_GE(sc, 0.0);
    }
}

TEST(ParamAware, IterativeSolverAgreesWithDense) {
    const Dataset d = ulab::generate_blobs(3, 15, 3, 0.8, 5);
    const auto m = trained(d);
    ulab::InfluenceConfig solver;
    solver.solver = ulab::InfluenceSolver::ConjugateGradient;
    solver.damping = 0.05;
    solver.cg_tol = 1e-10;
    const auto dense = ulab::influence_scores(d, m, solver, 1000);
    const auto iterative = ulab::influence_scores(d, m, solver, 0);
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_NEAR(dense[i], iterative[i], 1e-6 * std::max(1.0, dense[i]));
    }
}

TEST(Generators, DeterministicDistinctMembers) {
    const Dataset d = ulab::generate_blobs(3, 30, 3, 0.8, 7);
    const auto m = trained(d);
    for (Knowledge k : {Knowledge::Blind, Knowledge::OutputAware, Knowledge::ParameterAware}) {
        AdversaryConfig cfg;
        cfg.knowledge = k;
        cfg.budget = Budget::of_fraction(0.2);
        cfg.seed = 3;
        const auto a = ulab::generate_requests(d, cfg, &m);
        const auto b = ulab::generate_requests(d, cfg, &m);
        EXPECT_EQ(a.ids.size(), 18u);
        EXPECT_EQ(a.ids, b.ids);
        expect_members(d, a.ids);
        EXPECT_EQ(a.knowledge, k);
    }
}

TEST(Generators, AccessPreconditions) {
    const Dataset d = oracle::random_dataset(10, 2, 2, 4);
    AdversaryConfig cfg;
    cfg.budget = Budget::of_count(2);
    cfg.knowledge = Knowledge::OutputAware;
    EXPECT_THROW(ulab::generate_requests(d, cfg), ulab::Error);
    cfg.knowledge = Knowledge::ParameterAware;
    EXPECT_THROW(ulab::generate_requests(d, cfg), ulab::Error);
}

TEST(Export, JsonCarriesMetadata) {
    const Dataset d = ulab::generate_blobs(2, 10, 2, 0.5, 1);
    const auto m = trained(d);
    AdversaryConfig cfg;
    cfg.knowledge = Knowledge::OutputAware;
    cfg.budget = Budget::of_count(3);
    cfg.target_class = 1;
    const auto j = ulab::generate_requests(d, cfg, &m).to_json();
    EXPECT_EQ(j.at("knowledge"), "output");
    EXPECT_EQ(j.at("budget"), 3);
    EXPECT_EQ(j.at("target_class"), 1);
    EXPECT_EQ(j.at("requests").size(), 3u);
    EXPECT_TRUE(j.at("requests").at(0).contains("score"));
}

} // namespace
