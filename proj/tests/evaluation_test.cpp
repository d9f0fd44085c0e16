#include "fixtures.hpp"
#include "oracles.hpp"

#include <agem/evaluation.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

namespace agem {
namespace {

using test::oracle_ap;

std::vector<std::string> names(std::initializer_list<const char*> l) { return {l.begin(), l.end()}; }

real ap_of(const std::vector<std::string>& ranked, const IdSet& pos, const IdSet& junk = {}) {
    return average_precision(std::span<const std::string>(ranked), pos, junk).value();
}

TEST(AveragePrecision, AllPositivesFirst) {
    EXPECT_EQ(ap_of(names({"a", "b", "x", "y"}), {"a", "b"}), 1.0);
}

TEST(AveragePrecision, HandEvaluatedExample) {
    // Positives at ranks 1 and 3: ((1 + 1) / 2 + (2/3 + 1/2) / 2) / 2.
    const real expected = ((1.0 + 1.0) / 2 + (2.0 / 3 + 0.5) / 2) / 2;
    EXPECT_NEAR(ap_of(names({"p1", "n", "p2", "m"}), {"p1", "p2"}), expected, 1e-15);
    EXPECT_NEAR(expected, 0.7917, 1e-4);
}

TEST(AveragePrecision, JunkAboveAPositiveIsDeleted) {
    const IdSet pos{"p", "q"};
    EXPECT_EQ(ap_of(names({"j", "p", "n", "q"}), pos, {"j"}), ap_of(names({"p", "n", "q"}), pos));
}

TEST(AveragePrecision, MissingPositiveContributesNothing) {
    // One of two positives is ranked first, the other never appears.
    EXPECT_NEAR(ap_of(names({"p", "n"}), {"p", "absent"}), 0.5, 1e-15);
}

TEST(AveragePrecision, EmptyPositivesIsSkipped) {
    const auto ranked = names({"a"});
    EXPECT_FALSE(average_precision(std::span<const std::string>(ranked), {}, {}).has_value());
}

TEST(AveragePrecision, FirstHitAtRankTwo) {
    // Single positive at rank 2: (0/1 + 1/2) / 2.
    EXPECT_NEAR(ap_of(names({"n", "p"}), {"p"}), 0.25, 1e-15);
}

struct RandomInstance {
    std::vector<std::string> ranked;
    IdSet positives;
    IdSet junk;
};

RandomInstance random_instance(std::mt19937_64& rng, std::size_t max_len = 20) {
    std::uniform_int_distribution<std::size_t> len(1, max_len);
    std::uniform_int_distribution<int> label(0, 3);
    RandomInstance r;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) {
        const std::string id = "i" + std::to_string(i);
        r.ranked.push_back(id);
        const int l = label(rng);
        if (l == 0) r.positives.insert(id);
        if (l == 1) r.junk.insert(id);
    }
    // Positives that are never ranked.
    if (label(rng) == 0) r.positives.insert("unranked");
    if (r.positives.empty()) r.positives.insert(r.ranked.back()), r.junk.erase(r.ranked.back());
    std::shuffle(r.ranked.begin(), r.ranked.end(), rng);
    return r;
}

TEST(AveragePrecision, MatchesOracleOnRandomInstances) {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 1000; ++t) {
        const auto r = random_instance(rng);
        const std::set<std::string> pos(r.positives.begin(), r.positives.end());
        const std::set<std::string> junk(r.junk.begin(), r.junk.end());
        EXPECT_NEAR(ap_of(r.ranked, r.positives, r.junk), oracle_ap(r.ranked, pos, junk), 1e-9) << "instance " << t;
    }
}

TEST(AveragePrecision, JunkInsertionNeverChangesAp) {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 500; ++t) {
        auto r = random_instance(rng);
        const real before = ap_of(r.ranked, r.positives, r.junk);
        std::uniform_int_distribution<std::size_t> extra(1, 5);
        const std::size_t k = extra(rng);
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pos(0, r.ranked.size());
            const std::string id = "junk" + std::to_string(i);
            r.ranked.insert(r.ranked.begin() + static_cast<std::ptrdiff_t>(pos(rng)), id);
            r.junk.insert(id);
        }
        EXPECT_EQ(ap_of(r.ranked, r.positives, r.junk), before);
    }
}

TEST(AveragePrecision, PromotingAPositiveNeverDecreasesAp) {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 500; ++t) {
        auto r = random_instance(rng);
        const real before = ap_of(r.ranked, r.positives, r.junk);
        for (std::size_t i = 1; i < r.ranked.size(); ++i) {
            const auto& above = r.ranked[i - 1];
            if (r.positives.count(r.ranked[i]) && !r.positives.count(above) && !r.junk.count(above)) {
                auto swapped = r.ranked;
                std::swap(swapped[i - 1], swapped[i]);
                EXPECT_GE(ap_of(swapped, r.positives, r.junk), before - 1e-15);
            }
        }
    }
}

TEST(Protocol, PositiveAndJunkSets) {
    const QueryLabels l{{"e"}, {"h"}, {"u"}};
    const ProtocolSpec medium{Protocol::medium};
    const ProtocolSpec hard{Protocol::hard};
    EXPECT_EQ(medium.positives(l), (IdSet{"e", "h"}));
    EXPECT_EQ(medium.junk(l), (IdSet{"u"}));
    EXPECT_EQ(hard.positives(l), (IdSet{"h"}));
    EXPECT_EQ(hard.junk(l), (IdSet{"e", "u"}));
    EXPECT_EQ(parse_protocol("hard"), Protocol::hard);
    EXPECT_EQ(parse_protocol("M"), Protocol::medium);
    EXPECT_THROW(parse_protocol("easy"), DataError);
}

TEST(GroundTruthIo, RoundTripAndMissingCategories) {
    const auto j = nlohmann::json::parse(R"({"queries": {"q1": {"easy": ["a"], "hard": ["b"]}, "q0": {}}})");
    const auto gt = ground_truth_from_json(j);
    ASSERT_EQ(gt.queries.size(), 2u);
    EXPECT_TRUE(gt.at("q0").easy.empty());
    EXPECT_EQ(gt.at("q1").hard, names({"b"}));
    EXPECT_TRUE(gt.at("q1").unclear.empty());

    const auto dir = std::filesystem::temp_directory_path() / "agem_gt_test";
    std::filesystem::create_directories(dir);
    save_ground_truth(dir / "gt.json", gt);
    const auto back = load_ground_truth(dir / "gt.json");
    EXPECT_EQ(to_json(back), to_json(gt));
    std::filesystem::remove_all(dir);
}

TEST(GroundTruthIo, RejectsOverlapsAndUnknownIds) {
    EXPECT_THROW(ground_truth_from_json(nlohmann::json::parse(R"({"queries": {"q": {"easy": ["a"], "unclear": ["a"]}}})")),
                 DataError);
    EXPECT_THROW(ground_truth_from_json(nlohmann::json::parse(R"({"queries": {"q": {"easy": "a"}}})")), FormatError);
    EXPECT_THROW(ground_truth_from_json(nlohmann::json::parse(R"({"q": {}})")), FormatError);
    GroundTruth gt;
    gt.queries["q"] = QueryLabels{{"nope"}, {}, {}};
    DescriptorSet db;
    db.add("a", std::vector<real>{1});
    EXPECT_THROW(gt.validate(&db), DataError);
}

std::vector<real> unit(std::mt19937_64& rng, std::size_t dim) {
    std::normal_distribution<real> n01(0, 1);
    std::vector<real> v(dim);
    for (auto& x : v) x = n01(rng);
    return l2_normalize(v);
}

TEST(Evaluate, SingleQueryPerfectRanking) {
    DescriptorSet db;
    db.add("a", std::vector<real>{1, 0});
    db.add("b", std::vector<real>{0, 1});
    DescriptorSet queries;
    queries.add("q", std::vector<real>{1, 0});
    GroundTruth gt;
    gt.queries["q"] = QueryLabels{{"a"}, {}, {}};
    const auto r = evaluate(Index(db), queries, gt, ProtocolSpec{Protocol::medium});
    EXPECT_EQ(r.map, 1.0);
    ASSERT_EQ(r.per_query.size(), 1u);
}

TEST(Evaluate, MatchesBruteForceOnRandomData) {
    std::mt19937_64 rng(21);
    DescriptorSet db;
    for (int i = 0; i < 100; ++i) db.add("d" + std::to_string(i), unit(rng, 8));
    DescriptorSet queries;
    GroundTruth gt;
    std::uniform_int_distribution<int> label(0, 5);
    for (int q = 0; q < 10; ++q) {
        const std::string id = "q" + std::to_string(q);
        queries.add(id, unit(rng, 8));
        QueryLabels l;
        for (const auto& d : db.ids()) {
            const int c = label(rng);
            if (c == 0) l.easy.push_back(d);
            if (c == 1) l.hard.push_back(d);
            if (c == 2) l.unclear.push_back(d);
        }
        gt.queries[id] = l;
    }
    for (Protocol p : {Protocol::medium, Protocol::hard}) {
        const ProtocolSpec spec{p};
        const auto r = evaluate(Index(db), queries, gt, spec);
        // Reference: explicit scores, full sort, oracle AP, plain mean.
        double total = 0;
        for (std::size_t q = 0; q < queries.size(); ++q) {
            std::vector<std::pair<real, std::string>> scored;
            for (std::size_t i = 0; i < db.size(); ++i) {
                real s = 0;
                for (std::size_t k = 0; k < 8; ++k) s += queries.row(q)[k] * db.row(i)[k];
                scored.emplace_back(s, db.id(i));
            }
            std::sort(scored.begin(), scored.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
            std::vector<std::string> ranked;
            for (const auto& s : scored) ranked.push_back(s.second);
            const auto& l = gt.queries.at(queries.id(q));
            std::set<std::string> pos(l.hard.begin(), l.hard.end()), junk(l.unclear.begin(), l.unclear.end());
            (p == Protocol::medium ? pos : junk).insert(l.easy.begin(), l.easy.end());
            total += oracle_ap(ranked, pos, junk);
        }
        EXPECT_NEAR(r.map, total / 10, 1e-9) << protocol_name(p);
    }
}

TEST(Evaluate, HardProtocolSkipsQueriesWithoutHardPositives) {
    DescriptorSet db;
    db.add("a", std::vector<real>{1, 0});
    db.add("b", std::vector<real>{0, 1});
    DescriptorSet queries;
    queries.add("q1", std::vector<real>{1, 0});
    queries.add("q2", std::vector<real>{1, 0});
    GroundTruth gt;
    gt.queries["q1"] = QueryLabels{{"a"}, {}, {}};
    gt.queries["q2"] = QueryLabels{{}, {"b"}, {}};
    const auto r = evaluate(Index(db), queries, gt, ProtocolSpec{Protocol::hard});
    EXPECT_EQ(r.skipped, names({"q1"}));
    ASSERT_EQ(r.per_query.size(), 1u);
    EXPECT_NEAR(r.map, 0.25, 1e-15);
}

TEST(Evaluate, MissingGroundTruthIsAnError) {
    DescriptorSet db;
    db.add("a", std::vector<real>{1});
    DescriptorSet queries;
    queries.add("q", std::vector<real>{1});
    EXPECT_THROW(evaluate(Index(db), queries, GroundTruth{}, ProtocolSpec{}), DataError);
}

TEST(Evaluate, DependsOnlyOnOrder) {
    RankedList a{"q", {{"x", 0.9}, {"p", 0.5}, {"y", 0.1}}};
    RankedList b{"q", {{"x", 100}, {"p", -3}, {"y", -7}}};
    GroundTruth gt;
    gt.queries["q"] = QueryLabels{{"p"}, {}, {}};
    EXPECT_EQ(evaluate_rankings({a}, gt, {}).map, evaluate_rankings({b}, gt, {}).map);
}

TEST(Evaluate, ReproducibleAndSortedByQuery) {
    const auto bench = test::make_clustered_benchmark({}, 5);
    const Index index(bench.database);
    RetrievalParams params;
    params.dba_n = 2;
    params.qe_n = 3;
    const auto r1 = evaluate(index, bench.queries, bench.gt, {}, params);
    const auto r2 = evaluate(index, bench.queries, bench.gt, {}, params);
    EXPECT_EQ(per_query_csv(r1), per_query_csv(r2));
    EXPECT_TRUE(std::is_sorted(r1.per_query.begin(), r1.per_query.end(),
                               [](const auto& x, const auto& y) { return x.query < y.query; }));
}

TEST(Sweep, DbaQeGridShapeAndBaseline) {
    const auto bench = test::make_clustered_benchmark({}, 6);
    const Index index(bench.database);
    const ProtocolSpec medium{Protocol::medium};
    const std::vector<std::size_t> zero{0};
    const auto single = sweep_dba_qe(index, bench.queries, bench.gt, zero, zero, medium);
    ASSERT_EQ(single.size(), 1u);
    EXPECT_EQ(single[0].map, evaluate(index, bench.queries, bench.gt, medium).map);

    const std::vector<std::size_t> dba_counts{0, 1, 2}, qe_counts{0, 1, 2, 5};
    const auto grid = sweep_dba_qe(index, bench.queries, bench.gt, dba_counts, qe_counts, medium);
    ASSERT_EQ(grid.size(), 12u);
    EXPECT_EQ(grid[0].map, single[0].map);
    // Cell (2, 1) against (0, 0) on a clustered set.
    EXPECT_GE(grid[2 * 4 + 1].map, grid[0].map);

    const auto csv = sweep_csv(grid, Protocol::medium);
    EXPECT_EQ(csv.rfind("# protocol=medium\ndba_n,qe_n,map\n0,0,", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 14);
}

TEST(Sweep, DbaQeCellsMatchThePipeline) {
    const auto bench = test::make_clustered_benchmark({}, 7);
    const Index index(bench.database);
    const std::vector<std::size_t> d{3}, q{4};
    RetrievalParams params;
    params.dba_n = 3;
    params.qe_n = 4;
    EXPECT_EQ(sweep_dba_qe(index, bench.queries, bench.gt, d, q, {})[0].map,
              evaluate(index, bench.queries, bench.gt, {}, params).map);
}

TEST(Sweep, AlphaBetaDegeneracies) {
    const auto bench = test::make_clustered_benchmark({}, 8);
    const Index index(bench.database);
    const ProtocolSpec medium{Protocol::medium};
    const std::vector<real> alphas{0, 1, 3}, betas{0, 2};
    const auto grid = sweep_alpha_beta(index, bench.queries, bench.gt, alphas, betas, 2, 3, medium);
    ASSERT_EQ(grid.size(), 6u);
    for (std::size_t b = 0; b < betas.size(); ++b) {
        // alpha = 0: average QE over beta-weighted DBA.
        RetrievalParams avg;
        avg.dba_n = 2;
        avg.dba_beta = betas[b];
        avg.qe_n = 3;
        EXPECT_NEAR(grid[b * 3].map, evaluate(index, bench.queries, bench.gt, medium, avg).map, 1e-12);
    }
    for (std::size_t a = 0; a < alphas.size(); ++a) {
        // beta = 0: plain DBA under alpha QE.
        RetrievalParams plain;
        plain.dba_n = 2;
        plain.qe_n = 3;
        plain.qe_alpha = alphas[a];
        EXPECT_NEAR(grid[a].map, evaluate(index, bench.queries, bench.gt, medium, plain).map, 1e-12);
    }
    const auto csv = sweep_csv(grid, Protocol::medium, 2, 3);
    EXPECT_NE(csv.find("alpha,beta,map\n0.000000,0.000000,"), std::string::npos);
}

TEST(Sweep, PropagatesErrors) {
    const auto bench = test::make_clustered_benchmark({}, 9);
    const Index index(bench.database);
    const std::vector<std::size_t> too_deep{index.size()}, zero{0};
    EXPECT_THROW(sweep_dba_qe(index, bench.queries, bench.gt, too_deep, zero, {}), DataError);
}

} // namespace
} // namespace agem
