#pragma once

// Synthetic clustered retrieval benchmark: unit-norm cluster centres,
// database items and queries scattered around them, with ground truth drawn
// from cluster membership.

#include <agem/evaluation.hpp>

#include <random>

namespace agem::test {

struct ClusteredBenchmarkConfig {
    std::size_t clusters = 10;
    std::size_t items_per_cluster = 20;
    std::size_t queries_per_cluster = 2;
    std::size_t dim = 32;
    real item_noise = real(0.35);
    real query_noise = real(0.35);
    /// Fractions of each cluster's items, by closeness to the centre, that are
    /// labelled easy and hard. The remainder is unclear.
    real easy_fraction = real(0.6);
    real hard_fraction = real(0.3);
};

struct ClusteredBenchmark {
    DescriptorSet database;
    DescriptorSet queries;
    GroundTruth gt;
};

inline ClusteredBenchmark make_clustered_benchmark(const ClusteredBenchmarkConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<real> n01(0, 1);
    auto noisy = [&](const std::vector<real>& c, real sd) {
        std::vector<real> v(c);
        for (auto& x : v) x += sd * n01(rng);
        return l2_normalize(v);
    };
    ClusteredBenchmark out{DescriptorSet(cfg.dim), DescriptorSet(cfg.dim), {}};
    std::vector<std::vector<real>> centres;
    for (std::size_t c = 0; c < cfg.clusters; ++c) {
        std::vector<real> v(cfg.dim);
        for (auto& x : v) x = n01(rng);
        centres.push_back(l2_normalize(v));
    }
    std::vector<QueryLabels> cluster_labels(cfg.clusters);
    for (std::size_t c = 0; c < cfg.clusters; ++c) {
        std::vector<std::pair<real, std::string>> members;
        for (std::size_t i = 0; i < cfg.items_per_cluster; ++i) {
            char id[32];
            std::snprintf(id, sizeof id, "db_c%02zu_%03zu", c, i);
            const auto v = noisy(centres[c], cfg.item_noise);
            out.database.add(id, v);
            members.emplace_back(dot(v, centres[c]), id);
        }
        std::sort(members.begin(), members.end(), std::greater<>());
        const auto n = static_cast<real>(members.size());
        const auto n_easy = static_cast<std::size_t>(std::lround(cfg.easy_fraction * n));
        const auto n_hard = static_cast<std::size_t>(std::lround(cfg.hard_fraction * n));
        for (std::size_t i = 0; i < members.size(); ++i) {
            auto& l = cluster_labels[c];
            (i < n_easy ? l.easy : i < n_easy + n_hard ? l.hard : l.unclear).push_back(members[i].second);
        }
    }
    for (std::size_t c = 0; c < cfg.clusters; ++c) {
        for (std::size_t q = 0; q < cfg.queries_per_cluster; ++q) {
            char id[32];
            std::snprintf(id, sizeof id, "q_c%02zu_%02zu", c, q);
            out.queries.add(id, noisy(centres[c], cfg.query_noise));
            out.gt.queries[id] = cluster_labels[c];
        }
    }
    return out;
}

} // namespace agem::test
