#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "stylebank/analysis.hpp"
#include "support.hpp"

using namespace stylebank;
using namespace stylebank::testing;

namespace {

PointSet points_1d(std::vector<double> v) { return PointSet{v.size(), 1, std::move(v)}; }

// Best 2-partition by enumerating every labelling with both clusters non-empty.
double exhaustive_two_cluster(const PointSet& p) {
    double best = std::numeric_limits<double>::infinity();
    const std::size_t n = p.count;
    for (std::uint32_t mask = 1; mask < (1u << n) - 1; ++mask) {
        if (mask & 1u) continue; // point 0 always in cluster 0: each split once
        double cost = 0;
        for (int side = 0; side < 2; ++side) {
            std::vector<double> mean(p.dim, 0.0);
            std::size_t count = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (((mask >> i) & 1u) == static_cast<unsigned>(side)) {
                    for (std::size_t d = 0; d < p.dim; ++d) mean[d] += p.point(i)[d];
                    ++count;
                }
            for (double& m : mean) m /= static_cast<double>(count);
            for (std::size_t i = 0; i < n; ++i)
                if (((mask >> i) & 1u) == static_cast<unsigned>(side))
                    for (std::size_t d = 0; d < p.dim; ++d) cost += std::pow(p.point(i)[d] - mean[d], 2);
        }
        best = std::min(best, cost);
    }
    return best;
}

PointSet random_points(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
    std::uniform_real_distribution<double> u(-1, 1);
    PointSet p{n, dim, std::vector<double>(n * dim)};
    for (double& v : p.values) v = u(rng);
    return p;
}

} // namespace

TEST(KMeans, OneClusterIsMeanOfNormalizedVectors) {
    std::mt19937_64 rng(1);
    const Tensor f = random_tensor(Shape{1, 4, 3, 3}, rng, 0.1, 1, DType::F32);
    const ClusterResult r = kmeans_segment(f, 1, 0);
    for (int l : r.labels) EXPECT_EQ(l, 0);
    const PointSet p = feature_vectors(f);
    for (std::size_t d = 0; d < 4; ++d) {
        double mean = 0;
        for (std::size_t i = 0; i < p.count; ++i) mean += p.point(i)[d];
        EXPECT_NEAR(r.centroids[0][d], mean / p.count, 1e-12);
    }
}

TEST(KMeans, OneDimensionalToy) {
    const PointSet p = points_1d({0, 1, 10, 11});
    const ClusterResult r = kmeans(p, 2, 0);
    EXPECT_EQ(r.labels[0], r.labels[1]);
    EXPECT_EQ(r.labels[2], r.labels[3]);
    EXPECT_NE(r.labels[0], r.labels[2]);
    EXPECT_DOUBLE_EQ(r.inertia, exhaustive_two_cluster(p));
    EXPECT_DOUBLE_EQ(r.inertia, 1.0);
}

TEST(KMeans, InertiaMonotonePerRound) {
    std::mt19937_64 rng(2);
    for (int inst = 0; inst < 30; ++inst) {
        const PointSet p = random_points(rng, 60, 3);
        const ClusterResult r = lloyd(p, 5, inst);
        for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
            EXPECT_LE(r.inertia_history[i], r.inertia_history[i - 1] + 1e-12);
        EXPECT_NEAR(r.inertia, kmeans_objective(p, r), 1e-6);
        for (int l : r.labels) EXPECT_TRUE(l >= 0 && l < 5);
    }
}

TEST(KMeans, BestOfTenMatchesExhaustiveOnTinyInstances) {
    std::mt19937_64 rng(3);
    for (int inst = 0; inst < 40; ++inst) {
        const PointSet p = random_points(rng, 3 + inst % 6, 2);
        EXPECT_NEAR(kmeans(p, 2, 0).inertia, exhaustive_two_cluster(p), 1e-9) << inst;
    }
}

TEST(KMeans, Errors) {
    EXPECT_THROW(kmeans(points_1d({1, 1, 1}), 2, 0), Error);
    EXPECT_THROW(kmeans(points_1d({1, 2}), 0, 0), Error);
    EXPECT_THROW(kmeans_segment(Tensor::full(Shape{1, 2, 2, 2}, 1.0), 5, 0), Error);
    // All positions point the same way after normalization.
    EXPECT_THROW(kmeans_segment(Tensor::full(Shape{1, 2, 2, 2}, 1.0), 2, 0), Error);
}

TEST(KMeans, Deterministic) {
    std::mt19937_64 rng(4);
    const PointSet p = random_points(rng, 50, 4);
    const ClusterResult a = kmeans(p, 4, 7), b = kmeans(p, 4, 7);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.inertia, b.inertia);
}

TEST(MasksFromClusters, SingleClusterAllOnes) {
    std::mt19937_64 rng(5);
    const ClusterResult r = kmeans_segment(random_tensor(Shape{1, 3, 4, 4}, rng, 0.1, 1, DType::F32), 1, 0);
    const RegionMaskSet m = masks_from_clusters(r, {{0, "a"}});
    ASSERT_EQ(m.masks.size(), 1u);
    for (double v : m.masks[0].values()) EXPECT_EQ(v, 1.0);
}

TEST(MasksFromClusters, HalfPlaneToyGivesComplementaryMasks) {
    Tensor f(Shape{1, 2, 4, 6});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 6; ++x) f.set(0, x < 3 ? 0 : 1, y, x, 1.0 + 0.1 * y);
    const ClusterResult r = kmeans_segment(f, 2, 0);
    const RegionMaskSet m = masks_from_clusters(r, {{0, "a"}, {1, "b"}});
    ASSERT_EQ(m.masks.size(), 2u);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 6; ++x) {
            EXPECT_EQ(m.masks[0].at(0, 0, y, x) + m.masks[1].at(0, 0, y, x), 1.0);
            EXPECT_EQ(m.masks[0].at(0, 0, y, x), m.masks[0].at(0, 0, 0, x < 3 ? 0 : 5));
        }
    EXPECT_NE(m.masks[0].at(0, 0, 0, 0), m.masks[0].at(0, 0, 0, 5));
}

TEST(MasksFromClusters, PartitionAndUnassigned) {
    std::mt19937_64 rng(6);
    const ClusterResult r = kmeans_segment(random_tensor(Shape{1, 8, 6, 6}, rng, 0, 1, DType::F32), 3, 0);
    const RegionMaskSet m = masks_from_clusters(r, {{0, "a"}, {1, "b"}, {2, "c"}});
    for (std::size_t i = 0; i < 36; ++i) {
        double s = 0;
        for (const auto& t : m.masks) s += t.flat(i);
        EXPECT_EQ(s, 1.0);
    }
    EXPECT_THROW(masks_from_clusters(r, {{0, "a"}, {1, "b"}}), Error);
}

TEST(Sparsity, ZeroMap) {
    const SparsityReport r = sparsity_from_features({Tensor(Shape{1, 3, 2, 2})});
    for (double v : r.mean) EXPECT_EQ(v, 0.0);
    for (double v : r.stddev) EXPECT_EQ(v, 0.0);
}

TEST(Sparsity, HandExample) {
    const Tensor f = Tensor::from_values(Shape{1, 2, 1, 3}, {0, 2, 4, 0, 0, 3});
    const SparsityReport r = sparsity_from_features({f});
    EXPECT_EQ(r.mean, (std::vector<double>{3, 3}));
}

TEST(Sparsity, SortedCurveAndOrderInvariance) {
    std::mt19937_64 rng(7);
    std::vector<Tensor> maps;
    for (int i = 0; i < 5; ++i) maps.push_back(ops::relu(random_tensor(Shape{1, 6, 3, 3}, rng, -1, 1, DType::F32)));
    const SparsityReport r = sparsity_from_features(maps);
    EXPECT_TRUE(std::is_sorted(r.sorted.rbegin(), r.sorted.rend()));
    auto a = r.sorted, b = r.mean;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
    for (double v : r.mean) EXPECT_GE(v, 0.0);
    std::reverse(maps.begin(), maps.end());
    const SparsityReport back = sparsity_from_features(maps);
    EXPECT_EQ(back.mean, r.mean);
    EXPECT_EQ(back.stddev, r.stddev);
}

TEST(Sparsity, PopulationStddevAndCsv) {
    const Tensor a = Tensor::from_values(Shape{1, 1, 1, 2}, {1, 0});
    const Tensor b = Tensor::from_values(Shape{1, 1, 1, 2}, {3, 0});
    const SparsityReport r = sparsity_from_features({a, b});
    EXPECT_EQ(r.mean[0], 2.0);
    EXPECT_EQ(r.stddev[0], 1.0);
    std::ostringstream csv;
    r.write_csv(csv);
    EXPECT_EQ(csv.str(), "channel,mean,stddev\n0,2,1\n");
}

TEST(Sparsity, FromModel) {
    StyleBankModel m = StyleBankModel::create(ModelConfig{32, 3}, 1);
    const SparsityReport r = sparsity_stats(m, {random_image(16, 16, 1), random_image(16, 16, 2)});
    EXPECT_EQ(r.mean.size(), 32u);
    EXPECT_THROW(sparsity_stats(m, {}), Error);
}

TEST(StyleElement, FullMaskZeroThresholdIsStylize) {
    StyleBankModel m = StyleBankModel::create(ModelConfig{32, 3}, 2);
    m.add_bank("a", 5);
    const Tensor img = random_image(16, 16, 3);
    const Tensor f = encode(m, img);
    const Tensor ones = Tensor::full(Shape{1, 1, 4, 4}, 1.0);
    EXPECT_TRUE(reconstruct_style_element(m, f, "a", ones, 0.0).identical(stylize(m, img, "a")));
}

TEST(StyleElement, EmptyMaskAndFullSuppression) {
    StyleBankModel m = StyleBankModel::create(ModelConfig{32, 3}, 2);
    m.add_bank("a", 5);
    const Tensor f = encode(m, random_image(16, 16, 4));
    EXPECT_THROW(reconstruct_style_element(m, f, "a", Tensor(Shape{1, 1, 4, 4}), 0.0), Error);
    const Tensor ones = Tensor::full(Shape{1, 1, 4, 4}, 1.0);
    const Tensor out = reconstruct_style_element(m, f, "a", ones, 1e9);
    EXPECT_TRUE(out.all_finite());
    EXPECT_TRUE(out.identical(decode(m, Tensor(f.shape()))));
    EXPECT_NEAR(default_channel_threshold(f, ones), 1e-3 * [&] {
        double best = 0;
        for (std::size_t c = 0; c < 32; ++c) {
            double s = 0;
            for (std::size_t i = 0; i < 16; ++i) s += std::abs(f.flat(c * 16 + i));
            best = std::max(best, s / 16);
        }
        return best;
    }(), 1e-9);
}
