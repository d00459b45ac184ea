#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "stylebank/network.hpp"

namespace stylebank {

/// Row-major point set: `count` points of dimension `dim`.
struct PointSet {
    std::size_t count = 0;
    std::size_t dim = 0;
    std::vector<double> values;

    const double* point(std::size_t i) const { return values.data() + i * dim; }
};

struct ClusterResult {
    std::vector<int> labels;                     ///< one per point (row-major h*w for feature maps)
    std::vector<std::vector<double>> centroids;  ///< k vectors
    double inertia = 0;                          ///< sum of squared distances to assigned centroids
    std::size_t rounds = 0;
    std::vector<double> inertia_history;         ///< objective after every Lloyd round
    std::size_t height = 0;                      ///< feature-map dims when produced by kmeans_segment
    std::size_t width = 0;
};

struct KMeansOptions {
    std::size_t max_rounds = 100;
    std::size_t restarts = 10;
};

/// One k-means++-seeded Lloyd run. Empty clusters are re-seeded from the
/// point farthest from its centroid.
ClusterResult lloyd(const PointSet& points, std::size_t k, std::uint64_t seed, std::size_t max_rounds = 100);

/// Best-inertia result over `options.restarts` runs seeded seed, seed+1, ...
ClusterResult kmeans(const PointSet& points, std::size_t k, std::uint64_t seed, const KMeansOptions& options = {});

double kmeans_objective(const PointSet& points, const ClusterResult& result);

/// Per-position C-vectors of a [1, C, h, w] map, L2-normalized (zero vectors stay zero).
PointSet feature_vectors(const Tensor& features, bool normalize = true);

ClusterResult kmeans_segment(const Tensor& features, std::size_t k, std::uint64_t seed,
                             const KMeansOptions& options = {});

/// `assignment[label]` names the style for every cluster label 0..k-1.
RegionMaskSet masks_from_clusters(const ClusterResult& result, const std::map<int, std::string>& assignment);

struct SparsityReport {
    std::vector<double> mean;   ///< per channel, averaged over images
    std::vector<double> stddev; ///< per channel, population std across images
    std::vector<double> sorted; ///< `mean` sorted non-increasing

    void write_csv(std::ostream& out) const;
};

/// Statistics of per-channel average non-zero responses over a set of feature maps.
SparsityReport sparsity_from_features(const std::vector<Tensor>& features);
SparsityReport sparsity_stats(const StyleBankModel& model, const std::vector<Tensor>& images);

/// 1e-3 of the largest in-mask mean absolute channel response.
double default_channel_threshold(const Tensor& features, const Tensor& mask);

/// Keeps only masked positions and channels whose in-mask mean |response|
/// exceeds `channel_threshold`, applies the style's bank and decodes.
Tensor reconstruct_style_element(const StyleBankModel& model, const Tensor& features, const std::string& style,
                                 const Tensor& spatial_mask, double channel_threshold);

} // namespace stylebank
