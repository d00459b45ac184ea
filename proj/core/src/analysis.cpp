#include "stylebank/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

namespace stylebank {
namespace {

double squared_distance(const double* a, const double* b, std::size_t dim) {
    double acc = 0;
    for (std::size_t i = 0; i < dim; ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

std::size_t distinct_points(const PointSet& points) {
    std::set<std::vector<double>> seen;
    for (std::size_t i = 0; i < points.count; ++i)
        seen.emplace(points.point(i), points.point(i) + points.dim);
    return seen.size();
}

std::vector<std::vector<double>> seed_plus_plus(const PointSet& points, std::size_t k, std::mt19937_64& rng) {
    std::vector<std::vector<double>> centroids;
    std::uniform_int_distribution<std::size_t> first(0, points.count - 1);
    const std::size_t f = first(rng);
    centroids.emplace_back(points.point(f), points.point(f) + points.dim);
    std::vector<double> d2(points.count, std::numeric_limits<double>::infinity());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    while (centroids.size() < k) {
        double total = 0;
        for (std::size_t i = 0; i < points.count; ++i) {
            d2[i] = std::min(d2[i], squared_distance(points.point(i), centroids.back().data(), points.dim));
            total += d2[i];
        }
        std::size_t chosen = points.count - 1;
        if (total > 0) {
            double r = unit(rng) * total;
            for (std::size_t i = 0; i < points.count; ++i) {
                r -= d2[i];
                if (r < 0 && d2[i] > 0) {
                    chosen = i;
                    break;
                }
            }
            // Rounding can leave r >= 0; fall back to the farthest point.
            if (d2[chosen] == 0) chosen = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
        }
        centroids.emplace_back(points.point(chosen), points.point(chosen) + points.dim);
    }
    return centroids;
}

} // namespace

double kmeans_objective(const PointSet& points, const ClusterResult& result) {
    double total = 0;
    for (std::size_t i = 0; i < points.count; ++i)
        total += squared_distance(points.point(i), result.centroids.at(static_cast<std::size_t>(result.labels[i])).data(),
                                  points.dim);
    return total;
}

ClusterResult lloyd(const PointSet& points, std::size_t k, std::uint64_t seed, std::size_t max_rounds) {
    require(k >= 1, ErrorCode::InvalidArgument, "k-means: k must be at least 1");
    require(points.count >= 1 && points.values.size() == points.count * points.dim, ErrorCode::InvalidArgument,
            "k-means: malformed point set");
    require(k <= distinct_points(points), ErrorCode::InvalidArgument,
            "k-means: k=" + std::to_string(k) + " exceeds the number of distinct points");
    std::mt19937_64 rng(seed);
    ClusterResult r;
    r.centroids = seed_plus_plus(points, k, rng);
    r.labels.assign(points.count, -1);
    const std::size_t dim = points.dim;

    for (std::size_t round = 0; round < max_rounds; ++round) {
        bool changed = false;
        for (std::size_t i = 0; i < points.count; ++i) {
            int best = r.labels[i];
            double best_d = best >= 0 ? squared_distance(points.point(i), r.centroids[static_cast<std::size_t>(best)].data(), dim)
                                      : std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double d = squared_distance(points.point(i), r.centroids[c].data(), dim);
                if (d < best_d) best_d = d, best = static_cast<int>(c);
            }
            if (best != r.labels[i]) r.labels[i] = best, changed = true;
        }
        if (!changed && round > 0) break;

        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < points.count; ++i) {
            const auto c = static_cast<std::size_t>(r.labels[i]);
            ++counts[c];
            for (std::size_t d = 0; d < dim; ++d) sums[c][d] += points.point(i)[d];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t d = 0; d < dim; ++d) r.centroids[c][d] = sums[c][d] / static_cast<double>(counts[c]);
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            // Re-seed an empty cluster from the point farthest from its centroid.
            std::size_t far = 0;
            double far_d = -1;
            for (std::size_t i = 0; i < points.count; ++i) {
                if (counts[static_cast<std::size_t>(r.labels[i])] <= 1) continue;
                const double d = squared_distance(points.point(i), r.centroids[static_cast<std::size_t>(r.labels[i])].data(), dim);
                if (d > far_d) far_d = d, far = i;
            }
            r.centroids[c].assign(points.point(far), points.point(far) + dim);
            --counts[static_cast<std::size_t>(r.labels[far])];
            r.labels[far] = static_cast<int>(c);
            counts[c] = 1;
        }
        r.inertia_history.push_back(kmeans_objective(points, r));
        r.rounds = round + 1;
    }
    r.inertia = kmeans_objective(points, r);
    return r;
}

ClusterResult kmeans(const PointSet& points, std::size_t k, std::uint64_t seed, const KMeansOptions& options) {
    require(options.restarts >= 1, ErrorCode::InvalidArgument, "k-means: need at least one restart");
    ClusterResult best;
    for (std::size_t r = 0; r < options.restarts; ++r) {
        ClusterResult run = lloyd(points, k, seed + r, options.max_rounds);
        if (r == 0 || run.inertia < best.inertia) best = std::move(run);
    }
    return best;
}

PointSet feature_vectors(const Tensor& features, bool normalize) {
    const auto& s = features.shape();
    require(s.n == 1 && s.c >= 1 && s.plane() >= 1, ErrorCode::ShapeMismatch,
            "feature_vectors: expected [1,C,h,w], got " + s.str());
    PointSet p{s.plane(), s.c, std::vector<double>(s.plane() * s.c)};
    for (std::size_t i = 0; i < s.plane(); ++i) {
        double norm = 0;
        for (std::size_t c = 0; c < s.c; ++c) {
            const double v = features.flat(c * s.plane() + i);
            p.values[i * s.c + c] = v;
            norm += v * v;
        }
        if (normalize && norm > 0) {
            const double inv = 1.0 / std::sqrt(norm);
            for (std::size_t c = 0; c < s.c; ++c) p.values[i * s.c + c] *= inv;
        }
    }
    return p;
}

ClusterResult kmeans_segment(const Tensor& features, std::size_t k, std::uint64_t seed, const KMeansOptions& options) {
    const auto& s = features.shape();
    require(k >= 1 && k <= s.plane(), ErrorCode::InvalidArgument, "kmeans_segment: need 1 <= k <= h*w");
    ClusterResult r = kmeans(feature_vectors(features, true), k, seed, options);
    r.height = s.h;
    r.width = s.w;
    return r;
}

RegionMaskSet masks_from_clusters(const ClusterResult& result, const std::map<int, std::string>& assignment) {
    require(result.labels.size() == result.height * result.width && !result.labels.empty(), ErrorCode::InvalidMask,
            "cluster result carries no feature-map geometry");
    for (std::size_t c = 0; c < result.centroids.size(); ++c)
        require(assignment.count(static_cast<int>(c)) == 1, ErrorCode::InvalidMask,
                "cluster " + std::to_string(c) + " has no style assigned");
    return RegionMaskSet::from_labels(result.labels, result.height, result.width, assignment);
}

void SparsityReport::write_csv(std::ostream& out) const {
    auto num = [](double v) {
        char buf[32];
        const auto r = std::to_chars(buf, buf + sizeof buf, v);
        return std::string(buf, r.ptr);
    };
    out << "channel,mean,stddev\n";
    for (std::size_t c = 0; c < mean.size(); ++c) out << c << ',' << num(mean[c]) << ',' << num(stddev[c]) << '\n';
}

SparsityReport sparsity_from_features(const std::vector<Tensor>& features) {
    require(!features.empty(), ErrorCode::InvalidArgument, "sparsity: need at least one feature map");
    const std::size_t channels = features.front().shape().c;
    std::vector<std::vector<double>> per_image;
    for (const Tensor& f : features) {
        const auto& s = f.shape();
        require(s.c == channels, ErrorCode::ShapeMismatch, "sparsity: channel counts differ");
        for (std::size_t n = 0; n < s.n; ++n) {
            std::vector<double> means(channels, 0.0);
            for (std::size_t c = 0; c < channels; ++c) {
                double sum = 0;
                std::size_t nonzero = 0;
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const double v = f.flat((n * channels + c) * s.plane() + i);
                    if (v != 0.0) sum += v, ++nonzero;
                }
                means[c] = nonzero ? sum / static_cast<double>(nonzero) : 0.0;
            }
            per_image.push_back(std::move(means));
        }
    }
    SparsityReport report;
    report.mean.assign(channels, 0.0);
    report.stddev.assign(channels, 0.0);
    const auto count = static_cast<double>(per_image.size());
    for (std::size_t c = 0; c < channels; ++c) {
        // Sorted summation keeps the result independent of image order.
        std::vector<double> vals;
        for (const auto& m : per_image) vals.push_back(m[c]);
        std::sort(vals.begin(), vals.end());
        const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / count;
        double var = 0;
        for (double v : vals) var += (v - mean) * (v - mean);
        report.mean[c] = mean;
        report.stddev[c] = std::sqrt(var / count);
    }
    report.sorted = report.mean;
    std::sort(report.sorted.begin(), report.sorted.end(), std::greater<>());
    return report;
}

SparsityReport sparsity_stats(const StyleBankModel& model, const std::vector<Tensor>& images) {
    require(!images.empty(), ErrorCode::InvalidArgument, "sparsity: need at least one image");
    std::vector<Tensor> features;
    for (const Tensor& img : images) features.push_back(encode(model, img));
    return sparsity_from_features(features);
}

namespace {

std::vector<double> in_mask_channel_means(const Tensor& features, const Tensor& mask) {
    const auto& s = features.shape();
    std::vector<double> means(s.c, 0.0);
    double area = 0;
    for (std::size_t i = 0; i < s.plane(); ++i) area += mask.flat(i);
    for (std::size_t c = 0; c < s.c; ++c) {
        double acc = 0;
        for (std::size_t i = 0; i < s.plane(); ++i)
            if (mask.flat(i) != 0.0) acc += std::abs(features.flat(c * s.plane() + i));
        means[c] = area > 0 ? acc / area : 0.0;
    }
    return means;
}

void check_mask(const Tensor& features, const Tensor& mask) {
    const auto& s = features.shape();
    require(s.n == 1, ErrorCode::ShapeMismatch, "style-element reconstruction works on one feature map");
    require(mask.shape() == Shape{1, 1, s.h, s.w}, ErrorCode::InvalidMask,
            "spatial mask must be [1,1," + std::to_string(s.h) + "," + std::to_string(s.w) + "]");
    double area = 0;
    for (std::size_t i = 0; i < mask.numel(); ++i) {
        const double v = mask.flat(i);
        require(v == 0.0 || v == 1.0, ErrorCode::InvalidMask, "spatial mask must be binary");
        area += v;
    }
    require(area > 0, ErrorCode::InvalidMask, "spatial mask is empty");
}

} // namespace

double default_channel_threshold(const Tensor& features, const Tensor& mask) {
    check_mask(features, mask);
    const auto means = in_mask_channel_means(features, mask);
    return 1e-3 * *std::max_element(means.begin(), means.end());
}

Tensor reconstruct_style_element(const StyleBankModel& model, const Tensor& features, const std::string& style,
                                 const Tensor& spatial_mask, double channel_threshold) {
    check_mask(features, spatial_mask);
    require(channel_threshold >= 0, ErrorCode::InvalidArgument, "channel threshold must be non-negative");
    const FilterBank& bank = model.bank(style);
    const auto& s = features.shape();
    const auto means = in_mask_channel_means(features, spatial_mask);
    Tensor kept = ops::mul_mask(features, spatial_mask.to(features.dtype()));
    for (std::size_t c = 0; c < s.c; ++c) {
        // A channel that is zero everywhere in the mask contributes nothing either way.
        if (means[c] > channel_threshold || means[c] == 0.0) continue;
        for (std::size_t i = 0; i < s.plane(); ++i) kept.set_flat(c * s.plane() + i, 0.0);
    }
    return decode(model, apply_bank(bank, kept));
}

} // namespace stylebank
