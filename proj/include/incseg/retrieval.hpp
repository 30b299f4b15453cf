#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "incseg/common.hpp"
#include "incseg/embedder.hpp"

namespace incseg {

/// Z x count collection of per-image embeddings, one column per image, with
/// the id list aligning columns to image ids.
struct EmbeddingMatrix {
    int dim = 0;
    std::vector<int> ids;
    std::vector<std::vector<float>> columns;

    int count() const { return static_cast<int>(columns.size()); }
};

inline EmbeddingMatrix embed_set(const SceneEmbedder& embedder, std::span<const Image> images,
                                 std::span<const int> ids) {
    if (images.empty()) throw DataError("embed_set: empty image list");
    if (images.size() != ids.size()) throw UsageError("embed_set: image and id counts differ");
    EmbeddingMatrix m;
    m.dim = embedder.dim();
    m.ids.assign(ids.begin(), ids.end());
    m.columns.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        try {
            auto v = embedder.embed(images[i]);
            if (static_cast<int>(v.size()) != m.dim) {
                throw Error("embedder returned " + std::to_string(v.size()) + " values, expected " +
                            std::to_string(m.dim));
            }
            m.columns.push_back(std::move(v));
        } catch (const std::exception& e) {
            throw DataError("embedding failed for image id " + std::to_string(ids[i]) + ": " + e.what());
        }
    }
    return m;
}

/// N x M grid of cosine distances between query columns (rows) and pool
/// columns (cols). Entries lie in [0, 2]; zero-norm embeddings pair at the
/// uninformative distance 1.
struct DistanceMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<int> row_ids;
    std::vector<int> col_ids;
    std::vector<double> d;  // row-major

    double at(int i, int j) const { return d[static_cast<std::size_t>(i) * cols + j]; }
};

inline DistanceMatrix pairwise_cosine_distance(const EmbeddingMatrix& queries, const EmbeddingMatrix& pool) {
    if (queries.dim != pool.dim) {
        throw ShapeError("embedding dimensions differ: " + std::to_string(queries.dim) + " vs " +
                         std::to_string(pool.dim));
    }
    DistanceMatrix out;
    out.rows = queries.count();
    out.cols = pool.count();
    out.row_ids = queries.ids;
    out.col_ids = pool.ids;
    out.d.resize(static_cast<std::size_t>(out.rows) * out.cols);

    std::vector<double> pool_norms(static_cast<std::size_t>(out.cols));
    for (int j = 0; j < out.cols; ++j) {
        double n = 0.0;
        for (float v : pool.columns[static_cast<std::size_t>(j)]) n += static_cast<double>(v) * v;
        pool_norms[static_cast<std::size_t>(j)] = std::sqrt(n);
    }
    for (int i = 0; i < out.rows; ++i) {
        const auto& f = queries.columns[static_cast<std::size_t>(i)];
        double fn = 0.0;
        for (float v : f) fn += static_cast<double>(v) * v;
        fn = std::sqrt(fn);
        for (int j = 0; j < out.cols; ++j) {
            const auto& g = pool.columns[static_cast<std::size_t>(j)];
            const double gn = pool_norms[static_cast<std::size_t>(j)];
            double dist = 1.0;
            if (fn > 0.0 && gn > 0.0) {
                double dot = 0.0;
                for (int k = 0; k < queries.dim; ++k) dot += static_cast<double>(f[static_cast<std::size_t>(k)]) * g[static_cast<std::size_t>(k)];
                dist = 1.0 - dot / (fn * gn);
                dist = std::clamp(dist, 0.0, 2.0);
            }
            out.d[static_cast<std::size_t>(i) * out.cols + j] = dist;
        }
    }
    return out;
}

/// Per-query ordered K-nearest neighbor ids plus their deduplicated union.
struct Neighborhood {
    std::vector<std::vector<int>> per_query;  // ascending distance; ties by lower id
    std::vector<int> union_ids;               // sorted, unique
    bool k_clamped = false;                   // K exceeded the pool size
};

inline Neighborhood knn_neighborhoods(const DistanceMatrix& distances, int k) {
    if (k < 1) throw ConfigError("k-nearest-neighbors requires K >= 1");
    Neighborhood n;
    n.k_clamped = k > distances.cols;
    const int effective_k = std::min(k, distances.cols);
    n.per_query.resize(static_cast<std::size_t>(distances.rows));
    for (int i = 0; i < distances.rows; ++i) {
        std::vector<std::pair<double, int>> order;
        order.reserve(static_cast<std::size_t>(distances.cols));
        for (int j = 0; j < distances.cols; ++j) {
            order.emplace_back(distances.at(i, j), distances.col_ids[static_cast<std::size_t>(j)]);
        }
        std::partial_sort(order.begin(), order.begin() + effective_k, order.end());
        auto& ids = n.per_query[static_cast<std::size_t>(i)];
        ids.reserve(static_cast<std::size_t>(effective_k));
        for (int j = 0; j < effective_k; ++j) ids.push_back(order[static_cast<std::size_t>(j)].second);
        n.union_ids.insert(n.union_ids.end(), ids.begin(), ids.end());
    }
    std::sort(n.union_ids.begin(), n.union_ids.end());
    n.union_ids.erase(std::unique(n.union_ids.begin(), n.union_ids.end()), n.union_ids.end());
    return n;
}

/// Property harness: cosine K-NN selection must be invariant to positive
/// rescaling of the query embeddings.
inline bool scale_invariance_check(const EmbeddingMatrix& queries, const EmbeddingMatrix& pool, double alpha,
                                   int k) {
    if (alpha <= 0.0) throw ConfigError("scale_invariance_check requires alpha > 0");
    EmbeddingMatrix scaled = queries;
    for (auto& col : scaled.columns) {
        for (auto& v : col) v = static_cast<float>(v * alpha);
    }
    const auto base = knn_neighborhoods(pairwise_cosine_distance(queries, pool), k);
    const auto other = knn_neighborhoods(pairwise_cosine_distance(scaled, pool), k);
    for (std::size_t i = 0; i < base.per_query.size(); ++i) {
        // Selected id sets must match; argmin invariance, not value invariance.
        std::vector<int> a = base.per_query[i];
        std::vector<int> b = other.per_query[i];
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        if (a != b) return false;
    }
    return true;
}

/// Disk cache of embeddings keyed by (embedder tag, image key), used to skip
/// recomputation across CLI invocations.
class EmbeddingCache {
public:
    explicit EmbeddingCache(std::filesystem::path file) : file_(std::move(file)) {
        if (!std::filesystem::exists(file_)) return;
        std::ifstream in(file_);
        if (!in) return;
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception&) {
            return;  // unreadable cache is treated as empty
        }
        for (const auto& entry : j.value("entries", nlohmann::json::array())) {
            entries_[{entry.at("tag").get<std::string>(), entry.at("key").get<std::string>()}] =
                entry.at("v").get<std::vector<float>>();
        }
    }

    const std::vector<float>* find(const std::string& tag, const std::string& key) const {
        const auto it = entries_.find({tag, key});
        return it == entries_.end() ? nullptr : &it->second;
    }

    void put(const std::string& tag, const std::string& key, std::vector<float> value) {
        entries_[{tag, key}] = std::move(value);
    }

    void save() const {
        nlohmann::json entries = nlohmann::json::array();
        for (const auto& [k, v] : entries_) {
            entries.push_back({{"tag", k.first}, {"key", k.second}, {"v", v}});
        }
        std::ofstream out(file_);
        if (!out) throw DataError("cannot write embedding cache: " + file_.string());
        out << nlohmann::json{{"entries", entries}}.dump(2) << "\n";
    }

    std::size_t size() const { return entries_.size(); }

private:
    std::filesystem::path file_;
    std::map<std::pair<std::string, std::string>, std::vector<float>> entries_;
};

}  // namespace incseg
