#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "recsys/binio.hpp"
#include "recsys/error.hpp"
#include "recsys/rng.hpp"
#include "recsys/tensor.hpp"

namespace recsys {

struct RetrievalConfig {
    std::size_t n = 12;       // items to return
    std::size_t m = 10;       // clusters to probe
    std::size_t k = 100000;   // cluster count at build time
    std::size_t kmeans_max_iters = 50;

    void validate() const {
        if (n < 1) throw ConfigError("retrieval config: n must be >= 1");
        if (m < 1) throw ConfigError("retrieval config: m must be >= 1");
        if (m > k) throw ConfigError("retrieval config: m must not exceed k");
    }
};

struct IndexedItem {
    std::string id;
    std::vector<Real> emb;
};

struct ClusteredIndex {
    Tensor centroids;  // K x D, arithmetic means, not re-normalized
    std::vector<std::vector<IndexedItem>> members;
    double tau = 0.1;
    std::int64_t built_at = 0;

    std::size_t cluster_count() const { return members.size(); }
    std::size_t total_items() const {
        std::size_t n = 0;
        for (const auto& m : members) n += m.size();
        return n;
    }
    std::size_t dim() const { return centroids.cols(); }
};

// ---------------------------------------------------------------------------
// K-means (k-means++ seeding, Lloyd iterations, deterministic)
// ---------------------------------------------------------------------------

struct KmeansResult {
    Tensor centroids;  // K x D
    std::vector<std::size_t> assignments;
    std::vector<double> inertia;  // per assignment pass, non-increasing
    std::size_t iterations = 0;
};

namespace kmeans_detail {

inline double sq_dist(const Real* a, const Real* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += diff * diff;
    }
    return s;
}

}  // namespace kmeans_detail

inline KmeansResult kmeans_fit(const std::vector<std::vector<Real>>& points, std::size_t k,
                               std::size_t max_iters, std::uint64_t seed) {
    if (k == 0) throw ConfigError("kmeans_fit: k must be >= 1");
    if (points.size() < k)
        throw ConfigError("kmeans_fit: k=" + std::to_string(k) + " exceeds point count " +
                          std::to_string(points.size()));
    const std::size_t d = points[0].size();
    const std::size_t n = points.size();
    Rng rng(seed);

    // k-means++ seeding.
    Tensor centroids(k, d);
    std::vector<double> min_sq(n, 0.0);
    {
        const std::size_t first = rng.uniform_index(n);
        std::copy(points[first].begin(), points[first].end(), centroids.row(0));
        for (std::size_t i = 0; i < n; ++i) min_sq[i] = kmeans_detail::sq_dist(points[i].data(), centroids.row(0), d);
        for (std::size_t c = 1; c < k; ++c) {
            double total = 0.0;
            for (double v : min_sq) total += v;
            std::size_t pick;
            if (total > 0.0) {
                pick = rng.weighted_index(min_sq, total);
            } else {
                pick = rng.uniform_index(n);
            }
            std::copy(points[pick].begin(), points[pick].end(), centroids.row(c));
            for (std::size_t i = 0; i < n; ++i)
                min_sq[i] = std::min(min_sq[i], kmeans_detail::sq_dist(points[i].data(), centroids.row(c), d));
        }
    }

    KmeansResult res;
    res.assignments.assign(n, 0);
    std::vector<std::size_t> counts(k, 0);

    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        // Assignment pass; ties go to the lower cluster index.
        bool changed = false;
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = kmeans_detail::sq_dist(points[i].data(), centroids.row(0), d);
            for (std::size_t c = 1; c < k; ++c) {
                const double dist = kmeans_detail::sq_dist(points[i].data(), centroids.row(c), d);
                if (dist < best_d) {
                    best_d = dist;
                    best = c;
                }
            }
            inertia += best_d;
            if (res.assignments[i] != best) {
                res.assignments[i] = best;
                changed = true;
            }
        }
        res.inertia.push_back(inertia);
        res.iterations = iter + 1;
        if (!changed && iter > 0) break;

        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) ++counts[res.assignments[i]];

        // Empty-cluster repair: the largest cluster donates its farthest
        // member as the empty cluster's seed.
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            std::size_t largest = 0;
            for (std::size_t c2 = 1; c2 < k; ++c2) {
                if (counts[c2] > counts[largest]) largest = c2;
            }
            if (counts[largest] <= 1) continue;
            std::size_t farthest = n;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (res.assignments[i] != largest) continue;
                const double dist = kmeans_detail::sq_dist(points[i].data(), centroids.row(largest), d);
                if (dist > far_d) {
                    far_d = dist;
                    farthest = i;
                }
            }
            res.assignments[farthest] = c;
            counts[c] = 1;
            counts[largest] -= 1;
            changed = true;
        }

        // Mean update with 64-bit accumulation.
        std::vector<double> sums(k * d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double* row = sums.data() + res.assignments[i] * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += static_cast<double>(points[i][j]);
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            const double inv = 1.0 / static_cast<double>(counts[c]);
            for (std::size_t j = 0; j < d; ++j)
                centroids.at(c, j) = static_cast<Real>(sums[c * d + j] * inv);
        }
    }
    res.centroids = std::move(centroids);
    return res;
}

inline ClusteredIndex build_index(const std::vector<IndexedItem>& items, std::size_t k, double tau,
                                  std::size_t kmeans_max_iters, std::uint64_t seed,
                                  std::int64_t built_at = 0) {
    if (items.empty()) throw DataError("build_index: no items");
    std::vector<std::vector<Real>> points;
    points.reserve(items.size());
    for (const auto& it : items) points.push_back(it.emb);
    KmeansResult km = kmeans_fit(points, k, kmeans_max_iters, seed);

    ClusteredIndex index;
    index.centroids = std::move(km.centroids);
    index.members.resize(k);
    index.tau = tau;
    index.built_at = built_at;
    for (std::size_t i = 0; i < items.size(); ++i) index.members[km.assignments[i]].push_back(items[i]);
    // Centroids track the final assignment exactly.
    const std::size_t d = index.dim();
    for (std::size_t c = 0; c < k; ++c) {
        if (index.members[c].empty()) continue;
        std::vector<double> sum(d, 0.0);
        for (const auto& m : index.members[c]) {
            for (std::size_t j = 0; j < d; ++j) sum[j] += static_cast<double>(m.emb[j]);
        }
        const double inv = 1.0 / static_cast<double>(index.members[c].size());
        for (std::size_t j = 0; j < d; ++j) index.centroids.at(c, j) = static_cast<Real>(sum[j] * inv);
    }
    return index;
}

// ---------------------------------------------------------------------------
// Budget allocation and retrieval
// ---------------------------------------------------------------------------

// m_i = ceil( softmax(centroid affinities)_i * N ), max-subtracted. The 1e-9
// slack keeps exact thirds and halves on their intended integers without
// breaking sum(m_i) >= N (the sum stays > N-1 and is integral).
inline std::vector<std::size_t> allocate_budget(const std::vector<double>& centroid_affinities, std::size_t n) {
    if (centroid_affinities.empty()) throw ConfigError("allocate_budget: no affinities");
    if (n < 1) throw ConfigError("allocate_budget: n must be >= 1");
    double m = centroid_affinities[0];
    for (double g : centroid_affinities) m = std::max(m, g);
    double z = 0.0;
    std::vector<double> e(centroid_affinities.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        e[i] = std::exp(centroid_affinities[i] - m);
        z += e[i];
    }
    std::vector<std::size_t> out(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        const double share = e[i] / z * static_cast<double>(n);
        out[i] = static_cast<std::size_t>(std::ceil(share - 1e-9));
    }
    return out;
}

struct RetrievedItem {
    std::string id;
    Real score = 0;  // dot product with the user embedding
};

struct RetrievalResult {
    std::vector<RetrievedItem> items;
    bool shortfall = false;  // probed clusters held fewer than N items
};

inline std::vector<RetrievedItem> exhaustive_knn(const std::vector<IndexedItem>& all_items,
                                                 const std::vector<Real>& user_emb, std::size_t n) {
    std::vector<RetrievedItem> scored;
    scored.reserve(all_items.size());
    for (const auto& item : all_items)
        scored.push_back({item.id, static_cast<Real>(dot(item.emb.data(), user_emb.data(), user_emb.size()))});
    std::sort(scored.begin(), scored.end(), [](const RetrievedItem& a, const RetrievedItem& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    if (scored.size() > n) scored.resize(n);
    return scored;
}

// Cluster-diversified top-N: probe the M nearest clusters by temperature
// affinity, split the budget by softmax share, run exact search inside each
// probed cluster, then merge by score. Over-allocation (sum m_i > N) and
// per-cluster shortfall both resolve in the global truncation.
inline RetrievalResult retrieve(const ClusteredIndex& index, const std::vector<Real>& user_emb,
                                const RetrievalConfig& cfg) {
    cfg.validate();
    if (index.total_items() == 0) throw DataError("retrieve: empty index");
    if (user_emb.size() != index.dim()) throw ShapeError("retrieve: embedding dim mismatch");
    if (index.tau <= 0.0) throw ConfigError("retrieve: index tau must be > 0");
    const std::size_t k = index.cluster_count();
    const std::size_t m_probe = std::min(cfg.m, k);

    std::vector<std::pair<double, std::size_t>> cluster_affinity(k);
    for (std::size_t c = 0; c < k; ++c) {
        const double gamma = dot(index.centroids.row(c), user_emb.data(), user_emb.size()) / index.tau;
        cluster_affinity[c] = {gamma, c};
    }
    std::partial_sort(cluster_affinity.begin(), cluster_affinity.begin() + m_probe, cluster_affinity.end(),
                      [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });

    std::vector<double> affinities(m_probe);
    for (std::size_t i = 0; i < m_probe; ++i) affinities[i] = cluster_affinity[i].first;
    const std::vector<std::size_t> budget = allocate_budget(affinities, cfg.n);

    std::vector<RetrievedItem> merged;
    for (std::size_t i = 0; i < m_probe; ++i) {
        const auto& members = index.members[cluster_affinity[i].second];
        std::vector<RetrievedItem> scored;
        scored.reserve(members.size());
        for (const auto& item : members)
            scored.push_back({item.id, static_cast<Real>(dot(item.emb.data(), user_emb.data(), user_emb.size()))});
        std::sort(scored.begin(), scored.end(), [](const RetrievedItem& a, const RetrievedItem& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.id < b.id;
        });
        const std::size_t take = std::min(budget[i], scored.size());
        merged.insert(merged.end(), scored.begin(), scored.begin() + take);
    }
    std::sort(merged.begin(), merged.end(), [](const RetrievedItem& a, const RetrievedItem& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    RetrievalResult res;
    res.shortfall = merged.size() < cfg.n;
    if (merged.size() > cfg.n) merged.resize(cfg.n);
    res.items = std::move(merged);
    return res;
}

// ---------------------------------------------------------------------------
// Index file: magic "ECIX1", key=value header, centroid block, then per
// cluster a count line and id/embedding records.
// ---------------------------------------------------------------------------

inline void save_index(const ClusteredIndex& index, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("save_index: cannot open " + path);
    out << "ECIX1\n";
    out << "k=" << index.cluster_count() << "\n";
    out << "d=" << index.dim() << "\n";
    out << "tau=" << format_double(index.tau) << "\n";
    out << "items=" << index.total_items() << "\n";
    out << "built_at=" << index.built_at << "\n";
    out << "\n";
    write_f32_array(out, index.centroids.v.data(), index.centroids.v.size());
    for (const auto& cluster : index.members) {
        out << cluster.size() << "\n";
        for (const auto& item : cluster) {
            out << item.id << "\n";
            write_f32_array(out, item.emb.data(), item.emb.size());
        }
    }
    if (!out) throw DataError("save_index: write failed for " + path);
}

inline ClusteredIndex load_index(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_index: cannot open " + path);
    const std::string magic = read_header_line(in, "magic");
    if (magic != "ECIX1") throw DataError("load_index: bad magic '" + magic + "' in " + path);
    std::size_t k = 0, d = 0, items = 0;
    double tau = 0.0;
    std::int64_t built_at = 0;
    for (auto& [key, value] : read_header_fields(in)) {
        if (key == "k") k = std::stoull(value);
        else if (key == "d") d = std::stoull(value);
        else if (key == "tau") tau = std::stod(value);
        else if (key == "items") items = std::stoull(value);
        else if (key == "built_at") built_at = std::stoll(value);
    }
    if (k == 0 || d == 0) throw DataError("load_index: missing k/d header in " + path);

    ClusteredIndex index;
    index.tau = tau;
    index.built_at = built_at;
    index.centroids = Tensor(k, d);
    read_f32_array(in, index.centroids.v.data(), index.centroids.v.size());
    index.members.resize(k);
    std::size_t total = 0;
    for (std::size_t c = 0; c < k; ++c) {
        const std::string count_line = read_header_line(in, "cluster member count");
        std::size_t count = 0;
        try {
            count = std::stoull(count_line);
        } catch (const std::exception&) {
            throw IntegrityError("load_index: bad member count '" + count_line + "'",
                                 static_cast<std::uint64_t>(in.tellg()));
        }
        index.members[c].reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            IndexedItem item;
            item.id = read_header_line(in, "member id");
            item.emb.resize(d);
            read_f32_array(in, item.emb.data(), d);
            index.members[c].push_back(std::move(item));
        }
        total += count;
    }
    if (total != items)
        throw IntegrityError("load_index: member count " + std::to_string(total) + " != header items " +
                                 std::to_string(items),
                             static_cast<std::uint64_t>(in.tellg()));
    // Centroid-mean invariant within float tolerance.
    for (std::size_t c = 0; c < k; ++c) {
        if (index.members[c].empty()) continue;
        std::vector<double> sum(d, 0.0);
        for (const auto& m : index.members[c]) {
            for (std::size_t j = 0; j < d; ++j) sum[j] += static_cast<double>(m.emb[j]);
        }
        const double inv = 1.0 / static_cast<double>(index.members[c].size());
        for (std::size_t j = 0; j < d; ++j) {
            const double expect = sum[j] * inv;
            if (std::abs(expect - static_cast<double>(index.centroids.at(c, j))) > 1e-4)
                throw IntegrityError("load_index: centroid " + std::to_string(c) +
                                         " deviates from member mean",
                                     static_cast<std::uint64_t>(in.tellg()));
        }
    }
    return index;
}

}  // namespace recsys
