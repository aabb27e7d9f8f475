#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "recsys/corpus.hpp"
#include "recsys/towers.hpp"

namespace recsys {

constexpr std::size_t kRecallKs[] = {1, 5, 10, 20, 40};

struct EvalReport {
    std::vector<std::pair<std::size_t, double>> recall_at_k;  // ascending k
    std::size_t impressions = 0;     // P: impressions counted into the mean
    std::size_t excluded = 0;        // impressions with an empty relevant set
    std::size_t fallback_count = 0;  // empty-history impressions ranked by the recency tail
    std::size_t pool_size = 0;

    double recall(std::size_t k) const {
        for (const auto& [kk, v] : recall_at_k) {
            if (kk == k) return v;
        }
        throw ConfigError("EvalReport: recall@" + std::to_string(k) + " not computed");
    }
};

struct AblationPoint {
    double missing_minutes = 0.0;
    double recall_at_20 = 0.0;
};

struct AblationCurve {
    std::vector<AblationPoint> points;  // missing_minutes strictly increasing
    std::int64_t model_skip_seconds = 0;
};

// Positive-item ids missing from the candidate pool.
struct CoverageError : DataError {
    using DataError::DataError;
};

// ---------------------------------------------------------------------------
// Ranking primitives
// ---------------------------------------------------------------------------

struct EmbeddedPool {
    std::vector<std::string> ids;
    std::vector<std::vector<Real>> vecs;
    std::unordered_map<std::string, std::size_t> index;

    std::size_t size() const { return ids.size(); }
};

inline EmbeddedPool embed_item_pool(const ModelParams& params, const FeatureSpace& space,
                                    const std::vector<std::string>& ids) {
    EmbeddedPool pool;
    pool.ids = ids;
    pool.vecs.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto it = space.items_by_id.find(ids[i]);
        if (it == space.items_by_id.end()) throw DataError("embed_item_pool: unknown item '" + ids[i] + "'");
        pool.vecs.push_back(encode_item(params, it->second).values);
        pool.index.emplace(ids[i], i);
    }
    return pool;
}

// Indices of pool entries, best first: descending dot product, ties broken by
// item id ascending.
inline std::vector<std::size_t> rank_pool(const std::vector<Real>& user_emb, const EmbeddedPool& pool) {
    std::vector<double> scores(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) scores[i] = dot(user_emb, pool.vecs[i]);
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return pool.ids[a] < pool.ids[b];
    });
    return order;
}

inline std::vector<std::string> rank_candidates(const std::vector<Real>& user_emb, const EmbeddedPool& pool) {
    if (pool.size() == 0) throw DataError("rank_candidates: empty pool");
    std::vector<std::size_t> order = rank_pool(user_emb, pool);
    std::vector<std::string> out;
    out.reserve(order.size());
    for (std::size_t i : order) out.push_back(pool.ids[i]);
    return out;
}

// Recency ranking: candidates the user has viewed, most recent view first
// (re-views use the latest timestamp), then all never-viewed candidates by id
// ascending.
inline std::vector<std::string> rvi_rank(const UserHistory& history, const std::vector<std::string>& candidate_ids) {
    std::unordered_map<std::string, std::int64_t> latest_view;
    for (const auto& ev : history.events) {
        if (ev.event_type != EventType::ItemView) continue;
        auto [it, inserted] = latest_view.emplace(ev.item_id, ev.timestamp);
        if (!inserted && ev.timestamp > it->second) it->second = ev.timestamp;
    }
    std::vector<std::pair<std::int64_t, std::string>> viewed;
    std::vector<std::string> tail;
    for (const auto& id : candidate_ids) {
        auto it = latest_view.find(id);
        if (it != latest_view.end()) {
            viewed.emplace_back(it->second, id);
        } else {
            tail.push_back(id);
        }
    }
    std::sort(viewed.begin(), viewed.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::sort(tail.begin(), tail.end());
    std::vector<std::string> out;
    out.reserve(candidate_ids.size());
    for (auto& [ts, id] : viewed) out.push_back(id);
    for (auto& id : tail) out.push_back(id);
    return out;
}

// ---------------------------------------------------------------------------
// Recall@k
// ---------------------------------------------------------------------------

struct RecallResult {
    double value = 0.0;
    std::size_t counted = 0;
    std::size_t excluded = 0;
};

inline RecallResult recall_at_k_detail(const std::vector<std::vector<std::string>>& rankings,
                                       const std::vector<std::unordered_set<std::string>>& relevants,
                                       std::size_t k) {
    if (k < 1) throw ConfigError("recall_at_k: k must be >= 1");
    if (rankings.size() != relevants.size()) throw ConfigError("recall_at_k: size mismatch");
    RecallResult res;
    double sum = 0.0;
    for (std::size_t i = 0; i < rankings.size(); ++i) {
        if (relevants[i].empty()) {
            ++res.excluded;
            continue;
        }
        std::size_t hits = 0;
        const std::size_t limit = std::min(k, rankings[i].size());
        for (std::size_t j = 0; j < limit; ++j) {
            if (relevants[i].count(rankings[i][j])) ++hits;
        }
        sum += static_cast<double>(hits) / static_cast<double>(relevants[i].size());
        ++res.counted;
    }
    res.value = res.counted == 0 ? 0.0 : sum / static_cast<double>(res.counted);
    return res;
}

inline double recall_at_k(const std::vector<std::vector<std::string>>& rankings,
                          const std::vector<std::unordered_set<std::string>>& relevants, std::size_t k) {
    return recall_at_k_detail(rankings, relevants, k).value;
}

// ---------------------------------------------------------------------------
// Full evaluation harness
// ---------------------------------------------------------------------------

namespace eval_detail {

// Rank the pool for one impression: model affinity when the history encodes,
// recency tail when it is empty.
inline std::vector<std::size_t> rank_impression(const ModelParams& params, UserTower tower,
                                                const FeatureSpace& space, const EmbeddedPool& pool,
                                                const std::vector<std::size_t>& ids_ascending,
                                                const UserHistory& history, bool* used_fallback) {
    if (!history.events.empty()) {
        try {
            Embedding u = encode_user(params, tower, history, space);
            if (used_fallback) *used_fallback = false;
            return rank_pool(u.values, pool);
        } catch (const EmptyHistoryError&) {
            // all events unresolvable; fall through to the recency tail
        }
    }
    if (used_fallback) *used_fallback = true;
    std::unordered_map<std::string, std::int64_t> latest_view;
    for (const auto& ev : history.events) {
        if (ev.event_type != EventType::ItemView) continue;
        auto [it, inserted] = latest_view.emplace(ev.item_id, ev.timestamp);
        if (!inserted && ev.timestamp > it->second) it->second = ev.timestamp;
    }
    std::vector<std::size_t> order;
    order.reserve(pool.size());
    std::vector<std::pair<std::int64_t, std::size_t>> viewed;
    std::vector<std::size_t> tail;
    for (std::size_t idx : ids_ascending) {
        auto it = latest_view.find(pool.ids[idx]);
        if (it != latest_view.end()) {
            viewed.emplace_back(it->second, idx);
        } else {
            tail.push_back(idx);
        }
    }
    std::stable_sort(viewed.begin(), viewed.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (auto& [ts, idx] : viewed) order.push_back(idx);
    for (std::size_t idx : tail) order.push_back(idx);
    return order;
}

inline std::vector<std::size_t> ids_ascending_order(const EmbeddedPool& pool) {
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return pool.ids[a] < pool.ids[b]; });
    return order;
}

inline void check_pool_coverage(const std::vector<LabeledImpression>& split, const EmbeddedPool& pool) {
    std::vector<std::string> missing;
    for (const auto& li : split) {
        for (const auto& id : li.impression.positive_item_ids) {
            if (!pool.index.count(id)) missing.push_back(id);
        }
    }
    if (!missing.empty()) {
        std::string msg = "candidate pool is missing " + std::to_string(missing.size()) + " positive item(s):";
        for (std::size_t i = 0; i < missing.size() && i < 8; ++i) msg += " " + missing[i];
        throw CoverageError(msg);
    }
}

// Shared aggregation: the ranker maps an impression to a pool-index ordering.
template <typename RankFn>
EvalReport aggregate(const std::vector<LabeledImpression>& split, const EmbeddedPool& pool, RankFn&& rank) {
    EvalReport report;
    report.pool_size = pool.size();
    constexpr std::size_t n_ks = sizeof(kRecallKs) / sizeof(kRecallKs[0]);
    double sums[n_ks] = {0};
    for (const auto& li : split) {
        if (li.impression.positive_item_ids.empty()) {
            ++report.excluded;
            continue;
        }
        bool fallback = false;
        std::vector<std::size_t> order = rank(li, &fallback);
        if (fallback) ++report.fallback_count;
        std::unordered_set<std::size_t> relevant;
        for (const auto& id : li.impression.positive_item_ids) relevant.insert(pool.index.at(id));
        const std::size_t max_k = kRecallKs[n_ks - 1];
        std::size_t hits = 0;
        std::size_t ki = 0;
        for (std::size_t rankpos = 0; rankpos < order.size() && rankpos < max_k; ++rankpos) {
            while (ki < n_ks && rankpos == kRecallKs[ki]) {
                sums[ki] += static_cast<double>(hits) / static_cast<double>(relevant.size());
                ++ki;
            }
            if (relevant.count(order[rankpos])) ++hits;
        }
        while (ki < n_ks) {
            sums[ki] += static_cast<double>(hits) / static_cast<double>(relevant.size());
            ++ki;
        }
        ++report.impressions;
    }
    for (std::size_t ki = 0; ki < n_ks; ++ki) {
        const double v = report.impressions == 0 ? 0.0 : sums[ki] / static_cast<double>(report.impressions);
        report.recall_at_k.emplace_back(kRecallKs[ki], v);
    }
    return report;
}

}  // namespace eval_detail

// Model evaluation over a fixed candidate pool; the pool must contain every
// test positive. Optional prediction-time history cut for the ablation.
inline EvalReport evaluate_model(const ModelParams& params, UserTower tower, const FeatureSpace& space,
                                 const std::vector<LabeledImpression>& split, const EmbeddedPool& pool,
                                 std::int64_t missing_window_seconds = 0) {
    eval_detail::check_pool_coverage(split, pool);
    const auto ids_asc = eval_detail::ids_ascending_order(pool);
    return eval_detail::aggregate(split, pool, [&](const LabeledImpression& li, bool* fb) {
        if (missing_window_seconds > 0) {
            UserHistory cut = apply_history_skip(li.history, li.impression.impression_time, missing_window_seconds);
            return eval_detail::rank_impression(params, tower, space, pool, ids_asc, cut, fb);
        }
        return eval_detail::rank_impression(params, tower, space, pool, ids_asc, li.history, fb);
    });
}

// The recency baseline through the same aggregation path.
inline EvalReport evaluate_rvi(const std::vector<LabeledImpression>& split, const EmbeddedPool& pool) {
    eval_detail::check_pool_coverage(split, pool);
    const auto ids_asc = eval_detail::ids_ascending_order(pool);
    return eval_detail::aggregate(split, pool, [&](const LabeledImpression& li, bool* fb) {
        if (fb) *fb = li.history.events.empty();
        std::unordered_map<std::string, std::int64_t> latest_view;
        for (const auto& ev : li.history.events) {
            if (ev.event_type != EventType::ItemView) continue;
            auto [it, inserted] = latest_view.emplace(ev.item_id, ev.timestamp);
            if (!inserted && ev.timestamp > it->second) it->second = ev.timestamp;
        }
        std::vector<std::pair<std::int64_t, std::size_t>> viewed;
        std::vector<std::size_t> tail;
        for (std::size_t idx : ids_asc) {
            auto it = latest_view.find(pool.ids[idx]);
            if (it != latest_view.end()) {
                viewed.emplace_back(it->second, idx);
            } else {
                tail.push_back(idx);
            }
        }
        std::stable_sort(viewed.begin(), viewed.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        std::vector<std::size_t> order;
        order.reserve(pool.size());
        for (auto& [ts, idx] : viewed) order.push_back(idx);
        for (std::size_t idx : tail) order.push_back(idx);
        return order;
    });
}

// Recall@20 as a function of how much trailing history is hidden at
// prediction time. Window 0 reproduces evaluate_model() exactly.
inline AblationCurve ablation_curve(const ModelParams& params, UserTower tower, const FeatureSpace& space,
                                    const std::vector<LabeledImpression>& split, const EmbeddedPool& pool,
                                    const std::vector<double>& missing_minutes,
                                    std::int64_t model_skip_seconds = 0) {
    for (std::size_t i = 1; i < missing_minutes.size(); ++i) {
        if (missing_minutes[i] <= missing_minutes[i - 1])
            throw ConfigError("ablation_curve: windows must be strictly increasing");
    }
    AblationCurve curve;
    curve.model_skip_seconds = model_skip_seconds;
    for (double minutes : missing_minutes) {
        const auto window = static_cast<std::int64_t>(minutes * 60.0);
        EvalReport rep = evaluate_model(params, tower, space, split, pool, window);
        curve.points.push_back({minutes, rep.recall(20)});
    }
    return curve;
}

inline double trapezoid_auc(const AblationCurve& curve) {
    double auc = 0.0;
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        const auto& a = curve.points[i - 1];
        const auto& b = curve.points[i];
        auc += 0.5 * (a.recall_at_20 + b.recall_at_20) * (b.missing_minutes - a.missing_minutes);
    }
    return auc;
}

// Production-model selection: largest area under the ablation curve, ties in
// favor of the smaller training skip window.
inline std::size_t select_by_auc(const std::vector<AblationCurve>& curves) {
    if (curves.empty()) throw ConfigError("select_by_auc: no curves");
    std::size_t best = 0;
    double best_auc = trapezoid_auc(curves[0]);
    for (std::size_t i = 1; i < curves.size(); ++i) {
        const double auc = trapezoid_auc(curves[i]);
        if (auc > best_auc ||
            (auc == best_auc && curves[i].model_skip_seconds < curves[best].model_skip_seconds)) {
            best = i;
            best_auc = auc;
        }
    }
    return best;
}

}  // namespace recsys
