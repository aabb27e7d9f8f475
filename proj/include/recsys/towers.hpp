#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "recsys/corpus.hpp"
#include "recsys/error.hpp"
#include "recsys/nn.hpp"
#include "recsys/text.hpp"

namespace recsys {

// At most this many most-recent events are encoded per user; recurrent
// encoding over unbounded histories is a runtime hazard.
constexpr std::size_t kHistoryMaxEvents = 200;

// The item encoder sees only content features; item identity never enters.
struct ItemFeatures {
    std::vector<TokenId> title_ids;
    std::vector<TokenId> aspect_ids;
    std::int32_t category_id = 0;

    bool operator==(const ItemFeatures& o) const {
        return category_id == o.category_id && title_ids == o.title_ids && aspect_ids == o.aspect_ids;
    }
};

struct ItemFeaturesHash {
    std::size_t operator()(const ItemFeatures& f) const {
        std::size_t h = static_cast<std::size_t>(f.category_id) * 1000003u;
        for (TokenId id : f.title_ids) h = h * 131 + static_cast<std::size_t>(id) + 7;
        h = h * 131 + 0x9e3779b9u;
        for (TokenId id : f.aspect_ids) h = h * 131 + static_cast<std::size_t>(id) + 7;
        return h;
    }
};

struct Embedding {
    std::vector<Real> values;  // unit norm
};

struct EncodedEvent {
    std::vector<Real> vector;  // D item coordinates ++ 4 event-type coordinates
    std::int64_t timestamp = 0;
};

// Vocabulary context shared by feature assembly and the towers. The last
// category row is reserved for queries without a category.
struct FeatureSpace {
    Vocabulary title_vocab;
    Vocabulary aspect_vocab;
    std::size_t category_count = 0;  // rows in the category table, UNKNOWN included
    std::unordered_map<std::string, ItemFeatures> items_by_id;
    std::vector<std::string> item_ids;  // canonical (input) order

    std::int32_t unknown_category() const { return static_cast<std::int32_t>(category_count) - 1; }

    ItemFeatures features_for(const ItemRecord& item) const {
        ItemFeatures f;
        f.title_ids = encode(title_vocab, tokenize(item.title));
        std::vector<std::string> aspect_tokens;
        for (const auto& a : item.aspects) {
            std::string tok = aspect_token(a);
            if (!tok.empty()) aspect_tokens.push_back(std::move(tok));
        }
        f.aspect_ids = encode(aspect_vocab, aspect_tokens);
        if (item.category_id < 0 || static_cast<std::size_t>(item.category_id) >= category_count)
            throw DataError("features_for: category_id " + std::to_string(item.category_id) +
                            " outside table of " + std::to_string(category_count) + " rows");
        f.category_id = item.category_id;
        return f;
    }

    void index_items(const std::vector<ItemRecord>& items) {
        items_by_id.clear();
        items_by_id.reserve(items.size());
        item_ids.clear();
        item_ids.reserve(items.size());
        for (const auto& item : items) {
            items_by_id.emplace(item.item_id, features_for(item));
            item_ids.push_back(item.item_id);
        }
    }
};

inline FeatureSpace build_feature_space(const std::vector<ItemRecord>& items, std::size_t n_categories,
                                        std::size_t vocab_max_size = 400000, std::size_t aspect_vocab_max_size = 100000,
                                        std::size_t min_frequency = 1) {
    FeatureSpace space;
    std::vector<std::string> title_stream, aspect_stream;
    for (const auto& item : items) {
        for (auto& t : tokenize(item.title)) title_stream.push_back(std::move(t));
        for (const auto& a : item.aspects) {
            std::string tok = aspect_token(a);
            if (!tok.empty()) aspect_stream.push_back(std::move(tok));
        }
    }
    space.title_vocab = build_vocab(title_stream, vocab_max_size, min_frequency);
    space.aspect_vocab = build_vocab(aspect_stream, aspect_vocab_max_size, min_frequency);
    space.category_count = n_categories + 1;  // + UNKNOWN
    space.index_items(items);
    return space;
}

// ---------------------------------------------------------------------------
// Item tower
// ---------------------------------------------------------------------------

struct ItemEncodeCache {
    ItemFeatures feats;
    MlpCache mlp;
    std::vector<Real> normalized;
    double prenorm_norm = 0.0;
};

inline Embedding encode_item(const ModelParams& p, const ItemFeatures& f, ItemEncodeCache* cache = nullptr) {
    std::vector<Real> title_mean = cbow_mean(p.title_table, f.title_ids);
    std::vector<Real> aspect_mean = cbow_mean(p.aspect_table, f.aspect_ids);
    if (f.category_id < 0 || static_cast<std::size_t>(f.category_id) >= p.category_table.rows())
        throw DataError("encode_item: category_id out of range");
    const Real* cat_row = p.category_table.row(static_cast<std::size_t>(f.category_id));

    std::vector<Real> x;
    x.reserve(title_mean.size() + aspect_mean.size() + p.category_table.cols());
    x.insert(x.end(), title_mean.begin(), title_mean.end());
    x.insert(x.end(), aspect_mean.begin(), aspect_mean.end());
    x.insert(x.end(), cat_row, cat_row + p.category_table.cols());

    MlpCache local;
    std::vector<Real> pre = mlp_forward(p.item_mlp, x, cache ? &cache->mlp : &local);
    const double norm = std::sqrt(squared_norm(pre));
    if (!(norm > kNormEpsilon)) throw DegenerateVectorError("encode_item: degenerate pre-normalization vector");
    Embedding emb;
    emb.values.resize(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) emb.values[i] = static_cast<Real>(static_cast<double>(pre[i]) / norm);
    if (cache) {
        cache->feats = f;
        cache->normalized = emb.values;
        cache->prenorm_norm = norm;
    }
    return emb;
}

inline void encode_item_backward(const ModelParams& p, const ItemEncodeCache& c,
                                 const std::vector<Real>& grad_v, ModelGrads& g) {
    std::vector<Real> gpre = l2_normalize_backward(c.normalized, c.prenorm_norm, grad_v);
    std::vector<Real> gx = mlp_backward(p.item_mlp, c.mlp, gpre, g.item_mlp);

    const std::size_t dt = p.title_table.cols();
    const std::size_t dc = p.category_table.cols();
    std::vector<Real> g_title(gx.begin(), gx.begin() + dt);
    std::vector<Real> g_aspect(gx.begin() + dt, gx.begin() + 2 * dt);
    cbow_mean_backward(g.title_table, c.feats.title_ids, g_title);
    cbow_mean_backward(g.aspect_table, c.feats.aspect_ids, g_aspect);
    Real* cat_grad = g.category_table.row(static_cast<std::size_t>(c.feats.category_id));
    for (std::size_t j = 0; j < dc; ++j) cat_grad[j] += gx[2 * dt + j];
}

// Batch-level memo of encoded items keyed by feature identity. Upstream
// gradients accumulate per unique item and flow back once per batch.
class ItemCachePool {
public:
    std::size_t get_or_encode(const ModelParams& p, const ItemFeatures& f) {
        auto it = index_.find(f);
        if (it != index_.end()) return it->second;
        Entry e;
        e.emb = encode_item(p, f, &e.cache);
        e.grad.assign(e.emb.values.size(), Real(0));
        entries_.push_back(std::move(e));
        const std::size_t idx = entries_.size() - 1;
        index_.emplace(f, idx);
        return idx;
    }

    const Embedding& embedding(std::size_t idx) const { return entries_[idx].emb; }

    void accumulate_grad(std::size_t idx, const std::vector<Real>& g, double scale) {
        auto& grad = entries_[idx].grad;
        for (std::size_t i = 0; i < grad.size(); ++i)
            grad[i] += static_cast<Real>(static_cast<double>(g[i]) * scale);
    }

    void backward(const ModelParams& p, ModelGrads& grads) {
        for (auto& e : entries_) {
            encode_item_backward(p, e.cache, e.grad, grads);
        }
    }

    void clear() {
        index_.clear();
        entries_.clear();
    }

    std::size_t size() const { return entries_.size(); }

private:
    struct Entry {
        Embedding emb;
        ItemEncodeCache cache;
        std::vector<Real> grad;
    };
    std::unordered_map<ItemFeatures, std::size_t, ItemFeaturesHash> index_;
    std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Events and pseudo-items
// ---------------------------------------------------------------------------

inline ItemFeatures pseudo_item_from_query(const UserEvent& ev, const FeatureSpace& space) {
    if (ev.event_type != EventType::SearchQuery)
        throw DataError("pseudo_item_from_query: event is not a search query");
    ItemFeatures f;
    f.title_ids = encode(space.title_vocab, tokenize(ev.query_text));
    f.aspect_ids = {};
    if (ev.query_category_id) {
        if (*ev.query_category_id < 0 || static_cast<std::size_t>(*ev.query_category_id) >= space.category_count)
            throw DataError("pseudo_item_from_query: query_category_id out of range");
        f.category_id = *ev.query_category_id;
    } else {
        f.category_id = space.unknown_category();
    }
    return f;
}

inline const ItemFeatures& resolve_event_item(const UserEvent& ev, const FeatureSpace& space) {
    auto it = space.items_by_id.find(ev.item_id);
    if (it == space.items_by_id.end())
        throw DataError("encode_event: unknown item_id '" + ev.item_id + "'");
    return it->second;
}

inline EncodedEvent encode_event(const ModelParams& p, const UserEvent& ev, const FeatureSpace& space) {
    ItemFeatures feats;
    if (ev.event_type == EventType::ItemView) {
        feats = resolve_event_item(ev, space);
    } else {
        feats = pseudo_item_from_query(ev, space);
    }
    Embedding emb = encode_item(p, feats);
    EncodedEvent out;
    out.timestamp = ev.timestamp;
    out.vector = std::move(emb.values);
    const auto row = static_cast<std::size_t>(ev.event_type);
    const Real* type_row = p.event_type_table.row(row);
    out.vector.insert(out.vector.end(), type_row, type_row + p.event_type_table.cols());
    return out;
}

// ---------------------------------------------------------------------------
// User tower
// ---------------------------------------------------------------------------

enum class UserTower { Cboe, Recurrent };

inline const char* user_tower_name(UserTower t) { return t == UserTower::Cboe ? "cboe" : "recurrent"; }

inline UserTower user_tower_from_name(const std::string& name) {
    if (name == "cboe") return UserTower::Cboe;
    if (name == "recurrent") return UserTower::Recurrent;
    throw ConfigError("unknown user tower '" + name + "'");
}

namespace tower_detail {

struct EventRef {
    std::size_t pool_index;  // embedded (pseudo-)item in the batch pool
    int type_row;
};

// Resolve, truncate and embed a history into per-event input vectors.
// Events referencing unknown items are skipped and counted.
inline std::vector<EventRef> prepare_events(const ModelParams& p, const UserHistory& history,
                                            const FeatureSpace& space, ItemCachePool& pool,
                                            std::size_t* skipped) {
    std::vector<EventRef> refs;
    const std::size_t n = history.events.size();
    const std::size_t start = n > kHistoryMaxEvents ? n - kHistoryMaxEvents : 0;
    for (std::size_t i = start; i < n; ++i) {
        const UserEvent& ev = history.events[i];
        ItemFeatures feats;
        if (ev.event_type == EventType::ItemView) {
            auto it = space.items_by_id.find(ev.item_id);
            if (it == space.items_by_id.end()) {
                if (skipped) ++*skipped;
                continue;
            }
            feats = it->second;
        } else {
            feats = pseudo_item_from_query(ev, space);
        }
        refs.push_back({pool.get_or_encode(p, feats), static_cast<int>(ev.event_type)});
    }
    return refs;
}

inline std::vector<Real> event_vector(const ModelParams& p, const ItemCachePool& pool, const EventRef& ref) {
    std::vector<Real> x = pool.embedding(ref.pool_index).values;
    const Real* type_row = p.event_type_table.row(static_cast<std::size_t>(ref.type_row));
    x.insert(x.end(), type_row, type_row + p.event_type_table.cols());
    return x;
}

}  // namespace tower_detail

struct UserCboeCache {
    std::vector<tower_detail::EventRef> events;
    std::vector<Real> mean_vec;
    MlpCache mlp;
    std::vector<Real> normalized;
    double prenorm_norm = 0.0;
};

struct UserRecurrentCache {
    std::vector<tower_detail::EventRef> events;
    std::vector<GruStepCache> steps;
    std::vector<Real> mean_out;
    std::vector<Real> normalized;
    double prenorm_norm = 0.0;
};

inline Embedding encode_user_cboe_cached(const ModelParams& p, const UserHistory& history,
                                         const FeatureSpace& space, ItemCachePool& pool,
                                         UserCboeCache& cache, std::size_t* skipped = nullptr) {
    cache.events = tower_detail::prepare_events(p, history, space, pool, skipped);
    if (cache.events.empty()) throw EmptyHistoryError("encode_user_cboe: empty history");
    const std::size_t dim = p.hp.d + p.hp.event_type_dim;
    std::vector<double> acc(dim, 0.0);
    for (const auto& ref : cache.events) {
        std::vector<Real> x = tower_detail::event_vector(p, pool, ref);
        for (std::size_t j = 0; j < dim; ++j) acc[j] += static_cast<double>(x[j]);
    }
    cache.mean_vec.resize(dim);
    const double inv = 1.0 / static_cast<double>(cache.events.size());
    for (std::size_t j = 0; j < dim; ++j) cache.mean_vec[j] = static_cast<Real>(acc[j] * inv);

    std::vector<Real> pre = mlp_forward(p.user_mlp, cache.mean_vec, &cache.mlp);
    const double norm = std::sqrt(squared_norm(pre));
    if (!(norm > kNormEpsilon)) throw DegenerateVectorError("encode_user_cboe: degenerate pre-normalization vector");
    Embedding emb;
    emb.values.resize(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) emb.values[i] = static_cast<Real>(static_cast<double>(pre[i]) / norm);
    cache.normalized = emb.values;
    cache.prenorm_norm = norm;
    return emb;
}

inline void encode_user_cboe_backward(const ModelParams& p, const UserCboeCache& c, ItemCachePool& pool,
                                      const std::vector<Real>& grad_u, double scale, ModelGrads& g) {
    std::vector<Real> gu(grad_u.size());
    for (std::size_t i = 0; i < gu.size(); ++i) gu[i] = static_cast<Real>(static_cast<double>(grad_u[i]) * scale);
    std::vector<Real> gpre = l2_normalize_backward(c.normalized, c.prenorm_norm, gu);
    std::vector<Real> gmean = mlp_backward(p.user_mlp, c.mlp, gpre, g.user_mlp);

    const std::size_t d = p.hp.d;
    const std::size_t et = p.hp.event_type_dim;
    const double inv = 1.0 / static_cast<double>(c.events.size());
    std::vector<Real> g_item(d);
    for (std::size_t j = 0; j < d; ++j) g_item[j] = static_cast<Real>(static_cast<double>(gmean[j]) * inv);
    for (const auto& ref : c.events) {
        pool.accumulate_grad(ref.pool_index, g_item, 1.0);
        Real* et_grad = g.event_type_table.row(static_cast<std::size_t>(ref.type_row));
        for (std::size_t j = 0; j < et; ++j)
            et_grad[j] += static_cast<Real>(static_cast<double>(gmean[d + j]) * inv);
    }
}

inline Embedding encode_user_recurrent_cached(const ModelParams& p, const UserHistory& history,
                                              const FeatureSpace& space, ItemCachePool& pool,
                                              UserRecurrentCache& cache, std::size_t* skipped = nullptr) {
    cache.events = tower_detail::prepare_events(p, history, space, pool, skipped);
    if (cache.events.empty()) throw EmptyHistoryError("encode_user_recurrent: empty history");
    const std::size_t d = p.hp.d;
    cache.steps.resize(cache.events.size());
    std::vector<Real> h(d, Real(0));
    std::vector<double> acc(d, 0.0);
    for (std::size_t t = 0; t < cache.events.size(); ++t) {
        std::vector<Real> x = tower_detail::event_vector(p, pool, cache.events[t]);
        h = gru_step(p.gru, x, h, &cache.steps[t]);
        for (std::size_t j = 0; j < d; ++j) acc[j] += static_cast<double>(h[j]);
    }
    cache.mean_out.resize(d);
    const double inv = 1.0 / static_cast<double>(cache.events.size());
    for (std::size_t j = 0; j < d; ++j) cache.mean_out[j] = static_cast<Real>(acc[j] * inv);

    const double norm = std::sqrt(squared_norm(cache.mean_out));
    if (!(norm > kNormEpsilon))
        throw DegenerateVectorError("encode_user_recurrent: degenerate pre-normalization vector");
    Embedding emb;
    emb.values.resize(d);
    for (std::size_t i = 0; i < d; ++i)
        emb.values[i] = static_cast<Real>(static_cast<double>(cache.mean_out[i]) / norm);
    cache.normalized = emb.values;
    cache.prenorm_norm = norm;
    return emb;
}

inline void encode_user_recurrent_backward(const ModelParams& p, const UserRecurrentCache& c,
                                           ItemCachePool& pool, const std::vector<Real>& grad_u,
                                           double scale, ModelGrads& g) {
    const std::size_t d = p.hp.d;
    const std::size_t n = c.events.size();
    std::vector<Real> gu(grad_u.size());
    for (std::size_t i = 0; i < gu.size(); ++i) gu[i] = static_cast<Real>(static_cast<double>(grad_u[i]) * scale);
    std::vector<Real> gmean = l2_normalize_backward(c.normalized, c.prenorm_norm, gu);
    std::vector<Real> per_step(d);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < d; ++j) per_step[j] = static_cast<Real>(static_cast<double>(gmean[j]) * inv);

    std::vector<Real> dh = per_step;
    std::vector<Real> dx, dh_prev;
    for (std::size_t t = n; t-- > 0;) {
        gru_step_backward(p.gru, c.steps[t], dh, g.gru, dx, dh_prev);
        // Split the input gradient: item coordinates and event-type row.
        std::vector<Real> g_item(dx.begin(), dx.begin() + d);
        pool.accumulate_grad(c.events[t].pool_index, g_item, 1.0);
        Real* et_grad = g.event_type_table.row(static_cast<std::size_t>(c.events[t].type_row));
        for (std::size_t j = 0; j < p.hp.event_type_dim; ++j) et_grad[j] += dx[d + j];
        if (t > 0) {
            dh = dh_prev;
            for (std::size_t j = 0; j < d; ++j) dh[j] += per_step[j];
        }
    }
}

// Serving-path entry points: no gradient caches, self-contained.
inline Embedding encode_user_cboe(const ModelParams& p, const UserHistory& history, const FeatureSpace& space,
                                  std::size_t* skipped = nullptr) {
    ItemCachePool pool;
    UserCboeCache cache;
    return encode_user_cboe_cached(p, history, space, pool, cache, skipped);
}

inline Embedding encode_user_recurrent(const ModelParams& p, const UserHistory& history,
                                       const FeatureSpace& space, std::size_t* skipped = nullptr) {
    ItemCachePool pool;
    UserRecurrentCache cache;
    return encode_user_recurrent_cached(p, history, space, pool, cache, skipped);
}

inline Embedding encode_user(const ModelParams& p, UserTower tower, const UserHistory& history,
                             const FeatureSpace& space, std::size_t* skipped = nullptr) {
    return tower == UserTower::Cboe ? encode_user_cboe(p, history, space, skipped)
                                    : encode_user_recurrent(p, history, space, skipped);
}

}  // namespace recsys
