#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "recsys/binio.hpp"
#include "recsys/checkpoint.hpp"
#include "recsys/corpus.hpp"
#include "recsys/retrieval.hpp"
#include "recsys/towers.hpp"

namespace recsys {

// Checkpoint and feature space disagree on vocabulary sizes.
struct CompatibilityError : DataError {
    using DataError::DataError;
};

struct PipelinePaths {
    std::string items;
    std::string events;
    std::string title_vocab;
    std::string aspect_vocab;
    std::string checkpoint;
    std::string item_embeddings;
    std::string user_embeddings;
    std::string cold_users;  // sidecar listing users with no effective history
    std::string index;
    std::string store;
    std::string report;
};

struct PipelineConfig {
    PipelinePaths paths;
    std::size_t candidate_min_clicks = 2;
    std::int64_t candidate_click_window_seconds = 345600;  // 4 days
    std::int64_t user_activity_window_seconds = 2592000;   // 30 days
    RetrievalConfig retrieval;                             // n defaults to 12
    std::size_t fallback_top_popular = 12;
    std::int64_t reference_time = 0;  // 0 = max event timestamp + 1
    std::size_t kmeans_seed = 17;

    void validate() const {
        if (candidate_click_window_seconds <= 0)
            throw ConfigError("pipeline config: candidate_click_window_seconds must be > 0");
        if (user_activity_window_seconds <= 0)
            throw ConfigError("pipeline config: user_activity_window_seconds must be > 0");
        if (retrieval.n < 1 || retrieval.m < 1) throw ConfigError("pipeline config: retrieval n/m must be >= 1");
    }
};

inline std::int64_t resolve_reference_time(const PipelineConfig& cfg, const std::vector<UserEvent>& events) {
    if (cfg.reference_time > 0) return cfg.reference_time;
    std::int64_t max_ts = 0;
    for (const auto& ev : events) max_ts = std::max(max_ts, ev.timestamp);
    return max_ts + 1;
}

// ---------------------------------------------------------------------------
// Candidate filter and popularity
// ---------------------------------------------------------------------------

// Items with candidate_min_clicks or more item views inside
// [reference - window, reference). Order follows the item input order.
inline std::vector<std::string> filter_candidates(const std::vector<ItemRecord>& items,
                                                  const std::vector<UserEvent>& click_events,
                                                  const PipelineConfig& cfg, std::int64_t reference_time) {
    std::unordered_map<std::string, std::size_t> clicks;
    const std::int64_t lo = reference_time - cfg.candidate_click_window_seconds;
    for (const auto& ev : click_events) {
        if (ev.event_type != EventType::ItemView) continue;
        if (ev.timestamp >= lo && ev.timestamp < reference_time) ++clicks[ev.item_id];
    }
    std::vector<std::string> out;
    for (const auto& item : items) {
        auto it = clicks.find(item.item_id);
        const std::size_t count = it == clicks.end() ? 0 : it->second;
        if (count >= cfg.candidate_min_clicks) out.push_back(item.item_id);
    }
    return out;
}

// Most-clicked candidates, click count descending then id ascending; the
// cold-user fallback list.
inline std::vector<RetrievedItem> top_popular_candidates(const std::vector<std::string>& candidates,
                                                         const std::vector<UserEvent>& click_events,
                                                         const PipelineConfig& cfg,
                                                         std::int64_t reference_time) {
    std::unordered_map<std::string, std::size_t> clicks;
    const std::int64_t lo = reference_time - cfg.candidate_click_window_seconds;
    for (const auto& ev : click_events) {
        if (ev.event_type != EventType::ItemView) continue;
        if (ev.timestamp >= lo && ev.timestamp < reference_time) ++clicks[ev.item_id];
    }
    std::vector<RetrievedItem> ranked;
    ranked.reserve(candidates.size());
    for (const auto& id : candidates) {
        auto it = clicks.find(id);
        ranked.push_back({id, static_cast<Real>(it == clicks.end() ? 0 : it->second)});
    }
    std::sort(ranked.begin(), ranked.end(), [](const RetrievedItem& a, const RetrievedItem& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    if (ranked.size() > cfg.fallback_top_popular) ranked.resize(cfg.fallback_top_popular);
    return ranked;
}

// ---------------------------------------------------------------------------
// Batch embedding
// ---------------------------------------------------------------------------

inline void check_compatibility(const ModelParams& params, const FeatureSpace& space) {
    if (params.title_vocab != space.title_vocab.size() || params.aspect_vocab != space.aspect_vocab.size() ||
        params.category_vocab != space.category_count)
        throw CompatibilityError(
            "checkpoint vocabulary sizes (" + std::to_string(params.title_vocab) + "," +
            std::to_string(params.aspect_vocab) + "," + std::to_string(params.category_vocab) +
            ") do not match the feature space (" + std::to_string(space.title_vocab.size()) + "," +
            std::to_string(space.aspect_vocab.size()) + "," + std::to_string(space.category_count) + ")");
}

inline std::size_t batch_embed_items(const ModelParams& params, const FeatureSpace& space,
                                     const std::vector<std::string>& item_ids, const std::string& out_path) {
    check_compatibility(params, space);
    std::vector<EmbeddingRecord> records;
    records.reserve(item_ids.size());
    for (const auto& id : item_ids) {
        auto it = space.items_by_id.find(id);
        if (it == space.items_by_id.end()) throw DataError("batch_embed_items: unknown item '" + id + "'");
        records.push_back({id, encode_item(params, it->second).values});
    }
    save_embeddings(records, params.hp.d, out_path);
    return records.size();
}

struct UserEmbedResult {
    std::size_t embedded = 0;
    std::size_t cold = 0;
};

// One embedding per user with activity in the window; users with empty
// effective histories are skipped and listed in the sidecar for fallback
// handling. User order follows first appearance in the event stream.
inline UserEmbedResult batch_embed_users(const ModelParams& params, UserTower tower, const FeatureSpace& space,
                                         const std::vector<UserEvent>& events, const PipelineConfig& cfg,
                                         std::int64_t reference_time, const std::string& out_path,
                                         const std::string& sidecar_path) {
    check_compatibility(params, space);
    std::vector<std::string> user_order;
    std::unordered_map<std::string, std::vector<UserEvent>> by_user;
    for (const auto& ev : events) {
        auto [it, inserted] = by_user.try_emplace(ev.user_id);
        if (inserted) user_order.push_back(ev.user_id);
        it->second.push_back(ev);
    }

    const std::int64_t lo = reference_time - cfg.user_activity_window_seconds;
    std::vector<EmbeddingRecord> records;
    std::ofstream sidecar(sidecar_path, std::ios::binary);
    if (!sidecar) throw DataError("batch_embed_users: cannot open " + sidecar_path);
    UserEmbedResult result;
    for (const auto& user : user_order) {
        auto& evs = by_user[user];
        std::stable_sort(evs.begin(), evs.end(),
                         [](const UserEvent& a, const UserEvent& b) { return a.timestamp < b.timestamp; });
        UserHistory history;
        history.reference_time = reference_time;
        for (const auto& ev : evs) {
            if (ev.timestamp >= lo && ev.timestamp < reference_time) history.events.push_back(ev);
        }
        if (history.events.empty()) {
            sidecar << user << "\n";
            ++result.cold;
            continue;
        }
        try {
            records.push_back({user, encode_user(params, tower, history, space).values});
            ++result.embedded;
        } catch (const EmptyHistoryError&) {
            sidecar << user << "\n";
            ++result.cold;
        }
    }
    if (!sidecar) throw DataError("batch_embed_users: write failed for " + sidecar_path);
    save_embeddings(records, params.hp.d, out_path);
    return result;
}

// ---------------------------------------------------------------------------
// Results store: magic "ERST1", header, then per user an id line, a
// "count source" line and count id/score records.
// ---------------------------------------------------------------------------

struct StoreEntry {
    std::vector<RetrievedItem> items;
    bool fallback = false;
};

struct ResultsStore {
    std::vector<std::pair<std::string, StoreEntry>> entries;
    std::int64_t generation = 0;
};

namespace pipeline_detail {

inline void write_store_stream(const ResultsStore& store, std::ostream& out) {
    out << "ERST1\n";
    out << "generation=" << store.generation << "\n";
    out << "count=" << store.entries.size() << "\n";
    out << "\n";
    for (const auto& [user, entry] : store.entries) {
        out << user << "\n";
        out << entry.items.size() << " " << (entry.fallback ? "fallback" : "model") << "\n";
        for (const auto& item : entry.items) {
            out << item.id << "\n";
            write_f32(out, static_cast<float>(item.score));
        }
    }
}

}  // namespace pipeline_detail

// Atomic publish: write to "<path>.tmp", then rename over the target, so a
// crash mid-write never leaves a partially visible store.
inline void save_results_store(const ResultsStore& store, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("save_results_store: cannot open " + tmp);
        pipeline_detail::write_store_stream(store, out);
        if (!out) throw DataError("save_results_store: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("save_results_store: rename to " + path + " failed");
}

inline ResultsStore load_results_store(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_results_store: cannot open " + path);
    const std::string magic = read_header_line(in, "magic");
    if (magic != "ERST1") throw DataError("load_results_store: bad magic '" + magic + "' in " + path);
    ResultsStore store;
    std::size_t count = 0;
    for (auto& [k, v] : read_header_fields(in)) {
        if (k == "generation") store.generation = std::stoll(v);
        if (k == "count") count = std::stoull(v);
    }
    for (std::size_t i = 0; i < count; ++i) {
        const std::string user = read_header_line(in, "store user id");
        const std::string meta = read_header_line(in, "store entry header");
        const auto space_pos = meta.find(' ');
        if (space_pos == std::string::npos)
            throw IntegrityError("load_results_store: malformed entry header '" + meta + "'",
                                 static_cast<std::uint64_t>(in.tellg()));
        std::size_t n_items = 0;
        try {
            n_items = std::stoull(meta.substr(0, space_pos));
        } catch (const std::exception&) {
            throw IntegrityError("load_results_store: bad item count in '" + meta + "'",
                                 static_cast<std::uint64_t>(in.tellg()));
        }
        const std::string source = meta.substr(space_pos + 1);
        if (source != "model" && source != "fallback")
            throw IntegrityError("load_results_store: unknown source '" + source + "'",
                                 static_cast<std::uint64_t>(in.tellg()));
        StoreEntry entry;
        entry.fallback = source == "fallback";
        entry.items.reserve(n_items);
        for (std::size_t j = 0; j < n_items; ++j) {
            RetrievedItem item;
            item.id = read_header_line(in, "store item id");
            item.score = static_cast<Real>(read_f32(in));
            entry.items.push_back(std::move(item));
        }
        store.entries.emplace_back(user, std::move(entry));
    }
    return store;
}

struct LookupResult {
    bool found = false;
    StoreEntry entry;
};

// Read-only store probe; unknown users get a clean not-found, not an error.
inline LookupResult lookup(const std::string& store_path, const std::string& user_id) {
    ResultsStore store = load_results_store(store_path);
    for (auto& [user, entry] : store.entries) {
        if (user == user_id) return {true, std::move(entry)};
    }
    return {false, {}};
}

// ---------------------------------------------------------------------------
// Batch retrieval
// ---------------------------------------------------------------------------

// Every input user lands in the store exactly once: embedded users through
// the index, cold users through the popularity fallback.
inline ResultsStore batch_retrieve(const ClusteredIndex& index, const std::vector<EmbeddingRecord>& user_embs,
                                   const std::vector<std::string>& cold_users,
                                   const std::vector<RetrievedItem>& popular_fallback,
                                   const std::unordered_set<std::string>& candidate_set,
                                   const PipelineConfig& cfg, std::int64_t generation) {
    for (const auto& cluster : index.members) {
        for (const auto& item : cluster) {
            if (!candidate_set.count(item.id))
                throw DataError("batch_retrieve: index item '" + item.id + "' outside the candidate universe");
        }
    }
    ResultsStore store;
    store.generation = generation;
    store.entries.reserve(user_embs.size() + cold_users.size());
    for (const auto& rec : user_embs) {
        RetrievalResult res = retrieve(index, rec.values, cfg.retrieval);
        StoreEntry entry;
        entry.items = std::move(res.items);
        store.entries.emplace_back(rec.id, std::move(entry));
    }
    for (const auto& user : cold_users) {
        StoreEntry entry;
        entry.fallback = true;
        entry.items = popular_fallback;
        store.entries.emplace_back(user, entry);
    }
    return store;
}

// ---------------------------------------------------------------------------
// Full offline loop
// ---------------------------------------------------------------------------

struct StageReport {
    std::string name;
    std::string status;  // "ok" or "failed"
    std::size_t count = 0;
    double wall_ms = 0.0;
};

struct PipelineReport {
    std::vector<StageReport> stages;
    bool ok = true;
};

inline nlohmann::json to_json(const PipelineReport& report) {
    nlohmann::json j;
    j["ok"] = report.ok;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : report.stages) {
        j["stages"].push_back({{"name", s.name}, {"status", s.status}, {"count", s.count}, {"wall_ms", s.wall_ms}});
    }
    return j;
}

inline std::vector<std::string> load_cold_users(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_cold_users: cannot open " + path);
    std::vector<std::string> users;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) users.push_back(line);
    }
    return users;
}

// filter -> embed items -> embed users -> build index -> batch retrieve.
// A stage failure halts the run with prior stages' outputs intact; the error
// is rethrown with the stage name attached.
inline PipelineReport run_all(const PipelineConfig& cfg) {
    cfg.validate();
    PipelineReport report;
    auto run_stage = [&](const char* name, auto&& body) {
        const auto t0 = std::chrono::steady_clock::now();
        StageReport sr;
        sr.name = name;
        try {
            sr.count = body();
        } catch (...) {
            sr.status = "failed";
            sr.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            report.stages.push_back(sr);
            report.ok = false;
            if (!cfg.paths.report.empty()) {
                std::ofstream out(cfg.paths.report, std::ios::binary);
                out << to_json(report).dump(2) << "\n";
            }
            try {
                throw;
            } catch (const ConfigError& e) {
                throw ConfigError(std::string("stage ") + name + ": " + e.what());
            } catch (const NumericError& e) {
                throw NumericError(std::string("stage ") + name + ": " + e.what());
            } catch (const DataError& e) {
                throw DataError(std::string("stage ") + name + ": " + e.what());
            } catch (const std::exception& e) {
                throw Error(std::string("stage ") + name + ": " + e.what());
            }
        }
        sr.status = "ok";
        sr.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        report.stages.push_back(sr);
        return sr.count;
    };

    std::vector<ItemRecord> items;
    std::vector<UserEvent> events;
    std::vector<std::string> candidates;
    std::int64_t reference_time = 0;

    run_stage("filter-candidates", [&]() {
        items = load_items(cfg.paths.items);
        events = load_events(cfg.paths.events);
        reference_time = resolve_reference_time(cfg, events);
        candidates = filter_candidates(items, events, cfg, reference_time);
        return candidates.size();
    });

    Checkpoint ck;
    FeatureSpace space;
    run_stage("embed-items", [&]() {
        ck = load_checkpoint(cfg.paths.checkpoint);
        space.title_vocab = load_vocab(cfg.paths.title_vocab);
        space.aspect_vocab = load_vocab(cfg.paths.aspect_vocab);
        space.category_count = ck.params.category_vocab;
        space.index_items(items);
        return batch_embed_items(ck.params, space, candidates, cfg.paths.item_embeddings);
    });

    run_stage("embed-users", [&]() {
        const UserEmbedResult res = batch_embed_users(ck.params, ck.tower, space, events, cfg, reference_time,
                                                      cfg.paths.user_embeddings, cfg.paths.cold_users);
        return res.embedded + res.cold;
    });

    ClusteredIndex index;
    run_stage("build-index", [&]() {
        std::vector<EmbeddingRecord> recs = load_embeddings(cfg.paths.item_embeddings);
        std::vector<IndexedItem> indexed;
        indexed.reserve(recs.size());
        for (auto& r : recs) indexed.push_back({std::move(r.id), std::move(r.values)});
        std::size_t k = cfg.retrieval.k;
        if (k == 0 || k > indexed.size()) k = std::max<std::size_t>(1, indexed.size() / 10);
        index = build_index(indexed, k, ck.params.hp.tau, cfg.retrieval.kmeans_max_iters, cfg.kmeans_seed,
                            reference_time);
        save_index(index, cfg.paths.index);
        return index.total_items();
    });

    run_stage("batch-retrieve", [&]() {
        std::vector<EmbeddingRecord> user_embs = load_embeddings(cfg.paths.user_embeddings);
        std::vector<std::string> cold = load_cold_users(cfg.paths.cold_users);
        std::unordered_set<std::string> candidate_set(candidates.begin(), candidates.end());
        const auto popular = top_popular_candidates(candidates, events, cfg, reference_time);
        RetrievalConfig rcfg = cfg.retrieval;
        rcfg.k = index.cluster_count();
        rcfg.m = std::min(rcfg.m, rcfg.k);
        PipelineConfig effective = cfg;
        effective.retrieval = rcfg;
        ResultsStore store =
            batch_retrieve(index, user_embs, cold, popular, candidate_set, effective, reference_time);
        save_results_store(store, cfg.paths.store);
        return store.entries.size();
    });

    if (!cfg.paths.report.empty()) {
        std::ofstream out(cfg.paths.report, std::ios::binary);
        if (!out) throw DataError("run_all: cannot open report " + cfg.paths.report);
        out << to_json(report).dump(2) << "\n";
    }
    return report;
}

}  // namespace recsys
