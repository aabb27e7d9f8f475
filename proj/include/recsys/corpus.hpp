#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "recsys/error.hpp"

namespace recsys {

enum class EventType { ItemView = 0, SearchQuery = 1 };

struct ItemRecord {
    std::string item_id;
    std::string title;
    std::int32_t category_id = 0;
    std::vector<std::string> aspects;  // raw "key:value" strings
};

struct UserEvent {
    std::string user_id;
    std::int64_t timestamp = 0;
    EventType event_type = EventType::ItemView;
    std::string item_id;                            // present iff ItemView
    std::string query_text;                         // present iff SearchQuery
    std::optional<std::int32_t> query_category_id;  // optional, SearchQuery only
};

struct ImpressionRecord {
    std::string user_id;
    std::int64_t impression_time = 0;
    std::vector<std::string> positive_item_ids;
    std::vector<std::string> negative_item_ids;
};

struct UserHistory {
    std::vector<UserEvent> events;  // time-ascending, all strictly before reference_time
    std::int64_t reference_time = 0;
};

struct LabeledImpression {
    UserHistory history;
    ImpressionRecord impression;
};

struct DatasetSplit {
    std::vector<LabeledImpression> train;
    std::vector<LabeledImpression> validation;
    std::vector<LabeledImpression> test;
};

struct CorpusConfig {
    std::size_t n_users = 1000;
    std::size_t n_items = 5000;
    std::size_t n_categories = 20;
    std::size_t n_latent_interests = 10;
    std::size_t events_per_user_min = 20;
    std::size_t events_per_user_max = 60;
    std::size_t impressions_per_user = 3;
    std::int64_t history_window_seconds = 2592000;  // 30 days
    std::uint64_t rng_seed = 1;

    // Click model shape. With weight near 1 the clicked item follows the
    // interest of the user's latest session, which makes event order carry
    // signal; re_view_click_prob re-engages recently viewed items.
    double last_interest_click_weight = 0.5;
    double re_view_click_prob = 0.2;

    // Time-based split boundaries as fractions of the impression-time span.
    double train_time_fraction = 0.8;
    double val_time_fraction = 0.1;

    void validate() const {
        auto positive = [](std::size_t v, const char* field) {
            if (v == 0) throw ConfigError(std::string("corpus config: ") + field + " must be > 0");
        };
        positive(n_users, "n_users");
        positive(n_items, "n_items");
        positive(n_categories, "n_categories");
        positive(n_latent_interests, "n_latent_interests");
        positive(events_per_user_min, "events_per_user_min");
        positive(events_per_user_max, "events_per_user_max");
        positive(impressions_per_user, "impressions_per_user");
        if (events_per_user_min > events_per_user_max)
            throw ConfigError("corpus config: events_per_user_min exceeds events_per_user_max");
        if (history_window_seconds <= 0) throw ConfigError("corpus config: history_window_seconds must be > 0");
        if (last_interest_click_weight < 0.0 || last_interest_click_weight > 1.0)
            throw ConfigError("corpus config: last_interest_click_weight must be in [0,1]");
        if (re_view_click_prob < 0.0 || re_view_click_prob > 1.0)
            throw ConfigError("corpus config: re_view_click_prob must be in [0,1]");
        if (train_time_fraction <= 0.0 || val_time_fraction <= 0.0 ||
            train_time_fraction + val_time_fraction >= 1.0)
            throw ConfigError("corpus config: train_time_fraction/val_time_fraction must be positive and sum below 1");
    }
};

struct Corpus {
    std::vector<ItemRecord> items;
    std::vector<UserEvent> events;
    std::vector<ImpressionRecord> impressions;
};

// ---------------------------------------------------------------------------
// JSONL serialization. One object per line, UTF-8, keys fixed per record type.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json parse_line(const std::string& line, std::size_t line_number) {
    try {
        return nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), line_number);
    }
}

template <typename T>
T require_field(const nlohmann::json& j, const char* key, std::size_t line_number) {
    if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'", line_number);
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError(std::string("field '") + key + "' has wrong type", line_number);
    }
}

template <typename Fn>
void for_each_line(const std::string& path, Fn&& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        fn(line, line_number);
    }
}

}  // namespace detail

inline void save_items(const std::vector<ItemRecord>& items, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    for (const auto& item : items) {
        nlohmann::json j;
        j["item_id"] = item.item_id;
        j["title"] = item.title;
        j["category_id"] = item.category_id;
        j["aspects"] = item.aspects;
        out << j.dump() << "\n";
    }
}

inline std::vector<ItemRecord> load_items(const std::string& path) {
    std::vector<ItemRecord> items;
    std::unordered_set<std::string> seen;
    detail::for_each_line(path, [&](const std::string& line, std::size_t n) {
        auto j = detail::parse_line(line, n);
        ItemRecord item;
        item.item_id = detail::require_field<std::string>(j, "item_id", n);
        item.title = detail::require_field<std::string>(j, "title", n);
        item.category_id = detail::require_field<std::int32_t>(j, "category_id", n);
        item.aspects = detail::require_field<std::vector<std::string>>(j, "aspects", n);
        if (item.item_id.empty()) throw ParseError("empty item_id", n);
        if (item.category_id < 0) throw ParseError("category_id must be >= 0", n);
        if (!seen.insert(item.item_id).second)
            throw DataError("duplicate item_id '" + item.item_id + "' in " + path);
        items.push_back(std::move(item));
    });
    return items;
}

inline void save_events(const std::vector<UserEvent>& events, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    for (const auto& ev : events) {
        nlohmann::json j;
        j["user_id"] = ev.user_id;
        j["timestamp"] = ev.timestamp;
        if (ev.event_type == EventType::ItemView) {
            j["event_type"] = "item_view";
            j["item_id"] = ev.item_id;
        } else {
            j["event_type"] = "search_query";
            j["query_text"] = ev.query_text;
            if (ev.query_category_id) j["query_category_id"] = *ev.query_category_id;
        }
        out << j.dump() << "\n";
    }
}

inline std::vector<UserEvent> load_events(const std::string& path) {
    std::vector<UserEvent> events;
    detail::for_each_line(path, [&](const std::string& line, std::size_t n) {
        auto j = detail::parse_line(line, n);
        UserEvent ev;
        ev.user_id = detail::require_field<std::string>(j, "user_id", n);
        ev.timestamp = detail::require_field<std::int64_t>(j, "timestamp", n);
        if (ev.timestamp < 0) throw ParseError("timestamp must be >= 0", n);
        const std::string type = detail::require_field<std::string>(j, "event_type", n);
        if (type == "item_view") {
            ev.event_type = EventType::ItemView;
            ev.item_id = detail::require_field<std::string>(j, "item_id", n);
            if (j.contains("query_text")) throw ParseError("item_view carries query_text", n);
        } else if (type == "search_query") {
            ev.event_type = EventType::SearchQuery;
            ev.query_text = detail::require_field<std::string>(j, "query_text", n);
            if (j.contains("item_id")) throw ParseError("search_query carries item_id", n);
            if (j.contains("query_category_id"))
                ev.query_category_id = detail::require_field<std::int32_t>(j, "query_category_id", n);
        } else {
            throw ParseError("unknown event_type '" + type + "'", n);
        }
        events.push_back(std::move(ev));
    });
    return events;
}

inline void save_impressions(const std::vector<ImpressionRecord>& impressions, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    for (const auto& imp : impressions) {
        nlohmann::json j;
        j["user_id"] = imp.user_id;
        j["impression_time"] = imp.impression_time;
        j["positive_item_ids"] = imp.positive_item_ids;
        j["negative_item_ids"] = imp.negative_item_ids;
        out << j.dump() << "\n";
    }
}

inline std::vector<ImpressionRecord> load_impressions(const std::string& path) {
    std::vector<ImpressionRecord> impressions;
    detail::for_each_line(path, [&](const std::string& line, std::size_t n) {
        auto j = detail::parse_line(line, n);
        ImpressionRecord imp;
        imp.user_id = detail::require_field<std::string>(j, "user_id", n);
        imp.impression_time = detail::require_field<std::int64_t>(j, "impression_time", n);
        imp.positive_item_ids = detail::require_field<std::vector<std::string>>(j, "positive_item_ids", n);
        imp.negative_item_ids = detail::require_field<std::vector<std::string>>(j, "negative_item_ids", n);
        if (imp.positive_item_ids.empty()) throw ParseError("positive_item_ids must be nonempty", n);
        for (const auto& pos : imp.positive_item_ids) {
            for (const auto& neg : imp.negative_item_ids) {
                if (pos == neg) throw ParseError("item '" + pos + "' is both positive and negative", n);
            }
        }
        impressions.push_back(std::move(imp));
    });
    return impressions;
}

// Drops the MOST RECENT events: everything with timestamp above
// impression_time - skip_window goes, never random ones. May return an empty
// history.
inline UserHistory apply_history_skip(const UserHistory& history, std::int64_t impression_time,
                                      std::int64_t skip_window) {
    if (skip_window < 0) throw ConfigError("apply_history_skip: skip_window must be >= 0");
    UserHistory out;
    out.reference_time = history.reference_time;
    const std::int64_t cutoff = impression_time - skip_window;
    for (const auto& ev : history.events) {
        if (ev.timestamp <= cutoff) out.events.push_back(ev);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

// Time-based three-way split with per-user dedup (earliest impression kept per
// split) and per-impression history windows [t - W, t).
inline DatasetSplit build_dataset(const std::vector<ItemRecord>& items, const std::vector<UserEvent>& events,
                                  const std::vector<ImpressionRecord>& impressions, const CorpusConfig& cfg) {
    cfg.validate();
    if (impressions.empty()) throw DataError("build_dataset: empty impression set");

    std::unordered_set<std::string> item_ids;
    item_ids.reserve(items.size());
    for (const auto& item : items) item_ids.insert(item.item_id);

    // Per-user events, time-ascending (stable for equal timestamps).
    std::unordered_map<std::string, std::vector<UserEvent>> by_user;
    for (const auto& ev : events) by_user[ev.user_id].push_back(ev);
    for (auto& [user, evs] : by_user) {
        std::stable_sort(evs.begin(), evs.end(),
                         [](const UserEvent& a, const UserEvent& b) { return a.timestamp < b.timestamp; });
    }

    std::int64_t lo = impressions.front().impression_time;
    std::int64_t hi = lo;
    for (const auto& imp : impressions) {
        lo = std::min(lo, imp.impression_time);
        hi = std::max(hi, imp.impression_time);
    }
    const double span = static_cast<double>(hi - lo) + 1.0;
    const std::int64_t t_val = lo + static_cast<std::int64_t>(span * cfg.train_time_fraction);
    const std::int64_t t_test = lo + static_cast<std::int64_t>(span * (cfg.train_time_fraction + cfg.val_time_fraction));

    std::vector<const ImpressionRecord*> buckets[3];
    for (const auto& imp : impressions) {
        for (const auto& id : imp.positive_item_ids) {
            if (!item_ids.count(id)) throw DataError("build_dataset: unknown positive item '" + id + "'");
        }
        for (const auto& id : imp.negative_item_ids) {
            if (!item_ids.count(id)) throw DataError("build_dataset: unknown negative item '" + id + "'");
        }
        const int b = imp.impression_time >= t_test ? 2 : (imp.impression_time >= t_val ? 1 : 0);
        buckets[b].push_back(&imp);
    }

    DatasetSplit split;
    std::vector<LabeledImpression>* outs[3] = {&split.train, &split.validation, &split.test};
    for (int b = 0; b < 3; ++b) {
        auto& bucket = buckets[b];
        std::stable_sort(bucket.begin(), bucket.end(), [](const ImpressionRecord* a, const ImpressionRecord* b2) {
            if (a->impression_time != b2->impression_time) return a->impression_time < b2->impression_time;
            return a->user_id < b2->user_id;
        });
        std::unordered_set<std::string> kept_users;
        for (const ImpressionRecord* imp : bucket) {
            if (!kept_users.insert(imp->user_id).second) continue;  // keep earliest, drop the rest
            LabeledImpression li;
            li.impression = *imp;
            li.history.reference_time = imp->impression_time;
            auto it = by_user.find(imp->user_id);
            if (it != by_user.end()) {
                const std::int64_t window_start = imp->impression_time - cfg.history_window_seconds;
                for (const auto& ev : it->second) {
                    if (ev.timestamp >= window_start && ev.timestamp < imp->impression_time)
                        li.history.events.push_back(ev);
                }
            }
            outs[b]->push_back(std::move(li));
        }
    }
    return split;
}

}  // namespace recsys
