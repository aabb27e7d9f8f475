#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "recsys/corpus.hpp"
#include "recsys/rng.hpp"

namespace recsys {

// Generator side-channel for tests that need the latent structure.
struct CorpusMeta {
    std::vector<std::uint32_t> item_interest;                // per item index
    std::vector<std::vector<std::uint32_t>> user_interests;  // per user index, phase order
    std::unordered_map<std::string, std::size_t> item_index;
    std::unordered_map<std::string, std::size_t> user_index;
};

namespace synth_detail {

inline std::string format_id(const char* prefix, std::size_t n, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s-%0*zu", prefix, width, n);
    return std::string(buf);
}

inline std::string make_word(Rng& rng) {
    static const char cons[] = "bcdfgklmnprstvz";
    static const char vows[] = "aeiou";
    std::string w;
    const std::size_t syllables = 2 + rng.uniform_index(3);
    for (std::size_t i = 0; i < syllables; ++i) {
        w.push_back(cons[rng.uniform_index(sizeof(cons) - 1)]);
        w.push_back(vows[rng.uniform_index(sizeof(vows) - 1)]);
    }
    if (rng.bernoulli(0.12)) w += std::to_string(rng.uniform_index(90) + 10);
    return w;
}

inline std::string unique_word(Rng& rng, std::unordered_set<std::string>& used) {
    for (;;) {
        std::string w = make_word(rng);
        if (used.insert(w).second) return w;
    }
}

}  // namespace synth_detail

// Deterministic latent-interest marketplace. Every user carries 1-3 interests
// plus a per-interest taste (a token subset); items are token bags drawn from
// interest pools. Activity is organized into short sessions, each themed on
// one interest; impressions land seconds after a session ends, and the click
// follows the session's interest, so the most recent activity is the
// strongest predictor of what was clicked.
inline Corpus generate_corpus(const CorpusConfig& cfg, CorpusMeta* meta = nullptr) {
    using namespace synth_detail;
    cfg.validate();
    Rng rng(cfg.rng_seed);
    const std::size_t n_interests = cfg.n_latent_interests;

    // Token universe.
    const std::size_t pool_size = 40;
    const std::size_t common_size = 60;
    const std::size_t taste_size = 12;
    std::unordered_set<std::string> used_words;
    std::vector<std::vector<std::string>> pools(n_interests);
    for (auto& pool : pools) {
        pool.reserve(pool_size);
        for (std::size_t i = 0; i < pool_size; ++i) pool.push_back(unique_word(rng, used_words));
    }
    std::vector<std::string> common;
    common.reserve(common_size);
    for (std::size_t i = 0; i < common_size; ++i) common.push_back(unique_word(rng, used_words));

    // Interest -> category lists (round-robin partition of category ids).
    std::vector<std::vector<std::int32_t>> cats(n_interests);
    for (std::size_t c = 0; c < cfg.n_categories; ++c) cats[c % n_interests].push_back(static_cast<std::int32_t>(c));
    for (std::size_t g = 0; g < n_interests; ++g) {
        if (cats[g].empty()) cats[g].push_back(static_cast<std::int32_t>(g % cfg.n_categories));
    }

    // Interest-specific aspect values.
    static const char* kAspectKeys[] = {"brand", "color", "model", "line"};
    constexpr std::size_t n_keys = 4;
    constexpr std::size_t values_per_key = 5;
    std::vector<std::vector<std::vector<std::string>>> aspect_values(n_interests);
    for (std::size_t g = 0; g < n_interests; ++g) {
        aspect_values[g].resize(n_keys);
        for (std::size_t k = 0; k < n_keys; ++k) {
            for (std::size_t i = 0; i < values_per_key; ++i)
                aspect_values[g][k].push_back(unique_word(rng, used_words));
        }
    }

    Corpus corpus;
    CorpusMeta local_meta;
    CorpusMeta& md = meta ? *meta : local_meta;

    // ---- items -------------------------------------------------------------
    corpus.items.reserve(cfg.n_items);
    md.item_interest.resize(cfg.n_items);
    std::vector<std::vector<std::string>> item_tokens(cfg.n_items);
    std::vector<std::vector<std::size_t>> items_by_interest(n_interests);
    for (std::size_t i = 0; i < cfg.n_items; ++i) {
        const std::size_t g = i % n_interests;
        md.item_interest[i] = static_cast<std::uint32_t>(g);
        items_by_interest[g].push_back(i);

        ItemRecord item;
        item.item_id = format_id("item", i, 6);
        md.item_index.emplace(item.item_id, i);

        const std::size_t n_tokens = 4 + rng.uniform_index(5);
        std::unordered_set<std::string> seen;
        std::vector<std::string>& toks = item_tokens[i];
        while (toks.size() < n_tokens) {
            const auto& source = rng.bernoulli(0.78) ? pools[g] : common;
            const std::string& w = source[rng.uniform_index(source.size())];
            if (seen.insert(w).second) toks.push_back(w);
        }
        // Render the title with organic casing and separators; tokenize()
        // recovers exactly the token list.
        std::string title;
        for (std::size_t t = 0; t < toks.size(); ++t) {
            std::string w = toks[t];
            if (rng.bernoulli(0.25)) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
            if (t > 0) {
                const double r = rng.uniform();
                title += (r < 0.08) ? ", " : (r < 0.13 ? " - " : " ");
            }
            title += w;
        }
        item.title = std::move(title);

        const std::size_t n_aspects = 1 + rng.uniform_index(3);
        std::vector<std::size_t> key_order = {0, 1, 2, 3};
        rng.shuffle(key_order);
        for (std::size_t a = 0; a < n_aspects && a < n_keys; ++a) {
            const std::size_t k = key_order[a];
            const std::string& val = aspect_values[g][k][rng.uniform_index(values_per_key)];
            item.aspects.push_back(std::string(kAspectKeys[k]) + ":" + val);
        }

        item.category_id = rng.bernoulli(0.9) ? cats[g][rng.uniform_index(cats[g].size())]
                                              : static_cast<std::int32_t>(rng.uniform_index(cfg.n_categories));
        corpus.items.push_back(std::move(item));
    }

    // ---- users, sessions, events, impressions ------------------------------
    md.user_interests.resize(cfg.n_users);
    const std::int64_t horizon = cfg.history_window_seconds;
    const std::int64_t session_gap_min = 4 * 3600;

    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        const std::string user_id = format_id("user", u, 5);
        md.user_index.emplace(user_id, u);

        const std::size_t k_interests = 1 + rng.uniform_index(std::min<std::size_t>(3, n_interests));
        std::vector<std::uint32_t>& interests = md.user_interests[u];
        while (interests.size() < k_interests) {
            const auto g = static_cast<std::uint32_t>(rng.uniform_index(n_interests));
            if (std::find(interests.begin(), interests.end(), g) == interests.end()) interests.push_back(g);
        }

        // Per-interest taste and match scores over that interest's items.
        std::vector<std::unordered_set<std::string>> taste(k_interests);
        std::vector<std::vector<int>> overlap(k_interests);
        std::vector<std::vector<double>> view_weight(k_interests);
        std::vector<double> view_total(k_interests, 0.0);
        for (std::size_t gi = 0; gi < k_interests; ++gi) {
            const auto& pool = pools[interests[gi]];
            while (taste[gi].size() < taste_size) taste[gi].insert(pool[rng.uniform_index(pool.size())]);
            const auto& members = items_by_interest[interests[gi]];
            overlap[gi].resize(members.size());
            view_weight[gi].resize(members.size());
            for (std::size_t k = 0; k < members.size(); ++k) {
                int ov = 0;
                for (const auto& tok : item_tokens[members[k]]) ov += taste[gi].count(tok) ? 1 : 0;
                overlap[gi][k] = ov;
                view_weight[gi][k] = std::exp(0.5 * ov);
                view_total[gi] += view_weight[gi][k];
            }
        }

        const std::size_t n_events = cfg.events_per_user_min +
                                     rng.uniform_index(cfg.events_per_user_max - cfg.events_per_user_min + 1);
        std::size_t n_sessions = std::max<std::size_t>({n_events / 5, k_interests, cfg.impressions_per_user});
        n_sessions = std::min<std::size_t>(n_sessions, 14);

        // Contiguous interest phases over the session sequence; the final
        // sessions belong to the final interest.
        auto session_interest = [&](std::size_t s) { return (s * k_interests) / n_sessions; };

        // Session start times, kept at least session_gap_min apart so a
        // 60-minute history cut never reaches past the current session.
        std::vector<std::int64_t> session_start(n_sessions);
        {
            const std::int64_t spread = horizon * 8 / 10;
            std::vector<std::int64_t> draws(n_sessions);
            for (auto& t : draws) t = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(spread)));
            std::sort(draws.begin(), draws.end());
            std::int64_t prev = -session_gap_min;
            for (std::size_t s = 0; s < n_sessions; ++s) {
                std::int64_t t = std::max(draws[s], prev + session_gap_min);
                session_start[s] = t;
                prev = t;
            }
        }

        std::vector<std::size_t> events_in_session(n_sessions, n_events / n_sessions);
        for (std::size_t s = 0; s < n_events % n_sessions; ++s) events_in_session[s] += 1;
        for (auto& c : events_in_session) c = std::max<std::size_t>(c, 2);

        std::vector<std::int64_t> session_end(n_sessions);
        std::vector<std::size_t> viewed_sequence;  // item indices in view order
        std::unordered_set<std::size_t> viewed_set;

        struct PendingImpression {
            std::size_t session;
            std::int64_t time;
            std::size_t views_visible;  // prefix of viewed_sequence before this impression
        };
        std::vector<PendingImpression> pending;

        for (std::size_t s = 0; s < n_sessions; ++s) {
            const std::size_t gi = session_interest(s);
            const std::uint32_t g = interests[gi];
            std::int64_t t = session_start[s];
            for (std::size_t e = 0; e < events_in_session[s]; ++e) {
                if (e > 0) t += 15 + static_cast<std::int64_t>(rng.uniform_index(46));
                UserEvent ev;
                ev.user_id = user_id;
                ev.timestamp = t;
                if (rng.bernoulli(0.25)) {
                    ev.event_type = EventType::SearchQuery;
                    const std::size_t n_q = 1 + rng.uniform_index(3);
                    std::vector<std::string> picks(taste[gi].begin(), taste[gi].end());
                    std::sort(picks.begin(), picks.end());
                    std::string q;
                    for (std::size_t qi = 0; qi < n_q; ++qi) {
                        if (qi) q += ' ';
                        q += picks[rng.uniform_index(picks.size())];
                    }
                    ev.query_text = std::move(q);
                    if (rng.bernoulli(0.85))
                        ev.query_category_id = cats[g][rng.uniform_index(cats[g].size())];
                } else {
                    ev.event_type = EventType::ItemView;
                    std::size_t item_idx;
                    if (rng.bernoulli(0.9)) {
                        const auto& members = items_by_interest[g];
                        item_idx = members[rng.weighted_index(view_weight[gi], view_total[gi])];
                    } else {
                        item_idx = rng.uniform_index(cfg.n_items);
                    }
                    ev.item_id = corpus.items[item_idx].item_id;
                    viewed_sequence.push_back(item_idx);
                    viewed_set.insert(item_idx);
                }
                corpus.events.push_back(std::move(ev));
            }
            session_end[s] = t;
            if (s + cfg.impressions_per_user >= n_sessions) {
                pending.push_back({s, t + 30 + static_cast<std::int64_t>(rng.uniform_index(91)), viewed_sequence.size()});
            }
        }

        // Impressions: one at the tail of each of the last sessions.
        for (const auto& pi : pending) {
            const std::size_t cur_gi = session_interest(pi.session);
            ImpressionRecord imp;
            imp.user_id = user_id;
            imp.impression_time = pi.time;

            const std::size_t n_pos = rng.bernoulli(0.85) ? 1 : 2;
            std::unordered_set<std::size_t> slate;
            std::vector<std::size_t> positives;

            // Click weights over the user's own-interest items: the current
            // session's interest dominates with last_interest_click_weight.
            auto click_positive = [&]() -> std::size_t {
                if (rng.bernoulli(cfg.re_view_click_prob) && pi.views_visible > 0) {
                    // Re-engage one of the last distinct items viewed before
                    // this impression.
                    std::vector<std::size_t> recent;
                    std::unordered_set<std::size_t> seen;
                    for (std::size_t vi = pi.views_visible; vi-- > 0 && recent.size() < 10;) {
                        const std::size_t idx = viewed_sequence[vi];
                        if (seen.insert(idx).second) recent.push_back(idx);
                    }
                    if (!recent.empty()) return recent[rng.uniform_index(recent.size())];
                }
                // Fresh item matching the current mission; avoid already
                // viewed items so the recency baseline has to be beaten on
                // content, not overlap.
                const double w_last = cfg.last_interest_click_weight;
                for (int attempt = 0; attempt < 60; ++attempt) {
                    const std::size_t gi = rng.bernoulli(w_last) ? cur_gi : rng.uniform_index(k_interests);
                    const auto& members = items_by_interest[interests[gi]];
                    std::vector<double> w(members.size());
                    double total = 0.0;
                    for (std::size_t k = 0; k < members.size(); ++k) {
                        w[k] = std::exp(1.2 * overlap[gi][k]);
                        total += w[k];
                    }
                    const std::size_t idx = members[rng.weighted_index(w, total)];
                    if (!viewed_set.count(idx) || attempt >= 40) return idx;
                }
                return items_by_interest[interests[cur_gi]][0];
            };

            for (std::size_t p = 0; p < n_pos; ++p) {
                for (int attempt = 0; attempt < 40; ++attempt) {
                    const std::size_t idx = click_positive();
                    if (slate.insert(idx).second) {
                        positives.push_back(idx);
                        break;
                    }
                }
            }

            // Plausible same-interest negatives plus random background.
            const std::size_t slate_size = 12;
            while (slate.size() < slate_size) {
                std::size_t idx;
                if (slate.size() < positives.size() + 5) {
                    const std::size_t gi = rng.uniform_index(k_interests);
                    const auto& members = items_by_interest[interests[gi]];
                    std::vector<double> w(members.size());
                    double total = 0.0;
                    for (std::size_t k = 0; k < members.size(); ++k) {
                        w[k] = std::exp(0.5 * overlap[gi][k]);
                        total += w[k];
                    }
                    idx = members[rng.weighted_index(w, total)];
                } else {
                    idx = rng.uniform_index(cfg.n_items);
                }
                slate.insert(idx);
            }

            std::unordered_set<std::size_t> pos_set(positives.begin(), positives.end());
            for (std::size_t idx : positives) imp.positive_item_ids.push_back(corpus.items[idx].item_id);
            std::vector<std::size_t> negatives;
            for (std::size_t idx : slate) {
                if (!pos_set.count(idx)) negatives.push_back(idx);
            }
            std::sort(negatives.begin(), negatives.end());
            for (std::size_t idx : negatives) imp.negative_item_ids.push_back(corpus.items[idx].item_id);
            corpus.impressions.push_back(std::move(imp));
        }
    }
    return corpus;
}

}  // namespace recsys
