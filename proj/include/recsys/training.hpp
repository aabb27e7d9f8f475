#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "recsys/corpus.hpp"
#include "recsys/evaluation.hpp"
#include "recsys/nn.hpp"
#include "recsys/towers.hpp"

namespace recsys {

struct TrainExample {
    UserHistory history;
    ItemFeatures positive;
    std::vector<ItemFeatures> impression_negatives;  // impressed but un-clicked
    std::int64_t impression_time = 0;
};

enum class NegativeMode { InBatch, ObservedUnclicked };

inline const char* negative_mode_name(NegativeMode m) {
    return m == NegativeMode::InBatch ? "in_batch" : "observed_unclicked";
}

inline NegativeMode negative_mode_from_name(const std::string& name) {
    if (name == "in_batch") return NegativeMode::InBatch;
    if (name == "observed_unclicked") return NegativeMode::ObservedUnclicked;
    throw ConfigError("unknown negative mode '" + name + "'");
}

struct TrainConfig {
    HyperParams hp;
    UserTower user_tower = UserTower::Recurrent;
    NegativeMode negative_mode = NegativeMode::InBatch;
    std::int64_t skip_window_seconds = 600;  // training-time history dropout, 10 minutes
    std::size_t observed_negatives = 8;      // per positive in observed-unclicked mode
    std::size_t val_pool_size = 1000;        // sampled candidates per validation impression

    void validate() const {
        hp.validate();
        if (skip_window_seconds < 0) throw ConfigError("train config: skip_window_seconds must be >= 0");
        if (observed_negatives == 0) throw ConfigError("train config: observed_negatives must be > 0");
        if (val_pool_size == 0) throw ConfigError("train config: val_pool_size must be > 0");
    }
};

// Multiple positives in one impression become separate examples sharing the
// history.
inline std::vector<TrainExample> build_train_examples(const std::vector<LabeledImpression>& split,
                                                      const FeatureSpace& space) {
    std::vector<TrainExample> out;
    out.reserve(split.size());
    for (const auto& li : split) {
        std::vector<ItemFeatures> negatives;
        negatives.reserve(li.impression.negative_item_ids.size());
        for (const auto& id : li.impression.negative_item_ids) {
            auto it = space.items_by_id.find(id);
            if (it == space.items_by_id.end()) throw DataError("build_train_examples: unknown item '" + id + "'");
            negatives.push_back(it->second);
        }
        for (const auto& pos_id : li.impression.positive_item_ids) {
            auto it = space.items_by_id.find(pos_id);
            if (it == space.items_by_id.end())
                throw DataError("build_train_examples: unknown item '" + pos_id + "'");
            TrainExample ex;
            ex.history = li.history;
            ex.positive = it->second;
            ex.impression_negatives = negatives;
            ex.impression_time = li.impression.impression_time;
            out.push_back(std::move(ex));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

// Uniform draws with replacement from the multiset of OTHER examples'
// impressed-but-unclicked items. Items feature-identical to the example's own
// positive are rejected and resampled; the example's own impression never
// contributes. Sampling an item impressed twice in the batch is twice as
// likely, mirroring presentation frequency.
inline std::vector<std::vector<ItemFeatures>> sample_in_batch_negatives(
    const std::vector<const TrainExample*>& batch, std::size_t per_positive, Rng& rng) {
    if (batch.size() < 2) throw DataError("sample_in_batch_negatives: batch must have >= 2 examples");
    std::vector<std::pair<std::size_t, std::size_t>> refs;  // (example, negative index)
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t j = 0; j < batch[i]->impression_negatives.size(); ++j) refs.emplace_back(i, j);
    }
    std::vector<std::vector<ItemFeatures>> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::size_t pool = refs.size() - batch[i]->impression_negatives.size();
        if (pool == 0)
            throw DataError("sample_in_batch_negatives: no candidates outside example " + std::to_string(i));
        auto& negs = out[i];
        negs.reserve(per_positive);
        const std::size_t max_attempts = 200 * per_positive + 1000;
        std::size_t attempts = 0;
        while (negs.size() < per_positive) {
            if (++attempts > max_attempts)
                throw DataError("sample_in_batch_negatives: batch too degenerate for example " + std::to_string(i));
            const auto& ref = refs[rng.uniform_index(refs.size())];
            if (ref.first == i) continue;
            const ItemFeatures& f = batch[ref.first]->impression_negatives[ref.second];
            if (f == batch[i]->positive) continue;
            negs.push_back(f);
        }
    }
    return out;
}

inline std::vector<std::vector<ItemFeatures>> sample_in_batch_negatives(const std::vector<TrainExample>& batch,
                                                                        std::size_t per_positive, Rng& rng) {
    std::vector<const TrainExample*> view;
    view.reserve(batch.size());
    for (const auto& ex : batch) view.push_back(&ex);
    return sample_in_batch_negatives(view, per_positive, rng);
}

// First min(per_positive, available) impressed negatives, in impression order.
inline std::vector<ItemFeatures> sample_observed_negatives(const TrainExample& example,
                                                           std::size_t per_positive) {
    const std::size_t n = std::min(per_positive, example.impression_negatives.size());
    return std::vector<ItemFeatures>(example.impression_negatives.begin(),
                                     example.impression_negatives.begin() + n);
}

// ---------------------------------------------------------------------------
// Sampled-softmax NLL
// ---------------------------------------------------------------------------

struct SoftmaxNll {
    double loss = 0.0;
    double dgamma_pos = 0.0;
    std::vector<double> dgamma_neg;
};

// loss = -log( exp(g+) / (exp(g+) + sum_j exp(g_j)) ), log-sum-exp with max
// subtraction. dgamma are softmax probabilities minus the one-hot target.
inline SoftmaxNll softmax_nll(double gamma_pos, const std::vector<double>& gamma_negs) {
    if (gamma_negs.empty()) throw DataError("softmax_nll: at least one negative required");
    double m = gamma_pos;
    for (double g : gamma_negs) m = std::max(m, g);
    double z = std::exp(gamma_pos - m);
    for (double g : gamma_negs) z += std::exp(g - m);
    const double lse = m + std::log(z);

    SoftmaxNll out;
    out.loss = lse - gamma_pos;
    out.dgamma_pos = std::exp(gamma_pos - lse) - 1.0;
    out.dgamma_neg.resize(gamma_negs.size());
    for (std::size_t j = 0; j < gamma_negs.size(); ++j) out.dgamma_neg[j] = std::exp(gamma_negs[j] - lse);
    if (!std::isfinite(out.loss)) throw NumericError("softmax_nll: non-finite loss");
    return out;
}

struct NllLossResult {
    double loss = 0.0;
    ModelGrads grads;             // item-tower parameter gradients
    std::vector<Real> user_grad;  // d loss / d user embedding
};

// Self-contained loss evaluation for one example: encodes the positive and
// every negative, and backpropagates through the item tower. The user-side
// gradient is returned for the caller to push through whichever user tower
// produced the embedding.
inline NllLossResult nll_loss(const ModelParams& params, const std::vector<Real>& user_emb,
                              const ItemFeatures& positive, const std::vector<ItemFeatures>& negatives,
                              double tau) {
    if (negatives.empty()) throw DataError("nll_loss: at least one negative required");
    ItemCachePool pool;
    const std::size_t pos_idx = pool.get_or_encode(params, positive);
    std::vector<std::size_t> neg_idx;
    neg_idx.reserve(negatives.size());
    for (const auto& f : negatives) neg_idx.push_back(pool.get_or_encode(params, f));

    const double gamma_pos = affinity(pool.embedding(pos_idx).values, user_emb, tau);
    std::vector<double> gamma_negs(negatives.size());
    for (std::size_t j = 0; j < neg_idx.size(); ++j)
        gamma_negs[j] = affinity(pool.embedding(neg_idx[j]).values, user_emb, tau);

    const SoftmaxNll sm = softmax_nll(gamma_pos, gamma_negs);

    NllLossResult res;
    res.loss = sm.loss;
    res.grads = make_zero_grads(params);
    res.user_grad.assign(user_emb.size(), Real(0));

    // d gamma / d v = u / tau, d gamma / d u = v / tau.
    std::vector<Real> u_as_real(user_emb.begin(), user_emb.end());
    pool.accumulate_grad(pos_idx, u_as_real, sm.dgamma_pos / tau);
    for (std::size_t i = 0; i < res.user_grad.size(); ++i)
        res.user_grad[i] += static_cast<Real>(sm.dgamma_pos / tau *
                                              static_cast<double>(pool.embedding(pos_idx).values[i]));
    for (std::size_t j = 0; j < neg_idx.size(); ++j) {
        pool.accumulate_grad(neg_idx[j], u_as_real, sm.dgamma_neg[j] / tau);
        const auto& v = pool.embedding(neg_idx[j]).values;
        for (std::size_t i = 0; i < res.user_grad.size(); ++i)
            res.user_grad[i] += static_cast<Real>(sm.dgamma_neg[j] / tau * static_cast<double>(v[i]));
    }
    pool.backward(params, res.grads);
    return res;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainMetricsEntry {
    std::size_t epoch = 0;
    std::size_t step = 0;  // cumulative optimizer steps
    double train_loss = 0.0;
    double val_recall_at_20 = 0.0;
    double wall_ms = 0.0;
};

struct TrainResult {
    ModelParams params;  // snapshot at the best validation Recall@20
    std::vector<TrainMetricsEntry> metrics;
    std::size_t best_epoch = 0;
    double best_val_recall = 0.0;
    std::size_t skipped_events = 0;    // history events referencing unknown items
    std::size_t skipped_examples = 0;  // empty effective history or unusable batch
};

// Divergence aborts carry the last finite parameter snapshot.
struct DivergenceError : NumericError {
    DivergenceError(const std::string& msg, std::shared_ptr<ModelParams> snapshot)
        : NumericError(msg), last_finite(std::move(snapshot)) {}
    std::shared_ptr<ModelParams> last_finite;
};

using EpochCallback = std::function<void(const ModelParams&, const TrainMetricsEntry&)>;

namespace train_detail {

// Validation Recall@20 over per-impression pools of val_pool_size sampled
// items plus the positives. Deterministic per (seed, epoch).
inline double validation_recall20(const ModelParams& params, const TrainConfig& cfg, const FeatureSpace& space,
                                  const std::vector<LabeledImpression>& validation, std::uint64_t epoch) {
    if (validation.empty()) return -1.0;
    const std::size_t n_items = space.item_ids.size();
    std::vector<std::vector<Real>> item_embs(n_items);
    std::unordered_map<std::string, std::size_t> item_order;
    item_order.reserve(n_items);
    for (std::size_t i = 0; i < n_items; ++i) {
        item_embs[i] = encode_item(params, space.items_by_id.at(space.item_ids[i])).values;
        item_order.emplace(space.item_ids[i], i);
    }

    Rng rng(cfg.hp.rng_seed ^ (0x76616cULL + 0x100000001b3ULL * (epoch + 1)));
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto& li : validation) {
        std::vector<Real> u;
        try {
            u = encode_user(params, cfg.user_tower, li.history, space).values;
        } catch (const EmptyHistoryError&) {
            continue;
        }
        std::unordered_set<std::size_t> relevant;
        for (const auto& id : li.impression.positive_item_ids) {
            auto it = item_order.find(id);
            if (it != item_order.end()) relevant.insert(it->second);
        }
        if (relevant.empty()) continue;

        std::unordered_set<std::size_t> pool_set(relevant.begin(), relevant.end());
        const std::size_t target = std::min(cfg.val_pool_size, n_items);
        while (pool_set.size() < relevant.size() + target && pool_set.size() < n_items)
            pool_set.insert(rng.uniform_index(n_items));

        // Top-20 by (score desc, id asc).
        std::vector<std::pair<double, std::size_t>> scored;
        scored.reserve(pool_set.size());
        for (std::size_t idx : pool_set) scored.emplace_back(dot(u, item_embs[idx]), idx);
        auto better = [&](const std::pair<double, std::size_t>& a, const std::pair<double, std::size_t>& b) {
            if (a.first != b.first) return a.first > b.first;
            return space.item_ids[a.second] < space.item_ids[b.second];
        };
        const std::size_t k = std::min<std::size_t>(20, scored.size());
        std::partial_sort(scored.begin(), scored.begin() + k, scored.end(), better);
        std::size_t hits = 0;
        for (std::size_t r = 0; r < k; ++r) {
            if (relevant.count(scored[r].second)) ++hits;
        }
        sum += static_cast<double>(hits) / static_cast<double>(relevant.size());
        ++counted;
    }
    return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

}  // namespace train_detail

// Minibatch sampled-softmax training over both towers. Deterministic under a
// fixed seed: shuffling, sampling and validation pools all derive from
// hp.rng_seed.
inline TrainResult train(const DatasetSplit& dataset, const FeatureSpace& space, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (dataset.train.empty()) throw DataError("train: empty training split");
    const HyperParams& hp = cfg.hp;

    std::vector<TrainExample> examples = build_train_examples(dataset.train, space);
    ModelParams params = init_model(hp, space.title_vocab.size(), space.aspect_vocab.size(), space.category_count);

    TrainResult result;
    result.params = params;
    const bool has_validation = !dataset.validation.empty();
    double best_recall = -2.0;
    std::size_t global_step = 0;

    Rng rng(hp.rng_seed ^ 0x747261696eULL);
    auto last_finite = std::make_shared<ModelParams>(params);
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss_sum = 0.0;
        std::size_t epoch_loss_count = 0;

        for (std::size_t batch_start = 0; batch_start < order.size();) {
            std::size_t batch_end = std::min(batch_start + hp.batch_size, order.size());
            // A trailing single-example batch cannot do in-batch sampling;
            // fold it into this batch.
            if (cfg.negative_mode == NegativeMode::InBatch && order.size() - batch_end == 1)
                batch_end = order.size();

            // Encode users; examples whose effective history is empty are
            // skipped and counted.
            struct ActiveExample {
                const TrainExample* ex;
                UserCboeCache cboe;
                UserRecurrentCache rec;
                std::vector<Real> user_emb;
            };
            ItemCachePool pool;
            std::vector<ActiveExample> active;
            for (std::size_t bi = batch_start; bi < batch_end; ++bi) {
                const TrainExample& ex = examples[order[bi]];
                UserHistory hist = apply_history_skip(ex.history, ex.impression_time, cfg.skip_window_seconds);
                ActiveExample ae;
                ae.ex = &ex;
                try {
                    if (cfg.user_tower == UserTower::Cboe) {
                        ae.user_emb = encode_user_cboe_cached(params, hist, space, pool, ae.cboe,
                                                              &result.skipped_events)
                                          .values;
                    } else {
                        ae.user_emb = encode_user_recurrent_cached(params, hist, space, pool, ae.rec,
                                                                   &result.skipped_events)
                                          .values;
                    }
                } catch (const EmptyHistoryError&) {
                    ++result.skipped_examples;
                    continue;
                }
                active.push_back(std::move(ae));
            }
            batch_start = batch_end;
            if (active.empty()) continue;
            if (cfg.negative_mode == NegativeMode::InBatch && active.size() < 2) {
                result.skipped_examples += active.size();
                continue;
            }

            // Negatives per example.
            std::vector<std::vector<ItemFeatures>> negatives(active.size());
            if (cfg.negative_mode == NegativeMode::InBatch) {
                std::vector<const TrainExample*> view(active.size());
                for (std::size_t i = 0; i < active.size(); ++i) view[i] = active[i].ex;
                negatives = sample_in_batch_negatives(view, hp.negatives_per_positive, rng);
            } else {
                for (std::size_t i = 0; i < active.size(); ++i)
                    negatives[i] = sample_observed_negatives(*active[i].ex, cfg.observed_negatives);
            }

            // Forward/backward. Loss is averaged over the usable examples.
            std::vector<std::size_t> usable;
            for (std::size_t i = 0; i < active.size(); ++i) {
                if (negatives[i].empty()) {
                    ++result.skipped_examples;  // observed mode with no impressed negatives
                } else {
                    usable.push_back(i);
                }
            }
            if (usable.empty()) continue;
            const double scale = 1.0 / static_cast<double>(usable.size());

            ModelGrads grads = make_zero_grads(params);
            double batch_loss = 0.0;
            for (std::size_t ui : usable) {
                ActiveExample& ae = active[ui];
                const std::size_t pos_idx = pool.get_or_encode(params, ae.ex->positive);
                std::vector<std::size_t> neg_idx;
                neg_idx.reserve(negatives[ui].size());
                for (const auto& f : negatives[ui]) neg_idx.push_back(pool.get_or_encode(params, f));

                const double gamma_pos = affinity(pool.embedding(pos_idx).values, ae.user_emb, hp.tau);
                std::vector<double> gamma_negs(neg_idx.size());
                for (std::size_t j = 0; j < neg_idx.size(); ++j)
                    gamma_negs[j] = affinity(pool.embedding(neg_idx[j]).values, ae.user_emb, hp.tau);
                const SoftmaxNll sm = softmax_nll(gamma_pos, gamma_negs);
                batch_loss += sm.loss;

                std::vector<Real> user_grad(ae.user_emb.size(), Real(0));
                pool.accumulate_grad(pos_idx, ae.user_emb, sm.dgamma_pos / hp.tau * scale);
                const auto& vpos = pool.embedding(pos_idx).values;
                for (std::size_t i = 0; i < user_grad.size(); ++i)
                    user_grad[i] += static_cast<Real>(sm.dgamma_pos / hp.tau * static_cast<double>(vpos[i]));
                for (std::size_t j = 0; j < neg_idx.size(); ++j) {
                    pool.accumulate_grad(neg_idx[j], ae.user_emb, sm.dgamma_neg[j] / hp.tau * scale);
                    const auto& v = pool.embedding(neg_idx[j]).values;
                    for (std::size_t i = 0; i < user_grad.size(); ++i)
                        user_grad[i] += static_cast<Real>(sm.dgamma_neg[j] / hp.tau * static_cast<double>(v[i]));
                }

                if (cfg.user_tower == UserTower::Cboe) {
                    encode_user_cboe_backward(params, ae.cboe, pool, user_grad, scale, grads);
                } else {
                    encode_user_recurrent_backward(params, ae.rec, pool, user_grad, scale, grads);
                }
            }
            pool.backward(params, grads);

            const double mean_loss = batch_loss * scale;
            epoch_loss_sum += batch_loss;
            epoch_loss_count += usable.size();
            if (!std::isfinite(mean_loss))
                throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                          std::to_string(global_step),
                                      last_finite);
            try {
                clip_gradients(grads, hp.grad_clip);
                adam_step(params, grads, hp.learning_rate);
            } catch (const NumericError& e) {
                throw DivergenceError(std::string("train: ") + e.what(), last_finite);
            }
            ++global_step;
        }

        const double train_loss = epoch_loss_count == 0 ? 0.0
                                                        : epoch_loss_sum / static_cast<double>(epoch_loss_count);
        if (!std::isfinite(train_loss))
            throw DivergenceError("train: non-finite epoch loss at epoch " + std::to_string(epoch), last_finite);
        const double val_recall =
            train_detail::validation_recall20(params, cfg, space, dataset.validation, epoch);

        TrainMetricsEntry entry;
        entry.epoch = epoch;
        entry.step = global_step;
        entry.train_loss = train_loss;
        entry.val_recall_at_20 = val_recall;
        entry.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.metrics.push_back(entry);
        if (on_epoch) on_epoch(params, entry);

        *last_finite = params;
        if (!has_validation || val_recall > best_recall) {
            best_recall = val_recall;
            result.best_epoch = epoch;
            result.params = params;
        }
    }
    result.best_val_recall = best_recall;
    return result;
}

}  // namespace recsys
