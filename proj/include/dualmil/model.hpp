#pragma once

// Bag branch (attention, hard-positive mask, aggregation, bag head) and
// instance branch forward passes, plus the cache that turns bag-branch
// attention into instance-branch soft labels.

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dualmil/bag.hpp"
#include "dualmil/errors.hpp"
#include "dualmil/nn.hpp"
#include "dualmil/tensor.hpp"

namespace dualmil {

struct MaskResult {
    std::vector<double> masked;          // alpha-tilde
    std::vector<std::size_t> survivors;  // M_i = {j : masked_j > 0}
};

/// Zeroes alpha_j whenever sigmoid(instance_logits_j) >= tau. No renormalization.
///
/// The comparison runs in logit space (z >= log(tau / (1 - tau))) so tau = 1
/// never masks, even for logits whose sigmoid rounds to 1.0 in double precision.
inline MaskResult hpm_mask(std::span<const double> alpha, std::span<const double> instance_logits,
                           double tau) {
    if (alpha.size() != instance_logits.size()) {
        throw DimensionError("hpm_mask: attention and logits differ in length");
    }
    const double cut = tau >= 1.0   ? std::numeric_limits<double>::infinity()
                       : tau <= 0.0 ? -std::numeric_limits<double>::infinity()
                                    : std::log(tau / (1.0 - tau));
    MaskResult r;
    r.masked.resize(alpha.size());
    for (std::size_t j = 0; j < alpha.size(); ++j) {
        r.masked[j] = instance_logits[j] >= cut ? 0.0 : alpha[j];
        if (r.masked[j] > 0.0) r.survivors.push_back(j);
    }
    return r;
}

/// H_i = sum_j weights_j * h_j for weights [n] and features [n x d] -> [d].
inline Tensor aggregate(const Tensor& weights, const Tensor& features) {
    if (weights.rank() != 1 || features.rank() != 2 || weights.size() != features.rows()) {
        throw DimensionError("aggregate: weights " + shape_string(weights.shape()) + " vs features " +
                             shape_string(features.shape()));
    }
    return reshape(matmul(reshape(weights, {1, weights.size()}), features), {features.cols()});
}

/// Per-bag attention state after one forward pass.
struct AttentionRecord {
    std::vector<double> raw;
    std::vector<double> normalized;
    std::vector<double> masked;
    std::vector<std::size_t> survivors;
    long epoch_stamp = -1;
};

/// Bag id -> raw attention from that bag's most recent training-mode forward.
class SoftLabelCache {
public:
    struct Entry {
        std::vector<double> raw;
        long epoch_stamp = -1;
    };

    void store(const std::string& bag_id, std::vector<double> raw, long epoch) {
        entries_[bag_id] = Entry{std::move(raw), epoch};
    }

    const Entry* find(const std::string& bag_id) const {
        auto it = entries_.find(bag_id);
        return it == entries_.end() ? nullptr : &it->second;
    }

    const Entry& at(const std::string& bag_id) const {
        const Entry* e = find(bag_id);
        if (!e) throw ContractError("no cached attention for bag '" + bag_id + "'");
        return *e;
    }

    std::size_t size() const { return entries_.size(); }
    const std::map<std::string, Entry>& entries() const { return entries_; }

private:
    std::map<std::string, Entry> entries_;
};

struct ForwardOptions {
    bool training = false;
    double tau = 0.75;
    long epoch = 0;
};

struct BagForwardOut {
    Tensor features;         // H: [n x d]
    Tensor raw_scores;       // supervising raw attention a_i: [n]
    Tensor alpha;            // softmax(a_i)
    Tensor masked_alpha;     // alpha-tilde
    std::vector<std::size_t> survivors;  // M_i as produced by the mask
    bool mask_empty = false;
    Tensor bag_logits;       // [n_classes]
    Tensor bag_prob;         // scalar: softmax(bag_logits)[1]
    Tensor instance_logits;  // [n]
    std::size_t k_star = 0;
    std::size_t predicted_class = 0;
    std::size_t critical_instance = 0;  // DSMIL m

    /// Indices used by loss terms: M_i, or every instance when M_i is empty.
    std::vector<std::size_t> effective_survivors() const {
        if (!mask_empty) return survivors;
        std::vector<std::size_t> all(raw_scores.size());
        for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
        return all;
    }

    AttentionRecord record(long epoch) const {
        return {std::vector<double>(raw_scores.values().begin(), raw_scores.values().end()),
                std::vector<double>(alpha.values().begin(), alpha.values().end()),
                std::vector<double>(masked_alpha.values().begin(), masked_alpha.values().end()),
                survivors, epoch};
    }
};

/// Full bag-branch forward pass.
///
/// Encodes the bag, scores and normalizes attention, applies the hard-positive
/// mask in training mode only, aggregates, and classifies. In training mode
/// the supervising raw attention is written to `cache` when one is given.
inline BagForwardOut bag_forward(const Bag& bag, const ModelState& state, const ForwardOptions& opt,
                                 SoftLabelCache* cache = nullptr) {
    if (bag.size() == 0) throw DataError("bag '" + bag.id + "' is empty");
    if (is_pooling(state.aggregator)) {
        throw ContractError("bag_forward: pooling models have no attention branch");
    }
    BagForwardOut out;
    const std::size_t n = bag.size();
    out.features = encode(bag.features, state.encoder);
    out.instance_logits = instance_head(out.features, state.heads);

    std::vector<Tensor> scores;
    switch (state.aggregator) {
        case Aggregator::abmil:
            scores.push_back(attn_abmil(out.features, state.abmil));
            break;
        case Aggregator::dsmil: {
            const Tensor critical = state.dsmil_tie_scorer ? out.instance_logits
                                                           : dsmil_scorer(out.features, state.dsmil);
            DsmilScores ds = attn_dsmil(out.features, state.dsmil, critical.values());
            out.critical_instance = ds.critical;
            scores.push_back(ds.scores);
            break;
        }
        case Aggregator::clam_sb:
        case Aggregator::clam_mb:
            scores = attn_clam(out.features, state.clam);
            break;
        default:
            break;
    }

    std::vector<Tensor> alphas, masked;
    MaskResult mask;
    if (opt.training) {
        std::vector<double> uniform(n, 1.0);
        mask = hpm_mask(uniform, out.instance_logits.values(), opt.tau);
    }
    for (const Tensor& a : scores) {
        Tensor alpha = softmax(a);
        alphas.push_back(alpha);
        if (opt.training) {
            std::vector<double> keep(n);
            for (std::size_t j = 0; j < n; ++j) keep[j] = mask.masked[j] > 0.0 ? 1.0 : 0.0;
            masked.push_back(mul(alpha, Tensor::vector(std::move(keep))));
        } else {
            masked.push_back(alpha);
        }
    }

    if (state.aggregator == Aggregator::clam_mb) {
        std::vector<Tensor> pooled;
        for (const Tensor& m : masked) pooled.push_back(aggregate(m, out.features));
        out.bag_logits = clam_slide_scores(pooled, state.heads);
    } else {
        out.bag_logits = bag_head(aggregate(masked[0], out.features), state.heads);
    }
    out.bag_prob = select(softmax(out.bag_logits), 1);
    out.predicted_class = argmax(out.bag_logits.values());

    const std::size_t branch = state.aggregator == Aggregator::clam_mb ? out.predicted_class : 0;
    out.raw_scores = scores[branch];
    out.alpha = alphas[branch];
    out.masked_alpha = masked[branch];
    for (std::size_t j = 0; j < n; ++j) {
        if (out.masked_alpha[j] > 0.0) out.survivors.push_back(j);
    }
    out.mask_empty = out.survivors.empty();

    const auto a = out.raw_scores.values();
    std::size_t best = n;
    for (std::size_t j : out.effective_survivors()) {
        if (best == n || a[j] > a[best]) best = j;
    }
    out.k_star = best;

    if (opt.training && cache) {
        cache->store(bag.id, std::vector<double>(a.begin(), a.end()), opt.epoch);
    }
    return out;
}

struct PoolingForwardOut {
    Tensor instance_logits;  // [n]
    Tensor bag_prob;         // scalar
};

/// MaxPooling / MeanPooling baseline: the bag probability is the max (mean) of
/// instance sigmoids.
inline PoolingForwardOut pooling_forward(const Bag& bag, const ModelState& state) {
    if (!is_pooling(state.aggregator)) throw ContractError("pooling_forward: not a pooling model");
    PoolingForwardOut out;
    out.instance_logits = instance_head(encode(bag.features, state.encoder), state.heads);
    Tensor probs = sigmoid(out.instance_logits);
    out.bag_prob = state.aggregator == Aggregator::max_pool ? reduce_max(probs).value : mean(probs);
    return out;
}

/// phi(E(x)) for a batch of raw instance features [B x d_in].
inline Tensor instance_forward(const Tensor& features, const ModelState& state) {
    if (features.rank() != 2 || features.rows() == 0) {
        throw DimensionError("instance_forward: need a nonempty [B x d_in] batch");
    }
    return instance_head(encode(features, state.encoder), state.heads);
}

/// Instance-branch pseudo-target: sigmoid(a / temperature) in positive bags, 0 in negative bags.
inline double soft_label(double raw_attention, int bag_label, double temperature = 1.0) {
    return bag_label == 1 ? sigmoid(raw_attention / temperature) : 0.0;
}

}  // namespace dualmil
