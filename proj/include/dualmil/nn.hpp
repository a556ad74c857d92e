#pragma once

// Learnable pieces of the model: shared encoder, attention aggregators and the
// two classification heads. All forward functions are pure over Tensors.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dualmil/errors.hpp"
#include "dualmil/random.hpp"
#include "dualmil/tensor.hpp"

namespace dualmil {

inline constexpr std::size_t kNumClasses = 2;

enum class Aggregator : std::uint8_t {
    abmil = 0,
    dsmil = 1,
    clam_sb = 2,
    clam_mb = 3,
    max_pool = 4,
    mean_pool = 5,
};

inline std::string_view to_string(Aggregator a) {
    switch (a) {
        case Aggregator::abmil: return "abmil";
        case Aggregator::dsmil: return "dsmil";
        case Aggregator::clam_sb: return "clam_sb";
        case Aggregator::clam_mb: return "clam_mb";
        case Aggregator::max_pool: return "max_pool";
        case Aggregator::mean_pool: return "mean_pool";
    }
    return "?";
}

inline std::optional<Aggregator> parse_aggregator(std::string_view s) {
    for (auto a : {Aggregator::abmil, Aggregator::dsmil, Aggregator::clam_sb, Aggregator::clam_mb,
                   Aggregator::max_pool, Aggregator::mean_pool}) {
        if (to_string(a) == s) return a;
    }
    return std::nullopt;
}

inline bool is_pooling(Aggregator a) {
    return a == Aggregator::max_pool || a == Aggregator::mean_pool;
}

struct ModelDims {
    std::size_t d_in = 32;
    std::size_t hidden = 128;
    std::size_t d = 64;
    std::size_t l = 64;

    bool operator==(const ModelDims&) const = default;
};

struct EncoderParams {
    Tensor w1;  // [hidden x d_in]
    Tensor b1;  // [hidden]
    Tensor w2;  // [d x hidden]
    Tensor b2;  // [d]
};

struct AbmilParams {
    Tensor v;  // [l x d]
    Tensor w;  // [1 x l]
};

struct DsmilParams {
    Tensor w_q;  // [l x d]
    // Critical-instance scorer; unused when tied to the instance head.
    Tensor scorer_w;  // [1 x d]
    Tensor scorer_b;  // [1]
};

struct ClamParams {
    Tensor w_a;                 // [l x d]
    Tensor w_b;                 // [l x d]
    std::vector<Tensor> w_c;    // one [1 x l] branch per attention head (1 for SB, 2 for MB)
};

struct HeadParams {
    Tensor bag_w;   // psi: [n_classes x d]
    Tensor bag_b;   // [n_classes]
    Tensor inst_w;  // phi: [1 x d]
    Tensor inst_b;  // [1]
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

/// Every learnable parameter of one model.
struct ModelState {
    Aggregator aggregator = Aggregator::abmil;
    ModelDims dims;
    bool dsmil_tie_scorer = true;
    EncoderParams encoder;
    AbmilParams abmil;
    DsmilParams dsmil;
    ClamParams clam;
    HeadParams heads;

    /// Parameters in their declared (checkpoint) order.
    std::vector<NamedParam> parameters() const {
        std::vector<NamedParam> out{{"encoder.w1", encoder.w1},
                                    {"encoder.b1", encoder.b1},
                                    {"encoder.w2", encoder.w2},
                                    {"encoder.b2", encoder.b2}};
        switch (aggregator) {
            case Aggregator::abmil:
                out.push_back({"abmil.v", abmil.v});
                out.push_back({"abmil.w", abmil.w});
                break;
            case Aggregator::dsmil:
                out.push_back({"dsmil.w_q", dsmil.w_q});
                if (!dsmil_tie_scorer) {
                    out.push_back({"dsmil.scorer_w", dsmil.scorer_w});
                    out.push_back({"dsmil.scorer_b", dsmil.scorer_b});
                }
                break;
            case Aggregator::clam_sb:
            case Aggregator::clam_mb:
                out.push_back({"clam.w_a", clam.w_a});
                out.push_back({"clam.w_b", clam.w_b});
                for (std::size_t k = 0; k < clam.w_c.size(); ++k) {
                    out.push_back({"clam.w_c" + std::to_string(k), clam.w_c[k]});
                }
                break;
            case Aggregator::max_pool:
            case Aggregator::mean_pool:
                break;
        }
        if (!is_pooling(aggregator)) {
            out.push_back({"head.bag_w", heads.bag_w});
            out.push_back({"head.bag_b", heads.bag_b});
        }
        out.push_back({"head.inst_w", heads.inst_w});
        out.push_back({"head.inst_b", heads.inst_b});
        return out;
    }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (auto& p : parameters()) out.push_back(p.tensor);
        return out;
    }

    /// Deep copy with fresh, independent parameter tensors.
    ModelState clone() const {
        ModelState s = *this;
        auto copy = [](Tensor& t) {
            if (t.defined()) t = t.clone();
        };
        copy(s.encoder.w1), copy(s.encoder.b1), copy(s.encoder.w2), copy(s.encoder.b2);
        copy(s.abmil.v), copy(s.abmil.w);
        copy(s.dsmil.w_q), copy(s.dsmil.scorer_w), copy(s.dsmil.scorer_b);
        copy(s.clam.w_a), copy(s.clam.w_b);
        for (auto& t : s.clam.w_c) copy(t);
        copy(s.heads.bag_w), copy(s.heads.bag_b), copy(s.heads.inst_w), copy(s.heads.inst_b);
        return s;
    }

    void zero_grad() const {
        for (auto& p : parameters()) {
            Tensor t = p.tensor;
            t.zero_grad();
        }
    }
};

namespace detail {

inline Tensor uniform_weight(Rng& rng, std::size_t out, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(out * fan_in);
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor::matrix(out, fan_in, std::move(v), true);
}

inline Tensor zero_bias(std::size_t n) { return Tensor::zeros({n}, true); }

}  // namespace detail

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero. Bit-reproducible per seed.
inline ModelState init_params(std::uint64_t seed, const ModelDims& dims, Aggregator aggregator,
                              bool dsmil_tie_scorer = true) {
    if (dims.d_in == 0 || dims.hidden == 0 || dims.d == 0 || dims.l == 0) {
        throw ConfigError("model dimensions must be positive");
    }
    Rng rng(derive_seed(seed, 0x11));
    ModelState s;
    s.aggregator = aggregator;
    s.dims = dims;
    s.dsmil_tie_scorer = dsmil_tie_scorer;
    s.encoder.w1 = detail::uniform_weight(rng, dims.hidden, dims.d_in);
    s.encoder.b1 = detail::zero_bias(dims.hidden);
    s.encoder.w2 = detail::uniform_weight(rng, dims.d, dims.hidden);
    s.encoder.b2 = detail::zero_bias(dims.d);
    switch (aggregator) {
        case Aggregator::abmil:
            s.abmil.v = detail::uniform_weight(rng, dims.l, dims.d);
            s.abmil.w = detail::uniform_weight(rng, 1, dims.l);
            break;
        case Aggregator::dsmil:
            s.dsmil.w_q = detail::uniform_weight(rng, dims.l, dims.d);
            if (!dsmil_tie_scorer) {
                s.dsmil.scorer_w = detail::uniform_weight(rng, 1, dims.d);
                s.dsmil.scorer_b = detail::zero_bias(1);
            }
            break;
        case Aggregator::clam_sb:
        case Aggregator::clam_mb: {
            s.clam.w_a = detail::uniform_weight(rng, dims.l, dims.d);
            s.clam.w_b = detail::uniform_weight(rng, dims.l, dims.d);
            const std::size_t branches = aggregator == Aggregator::clam_mb ? kNumClasses : 1;
            for (std::size_t k = 0; k < branches; ++k) {
                s.clam.w_c.push_back(detail::uniform_weight(rng, 1, dims.l));
            }
            break;
        }
        case Aggregator::max_pool:
        case Aggregator::mean_pool:
            break;
    }
    if (!is_pooling(aggregator)) {
        s.heads.bag_w = detail::uniform_weight(rng, kNumClasses, dims.d);
        s.heads.bag_b = detail::zero_bias(kNumClasses);
    }
    s.heads.inst_w = detail::uniform_weight(rng, 1, dims.d);
    s.heads.inst_b = detail::zero_bias(1);
    return s;
}

/// h = W2 relu(W1 x + b1) + b2, applied to every row of x [n x d_in].
inline Tensor encode(const Tensor& x, const EncoderParams& p) {
    return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

/// ABMIL raw scores a_j = w^T tanh(V h_j) for H [n x d].
inline Tensor attn_abmil(const Tensor& features, const AbmilParams& p) {
    detail::require_nonempty(features, "attn_abmil");
    return reshape(linear(tanh(linear(features, p.v)), p.w), {features.rows()});
}

struct DsmilScores {
    Tensor scores;            // [n]
    std::size_t critical;     // m
};

/// DSMIL raw scores a_j = <W_q h_j, W_q h_m>, where m maximizes critical_logits.
inline DsmilScores attn_dsmil(const Tensor& features, const DsmilParams& p,
                              std::span<const double> critical_logits) {
    detail::require_nonempty(features, "attn_dsmil");
    if (critical_logits.size() != features.rows()) {
        throw DimensionError("attn_dsmil: critical logits do not match bag size");
    }
    const std::size_t m = argmax(critical_logits);
    Tensor q = linear(features, p.w_q);                       // [n x l]
    Tensor qm = reshape(row(q, m), {p.w_q.rows(), 1});        // [l x 1]
    return {reshape(matmul(q, qm), {features.rows()}), m};
}

/// Critical-instance logits from DSMIL's own scorer.
inline Tensor dsmil_scorer(const Tensor& features, const DsmilParams& p) {
    return reshape(linear(features, p.scorer_w, p.scorer_b), {features.rows()});
}

/// CLAM gated-attention raw scores, one [n] vector per branch:
/// a_k,j = W_c^k (tanh(W_a h_j) * sigmoid(W_b h_j)).
inline std::vector<Tensor> attn_clam(const Tensor& features, const ClamParams& p) {
    detail::require_nonempty(features, "attn_clam");
    Tensor gated = mul(tanh(linear(features, p.w_a)), sigmoid(linear(features, p.w_b)));
    std::vector<Tensor> out;
    for (const Tensor& wc : p.w_c) out.push_back(reshape(linear(gated, wc), {features.rows()}));
    return out;
}

/// psi(H) -> [n_classes] logits.
inline Tensor bag_head(const Tensor& bag_feature, const HeadParams& p) {
    return reshape(linear(reshape(bag_feature, {1, bag_feature.size()}), p.bag_w, p.bag_b),
                   {p.bag_w.rows()});
}

/// CLAM-MB slide scores s_k = psi_k . H_k + b_k, one class-specific bag feature per class.
inline Tensor clam_slide_scores(const std::vector<Tensor>& class_features, const HeadParams& p) {
    if (class_features.size() != p.bag_w.rows()) {
        throw DimensionError("clam_slide_scores: one bag feature per class required");
    }
    std::vector<Tensor> scores;
    for (std::size_t k = 0; k < class_features.size(); ++k) {
        Tensor dot = matmul(reshape(row(p.bag_w, k), {1, class_features[k].size()}),
                            reshape(class_features[k], {class_features[k].size(), 1}));
        scores.push_back(add(reshape(dot, {1}), select(p.bag_b, k)));
    }
    return concat(scores);
}

/// phi(h) for every row of H [n x d] -> [n] logits.
inline Tensor instance_head(const Tensor& features, const HeadParams& p) {
    return reshape(linear(features, p.inst_w, p.inst_b), {features.rows()});
}

}  // namespace dualmil
