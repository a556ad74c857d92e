#pragma once

#include <string>
#include <vector>

#include "dualmil/errors.hpp"
#include "dualmil/model.hpp"
#include "dualmil/tensor.hpp"

namespace dualmil {

inline constexpr double kProbEps = 1e-7;

struct LossWeights {
    double beta = 0.5;    // L_inst
    double gamma = 0.5;   // L_self
    double delta = 0.25;  // L_attn
    double theta = 0.3;   // instance-branch self term
    double c1 = 0.7;      // bag prediction share in L_label / L_self
    double c2 = 0.3;      // instance prediction share in L_label / L_self
    double t = 0.5;       // indicator threshold
    bool use_inst = true;
    bool use_self = true;
    bool use_attn = true;
    bool use_inst_self = true;
    // When set, L_inst also backpropagates into the max-pooled instance prediction.
    bool inst_target_grad = false;

    bool operator==(const LossWeights&) const = default;
};

/// Hard errors for impossible values; returns warnings for tripartite-rule violations.
inline std::vector<std::string> validate(const LossWeights& w) {
    auto nonneg = [](double v, const char* name) {
        if (!(v >= 0.0)) throw ConfigError(std::string(name) + " must be nonnegative");
    };
    nonneg(w.beta, "beta"), nonneg(w.gamma, "gamma"), nonneg(w.delta, "delta");
    nonneg(w.theta, "theta"), nonneg(w.c1, "c1"), nonneg(w.c2, "c2");
    if (!(w.c1 + w.c2 > 0.0)) throw ConfigError("c1 + c2 must be positive");
    if (!(w.t > 0.0 && w.t < 1.0)) throw ConfigError("t must lie in (0, 1)");
    std::vector<std::string> warnings;
    if (w.use_inst && w.use_self) {
        // L_label carries unit weight.
        if (w.beta + w.gamma < 1.0) warnings.push_back("tripartite rule: L_label weight 1 exceeds beta + gamma");
        if (w.beta > 1.0 + w.gamma) warnings.push_back("tripartite rule: beta exceeds 1 + gamma");
        if (w.gamma > 1.0 + w.beta) warnings.push_back("tripartite rule: gamma exceeds 1 + beta");
    }
    return warnings;
}

inline int indicator(double z, double t) { return z > t ? 1 : 0; }

/// Elementwise binary cross-entropy -(q log p + (1-q) log(1-p)) with p clamped to [eps, 1-eps].
inline Tensor bce(const Tensor& p, const Tensor& q) {
    Tensor pc = clamp(p, kProbEps, 1.0 - kProbEps);
    return scale(add(mul(q, log(pc)), mul(one_minus(q), log(one_minus(pc)))), -1.0);
}

inline Tensor bce(const Tensor& p, std::vector<double> q) {
    for (double& v : q) v = std::clamp(v, 0.0, 1.0);
    return bce(p, Tensor(p.shape(), std::move(q)));
}

inline Tensor bce(const Tensor& p, double q) { return bce(p, std::vector<double>(p.size(), q)); }

inline double bce(double p, double q) { return bce(Tensor::scalar(p), q).item(); }

/// c1 CE(bag_prob, Y) + c2 CE(instance_prob_k, Y).
inline Tensor loss_label(const Tensor& bag_prob, const Tensor& k_star_prob, int label, double c1,
                         double c2) {
    return add(scale(bce(bag_prob, label), c1), scale(bce(k_star_prob, label), c2));
}

inline double loss_label(double bag_prob, double k_star_prob, int label, double c1, double c2) {
    return loss_label(Tensor::scalar(bag_prob), Tensor::scalar(k_star_prob), label, c1, c2).item();
}

/// CE(bag_prob, y_hat) with y_hat the max-pooled instance probability over the survivors.
/// The target is a constant unless `target_grad` is set.
inline Tensor loss_inst(const Tensor& bag_prob, const Tensor& instance_probs,
                        const std::vector<std::size_t>& survivors, bool target_grad = false) {
    if (survivors.empty()) throw ContractError("loss_inst: empty survivor set");
    std::size_t best = survivors.front();
    for (std::size_t j : survivors) {
        if (instance_probs[j] > instance_probs[best]) best = j;
    }
    if (target_grad) return bce(bag_prob, select(instance_probs, best));
    return bce(bag_prob, instance_probs[best]);
}

inline double loss_inst(double bag_prob, const std::vector<double>& instance_probs) {
    std::vector<std::size_t> all(instance_probs.size());
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
    return loss_inst(Tensor::scalar(bag_prob), Tensor::vector(instance_probs), all).item();
}

/// c1 CE(bag_prob, I_t(bag_prob)) + c2 mean_j CE(p_j, I_t(p_j)); targets are constants.
inline Tensor loss_self_bag(const Tensor& bag_prob, const Tensor& instance_probs, double c1, double c2,
                            double t) {
    Tensor bag_term = scale(bce(bag_prob, static_cast<double>(indicator(bag_prob.item(), t))), c1);
    if (c2 == 0.0 || instance_probs.size() == 0) return bag_term;
    std::vector<double> targets(instance_probs.size());
    for (std::size_t j = 0; j < targets.size(); ++j) targets[j] = indicator(instance_probs[j], t);
    return add(bag_term, scale(mean(bce(instance_probs, std::move(targets))), c2));
}

inline double loss_self_bag(double bag_prob, const std::vector<double>& instance_probs, double c1,
                            double c2, double t) {
    return loss_self_bag(Tensor::scalar(bag_prob), Tensor::vector(instance_probs), c1, c2, t).item();
}

/// CE(sigmoid(max_j a_j), Y); gradient reaches the attention parameters through the max element.
inline Tensor loss_attn(const Tensor& raw_scores, int label) {
    return bce(sigmoid(reduce_max(raw_scores).value), label);
}

inline double loss_attn(const std::vector<double>& raw_scores, int label) {
    return loss_attn(Tensor::vector(raw_scores), label).item();
}

struct BagLossParts {
    Tensor label;
    Tensor inst;  // undefined when disabled
    Tensor self;
    Tensor attn;
};

/// L_bag = L_label + beta L_inst + gamma L_self + delta L_attn; disabled terms are never built.
inline Tensor loss_bag_total(const BagLossParts& parts, const LossWeights& w) {
    Tensor total = parts.label;
    if (w.use_inst && parts.inst.defined()) total = add(total, scale(parts.inst, w.beta));
    if (w.use_self && parts.self.defined()) total = add(total, scale(parts.self, w.gamma));
    if (w.use_attn && parts.attn.defined()) total = add(total, scale(parts.attn, w.delta));
    return total;
}

inline double loss_bag_total(double label, double inst, double self, double attn, const LossWeights& w) {
    BagLossParts parts{Tensor::scalar(label), Tensor::scalar(inst), Tensor::scalar(self),
                       Tensor::scalar(attn)};
    return loss_bag_total(parts, w).item();
}

/// Every bag-branch term for one forward pass.
inline BagLossParts bag_loss_parts(const BagForwardOut& out, int label, const LossWeights& w) {
    BagLossParts parts;
    Tensor inst_probs = sigmoid(out.instance_logits);
    parts.label = loss_label(out.bag_prob, select(inst_probs, out.k_star), label, w.c1, w.c2);
    if (w.use_inst) parts.inst = loss_inst(out.bag_prob, inst_probs, out.effective_survivors(), w.inst_target_grad);
    if (w.use_self) parts.self = loss_self_bag(out.bag_prob, inst_probs, w.c1, w.c2, w.t);
    if (w.use_attn) parts.attn = loss_attn(out.raw_scores, label);
    return parts;
}

/// Mean over a batch of l_pseudo + theta * l_self.
inline Tensor loss_instance_branch(const Tensor& instance_probs, const std::vector<double>& cached_scores,
                                   const std::vector<int>& bag_labels, const LossWeights& w,
                                   double temperature = 1.0) {
    const std::size_t n = instance_probs.size();
    if (cached_scores.size() != n || bag_labels.size() != n) {
        throw DimensionError("loss_instance_branch: batch fields differ in length");
    }
    std::vector<double> pseudo(n);
    for (std::size_t j = 0; j < n; ++j) pseudo[j] = soft_label(cached_scores[j], bag_labels[j], temperature);
    Tensor per_instance = bce(instance_probs, std::move(pseudo));
    if (w.use_inst_self) {
        std::vector<double> hard(n);
        for (std::size_t j = 0; j < n; ++j) hard[j] = indicator(instance_probs[j], w.t);
        per_instance = add(per_instance, scale(bce(instance_probs, std::move(hard)), w.theta));
    }
    return mean(per_instance);
}

inline double loss_instance_branch(double prob, double cached_score, int bag_label, const LossWeights& w) {
    return loss_instance_branch(Tensor::scalar(prob), {cached_score}, {bag_label}, w).item();
}

}  // namespace dualmil
