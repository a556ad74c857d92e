#pragma once

#include <string>
#include <vector>

#include "dualmil/bag.hpp"
#include "dualmil/metrics.hpp"
#include "dualmil/model.hpp"

namespace dualmil {

struct EvalOptions {
    // Use 0.5 instead of a Youden-tuned threshold for instance accuracy.
    bool instance_threshold_half = false;
};

/// Bag and instance metrics of a model on one split.
///
/// Bag scores are positive-class probabilities with the mask disabled. Instance
/// scores come from the instance head, or from the min-max attention fallback
/// applied to instance logits for pooling models. Thresholds are Youden-tuned on
/// this split.
inline MetricsReport evaluate_model(const ModelState& state, const BagDataset& ds, const EvalOptions& opt = {}) {
    if (ds.empty()) throw DataError("evaluate_model: empty dataset");
    NoGradGuard no_grad;
    MetricsReport report;
    report.n_bags = ds.size();
    report.n_instances = ds.total_instances();

    std::vector<double> bag_scores(ds.size());
    std::vector<std::vector<double>> instance_scores(ds.size());
    const bool pooling = is_pooling(state.aggregator);
    for (std::size_t b = 0; b < ds.size(); ++b) {
        const Bag& bag = ds.bags[b];
        if (pooling) {
            auto out = pooling_forward(bag, state);
            bag_scores[b] = out.bag_prob.item();
            instance_scores[b].assign(out.instance_logits.values().begin(), out.instance_logits.values().end());
        } else {
            auto out = bag_forward(bag, state, ForwardOptions{.training = false});
            bag_scores[b] = out.bag_prob.item();
            for (double z : out.instance_logits.values()) instance_scores[b].push_back(sigmoid(z));
        }
    }

    ScoredSet bags;
    for (std::size_t b = 0; b < ds.size(); ++b) bags.add(bag_scores[b], ds.bags[b].label);
    report.bag_auc = auc(bags);
    report.bag_threshold = youden_threshold(bags).value;
    report.bag_acc = accuracy_at(bags, report.bag_threshold);

    if (pooling) {
        for (std::size_t b = 0; b < ds.size(); ++b) {
            const int pred = bag_scores[b] > report.bag_threshold ? 1 : 0;
            instance_scores[b] = fallback_instance_probs(pred, instance_scores[b]);
        }
    }

    for (std::size_t b = 0; b < ds.size(); ++b) {
        const Bag& bag = ds.bags[b];
        report.scores.push_back({bag.id, -1, bag_scores[b], bag.label});
        for (std::size_t j = 0; j < bag.size(); ++j) {
            const int label = bag.instance_labels ? (*bag.instance_labels)[j] : -1;
            report.scores.push_back({bag.id, static_cast<long>(j), instance_scores[b][j], label});
        }
    }

    if (!ds.has_instance_labels()) {
        report.notices.push_back("instance metrics skipped: dataset has no instance labels");
        return report;
    }
    ScoredSet instances = report.instance_set();
    if (!instances.has_both_classes()) {
        report.notices.push_back("instance metrics skipped: instance labels contain a single class");
        return report;
    }
    report.inst_auc = auc(instances);
    report.inst_threshold = opt.instance_threshold_half ? 0.5 : youden_threshold(instances).value;
    report.inst_acc = accuracy_at(instances, *report.inst_threshold);
    return report;
}

}  // namespace dualmil
