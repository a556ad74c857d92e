#pragma once

#include <cmath>
#include <cstddef>
#include <unordered_map>
#include <vector>

#include "dualmil/errors.hpp"
#include "dualmil/tensor.hpp"

namespace dualmil {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

/// Adam with bias correction and L2 weight decay folded into the gradient.
///
/// Moments belong to the parameter; the step counter belongs to the group, so
/// a parameter shared by two groups (the encoder) keeps one pair of moments
/// while each group's bias correction follows its own update count.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// Registers a parameter group and returns its id.
    std::size_t add_group(const std::vector<Tensor>& params) {
        Group group;
        for (const Tensor& p : params) {
            if (!p.requires_grad()) throw ContractError("Adam: parameter does not require grad");
            const detail::Node* key = p.node().get();
            auto it = slot_of_.find(key);
            if (it == slot_of_.end()) {
                it = slot_of_.emplace(key, slots_.size()).first;
                slots_.push_back({p, std::vector<double>(p.size(), 0.0), std::vector<double>(p.size(), 0.0)});
            }
            group.slots.push_back(it->second);
        }
        groups_.push_back(std::move(group));
        return groups_.size() - 1;
    }

    void step(std::size_t group_id) {
        Group& group = groups_.at(group_id);
        ++group.steps;
        const double t = static_cast<double>(group.steps);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
        for (std::size_t s : group.slots) {
            Slot& slot = slots_[s];
            auto values = slot.param.mutable_values();
            const auto grad = slot.param.grad();
            for (std::size_t i = 0; i < values.size(); ++i) {
                const double g = grad[i] + cfg_.weight_decay * values[i];
                slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
                slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double m_hat = slot.m[i] / bc1;
                const double v_hat = slot.v[i] / bc2;
                values[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
            }
        }
    }

    void zero_grad(std::size_t group_id) {
        for (std::size_t s : groups_.at(group_id).slots) slots_[s].param.zero_grad();
    }

    long steps(std::size_t group_id) const { return groups_.at(group_id).steps; }
    const AdamConfig& config() const { return cfg_; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
    };
    struct Group {
        std::vector<std::size_t> slots;
        long steps = 0;
    };

    AdamConfig cfg_;
    std::vector<Slot> slots_;
    std::vector<Group> groups_;
    std::unordered_map<const detail::Node*, std::size_t> slot_of_;
};

}  // namespace dualmil
