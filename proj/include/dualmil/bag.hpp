#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dualmil/errors.hpp"
#include "dualmil/tensor.hpp"

namespace dualmil {

/// One training/evaluation unit: an instance feature matrix plus its bag label.
/// Instance labels, when present, are for evaluation only.
struct Bag {
    std::string id;
    Tensor features;  // [n_i x d_in], constant
    int label = 0;
    std::optional<std::vector<std::uint8_t>> instance_labels;

    std::size_t size() const { return features.rows(); }
    std::size_t dim() const { return features.cols(); }
};

/// Throws DataError unless the bag is nonempty, binary-labelled and, when
/// instance labels exist, satisfies label == max(instance labels).
inline void validate_bag(const Bag& bag) {
    if (!bag.features.defined() || bag.features.rank() != 2 || bag.features.rows() == 0) {
        throw DataError("bag '" + bag.id + "' has no instances");
    }
    if (bag.label != 0 && bag.label != 1) {
        throw DataError("bag '" + bag.id + "' has non-binary label " + std::to_string(bag.label));
    }
    if (bag.instance_labels) {
        const auto& y = *bag.instance_labels;
        if (y.size() != bag.size()) {
            throw DataError("bag '" + bag.id + "' has " + std::to_string(y.size()) +
                            " instance labels for " + std::to_string(bag.size()) + " instances");
        }
        int mx = 0;
        for (auto v : y) {
            if (v > 1) throw DataError("bag '" + bag.id + "' has a non-binary instance label");
            mx = std::max(mx, static_cast<int>(v));
        }
        if (mx != bag.label) {
            throw DataError("bag '" + bag.id + "' violates the MIL assumption: label " +
                            std::to_string(bag.label) + " but max instance label " + std::to_string(mx));
        }
    }
}

struct BagDataset {
    std::size_t d_in = 0;
    std::vector<Bag> bags;

    std::size_t size() const { return bags.size(); }
    bool empty() const { return bags.empty(); }

    bool has_instance_labels() const {
        return !bags.empty() && std::all_of(bags.begin(), bags.end(),
                                            [](const Bag& b) { return b.instance_labels.has_value(); });
    }

    std::size_t total_instances() const {
        std::size_t n = 0;
        for (const auto& b : bags) n += b.size();
        return n;
    }
};

}  // namespace dualmil
