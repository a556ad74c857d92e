#pragma once

// TrainConfig and its `key = value` text format. Every key, default and range
// is declared once in config_keys().

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dualmil/adam.hpp"
#include "dualmil/data.hpp"
#include "dualmil/errors.hpp"
#include "dualmil/losses.hpp"
#include "dualmil/metrics.hpp"
#include "dualmil/nn.hpp"

namespace dualmil {

struct TrainConfig {
    Aggregator aggregator = Aggregator::abmil;
    std::size_t hidden = 128;
    std::size_t d = 64;
    std::size_t l = 64;
    LossWeights weights;
    double tau = 0.75;
    std::size_t kappa = 10;            // bag epochs per cycle
    std::size_t instance_epochs = 1;   // instance epochs per cycle
    std::size_t max_epochs = 200;      // total bag epochs
    std::size_t patience = 0;          // early stopping on validation bag AUC; 0 = off
    std::size_t eval_every = 1;        // validation cadence in bag epochs
    AdamConfig adam;
    std::size_t bag_batch = 1;
    std::size_t instance_batch = 1024;
    std::uint64_t seed = 0;
    bool freeze_instance_head = false;  // exclude phi from bag-phase updates
    bool dsmil_tie_scorer = true;
    double soft_label_temperature = 1.0;
    bool skip_instance_epochs = false;
    bool instance_threshold_half = false;
    SyntheticConfig synthetic;          // used by the gen command

    bool operator==(const TrainConfig& o) const {
        return aggregator == o.aggregator && hidden == o.hidden && d == o.d && l == o.l && weights == o.weights &&
               tau == o.tau && kappa == o.kappa && instance_epochs == o.instance_epochs &&
               max_epochs == o.max_epochs && patience == o.patience && eval_every == o.eval_every &&
               adam.lr == o.adam.lr && adam.beta1 == o.adam.beta1 && adam.beta2 == o.adam.beta2 &&
               adam.eps == o.adam.eps && adam.weight_decay == o.adam.weight_decay && bag_batch == o.bag_batch &&
               instance_batch == o.instance_batch && seed == o.seed &&
               freeze_instance_head == o.freeze_instance_head && dsmil_tie_scorer == o.dsmil_tie_scorer &&
               soft_label_temperature == o.soft_label_temperature &&
               skip_instance_epochs == o.skip_instance_epochs &&
               instance_threshold_half == o.instance_threshold_half && synthetic == o.synthetic;
    }
};

struct ConfigKey {
    std::string name;
    std::string doc;
    std::function<void(TrainConfig&, const std::string&)> set;  // throws ConfigError
    std::function<std::string(const TrainConfig&)> get;
};

namespace detail {

inline double parse_config_real(const std::string& v) {
    double x = 0.0;
    try {
        x = parse_real(v);
    } catch (const FormatError&) {
        throw ConfigError("expected a real number, got '" + v + "'");
    }
    if (!std::isfinite(x)) throw ConfigError("expected a finite number, got '" + v + "'");
    return x;
}

inline std::uint64_t parse_config_uint(const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError("expected a nonnegative integer, got '" + v + "'");
    }
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw ConfigError("integer out of range: '" + v + "'");
    }
}

inline bool parse_config_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("expected true/false, got '" + v + "'");
}

template <class Access>
ConfigKey real_key(std::string name, std::string doc, Access access, std::function<bool(double)> ok,
                   std::string range) {
    return {name, doc + " [" + range + "]",
            [=](TrainConfig& c, const std::string& v) {
                const double x = parse_config_real(v);
                if (!ok(x)) throw ConfigError(name + " = " + v + " is out of range " + range);
                access(c) = x;
            },
            [=](const TrainConfig& c) { return format_real(access(const_cast<TrainConfig&>(c))); }};
}

template <class Access>
ConfigKey uint_key(std::string name, std::string doc, Access access, std::uint64_t min_value) {
    return {name, doc + " [>= " + std::to_string(min_value) + "]",
            [=](TrainConfig& c, const std::string& v) {
                const std::uint64_t x = parse_config_uint(v);
                if (x < min_value) {
                    throw ConfigError(name + " = " + v + " is out of range (must be >= " + std::to_string(min_value) + ")");
                }
                access(c) = static_cast<std::remove_reference_t<decltype(access(c))>>(x);
            },
            [=](const TrainConfig& c) { return std::to_string(access(const_cast<TrainConfig&>(c))); }};
}

template <class Access>
ConfigKey bool_key(std::string name, std::string doc, Access access) {
    return {name, doc + " [true|false]",
            [=](TrainConfig& c, const std::string& v) { access(c) = parse_config_bool(v); },
            [=](const TrainConfig& c) { return std::string(access(const_cast<TrainConfig&>(c)) ? "true" : "false"); }};
}

inline bool nonneg(double x) { return x >= 0.0; }
inline bool positive(double x) { return x > 0.0; }
inline bool open_unit(double x) { return x > 0.0 && x < 1.0; }

}  // namespace detail

/// The single registry of configuration keys, in documentation order.
inline const std::vector<ConfigKey>& config_keys() {
    using namespace detail;
    using C = TrainConfig;
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        k.push_back({"aggregator", "attention aggregator or pooling baseline [abmil|dsmil|clam_sb|clam_mb|max_pool|mean_pool]",
                     [](C& c, const std::string& v) {
                         auto a = parse_aggregator(v);
                         if (!a) throw ConfigError("unknown aggregator '" + v + "'");
                         c.aggregator = *a;
                     },
                     [](const C& c) { return std::string(to_string(c.aggregator)); }});
        k.push_back(uint_key("hidden", "encoder hidden width", [](C& c) -> std::size_t& { return c.hidden; }, 1));
        k.push_back(uint_key("d", "instance feature dimension", [](C& c) -> std::size_t& { return c.d; }, 1));
        k.push_back(uint_key("l", "attention hidden dimension", [](C& c) -> std::size_t& { return c.l; }, 1));
        k.push_back(real_key("beta", "weight of L_inst", [](C& c) -> double& { return c.weights.beta; }, nonneg, ">= 0"));
        k.push_back(real_key("gamma", "weight of L_self", [](C& c) -> double& { return c.weights.gamma; }, nonneg, ">= 0"));
        k.push_back(real_key("delta", "weight of L_attn", [](C& c) -> double& { return c.weights.delta; }, nonneg, ">= 0"));
        k.push_back(real_key("theta", "weight of the instance self-confidence term", [](C& c) -> double& { return c.weights.theta; }, nonneg, ">= 0"));
        k.push_back(real_key("c1", "bag-prediction share of L_label and L_self", [](C& c) -> double& { return c.weights.c1; }, nonneg, ">= 0"));
        k.push_back(real_key("c2", "instance-prediction share of L_label and L_self", [](C& c) -> double& { return c.weights.c2; }, nonneg, ">= 0"));
        k.push_back(real_key("t", "self-confidence indicator threshold", [](C& c) -> double& { return c.weights.t; }, open_unit, "(0, 1)"));
        k.push_back(bool_key("use_inst", "enable L_inst", [](C& c) -> bool& { return c.weights.use_inst; }));
        k.push_back(bool_key("use_self", "enable L_self", [](C& c) -> bool& { return c.weights.use_self; }));
        k.push_back(bool_key("use_attn", "enable L_attn", [](C& c) -> bool& { return c.weights.use_attn; }));
        k.push_back(bool_key("use_inst_self", "enable the instance self-confidence term", [](C& c) -> bool& { return c.weights.use_inst_self; }));
        k.push_back(bool_key("inst_target_grad", "let L_inst backpropagate into the pooled instance prediction", [](C& c) -> bool& { return c.weights.inst_target_grad; }));
        k.push_back(real_key("tau", "hard-positive mask threshold", [](C& c) -> double& { return c.tau; }, [](double x) { return x > 0.0 && x <= 1.0; }, "(0, 1]"));
        k.push_back(uint_key("kappa", "bag epochs per cycle", [](C& c) -> std::size_t& { return c.kappa; }, 1));
        k.push_back(uint_key("instance_epochs", "instance epochs per cycle", [](C& c) -> std::size_t& { return c.instance_epochs; }, 1));
        k.push_back(uint_key("max_epochs", "total bag epochs", [](C& c) -> std::size_t& { return c.max_epochs; }, 1));
        k.push_back(uint_key("patience", "early-stopping patience in bag epochs, 0 = off", [](C& c) -> std::size_t& { return c.patience; }, 0));
        k.push_back(uint_key("eval_every", "validation cadence in bag epochs", [](C& c) -> std::size_t& { return c.eval_every; }, 1));
        k.push_back(real_key("lr", "Adam learning rate", [](C& c) -> double& { return c.adam.lr; }, nonneg, ">= 0"));
        k.push_back(real_key("weight_decay", "L2 weight decay", [](C& c) -> double& { return c.adam.weight_decay; }, nonneg, ">= 0"));
        k.push_back(real_key("adam_beta1", "Adam first-moment decay", [](C& c) -> double& { return c.adam.beta1; }, [](double x) { return x >= 0.0 && x < 1.0; }, "[0, 1)"));
        k.push_back(real_key("adam_beta2", "Adam second-moment decay", [](C& c) -> double& { return c.adam.beta2; }, [](double x) { return x >= 0.0 && x < 1.0; }, "[0, 1)"));
        k.push_back(real_key("adam_eps", "Adam epsilon", [](C& c) -> double& { return c.adam.eps; }, positive, "> 0"));
        k.push_back(uint_key("bag_batch", "bags per bag-branch step (only 1 is supported)", [](C& c) -> std::size_t& { return c.bag_batch; }, 1));
        k.push_back(uint_key("instance_batch", "instances per instance-branch step", [](C& c) -> std::size_t& { return c.instance_batch; }, 1));
        k.push_back(uint_key("seed", "training seed (initialization and sampling)", [](C& c) -> std::uint64_t& { return c.seed; }, 0));
        k.push_back(bool_key("freeze_instance_head", "exclude the instance head from bag-phase updates", [](C& c) -> bool& { return c.freeze_instance_head; }));
        k.push_back(bool_key("dsmil_tie_scorer", "DSMIL critical-instance scorer is the instance head", [](C& c) -> bool& { return c.dsmil_tie_scorer; }));
        k.push_back(real_key("soft_label_temperature", "soft labels are sigmoid(a / temperature)", [](C& c) -> double& { return c.soft_label_temperature; }, positive, "> 0"));
        k.push_back(bool_key("skip_instance_epochs", "never run the instance branch", [](C& c) -> bool& { return c.skip_instance_epochs; }));
        k.push_back(bool_key("instance_threshold_half", "instance accuracy at 0.5 instead of the Youden threshold", [](C& c) -> bool& { return c.instance_threshold_half; }));

        k.push_back(uint_key("gen.seed", "dataset generation seed", [](C& c) -> std::uint64_t& { return c.synthetic.seed; }, 0));
        k.push_back(uint_key("gen.n_bags", "training bags", [](C& c) -> std::size_t& { return c.synthetic.n_bags; }, 1));
        k.push_back(uint_key("gen.test_bags", "held-out bags (0 writes a single split)", [](C& c) -> std::size_t& { return c.synthetic.test_bags; }, 0));
        k.push_back(uint_key("gen.bag_size_min", "smallest bag", [](C& c) -> std::size_t& { return c.synthetic.bag_size_min; }, 1));
        k.push_back(uint_key("gen.bag_size_max", "largest bag", [](C& c) -> std::size_t& { return c.synthetic.bag_size_max; }, 1));
        k.push_back(uint_key("gen.d_in", "raw feature dimension", [](C& c) -> std::size_t& { return c.synthetic.d_in; }, 1));
        k.push_back(real_key("gen.witness_rate", "fraction of positive instances in a positive bag", [](C& c) -> double& { return c.synthetic.witness_rate; }, [](double x) { return x > 0.0 && x <= 1.0; }, "(0, 1]"));
        k.push_back({"gen.mode", "instance layout [witness|subtype]",
                     [](C& c, const std::string& v) {
                         if (v == "witness") c.synthetic.mode = SyntheticMode::witness;
                         else if (v == "subtype") c.synthetic.mode = SyntheticMode::subtype;
                         else throw ConfigError("unknown gen.mode '" + v + "'");
                     },
                     [](const C& c) { return std::string(c.synthetic.mode == SyntheticMode::witness ? "witness" : "subtype"); }});
        k.push_back(real_key("gen.separation", "distance between class means", [](C& c) -> double& { return c.synthetic.separation; }, nonneg, ">= 0"));
        k.push_back(real_key("gen.noise_scale", "isotropic noise standard deviation", [](C& c) -> double& { return c.synthetic.noise_scale; }, positive, "> 0"));
        k.push_back(real_key("gen.positive_fraction", "probability that a bag is positive", [](C& c) -> double& { return c.synthetic.positive_fraction; }, [](double x) { return x >= 0.0 && x <= 1.0; }, "[0, 1]"));
        k.push_back(real_key("gen.informative_fraction", "subtype mode: class-specific instance fraction", [](C& c) -> double& { return c.synthetic.informative_fraction; }, [](double x) { return x > 0.0 && x <= 1.0; }, "(0, 1]"));
        return k;
    }();
    return keys;
}

/// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
inline TrainConfig parse_config_text(const std::string& text, const std::string& source = "<config>") {
    TrainConfig cfg;
    std::map<std::string, const ConfigKey*> index;
    for (const auto& k : config_keys()) index[k.name] = &k;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    while (std::getline(is, line)) {
        ++line_no;
        const std::string where = source + ":" + std::to_string(line_no) + ": ";
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = index.find(key);
        if (it == index.end()) throw ConfigError(where + "unknown key '" + key + "'");
        try {
            it->second->set(cfg, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    return cfg;
}

inline TrainConfig parse_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

/// Every key with its current value and a documentation comment.
inline std::string dump_config(const TrainConfig& cfg) {
    std::ostringstream os;
    for (const auto& k : config_keys()) {
        os << "# " << k.doc << '\n' << k.name << " = " << k.get(cfg) << '\n';
    }
    return os.str();
}

/// Cross-field checks; returns non-fatal warnings.
inline std::vector<std::string> validate(const TrainConfig& cfg) {
    auto warnings = validate(cfg.weights);
    if (cfg.bag_batch != 1) throw ConfigError("bag_batch must be 1");
    if (cfg.kappa == 0) throw ConfigError("kappa must be at least 1");
    if (cfg.max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
    if (cfg.instance_batch == 0) throw ConfigError("instance_batch must be positive");
    if (!(cfg.tau > 0.0 && cfg.tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
    if (cfg.eval_every == 0) throw ConfigError("eval_every must be positive");
    return warnings;
}

}  // namespace dualmil
