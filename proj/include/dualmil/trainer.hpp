#pragma once

// Dual-level training schedule: kappa bag epochs, then the instance epochs,
// repeated until max_epochs bag epochs have run.

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dualmil/adam.hpp"
#include "dualmil/bag.hpp"
#include "dualmil/config.hpp"
#include "dualmil/data.hpp"
#include "dualmil/errors.hpp"
#include "dualmil/evaluate.hpp"
#include "dualmil/losses.hpp"
#include "dualmil/model.hpp"
#include "dualmil/nn.hpp"

namespace dualmil {

enum class Phase : std::uint8_t { bag, instance };

inline const char* to_string(Phase p) { return p == Phase::bag ? "bag" : "instance"; }

/// One row of the run log. Bag rows carry loss terms averaged over the epoch;
/// instance rows carry the mean instance-branch loss in `loss_total`.
struct EpochRecord {
    std::size_t index = 0;  // position in the schedule, bag and instance epochs alike
    Phase phase = Phase::bag;
    std::size_t cycle = 0;
    std::size_t bag_epoch = 0;  // bag epochs completed when the row was written
    std::size_t steps = 0;
    double loss_total = 0.0;
    double loss_label = 0.0;
    double loss_inst = 0.0;
    double loss_self = 0.0;
    double loss_attn = 0.0;
    double mask_fraction = 0.0;  // mean |M_i| / n_i
    std::size_t empty_masks = 0;
    std::optional<double> val_bag_auc;
    std::optional<double> val_inst_auc;
    double wall_seconds = 0.0;
};

struct RunLog {
    std::vector<EpochRecord> records;
    std::vector<std::string> warnings;
    std::optional<std::size_t> best_bag_epoch;  // when validation drove model selection
    bool stopped_early = false;

    void append(EpochRecord r) { records.push_back(std::move(r)); }

    /// Every logged number except wall time, for reproducibility checks.
    std::vector<double> metric_values() const {
        std::vector<double> v;
        for (const auto& r : records) {
            v.insert(v.end(), {static_cast<double>(r.index), static_cast<double>(r.phase),
                               static_cast<double>(r.cycle), static_cast<double>(r.bag_epoch),
                               static_cast<double>(r.steps), r.loss_total, r.loss_label, r.loss_inst,
                               r.loss_self, r.loss_attn, r.mask_fraction, static_cast<double>(r.empty_masks),
                               r.val_bag_auc.value_or(-1.0), r.val_inst_auc.value_or(-1.0)});
        }
        return v;
    }

    std::string csv() const {
        std::string out =
            "index,phase,cycle,bag_epoch,steps,loss_total,loss_label,loss_inst,loss_self,loss_attn,"
            "mask_fraction,empty_masks,val_bag_auc,val_inst_auc,wall_seconds\n";
        auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
        for (const auto& r : records) {
            out += std::to_string(r.index) + ',' + to_string(r.phase) + ',' + std::to_string(r.cycle) + ',' +
                   std::to_string(r.bag_epoch) + ',' + std::to_string(r.steps) + ',' + format_real(r.loss_total) +
                   ',' + format_real(r.loss_label) + ',' + format_real(r.loss_inst) + ',' +
                   format_real(r.loss_self) + ',' + format_real(r.loss_attn) + ',' + format_real(r.mask_fraction) +
                   ',' + std::to_string(r.empty_masks) + ',' + opt(r.val_bag_auc) + ',' + opt(r.val_inst_auc) +
                   ',' + format_real(r.wall_seconds) + '\n';
        }
        return out;
    }

    void write_csv(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw Error("cannot write run log '" + path.string() + "'");
        os << csv();
    }
};

/// What one optimizer step touched; passed to TrainHooks::on_step.
struct StepEvent {
    Phase phase;
    std::size_t cycle;
    std::size_t bag_epoch;       // bag epoch this step belongs to (bag) or that preceded it (instance)
    std::size_t group;           // optimizer group id
    std::size_t batch_size;
    std::vector<std::string> updated;  // parameter names in the stepped group
};

struct TrainHooks {
    std::function<void(const StepEvent&)> on_step;
    // Called before the first instance batch is drawn; `bag_epoch` is the just-completed bag epoch.
    std::function<void(std::size_t cycle, std::size_t bag_epoch, const SoftLabelCache&)> on_instance_epoch;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    ModelState state;
    RunLog log;
};

namespace detail {

struct ParamGroups {
    std::vector<NamedParam> bag;
    std::vector<NamedParam> instance;
};

/// Bag phase: everything except a frozen instance head and an untied DSMIL
/// scorer (its gradient never flows through the argmax). Instance phase:
/// encoder and instance head.
inline ParamGroups param_groups(const ModelState& state, const TrainConfig& cfg) {
    ParamGroups g;
    for (const auto& p : state.parameters()) {
        const bool encoder = p.name.rfind("encoder.", 0) == 0;
        const bool inst_head = p.name.rfind("head.inst_", 0) == 0;
        const bool scorer = p.name.rfind("dsmil.scorer_", 0) == 0;
        if (!(scorer || (inst_head && cfg.freeze_instance_head && !is_pooling(state.aggregator)))) {
            g.bag.push_back(p);
        }
        if (encoder || inst_head) g.instance.push_back(p);
    }
    return g;
}

inline std::vector<Tensor> tensors_of(const std::vector<NamedParam>& ps) {
    std::vector<Tensor> out;
    for (const auto& p : ps) out.push_back(p.tensor);
    return out;
}

inline std::vector<std::string> names_of(const std::vector<NamedParam>& ps) {
    std::vector<std::string> out;
    for (const auto& p : ps) out.push_back(p.name);
    return out;
}

}  // namespace detail

/// Trains one model. With a validation set the best-validation-AUC state is
/// returned, otherwise the final one.
inline TrainResult train(const BagDataset& train_ds, const BagDataset* val, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
    if (train_ds.empty()) throw DataError("training set is empty");
    if (val && val->empty()) throw DataError("validation set is empty");
    if (val && val->d_in != train_ds.d_in) throw DataError("validation feature dimension differs from training");
    TrainResult result;
    result.log.warnings = validate(cfg);

    const ModelDims dims{train_ds.d_in, cfg.hidden, cfg.d, cfg.l};
    ModelState state = init_params(cfg.seed, dims, cfg.aggregator, cfg.dsmil_tie_scorer);
    const bool pooling = is_pooling(cfg.aggregator);
    const auto groups = detail::param_groups(state, cfg);
    Adam adam(cfg.adam);
    const std::size_t bag_group = adam.add_group(detail::tensors_of(groups.bag));
    const std::size_t inst_group = adam.add_group(detail::tensors_of(groups.instance));
    const auto bag_names = detail::names_of(groups.bag);
    const auto inst_names = detail::names_of(groups.instance);

    SoftLabelCache cache;
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

    std::optional<double> best_auc;
    std::optional<ModelState> best_state;
    std::size_t since_best = 0;
    std::size_t index = 0;

    const bool ds_has_both = [&] {
        if (!val) return false;
        bool pos = false, neg = false;
        for (const auto& b : val->bags) (b.label == 1 ? pos : neg) = true;
        return pos && neg;
    }();
    if (val && !ds_has_both) result.log.warnings.push_back("validation set has a single bag class; no model selection");

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const std::size_t cycle = epoch / cfg.kappa;
        EpochRecord rec;
        rec.index = index++;
        rec.phase = Phase::bag;
        rec.cycle = cycle;
        rec.bag_epoch = epoch + 1;

        for (std::size_t b : bag_sampler(train_ds.size(), cfg.seed, epoch)) {
            const Bag& bag = train_ds.bags[b];
            state.zero_grad();
            Tensor loss;
            if (pooling) {
                loss = bce(pooling_forward(bag, state).bag_prob, static_cast<double>(bag.label));
                rec.loss_label += loss.item();
                rec.mask_fraction += 1.0;
            } else {
                ForwardOptions opt{.training = true, .tau = cfg.tau, .epoch = static_cast<long>(epoch)};
                BagForwardOut out = bag_forward(bag, state, opt, &cache);
                BagLossParts parts = bag_loss_parts(out, bag.label, cfg.weights);
                loss = loss_bag_total(parts, cfg.weights);
                rec.loss_label += parts.label.item();
                if (parts.inst.defined()) rec.loss_inst += parts.inst.item();
                if (parts.self.defined()) rec.loss_self += parts.self.item();
                if (parts.attn.defined()) rec.loss_attn += parts.attn.item();
                rec.mask_fraction += static_cast<double>(out.survivors.size()) / static_cast<double>(bag.size());
                if (out.mask_empty) ++rec.empty_masks;
            }
            rec.loss_total += loss.item();
            backward(loss);
            adam.step(bag_group);
            ++rec.steps;
            if (hooks.on_step) hooks.on_step({Phase::bag, cycle, epoch + 1, bag_group, 1, bag_names});
        }
        const double n = static_cast<double>(rec.steps);
        rec.loss_total /= n, rec.loss_label /= n, rec.loss_inst /= n, rec.loss_self /= n, rec.loss_attn /= n;
        rec.mask_fraction /= n;

        const bool cycle_done = (epoch + 1) % cfg.kappa == 0;
        const bool run_instance = !pooling && !cfg.skip_instance_epochs && cycle_done;
        const bool evaluate_now = val && ds_has_both && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.max_epochs);

        std::vector<EpochRecord> inst_recs;
        if (run_instance) {
            for (std::size_t ie = 0; ie < cfg.instance_epochs; ++ie) {
                if (hooks.on_instance_epoch) hooks.on_instance_epoch(cycle, epoch + 1, cache);
                EpochRecord irec;
                irec.phase = Phase::instance;
                irec.cycle = cycle;
                irec.bag_epoch = epoch + 1;
                const auto batches = instance_sampler(train_ds, cache, cfg.instance_batch, cfg.seed,
                                                      cycle * cfg.instance_epochs + ie);
                for (const auto& batch : batches) {
                    state.zero_grad();
                    Tensor probs = sigmoid(instance_forward(batch.features, state));
                    Tensor loss = loss_instance_branch(probs, batch.cached_scores, batch.bag_labels, cfg.weights,
                                                       cfg.soft_label_temperature);
                    irec.loss_total += loss.item();
                    backward(loss);
                    adam.step(inst_group);
                    ++irec.steps;
                    if (hooks.on_step) {
                        hooks.on_step({Phase::instance, cycle, epoch + 1, inst_group, batch.refs.size(), inst_names});
                    }
                }
                irec.loss_total /= static_cast<double>(irec.steps);
                inst_recs.push_back(irec);
            }
        }

        // Validation follows the instance epoch when a cycle ends, so the
        // logged state is the one a checkpoint taken at this point would hold.
        bool stop = false;
        if (evaluate_now) {
            MetricsReport report = evaluate_model(state, *val, {cfg.instance_threshold_half});
            EpochRecord& target = inst_recs.empty() ? rec : inst_recs.back();
            target.val_bag_auc = report.bag_auc;
            target.val_inst_auc = report.inst_auc;
            if (!best_auc || report.bag_auc > *best_auc) {
                best_auc = report.bag_auc;
                best_state = state.clone();
                result.log.best_bag_epoch = epoch + 1;
                since_best = 0;
            } else {
                since_best += cfg.eval_every;
                if (cfg.patience > 0 && since_best >= cfg.patience) stop = true;
            }
        }

        rec.wall_seconds = elapsed();
        result.log.append(rec);
        if (hooks.on_epoch) hooks.on_epoch(rec);
        for (auto& irec : inst_recs) {
            irec.index = index++;
            irec.wall_seconds = elapsed();
            result.log.append(irec);
            if (hooks.on_epoch) hooks.on_epoch(irec);
        }
        if (stop) {
            result.log.stopped_early = true;
            break;
        }
    }

    result.state = best_state ? std::move(*best_state) : std::move(state);
    return result;
}

// ---------------------------------------------------------------------------
// Ablation

enum class AblationVariant : std::uint8_t { no_inst, no_self, no_attn };

inline const char* to_string(AblationVariant v) {
    switch (v) {
        case AblationVariant::no_inst: return "no_inst";
        case AblationVariant::no_self: return "no_self";
        case AblationVariant::no_attn: return "no_attn";
    }
    return "?";
}

inline std::optional<AblationVariant> parse_ablation_variant(std::string_view s) {
    if (s == "no_inst") return AblationVariant::no_inst;
    if (s == "no_self") return AblationVariant::no_self;
    if (s == "no_attn") return AblationVariant::no_attn;
    return std::nullopt;
}

/// no_self removes the self-confidence term from both branches.
inline TrainConfig ablated(TrainConfig cfg, AblationVariant v) {
    switch (v) {
        case AblationVariant::no_inst: cfg.weights.use_inst = false; break;
        case AblationVariant::no_self:
            cfg.weights.use_self = false;
            cfg.weights.use_inst_self = false;
            break;
        case AblationVariant::no_attn: cfg.weights.use_attn = false; break;
    }
    return cfg;
}

struct AblationRow {
    std::string name;  // "full" or the variant name
    MetricsReport metrics;
    double d_bag_auc = 0.0;  // variant minus full
    double d_bag_acc = 0.0;
    std::optional<double> d_inst_auc;
    std::optional<double> d_inst_acc;
};

struct AblationReport {
    std::vector<AblationRow> rows;  // full model first

    std::string csv() const {
        std::string out = "variant,bag_auc,bag_acc,inst_auc,inst_acc,d_bag_auc,d_bag_acc,d_inst_auc,d_inst_acc\n";
        auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
        for (const auto& r : rows) {
            out += r.name + ',' + format_real(r.metrics.bag_auc) + ',' + format_real(r.metrics.bag_acc) + ',' +
                   opt(r.metrics.inst_auc) + ',' + opt(r.metrics.inst_acc) + ',' + format_real(r.d_bag_auc) + ',' +
                   format_real(r.d_bag_acc) + ',' + opt(r.d_inst_auc) + ',' + opt(r.d_inst_acc) + '\n';
        }
        return out;
    }
};

/// Runs `jobs` on up to `threads` worker threads. Each job owns its state.
inline void run_parallel(std::vector<std::function<void()>>& jobs, std::size_t threads) {
    if (threads <= 1 || jobs.size() <= 1) {
        for (auto& j : jobs) j();
        return;
    }
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, jobs.size()); ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < jobs.size(); i = next++) {
                try {
                    jobs[i]();
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline std::size_t default_threads() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : hc;
}

/// Trains the full model and every variant with the same seed and evaluates each on `test`.
/// With `val`, each run keeps its best-validation state.
inline AblationReport run_ablation(const TrainConfig& cfg, const std::vector<AblationVariant>& variants,
                                   const BagDataset& train_ds, const BagDataset& test_ds,
                                   std::size_t threads = 1, const BagDataset* val = nullptr) {
    std::vector<TrainConfig> configs{cfg};
    for (auto v : variants) configs.push_back(ablated(cfg, v));
    std::vector<MetricsReport> reports(configs.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        jobs.push_back([&, i] {
            auto trained = train(train_ds, val, configs[i]);
            reports[i] = evaluate_model(trained.state, test_ds, {configs[i].instance_threshold_half});
        });
    }
    run_parallel(jobs, threads);

    AblationReport report;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        AblationRow row;
        row.name = i == 0 ? "full" : to_string(variants[i - 1]);
        row.metrics = reports[i];
        row.d_bag_auc = reports[i].bag_auc - reports[0].bag_auc;
        row.d_bag_acc = reports[i].bag_acc - reports[0].bag_acc;
        if (reports[i].inst_auc && reports[0].inst_auc) row.d_inst_auc = *reports[i].inst_auc - *reports[0].inst_auc;
        if (reports[i].inst_acc && reports[0].inst_acc) row.d_inst_acc = *reports[i].inst_acc - *reports[0].inst_acc;
        report.rows.push_back(std::move(row));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Pooling baselines

struct BaselineReports {
    MetricsReport max_pool;
    MetricsReport mean_pool;
};

/// MaxPooling and MeanPooling trained with the same seed, optimizer and
/// bag-epoch budget (and validation protocol, if `val` is given) as `cfg`, evaluated on `test`.
inline BaselineReports pooling_baselines(const TrainConfig& cfg, const BagDataset& train_ds,
                                         const BagDataset& test_ds, std::size_t threads = 1,
                                         const BagDataset* val = nullptr) {
    BaselineReports out;
    TrainConfig max_cfg = cfg, mean_cfg = cfg;
    max_cfg.aggregator = Aggregator::max_pool;
    mean_cfg.aggregator = Aggregator::mean_pool;
    std::vector<std::function<void()>> jobs{
        [&] { out.max_pool = evaluate_model(train(train_ds, val, max_cfg).state, test_ds); },
        [&] { out.mean_pool = evaluate_model(train(train_ds, val, mean_cfg).state, test_ds); }};
    run_parallel(jobs, threads);
    return out;
}

}  // namespace dualmil
