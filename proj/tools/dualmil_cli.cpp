// Command-line front end: dataset generation, training, evaluation, ablation,
// pooling baselines and heatmap export.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dualmil/dualmil.hpp"

namespace fs = std::filesystem;
using namespace dualmil;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

// A dataset directory is either a split itself (has a manifest) or holds
// train/ and test/ splits as written by `gen`.
fs::path split_dir(const fs::path& dir, const char* split) {
    if (fs::exists(dir / kManifestName)) return dir;
    if (fs::exists(dir / split / kManifestName)) return dir / split;
    throw FormatError("'" + dir.string() + "' has neither " + kManifestName + " nor " + split + "/" + kManifestName);
}

bool has_split(const fs::path& dir, const char* split) { return fs::exists(dir / split / kManifestName); }

// Split used for reported metrics: test/ when present, else the dataset itself.
fs::path report_dir(const fs::path& dir) { return has_split(dir, "test") ? dir / "test" : split_dir(dir, "train"); }

std::optional<BagDataset> load_val(const std::string& val_dir) {
    if (val_dir.empty()) return std::nullopt;
    return load_dataset(split_dir(val_dir, "test"));
}

TrainConfig load_config(const std::string& path) {
    TrainConfig cfg = path.empty() ? TrainConfig{} : parse_config(path);
    for (const auto& w : validate(cfg)) std::cerr << "warning: " << w << '\n';
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cannot write '" + path.string() + "'");
    os << text;
}

void print_metrics(const std::string& label, const MetricsReport& r) {
    std::printf("%s: bag_auc=%.4f bag_acc=%.4f", label.c_str(), r.bag_auc, r.bag_acc);
    if (r.inst_auc) std::printf(" inst_auc=%.4f inst_acc=%.4f", *r.inst_auc, *r.inst_acc);
    std::printf("\n");
    for (const auto& n : r.notices) std::printf("  %s\n", n.c_str());
}

int cmd_gen(const std::string& config, const fs::path& out) {
    const TrainConfig cfg = load_config(config);
    const DatasetSplit split = gen_split(cfg.synthetic);
    save_dataset(split.train, out / "train");
    if (!split.test.empty()) save_dataset(split.test, out / "test");
    std::printf("wrote %zu train and %zu test bags to %s\n", split.train.size(), split.test.size(), out.c_str());
    return kExitOk;
}

int cmd_train(const std::string& config, const fs::path& data, const std::string& val_dir, const fs::path& out) {
    const TrainConfig cfg = load_config(config);
    const BagDataset train_ds = load_dataset(split_dir(data, "train"));
    const auto val = load_val(val_dir);
    const fs::path report_path = report_dir(data);
    const BagDataset report_ds = report_path == split_dir(data, "train") ? train_ds : load_dataset(report_path);

    TrainHooks hooks;
    hooks.on_epoch = [](const EpochRecord& r) {
        if (r.phase != Phase::instance && !r.val_bag_auc) return;
        std::printf("epoch %zu %-8s loss=%.4f", r.bag_epoch, to_string(r.phase), r.loss_total);
        if (r.val_bag_auc) std::printf(" val_bag_auc=%.4f", *r.val_bag_auc);
        std::printf("\n");
        std::fflush(stdout);
    };
    TrainResult result = train(train_ds, val ? &*val : nullptr, cfg, hooks);
    for (const auto& w : result.log.warnings) std::cerr << "warning: " << w << '\n';

    fs::create_directories(out);
    save_checkpoint(result.state, out / "model.milc");
    result.log.write_csv(out / "runlog.csv");
    write_text(out / "config.conf", dump_config(cfg));
    const MetricsReport report = evaluate_model(result.state, report_ds, {cfg.instance_threshold_half});
    write_report(report, out / "metrics.txt");
    write_score_dump(report, out / "scores.csv");
    print_metrics(report_path.filename().string(), report);
    return kExitOk;
}

int cmd_eval(const fs::path& model, const fs::path& data, const fs::path& out, bool half) {
    const ModelState state = load_checkpoint(model);
    const BagDataset ds = load_dataset(report_dir(data));
    if (ds.d_in != state.dims.d_in) {
        throw DataError("model expects " + std::to_string(state.dims.d_in) + " features, dataset has " +
                        std::to_string(ds.d_in));
    }
    const MetricsReport report = evaluate_model(state, ds, {half});
    fs::create_directories(out);
    write_report(report, out / "metrics.txt");
    write_score_dump(report, out / "scores.csv");
    print_metrics("eval", report);
    return kExitOk;
}

int cmd_ablate(const std::string& config, const fs::path& data, const std::string& val_dir, const fs::path& out,
               const std::vector<std::string>& variant_names, std::size_t threads) {
    const TrainConfig cfg = load_config(config);
    std::vector<AblationVariant> variants;
    for (const auto& n : variant_names) {
        auto v = parse_ablation_variant(n);
        if (!v) throw ConfigError("unknown ablation variant '" + n + "' (expected no_inst, no_self or no_attn)");
        variants.push_back(*v);
    }
    const BagDataset train_ds = load_dataset(split_dir(data, "train"));
    const BagDataset test_ds = load_dataset(report_dir(data));
    const auto val = load_val(val_dir);
    const AblationReport report = run_ablation(cfg, variants, train_ds, test_ds, threads, val ? &*val : nullptr);
    fs::create_directories(out);
    write_text(out / "ablation.csv", report.csv());
    for (const auto& row : report.rows) print_metrics(row.name, row.metrics);
    return kExitOk;
}

int cmd_baselines(const std::string& config, const fs::path& data, const std::string& val_dir, const fs::path& out,
                  std::size_t threads) {
    const TrainConfig cfg = load_config(config);
    const BagDataset train_ds = load_dataset(split_dir(data, "train"));
    const BagDataset test_ds = load_dataset(report_dir(data));
    const auto val = load_val(val_dir);
    const BaselineReports reports = pooling_baselines(cfg, train_ds, test_ds, threads, val ? &*val : nullptr);
    fs::create_directories(out / "max_pool");
    fs::create_directories(out / "mean_pool");
    write_report(reports.max_pool, out / "max_pool" / "metrics.txt");
    write_report(reports.mean_pool, out / "mean_pool" / "metrics.txt");
    std::string csv = "model,bag_auc,bag_acc,inst_auc,inst_acc\n";
    auto row = [&](const char* name, const MetricsReport& r) {
        csv += std::string(name) + ',' + format_real(r.bag_auc) + ',' + format_real(r.bag_acc) + ',' +
               (r.inst_auc ? format_real(*r.inst_auc) : "") + ',' + (r.inst_acc ? format_real(*r.inst_acc) : "") + '\n';
    };
    row("max_pool", reports.max_pool);
    row("mean_pool", reports.mean_pool);
    write_text(out / "baselines.csv", csv);
    print_metrics("max_pool", reports.max_pool);
    print_metrics("mean_pool", reports.mean_pool);
    return kExitOk;
}

// Instance probabilities of one bag in evaluation mode. Pooling models use the
// min-max fallback gated on bag_prob > 0.5, since no split-level threshold exists here.
std::vector<double> bag_instance_probs(const ModelState& state, const Bag& bag) {
    NoGradGuard no_grad;
    if (is_pooling(state.aggregator)) {
        auto out = pooling_forward(bag, state);
        const std::vector<double> logits(out.instance_logits.values().begin(), out.instance_logits.values().end());
        return fallback_instance_probs(out.bag_prob.item() > 0.5 ? 1 : 0, logits);
    }
    auto out = bag_forward(bag, state, ForwardOptions{.training = false});
    std::vector<double> p;
    for (double z : out.instance_logits.values()) p.push_back(sigmoid(z));
    return p;
}

int cmd_heatmap(const fs::path& model, const fs::path& data, const std::string& bag_id, const std::string& grid,
                const fs::path& out) {
    std::size_t rows = 0, cols = 0;
    char x = 0, extra = 0;
    if (std::sscanf(grid.c_str(), "%zu%c%zu%c", &rows, &x, &cols, &extra) != 3 || (x != 'x' && x != 'X') ||
        rows == 0 || cols == 0) {
        throw ConfigError("--grid must look like RxC with positive R and C, got '" + grid + "'");
    }
    const ModelState state = load_checkpoint(model);
    std::vector<fs::path> dirs;
    if (fs::exists(data / kManifestName)) dirs.push_back(data);
    for (const char* s : {"train", "test"})
        if (has_split(data, s)) dirs.push_back(data / s);
    if (dirs.empty()) throw FormatError("no dataset found under '" + data.string() + "'");
    for (const auto& dir : dirs) {
        const BagDataset ds = load_dataset(dir);
        for (const Bag& bag : ds.bags) {
            if (bag.id != bag_id) continue;
            if (bag.dim() != state.dims.d_in) throw DataError("model and bag feature dimensions differ");
            const auto probs = bag_instance_probs(state, bag);
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            heatmap_export(probs, rows, cols, out);
            std::printf("wrote heatmap for %s (%zux%zu)\n", bag_id.c_str(), rows, cols);
            return kExitOk;
        }
    }
    throw DataError("bag '" + bag_id + "' not found under '" + data.string() + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-branch multiple instance learning on bag datasets"};
    app.require_subcommand(1, 1);

    std::string config, data, out, val, model, bag, grid;
    std::vector<std::string> variants{"no_inst", "no_self", "no_attn"};
    std::size_t threads = 1;
    bool half = false;

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset (train/ and test/ splits)");
    gen->add_option("--config", config, "config file (gen.* keys)")->check(CLI::ExistingFile);
    gen->add_option("--out", out, "output directory")->required();

    auto* tr = app.add_subcommand("train", "train a model; writes model.milc, runlog.csv, metrics.txt, scores.csv");
    tr->add_option("--config", config, "config file")->check(CLI::ExistingFile);
    tr->add_option("--data", data, "dataset directory")->required();
    tr->add_option("--val", val, "validation dataset directory (enables model selection)");
    tr->add_option("--out", out, "output directory")->required();

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; writes metrics.txt and scores.csv");
    ev->add_option("--model", model, "checkpoint (.milc)")->required();
    ev->add_option("--data", data, "dataset directory")->required();
    ev->add_option("--out", out, "output directory")->required();
    ev->add_flag("--instance-threshold-half", half, "use 0.5 instead of a tuned instance threshold");

    auto* ab = app.add_subcommand("ablate", "train the full model and ablated variants; writes ablation.csv");
    ab->add_option("--config", config, "config file")->check(CLI::ExistingFile);
    ab->add_option("--data", data, "dataset directory")->required();
    ab->add_option("--val", val, "validation dataset directory (each run keeps its best state)");
    ab->add_option("--out", out, "output directory")->required();
    ab->add_option("--variants", variants, "variants to run")->delimiter(',');
    ab->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);

    auto* hm = app.add_subcommand("heatmap", "export one bag's instance probabilities as CSV and PGM");
    hm->add_option("--model", model, "checkpoint (.milc)")->required();
    hm->add_option("--data", data, "dataset directory")->required();
    hm->add_option("--bag", bag, "bag id")->required();
    hm->add_option("--grid", grid, "grid shape RxC; R*C must equal the bag size")->required();
    hm->add_option("--out", out, "output path stem (.csv and .pgm are appended)")->required();

    auto* bl = app.add_subcommand("baselines", "train MaxPooling and MeanPooling; writes baselines.csv");
    bl->add_option("--config", config, "config file")->check(CLI::ExistingFile);
    bl->add_option("--data", data, "dataset directory")->required();
    bl->add_option("--val", val, "validation dataset directory (each run keeps its best state)");
    bl->add_option("--out", out, "output directory")->required();
    bl->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return kExitUsage;
    }

    try {
        if (*gen) return cmd_gen(config, out);
        if (*tr) return cmd_train(config, data, val, out);
        if (*ev) return cmd_eval(model, data, out, half);
        if (*ab) return cmd_ablate(config, data, val, out, variants, threads);
        if (*hm) return cmd_heatmap(model, data, bag, grid, out);
        if (*bl) return cmd_baselines(config, data, val, out, threads);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitData;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kExitData;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const DimensionError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const MetricUndefinedError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
