#pragma once

// ROC AUC, Youden-optimal thresholds, accuracy, the attention-based instance
// fallback, heatmap export and the text/CSV report formats.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dualmil/errors.hpp"
#include "dualmil/tensor.hpp"

namespace dualmil {

struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels;

    void add(double score, int label) {
        scores.push_back(score);
        labels.push_back(label);
    }
    std::size_t size() const { return scores.size(); }
    std::size_t positives() const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    }
    bool has_both_classes() const {
        const std::size_t p = positives();
        return p > 0 && p < labels.size();
    }
};

namespace detail {
inline void require_both_classes(const ScoredSet& s, const char* metric) {
    if (s.scores.size() != s.labels.size()) throw DimensionError(std::string(metric) + ": scores and labels differ in length");
    for (int y : s.labels) {
        if (y != 0 && y != 1) throw DataError(std::string(metric) + ": labels must be 0 or 1");
    }
    if (!s.has_both_classes()) {
        throw MetricUndefinedError(std::string(metric) + " undefined: need at least one positive and one negative");
    }
}
}  // namespace detail

/// Mann-Whitney AUC from mid-ranks; tied pos/neg pairs count one half.
inline double auc(const ScoredSet& s) {
    detail::require_both_classes(s, "AUC");
    const std::size_t n = s.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
    // Doubled ranks keep tie averaging exact in integers.
    std::uint64_t pos_rank_sum_x2 = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && s.scores[order[j + 1]] == s.scores[order[i]]) ++j;
        const std::uint64_t rank_x2 = (i + 1) + (j + 1);  // 2 * mean of ranks i+1..j+1
        for (std::size_t k = i; k <= j; ++k) {
            if (s.labels[order[k]] == 1) pos_rank_sum_x2 += rank_x2;
        }
        i = j + 1;
    }
    const double pos = static_cast<double>(s.positives());
    const double neg = static_cast<double>(n) - pos;
    const double u = static_cast<double>(pos_rank_sum_x2) / 2.0 - pos * (pos + 1.0) / 2.0;
    return u / (pos * neg);
}

struct Threshold {
    double value;  // predict positive iff score > value
    double j;      // TPR - FPR at value
};

/// Threshold maximizing Youden's J over midpoints between distinct scores and
/// the +/-infinity sentinels; ties resolve to the larger threshold.
inline Threshold youden_threshold(const ScoredSet& s) {
    detail::require_both_classes(s, "Youden threshold");
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
    const double pos = static_cast<double>(s.positives());
    const double neg = static_cast<double>(s.size()) - pos;
    const double inf = std::numeric_limits<double>::infinity();
    // Walk thresholds from +inf downwards; the first maximum seen is the largest threshold.
    Threshold best{inf, 0.0};
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < order.size()) {
        const double v = s.scores[order[i]];
        while (i < order.size() && s.scores[order[i]] == v) {
            (s.labels[order[i]] == 1 ? tp : fp) += 1;
            ++i;
        }
        const double next = i < order.size() ? s.scores[order[i]] : -inf;
        const double thr = std::isinf(next) ? -inf : next + (v - next) / 2.0;
        const double j = static_cast<double>(tp) / pos - static_cast<double>(fp) / neg;
        if (j > best.j) best = {thr, j};
    }
    return best;
}

/// Fraction of samples where (score > threshold) matches the label.
inline double accuracy_at(const ScoredSet& s, double threshold) {
    if (s.size() == 0) throw MetricUndefinedError("accuracy undefined on an empty set");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        correct += (s.scores[i] > threshold ? 1 : 0) == s.labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(s.size());
}

/// Instance probabilities for models without an instance head: zeros in bags
/// predicted negative, sigmoid of min-max normalized scores otherwise; constant
/// scores map to 0.5.
inline std::vector<double> fallback_instance_probs(int bag_pred, std::span<const double> scores) {
    if (scores.empty()) throw DimensionError("fallback_instance_probs: empty bag");
    std::vector<double> p(scores.size(), 0.0);
    if (bag_pred == 0) return p;
    const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
    const double range = *hi - *lo;
    for (std::size_t j = 0; j < p.size(); ++j) {
        p[j] = range > 0.0 ? sigmoid((scores[j] - *lo) / range) : 0.5;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Reports

struct ScoreRow {
    std::string bag_id;
    long instance_index;  // -1 for the bag-level row
    double score;
    int label;
};

struct MetricsReport {
    std::size_t n_bags = 0;
    std::size_t n_instances = 0;
    double bag_auc = 0.0;
    double bag_acc = 0.0;
    double bag_threshold = 0.0;
    std::optional<double> inst_auc;
    std::optional<double> inst_acc;
    std::optional<double> inst_threshold;
    std::vector<std::string> notices;
    std::vector<ScoreRow> scores;

    ScoredSet bag_set() const {
        ScoredSet s;
        for (const auto& r : scores)
            if (r.instance_index < 0) s.add(r.score, r.label);
        return s;
    }
    ScoredSet instance_set() const {
        ScoredSet s;
        for (const auto& r : scores)
            if (r.instance_index >= 0) s.add(r.score, r.label);
        return s;
    }
};

inline std::string format_real(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest text that parses back exactly
    return std::string(buf, res.ptr);
}

inline double parse_real(const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw FormatError("not a number: '" + s + "'");
    }
    if (used != s.size()) throw FormatError("not a number: '" + s + "'");
    return v;
}

/// key=value lines; instance keys are omitted when instance metrics were skipped.
inline std::string format_report(const MetricsReport& r) {
    std::ostringstream os;
    os << "n_bags=" << r.n_bags << '\n' << "n_instances=" << r.n_instances << '\n';
    os << "bag_auc=" << format_real(r.bag_auc) << '\n';
    os << "bag_acc=" << format_real(r.bag_acc) << '\n';
    os << "bag_threshold=" << format_real(r.bag_threshold) << '\n';
    if (r.inst_auc) os << "inst_auc=" << format_real(*r.inst_auc) << '\n';
    if (r.inst_acc) os << "inst_acc=" << format_real(*r.inst_acc) << '\n';
    if (r.inst_threshold) os << "inst_threshold=" << format_real(*r.inst_threshold) << '\n';
    for (const auto& n : r.notices) os << "notice=" << n << '\n';
    return os.str();
}

inline std::map<std::string, std::string> parse_key_values(std::istream& is) {
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        if (key == "notice") continue;
        kv[key] = line.substr(eq + 1);
    }
    return kv;
}

inline void write_report(const MetricsReport& r, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cannot write '" + path.string() + "'");
    os << format_report(r);
}

inline void write_score_dump(const MetricsReport& r, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cannot write '" + path.string() + "'");
    os << "bag_id,instance_index,score,label\n";
    for (const auto& row : r.scores) {
        os << row.bag_id << ',' << row.instance_index << ',' << format_real(row.score) << ',' << row.label << '\n';
    }
}

inline std::vector<ScoreRow> read_score_dump(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open '" + path.string() + "'");
    std::vector<ScoreRow> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        if (++line_no == 1 || line.empty()) continue;
        std::stringstream ss(line);
        std::string id, idx, score, label;
        if (!std::getline(ss, id, ',') || !std::getline(ss, idx, ',') || !std::getline(ss, score, ',') ||
            !std::getline(ss, label, ',')) {
            throw FormatError(path.string() + ": malformed row at line " + std::to_string(line_no));
        }
        rows.push_back({id, std::stol(idx), parse_real(score), std::stoi(label)});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Writes `<stem>.csv` (probabilities, rows x cols) and `<stem>.pgm`
/// (8-bit binary graymap, 0 = probability 0, 255 = probability 1).
inline void heatmap_export(std::span<const double> probs, std::size_t rows, std::size_t cols,
                           const std::filesystem::path& stem) {
    if (rows * cols != probs.size()) {
        throw DimensionError("heatmap grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                             " does not match " + std::to_string(probs.size()) + " instances");
    }
    auto csv_path = stem;
    csv_path.replace_extension(".csv");
    auto pgm_path = stem;
    pgm_path.replace_extension(".pgm");
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw FormatError("cannot write '" + csv_path.string() + "'");
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            csv << (c ? "," : "") << format_real(std::clamp(probs[r * cols + c], 0.0, 1.0));
        }
        csv << '\n';
    }
    std::ofstream pgm(pgm_path, std::ios::binary | std::ios::trunc);
    if (!pgm) throw FormatError("cannot write '" + pgm_path.string() + "'");
    pgm << "P5\n" << cols << ' ' << rows << "\n255\n";
    for (double p : probs) {
        const auto byte = static_cast<unsigned char>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0));
        pgm.put(static_cast<char>(byte));
    }
}

struct Graymap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;
};

inline Graymap read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path.string() + "'");
    std::string magic;
    int maxval = 0;
    Graymap g;
    is >> magic >> g.width >> g.height >> maxval;
    if (magic != "P5" || maxval != 255 || !is) throw FormatError(path.string() + ": not an 8-bit binary PGM");
    is.get();
    g.pixels.resize(g.width * g.height);
    is.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
    if (static_cast<std::size_t>(is.gcount()) != g.pixels.size()) throw FormatError(path.string() + ": truncated pixel data");
    return g;
}

}  // namespace dualmil
