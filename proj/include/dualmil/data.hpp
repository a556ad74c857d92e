#pragma once

// Synthetic bag generation, the MILB/MILL/manifest on-disk format, CSV
// feature import, and the bag- and instance-level samplers.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dualmil/bag.hpp"
#include "dualmil/errors.hpp"
#include "dualmil/model.hpp"
#include "dualmil/random.hpp"

namespace dualmil {

enum class SyntheticMode { witness, subtype };

struct SyntheticConfig {
    std::uint64_t seed = 0;
    std::size_t n_bags = 1000;
    std::size_t test_bags = 200;  // extra bags emitted as a held-out split by gen_split
    std::size_t bag_size_min = 30;
    std::size_t bag_size_max = 70;
    std::size_t d_in = 32;
    double witness_rate = 0.10;
    SyntheticMode mode = SyntheticMode::witness;
    double separation = 2.0;      // |mu_pos - mu_neg|
    double noise_scale = 1.0;     // isotropic standard deviation
    double positive_fraction = 0.5;
    double informative_fraction = 0.8;  // subtype mode only

    bool operator==(const SyntheticConfig&) const = default;
};

inline void validate(const SyntheticConfig& c) {
    if (c.n_bags == 0) throw ConfigError("n_bags must be positive");
    if (c.bag_size_min == 0 || c.bag_size_max < c.bag_size_min) {
        throw ConfigError("bag size range must satisfy 1 <= min <= max");
    }
    if (c.d_in == 0) throw ConfigError("d_in must be positive");
    if (!(c.witness_rate > 0.0 && c.witness_rate <= 1.0)) throw ConfigError("witness_rate must lie in (0, 1]");
    if (!(c.separation >= 0.0)) throw ConfigError("separation must be nonnegative");
    if (!(c.noise_scale > 0.0)) throw ConfigError("noise_scale must be positive");
    if (!(c.positive_fraction >= 0.0 && c.positive_fraction <= 1.0)) {
        throw ConfigError("positive_fraction must lie in [0, 1]");
    }
    if (!(c.informative_fraction > 0.0 && c.informative_fraction <= 1.0)) {
        throw ConfigError("informative_fraction must lie in (0, 1]");
    }
}

/// ceil(rate * n) without the 0.1 * 30 = 3.0000000000000004 surprise; at least 1.
inline std::size_t positive_count(double rate, std::size_t n) {
    const auto k = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9));
    return std::clamp<std::size_t>(k, 1, n);
}

inline std::string bag_id_for(std::size_t index) {
    std::string digits = std::to_string(index);
    if (digits.size() < 5) digits.insert(0, 5 - digits.size(), '0');
    return "bag_" + digits;
}

namespace detail {

inline std::vector<double> class_mean(const SyntheticConfig& c, int which) {
    // which: 0 = negative / background, 1 = positive (all-ones direction),
    // 2 = second subtype (alternating-sign direction, orthogonal for even d_in).
    std::vector<double> mu(c.d_in, 0.0);
    if (which == 0) return mu;
    const double s = c.separation / std::sqrt(static_cast<double>(c.d_in));
    for (std::size_t k = 0; k < c.d_in; ++k) mu[k] = (which == 2 && (k % 2)) ? -s : s;
    return mu;
}

inline Bag generate_bag(const SyntheticConfig& c, std::size_t index) {
    Rng rng(derive_seed(c.seed, index));
    Bag bag;
    bag.id = bag_id_for(index);
    bag.label = rng.uniform() < c.positive_fraction ? 1 : 0;
    const std::size_t n = c.bag_size_min + rng.below(c.bag_size_max - c.bag_size_min + 1);

    // Choose which instances are "special" (witnesses / informative) by a partial shuffle.
    std::size_t special = 0;
    if (c.mode == SyntheticMode::witness) {
        special = bag.label == 1 ? positive_count(c.witness_rate, n) : 0;
    } else {
        special = positive_count(c.informative_fraction, n);
    }
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < n; ++j) order[j] = j;
    for (std::size_t j = 0; j < special; ++j) std::swap(order[j], order[j + rng.below(n - j)]);
    std::vector<std::uint8_t> is_special(n, 0);
    for (std::size_t j = 0; j < special; ++j) is_special[order[j]] = 1;

    const auto background = class_mean(c, 0);
    const auto foreground = c.mode == SyntheticMode::witness ? class_mean(c, 1)
                                                             : class_mean(c, bag.label == 1 ? 1 : 2);
    std::vector<double> x(n * c.d_in);
    std::vector<std::uint8_t> y(n, 0);
    for (std::size_t j = 0; j < n; ++j) {
        const auto& mu = is_special[j] ? foreground : background;
        for (std::size_t k = 0; k < c.d_in; ++k) {
            // Stored at 32-bit precision so disk round-trips are exact.
            x[j * c.d_in + k] = static_cast<float>(mu[k] + c.noise_scale * rng.normal());
        }
        y[j] = (is_special[j] && bag.label == 1) ? 1 : 0;
    }
    bag.features = Tensor::matrix(n, c.d_in, std::move(x));
    bag.instance_labels = std::move(y);
    return bag;
}

}  // namespace detail

/// Bags [first, first + count) of the stream defined by cfg.seed. Each bag
/// depends only on (seed, index).
inline BagDataset gen_synthetic_range(const SyntheticConfig& cfg, std::size_t first, std::size_t count) {
    validate(cfg);
    BagDataset ds;
    ds.d_in = cfg.d_in;
    ds.bags.reserve(count);
    for (std::size_t i = first; i < first + count; ++i) ds.bags.push_back(detail::generate_bag(cfg, i));
    return ds;
}

inline BagDataset gen_synthetic(const SyntheticConfig& cfg) { return gen_synthetic_range(cfg, 0, cfg.n_bags); }

struct DatasetSplit {
    BagDataset train;
    BagDataset test;
};

/// n_bags training bags followed by test_bags held-out bags from the same stream.
inline DatasetSplit gen_split(const SyntheticConfig& cfg) {
    return {gen_synthetic_range(cfg, 0, cfg.n_bags), gen_synthetic_range(cfg, cfg.n_bags, cfg.test_bags)};
}

// ---------------------------------------------------------------------------
// Binary formats
//
// Feature file (.milb): "MILB" | u16 version | u32 n | u32 d | n*d f32, all little-endian.
// Label file   (.mill): "MILL" | u16 version | u32 n | n bytes in {0,1}.
// Manifest (manifest.tsv): id \t label \t feature_path [\t label_path], paths relative.

inline constexpr std::uint16_t kDataFormatVersion = 1;
inline constexpr const char* kManifestName = "manifest.tsv";

namespace detail {

class ByteWriter {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
        os.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!os) throw FormatError("write failed for '" + path.string() + "'");
    }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

    static ByteReader open(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open '" + path.string() + "'");
        std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        return ByteReader(std::move(data), path.string());
    }

    void magic(std::string_view expected) {
        need(expected.size(), "magic");
        if (std::string_view(data_).substr(pos_, expected.size()) != expected) {
            fail("bad magic, expected '" + std::string(expected) + "'");
        }
        pos_ += expected.size();
    }
    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1, "u8")); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2, "u16")); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4, "u32")); }
    std::uint64_t u64() { return get(8, "u64"); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }

    void version(std::uint16_t supported) {
        const std::size_t at = pos_;
        const std::uint16_t v = u16();
        if (v != supported) {
            pos_ = at;
            fail("unsupported format version " + std::to_string(v));
        }
    }

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

    void expect_remaining(std::size_t n, const char* what) { need(n, what); }

    void expect_end() {
        if (pos_ != data_.size()) fail(std::to_string(data_.size() - pos_) + " trailing bytes");
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw FormatError(source_ + ": " + msg + " at offset " + std::to_string(pos_));
    }

private:
    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n) {
            fail(std::string("truncated while reading ") + what + " (need " + std::to_string(n) +
                 " bytes, have " + std::to_string(data_.size() - pos_) + ")");
        }
    }
    std::uint64_t get(int n, const char* what) {
        need(static_cast<std::size_t>(n), what);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::string data_;
    std::string source_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void write_feature_file(const std::filesystem::path& path, const Tensor& features) {
    detail::ByteWriter w;
    w.bytes("MILB");
    w.u16(kDataFormatVersion);
    w.u32(static_cast<std::uint32_t>(features.rows()));
    w.u32(static_cast<std::uint32_t>(features.cols()));
    for (double v : features.values()) w.f32(static_cast<float>(v));
    w.save(path);
}

inline Tensor read_feature_file(const std::filesystem::path& path) {
    auto r = detail::ByteReader::open(path);
    r.magic("MILB");
    r.version(kDataFormatVersion);
    const std::uint32_t n = r.u32();
    const std::uint32_t d = r.u32();
    if (n == 0 || d == 0) r.fail("empty feature matrix " + std::to_string(n) + "x" + std::to_string(d));
    const std::uint64_t count = std::uint64_t{n} * d;
    r.expect_remaining(static_cast<std::size_t>(count * 4), "feature values");
    std::vector<double> values(static_cast<std::size_t>(count));
    for (double& v : values) {
        const float f = r.f32();
        if (!std::isfinite(f)) r.fail("non-finite feature value");
        v = f;
    }
    r.expect_end();
    return Tensor::matrix(n, d, std::move(values));
}

inline void write_label_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
    detail::ByteWriter w;
    w.bytes("MILL");
    w.u16(kDataFormatVersion);
    w.u32(static_cast<std::uint32_t>(labels.size()));
    for (auto v : labels) w.u8(v);
    w.save(path);
}

inline std::vector<std::uint8_t> read_label_file(const std::filesystem::path& path) {
    auto r = detail::ByteReader::open(path);
    r.magic("MILL");
    r.version(kDataFormatVersion);
    const std::uint32_t n = r.u32();
    r.expect_remaining(n, "instance labels");
    std::vector<std::uint8_t> labels(n);
    for (auto& v : labels) {
        v = r.u8();
        if (v > 1) r.fail("instance label outside {0,1}");
    }
    r.expect_end();
    return labels;
}

/// Plain CSV feature matrix, one instance per row; a non-numeric first row is a header.
inline Tensor read_csv_features(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open '" + path.string() + "'");
    std::vector<double> values;
    std::size_t cols = 0, rows = 0, line_no = 0;
    std::string line;
    auto parse_row = [](const std::string& text, std::vector<double>& out) {
        std::stringstream ss(text);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            const auto b = cell.find_first_not_of(" \t\r");
            const auto e = cell.find_last_not_of(" \t\r");
            if (b == std::string::npos) return false;
            const char* first = cell.data() + b;
            const char* last = cell.data() + e + 1;
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(first, last, v);
            if (ec != std::errc{} || ptr != last || !std::isfinite(v)) return false;
            out.push_back(v);
        }
        return !out.empty();
    };
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::vector<double> row;
        if (!parse_row(line, row)) {
            if (rows == 0 && values.empty() && line_no == 1) continue;  // header
            throw FormatError(path.string() + ": unparseable row at line " + std::to_string(line_no));
        }
        if (rows == 0) cols = row.size();
        if (row.size() != cols) {
            throw FormatError(path.string() + ": line " + std::to_string(line_no) + " has " +
                              std::to_string(row.size()) + " columns, expected " + std::to_string(cols));
        }
        values.insert(values.end(), row.begin(), row.end());
        ++rows;
    }
    if (rows == 0) throw FormatError(path.string() + ": no feature rows");
    return Tensor::matrix(rows, cols, std::move(values));
}

inline void save_dataset(const BagDataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "features");
    const bool any_labels = std::any_of(ds.bags.begin(), ds.bags.end(),
                                        [](const Bag& b) { return b.instance_labels.has_value(); });
    if (any_labels) fs::create_directories(dir / "labels");
    std::ofstream manifest(dir / kManifestName, std::ios::trunc);
    if (!manifest) throw FormatError("cannot write manifest in '" + dir.string() + "'");
    for (const Bag& bag : ds.bags) {
        if (bag.id.empty() || bag.id == "." || bag.id == ".." ||
            bag.id.find_first_of("/\\\t\n") != std::string::npos) {
            throw DataError("bag id '" + bag.id + "' cannot be used as a file name");
        }
        const std::string feature_rel = "features/" + bag.id + ".milb";
        write_feature_file(dir / feature_rel, bag.features);
        manifest << bag.id << '\t' << bag.label << '\t' << feature_rel;
        if (bag.instance_labels) {
            const std::string label_rel = "labels/" + bag.id + ".mill";
            write_label_file(dir / label_rel, *bag.instance_labels);
            manifest << '\t' << label_rel;
        }
        manifest << '\n';
    }
    if (!manifest) throw FormatError("write failed for manifest in '" + dir.string() + "'");
}

inline BagDataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / kManifestName;
    std::ifstream manifest(manifest_path);
    if (!manifest) throw FormatError("cannot open '" + manifest_path.string() + "'");
    BagDataset ds;
    std::set<std::string> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        const std::string where = manifest_path.string() + ":" + std::to_string(line_no);
        if (fields.size() != 3 && fields.size() != 4) throw FormatError(where + ": expected 3 or 4 tab-separated fields");
        if (fields[0].empty()) throw DataError(where + ": empty bag id");
        if (!ids.insert(fields[0]).second) throw DataError(where + ": duplicate bag id '" + fields[0] + "'");
        if (fields[1] != "0" && fields[1] != "1") throw FormatError(where + ": label must be 0 or 1");
        Bag bag;
        bag.id = fields[0];
        bag.label = fields[1] == "1" ? 1 : 0;
        const std::filesystem::path feature_path = dir / fields[2];
        bag.features = feature_path.extension() == ".csv" ? read_csv_features(feature_path)
                                                          : read_feature_file(feature_path);
        if (fields.size() == 4) bag.instance_labels = read_label_file(dir / fields[3]);
        validate_bag(bag);
        if (ds.bags.empty()) ds.d_in = bag.dim();
        if (bag.dim() != ds.d_in) {
            throw DataError(where + ": bag '" + bag.id + "' has " + std::to_string(bag.dim()) +
                            " features, expected " + std::to_string(ds.d_in));
        }
        ds.bags.push_back(std::move(bag));
    }
    if (ds.bags.empty()) throw DataError(manifest_path.string() + ": no bags");
    return ds;
}

// ---------------------------------------------------------------------------
// Samplers

/// Seeded Fisher-Yates permutation of bag indices for one epoch.
inline std::vector<std::size_t> bag_sampler(std::size_t n_bags, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(n_bags);
    for (std::size_t i = 0; i < n_bags; ++i) order[i] = i;
    Rng rng(derive_seed(derive_seed(seed, 0xba6), epoch));
    for (std::size_t i = n_bags; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

struct InstanceRef {
    std::size_t bag;
    std::size_t instance;
    bool operator==(const InstanceRef&) const = default;
    auto operator<=>(const InstanceRef&) const = default;
};

struct InstanceBatch {
    std::vector<InstanceRef> refs;
    Tensor features;                   // [B x d_in]
    std::vector<double> cached_scores;  // raw attention of each instance from its bag's cache entry
    std::vector<int> bag_labels;
};

/// Shuffles the global instance pool and cuts it into batches of at most batch_size.
inline std::vector<InstanceBatch> instance_sampler(const BagDataset& ds, const SoftLabelCache& cache,
                                                   std::size_t batch_size, std::uint64_t seed,
                                                   std::uint64_t epoch) {
    if (batch_size == 0) throw ConfigError("instance batch size must be positive");
    std::vector<const SoftLabelCache::Entry*> entries(ds.size());
    for (std::size_t b = 0; b < ds.size(); ++b) {
        const auto* e = cache.find(ds.bags[b].id);
        if (!e) throw ContractError("instance sampler: no cached attention for bag '" + ds.bags[b].id + "'");
        if (e->raw.size() != ds.bags[b].size()) {
            throw ContractError("instance sampler: cached attention for bag '" + ds.bags[b].id + "' has wrong length");
        }
        entries[b] = e;
    }
    std::vector<InstanceRef> pool;
    pool.reserve(ds.total_instances());
    for (std::size_t b = 0; b < ds.size(); ++b)
        for (std::size_t j = 0; j < ds.bags[b].size(); ++j) pool.push_back({b, j});
    Rng rng(derive_seed(derive_seed(seed, 0x1257), epoch));
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);

    std::vector<InstanceBatch> batches;
    for (std::size_t start = 0; start < pool.size(); start += batch_size) {
        const std::size_t end = std::min(pool.size(), start + batch_size);
        InstanceBatch batch;
        batch.refs.assign(pool.begin() + static_cast<std::ptrdiff_t>(start), pool.begin() + static_cast<std::ptrdiff_t>(end));
        std::vector<double> x;
        x.reserve(batch.refs.size() * ds.d_in);
        for (const auto& ref : batch.refs) {
            const auto row = ds.bags[ref.bag].features.values().subspan(ref.instance * ds.d_in, ds.d_in);
            x.insert(x.end(), row.begin(), row.end());
            batch.cached_scores.push_back(entries[ref.bag]->raw[ref.instance]);
            batch.bag_labels.push_back(ds.bags[ref.bag].label);
        }
        batch.features = Tensor::matrix(batch.refs.size(), ds.d_in, std::move(x));
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace dualmil
