#pragma once

// MILC checkpoint: a versioned little-endian dump of ModelState.
//
//   "MILC" | u16 version | u8 aggregator | u8 flags (bit 0: DSMIL scorer tied)
//   | u32 d_in | u32 hidden | u32 d | u32 l | u32 n_classes | u32 tensor count
//   | per tensor, in ModelState::parameters() order: u32 rank | u32 dims[rank] | f64 values

#include <cstdint>
#include <filesystem>
#include <string>

#include "dualmil/data.hpp"
#include "dualmil/errors.hpp"
#include "dualmil/nn.hpp"

namespace dualmil {

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
    detail::ByteWriter w;
    w.bytes("MILC");
    w.u16(kCheckpointVersion);
    w.u8(static_cast<std::uint8_t>(state.aggregator));
    w.u8(state.dsmil_tie_scorer ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(state.dims.d_in));
    w.u32(static_cast<std::uint32_t>(state.dims.hidden));
    w.u32(static_cast<std::uint32_t>(state.dims.d));
    w.u32(static_cast<std::uint32_t>(state.dims.l));
    w.u32(static_cast<std::uint32_t>(kNumClasses));
    const auto params = state.parameters();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
        for (std::size_t dim : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(dim));
        for (double v : p.tensor.values()) w.f64(v);
    }
    w.save(path);
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
    auto r = detail::ByteReader::open(path);
    r.magic("MILC");
    r.version(kCheckpointVersion);
    const std::uint8_t tag = r.u8();
    if (tag > static_cast<std::uint8_t>(Aggregator::mean_pool)) r.fail("unknown aggregator tag " + std::to_string(tag));
    const std::uint8_t flags = r.u8();
    if (flags > 1) r.fail("unknown flag bits " + std::to_string(flags));
    ModelDims dims;
    dims.d_in = r.u32();
    dims.hidden = r.u32();
    dims.d = r.u32();
    dims.l = r.u32();
    const std::uint32_t classes = r.u32();
    if (classes != kNumClasses) r.fail("unsupported class count " + std::to_string(classes));
    if (dims.d_in == 0 || dims.hidden == 0 || dims.d == 0 || dims.l == 0) r.fail("zero model dimension");

    ModelState state = init_params(0, dims, static_cast<Aggregator>(tag), (flags & 1) != 0);
    const auto params = state.parameters();
    const std::uint32_t count = r.u32();
    if (count != params.size()) {
        r.fail("expected " + std::to_string(params.size()) + " tensors, found " + std::to_string(count));
    }
    for (const auto& p : params) {
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        for (auto& dim : shape) dim = r.u32();
        if (shape != p.tensor.shape()) {
            r.fail(p.name + " has shape " + shape_string(shape) + ", expected " + shape_string(p.tensor.shape()));
        }
        r.expect_remaining(p.tensor.size() * 8, p.name.c_str());
        Tensor t = p.tensor;
        for (double& v : t.mutable_values()) {
            v = r.f64();
            if (!std::isfinite(v)) r.fail("non-finite value in " + p.name);
        }
    }
    r.expect_end();
    return state;
}

}  // namespace dualmil
