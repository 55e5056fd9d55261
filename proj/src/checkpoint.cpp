// SPDX-License-Identifier: Apache-2.0
#include "kdforge/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "kdforge/binary_io.hpp"
#include "kdforge/errors.hpp"

namespace kdforge {

namespace {
constexpr std::uint8_t kDtypeF32 = 0;
}

void write_checkpoint(std::ostream& os, const NamedTensors& tensors) {
    binio::write_bytes(os, "KDFG");
    binio::write_u32(os, kCheckpointVersion);
    binio::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        binio::write_u32(os, static_cast<std::uint32_t>(name.size()));
        binio::write_bytes(os, name);
        binio::write_u8(os, kDtypeF32);
        binio::write_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) {
            binio::write_u32(os, static_cast<std::uint32_t>(e));
        }
        for (double v : t.data()) {
            binio::write_f32(os, static_cast<float>(v));
        }
    }
}

NamedTensors read_checkpoint(std::istream& is) {
    binio::expect_header(is, "KDFG", kCheckpointVersion, "checkpoint");
    const std::uint32_t count = binio::read_u32(is, "tensor count");
    NamedTensors out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = binio::read_u32(is, "tensor name length");
        std::string name = binio::read_bytes(is, len, "tensor name");
        const std::uint8_t dtype = binio::read_u8(is, "dtype");
        if (dtype != kDtypeF32) {
            throw FormatError("checkpoint: tensor '" + name + "' has unknown dtype code " + std::to_string(dtype));
        }
        const std::uint32_t ndim = binio::read_u32(is, "rank");
        if (ndim > 16) {
            throw FormatError("checkpoint: tensor '" + name + "' has implausible rank " + std::to_string(ndim));
        }
        Shape shape(ndim);
        for (auto& e : shape) {
            e = binio::read_u32(is, "dimension");
        }
        // Grow incrementally so a corrupted extent hits TruncatedError, not bad_alloc.
        const std::size_t numel = shape_numel(shape);
        std::vector<double> data;
        data.reserve(std::min<std::size_t>(numel, std::size_t{1} << 20));
        for (std::size_t j = 0; j < numel; ++j) {
            data.push_back(binio::read_f32(is, "tensor data"));
        }
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw Error("cannot open '" + path.string() + "' for writing");
    }
    write_checkpoint(os, tensors);
    if (!os) {
        throw Error("failed writing '" + path.string() + "'");
    }
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw Error("cannot open '" + path.string() + "'");
    }
    return read_checkpoint(is);
}

}  // namespace kdforge
