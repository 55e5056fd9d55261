// SPDX-License-Identifier: Apache-2.0
#include "kdforge/binary_io.hpp"

#include <bit>
#include <istream>
#include <ostream>

#include "kdforge/errors.hpp"

namespace kdforge::binio {

namespace {

template <typename U>
void put(std::ostream& os, U v) {
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    os.write(buf, sizeof(U));
}

template <typename U>
U get(std::istream& is, std::string_view what) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (is.gcount() != static_cast<std::streamsize>(sizeof(U))) {
        throw TruncatedError("unexpected end of stream while reading " + std::string(what));
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
    }
    return v;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) {
    put(os, v);
}
void write_u16(std::ostream& os, std::uint16_t v) {
    put(os, v);
}
void write_u32(std::ostream& os, std::uint32_t v) {
    put(os, v);
}
void write_f32(std::ostream& os, float v) {
    put(os, std::bit_cast<std::uint32_t>(v));
}
void write_bytes(std::ostream& os, std::string_view bytes) {
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint8_t read_u8(std::istream& is, std::string_view what) {
    return get<std::uint8_t>(is, what);
}
std::uint16_t read_u16(std::istream& is, std::string_view what) {
    return get<std::uint16_t>(is, what);
}
std::uint32_t read_u32(std::istream& is, std::string_view what) {
    return get<std::uint32_t>(is, what);
}
float read_f32(std::istream& is, std::string_view what) {
    return std::bit_cast<float>(get<std::uint32_t>(is, what));
}

std::string read_bytes(std::istream& is, std::size_t n, std::string_view what) {
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (is.gcount() != static_cast<std::streamsize>(n)) {
        throw TruncatedError("unexpected end of stream while reading " + std::string(what));
    }
    return s;
}

void expect_header(std::istream& is, std::string_view magic, std::uint32_t version, std::string_view format) {
    char buf[4] = {};
    is.read(buf, 4);
    if (is.gcount() != 4) {
        throw TruncatedError(std::string(format) + ": stream too short for a header");
    }
    if (std::string_view(buf, 4) != magic) {
        throw BadMagicError(std::string(format) + ": bad magic, expected '" + std::string(magic) + "'");
    }
    const std::uint32_t v = read_u32(is, "format version");
    if (v != version) {
        throw UnsupportedVersionError(std::string(format) + ": unsupported version " + std::to_string(v) +
                                      " (this build reads " + std::to_string(version) + ")");
    }
}

}  // namespace kdforge::binio
