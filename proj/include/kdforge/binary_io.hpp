// SPDX-License-Identifier: Apache-2.0
//
// Little-endian primitives for the binary formats. Readers raise
// TruncatedError when the stream ends early.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>

namespace kdforge::binio {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_f32(std::ostream& os, float v);
void write_bytes(std::ostream& os, std::string_view bytes);

std::uint8_t read_u8(std::istream& is, std::string_view what);
std::uint16_t read_u16(std::istream& is, std::string_view what);
std::uint32_t read_u32(std::istream& is, std::string_view what);
float read_f32(std::istream& is, std::string_view what);
std::string read_bytes(std::istream& is, std::size_t n, std::string_view what);

// Reads the 4-byte magic and the u32 version; BadMagicError /
// UnsupportedVersionError on mismatch.
void expect_header(std::istream& is, std::string_view magic, std::uint32_t version, std::string_view format);

}  // namespace kdforge::binio
