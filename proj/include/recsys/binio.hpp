#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "recsys/error.hpp"
#include "recsys/tensor.hpp"

namespace recsys {

// Little-endian IEEE-754 32-bit float framing shared by the checkpoint,
// embedding, index and results-store files.

inline void write_f32(std::ostream& out, float x) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap32(bits);
    }
    char buf[4];
    std::memcpy(buf, &bits, 4);
    out.write(buf, 4);
}

inline float read_f32(std::istream& in) {
    char buf[4];
    in.read(buf, 4);
    if (in.gcount() != 4) throw IntegrityError("unexpected end of float block", static_cast<std::uint64_t>(in.tellg()));
    std::uint32_t bits;
    std::memcpy(&bits, buf, 4);
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap32(bits);
    }
    return std::bit_cast<float>(bits);
}

inline void write_f32_array(std::ostream& out, const Real* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) write_f32(out, static_cast<float>(data[i]));
}

inline void read_f32_array(std::istream& in, Real* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<Real>(read_f32(in));
}

inline std::string read_header_line(std::istream& in, const char* what) {
    std::string line;
    if (!std::getline(in, line))
        throw IntegrityError(std::string("missing ") + what,
                             in.eof() ? 0 : static_cast<std::uint64_t>(in.tellg()));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

// "key=value" header lines up to a blank terminator.
inline std::vector<std::pair<std::string, std::string>> read_header_fields(std::istream& in) {
    std::vector<std::pair<std::string, std::string>> fields;
    for (;;) {
        std::string line = read_header_line(in, "header line");
        if (line.empty()) break;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw IntegrityError("malformed header line '" + line + "'", static_cast<std::uint64_t>(in.tellg()));
        fields.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return fields;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

}  // namespace recsys
