#ifndef CORRDISTILL_BINARY_IO_HPP
#define CORRDISTILL_BINARY_IO_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>

#include "corrdistill/error.hpp"

// Little-endian primitives shared by every binary checkpoint and data file.
namespace corrdistill::binio {

template <typename T>
T byteswap_if_big(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::endian::native == std::endian::little) {
        return value;
    } else {
        std::array<unsigned char, sizeof(T)> bytes;
        std::memcpy(bytes.data(), &value, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        std::memcpy(&value, bytes.data(), sizeof(T));
        return value;
    }
}

template <typename T>
void write_le(std::ostream& os, T value) {
    value = byteswap_if_big(value);
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void write_le_array(std::ostream& os, std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (const T& v : values) write_le(os, v);
    }
}

template <typename T>
T read_le(std::istream& is, std::string_view what) {
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
        throw FormatError(FormatErrorKind::truncated, std::string(what) + ": unexpected end of file");
    }
    return byteswap_if_big(value);
}

template <typename T>
void read_le_array(std::istream& is, std::span<T> out, std::string_view what) {
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()));
    if (is.gcount() != static_cast<std::streamsize>(out.size_bytes())) {
        throw FormatError(FormatErrorKind::truncated, std::string(what) + ": payload shorter than header declares");
    }
    if constexpr (std::endian::native != std::endian::little) {
        for (T& v : out) v = byteswap_if_big(v);
    }
}

inline void write_magic(std::ostream& os, std::string_view magic, std::uint32_t version) {
    os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
    write_le<std::uint32_t>(os, version);
}

inline void expect_magic(std::istream& is, std::string_view magic, std::uint32_t version, std::string_view what) {
    std::array<char, 4> got{};
    is.read(got.data(), 4);
    if (is.gcount() != 4) throw FormatError(FormatErrorKind::truncated, std::string(what) + ": missing header");
    if (std::string_view(got.data(), 4) != magic) {
        throw FormatError(FormatErrorKind::bad_magic,
                          std::string(what) + ": expected magic '" + std::string(magic) + "'");
    }
    const auto v = read_le<std::uint32_t>(is, what);
    if (v != version) {
        throw FormatError(FormatErrorKind::version_mismatch,
                          std::string(what) + ": version " + std::to_string(v) + ", expected " +
                              std::to_string(version));
    }
}

inline std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(FormatErrorKind::io, "cannot open '" + path.string() + "' for reading");
    return is;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError(FormatErrorKind::io, "cannot open '" + path.string() + "' for writing");
    return os;
}

inline void finish(std::ofstream& os, const std::filesystem::path& path) {
    os.flush();
    if (!os) throw FormatError(FormatErrorKind::io, "write failed for '" + path.string() + "'");
}

}  // namespace corrdistill::binio

#endif  // CORRDISTILL_BINARY_IO_HPP
