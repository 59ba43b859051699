#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "m3tts/error.hpp"

// Little-endian byte buffers for the on-disk formats.
namespace m3tts::bin {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { bytes(&v, 2); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f32s(std::span<const float> v) { bytes(v.data(), v.size() * sizeof(float)); }
    // u32 length prefix.
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    const std::string& buffer() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string_view data) : data_(data) {}

    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == data_.size(); }

    void bytes(void* out, std::size_t n, const char* what) {
        if (data_.size() - pos_ < n) {
            throw ParseError(std::string("truncated input reading ") + what, pos_);
        }
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    std::uint8_t u8(const char* what) { return read<std::uint8_t>(what); }
    std::uint16_t u16(const char* what) { return read<std::uint16_t>(what); }
    std::uint32_t u32(const char* what) { return read<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return read<std::uint64_t>(what); }

    std::vector<float> f32s(std::size_t n, const char* what) {
        if ((data_.size() - pos_) / sizeof(float) < n) {
            throw ParseError(std::string("truncated input reading ") + what, pos_);
        }
        std::vector<float> v(n);
        bytes(v.data(), n * sizeof(float), what);
        return v;
    }

    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        if (data_.size() - pos_ < n) {
            throw ParseError(std::string("truncated input reading ") + what, pos_);
        }
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }

private:
    template <typename U>
    U read(const char* what) {
        U v;
        bytes(&v, sizeof(U), what);
        return v;
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open '" + path + "' for reading");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("write failed for '" + path + "'");
    }
}

} // namespace m3tts::bin
