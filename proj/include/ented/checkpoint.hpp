#pragma once

// Flat binary checkpoint:
//   "ENTD" | u32 version | u32 record count | records...
//   record: u32 name length | name | u8 type | u32 rank | u64 dims... | payload
// Every integer and float is little-endian. Types: 'f' f32, 'd' f64, 'u' u64,
// 's' bytes (rank 1). Records keep insertion order, so a load/save round
// trip reproduces the file byte for byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ented/numerics/tensor.hpp"

namespace ented::checkpoint {

inline constexpr char kMagic[4] = {'E', 'N', 'T', 'D'};
inline constexpr std::uint32_t kVersion = 1;

class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct Record {
    std::string name;
    char type = 'd';
    std::vector<std::uint64_t> shape;
    std::vector<std::uint8_t> payload;
};

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

template <class T>
constexpr char type_code() {
    if constexpr (std::is_same_v<T, float>) return 'f';
    else if constexpr (std::is_same_v<T, double>) return 'd';
    else return 'u';
}

inline std::size_t elem_size(char type) {
    switch (type) {
        case 'f': return 4;
        case 'd':
        case 'u': return 8;
        case 's': return 1;
        default: throw FormatError(std::string("unknown record type '") + type + "'");
    }
}

}  // namespace detail

class Checkpoint {
   public:
    const std::vector<Record>& records() const noexcept { return records_; }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    template <std::floating_point T>
    void put(const std::string& name, const Tensor<T>& t) {
        Record r{name, detail::type_code<T>(), {}, {}};
        for (auto d : t.shape()) r.shape.push_back(d);
        r.payload.reserve(t.size() * sizeof(T));
        for (T v : t.data()) {
            if constexpr (sizeof(T) == 4) detail::put_le(r.payload, std::bit_cast<std::uint32_t>(v));
            else detail::put_le(r.payload, std::bit_cast<std::uint64_t>(v));
        }
        add(std::move(r));
    }

    void put_u64(const std::string& name, const std::vector<std::uint64_t>& v) {
        Record r{name, 'u', {v.size()}, {}};
        for (auto x : v) detail::put_le(r.payload, x);
        add(std::move(r));
    }

    void put_u64(const std::string& name, std::uint64_t v) { put_u64(name, std::vector<std::uint64_t>{v}); }

    void put_string(const std::string& name, const std::string& s) {
        add(Record{name, 's', {s.size()}, std::vector<std::uint8_t>(s.begin(), s.end())});
    }

    template <std::floating_point T>
    Tensor<T> tensor(const std::string& name) const {
        const Record& r = find(name, detail::type_code<T>());
        Shape shape(r.shape.begin(), r.shape.end());
        Tensor<T> t(shape);
        const std::uint8_t* p = r.payload.data();
        for (std::size_t i = 0; i < t.size(); ++i, p += sizeof(T)) {
            if constexpr (sizeof(T) == 4) t[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p));
            else t[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p));
        }
        return t;
    }

    std::vector<std::uint64_t> u64s(const std::string& name) const {
        const Record& r = find(name, 'u');
        std::vector<std::uint64_t> v(r.payload.size() / 8);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::get_le<std::uint64_t>(&r.payload[8 * i]);
        return v;
    }

    std::uint64_t u64(const std::string& name) const {
        const auto v = u64s(name);
        if (v.size() != 1) throw FormatError("record '" + name + "' is not a scalar");
        return v[0];
    }

    std::string string(const std::string& name) const {
        const Record& r = find(name, 's');
        return std::string(r.payload.begin(), r.payload.end());
    }

    char type_of(const std::string& name) const { return at(name).type; }

    std::vector<std::uint8_t> bytes() const {
        std::vector<std::uint8_t> out(kMagic, kMagic + 4);
        detail::put_le(out, kVersion);
        detail::put_le(out, static_cast<std::uint32_t>(records_.size()));
        for (const auto& r : records_) {
            detail::put_le(out, static_cast<std::uint32_t>(r.name.size()));
            out.insert(out.end(), r.name.begin(), r.name.end());
            out.push_back(static_cast<std::uint8_t>(r.type));
            detail::put_le(out, static_cast<std::uint32_t>(r.shape.size()));
            for (auto d : r.shape) detail::put_le(out, d);
            out.insert(out.end(), r.payload.begin(), r.payload.end());
        }
        return out;
    }

    static Checkpoint parse(const std::vector<std::uint8_t>& in) {
        std::size_t pos = 0;
        auto need = [&](std::size_t n) {
            if (in.size() - pos < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos));
        };
        need(12);
        if (std::memcmp(in.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
        pos = 4;
        const auto version = detail::get_le<std::uint32_t>(&in[pos]);
        if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
        const auto count = detail::get_le<std::uint32_t>(&in[pos + 4]);
        pos += 8;
        Checkpoint ck;
        for (std::uint32_t i = 0; i < count; ++i) {
            Record r;
            need(4);
            const auto len = detail::get_le<std::uint32_t>(&in[pos]);
            pos += 4;
            need(len + 5);
            r.name.assign(in.begin() + pos, in.begin() + pos + len);
            pos += len;
            r.type = static_cast<char>(in[pos++]);
            const auto rank = detail::get_le<std::uint32_t>(&in[pos]);
            pos += 4;
            need(8 * std::size_t{rank});
            std::uint64_t numel = 1;
            for (std::uint32_t k = 0; k < rank; ++k, pos += 8) {
                r.shape.push_back(detail::get_le<std::uint64_t>(&in[pos]));
                numel *= r.shape.back();
            }
            const std::size_t n = numel * detail::elem_size(r.type);
            need(n);
            r.payload.assign(in.begin() + pos, in.begin() + pos + n);
            pos += n;
            ck.add(std::move(r));
        }
        if (pos != in.size()) throw FormatError("trailing bytes after last record");
        return ck;
    }

    void save(const std::string& path) const {
        const auto b = bytes();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + path);
        out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
        if (!out) throw FormatError("write failed for " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open " + path);
        std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse(b);
    }

   private:
    void add(Record r) {
        if (index_.count(r.name)) throw FormatError("duplicate record '" + r.name + "'");
        index_[r.name] = records_.size();
        records_.push_back(std::move(r));
    }

    const Record& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw FormatError("missing record '" + name + "'");
        return records_[it->second];
    }

    const Record& find(const std::string& name, char type) const {
        const Record& r = at(name);
        if (r.type != type) {
            throw FormatError("record '" + name + "' has type '" + r.type + "', expected '" + type + "'");
        }
        return r;
    }

    std::vector<Record> records_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace ented::checkpoint
