// SPDX-License-Identifier: Apache-2.0

#include "dalg/param.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

namespace dalg {

namespace {

constexpr char kMagic[4] = {'D', 'A', 'L', 'G'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint truncated while reading " + what);
    return v;
}

}  // namespace

void check_unique_names(const std::vector<Parameter*>& params) {
    std::set<std::string> seen;
    for (const Parameter* p : params) {
        if (!seen.insert(p->name).second) {
            throw Error("duplicate parameter name: " + p->name);
        }
    }
}

void save_checkpoint(const std::vector<Parameter*>& params, const std::string& path) {
    check_unique_names(params);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kCheckpointVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const Parameter* p : params) {
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(p->value.rank()));
        for (auto e : p->value.shape()) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(e));
        os.write(reinterpret_cast<const char*>(p->value.data()),
                 static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!os) throw IoError("write failure on checkpoint: " + path);
}

void load_checkpoint(const std::vector<Parameter*>& params, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("bad checkpoint magic in " + path + " (expected \"DALG\")");
    }
    const auto version = read_pod<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    }
    const auto count = read_pod<std::uint32_t>(is, "parameter count");

    std::map<std::string, Parameter*> by_name;
    for (Parameter* p : params) by_name[p->name] = p;
    if (by_name.size() != params.size()) throw Error("duplicate parameter names in model");
    if (count != params.size()) {
        throw IoError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params.size()));
    }

    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint16_t>(is, "name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("checkpoint truncated while reading name");
        const auto rank = read_pod<std::uint8_t>(is, "rank");
        Shape shape(rank);
        for (auto& e : shape) e = static_cast<std::int64_t>(read_pod<std::uint64_t>(is, "extent"));

        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint parameter not in model: " + name);
        Parameter* p = it->second;
        if (p->value.shape() != shape) {
            throw IoError("shape mismatch for " + name + ": checkpoint " + shape_str(shape) + ", model " +
                          shape_str(p->value.shape()));
        }
        is.read(reinterpret_cast<char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (!is) throw IoError("checkpoint truncated while reading values of " + name);
    }
}

}  // namespace dalg
