#include "msca/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace msca {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::ostream& os, U v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
bool get(std::istream& is, U& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(U));
    return static_cast<std::size_t>(is.gcount()) == sizeof(U);
}

template <typename P, typename T>
void read_payload(std::istream& is, Tensor<T>& t, const std::string& name) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        P v;
        if (!get(is, v)) throw CheckpointError("truncated payload in record '" + name + "'");
        t[i] = static_cast<T>(v);
    }
}

}  // namespace

template <typename T>
void write_checkpoint(std::ostream& os, const ParamSet<T>& params) {
    os.write(sizeof(T) == 4 ? kMagicF32 : kMagicF64, 5);
    for (const auto& [name, t] : params) {
        put<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint32_t>(os, static_cast<uint32_t>(t.rank()));
        for (auto e : t.shape()) put<uint64_t>(os, static_cast<uint64_t>(e));
        os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
    }
    if (!os) throw CheckpointError("checkpoint write failed");
}

template <typename T>
ParamSet<T> read_checkpoint(std::istream& is) {
    char magic[5];
    is.read(magic, 5);
    if (is.gcount() != 5) throw CheckpointError("file too short for checkpoint magic");
    bool wide;
    if (std::memcmp(magic, kMagicF32, 5) == 0) {
        wide = false;
    } else if (std::memcmp(magic, kMagicF64, 5) == 0) {
        wide = true;
    } else {
        throw CheckpointError("bad checkpoint magic");
    }
    ParamSet<T> params;
    while (true) {
        uint32_t name_len;
        if (!get(is, name_len)) break;
        if (name_len > (1u << 16)) throw CheckpointError("implausible record name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (static_cast<uint32_t>(is.gcount()) != name_len) throw CheckpointError("truncated record name");
        uint32_t rank;
        if (!get(is, rank) || rank > 8) throw CheckpointError("bad rank in record '" + name + "'");
        Shape shape(rank);
        for (auto& e : shape) {
            uint64_t v;
            if (!get(is, v)) throw CheckpointError("truncated extents in record '" + name + "'");
            e = static_cast<int64_t>(v);
        }
        Tensor<T> t(shape);
        if (wide) {
            read_payload<double>(is, t, name);
        } else {
            read_payload<float>(is, t, name);
        }
        if (!params.emplace(name, std::move(t)).second) {
            throw CheckpointError("duplicate record '" + name + "'");
        }
    }
    return params;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
    write_checkpoint(os, params);
}

template <typename T>
ParamSet<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    return read_checkpoint<T>(is);
}

template <typename T>
Tensor<T> load_tensor_file(const std::filesystem::path& path) {
    auto params = load_checkpoint<T>(path);
    if (params.size() != 1) {
        throw CheckpointError(path.string() + ": expected exactly one tensor record, found " +
                              std::to_string(params.size()));
    }
    return std::move(params.begin()->second);
}

template void write_checkpoint(std::ostream&, const ParamSet<float>&);
template void write_checkpoint(std::ostream&, const ParamSet<double>&);
template ParamSet<float> read_checkpoint(std::istream&);
template ParamSet<double> read_checkpoint(std::istream&);
template void save_checkpoint(const std::filesystem::path&, const ParamSet<float>&);
template void save_checkpoint(const std::filesystem::path&, const ParamSet<double>&);
template ParamSet<float> load_checkpoint(const std::filesystem::path&);
template ParamSet<double> load_checkpoint(const std::filesystem::path&);
template Tensor<float> load_tensor_file(const std::filesystem::path&);
template Tensor<double> load_tensor_file(const std::filesystem::path&);

}  // namespace msca
