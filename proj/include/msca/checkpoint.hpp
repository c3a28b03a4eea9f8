#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "msca/params.hpp"

namespace msca {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Checkpoint layout, all integers little-endian:
//   magic      5 bytes   "MSCA1" (float32 payload) or "MSCAD" (float64 payload)
//   records until end of file, each:
//     u32 name length, name bytes (UTF-8)
//     u32 rank, rank x u64 extents
//     product(extents) raw IEEE values of the payload width
inline constexpr char kMagicF32[] = "MSCA1";
inline constexpr char kMagicF64[] = "MSCAD";

template <typename T>
void write_checkpoint(std::ostream& os, const ParamSet<T>& params);

// Reads either payload width and converts to T.
template <typename T>
ParamSet<T> read_checkpoint(std::istream& is);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params);

template <typename T>
ParamSet<T> load_checkpoint(const std::filesystem::path& path);

// Single-tensor file in the checkpoint format, used for per-scale external features.
template <typename T>
Tensor<T> load_tensor_file(const std::filesystem::path& path);

}  // namespace msca
