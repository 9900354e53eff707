#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "cpd/tensor.hpp"

namespace cpd {

/// Named parameter tensors, keyed "<node>.<param>".
using ParamStore = std::map<std::string, Tensor>;

ParamStore clone_params(const ParamStore& params);

/// Weight checkpoint layout:
///   bytes 0..7   magic "CPDWTS01"
///   bytes 8..15  header length L (uint64 little-endian)
///   next L bytes JSON header {"params": {name: {"shape": [...], "offset": o, "count": n}}}
///   remainder    float64 little-endian values; `offset` is in bytes from the
///                start of this data section.
void save_checkpoint(const ParamStore& params, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over names, shapes and raw values.
std::uint64_t params_hash(const ParamStore& params);

}  // namespace cpd
