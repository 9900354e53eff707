#include "cpd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace cpd {

namespace {

constexpr char kMagic[8] = {'C', 'P', 'D', 'W', 'T', 'S', '0', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void hash_bytes(std::uint64_t& h, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ULL;
  }
}

}  // namespace

ParamStore clone_params(const ParamStore& params) {
  ParamStore out;
  for (const auto& [name, t] : params) out.emplace(name, t.clone());
  return out;
}

void save_checkpoint(const ParamStore& params, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["params"] = nlohmann::ordered_json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    header["params"][name] = {{"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}};
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(double);
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params) {
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  }
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw Error("bad checkpoint magic in " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("truncated checkpoint header in " + path.string());
  const auto header = nlohmann::json::parse(text);
  const auto data_start = in.tellg();
  ParamStore params;
  for (const auto& [name, entry] : header.at("params").items()) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto count = entry.at("count").get<std::int64_t>();
    if (count != numel_of(shape)) throw Error("checkpoint entry " + name + " has inconsistent count");
    std::vector<double> values(static_cast<std::size_t>(count));
    in.seekg(data_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw Error("truncated checkpoint data for " + name);
    params.emplace(name, Tensor(std::move(shape), std::move(values)));
  }
  return params;
}

std::uint64_t params_hash(const ParamStore& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : params) {
    hash_bytes(h, name.data(), name.size());
    for (auto d : t.shape()) hash_bytes(h, &d, sizeof d);
    hash_bytes(h, t.data().data(), t.data().size() * sizeof(double));
  }
  return h;
}

}  // namespace cpd
