#include "fscd/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "fscd/errors.hpp"

namespace fscd {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'C', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

std::ifstream open_and_check(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) {
    throw SchemaViolationError("checkpoint: " + path +
                               " is not a weight container");
  }
  const std::uint32_t version = read_u32(in);
  if (version != kFormatVersion) {
    throw SchemaViolationError("checkpoint: " + path +
                               " has unsupported format version " +
                               std::to_string(version));
  }
  return in;
}

nlohmann::json read_meta(std::istream& in, const std::string& path) {
  const std::uint64_t len = read_u64(in);
  std::string buf(len, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(len));
  if (!in) throw SchemaViolationError("checkpoint: truncated metadata in " + path);
  try {
    return nlohmann::json::parse(buf);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaViolationError("checkpoint: bad metadata in " + path + ": " +
                               e.what());
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const nn::ParamList& params,
                     const nlohmann::json& meta) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("checkpoint: cannot write " + path);
  out.write(kMagic, 8);
  write_u32(out, kFormatVersion);
  const std::string meta_str = meta.dump();
  write_u64(out, meta_str.size());
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  write_u64(out, params.size());
  for (const auto& [name, var] : params) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const nn::Tensor& t = var.value();
    write_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (long dim : t.shape()) write_u64(out, static_cast<std::uint64_t>(dim));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw Error("checkpoint: write failed for " + path);
}

nlohmann::json peek_checkpoint_meta(const std::string& path) {
  std::ifstream in = open_and_check(path);
  return read_meta(in, path);
}

nlohmann::json load_checkpoint(const std::string& path, nn::ParamList& params) {
  std::ifstream in = open_and_check(path);
  nlohmann::json meta = read_meta(in, path);

  std::map<std::string, nn::Var*> by_name;
  for (auto& p : params) by_name[p.name] = &p.var;

  const std::uint64_t count = read_u64(in);
  if (count != params.size()) {
    throw SchemaViolationError(
        "checkpoint: " + path + " stores " + std::to_string(count) +
        " tensors but the model has " + std::to_string(params.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = read_u32(in);
    std::vector<long> shape(rank);
    for (auto& dim : shape) dim = static_cast<long>(read_u64(in));
    const long numel = nn::numel_of(shape);
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw SchemaViolationError("checkpoint: " + path +
                                 " stores unknown tensor '" + name + "'");
    }
    nn::Tensor& dst = it->second->value_mut();
    if (dst.shape() != shape) {
      throw SchemaViolationError(
          "checkpoint: tensor '" + name + "' has shape " + nn::shape_str(shape) +
          " but the model expects " + nn::shape_str(dst.shape()));
    }
    in.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!in) {
      throw SchemaViolationError("checkpoint: truncated tensor data in " + path);
    }
  }
  return meta;
}

}  // namespace fscd
