#include "latmem/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace latmem {

namespace {

constexpr char kMagic[8] = {'L', 'M', 'C', 'K', 'P', 'T', '0', '\n'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::vector<uint8_t>& in, size_t& off) {
  if (off + sizeof(T) > in.size())
    throw std::runtime_error("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

std::vector<uint8_t> serialize_params(const ParamList& params) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + sizeof(kMagic));
  put<uint32_t>(out, kVersion);
  put<uint64_t>(out, params.size());
  for (const auto& p : params) {
    put<uint16_t>(out, static_cast<uint16_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put<uint32_t>(out, static_cast<uint32_t>(p.tensor.shape().size()));
    for (int d : p.tensor.shape()) put<uint64_t>(out, static_cast<uint64_t>(d));
    const auto& data = p.tensor.data();
    const auto* bytes = reinterpret_cast<const uint8_t*>(data.data());
    out.insert(out.end(), bytes, bytes + data.size() * sizeof(double));
  }
  return out;
}

void save_checkpoint(const std::string& path, const ParamList& params) {
  const auto bytes = serialize_params(params);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<uint8_t> in((std::istreambuf_iterator<char>(f)),
                          std::istreambuf_iterator<char>());
  size_t off = 0;
  if (in.size() < sizeof(kMagic) ||
      std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  off = sizeof(kMagic);
  const auto version = get<uint32_t>(in, off);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  const auto count = get<uint64_t>(in, off);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (uint64_t k = 0; k < count; ++k) {
    NamedTensor nt;
    const auto namelen = get<uint16_t>(in, off);
    if (off + namelen > in.size())
      throw std::runtime_error("checkpoint: truncated name");
    nt.name.assign(reinterpret_cast<const char*>(in.data() + off), namelen);
    off += namelen;
    const auto ndim = get<uint32_t>(in, off);
    size_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      const auto dim = get<uint64_t>(in, off);
      nt.shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    if (off + numel * sizeof(double) > in.size())
      throw std::runtime_error("checkpoint: truncated data for " + nt.name);
    nt.data.resize(numel);
    std::memcpy(nt.data.data(), in.data() + off, numel * sizeof(double));
    off += numel * sizeof(double);
    out.push_back(std::move(nt));
  }
  return out;
}

void assign_params(ParamList& params, const std::vector<NamedTensor>& loaded,
                   const std::string& prefix) {
  for (const auto& nt : loaded) {
    if (!prefix.empty() && nt.name.rfind(prefix, 0) != 0) continue;
    for (auto& p : params) {
      if (p.name != nt.name) continue;
      if (p.tensor.shape() != nt.shape)
        throw std::runtime_error("checkpoint: shape mismatch for " + nt.name);
      p.tensor.data() = nt.data;
      break;
    }
  }
}

uint64_t fnv1a64(const uint8_t* bytes, size_t len) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t params_hash(const ParamList& params) {
  const auto bytes = serialize_params(params);
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace latmem
