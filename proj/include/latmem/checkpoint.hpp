#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latmem/optim.hpp"
#include "latmem/tensor.hpp"

namespace latmem {

// Versioned binary checkpoint: magic, format version, then a table of
// (name, shape, row-major little-endian float64 values). Round-trips are
// bit-exact.

std::vector<uint8_t> serialize_params(const ParamList& params);
void save_checkpoint(const std::string& path, const ParamList& params);

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};
std::vector<NamedTensor> load_checkpoint(const std::string& path);

// Copies loaded values into matching params; names with `prefix` only when
// prefix is nonempty. Throws on shape mismatch; unknown names are ignored
// so adapter weights and base weights can be loaded independently.
void assign_params(ParamList& params, const std::vector<NamedTensor>& loaded,
                   const std::string& prefix = "");

// FNV-1a 64 over serialized bytes; used for freeze-contract checks.
uint64_t params_hash(const ParamList& params);
uint64_t fnv1a64(const uint8_t* bytes, size_t len);

}  // namespace latmem
