#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "autoadr/optim.hpp"
#include "autoadr/tensor.hpp"

namespace autoadr {

// Binary layout (all integers and doubles little-endian):
//   magic "AADRCKPT", u32 version
//   u64 tensor count, then per tensor: u32 name length, name bytes,
//       u32 rank, u64 dims[rank], f64 values[prod(dims)]
//   u8 has_optimizer; if set: f64 beta1, beta2, eps, weight_decay, base_lr,
//       i64 step count, u64 moment count, then per moment: name,
//       i64 steps, tensor first, tensor second (same tensor encoding).
inline constexpr char kCheckpointMagic[8] = {'A', 'A', 'D', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::optional<Adam> optimizer;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace autoadr
