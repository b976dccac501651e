#include "autoadr/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "autoadr/errors.hpp"

namespace autoadr {
namespace {

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint: implausible name length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

void put_tensor(std::ostream& out, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  for (double v : t.data()) put<double>(out, v);
}

Tensor get_tensor(std::istream& in) {
  const auto rank = get<std::uint32_t>(in);
  if (rank == 0 || rank > 8) throw std::runtime_error("checkpoint: bad tensor rank");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get<std::uint64_t>(in));
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = get<double>(in);
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, checkpoint.tensors.size());
  for (const auto& [name, tensor] : checkpoint.tensors) {
    put_string(out, name);
    put_tensor(out, tensor);
  }
  put<std::uint8_t>(out, checkpoint.optimizer ? 1 : 0);
  if (checkpoint.optimizer) {
    const Adam& adam = *checkpoint.optimizer;
    const auto& o = adam.options();
    for (double v : {o.beta1, o.beta2, o.eps, o.weight_decay, o.base_lr}) put<double>(out, v);
    put<std::int64_t>(out, adam.step_count());
    put<std::uint64_t>(out, adam.moments().size());
    for (const auto& [name, m] : adam.moments()) {
      put_string(out, name);
      put<std::int64_t>(out, m.steps);
      put_tensor(out, m.first);
      put_tensor(out, m.second);
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint checkpoint;
  const auto count = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = get_string(in);
    checkpoint.tensors.emplace(std::move(name), get_tensor(in));
  }
  if (get<std::uint8_t>(in) != 0) {
    Adam::Options o;
    o.beta1 = get<double>(in);
    o.beta2 = get<double>(in);
    o.eps = get<double>(in);
    o.weight_decay = get<double>(in);
    o.base_lr = get<double>(in);
    Adam adam(o);
    adam.set_step_count(get<std::int64_t>(in));
    const auto moments = get<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < moments; ++i) {
      std::string name = get_string(in);
      AdamMoments m;
      m.steps = get<std::int64_t>(in);
      m.first = get_tensor(in);
      m.second = get_tensor(in);
      adam.mutable_moments().emplace(std::move(name), std::move(m));
    }
    checkpoint.optimizer = std::move(adam);
  }
  return checkpoint;
}

}  // namespace autoadr
