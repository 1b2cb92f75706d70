#include "ditsim/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ditsim {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written by copying little-endian memory");

constexpr char kMagic[4] = {'D', 'T', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("tensor file truncated");
  return value;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path,
                       const std::vector<Tensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, tensors.size());
  for (const Tensor& t : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.bytes()));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<Tensor> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path.string() + " is not a tensor file");
  if (get<std::uint32_t>(in) != kVersion)
    throw std::runtime_error(path.string() + ": unsupported tensor file version");
  const auto count = get<std::uint64_t>(in);
  std::vector<Tensor> tensors;
  tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto rank = get<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in);
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.bytes()));
    if (!in) throw std::runtime_error("tensor file truncated");
    tensors.push_back(std::move(t));
  }
  return tensors;
}

void write_weights(const std::filesystem::path& path, const Weights& weights) {
  std::vector<Tensor> tensors;
  for (const auto& [name, t] : weights.named_tensors()) tensors.push_back(*t);
  write_tensor_file(path, tensors);
}

Weights read_weights(const std::filesystem::path& path, const DiTSpec& spec) {
  Weights w = zero_weights(spec);
  auto slots = w.named_tensors();
  auto tensors = read_tensor_file(path);
  if (tensors.size() != slots.size())
    throw std::runtime_error("weight file has " + std::to_string(tensors.size()) +
                             " tensors, model expects " + std::to_string(slots.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (tensors[i].shape() != slots[i].second->shape())
      throw std::runtime_error("weight " + slots[i].first + " has shape " +
                               shape_string(tensors[i].shape()));
    *slots[i].second = std::move(tensors[i]);
  }
  return w;
}

void write_trace(const std::filesystem::path& path, const std::vector<LatentState>& trace) {
  std::vector<Tensor> tensors;
  tensors.reserve(trace.size());
  for (const auto& s : trace) tensors.push_back(s.x);
  write_tensor_file(path, tensors);
}

std::vector<Tensor> read_trace(const std::filesystem::path& path) {
  return read_tensor_file(path);
}

}  // namespace ditsim
