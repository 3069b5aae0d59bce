#include "ettk/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little, "weights file i/o assumes a little-endian host");

namespace ettk {

namespace {

constexpr char kMagic[4] = {'E', 'T', 'W', 'B'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::ostream& out, std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); }
void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint16_t get_u16(std::istream& in) {
  std::uint16_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 2);
  return v;
}
std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

template <typename T>
void put_tensor(std::ostream& out, const std::string& name, const Tensor<T>& t, std::uint8_t dtype) {
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  out.put(static_cast<char>(dtype));
  out.put(static_cast<char>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <typename T>
Tensor<T> get_tensor(std::istream& in, const std::vector<std::int64_t>& shape) {
  Tensor<T> t(shape);
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  return t;
}

}  // namespace

void save_weights(const std::string& path, const std::vector<WeightEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("weights: cannot write " + path);
  out.write(kMagic, 4);
  put_u16(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw std::invalid_argument("weights: tensor name too long");
    if (const auto* f = std::get_if<Tensor<float>>(&e.tensor)) {
      put_tensor(out, e.name, *f, 0);
    } else {
      put_tensor(out, e.name, std::get<Tensor<double>>(e.tensor), 1);
    }
  }
  if (!out) throw std::runtime_error("weights: write failure on " + path);
}

std::vector<WeightEntry> load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("weights: cannot open " + path);
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::invalid_argument("weights: " + path + " does not carry the ETWB magic");
  }
  const std::uint16_t version = get_u16(in);
  if (version != kVersion) {
    throw std::invalid_argument("weights: unsupported version " + std::to_string(version) + " in " + path);
  }
  const std::uint32_t count = get_u32(in);
  std::vector<WeightEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = get_u16(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const int dtype = in.get();
    const int ndim = in.get();
    if (!in || ndim < 1 || (dtype != 0 && dtype != 1)) {
      throw std::runtime_error("weights: corrupt tensor header in " + path);
    }
    std::vector<std::int64_t> shape(static_cast<std::size_t>(ndim));
    for (auto& d : shape) d = static_cast<std::int64_t>(get_u32(in));
    WeightEntry e;
    e.name = std::move(name);
    if (dtype == 0) {
      e.tensor = get_tensor<float>(in, shape);
    } else {
      e.tensor = get_tensor<double>(in, shape);
    }
    if (!in) throw std::runtime_error("weights: truncated tensor data in " + path);
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace ettk
