#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "ettk/tensor.hpp"

namespace ettk {

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct WeightEntry {
  std::string name;
  AnyTensor tensor;
};

// Binary tensor container. Layout, all little-endian:
//   magic "ETWB" | version u16 | tensor count u32
//   per tensor: name length u16, name bytes, dtype u8 (0=f32, 1=f64),
//               ndim u8, dims u32 each, raw data
// Round trips are bit-identical; a wrong magic fails before any allocation.
void save_weights(const std::string& path, const std::vector<WeightEntry>& entries);
std::vector<WeightEntry> load_weights(const std::string& path);

template <typename P>
std::vector<WeightEntry> pack_params(P& params, const std::string& prefix) {
  std::vector<WeightEntry> out;
  visit_params(params, prefix,
               [&](const std::string& n, Tensor<float>& t, bool) { out.push_back(WeightEntry{n, t}); });
  return out;
}

// Fills the visited tensors from the named entries; every visited tensor must
// be present with a matching shape.
template <typename P>
void unpack_params(P& params, const std::string& prefix, const std::vector<WeightEntry>& entries) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& e : entries) {
    if (const auto* t = std::get_if<Tensor<float>>(&e.tensor)) by_name[e.name] = t;
  }
  visit_params(params, prefix, [&](const std::string& n, Tensor<float>& t, bool) {
    const auto it = by_name.find(n);
    if (it == by_name.end()) throw std::invalid_argument("weights: missing tensor '" + n + "'");
    if (it->second->shape() != t.shape()) {
      throw std::invalid_argument("weights: tensor '" + n + "' has shape " + shape_str(it->second->shape()) +
                                  ", expected " + shape_str(t.shape()));
    }
    t = *it->second;
  });
}

}  // namespace ettk
