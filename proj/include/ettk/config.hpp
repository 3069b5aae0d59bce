#pragma once

#include <cstdint>
#include <string>

#include "ettk/head.hpp"

namespace ettk {

// The run-level knob set shared by every CLI command; mirrors the JSON config
// file and the command-line flags.
struct RunConfig {
  std::string head_kind = "exemplar";  // conv | conv_residual | exemplar | standard_attn
  std::int64_t e = 4;
  std::int64_t s = 1;
  std::int64_t z = 3;
  std::int64_t d = 128;
  std::int64_t d_qk = 64;
  std::string variant = "att_ffn";  // att_only | att_ffn
  bool tcond = false;
  bool ffn_residual = false;
  bool scale_after_softmax = false;
  PenaltyConfig penalty;
  std::uint32_t seed = 1;

  void validate() const;
  HeadKind head_kind_enum() const;
  LayerVariant variant_enum() const;
  HeadConfig to_head_config() const;
  std::string to_json_string() const;
};

RunConfig config_from_json_string(const std::string& text);
RunConfig load_config(const std::string& path);

}  // namespace ettk
