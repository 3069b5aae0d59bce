#include "ettk/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ettk {

void RunConfig::validate() const {
  head_kind_enum();
  variant_enum();
  if (e < 1) throw std::invalid_argument("config: E must be >= 1");
  if (s < 1) throw std::invalid_argument("config: S must be >= 1");
  if (z < 1 || z % 2 == 0) throw std::invalid_argument("config: Z must be odd and >= 1");
  if (d < 1 || d_qk < 1) throw std::invalid_argument("config: D and D_qk must be >= 1");
  if (penalty.k < 0) throw std::invalid_argument("config: penalty.k must be >= 0");
  if (penalty.w < 0 || penalty.w > 1) throw std::invalid_argument("config: penalty.w must be in [0,1]");
  if (penalty.lr <= 0 || penalty.lr > 1) throw std::invalid_argument("config: penalty.lr must be in (0,1]");
}

HeadKind RunConfig::head_kind_enum() const {
  if (head_kind == "conv") return HeadKind::kConv;
  if (head_kind == "conv_residual") return HeadKind::kConvResidual;
  if (head_kind == "exemplar") return HeadKind::kExemplar;
  if (head_kind == "standard_attn") return HeadKind::kStandardAttn;
  throw std::invalid_argument("config: unknown head_kind '" + head_kind +
                              "' (conv, conv_residual, exemplar, standard_attn)");
}

LayerVariant RunConfig::variant_enum() const {
  if (variant == "att_only") return LayerVariant::kAttOnly;
  if (variant == "att_ffn") return LayerVariant::kAttFfn;
  throw std::invalid_argument("config: unknown variant '" + variant + "' (att_only, att_ffn)");
}

HeadConfig RunConfig::to_head_config() const {
  HeadConfig cfg;
  cfg.kind = head_kind_enum();
  cfg.d = d;
  cfg.d_qk = d_qk;
  cfg.e = e;
  cfg.z = z;
  cfg.s = s;
  cfg.variant = variant_enum();
  cfg.tcond = tcond;
  cfg.ffn_residual = ffn_residual;
  cfg.scale_after_softmax = scale_after_softmax;
  return cfg;
}

namespace {

RunConfig from_json(const nlohmann::json& j) {
  RunConfig c;
  c.head_kind = j.value("head_kind", c.head_kind);
  c.e = j.value("E", c.e);
  c.s = j.value("S", c.s);
  c.z = j.value("Z", c.z);
  c.d = j.value("D", c.d);
  c.d_qk = j.value("D_qk", c.d_qk);
  c.variant = j.value("variant", c.variant);
  c.tcond = j.value("tcond", c.tcond);
  c.ffn_residual = j.value("ffn_residual", c.ffn_residual);
  c.scale_after_softmax = j.value("scale_after_softmax", c.scale_after_softmax);
  if (j.contains("penalty")) {
    const auto& p = j.at("penalty");
    c.penalty.k = p.value("k", c.penalty.k);
    c.penalty.w = p.value("w", c.penalty.w);
    c.penalty.lr = p.value("lr", c.penalty.lr);
  }
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

}  // namespace

std::string RunConfig::to_json_string() const {
  nlohmann::json j;
  j["head_kind"] = head_kind;
  j["E"] = e;
  j["S"] = s;
  j["Z"] = z;
  j["D"] = d;
  j["D_qk"] = d_qk;
  j["variant"] = variant;
  j["tcond"] = tcond;
  j["ffn_residual"] = ffn_residual;
  j["scale_after_softmax"] = scale_after_softmax;
  j["penalty"] = {{"k", penalty.k}, {"w", penalty.w}, {"lr", penalty.lr}};
  j["seed"] = seed;
  return j.dump(2);
}

RunConfig config_from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  return from_json(j);
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_json_string(buf.str());
}

}  // namespace ettk
