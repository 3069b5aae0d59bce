#pragma once

#include <variant>
#include <vector>

#include "ettk/attention.hpp"
#include "ettk/box.hpp"
#include "ettk/ops.hpp"

namespace ettk {

enum class HeadKind { kConv, kConvResidual, kExemplar, kStandardAttn };

inline const char* head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::kConv: return "conv";
    case HeadKind::kConvResidual: return "conv_residual";
    case HeadKind::kExemplar: return "exemplar";
    case HeadKind::kStandardAttn: return "standard_attn";
  }
  return "?";
}

// Depthwise separable conv module: ReLU(BN(pointwise(depthwise(x)))).
// BN carries fixed statistics and stays frozen at identity in this artifact.
template <typename T>
struct DsConvBlock {
  Tensor<T> dw;    // D x 1 x Z x Z, groups = D
  Tensor<T> pw;    // D_out x D x 1 x 1
  Tensor<T> bias;  // D_out
  BatchNormParams<T> bn;

  std::int64_t in_channels() const { return dw.dim(0); }
  std::int64_t out_channels() const { return pw.dim(0); }
  std::int64_t z() const { return dw.dim(2); }
};

// Dense conv + residual + layernorm. The module a single-exemplar attention
// layer is equivalent to, and the like-for-like latency comparator for it.
template <typename T>
struct ResidualConvBlock {
  Tensor<T> kernel;  // D x D x Z x Z
  Tensor<T> bias;    // D
  LayerNormParams<T> ln;

  std::int64_t channels() const { return kernel.dim(0); }
  std::int64_t z() const { return kernel.dim(2); }
};

template <typename T>
using HeadModule = std::variant<DsConvBlock<T>, ResidualConvBlock<T>, TransformerLayerParams<T>>;

// Tracker head: a classification branch of 6 modules and a regression branch
// of 8, where the last module of each branch is a plain 3x3 conv projection
// (1 channel for classification, 4 for the ltrb regression).
template <typename T>
struct HeadParams {
  HeadKind kind = HeadKind::kExemplar;
  std::vector<HeadModule<T>> cls_modules;  // 5 feature modules
  std::vector<HeadModule<T>> reg_modules;  // 7 feature modules
  Tensor<T> cls_proj_kernel;  // 1 x D x 3 x 3
  Tensor<T> cls_proj_bias;    // 1
  Tensor<T> reg_proj_kernel;  // 4 x D x 3 x 3
  Tensor<T> reg_proj_bias;    // 4
  bool tcond_enabled = false;

  std::int64_t channels() const { return cls_proj_kernel.dim(1); }

  void validate() const {
    if (cls_modules.size() != 5 || reg_modules.size() != 7) {
      throw std::invalid_argument("head: classification branch must have 6 modules and regression 8 "
                                  "(5 + 7 feature modules plus one projection each), got " +
                                  std::to_string(cls_modules.size() + 1) + " and " +
                                  std::to_string(reg_modules.size() + 1));
    }
    if (cls_proj_kernel.dim(0) != 1 || reg_proj_kernel.dim(0) != 4) {
      throw std::invalid_argument("head: projections must emit 1 (cls) and 4 (reg) channels");
    }
  }
};

// --- per-module forward/backward -------------------------------------------

template <typename T>
struct ModuleCache {
  Tensor<T> x;       // module input
  Tensor<T> t1, t2, t3;  // DsConv intermediates
  Tensor<T> r_rows;  // ResidualConv pre-norm rows
  TransformerLayerCache<T> tf;
};

template <typename T>
struct DsConvGrads {
  Tensor<T> dw, pw, bias;
};

template <typename T>
struct ResidualConvGrads {
  Tensor<T> kernel, bias, ln_gamma, ln_beta;
};

template <typename T>
using ModuleGrads = std::variant<DsConvGrads<T>, ResidualConvGrads<T>, TransformerLayerGrads<T>>;

template <typename T>
Tensor<T> module_forward(const Tensor<T>& x, const HeadModule<T>& m, std::type_identity_t<const Tensor<T>*> tcond,
                         ModuleCache<T>* cache) {
  if (cache) cache->x = x;
  if (const auto* ds = std::get_if<DsConvBlock<T>>(&m)) {
    const std::int64_t d = ds->in_channels();
    Tensor<T> t1 = conv2d(x, ds->dw, same_conv_spec(d, d, ds->z(), d));
    Tensor<T> t2 = conv2d(t1, ds->pw, &ds->bias, ConvSpec{ds->out_channels(), d, 1, 1, 0, 1});
    Tensor<T> t3 = batchnorm_inference(t2, ds->bn);
    Tensor<T> out = relu(t3);
    if (cache) {
      cache->t1 = std::move(t1);
      cache->t2 = std::move(t2);
      cache->t3 = std::move(t3);
    }
    return out;
  }
  if (const auto* rc = std::get_if<ResidualConvBlock<T>>(&m)) {
    Tensor<T> c = conv2d(x, rc->kernel, &rc->bias, same_conv_spec(rc->channels(), rc->channels(), rc->z()));
    Tensor<T> r_rows = chw_to_rows(add(c, x));
    Tensor<T> out = rows_to_chw(layernorm(r_rows, rc->ln.gamma, rc->ln.beta, rc->ln.eps), x.dim(1), x.dim(2));
    if (cache) cache->r_rows = std::move(r_rows);
    return out;
  }
  const auto& tf = std::get<TransformerLayerParams<T>>(m);
  return transformer_layer_forward(x, tf, tcond, cache ? &cache->tf : nullptr);
}

template <typename T>
ModuleGrads<T> module_backward(const Tensor<T>& grad_out, const HeadModule<T>& m, const ModuleCache<T>& cache,
                               Tensor<T>& grad_x) {
  if (const auto* ds = std::get_if<DsConvBlock<T>>(&m)) {
    const std::int64_t d = ds->in_channels();
    Tensor<T> dt3 = relu_backward(grad_out, cache.t3);
    // BN is frozen: only the input gradient flows, the fixed stats and affine
    // parameters take no updates.
    auto bng = batchnorm_inference_backward(dt3, cache.t2, ds->bn);
    auto pwg = conv2d_backward(bng.x, cache.t1, ds->pw, ConvSpec{ds->out_channels(), d, 1, 1, 0, 1}, true);
    auto dwg = conv2d_backward(pwg.input, cache.x, ds->dw, same_conv_spec(d, d, ds->z(), d), false);
    grad_x = std::move(dwg.input);
    return DsConvGrads<T>{std::move(dwg.kernel), std::move(pwg.kernel), std::move(pwg.bias)};
  }
  if (const auto* rc = std::get_if<ResidualConvBlock<T>>(&m)) {
    auto lng = layernorm_backward(chw_to_rows(grad_out), cache.r_rows, rc->ln.gamma, rc->ln.eps);
    Tensor<T> dresid = rows_to_chw(lng.x, cache.x.dim(1), cache.x.dim(2));
    auto cg = conv2d_backward(dresid, cache.x, rc->kernel,
                              same_conv_spec(rc->channels(), rc->channels(), rc->z()), true);
    grad_x = add(cg.input, dresid);
    return ResidualConvGrads<T>{std::move(cg.kernel), std::move(cg.bias), std::move(lng.gamma), std::move(lng.beta)};
  }
  const auto& tf = std::get<TransformerLayerParams<T>>(m);
  auto g = transformer_layer_backward(grad_out, tf, cache.tf);
  grad_x = std::move(g.x);
  return g;
}

// --- head forward/backward --------------------------------------------------

template <typename T>
struct HeadOutput {
  Tensor<T> cls_logits;  // 1 x H x W, raw
  Tensor<T> ltrb;        // 4 x H x W, positive via exp
};

template <typename T>
struct HeadCache {
  std::vector<ModuleCache<T>> cls, reg;
  Tensor<T> cls_feat, reg_feat;  // projection inputs
  Tensor<T> ltrb;                // exp output, for the link backward
};

template <typename T>
HeadOutput<T> head_forward(const Tensor<T>& corr, const HeadParams<T>& p,
                           std::type_identity_t<const Tensor<T>*> tcond = nullptr,
                           HeadCache<T>* cache = nullptr) {
  p.validate();
  if (corr.rank() != 3 || corr.dim(0) != p.channels()) {
    throw std::invalid_argument("head: correlation map must be DxHxW with D = " + std::to_string(p.channels()) +
                                ", got " + shape_str(corr.shape()));
  }
  const Tensor<T>* tc = p.tcond_enabled ? tcond : nullptr;
  if (cache) {
    cache->cls.resize(p.cls_modules.size());
    cache->reg.resize(p.reg_modules.size());
  }
  Tensor<T> xc = corr;
  for (std::size_t i = 0; i < p.cls_modules.size(); ++i) {
    xc = module_forward(xc, p.cls_modules[i], tc, cache ? &cache->cls[i] : nullptr);
  }
  Tensor<T> cls = conv2d(xc, p.cls_proj_kernel, &p.cls_proj_bias, same_conv_spec(1, p.channels(), 3));

  Tensor<T> xr = corr;
  for (std::size_t i = 0; i < p.reg_modules.size(); ++i) {
    xr = module_forward(xr, p.reg_modules[i], tc, cache ? &cache->reg[i] : nullptr);
  }
  Tensor<T> raw = conv2d(xr, p.reg_proj_kernel, &p.reg_proj_bias, same_conv_spec(4, p.channels(), 3));
  // exp link with a clamped exponent so f32 never under/overflows to 0 or inf
  Tensor<T> ltrb(raw.shape());
  for (std::int64_t i = 0; i < raw.numel(); ++i) ltrb[i] = std::exp(std::clamp(raw[i], T(-40), T(40)));
  if (cache) {
    cache->cls_feat = std::move(xc);
    cache->reg_feat = std::move(xr);
    cache->ltrb = ltrb;
  }
  check_finite(ltrb, "head_forward");
  return HeadOutput<T>{std::move(cls), std::move(ltrb)};
}

template <typename T>
struct HeadGrads {
  std::vector<ModuleGrads<T>> cls, reg;
  Tensor<T> cls_proj_kernel, cls_proj_bias;
  Tensor<T> reg_proj_kernel, reg_proj_bias;
  Tensor<T> corr;  // gradient w.r.t. the correlation map
};

template <typename T>
HeadGrads<T> head_backward(const Tensor<T>& grad_cls, const Tensor<T>& grad_ltrb, const HeadParams<T>& p,
                           const HeadCache<T>& cache) {
  if (cache.cls.size() != p.cls_modules.size() || cache.reg.size() != p.reg_modules.size()) {
    throw std::invalid_argument("head_backward: missing forward cache");
  }
  HeadGrads<T> g;
  g.cls.resize(p.cls_modules.size());
  g.reg.resize(p.reg_modules.size());

  auto cpg = conv2d_backward(grad_cls, cache.cls_feat, p.cls_proj_kernel, same_conv_spec(1, p.channels(), 3), true);
  g.cls_proj_kernel = std::move(cpg.kernel);
  g.cls_proj_bias = std::move(cpg.bias);
  Tensor<T> dx = std::move(cpg.input);
  for (std::size_t i = p.cls_modules.size(); i-- > 0;) {
    Tensor<T> dprev;
    g.cls[i] = module_backward(dx, p.cls_modules[i], cache.cls[i], dprev);
    dx = std::move(dprev);
  }
  g.corr = dx;

  // exp link: d(raw) = d(ltrb) * ltrb, zero where the exponent clamp is active
  Tensor<T> draw(grad_ltrb.shape());
  const T lo = std::exp(T(-40)), hi = std::exp(T(40));
  for (std::int64_t i = 0; i < draw.numel(); ++i) {
    const T v = cache.ltrb[i];
    draw[i] = (v > lo && v < hi) ? grad_ltrb[i] * v : T(0);
  }
  auto rpg = conv2d_backward(draw, cache.reg_feat, p.reg_proj_kernel, same_conv_spec(4, p.channels(), 3), true);
  g.reg_proj_kernel = std::move(rpg.kernel);
  g.reg_proj_bias = std::move(rpg.bias);
  dx = std::move(rpg.input);
  for (std::size_t i = p.reg_modules.size(); i-- > 0;) {
    Tensor<T> dprev;
    g.reg[i] = module_backward(dx, p.reg_modules[i], cache.reg[i], dprev);
    dx = std::move(dprev);
  }
  for (std::int64_t i = 0; i < dx.numel(); ++i) g.corr[i] += dx[i];
  return g;
}

// --- initialization ----------------------------------------------------------

template <typename T>
DsConvBlock<T> init_dsconv_block(std::int64_t d, std::int64_t z, std::mt19937& rng) {
  DsConvBlock<T> b;
  // No nonlinearity sits between the two convolutions, so the depthwise part
  // gets a variance-preserving (linear-gain) init and only the pointwise part
  // compensates for the ReLU; otherwise the module gain compounds with depth.
  b.dw = Tensor<T>({d, 1, z, z});
  const T dw_bound = std::sqrt(T(3) / static_cast<T>(z * z));
  fill_uniform(b.dw, rng, -dw_bound, dw_bound);
  b.pw = Tensor<T>({d, d, 1, 1});
  kaiming_uniform(b.pw, d, rng);
  b.bias = Tensor<T>({d});
  b.bn = BatchNormParams<T>::identity(d);
  return b;
}

template <typename T>
ResidualConvBlock<T> init_residual_conv_block(std::int64_t d, std::int64_t z, std::mt19937& rng) {
  ResidualConvBlock<T> b;
  b.kernel = Tensor<T>({d, d, z, z});
  kaiming_uniform(b.kernel, d * z * z, rng);
  b.bias = Tensor<T>({d});
  b.ln = LayerNormParams<T>::identity(d);
  return b;
}

struct HeadConfig {
  HeadKind kind = HeadKind::kExemplar;
  std::int64_t d = 128;
  std::int64_t d_qk = 64;
  std::int64_t e = 4;
  std::int64_t z = 3;
  std::int64_t s = 1;
  LayerVariant variant = LayerVariant::kAttFfn;
  bool tcond = false;
  bool ffn_residual = false;
  bool scale_after_softmax = false;
};

template <typename T>
HeadModule<T> init_head_module(const HeadConfig& cfg, std::mt19937& rng) {
  switch (cfg.kind) {
    case HeadKind::kConv:
      return init_dsconv_block<T>(cfg.d, cfg.z, rng);
    case HeadKind::kConvResidual:
      return init_residual_conv_block<T>(cfg.d, cfg.z, rng);
    case HeadKind::kExemplar: {
      auto layer = init_exemplar_layer<T>(cfg.d, cfg.d_qk, cfg.e, cfg.z, cfg.s, cfg.variant, rng);
      layer.ffn_residual = cfg.ffn_residual;
      layer.exemplar().scale_after_softmax = cfg.scale_after_softmax;
      return layer;
    }
    case HeadKind::kStandardAttn: {
      auto layer = init_standard_layer<T>(cfg.d, cfg.d_qk, cfg.variant, rng);
      layer.ffn_residual = cfg.ffn_residual;
      return layer;
    }
  }
  throw std::invalid_argument("head: unknown module kind");
}

template <typename T>
HeadParams<T> init_head(const HeadConfig& cfg, std::mt19937& rng) {
  HeadParams<T> p;
  p.kind = cfg.kind;
  p.tcond_enabled = cfg.tcond;
  for (int i = 0; i < 5; ++i) p.cls_modules.push_back(init_head_module<T>(cfg, rng));
  for (int i = 0; i < 7; ++i) p.reg_modules.push_back(init_head_module<T>(cfg, rng));
  // Projections start small so the initial logits and log-distances sit near
  // zero regardless of the feature scale the branch produces.
  p.cls_proj_kernel = Tensor<T>({1, cfg.d, 3, 3});
  kaiming_uniform(p.cls_proj_kernel, cfg.d * 9, rng);
  for (auto& v : p.cls_proj_kernel.vec()) v *= T(0.1);
  p.cls_proj_bias = Tensor<T>({1});
  p.reg_proj_kernel = Tensor<T>({4, cfg.d, 3, 3});
  kaiming_uniform(p.reg_proj_kernel, cfg.d * 9, rng);
  for (auto& v : p.reg_proj_kernel.vec()) v *= T(0.1);
  // Through the exp link a bias of ln(16) starts the predicted distances at
  // one cell stride instead of one pixel.
  p.reg_proj_bias = Tensor<T>::full({4}, static_cast<T>(std::log(16.0)));
  return p;
}

// Dense kernel of the depthwise-separable composite: K[o,c,:,:] = pw[o,c] * dw[c].
template <typename T>
Tensor<T> compose_dsconv_kernel(const Tensor<T>& dw, const Tensor<T>& pw) {
  const std::int64_t d = dw.dim(0), z = dw.dim(2), o = pw.dim(0);
  Tensor<T> k({o, d, z, z});
  for (std::int64_t oc = 0; oc < o; ++oc) {
    for (std::int64_t c = 0; c < d; ++c) {
      for (std::int64_t u = 0; u < z; ++u) {
        for (std::int64_t v = 0; v < z; ++v) k(oc, c, u, v) = pw(oc, c, 0, 0) * dw(c, 0, u, v);
      }
    }
  }
  return k;
}

// The documented E=1 weight mapping: a residual conv block and a
// single-exemplar attention-only layer compute the same function when
// W_V[0] = kernel, bias_V = bias and LN1 = LN. Keys and query weights are
// irrelevant at E=1 (the softmax over one key is identically 1).
template <typename T>
TransformerLayerParams<T> exemplar_layer_from_residual_conv(const ResidualConvBlock<T>& b, std::int64_t d_qk = 8) {
  const std::int64_t d = b.channels(), z = b.z();
  TransformerLayerParams<T> layer;
  ExemplarAttentionParams<T> attn;
  attn.w_q = Tensor<T>({d, d_qk});
  attn.k_hat = Tensor<T>({1, d_qk});
  attn.w_v = Tensor<T>({1, d, d, z, z}, b.kernel.vec());
  attn.bias_v = b.bias;
  attn.s = 1;
  attn.d_k = static_cast<T>(d_qk);
  layer.attn = std::move(attn);
  layer.ln1 = b.ln;
  layer.ln2 = LayerNormParams<T>::identity(d);
  layer.ffn_w1 = Tensor<T>({d, d});
  layer.ffn_b1 = Tensor<T>({d});
  layer.ffn_w2 = Tensor<T>({d, d});
  layer.ffn_b2 = Tensor<T>({d});
  layer.variant = LayerVariant::kAttOnly;
  return layer;
}

template <typename T>
HeadParams<T> exemplar_head_from_residual_conv_head(const HeadParams<T>& conv_head) {
  HeadParams<T> p;
  p.kind = HeadKind::kExemplar;
  p.tcond_enabled = false;
  for (const auto& m : conv_head.cls_modules) {
    p.cls_modules.push_back(exemplar_layer_from_residual_conv(std::get<ResidualConvBlock<T>>(m)));
  }
  for (const auto& m : conv_head.reg_modules) {
    p.reg_modules.push_back(exemplar_layer_from_residual_conv(std::get<ResidualConvBlock<T>>(m)));
  }
  p.cls_proj_kernel = conv_head.cls_proj_kernel;
  p.cls_proj_bias = conv_head.cls_proj_bias;
  p.reg_proj_kernel = conv_head.reg_proj_kernel;
  p.reg_proj_bias = conv_head.reg_proj_bias;
  return p;
}

// --- parameter traversal ------------------------------------------------------

template <typename T, typename F>
void visit_params(DsConvBlock<T>& b, const std::string& prefix, F&& f) {
  f(prefix + ".dw", b.dw, true);
  f(prefix + ".pw", b.pw, true);
  f(prefix + ".bias", b.bias, true);
  f(prefix + ".bn.mean", b.bn.mean, false);
  f(prefix + ".bn.var", b.bn.var, false);
  f(prefix + ".bn.gamma", b.bn.gamma, false);
  f(prefix + ".bn.beta", b.bn.beta, false);
}

template <typename T, typename F>
void visit_params(ResidualConvBlock<T>& b, const std::string& prefix, F&& f) {
  f(prefix + ".kernel", b.kernel, true);
  f(prefix + ".bias", b.bias, true);
  f(prefix + ".ln.gamma", b.ln.gamma, true);
  f(prefix + ".ln.beta", b.ln.beta, true);
}

template <typename T, typename F>
void visit_params(HeadModule<T>& m, const std::string& prefix, F&& f) {
  std::visit([&](auto& inner) { visit_params(inner, prefix, f); }, m);
}

template <typename T, typename F>
void visit_params(HeadParams<T>& p, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < p.cls_modules.size(); ++i) {
    visit_params(p.cls_modules[i], prefix + ".cls." + std::to_string(i), f);
  }
  f(prefix + ".cls.proj.kernel", p.cls_proj_kernel, true);
  f(prefix + ".cls.proj.bias", p.cls_proj_bias, true);
  for (std::size_t i = 0; i < p.reg_modules.size(); ++i) {
    visit_params(p.reg_modules[i], prefix + ".reg." + std::to_string(i), f);
  }
  f(prefix + ".reg.proj.kernel", p.reg_proj_kernel, true);
  f(prefix + ".reg.proj.bias", p.reg_proj_bias, true);
}

template <typename T, typename F>
void visit_grads(ModuleGrads<T>& g, const HeadModule<T>& m, const std::string& prefix, F&& f) {
  if (auto* ds = std::get_if<DsConvGrads<T>>(&g)) {
    f(prefix + ".dw", ds->dw, true);
    f(prefix + ".pw", ds->pw, true);
    f(prefix + ".bias", ds->bias, true);
    return;
  }
  if (auto* rc = std::get_if<ResidualConvGrads<T>>(&g)) {
    f(prefix + ".kernel", rc->kernel, true);
    f(prefix + ".bias", rc->bias, true);
    f(prefix + ".ln.gamma", rc->ln_gamma, true);
    f(prefix + ".ln.beta", rc->ln_beta, true);
    return;
  }
  visit_grads(std::get<TransformerLayerGrads<T>>(g), std::get<TransformerLayerParams<T>>(m), prefix, f);
}

template <typename T, typename F>
void visit_grads(HeadGrads<T>& g, const HeadParams<T>& p, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < g.cls.size(); ++i) {
    visit_grads(g.cls[i], p.cls_modules[i], prefix + ".cls." + std::to_string(i), f);
  }
  f(prefix + ".cls.proj.kernel", g.cls_proj_kernel, true);
  f(prefix + ".cls.proj.bias", g.cls_proj_bias, true);
  for (std::size_t i = 0; i < g.reg.size(); ++i) {
    visit_grads(g.reg[i], p.reg_modules[i], prefix + ".reg." + std::to_string(i), f);
  }
  f(prefix + ".reg.proj.kernel", g.reg_proj_kernel, true);
  f(prefix + ".reg.proj.bias", g.reg_proj_bias, true);
}

// --- cross-correlation, decoding, selection ----------------------------------

// Per-channel correlation of the search map with the template map as kernel,
// same padding (extra pad goes to the bottom/right for even template sizes).
template <typename T>
Tensor<T> pointwise_xcorr(const Tensor<T>& template_f, const Tensor<T>& search_f) {
  if (template_f.rank() != 3 || search_f.rank() != 3) {
    throw std::invalid_argument("pointwise_xcorr: inputs must be DxHxW");
  }
  if (template_f.dim(0) != search_f.dim(0)) {
    throw std::invalid_argument("pointwise_xcorr: channel mismatch, template " + std::to_string(template_f.dim(0)) +
                                " vs search " + std::to_string(search_f.dim(0)));
  }
  const std::int64_t d = search_f.dim(0), hs = search_f.dim(1), ws = search_f.dim(2);
  const std::int64_t ht = template_f.dim(1), wt = template_f.dim(2);
  if (ht > hs || wt > ws) {
    throw std::invalid_argument("pointwise_xcorr: template larger than search map");
  }
  const std::int64_t py = (ht - 1) / 2, px = (wt - 1) / 2;
  Tensor<T> out({d, hs, ws});
  for (std::int64_t c = 0; c < d; ++c) {
    for (std::int64_t i = 0; i < hs; ++i) {
      for (std::int64_t j = 0; j < ws; ++j) {
        T acc = 0;
        for (std::int64_t u = 0; u < ht; ++u) {
          const std::int64_t y = i - py + u;
          if (y < 0 || y >= hs) continue;
          for (std::int64_t v = 0; v < wt; ++v) {
            const std::int64_t x = j - px + v;
            if (x < 0 || x >= ws) continue;
            acc += template_f(c, u, v) * search_f(c, y, x);
          }
        }
        out(c, i, j) = acc;
      }
    }
  }
  check_finite(out, "pointwise_xcorr");
  return out;
}

// Distance-to-four-sides decoding. Candidate i*W+j sits at the image-plane
// cell center origin + stride*(j+0.5, i+0.5).
template <typename T>
std::vector<Box> decode_boxes(const Tensor<T>& ltrb, double stride, double origin_x = 0, double origin_y = 0) {
  if (ltrb.rank() != 3 || ltrb.dim(0) != 4) throw std::invalid_argument("decode_boxes: expected 4xHxW distances");
  const std::int64_t h = ltrb.dim(1), w = ltrb.dim(2);
  std::vector<Box> boxes(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      const double cx = origin_x + stride * (static_cast<double>(j) + 0.5);
      const double cy = origin_y + stride * (static_cast<double>(i) + 0.5);
      boxes[static_cast<std::size_t>(i * w + j)] =
          Box{cx - static_cast<double>(ltrb(0, i, j)), cy - static_cast<double>(ltrb(1, i, j)),
              cx + static_cast<double>(ltrb(2, i, j)), cy + static_cast<double>(ltrb(3, i, j))};
    }
  }
  return boxes;
}

// Inverse of decode_boxes at each cell center, plus the inside-the-box mask
// used as the training-sample selector.
template <typename T>
struct EncodedTarget {
  Tensor<T> ltrb;     // 4 x H x W, negative outside the box
  Tensor<T> fg_mask;  // 1 x H x W in {0,1}
};

template <typename T>
EncodedTarget<T> encode_ltrb(const Box& gt, std::int64_t h, std::int64_t w, double stride, double origin_x = 0,
                             double origin_y = 0) {
  if (!gt.valid()) throw std::invalid_argument("encode_ltrb: box must have positive area");
  EncodedTarget<T> t{Tensor<T>({4, h, w}), Tensor<T>({1, h, w})};
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      const double cx = origin_x + stride * (static_cast<double>(j) + 0.5);
      const double cy = origin_y + stride * (static_cast<double>(i) + 0.5);
      t.ltrb(0, i, j) = static_cast<T>(cx - gt.x1);
      t.ltrb(1, i, j) = static_cast<T>(cy - gt.y1);
      t.ltrb(2, i, j) = static_cast<T>(gt.x2 - cx);
      t.ltrb(3, i, j) = static_cast<T>(gt.y2 - cy);
      const bool inside = cx > gt.x1 && cx < gt.x2 && cy > gt.y1 && cy < gt.y2;
      t.fg_mask(0, i, j) = inside ? T(1) : T(0);
    }
  }
  return t;
}

struct PenaltyConfig {
  double k = 0.04;  // size/aspect change penalty strength
  double w = 0.42;  // cosine window influence
  double lr = 0.7;  // box smoothing factor toward the new prediction
};

inline double hann_value(std::int64_t i, std::int64_t n) {
  if (n <= 1) return 1.0;
  return 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n - 1));
}

struct SelectResult {
  Box box;       // smoothed output box
  Box chosen;    // the winning candidate before smoothing
  double score = 0;
  std::int64_t index = 0;
};

// score = sigmoid(cls) * exp(-k*(max(rc,1/rc)*max(sc,1/sc)-1)) * (1-w) + w*hann,
// followed by box smoothing toward the winner.
template <typename T>
SelectResult select_box(const Tensor<T>& cls_logits, const std::vector<Box>& candidates, const Box& prev,
                        const PenaltyConfig& cfg) {
  if (cls_logits.rank() != 3 || cls_logits.dim(0) != 1) {
    throw std::invalid_argument("select_box: logits must be 1xHxW");
  }
  const std::int64_t h = cls_logits.dim(1), w = cls_logits.dim(2);
  if (static_cast<std::int64_t>(candidates.size()) != h * w) {
    throw std::invalid_argument("select_box: candidate count does not match the logit grid");
  }
  if (!prev.valid()) throw std::invalid_argument("select_box: previous box must have positive area");
  const double prev_aspect = prev.width() / prev.height();
  const double prev_size = std::sqrt(prev.area());

  SelectResult best;
  best.score = -1;
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i * w + j);
      const Box& c = candidates[idx];
      const double aspect = c.width() / c.height();
      const double size_r = std::sqrt(c.area()) / prev_size;
      const double asp_r = aspect / prev_aspect;
      const double pen =
          std::exp(-cfg.k * (std::max(asp_r, 1.0 / asp_r) * std::max(size_r, 1.0 / size_r) - 1.0));
      const double prob = 1.0 / (1.0 + std::exp(-static_cast<double>(cls_logits(0, i, j))));
      const double score = prob * pen * (1.0 - cfg.w) + cfg.w * hann_value(i, h) * hann_value(j, w);
      if (score > best.score) {
        best.score = score;
        best.index = static_cast<std::int64_t>(idx);
        best.chosen = c;
      }
    }
  }
  best.box = Box{(1.0 - cfg.lr) * prev.x1 + cfg.lr * best.chosen.x1, (1.0 - cfg.lr) * prev.y1 + cfg.lr * best.chosen.y1,
                 (1.0 - cfg.lr) * prev.x2 + cfg.lr * best.chosen.x2, (1.0 - cfg.lr) * prev.y2 + cfg.lr * best.chosen.y2};
  return best;
}

}  // namespace ettk
