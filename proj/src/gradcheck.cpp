#include "ettk/gradcheck.hpp"

#include <random>

#include "ettk/attention.hpp"
#include "ettk/eval.hpp"
#include "ettk/head.hpp"
#include "ettk/ops.hpp"

namespace ettk::gradcheck {

namespace {

using D64 = Tensor<double>;

// Uniform samples bounded away from zero, for kinked ops (relu, min).
D64 random_signed_margin(std::vector<std::int64_t> shape, std::mt19937& rng, double lo = 0.05, double hi = 1.0) {
  D64 t(std::move(shape));
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.vec()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

CheckResult check_conv2d(const std::string& name, const ConvSpec& spec, std::int64_t h, std::int64_t w,
                         std::mt19937& rng) {
  D64 x = random_uniform<double>({spec.in_channels, h, w}, rng);
  D64 k = random_uniform<double>({spec.out_channels, spec.in_channels / spec.groups, spec.kernel_size,
                                  spec.kernel_size},
                                 rng);
  D64 b = random_uniform<double>({spec.out_channels}, rng);
  D64 r = random_uniform<double>(conv2d(x, k, &b, spec).shape(), rng);
  auto grads = conv2d_backward(r, x, k, spec, true);
  std::map<std::string, D64> analytic{{"x", grads.input}, {"kernel", grads.kernel}, {"bias", grads.bias}};
  auto fwd = [&]() { return conv2d(x, k, &b, spec); };
  return check_tensor_output(name, fwd, r, LossForm::kWeightedSum, {{"x", &x}, {"kernel", &k}, {"bias", &b}},
                             analytic);
}

CheckResult check_linear(std::mt19937& rng) {
  D64 x = random_uniform<double>({3, 5}, rng);
  D64 w = random_uniform<double>({5, 4}, rng);
  D64 b = random_uniform<double>({4}, rng);
  D64 r = random_uniform<double>({3, 4}, rng);
  auto grads = linear_backward(r, x, w);
  std::map<std::string, D64> analytic{{"x", grads.x}, {"w", grads.w}, {"b", grads.b}};
  auto fwd = [&]() { return linear(x, w, b); };
  return check_tensor_output("linear", fwd, r, LossForm::kWeightedSum, {{"x", &x}, {"w", &w}, {"b", &b}}, analytic);
}

CheckResult check_softmax(std::mt19937& rng) {
  D64 x = random_uniform<double>({3, 7}, rng, -2.0, 2.0);
  D64 r = random_uniform<double>({3, 7}, rng);
  std::map<std::string, D64> analytic{{"x", softmax_lastdim_backward(r, softmax_lastdim(x))}};
  auto fwd = [&]() { return softmax_lastdim(x); };
  return check_tensor_output("softmax_lastdim", fwd, r, LossForm::kWeightedSum, {{"x", &x}}, analytic);
}

CheckResult check_pool(std::mt19937& rng) {
  D64 x = random_uniform<double>({3, 7, 5}, rng);
  const std::int64_t s = 3;  // overlapping windows on both axes
  D64 r = random_uniform<double>({3, s, s}, rng);
  std::map<std::string, D64> analytic{{"x", adaptive_avg_pool_backward(r, x.shape(), s)}};
  auto fwd = [&]() { return adaptive_avg_pool(x, s); };
  return check_tensor_output("adaptive_avg_pool", fwd, r, LossForm::kWeightedSum, {{"x", &x}}, analytic);
}

CheckResult check_layernorm(std::mt19937& rng) {
  D64 x = random_uniform<double>({4, 6}, rng);
  D64 gamma = random_uniform<double>({6}, rng, 0.5, 1.5);
  D64 beta = random_uniform<double>({6}, rng);
  D64 r = random_uniform<double>({4, 6}, rng);
  auto grads = layernorm_backward(r, x, gamma);
  std::map<std::string, D64> analytic{{"x", grads.x}, {"gamma", grads.gamma}, {"beta", grads.beta}};
  auto fwd = [&]() { return layernorm(x, gamma, beta); };
  return check_tensor_output("layernorm", fwd, r, LossForm::kWeightedSum,
                             {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}}, analytic);
}

CheckResult check_relu(std::mt19937& rng) {
  D64 x = random_signed_margin({3, 5, 5}, rng);
  D64 r = random_uniform<double>({3, 5, 5}, rng);
  std::map<std::string, D64> analytic{{"x", relu_backward(r, x)}};
  auto fwd = [&]() { return relu(x); };
  return check_tensor_output("relu", fwd, r, LossForm::kWeightedSum, {{"x", &x}}, analytic);
}

CheckResult check_add_scale(std::mt19937& rng) {
  D64 a = random_uniform<double>({2, 3}, rng);
  D64 b = random_uniform<double>({2, 3}, rng);
  D64 r = random_uniform<double>({2, 3}, rng);
  std::map<std::string, D64> analytic{{"a", r}, {"b", r}, {"scaled", scale(r, 0.37)}};
  auto fwd_add = [&]() { return add(a, b); };
  auto res = check_tensor_output("add", fwd_add, r, LossForm::kWeightedSum, {{"a", &a}, {"b", &b}}, analytic);
  auto fwd_scale = [&]() { return scale(a, 0.37); };
  auto res2 = check_tensor_output("scale", fwd_scale, r, LossForm::kWeightedSum, {{"scaled", &a}}, analytic);
  res.name = "add_scale";
  for (auto& p : res2.params) res.params.push_back(p);
  if (res2.max_rel_err > res.max_rel_err) {
    res.max_rel_err = res2.max_rel_err;
    res.worst_param = res2.worst_param;
  }
  return res;
}

CheckResult check_batchnorm(std::mt19937& rng) {
  D64 x = random_uniform<double>({3, 4, 4}, rng);
  BatchNormParams<double> p;
  p.mean = random_uniform<double>({3}, rng, -0.5, 0.5);
  p.var = random_uniform<double>({3}, rng, 0.5, 1.5);
  p.gamma = random_uniform<double>({3}, rng, 0.5, 1.5);
  p.beta = random_uniform<double>({3}, rng);
  D64 r = random_uniform<double>({3, 4, 4}, rng);
  auto grads = batchnorm_inference_backward(r, x, p);
  std::map<std::string, D64> analytic{{"x", grads.x}, {"gamma", grads.gamma}, {"beta", grads.beta}};
  auto fwd = [&]() { return batchnorm_inference(x, p); };
  return check_tensor_output("batchnorm_inference", fwd, r, LossForm::kWeightedSum,
                             {{"x", &x}, {"gamma", &p.gamma}, {"beta", &p.beta}}, analytic);
}

CheckResult check_exemplar_attention(const std::string& name, std::int64_t s, bool scale_after,
                                     std::mt19937& rng) {
  auto p = init_exemplar_attention<double>(8, 6, 8, 4, 3, s, rng);
  p.scale_after_softmax = scale_after;
  D64 x = random_uniform<double>({8, 6, 6}, rng, 0.25, 1.25);
  D64 r = random_uniform<double>({8, 6, 6}, rng);
  ExemplarAttentionCache<double> cache;
  exemplar_attention_efficient(x, p, nullptr, &cache);
  auto grads = exemplar_attention_backward(r, p, cache);
  std::map<std::string, D64> analytic{{"x", grads.x},
                                      {"w_q", grads.w_q},
                                      {"k_hat", grads.k_hat},
                                      {"w_v", grads.w_v},
                                      {"bias_v", grads.bias_v}};
  auto fwd = [&]() { return exemplar_attention_efficient(x, p); };
  return check_tensor_output(name, fwd, r, LossForm::kWeightedSum,
                             {{"x", &x}, {"w_q", &p.w_q}, {"k_hat", &p.k_hat}, {"w_v", &p.w_v}, {"bias_v", &p.bias_v}},
                             analytic);
}

CheckResult check_standard_attention(std::mt19937& rng) {
  auto p = init_standard_attention<double>(6, 4, 6, rng);
  D64 x = random_uniform<double>({6, 4, 4}, rng);
  D64 r = random_uniform<double>({6, 4, 4}, rng);
  StandardAttentionCache<double> cache;
  standard_attention(x, p, nullptr, &cache);
  auto grads = standard_attention_backward(r, p, cache);
  std::map<std::string, D64> analytic{{"x", grads.x}, {"w_q", grads.w_q}, {"w_k", grads.w_k}, {"w_v", grads.w_v}};
  auto fwd = [&]() { return standard_attention(x, p); };
  return check_tensor_output("standard_attention", fwd, r, LossForm::kWeightedSum,
                             {{"x", &x}, {"w_q", &p.w_q}, {"w_k", &p.w_k}, {"w_v", &p.w_v}}, analytic);
}

// Full layer at the miniature shape, loss = sum(out^2)/2 so grad_out = out.
CheckResult check_transformer_layer(const std::string& name, bool standard, LayerVariant variant, bool ffn_residual,
                                    bool with_tcond, std::mt19937& rng) {
  TransformerLayerParams<double> p = standard ? init_standard_layer<double>(8, 6, variant, rng)
                                              : init_exemplar_layer<double>(8, 6, 4, 3, 1, variant, rng);
  p.ffn_residual = ffn_residual;
  D64 x = random_uniform<double>({8, 6, 6}, rng, 0.25, 1.25);
  D64 tcond = random_uniform<double>({8}, rng, -0.2, 0.2);
  const D64* tc = with_tcond ? &tcond : nullptr;

  auto forward = [&]() { return transformer_layer_forward(x, p, tc); };

  TransformerLayerCache<double> cache;
  const D64 out = transformer_layer_forward(x, p, tc, &cache);
  auto grads = transformer_layer_backward(out, p, cache);
  std::map<std::string, D64> analytic{{"x", grads.x}};
  visit_grads(grads, p, "layer", [&](const std::string& n, D64& t, bool) { analytic.emplace(n, t); });
  if (with_tcond) {
    D64 dt({x.dim(0)});
    const std::int64_t hw = x.dim(1) * x.dim(2);
    for (std::int64_t c = 0; c < x.dim(0); ++c) {
      double s = 0;
      for (std::int64_t i = 0; i < hw; ++i) s += grads.x[c * hw + i];
      dt[c] = s;
    }
    analytic.emplace("tcond", dt);
  }

  std::vector<ParamRef> refs{{"x", &x}};
  visit_params(p, "layer", [&](const std::string& n, D64& t, bool trainable) {
    if (trainable) refs.push_back({n, &t});
  });
  if (with_tcond) refs.push_back({"tcond", &tcond});
  return check_tensor_output(name, forward, out, LossForm::kHalfSumSquares, refs, analytic);
}

CheckResult check_bce(std::mt19937& rng) {
  D64 logits = random_uniform<double>({1, 5, 5}, rng, -2.0, 2.0);
  D64 mask({1, 5, 5});
  std::bernoulli_distribution bern(0.4);
  for (auto& v : mask.vec()) v = bern(rng) ? 1.0 : 0.0;
  std::map<std::string, D64> analytic{{"logits", bce_loss_backward(logits, mask)}};
  auto loss = [&]() { return bce_loss(logits, mask); };
  return check_scalar("bce_loss", loss, {{"logits", &logits}}, analytic);
}

CheckResult check_iou_loss(std::mt19937& rng) {
  const std::int64_t h = 4, w = 4;
  D64 gt = random_uniform<double>({4, h, w}, rng, 0.5, 2.0);
  // Keep every predicted component at least 1e-3 away from its target so the
  // min() kinks stay clear of the finite-difference step.
  D64 pred(gt.shape());
  std::uniform_real_distribution<double> delta(2e-3, 0.3);
  std::bernoulli_distribution sign(0.5);
  for (std::int64_t i = 0; i < gt.numel(); ++i) pred[i] = gt[i] + (sign(rng) ? delta(rng) : -delta(rng));
  D64 mask({1, h, w});
  std::bernoulli_distribution bern(0.6);
  for (auto& v : mask.vec()) v = bern(rng) ? 1.0 : 0.0;
  mask(0, 0, 0) = 1.0;  // nonempty
  std::map<std::string, D64> analytic{{"pred", iou_loss_backward(pred, gt, mask)}};
  auto loss = [&]() { return iou_loss(pred, gt, mask).value; };
  return check_scalar("iou_loss", loss, {{"pred", &pred}}, analytic);
}

// Classification + regression loss gradients end to end through a miniature
// head. The check runs against the linearization of the BCE+IoU loss at the
// base point (identical gradient, but the steep exp/log curvature of the loss
// itself stays out of the finite differences).
CheckResult check_head(std::mt19937& rng) {
  HeadConfig cfg;
  cfg.kind = HeadKind::kExemplar;
  cfg.d = 4;
  cfg.d_qk = 4;
  cfg.e = 2;
  cfg.z = 3;
  cfg.s = 1;
  auto head = init_head<double>(cfg, rng);
  D64 corr = random_uniform<double>({4, 8, 8}, rng, 0.25, 1.25);
  const Box gt_box{30.0, 25.0, 100.0, 95.0};
  const auto target = encode_ltrb<double>(gt_box, 8, 8, 16.0);

  const std::int64_t h = 8, w = 8;
  auto stack_outputs = [&](const HeadOutput<double>& out) {
    D64 stacked({5, h, w});
    std::copy_n(out.cls_logits.data(), h * w, stacked.data());
    std::copy_n(out.ltrb.data(), 4 * h * w, stacked.data() + h * w);
    return stacked;
  };
  auto forward = [&]() { return stack_outputs(head_forward(corr, head)); };

  HeadCache<double> cache;
  const auto out = head_forward(corr, head, nullptr, &cache);
  D64 dcls = bce_loss_backward(out.cls_logits, target.fg_mask);
  D64 dltrb = iou_loss_backward(out.ltrb, target.ltrb, target.fg_mask);
  auto grads = head_backward(dcls, dltrb, head, cache);
  D64 weights({5, h, w});
  std::copy_n(dcls.data(), h * w, weights.data());
  std::copy_n(dltrb.data(), 4 * h * w, weights.data() + h * w);

  std::map<std::string, D64> analytic;
  visit_grads(grads, head, "head", [&](const std::string& n, D64& t, bool) { analytic.emplace(n, t); });
  std::vector<ParamRef> refs;
  visit_params(head, "head", [&](const std::string& n, D64& t, bool trainable) {
    if (trainable) refs.push_back({n, &t});
  });
  return check_tensor_output("head/exemplar_total_loss", forward, weights, LossForm::kWeightedSum, refs, analytic);
}

}  // namespace

std::vector<CheckResult> run_suite(std::uint32_t seed) {
  // Every case draws from its own stream so cases stay independent and
  // individually reproducible.
  std::uint32_t k = 0;
  const auto case_rng = [&]() { return std::mt19937(seed * 1000 + k++); };
  std::vector<CheckResult> results;
  {
    auto r = case_rng();
    results.push_back(check_conv2d("conv2d/dense_same", same_conv_spec(4, 3, 3), 6, 6, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_conv2d("conv2d/strided", ConvSpec{2, 3, 3, 2, 0, 1}, 7, 7, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_conv2d("conv2d/depthwise", same_conv_spec(3, 3, 3, 3), 5, 5, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_conv2d("conv2d/1x1", ConvSpec{5, 3, 1, 1, 0, 1}, 4, 4, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_linear(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_softmax(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_pool(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_layernorm(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_relu(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_add_scale(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_batchnorm(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_exemplar_attention("exemplar_attention/s1", 1, false, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_exemplar_attention("exemplar_attention/s2", 2, false, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_exemplar_attention("exemplar_attention/scale_after_softmax", 1, true, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_standard_attention(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_transformer_layer("transformer_layer/att_only", false, LayerVariant::kAttOnly, false,
                                              false, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_transformer_layer("transformer_layer/att_ffn", false, LayerVariant::kAttFfn, false,
                                              false, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_transformer_layer("transformer_layer/att_ffn_residual", false, LayerVariant::kAttFfn,
                                              true, false, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_transformer_layer("transformer_layer/att_ffn_tcond", false, LayerVariant::kAttFfn, false,
                                              true, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_transformer_layer("transformer_layer/standard_att_ffn", true, LayerVariant::kAttFfn,
                                              false, false, r));
  }
  {
    auto r = case_rng();
    results.push_back(check_bce(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_iou_loss(r));
  }
  {
    auto r = case_rng();
    results.push_back(check_head(r));
  }
  return results;
}

}  // namespace ettk::gradcheck
