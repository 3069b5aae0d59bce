#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "ettk/eval.hpp"
#include "ettk/head.hpp"

using namespace ettk;

namespace {

HeadConfig small_cfg(HeadKind kind) {
  HeadConfig cfg;
  cfg.kind = kind;
  cfg.d = 4;
  cfg.d_qk = 4;
  cfg.e = 2;
  cfg.z = 3;
  cfg.s = 1;
  return cfg;
}

}  // namespace

TEST_CASE("pointwise_xcorr closed forms") {
  // 1x1 template: output is a scaled copy of the search map
  Tensor<float> t({2, 1, 1}, {2.0f, -3.0f});
  std::mt19937 rng(3);
  auto s = random_uniform<float>({2, 4, 5}, rng);
  const auto out = pointwise_xcorr(t, s);
  for (std::int64_t i = 0; i < 20; ++i) {
    CHECK(out[i] == doctest::Approx(2.0f * s[i]));
    CHECK(out[20 + i] == doctest::Approx(-3.0f * s[20 + i]));
  }

  // zero template -> zero response
  Tensor<float> tz({2, 2, 2});
  const auto zero = pointwise_xcorr(tz, s);
  CHECK(max_abs(zero) == 0.0f);

  CHECK_THROWS_WITH_AS(pointwise_xcorr(Tensor<float>({3, 1, 1}), s), doctest::Contains("channel"),
                       std::invalid_argument);
  CHECK_THROWS_AS(pointwise_xcorr(random_uniform<float>({2, 8, 8}, rng), s), std::invalid_argument);
}

TEST_CASE("xcorr peaks where the template appears, zero-mean template") {
  std::mt19937 rng(7);
  const std::int64_t ht = 4, wt = 4, hs = 12, ws = 12;
  auto tmpl = random_uniform<float>({1, ht, wt}, rng);
  float mean = 0;
  for (std::int64_t i = 0; i < ht * wt; ++i) mean += tmpl[i];
  mean /= static_cast<float>(ht * wt);
  for (std::int64_t i = 0; i < ht * wt; ++i) tmpl[i] -= mean;

  const std::int64_t dy = 5, dx = 3;
  Tensor<float> search({1, hs, ws});
  for (std::int64_t u = 0; u < ht; ++u) {
    for (std::int64_t v = 0; v < wt; ++v) search(0, dy + u, dx + v) = tmpl(0, u, v);
  }
  const auto resp = pointwise_xcorr(tmpl, search);
  // peak where the kernel anchor (pad offset) aligns with the copy
  std::int64_t best = 0;
  for (std::int64_t i = 0; i < hs * ws; ++i) {
    if (resp[i] > resp[best]) best = i;
  }
  CHECK(best / ws == dy + (ht - 1) / 2);
  CHECK(best % ws == dx + (wt - 1) / 2);
}

TEST_CASE("head_forward output contract") {
  std::mt19937 rng(11);
  for (HeadKind kind : {HeadKind::kConv, HeadKind::kConvResidual, HeadKind::kExemplar, HeadKind::kStandardAttn}) {
    auto head = init_head<float>(small_cfg(kind), rng);
    auto corr = random_uniform<float>({4, 6, 6}, rng);
    const auto out = head_forward(corr, head);
    CHECK(out.cls_logits.shape() == std::vector<std::int64_t>{1, 6, 6});
    CHECK(out.ltrb.shape() == std::vector<std::int64_t>{4, 6, 6});
    for (std::int64_t i = 0; i < out.ltrb.numel(); ++i) CHECK(out.ltrb[i] > 0.0f);
  }
  auto head = init_head<float>(small_cfg(HeadKind::kExemplar), rng);
  CHECK_THROWS_WITH_AS(head_forward(random_uniform<float>({3, 6, 6}, rng), head), doctest::Contains("DxHxW"),
                       std::invalid_argument);
}

TEST_CASE("all-zero correlation map gives constant logits for the conv head") {
  std::mt19937 rng(13);
  auto head = init_head<float>(small_cfg(HeadKind::kConv), rng);
  Tensor<float> corr({4, 6, 6});
  const auto out = head_forward(corr, head);
  for (std::int64_t i = 1; i < out.cls_logits.numel(); ++i) {
    CHECK(out.cls_logits[i] == doctest::Approx(out.cls_logits[0]).epsilon(1e-6));
  }
}

TEST_CASE("exemplar head with E=1 reproduces the residual conv head, values and gradients") {
  std::mt19937 rng(17);
  auto conv_head = init_head<float>(small_cfg(HeadKind::kConvResidual), rng);
  auto ex_head = exemplar_head_from_residual_conv_head(conv_head);
  auto corr = random_uniform<float>({4, 8, 8}, rng);

  HeadCache<float> cache_c, cache_e;
  const auto out_c = head_forward(corr, conv_head, nullptr, &cache_c);
  const auto out_e = head_forward(corr, ex_head, nullptr, &cache_e);
  CHECK(max_abs_diff(out_c.cls_logits, out_e.cls_logits) < 1e-5f);
  CHECK(max_abs_diff(out_c.ltrb, out_e.ltrb) < 1e-5f);

  const Box gt{30, 25, 100, 95};
  const auto target = encode_ltrb<float>(gt, 8, 8, 16.0);
  const auto dcls = bce_loss_backward(out_c.cls_logits, target.fg_mask);
  const auto dltrb = iou_loss_backward(out_c.ltrb, target.ltrb, target.fg_mask);
  auto g_c = head_backward(dcls, dltrb, conv_head, cache_c);
  auto g_e = head_backward(dcls, dltrb, ex_head, cache_e);

  for (std::size_t m = 0; m < g_c.cls.size(); ++m) {
    const auto& rc = std::get<ResidualConvGrads<float>>(g_c.cls[m]);
    const auto& ex = std::get<TransformerLayerGrads<float>>(g_e.cls[m]);
    const auto kernel_grad = ex.ex.w_v.reshaped(rc.kernel.shape());
    CHECK(max_abs_diff(rc.kernel, kernel_grad) < 1e-6f);
    CHECK(max_abs_diff(rc.bias, ex.ex.bias_v) < 1e-6f);
    CHECK(max_abs_diff(rc.ln_gamma, ex.ln1_gamma) < 1e-6f);
    CHECK(max_abs(ex.ex.w_q) == 0.0f);  // singleton softmax has zero jacobian
    CHECK(max_abs(ex.ex.k_hat) == 0.0f);
  }
  CHECK(max_abs_diff(g_c.cls_proj_kernel, g_e.cls_proj_kernel) < 1e-6f);
  CHECK(max_abs_diff(g_c.corr, g_e.corr) < 1e-6f);
}

TEST_CASE("decode_boxes arithmetic") {
  Tensor<float> ltrb({4, 2, 2});
  for (std::int64_t i = 0; i < 4; ++i) ltrb[i * 4] = 8.0f;  // cell (0,0): l=t=r=b=8
  ltrb(0, 0, 1) = 3.0f;
  ltrb(1, 0, 1) = 2.0f;
  ltrb(2, 0, 1) = 5.0f;
  ltrb(3, 0, 1) = 7.0f;
  const auto boxes = decode_boxes(ltrb, 16.0);
  CHECK(boxes[0].x1 == doctest::Approx(0.0));
  CHECK(boxes[0].y1 == doctest::Approx(0.0));
  CHECK(boxes[0].x2 == doctest::Approx(16.0));
  CHECK(boxes[0].y2 == doctest::Approx(16.0));
  // cell (0,1) center (24, 8)
  CHECK(boxes[1].x1 == doctest::Approx(21.0));
  CHECK(boxes[1].y1 == doctest::Approx(6.0));
  CHECK(boxes[1].x2 == doctest::Approx(29.0));
  CHECK(boxes[1].y2 == doctest::Approx(15.0));

  // symmetric distances give a square box centered on the cell
  const Box sq = boxes[0];
  CHECK(sq.cx() == doctest::Approx(8.0));
  CHECK(sq.cy() == doctest::Approx(8.0));

  // monotonicity: growing r moves the right edge right
  ltrb(2, 0, 0) = 9.5f;
  const auto boxes2 = decode_boxes(ltrb, 16.0);
  CHECK(boxes2[0].x2 > boxes[0].x2);
}

TEST_CASE("encode then decode is the identity at interior cells") {
  const Box gt{20.5, 33.25, 90.0, 101.5};
  const auto enc = encode_ltrb<double>(gt, 8, 8, 16.0);
  const auto boxes = decode_boxes(enc.ltrb, 16.0);
  bool checked = false;
  for (std::int64_t i = 0; i < 8; ++i) {
    for (std::int64_t j = 0; j < 8; ++j) {
      if (enc.fg_mask(0, i, j) == 0.0) continue;
      const Box& b = boxes[static_cast<std::size_t>(i * 8 + j)];
      CHECK(std::abs(b.x1 - gt.x1) < 1e-6);
      CHECK(std::abs(b.y1 - gt.y1) < 1e-6);
      CHECK(std::abs(b.x2 - gt.x2) < 1e-6);
      CHECK(std::abs(b.y2 - gt.y2) < 1e-6);
      checked = true;
    }
  }
  CHECK(checked);
}

TEST_CASE("select_box penalties and window") {
  const std::int64_t h = 5, w = 5;
  std::mt19937 rng(19);
  auto cls = random_uniform<float>({1, h, w}, rng, -1.0f, 1.0f);
  const Box prev{10, 10, 42, 42};
  std::vector<Box> cands;
  for (std::int64_t i = 0; i < h * w; ++i) cands.push_back(prev);

  // penalties off, lr=1: pure argmax of the logits
  std::int64_t argmax = 0;
  for (std::int64_t i = 0; i < h * w; ++i) {
    if (cls[i] > cls[argmax]) argmax = i;
  }
  const auto sel = select_box(cls, cands, prev, PenaltyConfig{0.0, 0.0, 1.0});
  CHECK(sel.index == argmax);

  // two equal-logit candidates, one matching the previous size/aspect
  Tensor<float> flat = Tensor<float>::full({1, 1, 2}, 0.3f);
  std::vector<Box> two{prev, Box{10, 10, 58, 26}};  // same area, different aspect
  const auto sel2 = select_box(flat, two, prev, PenaltyConfig{0.1, 0.0, 1.0});
  CHECK(sel2.index == 0);

  // w=1: the cosine window alone picks the center cell
  Tensor<float> any = random_uniform<float>({1, 5, 5}, rng);
  std::vector<Box> c25(25, prev);
  const auto sel3 = select_box(any, c25, prev, PenaltyConfig{0.04, 1.0, 1.0});
  CHECK(sel3.index == 12);

  // smoothing interpolates between previous and chosen boxes
  std::vector<Box> moved(25, Box{20, 20, 52, 52});
  const auto sel4 = select_box(any, moved, prev, PenaltyConfig{0.0, 0.0, 0.5});
  CHECK(sel4.box.x1 == doctest::Approx(15.0));
  CHECK(sel4.box.y2 == doctest::Approx(47.0));
}

TEST_CASE("select_box argmax is invariant to constant logit shifts") {
  std::mt19937 rng(23);
  // penalties off: exact invariance for any data
  for (int trial = 0; trial < 10; ++trial) {
    auto cls = random_uniform<float>({1, 4, 4}, rng, -3.0f, 3.0f);
    std::vector<Box> cands;
    for (std::int64_t i = 0; i < 16; ++i) {
      const double cx = 8.0 * static_cast<double>(i % 4) + 10.0;
      const double cy = 8.0 * static_cast<double>(i / 4) + 10.0;
      cands.push_back(box_from_center(cx, cy, 20.0 + static_cast<double>(i), 18.0));
    }
    const Box prev = box_from_center(20, 20, 22, 18);
    const auto base = select_box(cls, cands, prev, PenaltyConfig{0.0, 0.0, 1.0});
    for (float shift : {-5.0f, -1.0f, 1.0f, 5.0f}) {
      Tensor<float> shifted(cls.shape());
      for (std::int64_t i = 0; i < 16; ++i) shifted[i] = cls[i] + shift;
      CHECK(select_box(shifted, cands, prev, PenaltyConfig{0.0, 0.0, 1.0}).index == base.index);
    }
  }

  // with default penalties on a case with one dominant peak
  Tensor<float> peaked({1, 3, 3});
  peaked(0, 1, 2) = 4.0f;
  std::vector<Box> cands(9, box_from_center(24, 24, 30, 30));
  const Box prev = box_from_center(24, 24, 30, 30);
  const auto base = select_box(peaked, cands, prev, PenaltyConfig{});
  for (float shift : {-5.0f, -1.0f, 1.0f, 5.0f}) {
    Tensor<float> shifted(peaked.shape());
    for (std::int64_t i = 0; i < 9; ++i) shifted[i] = peaked[i] + shift;
    CHECK(select_box(shifted, cands, prev, PenaltyConfig{}).index == base.index);
  }
}

TEST_CASE("head rejects wrong module counts") {
  std::mt19937 rng(29);
  auto head = init_head<float>(small_cfg(HeadKind::kConv), rng);
  head.cls_modules.pop_back();
  CHECK_THROWS_WITH_AS(head_forward(random_uniform<float>({4, 6, 6}, rng), head), doctest::Contains("6 modules"),
                       std::invalid_argument);
}

TEST_CASE("head parameter count grows with the exemplar count") {
  std::mt19937 rng(31);
  auto count_params = [&](std::int64_t e) {
    auto cfg = small_cfg(HeadKind::kExemplar);
    cfg.e = e;
    auto head = init_head<float>(cfg, rng);
    std::int64_t n = 0;
    visit_params(head, "head", [&](const std::string&, Tensor<float>& t, bool) { n += t.numel(); });
    return n;
  };
  const auto n1 = count_params(1);
  const auto n4 = count_params(4);
  const auto n16 = count_params(16);
  CHECK(n1 < n4);
  CHECK(n4 < n16);
}
