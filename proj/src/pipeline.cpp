#include "ettk/pipeline.hpp"

#include <cmath>

#include "ettk/synth.hpp"

namespace ettk {

BackboneParams init_toy_backbone(std::mt19937& rng) {
  BackboneParams p;
  p.kind = BackboneKind::kToy;
  // 4x4 stride-2 pad-1 halves even inputs exactly under the no-fractional
  // output rule.
  const std::int64_t widths[5] = {3, 32, 64, 96, 128};
  for (int i = 0; i < 4; ++i) {
    BackboneParams::Block b;
    b.kernel = Tensor<float>({widths[i + 1], widths[i], 4, 4});
    kaiming_uniform(b.kernel, widths[i] * 16, rng);
    b.bias = Tensor<float>({widths[i + 1]});
    b.bn = BatchNormParams<float>::identity(widths[i + 1]);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

BackboneParams oracle_backbone() {
  BackboneParams p;
  p.kind = BackboneKind::kOracle;
  return p;
}

Tensor<float> backbone_forward(const BackboneParams& p, const Tensor<float>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("backbone: input must be 3xHxW");
  if (img.dim(1) % BackboneParams::stride() != 0 || img.dim(2) % BackboneParams::stride() != 0) {
    throw std::invalid_argument("backbone: input size must be divisible by the total stride of 16");
  }
  if (p.kind == BackboneKind::kOracle) {
    const std::int64_t ho = img.dim(1) / 16, wo = img.dim(2) / 16;
    Tensor<float> out({3, ho, wo});
    for (std::int64_t c = 0; c < 3; ++c) {
      float channel_sum = 0;
      for (std::int64_t i = 0; i < ho; ++i) {
        for (std::int64_t j = 0; j < wo; ++j) {
          float s = 0;
          for (std::int64_t y = i * 16; y < (i + 1) * 16; ++y) {
            for (std::int64_t x = j * 16; x < (j + 1) * 16; ++x) s += img(c, y, x);
          }
          out(c, i, j) = s / 256.0f;
          channel_sum += out(c, i, j);
        }
      }
      const float mean = channel_sum / static_cast<float>(ho * wo);
      for (std::int64_t i = 0; i < ho * wo; ++i) out[c * ho * wo + i] -= mean;
    }
    return out;
  }
  Tensor<float> x = img;
  for (const auto& b : p.blocks) {
    x = conv2d(x, b.kernel, &b.bias, ConvSpec{b.kernel.dim(0), b.kernel.dim(1), 4, 2, 1, 1});
    x = batchnorm_inference(x, b.bn);
    x = relu(x);
  }
  return x;
}

Tensor<float> crop_resize(const Image& frame, double cx, double cy, double size, std::int64_t out_px) {
  if (size <= 0) throw std::invalid_argument("crop_resize: size must be positive");
  if (out_px < 1) throw std::invalid_argument("crop_resize: output size must be >= 1");
  float mean[3] = {0, 0, 0};
  for (std::int64_t y = 0; y < frame.height; ++y) {
    for (std::int64_t x = 0; x < frame.width; ++x) {
      for (int c = 0; c < 3; ++c) mean[c] += static_cast<float>(frame.at(y, x, c));
    }
  }
  const float inv_n = 1.0f / (255.0f * static_cast<float>(frame.height * frame.width));
  for (int c = 0; c < 3; ++c) mean[c] *= inv_n;

  const double x0 = cx - size / 2.0, y0 = cy - size / 2.0;
  const double step = size / static_cast<double>(out_px);
  Tensor<float> out({3, out_px, out_px});
  const auto sample = [&](std::int64_t yy, std::int64_t xx, int c) -> float {
    if (yy < 0 || yy >= frame.height || xx < 0 || xx >= frame.width) return mean[c];
    return static_cast<float>(frame.at(yy, xx, c)) / 255.0f;
  };
  for (std::int64_t r = 0; r < out_px; ++r) {
    const double sy = y0 + (static_cast<double>(r) + 0.5) * step - 0.5;
    const std::int64_t iy = static_cast<std::int64_t>(std::floor(sy));
    const float ay = static_cast<float>(sy - static_cast<double>(iy));
    for (std::int64_t col = 0; col < out_px; ++col) {
      const double sx = x0 + (static_cast<double>(col) + 0.5) * step - 0.5;
      const std::int64_t ix = static_cast<std::int64_t>(std::floor(sx));
      const float ax = static_cast<float>(sx - static_cast<double>(ix));
      for (int c = 0; c < 3; ++c) {
        const float v00 = sample(iy, ix, c), v01 = sample(iy, ix + 1, c);
        const float v10 = sample(iy + 1, ix, c), v11 = sample(iy + 1, ix + 1, c);
        out(c, r, col) = (1 - ay) * ((1 - ax) * v00 + ax * v01) + ay * ((1 - ax) * v10 + ax * v11);
      }
    }
  }
  return out;
}

TrackState tracker_init(const Image& frame, const Box& gt, const TrackerParams& params) {
  if (!gt.valid()) throw std::invalid_argument("tracker_init: ground-truth box must have positive area");
  const double t_size = params.template_context * std::sqrt(gt.area());
  const Tensor<float> crop = crop_resize(frame, gt.cx(), gt.cy(), t_size, params.template_px);
  TrackState s;
  s.template_features = backbone_forward(params.backbone, crop);
  const std::int64_t d = s.template_features.dim(0);
  const std::int64_t hw = s.template_features.dim(1) * s.template_features.dim(2);
  s.template_vector = Tensor<float>({d});
  for (std::int64_t c = 0; c < d; ++c) {
    float acc = 0;
    for (std::int64_t i = 0; i < hw; ++i) acc += s.template_features[c * hw + i];
    s.template_vector[c] = acc / static_cast<float>(hw);
  }
  s.prev_box = gt;
  s.last_search_size = params.search_context * std::sqrt(gt.area());
  return s;
}

HeadOutput<float> oracle_head_forward(const Tensor<float>& corr, const Box& prev_in_crop,
                                      std::int64_t template_h, std::int64_t template_w) {
  const std::int64_t h = corr.dim(1), w = corr.dim(2), d = corr.dim(0);
  Tensor<float> resp({1, h, w});
  for (std::int64_t c = 0; c < d; ++c) {
    for (std::int64_t i = 0; i < h * w; ++i) resp[i] += corr[c * h * w + i];
  }
  // z-score so sigmoid stays in its informative range
  double mean = 0, var = 0;
  for (std::int64_t i = 0; i < h * w; ++i) mean += resp[i];
  mean /= static_cast<double>(h * w);
  for (std::int64_t i = 0; i < h * w; ++i) {
    const double c = resp[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(h * w);
  const double inv_sd = 1.0 / (std::sqrt(var) + 1e-9);
  Tensor<float> cls({1, h, w});
  std::int64_t peak = 0;
  for (std::int64_t i = 0; i < h * w; ++i) {
    cls[i] = static_cast<float>((resp[i] - mean) * inv_sd);
    if (resp[i] > resp[peak]) peak = i;
  }

  // Centroid of the 3x3 neighborhood around the peak, weighted by the
  // response above the neighborhood minimum; sub-cell peak localization.
  const std::int64_t pi = peak / w, pj = peak % w;
  const std::int64_t i0 = std::max<std::int64_t>(0, pi - 1), i1 = std::min(h - 1, pi + 1);
  const std::int64_t j0 = std::max<std::int64_t>(0, pj - 1), j1 = std::min(w - 1, pj + 1);
  double lo = resp[i0 * w + j0];
  for (std::int64_t i = i0; i <= i1; ++i) {
    for (std::int64_t j = j0; j <= j1; ++j) lo = std::min(lo, static_cast<double>(resp[i * w + j]));
  }
  double wsum = 0, ci = 0, cj = 0;
  for (std::int64_t i = i0; i <= i1; ++i) {
    for (std::int64_t j = j0; j <= j1; ++j) {
      const double wgt = static_cast<double>(resp[i * w + j]) - lo;
      wsum += wgt;
      ci += wgt * static_cast<double>(i);
      cj += wgt * static_cast<double>(j);
    }
  }
  double ref_i = static_cast<double>(pi), ref_j = static_cast<double>(pj);
  if (wsum > 1e-12) {
    ref_i = ci / wsum;
    ref_j = cj / wsum;
  }
  // The correlation anchor sits at ((th-1)/2, (tw-1)/2) of the template, so
  // the target center lies th/2 - (th-1)/2 cells below/right of the peak.
  const double stride = 16.0;
  const double off_i = static_cast<double>(template_h) / 2.0 - static_cast<double>((template_h - 1) / 2);
  const double off_j = static_cast<double>(template_w) / 2.0 - static_cast<double>((template_w - 1) / 2);
  const Box proposal = box_from_center((ref_j + off_j) * stride, (ref_i + off_i) * stride, prev_in_crop.width(),
                                       prev_in_crop.height());

  // Every cell decodes to the proposal; out-of-box cells clamp to a degenerate
  // sliver that loses the size penalty.
  Tensor<float> ltrb({4, h, w});
  const float min_dist = 1e-3f;
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      const double cx = (static_cast<double>(j) + 0.5) * stride;
      const double cy = (static_cast<double>(i) + 0.5) * stride;
      ltrb(0, i, j) = std::max(min_dist, static_cast<float>(cx - proposal.x1));
      ltrb(1, i, j) = std::max(min_dist, static_cast<float>(cy - proposal.y1));
      ltrb(2, i, j) = std::max(min_dist, static_cast<float>(proposal.x2 - cx));
      ltrb(3, i, j) = std::max(min_dist, static_cast<float>(proposal.y2 - cy));
    }
  }
  return HeadOutput<float>{std::move(cls), std::move(ltrb)};
}

// Zero-mean/unit-std normalization of the correlation map, the stand-in for
// the usual learned adjust layer between the correlation and the head.
Tensor<float> normalize_corr(const Tensor<float>& corr) {
  double mean = 0;
  for (std::int64_t i = 0; i < corr.numel(); ++i) mean += corr[i];
  mean /= static_cast<double>(corr.numel());
  double var = 0;
  for (std::int64_t i = 0; i < corr.numel(); ++i) {
    const double c = corr[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(corr.numel());
  const float scale = static_cast<float>(1.0 / std::sqrt(var + 1e-8));
  const float shift = static_cast<float>(mean);
  Tensor<float> out(corr.shape());
  for (std::int64_t i = 0; i < corr.numel(); ++i) out[i] = (corr[i] - shift) * scale;
  return out;
}

Box tracker_update(TrackState& state, const Image& frame, const TrackerParams& params) {
  if (!state.prev_box.valid()) throw std::invalid_argument("tracker_update: state not initialized");
  const Box prev = state.prev_box;
  const double crop_size = params.search_context * std::sqrt(prev.area());
  const double cx = prev.cx(), cy = prev.cy();
  const Tensor<float> crop = crop_resize(frame, cx, cy, crop_size, params.search_px);
  const Tensor<float> feats = backbone_forward(params.backbone, crop);
  const Tensor<float> corr = pointwise_xcorr(state.template_features, feats);

  const double scale = static_cast<double>(params.search_px) / crop_size;
  const double x0 = cx - crop_size / 2.0, y0 = cy - crop_size / 2.0;
  const Box prev_in_crop{(prev.x1 - x0) * scale, (prev.y1 - y0) * scale, (prev.x2 - x0) * scale,
                         (prev.y2 - y0) * scale};

  HeadOutput<float> out;
  if (params.oracle_head) {
    out = oracle_head_forward(corr, prev_in_crop, state.template_features.dim(1), state.template_features.dim(2));
  } else {
    out = head_forward(normalize_corr(corr), params.head, &state.template_vector);
  }
  const auto candidates = decode_boxes(out.ltrb, static_cast<double>(BackboneParams::stride()));
  const SelectResult sel = select_box(out.cls_logits, candidates, prev_in_crop, params.penalty);

  Box box{x0 + sel.box.x1 / scale, y0 + sel.box.y1 / scale, x0 + sel.box.x2 / scale, y0 + sel.box.y2 / scale};
  // Keep the state invariant: positive area, center inside the frame.
  double bw = std::max(2.0, box.width()), bh = std::max(2.0, box.height());
  double bcx = std::clamp(box.cx(), 0.0, static_cast<double>(frame.width));
  double bcy = std::clamp(box.cy(), 0.0, static_cast<double>(frame.height));
  box = box_from_center(bcx, bcy, bw, bh);

  state.prev_box = box;
  state.last_search_size = crop_size;
  return box;
}


namespace {

// Frozen random 1x1 projection lifting 3-channel pooled features to d channels.
Tensor<float> project_channels(const Tensor<float>& feats, const Tensor<float>& proj) {
  const std::int64_t d = proj.dim(0), h = feats.dim(1), w = feats.dim(2);
  Tensor<float> out({d, h, w});
  for (std::int64_t o = 0; o < d; ++o) {
    for (std::int64_t i = 0; i < h * w; ++i) {
      float acc = 0;
      for (std::int64_t c = 0; c < 3; ++c) acc += proj(o, c) * feats[c * h * w + i];
      out[o * h * w + i] = acc;
    }
  }
  return out;
}

}  // namespace

TrainingPair make_training_pair(std::int64_t d, std::uint32_t seed) {
  if (d < 1) throw std::invalid_argument("make_training_pair: channel count must be >= 1");
  SynthConfig scfg;
  scfg.motion = MotionKind::kTranslate;
  scfg.length = 6;
  scfg.speed = 2.0;
  scfg.seed = seed;
  const auto seq = synth_sequence(scfg);
  const Box& gt0 = seq.gt.front();
  const Box& gt = seq.gt.back();

  std::mt19937 rng(seed + 1);
  Tensor<float> proj({d, 3});
  kaiming_uniform(proj, 3, rng);

  const auto backbone = oracle_backbone();
  const double t_size = 2.0 * std::sqrt(gt0.area());
  const Tensor<float> t_feats =
      project_channels(backbone_forward(backbone, crop_resize(seq.frames.front(), gt0.cx(), gt0.cy(), t_size, 128)),
                       proj);

  // Search crop deliberately off-center so the target is not at the trivial
  // middle cell.
  const double s_size = 4.0 * std::sqrt(gt.area());
  const double cx = gt.cx() + 9.0, cy = gt.cy() - 6.0;
  const Tensor<float> s_feats =
      project_channels(backbone_forward(backbone, crop_resize(seq.frames.back(), cx, cy, s_size, 256)), proj);

  TrainingPair pair;
  pair.corr = normalize_corr(pointwise_xcorr(t_feats, s_feats));
  const std::int64_t hw = t_feats.dim(1) * t_feats.dim(2);
  pair.tcond = Tensor<float>({d});
  for (std::int64_t c = 0; c < d; ++c) {
    float acc = 0;
    for (std::int64_t i = 0; i < hw; ++i) acc += t_feats[c * hw + i];
    pair.tcond[c] = acc / static_cast<float>(hw);
  }
  const double scale = 256.0 / s_size;
  const double x0 = cx - s_size / 2.0, y0 = cy - s_size / 2.0;
  pair.gt_crop = Box{(gt.x1 - x0) * scale, (gt.y1 - y0) * scale, (gt.x2 - x0) * scale, (gt.y2 - y0) * scale};
  return pair;
}

}  // namespace ettk
