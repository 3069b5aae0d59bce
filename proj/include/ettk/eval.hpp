#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "ettk/box.hpp"
#include "ettk/head.hpp"

namespace ettk {

// Mean logistic cross-entropy of raw logits against the {0,1} mask,
// evaluated over every pixel.
template <typename T>
T bce_loss(const Tensor<T>& logits, const Tensor<T>& fg_mask) {
  if (logits.shape() != fg_mask.shape()) {
    throw std::invalid_argument("bce_loss: logits shape " + shape_str(logits.shape()) + " does not match mask " +
                                shape_str(fg_mask.shape()));
  }
  T sum = 0;
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    const T z = logits[i], y = fg_mask[i];
    sum += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return sum / static_cast<T>(logits.numel());
}

template <typename T>
Tensor<T> bce_loss_backward(const Tensor<T>& logits, const Tensor<T>& fg_mask, T grad = T(1)) {
  Tensor<T> dz(logits.shape());
  const T inv_n = grad / static_cast<T>(logits.numel());
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    const T p = T(1) / (T(1) + std::exp(-logits[i]));
    dz[i] = (p - fg_mask[i]) * inv_n;
  }
  return dz;
}

template <typename T>
struct IouLossResult {
  T value = 0;
  bool empty_mask = false;
};

namespace detail {

template <typename T>
void check_ltrb_inputs(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
  if (pred.rank() != 3 || pred.dim(0) != 4) throw std::invalid_argument("iou_loss: pred must be 4xHxW");
  if (pred.shape() != gt.shape()) throw std::invalid_argument("iou_loss: pred/gt shape mismatch");
  if (mask.rank() != 3 || mask.dim(0) != 1 || mask.dim(1) != pred.dim(1) || mask.dim(2) != pred.dim(2)) {
    throw std::invalid_argument("iou_loss: mask must be 1xHxW matching pred");
  }
}

}  // namespace detail

// Mean over masked pixels of -ln(IoU) between the predicted and target
// distance-to-sides boxes. Zero when predictions match the targets.
template <typename T>
IouLossResult<T> iou_loss(const Tensor<T>& pred_ltrb, const Tensor<T>& gt_ltrb, const Tensor<T>& fg_mask) {
  detail::check_ltrb_inputs(pred_ltrb, gt_ltrb, fg_mask);
  const std::int64_t h = pred_ltrb.dim(1), w = pred_ltrb.dim(2);
  T sum = 0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      if (fg_mask(0, i, j) == T(0)) continue;
      const T pl = pred_ltrb(0, i, j), pt = pred_ltrb(1, i, j), pr = pred_ltrb(2, i, j), pb = pred_ltrb(3, i, j);
      const T gl = gt_ltrb(0, i, j), gt = gt_ltrb(1, i, j), gr = gt_ltrb(2, i, j), gb = gt_ltrb(3, i, j);
      if (pl <= T(0) || pt <= T(0) || pr <= T(0) || pb <= T(0) || gl <= T(0) || gt <= T(0) || gr <= T(0) ||
          gb <= T(0)) {
        throw std::invalid_argument("iou_loss: distances at masked pixels must be positive (pixel " +
                                    std::to_string(i) + "," + std::to_string(j) + ")");
      }
      const T iw = std::min(pl, gl) + std::min(pr, gr);
      const T ih = std::min(pt, gt) + std::min(pb, gb);
      const T inter = iw * ih;
      const T uni = (pl + pr) * (pt + pb) + (gl + gr) * (gt + gb) - inter;
      sum += std::log(uni) - std::log(inter);
      ++count;
    }
  }
  if (count == 0) return {T(0), true};
  return {sum / static_cast<T>(count), false};
}

template <typename T>
Tensor<T> iou_loss_backward(const Tensor<T>& pred_ltrb, const Tensor<T>& gt_ltrb, const Tensor<T>& fg_mask,
                            T grad = T(1)) {
  detail::check_ltrb_inputs(pred_ltrb, gt_ltrb, fg_mask);
  const std::int64_t h = pred_ltrb.dim(1), w = pred_ltrb.dim(2);
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < h * w; ++i) count += fg_mask[i] != T(0) ? 1 : 0;
  Tensor<T> dpred(pred_ltrb.shape());
  if (count == 0) return dpred;
  const T g = grad / static_cast<T>(count);
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      if (fg_mask(0, i, j) == T(0)) continue;
      const T p[4] = {pred_ltrb(0, i, j), pred_ltrb(1, i, j), pred_ltrb(2, i, j), pred_ltrb(3, i, j)};
      const T q[4] = {gt_ltrb(0, i, j), gt_ltrb(1, i, j), gt_ltrb(2, i, j), gt_ltrb(3, i, j)};
      const T iw = std::min(p[0], q[0]) + std::min(p[2], q[2]);
      const T ih = std::min(p[1], q[1]) + std::min(p[3], q[3]);
      const T inter = iw * ih;
      const T uni = (p[0] + p[2]) * (p[1] + p[3]) + (q[0] + q[2]) * (q[1] + q[3]) - inter;
      for (int c = 0; c < 4; ++c) {
        const bool horizontal = (c == 0 || c == 2);
        const T darea = horizontal ? (p[1] + p[3]) : (p[0] + p[2]);
        const T dinter = (p[c] < q[c]) ? (horizontal ? ih : iw) : T(0);
        const T duni = darea - dinter;
        dpred(c, i, j) = g * (duni / uni - dinter / inter);
      }
    }
  }
  return dpred;
}

template <typename T>
struct TotalLoss {
  T value = 0;
  T bce = 0;
  T iou = 0;
  bool empty_mask = false;
};

template <typename T>
TotalLoss<T> total_loss(const Tensor<T>& cls_logits, const Tensor<T>& pred_ltrb, const Tensor<T>& gt_ltrb,
                        const Tensor<T>& fg_mask, T lambda = T(1)) {
  TotalLoss<T> r;
  r.bce = bce_loss(cls_logits, fg_mask);
  const auto il = iou_loss(pred_ltrb, gt_ltrb, fg_mask);
  r.iou = il.value;
  r.empty_mask = il.empty_mask;
  r.value = r.bce + lambda * r.iou;
  return r;
}

// --- one-pass evaluation metrics --------------------------------------------

inline constexpr int kSuccessGridSize = 21;  // thresholds 0, 0.05, ..., 1.0
inline constexpr double kPrecisionRadiusPx = 20.0;

// Mean over the threshold grid of the fraction of frames with IoU >= t.
inline double success_auc(const std::vector<double>& ious) {
  if (ious.empty()) throw std::invalid_argument("success_auc: empty IoU list");
  std::vector<double> sorted(ious);
  std::sort(sorted.begin(), sorted.end());
  double acc = 0;
  for (int k = 0; k < kSuccessGridSize; ++k) {
    const double tau = static_cast<double>(k) / 20.0;
    const auto lo = std::lower_bound(sorted.begin(), sorted.end(), tau);
    acc += static_cast<double>(sorted.end() - lo) / static_cast<double>(sorted.size());
  }
  return acc / static_cast<double>(kSuccessGridSize);
}

inline double precision_at(const std::vector<double>& center_errs, double radius_px = kPrecisionRadiusPx) {
  if (center_errs.empty()) throw std::invalid_argument("precision_at: empty error list");
  std::int64_t hits = 0;
  for (double e : center_errs) hits += e <= radius_px ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(center_errs.size());
}

inline double average_overlap(const std::vector<double>& ious) {
  if (ious.empty()) throw std::invalid_argument("average_overlap: empty IoU list");
  double s = 0;
  for (double v : ious) s += v;
  return s / static_cast<double>(ious.size());
}

struct FrameResult {
  int frame = 0;
  Box pred, gt;
  double iou = 0;
  double center_err = 0;
};

struct SequenceResult {
  std::vector<FrameResult> frames;
  double ao = 0;
  double auc = 0;
  double precision = 0;
};

inline SequenceResult summarize_sequence(const std::vector<Box>& preds, const std::vector<Box>& gts) {
  if (preds.size() != gts.size() || preds.empty()) {
    throw std::invalid_argument("summarize_sequence: prediction/ground-truth counts must match and be nonempty");
  }
  SequenceResult r;
  std::vector<double> ious, errs;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    FrameResult f;
    f.frame = static_cast<int>(i);
    f.pred = preds[i];
    f.gt = gts[i];
    f.iou = iou(preds[i], gts[i]);
    f.center_err = center_error(preds[i], gts[i]);
    ious.push_back(f.iou);
    errs.push_back(f.center_err);
    r.frames.push_back(f);
  }
  r.ao = average_overlap(ious);
  r.auc = success_auc(ious);
  r.precision = precision_at(errs);
  return r;
}

void write_sequence_csv(const std::string& path, const SequenceResult& r);
void write_summary_json(const std::string& path, const SequenceResult& r);

// --- toy trainer --------------------------------------------------------------

// Plain SGD with momentum on the combined BCE + IoU loss for one fixed
// correlation map and target. Returns the per-step loss trace. BN statistics
// and affine parameters stay frozen; only tensors marked trainable move.
template <typename T>
std::vector<T> toy_train(HeadParams<T>& head, const Tensor<T>& corr, std::type_identity_t<const Tensor<T>*> tcond,
                         const Box& gt_crop, double stride, int steps, T lr, T momentum = T(0.9), T lambda = T(1)) {
  if (steps < 1) throw std::invalid_argument("toy_train: steps must be >= 1");
  const std::int64_t h = corr.dim(1), w = corr.dim(2);
  const EncodedTarget<T> target = encode_ltrb<T>(gt_crop, h, w, stride);

  std::vector<Tensor<T>*> params;
  visit_params(head, "head", [&](const std::string&, Tensor<T>& t, bool trainable) {
    if (trainable) params.push_back(&t);
  });
  std::vector<Tensor<T>> velocity;
  velocity.reserve(params.size());
  for (auto* p : params) velocity.emplace_back(p->shape());

  std::vector<T> trace;
  trace.reserve(static_cast<std::size_t>(steps) + 1);
  T blowup_bar = 0;
  for (int step = 0; step < steps; ++step) {
    HeadCache<T> cache;
    HeadOutput<T> out = head_forward(corr, head, tcond, &cache);
    const TotalLoss<T> loss = total_loss(out.cls_logits, out.ltrb, target.ltrb, target.fg_mask, lambda);
    if (step == 0) blowup_bar = T(100) * (std::abs(loss.value) + T(1));
    if (!std::isfinite(loss.value) || loss.value > blowup_bar) {
      throw numeric_error("toy_train: loss diverged to " + std::to_string(loss.value) + " at step " +
                          std::to_string(step));
    }
    trace.push_back(loss.value);

    Tensor<T> dcls = bce_loss_backward(out.cls_logits, target.fg_mask);
    Tensor<T> dltrb = iou_loss_backward(out.ltrb, target.ltrb, target.fg_mask, lambda);
    HeadGrads<T> grads = head_backward(dcls, dltrb, head, cache);

    std::vector<Tensor<T>*> gptrs;
    visit_grads(grads, head, "head", [&](const std::string&, Tensor<T>& t, bool) { gptrs.push_back(&t); });
    if (gptrs.size() != params.size()) throw std::logic_error("toy_train: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& v = velocity[i];
      Tensor<T>& p = *params[i];
      const Tensor<T>& g = *gptrs[i];
      for (std::int64_t k = 0; k < p.numel(); ++k) {
        v[k] = momentum * v[k] + g[k];
        p[k] -= lr * v[k];
      }
    }
  }
  // Loss after the final update, so trace.back() reflects the trained head.
  const HeadOutput<T> out = head_forward(corr, head, tcond);
  const TotalLoss<T> final_loss = total_loss(out.cls_logits, out.ltrb, target.ltrb, target.fg_mask, lambda);
  if (!std::isfinite(final_loss.value)) throw numeric_error("toy_train: loss diverged after the final step");
  trace.push_back(final_loss.value);
  return trace;
}

}  // namespace ettk
