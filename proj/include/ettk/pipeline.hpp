#pragma once

#include <random>

#include "ettk/head.hpp"
#include "ettk/image.hpp"

namespace ettk {

enum class BackboneKind { kToy, kOracle };

// Stride-16 feature extractor. The toy variant is four conv+BN+ReLU blocks of
// stride 2 (3 -> 32 -> 64 -> 96 -> 128 channels); it is not a pretrained
// production backbone and is labeled "toy" everywhere. The oracle variant
// average-pools raw pixels to stride 16 and removes the per-channel mean, so
// pipeline geometry is testable without any training.
struct BackboneParams {
  BackboneKind kind = BackboneKind::kOracle;
  struct Block {
    Tensor<float> kernel;  // C_out x C_in x 3 x 3, stride 2, pad 1
    Tensor<float> bias;
    BatchNormParams<float> bn;
  };
  std::vector<Block> blocks;

  std::int64_t out_channels() const {
    return kind == BackboneKind::kOracle ? 3 : blocks.back().kernel.dim(0);
  }
  static constexpr std::int64_t stride() { return 16; }
};

BackboneParams init_toy_backbone(std::mt19937& rng);
BackboneParams oracle_backbone();

// img: 3 x H x W in [0,1], H and W divisible by 16.
Tensor<float> backbone_forward(const BackboneParams& p, const Tensor<float>& img);

// Axis-aligned square crop centered at (cx, cy) with side `size`, mean-padded
// outside the frame, bilinearly resized to out_px. Values scaled to [0,1].
Tensor<float> crop_resize(const Image& frame, double cx, double cy, double size, std::int64_t out_px);

struct TrackerParams {
  BackboneParams backbone;
  HeadParams<float> head;
  // Correlation-peak box proposer that replaces the learned head; the
  // geometry-test configuration paired with the oracle backbone.
  bool oracle_head = false;
  PenaltyConfig penalty;
  std::int64_t template_px = 128;
  std::int64_t search_px = 256;
  double template_context = 2.0;
  double search_context = 4.0;
};

struct TrackState {
  Tensor<float> template_features;  // D x 8 x 8
  Tensor<float> template_vector;    // D, channel means (template conditioning)
  Box prev_box;
  double last_search_size = 0;  // frame px of the most recent search crop
};

TrackState tracker_init(const Image& frame, const Box& gt, const TrackerParams& params);
// Advances the state by one frame and returns the predicted box.
Box tracker_update(TrackState& state, const Image& frame, const TrackerParams& params);

// Correlation-peak proposer: classification logits from the z-scored channel
// sum of the correlation map, boxes of the previous target size placed at the
// centroid-refined peak.
HeadOutput<float> oracle_head_forward(const Tensor<float>& corr, const Box& prev_in_crop,
                                      std::int64_t template_h = 8, std::int64_t template_w = 8);

// One template/search correlation map with its target, for head training at
// any channel width: synthetic frames, stride-16 pooled features, and a frozen
// random 1x1 projection from 3 to d channels.
struct TrainingPair {
  Tensor<float> corr;   // d x 16 x 16
  Tensor<float> tcond;  // d, template channel means
  Box gt_crop;          // target in search-crop coordinates
  double stride = 16.0;
};

TrainingPair make_training_pair(std::int64_t d, std::uint32_t seed);

// Correlation-map normalization used between pointwise_xcorr and the learned
// head (the oracle proposer z-scores internally).
Tensor<float> normalize_corr(const Tensor<float>& corr);

}  // namespace ettk
