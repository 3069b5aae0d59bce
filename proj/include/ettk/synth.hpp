#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ettk/box.hpp"
#include "ettk/image.hpp"

namespace ettk {

enum class MotionKind { kTranslate, kScale, kTurn };

MotionKind motion_from_string(const std::string& s);
const char* motion_name(MotionKind m);

struct SynthConfig {
  MotionKind motion = MotionKind::kTranslate;
  int length = 50;
  std::int64_t frame_width = 320;
  std::int64_t frame_height = 240;
  double target_width = 48;
  double target_height = 36;
  double speed = 2.0;  // px/frame along +x for translate
  std::uint32_t seed = 1;
  // Lets the target leave the frame instead of keeping it >= 1 px inside.
  bool out_of_view = false;

  void validate() const;
};

struct SynthSequence {
  std::vector<Image> frames;
  std::vector<Box> gt;
};

// Deterministic textured target moving over a static textured background.
SynthSequence synth_sequence(const SynthConfig& cfg);

}  // namespace ettk
