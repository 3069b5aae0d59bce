#include "ettk/synth.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace ettk {

MotionKind motion_from_string(const std::string& s) {
  if (s == "translate") return MotionKind::kTranslate;
  if (s == "scale") return MotionKind::kScale;
  if (s == "turn") return MotionKind::kTurn;
  throw std::invalid_argument("unknown motion kind '" + s + "' (expected translate, scale or turn)");
}

const char* motion_name(MotionKind m) {
  switch (m) {
    case MotionKind::kTranslate: return "translate";
    case MotionKind::kScale: return "scale";
    case MotionKind::kTurn: return "turn";
  }
  return "?";
}

void SynthConfig::validate() const {
  if (length < 1) throw std::invalid_argument("synth: length must be >= 1");
  if (frame_width < 32 || frame_height < 32) throw std::invalid_argument("synth: frame must be at least 32x32");
  if (target_width < 8 || target_height < 8) throw std::invalid_argument("synth: target must be at least 8x8");
  if (target_width >= frame_width / 2.0 || target_height >= frame_height / 2.0) {
    throw std::invalid_argument("synth: target must be smaller than half the frame");
  }
  if (speed < 0) throw std::invalid_argument("synth: speed must be >= 0");
}

namespace {

// Small random tile sampled bilinearly; tiles are generated once per sequence
// so appearance is constant across frames.
struct Texture {
  std::int64_t n = 0;
  std::vector<double> data;  // n*n*3 in [0,1]

  static Texture random(std::int64_t n, std::mt19937& rng, double lo, double hi) {
    Texture t;
    t.n = n;
    t.data.resize(static_cast<std::size_t>(n * n * 3));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data) v = dist(rng);
    return t;
  }

  // u, v in [0,1); clamped bilinear sample.
  void sample(double u, double v, double out[3]) const {
    const double fx = std::clamp(u, 0.0, 1.0) * static_cast<double>(n - 1);
    const double fy = std::clamp(v, 0.0, 1.0) * static_cast<double>(n - 1);
    const std::int64_t x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy);
    const std::int64_t x1 = std::min(x0 + 1, n - 1), y1 = std::min(y0 + 1, n - 1);
    const double ax = fx - static_cast<double>(x0), ay = fy - static_cast<double>(y0);
    for (int c = 0; c < 3; ++c) {
      const double v00 = data[static_cast<std::size_t>((y0 * n + x0) * 3 + c)];
      const double v01 = data[static_cast<std::size_t>((y0 * n + x1) * 3 + c)];
      const double v10 = data[static_cast<std::size_t>((y1 * n + x0) * 3 + c)];
      const double v11 = data[static_cast<std::size_t>((y1 * n + x1) * 3 + c)];
      out[c] = (1 - ay) * ((1 - ax) * v00 + ax * v01) + ay * ((1 - ax) * v10 + ax * v11);
    }
  }
};

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5); }

}  // namespace

SynthSequence synth_sequence(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937 rng(cfg.seed);
  // Dark-ish background, bright target: keeps the target distinctive without
  // being trivially uniform.
  const Texture background = Texture::random(24, rng, 0.05, 0.45);
  const Texture target = Texture::random(12, rng, 0.55, 1.0);

  const double margin = 1.0;
  const double half_w0 = cfg.target_width / 2.0, half_h0 = cfg.target_height / 2.0;
  const double start_cx = margin + half_w0 + 8.0;
  const double cy0 = static_cast<double>(cfg.frame_height) / 2.0;

  SynthSequence seq;
  seq.frames.reserve(static_cast<std::size_t>(cfg.length));
  seq.gt.reserve(static_cast<std::size_t>(cfg.length));

  // Static background rendered once.
  Image bg_frame(cfg.frame_height, cfg.frame_width);
  for (std::int64_t y = 0; y < cfg.frame_height; ++y) {
    for (std::int64_t x = 0; x < cfg.frame_width; ++x) {
      double px[3];
      background.sample(static_cast<double>(x) / static_cast<double>(cfg.frame_width - 1),
                        static_cast<double>(y) / static_cast<double>(cfg.frame_height - 1), px);
      for (int c = 0; c < 3; ++c) bg_frame.at(y, x, c) = to_u8(px[c]);
    }
  }

  const double denom = cfg.length > 1 ? static_cast<double>(cfg.length - 1) : 1.0;
  for (int t = 0; t < cfg.length; ++t) {
    double cx = start_cx, cy = cy0, hw = half_w0, hh = half_h0, angle = 0.0;
    switch (cfg.motion) {
      case MotionKind::kTranslate:
        cx = start_cx + cfg.speed * static_cast<double>(t);
        break;
      case MotionKind::kScale: {
        // Area shrinks linearly to half over the sequence.
        const double f = std::sqrt(1.0 - 0.5 * static_cast<double>(t) / denom);
        cx = static_cast<double>(cfg.frame_width) / 2.0;
        hw = half_w0 * f;
        hh = half_h0 * f;
        break;
      }
      case MotionKind::kTurn:
        cx = static_cast<double>(cfg.frame_width) / 2.0;
        angle = M_PI * static_cast<double>(t) / denom;
        break;
    }
    if (!cfg.out_of_view) {
      cx = std::clamp(cx, hw + margin, static_cast<double>(cfg.frame_width) - hw - margin);
      cy = std::clamp(cy, hh + margin, static_cast<double>(cfg.frame_height) - hh - margin);
    }
    const Box gt{cx - hw, cy - hh, cx + hw, cy + hh};

    Image frame = bg_frame;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const std::int64_t x_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(gt.x1)));
    const std::int64_t x_hi = std::min(cfg.frame_width - 1, static_cast<std::int64_t>(std::ceil(gt.x2)));
    const std::int64_t y_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(gt.y1)));
    const std::int64_t y_hi = std::min(cfg.frame_height - 1, static_cast<std::int64_t>(std::ceil(gt.y2)));
    for (std::int64_t y = y_lo; y <= y_hi; ++y) {
      for (std::int64_t x = x_lo; x <= x_hi; ++x) {
        const double px_c = static_cast<double>(x) + 0.5, py_c = static_cast<double>(y) + 0.5;
        if (px_c <= gt.x1 || px_c >= gt.x2 || py_c <= gt.y1 || py_c >= gt.y2) continue;
        // Target-local coordinates, rotated for the turn motion.
        const double dx = (px_c - cx) / (2.0 * hw), dy = (py_c - cy) / (2.0 * hh);
        const double u = ca * dx + sa * dy + 0.5;
        const double v = -sa * dx + ca * dy + 0.5;
        double px[3];
        target.sample(u, v, px);
        for (int c = 0; c < 3; ++c) frame.at(y, x, c) = to_u8(px[c]);
      }
    }
    seq.frames.push_back(std::move(frame));
    seq.gt.push_back(gt);
  }
  return seq;
}

}  // namespace ettk
