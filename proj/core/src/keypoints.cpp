#include "sardiff/keypoints.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "sardiff/diffusion.hpp"  // normalize_angle_deg

namespace sardiff {

Heatmap render_target_heatmap(const KeypointUV& kp, int grid_h, int grid_w, double sigma,
                              int stride) {
  if (sigma <= 0.0) throw std::invalid_argument("render_target_heatmap: sigma must be > 0");
  if (grid_h < 1 || grid_w < 1 || stride < 1)
    throw std::invalid_argument("render_target_heatmap: bad grid");
  double u0 = kp.u / stride;
  double v0 = kp.v / stride;
  if (u0 < 0.0 || u0 > grid_w - 1.0 || v0 < 0.0 || v0 > grid_h - 1.0) {
    std::fprintf(stderr, "render_target_heatmap: keypoint (%.2f, %.2f) outside grid, clamped\n",
                 kp.u, kp.v);
    u0 = std::clamp(u0, 0.0, grid_w - 1.0);
    v0 = std::clamp(v0, 0.0, grid_h - 1.0);
  }
  Heatmap h;
  h.stride = stride;
  h.values = Tensor({grid_h, grid_w});
  const double inv = 1.0 / (2.0 * sigma * sigma);
  double peak = 0.0;
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx) {
      const double d2 = (gx - u0) * (gx - u0) + (gy - v0) * (gy - v0);
      const double val = std::exp(-d2 * inv);
      h.values.data()[gy * grid_w + gx] = static_cast<float>(val);
      peak = std::max(peak, val);
    }
  // Scale so the cell nearest the keypoint reads exactly 1.
  const float scale = static_cast<float>(1.0 / peak);
  for (std::int64_t i = 0; i < h.values.size(); ++i) h.values.data()[i] *= scale;
  return h;
}

std::optional<DecodedKeypoint> heatmap_to_keypoint(const Heatmap& h) {
  const int grid_h = h.values.dim(0), grid_w = h.values.dim(1);
  const float* p = h.values.data();
  int best = 0;
  float best_val = p[0];
  for (int i = 1; i < grid_h * grid_w; ++i)
    if (p[i] > best_val) {  // strict: ties keep the first (lowest v, then u)
      best_val = p[i];
      best = i;
    }
  if (best_val <= 0.0f) return std::nullopt;
  const int gy = best / grid_w, gx = best % grid_w;

  auto refine = [&](int lo_ok, int hi_ok, float left, float center, float right) -> double {
    if (!lo_ok || !hi_ok) return 0.0;
    const double den = static_cast<double>(left) - 2.0 * center + right;
    if (std::abs(den) < 1e-12) return 0.0;
    return std::clamp(0.5 * (left - right) / den, -0.5, 0.5);
  };
  const double du = refine(gx > 0, gx < grid_w - 1, gx > 0 ? p[gy * grid_w + gx - 1] : 0.0f,
                           best_val, gx < grid_w - 1 ? p[gy * grid_w + gx + 1] : 0.0f);
  const double dv = refine(gy > 0, gy < grid_h - 1, gy > 0 ? p[(gy - 1) * grid_w + gx] : 0.0f,
                           best_val, gy < grid_h - 1 ? p[(gy + 1) * grid_w + gx] : 0.0f);
  DecodedKeypoint out;
  out.uv.u = (gx + du) * h.stride;
  out.uv.v = (gy + dv) * h.stride;
  out.peak = best_val;
  return out;
}

double keypoints_to_angle(const KeypointUV& nose, const KeypointUV& tail) {
  const double du = nose.u - tail.u;
  const double dv = nose.v - tail.v;
  if (du == 0.0 && dv == 0.0)
    throw std::invalid_argument("keypoints_to_angle: coincident nose and tail");
  const double rad = std::atan2(-dv, du);
  return normalize_angle_deg(rad * 180.0 / M_PI);
}

double keypoints_to_angle(const KeypointAnnotation& kp) {
  return keypoints_to_angle(kp.nose, kp.tail);
}

}  // namespace sardiff
