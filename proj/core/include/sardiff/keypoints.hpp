#pragma once

#include <optional>

#include "sardiff/tensor.hpp"

namespace sardiff {

struct KeypointUV {
  double u = 0.0;  // rightward
  double v = 0.0;  // downward
};

/// Nose/tail pixel coordinates in the image frame.
struct KeypointAnnotation {
  KeypointUV nose;
  KeypointUV tail;
};

/// Per-keypoint detection grid, values in [0,1], downsampled by `stride`.
struct Heatmap {
  Tensor values;  // [H', W']
  int stride = 4;
};

/// Gaussian target peaked (exactly 1) at the cell nearest the keypoint.
/// kp is in image coordinates; sigma in grid cells. Keypoints landing outside
/// the grid are clamped to the nearest cell with a warning.
Heatmap render_target_heatmap(const KeypointUV& kp, int grid_h, int grid_w, double sigma,
                              int stride);

struct DecodedKeypoint {
  KeypointUV uv;   // image coordinates
  float peak = 0;  // heatmap value at the argmax cell
};

/// Argmax + 3x3 quadratic subpixel refinement, scaled back to image
/// coordinates. Ties resolve to the lowest (v,u) cell. Empty (all-zero)
/// heatmaps yield no detection.
std::optional<DecodedKeypoint> heatmap_to_keypoint(const Heatmap& h);

/// Angle of the tail->nose direction: 0 deg points image-right, increasing
/// counter-clockwise (v axis points down), result in [0, 360).
double keypoints_to_angle(const KeypointUV& nose, const KeypointUV& tail);
double keypoints_to_angle(const KeypointAnnotation& kp);

}  // namespace sardiff
