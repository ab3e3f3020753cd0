#pragma once

#include <utility>
#include <vector>

#include "sardiff/keypoints.hpp"
#include "sardiff/manifest.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff {

/// Corner fill for rotation: constant color taken as the per-channel median
/// of the 4-pixel-wide border ring, or a fixed value.
struct FillPolicy {
  bool border_median = true;
  float constant = 0.0f;
};

/// Rotate CHW image and keypoints about the image center by delta degrees
/// (counter-clockwise, v down). Bilinear resampling; exact index permutation
/// at multiples of 90 on square images.
std::pair<Tensor, KeypointAnnotation> rotate_with_padding(const Tensor& image,
                                                          const KeypointAnnotation& keypoints,
                                                          double delta_deg,
                                                          const FillPolicy& fill = {});

struct AugmentationPolicy {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_rot = 0.5;
  double rot_range_deg = 30.0;
};

std::pair<Tensor, KeypointAnnotation> augment(const Tensor& image,
                                              const KeypointAnnotation& keypoints,
                                              const AugmentationPolicy& policy, Rng& rng);

/// Category-matched SAR/optical pair with the optical slice rotated into the
/// SAR orientation.
struct PseudoPair {
  Tensor sar;                      // [1,H,W]
  KeypointAnnotation sar_keypoints;
  Tensor opt_aligned;              // [3,H,W]
  KeypointAnnotation opt_keypoints;
  int category_id = -1;
  double delta_applied = 0.0;      // degrees applied to the optical slice
};

/// Uniformly samples a same-category optical record from the pool and aligns
/// it to the SAR record's orientation. Callers re-sample every epoch.
PseudoPair build_pseudo_pair(const ManifestRecord& sar_record, const DatasetManifest& manifest,
                             const std::vector<const ManifestRecord*>& opt_pool, Rng& rng,
                             bool rotate_align = true);

}  // namespace sardiff
