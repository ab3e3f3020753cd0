#pragma once

#include <optional>

#include "sardiff/tensor.hpp"

namespace sardiff {

/// Reduce an angle in degrees into [0, 360).
double normalize_angle_deg(double deg);

/// Conditioning triple for the denoiser: SAR image, class id, azimuth angle.
/// Absent components select learned null embeddings, never zeroed data.
struct ConditionSet {
  std::optional<Tensor> sar;        // [1,H,W], values in [-1,1]
  std::optional<int> class_id;      // [0, n_classes)
  std::optional<double> angle_deg;  // [0, 360)

  ConditionSet() = default;
  ConditionSet(std::optional<Tensor> sar_img, std::optional<int> cls, std::optional<double> angle)
      : sar(std::move(sar_img)), class_id(cls) {
    if (angle) angle_deg = normalize_angle_deg(*angle);
  }

  static ConditionSet null_condition() { return ConditionSet(); }
  bool is_null() const { return !sar && !class_id && !angle_deg; }
};

}  // namespace sardiff
