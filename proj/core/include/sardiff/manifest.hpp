#pragma once

#include <string>
#include <vector>

#include "sardiff/keypoints.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff {

struct ManifestRecord {
  std::string path;  // relative to the manifest directory
  std::string modality;  // "sar" | "opt"
  std::string split;     // "train" | "test"
  int category_id = -1;
  std::string category_name;
  KeypointAnnotation keypoints;
  double theta_deg = 0.0;
};

/// JSON-lines dataset index. One record per line, field names fixed:
/// {path, modality, split, category_id, category_name, nose_uv, tail_uv, theta_deg}.
struct DatasetManifest {
  std::string root_dir;  // directory holding the manifest and image files
  std::vector<ManifestRecord> records;

  static DatasetManifest load(const std::string& manifest_path);
  void save(const std::string& manifest_path) const;

  std::vector<const ManifestRecord*> select(const std::string& modality,
                                            const std::string& split) const;
  std::vector<const ManifestRecord*> select_category(const std::string& modality,
                                                     const std::string& split,
                                                     int category_id) const;
  std::string resolve(const ManifestRecord& r) const;

  /// Checks the theta/keypoint consistency invariant on every record.
  void validate() const;
};

Tensor load_record_image(const DatasetManifest& m, const ManifestRecord& r);

}  // namespace sardiff
