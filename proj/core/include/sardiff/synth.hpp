#pragma once

#include <string>
#include <vector>

#include "sardiff/keypoints.hpp"
#include "sardiff/manifest.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff {

/// Parametric description of one synthetic aircraft category. Pixel units
/// refer to the configured canvas size.
struct AircraftSpec {
  int category_id = -1;
  std::string name;
  double fuselage_length = 0;  // px
  double fuselage_width = 0;   // px
  double wingspan = 0;         // px
  double wing_position = 0;    // fraction along fuselage from the nose, [0,1]
  double wing_sweep_deg = 0;
  int engine_count = 2;        // 2 or 4
  double tail_span = 0;        // px
  float hue = 0.0f;            // [0,1) paint hue for the optical rendering
};

/// Six-category catalog spanning the engine-count x wing-position x sweep
/// grid; the last two entries are reserved for zero-shot holdout.
std::vector<AircraftSpec> default_catalog(int canvas);

struct Polygon {
  enum Role { kFuselage, kWing, kTailplane, kEngine };
  std::vector<KeypointUV> points;
  Role role = kFuselage;
};

struct AircraftGeometry {
  std::vector<Polygon> polygons;       // fuselage, wings, tailplane, engines
  std::vector<KeypointUV> corners;     // scattering centers for the SAR render
  KeypointAnnotation keypoints;        // nose / tail
  int canvas = 0;
};

/// Places the aircraft at heading theta (0 = nose right, CCW positive) around
/// the jittered canvas center. Throws if the shape would overflow the canvas
/// margin.
AircraftGeometry generate_geometry(const AircraftSpec& spec, int canvas, double theta_deg,
                                   Rng& rng);

/// Anti-aliased colored rendering on a runway-gray background, [3,S,S] in [-1,1].
Tensor render_optical(const AircraftGeometry& geometry, const AircraftSpec& spec, Rng& rng);

struct SarRenderOptions {
  double looks = 1.5;       // gamma shape of the multiplicative speckle
  bool speckle = true;
  double blob_sigma = 1.3;  // px
  double position_jitter = 1.0;
};

/// Scatter-blob rendering with multiplicative speckle, [1,S,S] in [-1,1].
Tensor render_sar(const AircraftGeometry& geometry, Rng& rng, const SarRenderOptions& opts = {});

/// Unit-mean multiplicative gamma field.
Tensor speckle_field(std::vector<int> shape, double looks, Rng& rng);

struct DatasetCounts {
  int sar_train = 300;
  int sar_test = 60;
  int opt_train = 300;
  int opt_test = 60;
};

struct BuildDatasetOptions {
  int canvas = 64;
  DatasetCounts counts;
  std::vector<int> holdout_categories = {4, 5};  // test-only; never trained on
  std::uint64_t seed = 0;
};

/// Generates images + manifest.jsonl under out_dir. SAR and optical azimuths
/// are drawn independently, so the modalities stay unpaired by construction.
DatasetManifest build_dataset(const std::vector<AircraftSpec>& catalog,
                              const BuildDatasetOptions& opts, const std::string& out_dir);

}  // namespace sardiff
