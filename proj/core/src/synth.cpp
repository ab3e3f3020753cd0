#include "sardiff/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>

#include "sardiff/image_io.hpp"
#include "sardiff/threading.hpp"

namespace sardiff {

namespace {

constexpr double kMargin = 4.0;

struct Vec2 {
  double x, y;
};

void hsv_to_rgb(float h, float s, float v, float rgb[3]) {
  const float hh = h * 6.0f;
  const int i = static_cast<int>(hh) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

bool point_in_polygon(double u, double v, const Polygon& poly) {
  bool inside = false;
  const auto& pts = poly.points;
  for (size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
    const bool crosses = (pts[i].v > v) != (pts[j].v > v);
    if (crosses) {
      const double x_at =
          pts[j].u + (v - pts[j].v) / (pts[i].v - pts[j].v) * (pts[i].u - pts[j].u);
      if (u < x_at) inside = !inside;
    }
  }
  return inside;
}

}  // namespace

std::vector<AircraftSpec> default_catalog(int canvas) {
  const double k = canvas / 64.0;
  std::vector<AircraftSpec> cat(6);
  cat[0] = {0, "twin-fwd-swept", 36 * k, 6 * k, 30 * k, 0.32, 24.0, 2, 12 * k, 0.00f};
  cat[1] = {1, "twin-aft-straight", 34 * k, 6 * k, 28 * k, 0.62, 6.0, 2, 11 * k, 0.14f};
  cat[2] = {2, "quad-swept", 38 * k, 7 * k, 36 * k, 0.45, 30.0, 4, 13 * k, 0.33f};
  cat[3] = {3, "quad-straight", 34 * k, 9 * k, 30 * k, 0.55, 4.0, 4, 12 * k, 0.55f};
  cat[4] = {4, "twin-widebody", 40 * k, 8 * k, 36 * k, 0.48, 32.0, 2, 13 * k, 0.72f};
  cat[5] = {5, "quad-jumbo", 40 * k, 10 * k, 38 * k, 0.40, 34.0, 4, 14 * k, 0.88f};
  return cat;
}

AircraftGeometry generate_geometry(const AircraftSpec& spec, int canvas, double theta_deg,
                                   Rng& rng) {
  if (spec.fuselage_length <= 0 || spec.fuselage_width <= 0 || spec.wingspan <= 0 ||
      spec.tail_span <= 0)
    throw std::invalid_argument("generate_geometry: non-positive dimensions");
  if (spec.engine_count != 2 && spec.engine_count != 4)
    throw std::invalid_argument("generate_geometry: engine_count must be 2 or 4");

  const double L = spec.fuselage_length;
  const double half = L / 2.0;
  const double w2 = spec.fuselage_width / 2.0;
  const double span2 = spec.wingspan / 2.0;
  const double sweep = std::tan(spec.wing_sweep_deg * M_PI / 180.0);

  // Canonical frame: x along the fuselage toward the nose, y lateral.
  std::vector<Polygon> polys;
  std::vector<Vec2> corners;

  Polygon fuselage;
  fuselage.role = Polygon::kFuselage;
  const double taper = 0.16 * L;
  for (auto [x, y] : {Vec2{half, 0.0}, Vec2{half - taper, w2}, Vec2{-half + 0.12 * L, w2},
                      Vec2{-half, 0.0}, Vec2{-half + 0.12 * L, -w2}, Vec2{half - taper, -w2}})
    fuselage.points.push_back({x, y});
  polys.push_back(fuselage);
  corners.push_back({half, 0.0});   // nose
  corners.push_back({-half, 0.0});  // tail

  const double x_wing = half - spec.wing_position * L;  // leading edge at the root
  const double chord_root = 0.16 * L, chord_tip = 0.08 * L;
  for (int side : {+1, -1}) {
    Polygon wing;
    wing.role = Polygon::kWing;
    const double tip_y = side * span2;
    const double tip_x = x_wing - sweep * (span2 - w2);
    wing.points.push_back({x_wing, side * w2});
    wing.points.push_back({tip_x, tip_y});
    wing.points.push_back({tip_x - chord_tip, tip_y});
    wing.points.push_back({x_wing - chord_root, side * w2});
    polys.push_back(wing);
    corners.push_back({tip_x - chord_tip / 2.0, tip_y});  // wing tip
    corners.push_back({x_wing - chord_root / 2.0, side * w2});  // wing root
  }

  const double tail2 = spec.tail_span / 2.0;
  const double x_tail = -half + 0.14 * L;
  const double tail_chord = 0.09 * L;
  for (int side : {+1, -1}) {
    Polygon tail;
    tail.role = Polygon::kTailplane;
    tail.points.push_back({x_tail, side * w2 * 0.6});
    tail.points.push_back({x_tail - 0.05 * L, side * tail2});
    tail.points.push_back({x_tail - 0.05 * L - tail_chord * 0.7, side * tail2});
    tail.points.push_back({x_tail - tail_chord, side * w2 * 0.6});
    polys.push_back(tail);
    corners.push_back({x_tail - tail_chord / 2.0, side * tail2});
  }

  std::vector<double> engine_fracs =
      spec.engine_count == 2 ? std::vector<double>{0.40} : std::vector<double>{0.30, 0.62};
  const double eng_len = 0.14 * L, eng_w = 0.05 * L;
  for (double frac : engine_fracs)
    for (int side : {+1, -1}) {
      const double ey = side * (w2 + frac * (span2 - w2));
      const double ex = x_wing - sweep * (std::abs(ey) - w2) + 0.04 * L;
      Polygon eng;
      eng.role = Polygon::kEngine;
      eng.points.push_back({ex, ey - eng_w});
      eng.points.push_back({ex, ey + eng_w});
      eng.points.push_back({ex - eng_len, ey + eng_w});
      eng.points.push_back({ex - eng_len, ey - eng_w});
      polys.push_back(eng);
      corners.push_back({ex - eng_len / 2.0, ey});
    }

  // Place on the canvas: rotate to heading theta, jitter the center.
  const double jitter = 1.5 * canvas / 64.0;
  const double cu = (canvas - 1) / 2.0 + rng.uniform(-jitter, jitter);
  const double cv = (canvas - 1) / 2.0 + rng.uniform(-jitter, jitter);
  const double rad = theta_deg * M_PI / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  auto place = [&](const Vec2& p) -> KeypointUV {
    return {cu + p.x * c - p.y * s, cv - (p.x * s + p.y * c)};
  };

  AircraftGeometry g;
  g.canvas = canvas;
  for (auto& poly : polys) {
    Polygon placed;
    placed.role = poly.role;
    for (auto& pt : poly.points) {
      // canonical points were stored as KeypointUV {x, y}
      placed.points.push_back(place({pt.u, pt.v}));
    }
    g.polygons.push_back(placed);
  }
  for (const auto& pt : corners) g.corners.push_back(place(pt));
  g.keypoints.nose = place({half, 0.0});
  g.keypoints.tail = place({-half, 0.0});

  const double lo = kMargin, hi = canvas - 1 - kMargin;
  for (const auto& poly : g.polygons)
    for (const auto& pt : poly.points)
      if (pt.u < lo || pt.u > hi || pt.v < lo || pt.v > hi)
        throw std::runtime_error("generate_geometry: shape overflows the canvas margin");
  return g;
}

Tensor render_optical(const AircraftGeometry& geometry, const AircraftSpec& spec, Rng& rng) {
  const int S = geometry.canvas;
  Tensor img({3, S, S});
  const float bg = 0.42f + static_cast<float>(rng.uniform(-0.03, 0.03));

  // Style per role; engines stay dark gray regardless of category hue.
  float body[3], wing[3], tail[3], engine[3];
  hsv_to_rgb(spec.hue, 0.50f, 0.78f, body);
  hsv_to_rgb(spec.hue, 0.55f, 0.66f, wing);
  hsv_to_rgb(spec.hue, 0.45f, 0.58f, tail);
  engine[0] = engine[1] = engine[2] = 0.22f;

  // Shading gradient along the fuselage axis.
  const double axis_u = geometry.keypoints.nose.u - geometry.keypoints.tail.u;
  const double axis_v = geometry.keypoints.nose.v - geometry.keypoints.tail.v;
  const double axis_len = std::hypot(axis_u, axis_v);
  const double mid_u = (geometry.keypoints.nose.u + geometry.keypoints.tail.u) / 2.0;
  const double mid_v = (geometry.keypoints.nose.v + geometry.keypoints.tail.v) / 2.0;

  const int ss = 4;  // supersampling grid per pixel
  const float inv_samples = 1.0f / (ss * ss);
  for (int v = 0; v < S; ++v)
    for (int u = 0; u < S; ++u) {
      float acc[3] = {0, 0, 0};
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double pu = u + (sx + 0.5) / ss - 0.5;
          const double pv = v + (sy + 0.5) / ss - 0.5;
          const float* color = nullptr;
          // Engines render on top of wings.
          for (const auto& poly : geometry.polygons)
            if (poly.role == Polygon::kEngine && point_in_polygon(pu, pv, poly)) {
              color = engine;
              break;
            }
          if (!color)
            for (const auto& poly : geometry.polygons) {
              if (poly.role == Polygon::kEngine) continue;
              if (point_in_polygon(pu, pv, poly)) {
                color = poly.role == Polygon::kFuselage ? body
                        : poly.role == Polygon::kWing   ? wing
                                                        : tail;
                break;
              }
            }
          if (color) {
            const double proj =
                ((pu - mid_u) * axis_u + (pv - mid_v) * axis_v) / (axis_len * axis_len / 2.0);
            const float shade = static_cast<float>(1.0 + 0.10 * std::clamp(proj, -1.0, 1.0));
            for (int ch = 0; ch < 3; ++ch) acc[ch] += std::min(1.0f, color[ch] * shade);
          } else {
            for (int ch = 0; ch < 3; ++ch) acc[ch] += bg;
          }
        }
      for (int ch = 0; ch < 3; ++ch) {
        const float noisy =
            acc[ch] * inv_samples + static_cast<float>(rng.normal()) * 0.015f;
        img.data()[(static_cast<std::int64_t>(ch) * S + v) * S + u] =
            std::clamp(noisy, 0.0f, 1.0f) * 2.0f - 1.0f;
      }
    }
  return img;
}

Tensor speckle_field(std::vector<int> shape, double looks, Rng& rng) {
  Tensor field(std::move(shape));
  float* p = field.data();
  for (std::int64_t i = 0; i < field.size(); ++i)
    p[i] = static_cast<float>(rng.gamma(looks, 1.0 / looks));
  return field;
}

Tensor render_sar(const AircraftGeometry& geometry, Rng& rng, const SarRenderOptions& opts) {
  const int S = geometry.canvas;
  Tensor img({1, S, S});
  const float bg = 0.06f;
  for (std::int64_t i = 0; i < img.size(); ++i) img.data()[i] = bg;

  // One bright scatterer per structural corner; positions wander slightly.
  struct Blob {
    double u, v, amp;
  };
  std::vector<Blob> blobs;
  for (const auto& c : geometry.corners) {
    Blob b;
    b.u = c.u + rng.uniform(-opts.position_jitter, opts.position_jitter);
    b.v = c.v + rng.uniform(-opts.position_jitter, opts.position_jitter);
    b.amp = rng.uniform(0.55, 1.0);
    blobs.push_back(b);
  }
  const double inv2s2 = 1.0 / (2.0 * opts.blob_sigma * opts.blob_sigma);
  for (int v = 0; v < S; ++v)
    for (int u = 0; u < S; ++u) {
      double val = img.data()[v * S + u];
      for (const auto& b : blobs) {
        const double d2 = (u - b.u) * (u - b.u) + (v - b.v) * (v - b.v);
        if (d2 < 25.0) val += b.amp * std::exp(-d2 * inv2s2);
      }
      img.data()[v * S + u] = static_cast<float>(std::min(val, 1.3));
    }
  if (opts.speckle) {
    Tensor field = speckle_field({1, S, S}, opts.looks, rng);
    for (std::int64_t i = 0; i < img.size(); ++i) img.data()[i] *= field.data()[i];
  }
  for (std::int64_t i = 0; i < img.size(); ++i)
    img.data()[i] = std::min(img.data()[i], 1.0f) * 2.0f - 1.0f;
  return img;
}

DatasetManifest build_dataset(const std::vector<AircraftSpec>& catalog,
                              const BuildDatasetOptions& opts, const std::string& out_dir) {
  std::set<int> ids;
  for (const auto& s : catalog)
    if (!ids.insert(s.category_id).second)
      throw std::invalid_argument("build_dataset: duplicate category id " +
                                  std::to_string(s.category_id));
  const std::set<int> holdout(opts.holdout_categories.begin(), opts.holdout_categories.end());

  std::vector<int> train_cats, all_cats;
  for (const auto& s : catalog) {
    all_cats.push_back(s.category_id);
    if (!holdout.count(s.category_id)) train_cats.push_back(s.category_id);
  }
  if (train_cats.empty()) throw std::invalid_argument("build_dataset: no trainable categories");

  namespace fs = std::filesystem;
  for (const char* sub : {"sar/train", "sar/test", "opt/train", "opt/test"})
    fs::create_directories(fs::path(out_dir) / sub);

  struct Job {
    std::string modality, split;
    int category_id;
    int index;          // within (modality, split)
    std::uint64_t stream;
  };
  std::vector<Job> jobs;
  auto plan = [&](const std::string& modality, const std::string& split, int total,
                  const std::vector<int>& cats, std::uint64_t stream) {
    const int per = total / static_cast<int>(cats.size());
    const int extra = total % static_cast<int>(cats.size());
    if (per < 1) throw std::invalid_argument("build_dataset: counts too small for " + modality +
                                             "/" + split);
    int index = 0;
    for (size_t c = 0; c < cats.size(); ++c) {
      const int n = per + (static_cast<int>(c) < extra ? 1 : 0);
      for (int i = 0; i < n; ++i) jobs.push_back({modality, split, cats[c], index++, stream});
    }
  };
  plan("sar", "train", opts.counts.sar_train, train_cats, 1);
  plan("sar", "test", opts.counts.sar_test, all_cats, 2);
  plan("opt", "train", opts.counts.opt_train, train_cats, 3);
  plan("opt", "test", opts.counts.opt_test, all_cats, 4);

  std::map<int, const AircraftSpec*> by_id;
  for (const auto& s : catalog) by_id[s.category_id] = &s;

  std::vector<ManifestRecord> records(jobs.size());
  parallel_for(static_cast<std::int64_t>(jobs.size()), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t j = lo; j < hi; ++j) {
      const Job& job = jobs[j];
      Rng rng(derive_seed(opts.seed, job.stream, static_cast<std::uint64_t>(job.index)));
      const AircraftSpec& spec = *by_id.at(job.category_id);
      const double theta = rng.uniform(0.0, 360.0);
      AircraftGeometry geo = generate_geometry(spec, opts.canvas, theta, rng);
      Tensor image = job.modality == "sar" ? render_sar(geo, rng) : render_optical(geo, spec, rng);

      char name[128];
      std::snprintf(name, sizeof(name), "%s/%s/%s_%s_%05d.png", job.modality.c_str(),
                    job.split.c_str(), job.modality.c_str(), job.split.c_str(), job.index);
      save_image_tensor((fs::path(out_dir) / name).string(), image);

      ManifestRecord r;
      r.path = name;
      r.modality = job.modality;
      r.split = job.split;
      r.category_id = job.category_id;
      r.category_name = spec.name;
      r.keypoints = geo.keypoints;
      r.theta_deg = keypoints_to_angle(geo.keypoints);
      records[j] = std::move(r);
    }
  });

  DatasetManifest manifest;
  manifest.root_dir = out_dir;
  manifest.records = std::move(records);
  manifest.save((fs::path(out_dir) / "manifest.jsonl").string());
  return manifest;
}

}  // namespace sardiff
