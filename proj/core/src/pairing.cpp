#include "sardiff/pairing.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "sardiff/diffusion.hpp"  // normalize_angle_deg
#include "sardiff/image_io.hpp"

namespace sardiff {

namespace {

// Rotation of (u, v) offsets, counter-clockwise for v pointing down.
KeypointUV rotate_point(const KeypointUV& p, double cu, double cv, double cos_d, double sin_d) {
  const double du = p.u - cu, dv = p.v - cv;
  return {cu + cos_d * du + sin_d * dv, cv - sin_d * du + cos_d * dv};
}

float border_median(const Tensor& image, int channel, int ring) {
  const int H = image.dim(1), W = image.dim(2);
  std::vector<float> vals;
  vals.reserve(2 * ring * (H + W));
  const float* p = image.data() + static_cast<std::int64_t>(channel) * H * W;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (y < ring || y >= H - ring || x < ring || x >= W - ring)
        vals.push_back(p[y * W + x]);
  const size_t mid = vals.size() / 2;
  std::nth_element(vals.begin(), vals.begin() + mid, vals.end());
  return vals[mid];
}

bool near_multiple_of_90(double deg, int& quarter) {
  const double q = deg / 90.0;
  const double rounded = std::round(q);
  if (std::abs(q - rounded) < 1e-9) {
    quarter = static_cast<int>(std::fmod(std::fmod(rounded, 4.0) + 4.0, 4.0));
    return true;
  }
  return false;
}

}  // namespace

std::pair<Tensor, KeypointAnnotation> rotate_with_padding(const Tensor& image,
                                                          const KeypointAnnotation& keypoints,
                                                          double delta_deg,
                                                          const FillPolicy& fill) {
  if (image.ndim() != 3) throw std::invalid_argument("rotate_with_padding: expects CHW");
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const double cu = (W - 1) / 2.0, cv = (H - 1) / 2.0;
  const double rad = delta_deg * M_PI / 180.0;
  const double cos_d = std::cos(rad), sin_d = std::sin(rad);

  KeypointAnnotation out_kp;
  out_kp.nose = rotate_point(keypoints.nose, cu, cv, cos_d, sin_d);
  out_kp.tail = rotate_point(keypoints.tail, cu, cv, cos_d, sin_d);

  int quarter = 0;
  if (near_multiple_of_90(delta_deg, quarter) && (quarter == 0 || H == W)) {
    if (quarter == 0) return {image.clone(), keypoints};
    // Exact permutation on square canvases.
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c) {
      const float* src = image.data() + static_cast<std::int64_t>(c) * H * W;
      float* dst = out.data() + static_cast<std::int64_t>(c) * H * W;
      for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u) {
          int su = u, sv = v;  // source pixel = inverse rotation of (u, v)
          switch (quarter) {
            case 1: su = H - 1 - v; sv = u; break;          // 90 ccw
            case 2: su = W - 1 - u; sv = H - 1 - v; break;  // 180
            case 3: su = v; sv = W - 1 - u; break;          // 270 ccw
          }
          dst[v * W + u] = src[sv * W + su];
        }
    }
    return {out, out_kp};
  }

  Tensor out({C, H, W});
  for (int c = 0; c < C; ++c) {
    const float pad = fill.border_median ? border_median(image, c, 4) : fill.constant;
    const float* src = image.data() + static_cast<std::int64_t>(c) * H * W;
    float* dst = out.data() + static_cast<std::int64_t>(c) * H * W;
    for (int v = 0; v < H; ++v)
      for (int u = 0; u < W; ++u) {
        // Inverse map: rotate output coordinates by -delta.
        const double du = u - cu, dv = v - cv;
        const double su = cu + cos_d * du - sin_d * dv;
        const double sv = cv + sin_d * du + cos_d * dv;
        float val = pad;
        if (su >= 0.0 && su <= W - 1.0 && sv >= 0.0 && sv <= H - 1.0) {
          const int u0 = static_cast<int>(std::floor(su));
          const int v0 = static_cast<int>(std::floor(sv));
          const int u1 = std::min(u0 + 1, W - 1);
          const int v1 = std::min(v0 + 1, H - 1);
          const double fu = su - u0, fv = sv - v0;
          val = static_cast<float>((1 - fv) * ((1 - fu) * src[v0 * W + u0] + fu * src[v0 * W + u1]) +
                                   fv * ((1 - fu) * src[v1 * W + u0] + fu * src[v1 * W + u1]));
        }
        dst[v * W + u] = val;
      }
  }
  return {out, out_kp};
}

std::pair<Tensor, KeypointAnnotation> augment(const Tensor& image,
                                              const KeypointAnnotation& keypoints,
                                              const AugmentationPolicy& policy, Rng& rng) {
  Tensor img = image;
  KeypointAnnotation kp = keypoints;
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);

  if (rng.bernoulli(policy.p_hflip)) {
    Tensor flipped({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u)
          flipped.data()[(static_cast<std::int64_t>(c) * H + v) * W + u] =
              img.data()[(static_cast<std::int64_t>(c) * H + v) * W + (W - 1 - u)];
    img = flipped;
    kp.nose.u = W - 1 - kp.nose.u;
    kp.tail.u = W - 1 - kp.tail.u;
  }
  if (rng.bernoulli(policy.p_vflip)) {
    Tensor flipped({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int v = 0; v < H; ++v)
        std::copy_n(img.data() + (static_cast<std::int64_t>(c) * H + (H - 1 - v)) * W, W,
                    flipped.data() + (static_cast<std::int64_t>(c) * H + v) * W);
    img = flipped;
    kp.nose.v = H - 1 - kp.nose.v;
    kp.tail.v = H - 1 - kp.tail.v;
  }
  if (rng.bernoulli(policy.p_rot)) {
    const double delta = rng.uniform(-policy.rot_range_deg, policy.rot_range_deg);
    auto [rimg, rkp] = rotate_with_padding(img, kp, delta);
    img = rimg;
    kp = rkp;
  }
  return {img, kp};
}

PseudoPair build_pseudo_pair(const ManifestRecord& sar_record, const DatasetManifest& manifest,
                             const std::vector<const ManifestRecord*>& opt_pool, Rng& rng,
                             bool rotate_align) {
  std::vector<const ManifestRecord*> candidates;
  for (const auto* r : opt_pool)
    if (r->category_id == sar_record.category_id) candidates.push_back(r);
  if (candidates.empty())
    throw std::runtime_error("build_pseudo_pair: no optical records for category " +
                             std::to_string(sar_record.category_id));
  const ManifestRecord* opt = candidates[rng.uniform_int(0, static_cast<int>(candidates.size()) - 1)];

  PseudoPair pair;
  pair.category_id = sar_record.category_id;
  pair.sar = load_record_image(manifest, sar_record);
  pair.sar_keypoints = sar_record.keypoints;
  Tensor opt_img = load_record_image(manifest, *opt);
  if (rotate_align) {
    const double delta =
        normalize_angle_deg(sar_record.theta_deg - opt->theta_deg);
    auto [aligned, kp] = rotate_with_padding(opt_img, opt->keypoints, delta);
    pair.opt_aligned = aligned;
    pair.opt_keypoints = kp;
    pair.delta_applied = delta;
  } else {
    pair.opt_aligned = opt_img;
    pair.opt_keypoints = opt->keypoints;
    pair.delta_applied = 0.0;
  }
  return pair;
}

}  // namespace sardiff
