#include "sardiff/manifest.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "sardiff/image_io.hpp"

namespace sardiff {

using nlohmann::json;

DatasetManifest DatasetManifest::load(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("manifest: cannot open " + manifest_path);
  DatasetManifest m;
  m.root_dir = std::filesystem::path(manifest_path).parent_path().string();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    ManifestRecord r;
    r.path = j.at("path").get<std::string>();
    r.modality = j.at("modality").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.category_id = j.at("category_id").get<int>();
    r.category_name = j.at("category_name").get<std::string>();
    r.keypoints.nose = {j.at("nose_uv")[0].get<double>(), j.at("nose_uv")[1].get<double>()};
    r.keypoints.tail = {j.at("tail_uv")[0].get<double>(), j.at("tail_uv")[1].get<double>()};
    r.theta_deg = j.at("theta_deg").get<double>();
    m.records.push_back(std::move(r));
  }
  return m;
}

void DatasetManifest::save(const std::string& manifest_path) const {
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("manifest: cannot write " + manifest_path);
  for (const auto& r : records) {
    json j;
    j["path"] = r.path;
    j["modality"] = r.modality;
    j["split"] = r.split;
    j["category_id"] = r.category_id;
    j["category_name"] = r.category_name;
    j["nose_uv"] = {r.keypoints.nose.u, r.keypoints.nose.v};
    j["tail_uv"] = {r.keypoints.tail.u, r.keypoints.tail.v};
    j["theta_deg"] = r.theta_deg;
    out << j.dump() << '\n';
  }
}

std::vector<const ManifestRecord*> DatasetManifest::select(const std::string& modality,
                                                           const std::string& split) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records)
    if (r.modality == modality && r.split == split) out.push_back(&r);
  return out;
}

std::vector<const ManifestRecord*> DatasetManifest::select_category(const std::string& modality,
                                                                    const std::string& split,
                                                                    int category_id) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records)
    if (r.modality == modality && r.split == split && r.category_id == category_id)
      out.push_back(&r);
  return out;
}

std::string DatasetManifest::resolve(const ManifestRecord& r) const {
  return (std::filesystem::path(root_dir) / r.path).string();
}

void DatasetManifest::validate() const {
  for (const auto& r : records) {
    const double derived = keypoints_to_angle(r.keypoints);
    double diff = std::abs(derived - r.theta_deg);
    diff = std::min(diff, 360.0 - diff);
    if (diff > 1e-6)
      throw std::runtime_error("manifest: theta/keypoint mismatch on " + r.path);
    if (!std::filesystem::exists(resolve(r)))
      throw std::runtime_error("manifest: missing image " + resolve(r));
  }
}

Tensor load_record_image(const DatasetManifest& m, const ManifestRecord& r) {
  return load_image_tensor(m.resolve(r));
}

}  // namespace sardiff
