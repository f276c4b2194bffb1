#pragma once

#include "rap/scene_gen.hpp"

namespace rap {

// Posed image collection sharing one camera. `sequence` carries the
// appearance-sequence id of each image.
struct Dataset {
  Camera cam;
  std::vector<Pose> poses;
  std::vector<int> sequence;
  std::vector<Image> images;
  std::vector<DepthMap> depth;  // empty when the set has no depth maps

  size_t size() const { return poses.size(); }
  bool has_depth() const { return !depth.empty(); }
  void validate() const;
};

// Directory layout: camera.json, poses.txt, images/####.ppm,
// optional depth/####.pfm, sequences.txt (one id per image).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir, bool load_depth = true);

void save_camera_json(const Camera& cam, const std::string& path);
Camera load_camera_json(const std::string& path);

// Toy benchmark generation: a procedural world plus train/val/test splits.
// Train poses follow an orbit; val/test poses are jittered off that ring so
// localization requires interpolation. Images carry per-sequence appearance
// variants with mild per-image drift.
struct ToyDatasetSpec {
  WorldSpec world;
  int train_count = 60, val_count = 20, test_count = 20;
  int variants = 3;
  int width = 160, height = 120;
  double focal = 150.0;
  double offring_jitter_t = 16.0;   // cm
  double offring_jitter_r = 6.0;    // deg
  bool blur_targets = false;        // synthetic camera shake on train images
  double blur_rot_deg = 0.9;        // trajectory endpoints magnitude
  double blur_trans = 5.0;          // cm
  bool write_depth = true;
  uint64_t seed = 0;
};

struct ToyDataset {
  GaussianScene world;
  Dataset train, val, test;
};

ToyDataset make_toy_dataset(const ToyDatasetSpec& spec);

// Writes world.rscn plus train/, val/, test/ dataset directories.
void save_toy_dataset(const ToyDataset& toy, const std::string& dir);

}  // namespace rap
