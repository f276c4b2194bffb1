#pragma once

#include "rap/renderer.hpp"

namespace rap {

// Procedural desk-scale world: colored clusters and landmark blobs inside a
// walled box. Units are cm.
struct WorldSpec {
  int gaussians = 800;    // K, accepted range [50, 50000]
  double extent = 200.0;  // half-size of the content region
  int sh_bands = 4;
  int blur_samples = 5;
  int clusters = 6;
  int landmarks = 3;
};

GaussianScene generate_scene(const WorldSpec& spec, Rng& rng);

enum class TrajectoryPattern { kOrbit, kDolly, kGrid };
TrajectoryPattern trajectory_pattern_from_string(const std::string& s);

// Poses looking toward the scene centroid; consecutive rotation steps < 15
// degrees for every pattern and count.
std::vector<Pose> generate_trajectory(const GaussianScene& scene, TrajectoryPattern pattern,
                                      int count, Rng& rng);

// Conditioning image for a synthetic appearance: a canonical intrinsic render
// of the scene under a seeded global tint.
Image make_appearance_variant(const GaussianScene& scene, const Camera& cam,
                              uint64_t variant_seed);

// Seeded tint gains/bias shared by the variant machinery.
void appearance_tint(uint64_t seed, Vec3* gain, Vec3* bias);

// Canonical conditioning viewpoint used for variant rendering.
Pose canonical_view(const GaussianScene& scene);

}  // namespace rap
