#pragma once

#include "rap/renderer.hpp"

namespace rap {

struct MatchSet {
  struct Match {
    Vec2 query;     // pixel in the query image
    Vec2 rendered;  // pixel in the rendered image
  };
  std::vector<Match> matches;
  std::string source;  // matcher id
};

void save_matchset_csv(const MatchSet& m, const std::string& path);
MatchSet load_matchset_csv(const std::string& path);

struct RansacConfig {
  double reproj_threshold = 2.0;  // pixels
  int max_iters = 1000;
  int min_inliers = 12;
  int sample_size = 6;
  double confidence = 0.999;
  uint64_t seed = 0;

  void validate() const;
};

// 2D-2D matcher interface; `rendered` is the RGB-D render at the init pose.
struct Matcher {
  virtual ~Matcher() = default;
  virtual MatchSet match(const Image& query, const RenderOutput& rendered,
                         const Camera& cam) = 0;
};

// Synthetic ground-truth matcher: samples valid-depth pixels of the render at
// `init_pose`, projects their 3D points into the ground-truth view, adds
// Gaussian pixel noise and replaces an outlier share with uniform pixels.
MatchSet oracle_match(const GaussianScene& scene, const Camera& cam, const Pose& gt_pose,
                      const Pose& init_pose, double noise_px, double outlier_frac, Rng& rng,
                      int max_matches = 300);

// Matcher adapters.
struct OracleMatcher : Matcher {
  const GaussianScene* scene = nullptr;
  Pose gt_pose;
  double noise_px = 0.0, outlier_frac = 0.0;
  uint64_t seed = 0;

  MatchSet match(const Image& query, const RenderOutput& rendered, const Camera& cam) override;
  Pose init_pose;  // set by refine_pose before matching
};

// Reads a precomputed MatchSet from disk (external matcher integration).
struct FileMatcher : Matcher {
  std::string path;
  MatchSet match(const Image& query, const RenderOutput& rendered, const Camera& cam) override;
};

struct PnPResult {
  Pose pose;  // camera-to-world
  std::vector<char> inliers;
  int inlier_count = 0;
  double inlier_rms = 0;  // pixels, over the inlier set
};

// RANSAC over 6-point DLT minimal solves with a Gauss-Newton refit on the
// final inlier set. Correspondences are (pixel, world point).
PnPResult pnp_ransac(const std::vector<std::pair<Vec2, Vec3>>& corrs, const Camera& cam,
                     const RansacConfig& cfg);

struct RefineResult {
  Pose pose;
  bool refined = false;  // false: no consensus, init returned unchanged
  int inliers = 0;
  double initial_error_px = 0;  // inlier-set RMS of the init pose
  double refined_error_px = 0;
};

// Render-match-backproject-solve post refinement (one shot).
RefineResult refine_pose(const Image& query, const Pose& init, const GaussianScene& scene,
                         const Camera& cam, Matcher& matcher, const RansacConfig& cfg);

}  // namespace rap
