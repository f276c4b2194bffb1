#pragma once

#include "rap/geometry.hpp"
#include "rap/image.hpp"
#include "rap/nn/layers.hpp"

namespace rap {

// Positions feeding the appearance MLP are divided by this fixed scale so the
// network sees O(1) inputs at desk scale (scene units are cm).
constexpr double kMlpPositionScale = 300.0;

// Channels of the per-Gaussian dynamic appearance feature (16 x 3 flattened).
constexpr int kAppearanceChannels = 48;

// Appearance network: a conv encoder turning a reference image into a feature
// map, and the color MLP of the render equation. Parameters live in a named
// store so scene IO can serialize them as one block.
struct AppearanceModel {
  nn::ParamStore<double> store;
  nn::Conv2d<double> enc1, enc2, enc3;
  nn::Linear<double> mlp1, mlp2, mlp3;

  static constexpr int kMlpIn = 3 + 3 + kAppearanceChannels + 3;
  static constexpr int kHidden = 64;

  void build(Rng& rng);
  bool built() const { return !store.entries.empty(); }
};

// Per-training-image camera-shake model: a linear trajectory between two
// rotation/translation 6-vectors (axis-angle + translation, applied to
// Gaussian positions), with softmax sampling weights.
struct BlurParams {
  Eigen::Matrix<double, 6, 1> twist_start = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 1> twist_end = Eigen::Matrix<double, 6, 1>::Zero();
  std::vector<double> phi_logits;  // length n

  std::vector<double> phi() const;  // softmax(phi_logits)
};

struct GaussianScene {
  int K = 0;
  int sh_bands = 4;     // B in {1, 4, 9, 16}
  int blur_samples = 5;  // n

  // Row-major per-Gaussian arrays.
  std::vector<double> mu;       // K x 3, scene units
  std::vector<double> quat;     // K x 4, unit (w, x, y, z)
  std::vector<double> scale;    // K x 3, positive extents
  std::vector<double> opacity;  // K, in (0, 1)
  std::vector<double> sh;       // K x B x 3
  std::vector<double> sampler;  // K x 2, in [-1, 1]^2 nominally

  AppearanceModel appearance;
  std::vector<BlurParams> blur;  // one per training image; may be empty

  void validate() const;  // throws SpecOutOfRange on any violated invariant

  // Rounds every value through f32 so RSCN round-trips are bit-exact.
  void snap_to_f32();

  Vec3 centroid() const;
  double bounding_radius() const;  // max distance of mu from centroid
};

// RSCN scene file.
void save_scene(const GaussianScene& s, const std::string& path);
GaussianScene load_scene(const std::string& path);

// Real spherical harmonics evaluation of this scene's color basis for one
// Gaussian, along unit direction d. Returns the 3-vector base color.
Vec3 eval_sh(const GaussianScene& s, int gaussian, const Vec3& d);

// Basis values alone (length = bands).
void sh_basis(int bands, const Vec3& d, double* out);

nn::Tensor<double> image_to_chw(const Image& img);
Image chw_to_image(const nn::Tensor<double>& t);

}  // namespace rap
