#pragma once

#include <memory>

#include "rap/scene.hpp"

namespace rap {

struct RenderOptions {
  Vec3 background{0.10, 0.11, 0.13};
  double alpha_clamp = 0.9995;   // keeps 1-alpha bounded away from 0
  double alpha_cutoff = 1.0 / 255.0;
  double transmittance_min = 1e-4;
  double near_z = 0.01;
  double dilation = 0.3;         // low-pass added to the 2D covariance
  int tile = 16;
  int threads = 1;
};

struct RenderOutput {
  Image color;
  DepthMap depth;              // alpha-weighted expected depth; 0 where empty
  std::vector<double> alpha;   // accumulated alpha per pixel
};

// Gradient sink for everything the renderer can differentiate.
struct SceneGrads {
  std::vector<double> mu, quat, scale, opacity, sh, sampler;
  nn::GradBuffer<double> appearance;
  Eigen::Matrix<double, 6, 1> twist_start = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 1> twist_end = Eigen::Matrix<double, 6, 1>::Zero();
  std::vector<double> phi_logits;

  explicit SceneGrads(const GaussianScene& s);
  void zero();
};

struct RenderCache;  // internal forward state kept for the backward pass

// Per-Gaussian colors of the render equation: the appearance MLP applied to
// [mu, SH(theta), omega * sampled encoder features, theta]. `theta` is the
// shared viewing direction for this evaluation.
std::vector<Vec3> gaussian_colors(const GaussianScene& scene, double omega,
                                  const Vec3& theta, const Image& reference);

// Depth-sorted front-to-back alpha compositing of the projected Gaussians.
RenderOutput render(const GaussianScene& scene, const Camera& cam, const Pose& pose,
                    double omega, const Image& reference,
                    const RenderOptions& opts = RenderOptions());

// Motion-blur composite: phi-weighted renders along the interpolated
// position trajectory of `blur`.
Image render_blurred(const GaussianScene& scene, const Camera& cam, const Pose& pose,
                     const BlurParams& blur, double omega, const Image& reference,
                     const RenderOptions& opts = RenderOptions());

// ---- differentiable entry points ----

struct RenderPass {
  RenderPass();
  ~RenderPass();
  RenderPass(RenderPass&&) noexcept;
  RenderPass& operator=(RenderPass&&) noexcept;

  RenderOutput out;
  std::unique_ptr<RenderCache> cache;
};

// Sharp render keeping state for backward.
RenderPass render_fwd(const GaussianScene& scene, const Camera& cam, const Pose& pose,
                      double omega, const Image& reference, const RenderOptions& opts);

// d_color / d_depth may be null. Accumulates into `grads`.
void render_bwd(RenderPass& pass, const Image* d_color, const DepthMap* d_depth,
                SceneGrads& grads);

struct BlurRenderPass {
  BlurRenderPass();
  ~BlurRenderPass();
  BlurRenderPass(BlurRenderPass&&) noexcept;
  BlurRenderPass& operator=(BlurRenderPass&&) noexcept;

  Image color;
  DepthMap depth;  // phi-weighted per-sample expected depths
  struct Impl;
  std::unique_ptr<Impl> impl;
};

BlurRenderPass render_blurred_fwd(const GaussianScene& scene, const Camera& cam,
                                  const Pose& pose, const BlurParams& blur, double omega,
                                  const Image& reference, const RenderOptions& opts);

void render_blurred_bwd(BlurRenderPass& pass, const Image* d_color,
                        const DepthMap* d_depth, SceneGrads& grads);

// Trajectory transform at fraction f in [0,1]: rotation exp((1-f) rs + f re),
// translation lerp, applied to Gaussian positions.
void blur_transform_at(const BlurParams& blur, double f, Mat3* R, Vec3* t);

}  // namespace rap
