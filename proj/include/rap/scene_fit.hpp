#pragma once

#include "rap/dataset.hpp"
#include "rap/renderer.hpp"
#include "rap/ssim.hpp"

namespace rap {

// Plug-in perceptual term. No default implementation ships; the weight is
// forced to zero when none is provided.
struct PerceptualLoss {
  virtual ~PerceptualLoss() = default;
  virtual double eval(const Image& rendered, const Image& target, Image* d_rendered) = 0;
};

struct FitConfig {
  double gamma1 = 0.8, gamma2 = 0.2, gamma3 = 0.005, gamma4 = 0.001;
  bool depth_supervision = false;  // gamma5 decays 1 -> 0.01 when enabled
  int iterations = 2000;
  double lr_position = 1.6e-4;  // multiplied by the scene extent
  double lr_others = 2.5e-3;
  bool deblur = false;
  bool densify = false;
  int densify_interval = 500;
  double prune_opacity = 0.005;
  double clone_grad_threshold = 5e-5;
  int eval_interval = 100;
  int init_gaussians = 800;
  int sh_bands = 4;
  int blur_samples = 5;
  int threads = 2;
  uint64_t seed = 0;

  void validate() const;
};

double gamma5_schedule(const FitConfig& cfg, int iteration);

// mean ReLU(|s| - 1) over all sampler entries.
double sampler_reg(const std::vector<double>& sampler, std::vector<double>* d_sampler = nullptr);

struct FitLossResult {
  double total = 0, l1 = 0, dssim_term = 0, perceptual = 0, sampler_term = 0, depth_l1 = 0;
  Image d_rendered;
  DepthMap d_depth;                // empty unless a depth term was active
  std::vector<double> d_sampler;   // gamma4 path
};

// gamma1 L1 + gamma2 D-SSIM + gamma3 perceptual + gamma4 sampler reg
// + gamma5(iteration) depth L1 (pixels with target depth > 0).
FitLossResult compute_fit_loss(const Image& rendered, const Image& target,
                               const GaussianScene& scene, const FitConfig& cfg,
                               int iteration, const DepthMap* rendered_depth,
                               const DepthMap* target_depth,
                               PerceptualLoss* perceptual = nullptr);

struct FitReport {
  struct Row {
    int iteration;
    double loss;
    double train_psnr;  // NaN between evaluation points
    double test_psnr;
  };
  std::vector<Row> rows;
  double final_train_psnr = 0, final_test_psnr = 0;

  void write_csv(const std::string& path) const;
};

// Random or depth-backprojected initialization derived from the dataset.
GaussianScene init_scene_from_dataset(const Dataset& ds, const FitConfig& cfg, Rng& rng);

// Joint optimization of all scene parameters (and per-image blur trajectories
// when deblur is on) against the training images. `heldout` feeds the
// test-PSNR column; pass nullptr to reuse training views.
GaussianScene fit_scene(const Dataset& train, const Dataset* heldout,
                        const GaussianScene& init, const FitConfig& cfg,
                        FitReport* report = nullptr, PerceptualLoss* perceptual = nullptr);

}  // namespace rap
