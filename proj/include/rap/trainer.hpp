#pragma once

#include "rap/adversary.hpp"
#include "rap/dataset.hpp"
#include "rap/scene_fit.hpp"

namespace rap {

// Production training precision. Gradient-check tests instantiate the model
// templates with double instead.
using Real = float;

struct AblationFlags {
  bool pose_aug = true;
  bool appearance_aug = true;
  bool discriminator = true;
  bool transformer_decoder = true;
};

enum class QualityFilter { kOff, kProxy };

struct TrainConfig {
  double beta1 = 1.0, beta2 = 1.0, beta3 = 0.7;
  double delta_t = 20.0;  // cm
  double delta_r = 10.0;  // deg
  int resynth_interval = 20;
  int patience = 200;
  double lr = 1e-4;
  double lr_decay = 0.95;
  int plateau_window = 50;
  int max_epochs = 120;
  int batch_size = 16;
  AblationFlags ablation;
  QualityFilter quality_filter = QualityFilter::kOff;
  double quality_threshold = 1e-4;  // variance-of-Laplacian floor
  // Optional convergence stop: halt once the validation median translation
  // error drops below (epoch-1 value) / stop_improvement_factor.
  double stop_improvement_factor = 0.0;
  // Synthetic-sample exclusion zones (conjunction of both radii).
  double void_radius_t = 0.0, void_radius_r = 0.0;
  std::vector<Pose> void_centers;
  uint64_t seed = 0;
  int threads = 2;

  void validate() const;
};

TrainConfig train_config_from_json_file(const std::string& path);
void train_config_to_json_file(const TrainConfig& cfg, const std::string& path);

// omega ~ Uniform[0, 2].
double sample_appearance_weight(Rng& rng);

struct SynItem {
  Image image;
  Pose pose;
};

// One branch-2 pool: a perturbed-pose, varied-appearance render per training
// pose. Candidates inside a void zone or failing the sharpness proxy are
// resampled up to 5 times, then skipped.
std::vector<SynItem> synthesize_branch2_batch(const GaussianScene& scene,
                                              const Dataset& train, const TrainConfig& cfg,
                                              Rng& rng);

struct LossBreakdown {
  double l1_pose = 0, l2_pose = 0, l_gen = 0, l_dis = 0, total = 0;
};

struct TrainReport {
  struct Row {
    int epoch;
    double l1, l2, lgen, ldis;
    double val_median_t, val_median_r;
    double lr;
  };
  std::vector<Row> rows;
  std::vector<int> resynth_epochs;
  int stopped_epoch = 0;
  bool converged_early = false;

  void write_csv(const std::string& path) const;
};

class Trainer {
 public:
  Trainer(const Dataset& train, const Dataset& val, const GaussianScene& scene,
          const TrainConfig& cfg);

  TrainReport run();

  // One optimization step over an explicit batch (exposed for tests).
  LossBreakdown train_step(const std::vector<int>& real_indices,
                           const std::vector<int>& branch2_indices, int epoch);

  struct ValMetrics {
    double loss = 0, median_t = 0, median_r = 0;
  };
  ValMetrics evaluate_validation() const;

  PoseRegressor<Real>& model() { return model_; }
  const PoseRegressor<Real>& model() const { return model_; }
  Adversary<Real>& adversary() { return adversary_; }
  const std::vector<SynItem>& branch2_pool() const { return branch2_; }
  const std::vector<Image>& paired_synthetic() const { return syn_paired_; }
  void resynthesize(int epoch);

 private:
  const Dataset& train_;
  const Dataset& val_;
  const GaussianScene& scene_;
  TrainConfig cfg_;
  PoseRegressor<Real> model_;
  Adversary<Real> adversary_;
  nn::Adam<Real> opt_main_, opt_disc_, opt_adj_;
  std::vector<Image> syn_paired_;       // branch-1 same-pose renders
  std::vector<SynItem> branch2_;
  bool use_syn_paired_ = false;
  bool use_branch2_ = false;
  Rng root_rng_;
  int64_t step_counter_ = 0;
};

// Weight checkpoint ("RAPW" container).
void save_checkpoint(const std::string& path, const PoseRegressor<Real>& model,
                     const Adversary<Real>* adversary);
struct Checkpoint {
  PoseRegressor<Real> model;
  bool has_adversary = false;
  Adversary<Real> adversary;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rap
