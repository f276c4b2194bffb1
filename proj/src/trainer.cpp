#include "rap/trainer.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace rap {

void TrainConfig::validate() const {
  if (beta1 < 0 || beta2 < 0 || beta3 < 0) throw ConfigError("loss weights must be >= 0");
  if (resynth_interval < 1) throw ConfigError("resynth_interval must be >= 1");
  if (!ablation.discriminator && beta3 > 0)
    throw ConfigError("beta3 > 0 requires the discriminator flag");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (delta_t < 0 || delta_r < 0 || delta_r > 180)
    throw ConfigError("perturbation magnitudes out of range");
}

TrainConfig train_config_from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw CorruptFile("train config: " + std::string(e.what()));
  }
  TrainConfig c;
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
  };
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("beta3", c.beta3);
  get("delta_t", c.delta_t);
  get("delta_r", c.delta_r);
  get("resynth_interval", c.resynth_interval);
  get("patience", c.patience);
  get("lr", c.lr);
  get("lr_decay", c.lr_decay);
  get("plateau_window", c.plateau_window);
  get("max_epochs", c.max_epochs);
  get("batch_size", c.batch_size);
  get("stop_improvement_factor", c.stop_improvement_factor);
  get("seed", c.seed);
  get("threads", c.threads);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    auto getf = [&](const char* k, bool& v) {
      if (a.contains(k)) v = a.at(k).get<bool>();
    };
    getf("pose_aug", c.ablation.pose_aug);
    getf("appearance_aug", c.ablation.appearance_aug);
    getf("discriminator", c.ablation.discriminator);
    getf("transformer_decoder", c.ablation.transformer_decoder);
  }
  if (j.contains("quality_filter")) {
    std::string q = j.at("quality_filter");
    if (q == "off")
      c.quality_filter = QualityFilter::kOff;
    else if (q == "proxy")
      c.quality_filter = QualityFilter::kProxy;
    else
      throw ConfigError("quality_filter must be off|proxy");
  }
  get("quality_threshold", c.quality_threshold);
  c.validate();
  return c;
}

void train_config_to_json_file(const TrainConfig& c, const std::string& path) {
  json j{{"beta1", c.beta1},
         {"beta2", c.beta2},
         {"beta3", c.beta3},
         {"delta_t", c.delta_t},
         {"delta_r", c.delta_r},
         {"resynth_interval", c.resynth_interval},
         {"patience", c.patience},
         {"lr", c.lr},
         {"lr_decay", c.lr_decay},
         {"plateau_window", c.plateau_window},
         {"max_epochs", c.max_epochs},
         {"batch_size", c.batch_size},
         {"stop_improvement_factor", c.stop_improvement_factor},
         {"seed", c.seed},
         {"threads", c.threads},
         {"quality_filter", c.quality_filter == QualityFilter::kOff ? "off" : "proxy"},
         {"quality_threshold", c.quality_threshold},
         {"ablation",
          {{"pose_aug", c.ablation.pose_aug},
           {"appearance_aug", c.ablation.appearance_aug},
           {"discriminator", c.ablation.discriminator},
           {"transformer_decoder", c.ablation.transformer_decoder}}}};
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << "\n";
}

double sample_appearance_weight(Rng& rng) { return rng.uniform(0.0, 2.0); }

namespace {

constexpr uint64_t kPairedVariantBase = 7000;

bool inside_void_zone(const Pose& p, const TrainConfig& cfg) {
  if (cfg.void_radius_t <= 0 && cfg.void_radius_r <= 0) return false;
  for (const Pose& c : cfg.void_centers) {
    PoseError e = pose_error(c, p);
    if (e.trans < cfg.void_radius_t && e.rot < cfg.void_radius_r) return true;
  }
  return false;
}

Image tinted_canonical(const Image& canonical, uint64_t seed) {
  Vec3 gain, bias;
  appearance_tint(seed, &gain, &bias);
  return apply_tint(canonical, gain, bias);
}

Image render_canonical_intrinsic(const GaussianScene& scene, const Camera& cam, int threads) {
  RenderOptions opts;
  opts.threads = threads;
  Image neutral(cam.height, cam.width, 0.5);
  return render(scene, cam, canonical_view(scene), 0.0, neutral, opts).color;
}

}  // namespace

std::vector<SynItem> synthesize_branch2_batch(const GaussianScene& scene,
                                              const Dataset& train, const TrainConfig& cfg,
                                              Rng& rng) {
  std::vector<SynItem> out;
  out.reserve(train.size());
  RenderOptions ropts;
  ropts.threads = cfg.threads;
  const Image canonical = render_canonical_intrinsic(scene, train.cam, cfg.threads);
  for (size_t i = 0; i < train.size(); ++i) {
    bool emitted = false;
    for (int attempt = 0; attempt < 5 && !emitted; ++attempt) {
      Pose p = cfg.ablation.pose_aug
                   ? perturb_pose(train.poses[i], cfg.delta_t, cfg.delta_r, rng)
                   : train.poses[i];
      if (inside_void_zone(p, cfg)) continue;
      double omega = cfg.ablation.appearance_aug ? sample_appearance_weight(rng) : 1.0;
      uint64_t variant_seed = cfg.ablation.appearance_aug
                                  ? rng.next_u64() % 0x7fffffffULL
                                  : kPairedVariantBase + uint64_t(train.sequence[i]);
      Image ref = tinted_canonical(canonical, variant_seed);
      RenderOutput r = render(scene, train.cam, p, omega, ref, ropts);
      if (cfg.quality_filter == QualityFilter::kProxy &&
          variance_of_laplacian(r.color) < cfg.quality_threshold)
        continue;
      out.push_back({std::move(r.color), p});
      emitted = true;
    }
  }
  return out;
}

Trainer::Trainer(const Dataset& train, const Dataset& val, const GaussianScene& scene,
                 const TrainConfig& cfg)
    : train_(train), val_(val), scene_(scene), cfg_(cfg), root_rng_(cfg.seed) {
  cfg_.validate();
  train.validate();
  val.validate();
  if (train.size() < 2 || val.size() < 1) throw ConfigError("need train and val data");

  RegressorConfig rc;
  rc.in_h = train.cam.height;
  rc.in_w = train.cam.width;
  rc.transformer_decoder = cfg_.ablation.transformer_decoder;
  Rng mrng = root_rng_.fork(1);
  model_.build(rc, mrng);
  Vec3 mean_t = Vec3::Zero();
  for (const Pose& p : train.poses) mean_t += p.t;
  model_.set_translation_prior(mean_t / double(train.size()));

  Rng arng = root_rng_.fork(2);
  adversary_.build(model_.ft_h, model_.ft_w, model_.fr_h, model_.fr_w, arng);

  opt_main_.lr = cfg_.lr;
  opt_main_.init(model_.params);
  opt_disc_.lr = 1e-4;
  opt_disc_.beta1 = 0.5;
  opt_disc_.beta2 = 0.999;
  opt_disc_.init(adversary_.params);
  opt_adj_.lr = cfg_.lr;
  opt_adj_.init(adversary_.params);
  for (size_t i = 0; i < adversary_.params.entries.size(); ++i) {
    opt_disc_.lr_scale[i] = adversary_.is_discriminator_entry(i) ? 1.0 : 0.0;
    opt_adj_.lr_scale[i] = adversary_.is_syn_adjust_entry(i) ? 1.0 : 0.0;
  }

  use_branch2_ = cfg_.ablation.pose_aug || cfg_.ablation.appearance_aug;
  use_syn_paired_ = use_branch2_ || cfg_.ablation.discriminator;
  if (use_syn_paired_) {
    RenderOptions ropts;
    ropts.threads = cfg_.threads;
    const Image canonical = render_canonical_intrinsic(scene_, train.cam, cfg_.threads);
    syn_paired_.reserve(train.size());
    for (size_t i = 0; i < train.size(); ++i) {
      Image ref =
          tinted_canonical(canonical, kPairedVariantBase + uint64_t(train.sequence[i]));
      syn_paired_.push_back(render(scene_, train.cam, train.poses[i], 1.0, ref, ropts).color);
    }
  }
  if (use_branch2_) resynthesize(1);
}

void Trainer::resynthesize(int epoch) {
  Rng rng = root_rng_.fork(0xB200 + uint64_t(epoch));
  branch2_ = synthesize_branch2_batch(scene_, train_, cfg_, rng);
}

namespace {

struct Task {
  enum Stream { kReal, kSyn, kBranch2 } stream;
  int index;  // dataset or pool index
};

}  // namespace

LossBreakdown Trainer::train_step(const std::vector<int>& real_indices,
                                  const std::vector<int>& branch2_indices, int epoch) {
  (void)epoch;  // rng streams key off the step counter
  const bool adv_active = cfg_.ablation.discriminator && cfg_.beta3 > 0;
  const int B = int(real_indices.size());
  std::vector<Task> tasks;
  for (int i : real_indices) tasks.push_back({Task::kReal, i});
  if (use_syn_paired_)
    for (int i : real_indices) tasks.push_back({Task::kSyn, i});
  if (use_branch2_)
    for (int j : branch2_indices) tasks.push_back({Task::kBranch2, j});

  const int n1 = use_syn_paired_ ? 2 * B : B;
  const int n2 = int(branch2_indices.size());
  const int n_threads = std::max(1, std::min(cfg_.threads, int(tasks.size())));

  struct ThreadState {
    std::unique_ptr<nn::GradBuffer<Real>> model_g, adv_g;
  };
  auto ts = std::vector<ThreadState>(size_t(n_threads));
  for (auto& t : ts) {
    t.model_g = std::make_unique<nn::GradBuffer<Real>>(model_.params);
    t.adv_g = std::make_unique<nn::GradBuffer<Real>>(adversary_.params);
  }
  std::vector<double> pose_losses(tasks.size(), 0.0);
  std::vector<double> s_real_t(size_t(B), 0.0), s_real_r(size_t(B), 0.0);
  std::vector<double> s_fake_t(size_t(B), 0.0), s_fake_r(size_t(B), 0.0);

  ++step_counter_;
  const int64_t step_id = step_counter_;

  parallel_for(0, n_threads, n_threads, [&](int tid) {
    ThreadState& st = ts[size_t(tid)];
    const int t0 = int(int64_t(tasks.size()) * tid / n_threads);
    const int t1 = int(int64_t(tasks.size()) * (tid + 1) / n_threads);
    for (int k = t0; k < t1; ++k) {
      const Task& task = tasks[size_t(k)];
      Rng task_rng = root_rng_.fork(0xD000000ULL + uint64_t(step_id) * 4096 +
                                    uint64_t(k) * 8 + uint64_t(task.stream));
      nn::Tape<Real> tape(true);
      nn::Ctx<Real> cm{&tape, st.model_g.get(), true, &task_rng};

      const Image* img = nullptr;
      Pose label;
      double pose_coeff = 0;
      if (task.stream == Task::kReal) {
        img = &train_.images[size_t(task.index)];
        label = train_.poses[size_t(task.index)];
        pose_coeff = cfg_.beta1 / double(n1);
      } else if (task.stream == Task::kSyn) {
        img = &syn_paired_[size_t(task.index)];
        label = train_.poses[size_t(task.index)];
        pose_coeff = cfg_.beta1 / double(n1);
      } else {
        img = &branch2_[size_t(task.index)].image;
        label = branch2_[size_t(task.index)].pose;
        pose_coeff = cfg_.beta2 / double(std::max(1, n2));
      }

      int in = tape.constant(image_to_net_input<Real>(*img));
      auto fwd = model_.forward(cm, in);
      int ploss = model_.pose_loss_node(cm, fwd, label);
      pose_losses[size_t(k)] = double(tape.val(ploss).data[0]);
      int total = tape.scale(ploss, Real(pose_coeff));

      if (adv_active && task.stream != Task::kBranch2) {
        const int batch_pos = int(std::find(real_indices.begin(), real_indices.end(),
                                            task.index) -
                                  real_indices.begin());
        const double adv_coeff = cfg_.beta3 / (4.0 * double(B));
        nn::Ctx<Real> c_frozen{&tape, nullptr, true, &task_rng};
        nn::Ctx<Real> c_adv{&tape, st.adv_g.get(), true, &task_rng};
        for (int level = 0; level < 2; ++level) {
          const bool level_r = level == 1;
          int fmap = level_r ? fwd.fr : fwd.ft;
          if (task.stream == Task::kReal) {
            // L_Dis real term: only the discriminator learns from it.
            int adj = adversary_.adjust(c_frozen, fmap, /*synthetic=*/false, level_r);
            int adj_sg = tape.constant(tape.val(adj));
            int s = adversary_.discriminate(c_adv, adj_sg, level_r);
            (level_r ? s_real_r : s_real_t)[size_t(batch_pos)] = double(tape.val(s).data[0]);
            int u = tape.mul(tape.add_const(s, Real(-1)), tape.add_const(s, Real(-1)));
            total = tape.add(total, tape.scale(u, Real(adv_coeff)));
          } else {
            // Synthetic stream: Adj' trains with the generator objective.
            int adj = adversary_.adjust(c_adv, fmap, /*synthetic=*/true, level_r);
            // discriminator update term on detached features
            int adj_sg = tape.constant(tape.val(adj));
            int s_d = adversary_.discriminate(c_adv, adj_sg, level_r);
            (level_r ? s_fake_r : s_fake_t)[size_t(batch_pos)] =
                double(tape.val(s_d).data[0]);
            int u_d = tape.mul(s_d, s_d);
            total = tape.add(total, tape.scale(u_d, Real(adv_coeff)));
            // generator term through a frozen discriminator
            int s_g = adversary_.discriminate(c_frozen, adj, level_r);
            int u_g = tape.mul(tape.add_const(s_g, Real(-1)), tape.add_const(s_g, Real(-1)));
            total = tape.add(total, tape.scale(u_g, Real(adv_coeff)));
          }
        }
      }
      tape.backward(total);
    }
  });

  // deterministic reduction in thread order
  for (int tid = 1; tid < n_threads; ++tid) {
    ts[0].model_g->add_from(*ts[size_t(tid)].model_g);
    ts[0].adv_g->add_from(*ts[size_t(tid)].adv_g);
  }
  opt_main_.lr = cfg_.lr;  // cfg_.lr carries any decay applied by run()
  opt_main_.step(model_.params, *ts[0].model_g);
  if (adv_active) {
    opt_disc_.step(adversary_.params, *ts[0].adv_g);
    opt_adj_.lr = cfg_.lr;
    opt_adj_.step(adversary_.params, *ts[0].adv_g);
  }

  LossBreakdown bd;
  size_t cursor = 0;
  for (int i = 0; i < B; ++i) bd.l1_pose += pose_losses[cursor++];
  if (use_syn_paired_)
    for (int i = 0; i < B; ++i) bd.l1_pose += pose_losses[cursor++];
  bd.l1_pose /= double(n1);
  if (use_branch2_ && n2 > 0) {
    for (int i = 0; i < n2; ++i) bd.l2_pose += pose_losses[cursor++];
    bd.l2_pose /= double(n2);
  }
  if (adv_active) {
    auto mean_sq = [&](const std::vector<double>& v, double target) {
      double acc = 0;
      for (double s : v) acc += (s - target) * (s - target);
      return acc / double(v.size());
    };
    double dis_t = 0.5 * mean_sq(s_real_t, 1.0) + 0.5 * mean_sq(s_fake_t, 0.0);
    double dis_r = 0.5 * mean_sq(s_real_r, 1.0) + 0.5 * mean_sq(s_fake_r, 0.0);
    double gen_t = 0.5 * mean_sq(s_fake_t, 1.0);
    double gen_r = 0.5 * mean_sq(s_fake_r, 1.0);
    bd.l_dis = 0.5 * (dis_t + dis_r);
    bd.l_gen = 0.5 * (gen_t + gen_r);
  }
  bd.total = cfg_.beta1 * bd.l1_pose + cfg_.beta2 * bd.l2_pose +
             cfg_.beta3 * (bd.l_gen + bd.l_dis);
  return bd;
}

Trainer::ValMetrics Trainer::evaluate_validation() const {
  ValMetrics m;
  const int n = int(val_.size());
  auto et = std::vector<double>(size_t(n));
  auto er = std::vector<double>(size_t(n));
  auto losses = std::vector<double>(size_t(n));
  const double st = model_.s_t_value(), sr = model_.s_r_value();
  parallel_for(0, n, cfg_.threads, [&](int i) {
    auto [t, r6] = model_.predict_raw(val_.images[size_t(i)]);
    losses[size_t(i)] = pose_loss_value(t, r6, val_.poses[size_t(i)], st, sr);
    Pose p{rot6d_to_matrix(r6), t};
    PoseError e = pose_error(val_.poses[size_t(i)], p);
    et[size_t(i)] = e.trans;
    er[size_t(i)] = e.rot;
  });
  for (int i = 0; i < n; ++i) m.loss += losses[size_t(i)];
  m.loss /= n;
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t k = v.size() / 2;
    return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
  };
  m.median_t = median(et);
  m.median_r = median(er);
  return m;
}

TrainReport Trainer::run() {
  TrainReport report;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  double window_best_before = best_val;
  double base_median_t = -1;

  std::vector<int> real_order(train_.size());
  for (size_t i = 0; i < real_order.size(); ++i) real_order[i] = int(i);

  for (int epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
    if (use_branch2_ && epoch > 1 && epoch % cfg_.resynth_interval == 0) {
      resynthesize(epoch);
      report.resynth_epochs.push_back(epoch);
    }
    Rng shuffle_rng = root_rng_.fork(0xE000ULL + uint64_t(epoch));
    for (int i = int(real_order.size()) - 1; i > 0; --i)
      std::swap(real_order[size_t(i)], real_order[size_t(shuffle_rng.uniform_int(i + 1))]);
    std::vector<int> b2_order(branch2_.size());
    for (size_t i = 0; i < b2_order.size(); ++i) b2_order[i] = int(i);
    for (int i = int(b2_order.size()) - 1; i > 0; --i)
      std::swap(b2_order[size_t(i)], b2_order[size_t(shuffle_rng.uniform_int(i + 1))]);

    LossBreakdown epoch_bd;
    int steps = 0;
    size_t b2_cursor = 0;
    for (size_t off = 0; off < real_order.size(); off += size_t(cfg_.batch_size)) {
      std::vector<int> batch(real_order.begin() + int(off),
                             real_order.begin() +
                                 std::min(real_order.size(), off + size_t(cfg_.batch_size)));
      std::vector<int> b2;
      if (use_branch2_ && !branch2_.empty()) {
        for (size_t i = 0; i < batch.size(); ++i) {
          b2.push_back(b2_order[b2_cursor % b2_order.size()]);
          ++b2_cursor;
        }
      }
      LossBreakdown bd = train_step(batch, b2, epoch);
      epoch_bd.l1_pose += bd.l1_pose;
      epoch_bd.l2_pose += bd.l2_pose;
      epoch_bd.l_gen += bd.l_gen;
      epoch_bd.l_dis += bd.l_dis;
      ++steps;
    }
    epoch_bd.l1_pose /= steps;
    epoch_bd.l2_pose /= steps;
    epoch_bd.l_gen /= steps;
    epoch_bd.l_dis /= steps;
    if (!std::isfinite(epoch_bd.l1_pose)) throw Diverged("training loss became non-finite");

    ValMetrics vm = evaluate_validation();
    report.rows.push_back({epoch, epoch_bd.l1_pose, epoch_bd.l2_pose, epoch_bd.l_gen,
                           epoch_bd.l_dis, vm.median_t, vm.median_r, cfg_.lr});
    report.stopped_epoch = epoch;

    if (vm.loss < best_val) {
      best_val = vm.loss;
      best_epoch = epoch;
    }
    if (base_median_t < 0) base_median_t = vm.median_t;
    if (cfg_.stop_improvement_factor > 0 &&
        vm.median_t * cfg_.stop_improvement_factor <= base_median_t) {
      report.converged_early = true;
      break;
    }
    if (epoch - best_epoch > cfg_.patience) break;
    if (epoch % cfg_.plateau_window == 0) {
      if (best_val >= window_best_before) cfg_.lr *= cfg_.lr_decay;
      window_best_before = best_val;
    }
  }
  return report;
}

void TrainReport::write_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "epoch,L1,L2,LGen,LDis,val_median_t,val_median_r,lr\n";
  char buf[256];
  for (const Row& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n", r.epoch, r.l1,
                  r.l2, r.lgen, r.ldis, r.val_median_t, r.val_median_r, r.lr);
    f << buf;
  }
}

}  // namespace rap
