#include "rap/scene_fit.hpp"

#include <fstream>

namespace rap {

void FitConfig::validate() const {
  if (gamma1 < 0 || gamma2 < 0 || gamma3 < 0 || gamma4 < 0)
    throw ConfigError("fit loss weights must be >= 0");
  if (iterations < 1) throw ConfigError("fit iterations must be >= 1");
}

double gamma5_schedule(const FitConfig& cfg, int iteration) {
  if (!cfg.depth_supervision) return 0.0;
  if (cfg.iterations <= 1) return 1.0;
  double f = double(iteration) / double(cfg.iterations - 1);
  return 1.0 + (0.01 - 1.0) * std::min(1.0, std::max(0.0, f));
}

double sampler_reg(const std::vector<double>& sampler, std::vector<double>* d_sampler) {
  if (sampler.empty()) return 0.0;
  if (d_sampler) d_sampler->assign(sampler.size(), 0.0);
  double acc = 0;
  for (size_t i = 0; i < sampler.size(); ++i) {
    double ex = std::abs(sampler[i]) - 1.0;
    if (ex > 0) {
      acc += ex;
      if (d_sampler) (*d_sampler)[i] = (sampler[i] > 0 ? 1.0 : -1.0) / double(sampler.size());
    }
  }
  return acc / double(sampler.size());
}

FitLossResult compute_fit_loss(const Image& rendered, const Image& target,
                               const GaussianScene& scene, const FitConfig& cfg,
                               int iteration, const DepthMap* rendered_depth,
                               const DepthMap* target_depth, PerceptualLoss* perceptual) {
  if (!rendered.same_shape(target)) throw ShapeMismatch("fit loss: image dims differ");
  FitLossResult r;
  r.d_rendered = Image(rendered.height, rendered.width);

  // L1
  const double n = double(rendered.data.size());
  for (size_t i = 0; i < rendered.data.size(); ++i) {
    double d = rendered.data[i] - target.data[i];
    r.l1 += std::abs(d);
    r.d_rendered.data[i] = cfg.gamma1 * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n;
  }
  r.l1 /= n;

  // D-SSIM
  Image d_dssim;
  r.dssim_term = dssim(rendered, target, &d_dssim);
  for (size_t i = 0; i < rendered.data.size(); ++i)
    r.d_rendered.data[i] += cfg.gamma2 * d_dssim.data[i];

  // perceptual hook; the weight is forced to zero without an implementation
  double g3 = perceptual ? cfg.gamma3 : 0.0;
  if (perceptual && g3 > 0) {
    Image d_perc;
    r.perceptual = perceptual->eval(rendered, target, &d_perc);
    for (size_t i = 0; i < rendered.data.size(); ++i)
      r.d_rendered.data[i] += g3 * d_perc.data[i];
  }

  // sampler regularizer
  r.sampler_term = sampler_reg(scene.sampler, &r.d_sampler);
  for (auto& v : r.d_sampler) v *= cfg.gamma4;

  // depth L1 over supervised pixels
  const double g5 = gamma5_schedule(cfg, iteration);
  if (g5 > 0 && rendered_depth && target_depth) {
    r.d_depth = DepthMap(rendered.height, rendered.width);
    int m = 0;
    for (size_t i = 0; i < target_depth->data.size(); ++i)
      if (target_depth->data[i] > 0) ++m;
    if (m > 0) {
      for (size_t i = 0; i < target_depth->data.size(); ++i) {
        if (target_depth->data[i] <= 0) continue;
        double d = rendered_depth->data[i] - target_depth->data[i];
        r.depth_l1 += std::abs(d);
        r.d_depth.data[i] = g5 * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / double(m);
      }
      r.depth_l1 /= double(m);
    }
  }

  r.total = cfg.gamma1 * r.l1 + cfg.gamma2 * r.dssim_term + g3 * r.perceptual +
            cfg.gamma4 * r.sampler_term + g5 * r.depth_l1;
  return r;
}

void FitReport::write_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "iteration,loss,train_psnr,test_psnr\n";
  char buf[160];
  for (const Row& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.8g,%.5g,%.5g\n", r.iteration, r.loss, r.train_psnr,
                  r.test_psnr);
    f << buf;
  }
}

GaussianScene init_scene_from_dataset(const Dataset& ds, const FitConfig& cfg, Rng& rng) {
  if (ds.size() < 2) throw SpecOutOfRange("fitting needs at least 2 images");
  GaussianScene s;
  s.K = cfg.init_gaussians;
  s.sh_bands = cfg.sh_bands;
  s.blur_samples = cfg.blur_samples;

  struct Sample {
    Vec3 p;
    Vec3 col;
  };
  std::vector<Sample> samples;
  if (ds.has_depth()) {
    // SfM-like seeding: backproject random valid-depth pixels.
    const int per_image = std::max(8, 4 * cfg.init_gaussians / int(ds.size()));
    for (size_t i = 0; i < ds.size(); ++i) {
      for (int k = 0; k < per_image; ++k) {
        int x = rng.uniform_int(ds.cam.width), y = rng.uniform_int(ds.cam.height);
        double d = ds.depth[i].at(y, x);
        if (d <= 0) continue;
        Vec3 p = backproject_pixel(ds.cam, ds.poses[i], x + 0.5, y + 0.5, d);
        Vec3 col(ds.images[i].at(y, x, 0), ds.images[i].at(y, x, 1), ds.images[i].at(y, x, 2));
        samples.push_back({p, col});
      }
    }
  }
  Vec3 center = Vec3::Zero();
  double radius = 0;
  if (!samples.empty()) {
    for (const auto& smp : samples) center += smp.p;
    center /= double(samples.size());
    for (const auto& smp : samples) radius = std::max(radius, (smp.p - center).norm());
  } else {
    // No depth: cover the region the cameras look at.
    for (const Pose& p : ds.poses) center += p.t + p.forward() * 60.0;
    center /= double(ds.size());
    for (const Pose& p : ds.poses) radius = std::max(radius, (p.t - center).norm());
  }
  radius = std::max(radius, 20.0);

  const double base_scale = std::max(1.0, radius * 0.035);
  for (int i = 0; i < s.K; ++i) {
    Vec3 p;
    Vec3 col(0.5, 0.5, 0.5);
    if (!samples.empty()) {
      const Sample& smp = samples[size_t(rng.uniform_int(int(samples.size())))];
      p = smp.p + rng.in_ball(base_scale);
      col = smp.col;
    } else {
      p = center + rng.in_ball(radius * 1.1);
    }
    s.mu.insert(s.mu.end(), {p.x(), p.y(), p.z()});
    s.quat.insert(s.quat.end(), {1.0, 0.0, 0.0, 0.0});
    for (int j = 0; j < 3; ++j) s.scale.push_back(base_scale * rng.uniform(0.7, 1.4));
    s.opacity.push_back(0.25);
    for (int b = 0; b < s.sh_bands; ++b)
      for (int c = 0; c < 3; ++c)
        s.sh.push_back(b == 0 ? (col[c] - 0.5) * 2.0 : rng.uniform(-0.02, 0.02));
    s.sampler.insert(s.sampler.end(), {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)});
  }
  Rng arng = rng.fork(9);
  s.appearance.build(arng);
  s.blur.assign(ds.size(), BlurParams{});
  for (auto& b : s.blur) b.phi_logits.assign(size_t(s.blur_samples), 0.0);
  s.snap_to_f32();
  return s;
}

namespace {

struct AdamVec {
  std::vector<double> m, v;
  int64_t t = 0;

  void init(size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    t = 0;
  }
  void step(std::vector<double>& x, const std::vector<double>& g, double lr) {
    ++t;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, double(t)), c2 = 1.0 - std::pow(b2, double(t));
    for (size_t i = 0; i < x.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

double eval_psnr(const GaussianScene& scene, const Dataset& ds, int max_images,
                 const RenderOptions& ropts) {
  double acc = 0;
  int n = std::min<int>(max_images, int(ds.size()));
  for (int i = 0; i < n; ++i) {
    RenderOutput out = render(scene, ds.cam, ds.poses[size_t(i)], 1.0, ds.images[size_t(i)], ropts);
    acc += psnr(out.color, ds.images[size_t(i)]);
  }
  return acc / n;
}

}  // namespace

GaussianScene fit_scene(const Dataset& train, const Dataset* heldout,
                        const GaussianScene& init, const FitConfig& cfg, FitReport* report,
                        PerceptualLoss* perceptual) {
  cfg.validate();
  train.validate();
  if (train.size() < 2) throw SpecOutOfRange("fitting needs at least 2 images");

  GaussianScene cur = init;
  if (cur.blur.size() != train.size()) {
    cur.blur.assign(train.size(), BlurParams{});
    for (auto& b : cur.blur) b.phi_logits.assign(size_t(cur.blur_samples), 0.0);
  }
  const double extent = std::max(20.0, cur.bounding_radius());

  // Reparameterized state for positivity/range.
  std::vector<double> log_scale(cur.scale.size()), logit_opa(cur.opacity.size());
  for (size_t i = 0; i < cur.scale.size(); ++i) log_scale[i] = std::log(cur.scale[i]);
  for (size_t i = 0; i < cur.opacity.size(); ++i)
    logit_opa[i] = logit(std::min(0.999, std::max(1e-3, cur.opacity[i])));

  AdamVec opt_mu, opt_quat, opt_lscale, opt_lopa, opt_sh, opt_sampler;
  opt_mu.init(cur.mu.size());
  opt_quat.init(cur.quat.size());
  opt_lscale.init(log_scale.size());
  opt_lopa.init(logit_opa.size());
  opt_sh.init(cur.sh.size());
  opt_sampler.init(cur.sampler.size());
  nn::Adam<double> opt_app;
  opt_app.lr = cfg.lr_others;
  opt_app.init(cur.appearance.store);
  std::vector<AdamVec> opt_blur(train.size());
  const size_t blur_dim = 12 + size_t(cur.blur_samples);
  for (auto& a : opt_blur) a.init(blur_dim);

  RenderOptions ropts;
  ropts.threads = cfg.threads;

  Rng order_rng(cfg.seed ^ 0xf17f17ULL);
  std::vector<int> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);

  SceneGrads grads(cur);
  if (report) report->rows.clear();
  std::vector<double> grad_accum(size_t(cur.K), 0.0);
  int grad_accum_n = 0;
  Rng densify_rng(cfg.seed ^ 0xdec5ULL);

  // Adaptive density control, simplified: clone gaussians with persistently
  // large positional gradients, drop near-transparent ones. Optimizer moments
  // restart at each event.
  auto densify_prune = [&]() {
    std::vector<int> keep;
    std::vector<int> clone;
    for (int i = 0; i < cur.K; ++i) {
      if (cur.opacity[size_t(i)] < cfg.prune_opacity) continue;
      keep.push_back(i);
      if (grad_accum[size_t(i)] / std::max(1, grad_accum_n) > cfg.clone_grad_threshold)
        clone.push_back(i);
    }
    if (int(keep.size()) == cur.K && clone.empty()) return;
    GaussianScene next = cur;
    std::vector<double> nls, nlo;
    auto copy_entry = [&](int i, bool jitter) {
      for (int j = 0; j < 3; ++j) {
        double v = cur.mu[size_t(i) * 3 + j];
        if (jitter) v += densify_rng.normal() * 0.3 * cur.scale[size_t(i) * 3 + j];
        next.mu.push_back(v);
      }
      for (int j = 0; j < 4; ++j) next.quat.push_back(cur.quat[size_t(i) * 4 + j]);
      for (int j = 0; j < 3; ++j) next.scale.push_back(cur.scale[size_t(i) * 3 + j]);
      next.opacity.push_back(cur.opacity[size_t(i)]);
      for (int j = 0; j < cur.sh_bands * 3; ++j)
        next.sh.push_back(cur.sh[size_t(i) * cur.sh_bands * 3 + j]);
      for (int j = 0; j < 2; ++j) next.sampler.push_back(cur.sampler[size_t(i) * 2 + j]);
      nls.insert(nls.end(), {std::log(next.scale[next.scale.size() - 3]),
                             std::log(next.scale[next.scale.size() - 2]),
                             std::log(next.scale[next.scale.size() - 1])});
      nlo.push_back(logit(std::min(0.999, std::max(1e-3, next.opacity.back()))));
    };
    next.mu.clear();
    next.quat.clear();
    next.scale.clear();
    next.opacity.clear();
    next.sh.clear();
    next.sampler.clear();
    for (int i : keep) copy_entry(i, false);
    for (int i : clone) copy_entry(i, true);
    next.K = int(next.opacity.size());
    cur = std::move(next);
    log_scale = std::move(nls);
    logit_opa = std::move(nlo);
    opt_mu.init(cur.mu.size());
    opt_quat.init(cur.quat.size());
    opt_lscale.init(log_scale.size());
    opt_lopa.init(logit_opa.size());
    opt_sh.init(cur.sh.size());
    opt_sampler.init(cur.sampler.size());
    grads = SceneGrads(cur);
    grad_accum.assign(size_t(cur.K), 0.0);
    grad_accum_n = 0;
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    if (it % int(train.size()) == 0) {
      // seeded reshuffle each epoch
      for (int i = int(order.size()) - 1; i > 0; --i)
        std::swap(order[size_t(i)], order[size_t(order_rng.uniform_int(i + 1))]);
    }
    const int img = order[size_t(it % int(train.size()))];
    const Image& target = train.images[size_t(img)];
    const DepthMap* tdepth = train.has_depth() ? &train.depth[size_t(img)] : nullptr;

    grads.zero();
    double loss = 0;
    FitLossResult fl;
    const bool depth_active = cfg.depth_supervision && tdepth != nullptr;
    if (cfg.deblur) {
      BlurRenderPass pass = render_blurred_fwd(cur, train.cam, train.poses[size_t(img)],
                                               cur.blur[size_t(img)], 1.0, target, ropts);
      fl = compute_fit_loss(pass.color, target, cur, cfg, it, &pass.depth, tdepth, perceptual);
      loss = fl.total;
      render_blurred_bwd(pass, &fl.d_rendered, depth_active ? &fl.d_depth : nullptr, grads);
    } else {
      RenderPass pass =
          render_fwd(cur, train.cam, train.poses[size_t(img)], 1.0, target, ropts);
      fl = compute_fit_loss(pass.out.color, target, cur, cfg, it, &pass.out.depth, tdepth,
                            perceptual);
      loss = fl.total;
      render_bwd(pass, &fl.d_rendered, depth_active ? &fl.d_depth : nullptr, grads);
    }
    if (!std::isfinite(loss)) throw Diverged("fit loss became non-finite");
    if (it % 10 == 0) {
      double probe = 0;
      for (double v : cur.mu) probe += v;
      for (double v : log_scale) probe += v;
      if (!std::isfinite(probe)) throw Diverged("scene parameters became non-finite");
    }
    for (size_t i = 0; i < grads.sampler.size(); ++i) grads.sampler[i] += fl.d_sampler[i];

    // chain to reparameterized coordinates
    std::vector<double> g_lscale(log_scale.size()), g_lopa(logit_opa.size());
    for (size_t i = 0; i < log_scale.size(); ++i)
      g_lscale[i] = grads.scale[i] * cur.scale[i];
    for (size_t i = 0; i < logit_opa.size(); ++i) {
      double o = cur.opacity[i];
      g_lopa[i] = grads.opacity[i] * o * (1.0 - o);
    }

    opt_mu.step(cur.mu, grads.mu, cfg.lr_position * extent);
    opt_quat.step(cur.quat, grads.quat, cfg.lr_others);
    opt_lscale.step(log_scale, g_lscale, cfg.lr_others);
    opt_lopa.step(logit_opa, g_lopa, cfg.lr_others);
    opt_sh.step(cur.sh, grads.sh, cfg.lr_others);
    opt_sampler.step(cur.sampler, grads.sampler, cfg.lr_others);
    {
      nn::GradBuffer<double> gb(cur.appearance.store);
      gb.grads = std::move(grads.appearance.grads);
      opt_app.step(cur.appearance.store, gb);
      grads.appearance.grads = std::move(gb.grads);
    }
    if (cfg.deblur) {
      std::vector<double> bx(blur_dim), bg(blur_dim);
      BlurParams& bp = cur.blur[size_t(img)];
      for (int i = 0; i < 6; ++i) {
        bx[size_t(i)] = bp.twist_start[i];
        bx[size_t(6 + i)] = bp.twist_end[i];
        bg[size_t(i)] = grads.twist_start[i];
        bg[size_t(6 + i)] = grads.twist_end[i];
      }
      for (int i = 0; i < cur.blur_samples; ++i) {
        bx[size_t(12 + i)] = bp.phi_logits[size_t(i)];
        bg[size_t(12 + i)] = grads.phi_logits[size_t(i)];
      }
      opt_blur[size_t(img)].step(bx, bg, cfg.lr_others);
      for (int i = 0; i < 6; ++i) {
        bp.twist_start[i] = bx[size_t(i)];
        bp.twist_end[i] = bx[size_t(6 + i)];
      }
      for (int i = 0; i < cur.blur_samples; ++i) bp.phi_logits[size_t(i)] = bx[size_t(12 + i)];
    }

    // materialize natural parameters
    for (size_t i = 0; i < cur.scale.size(); ++i) cur.scale[i] = std::exp(log_scale[i]);
    for (size_t i = 0; i < cur.opacity.size(); ++i) cur.opacity[i] = sigmoid(logit_opa[i]);

    if (cfg.densify) {
      for (int i = 0; i < cur.K; ++i) {
        double gx = grads.mu[size_t(i) * 3], gy = grads.mu[size_t(i) * 3 + 1],
               gz = grads.mu[size_t(i) * 3 + 2];
        grad_accum[size_t(i)] += std::sqrt(gx * gx + gy * gy + gz * gz);
      }
      ++grad_accum_n;
      if (it > 0 && it % cfg.densify_interval == 0 && it + cfg.densify_interval / 2 < cfg.iterations)
        densify_prune();
    }

    if (report) {
      FitReport::Row row{it, loss, std::nan(""), std::nan("")};
      if (it % cfg.eval_interval == 0 || it == cfg.iterations - 1) {
        row.train_psnr = eval_psnr(cur, train, 5, ropts);
        row.test_psnr = heldout ? eval_psnr(cur, *heldout, 5, ropts) : row.train_psnr;
      }
      report->rows.push_back(row);
    }
  }

  // finalize: unit quaternions, open-interval opacity, f32 grid
  for (int i = 0; i < cur.K; ++i) {
    double qn = 0;
    for (int j = 0; j < 4; ++j) qn += cur.quat[size_t(i) * 4 + j] * cur.quat[size_t(i) * 4 + j];
    qn = std::sqrt(qn);
    for (int j = 0; j < 4; ++j) cur.quat[size_t(i) * 4 + j] /= qn;
    cur.opacity[size_t(i)] = std::min(1.0 - 1e-5, std::max(1e-5, cur.opacity[size_t(i)]));
  }
  cur.snap_to_f32();
  // f32 snapping can leave quaternions a hair off unit norm
  for (int i = 0; i < cur.K; ++i) {
    double qn = 0;
    for (int j = 0; j < 4; ++j) qn += cur.quat[size_t(i) * 4 + j] * cur.quat[size_t(i) * 4 + j];
    qn = std::sqrt(qn);
    if (std::abs(qn - 1.0) > 5e-7)
      for (int j = 0; j < 4; ++j) cur.quat[size_t(i) * 4 + j] /= qn;
  }
  cur.validate();
  if (report) {
    RenderOptions fo;
    fo.threads = cfg.threads;
    report->final_train_psnr = eval_psnr(cur, train, int(train.size()), fo);
    report->final_test_psnr =
        heldout ? eval_psnr(cur, *heldout, int(heldout->size()), fo) : report->final_train_psnr;
  }
  return cur;
}

}  // namespace rap
