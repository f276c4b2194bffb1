#include <doctest.h>

#include "rap/scene_fit.hpp"

using namespace rap;

TEST_CASE("sampler_reg formula") {
  CHECK(sampler_reg({0.5, -0.9, 0.0, 1.0}) == 0.0);
  CHECK(sampler_reg({2.0, -3.0}) == doctest::Approx(1.5));
  CHECK(sampler_reg({0.25, -0.45}) == 0.0);  // scaled-down in-range entries
  std::vector<double> g;
  double v = sampler_reg({2.0, -3.0, 0.1}, &g);
  CHECK(v == doctest::Approx(1.0));
  CHECK(g[0] == doctest::Approx(1.0 / 3));
  CHECK(g[1] == doctest::Approx(-1.0 / 3));
  CHECK(g[2] == 0.0);
}

TEST_CASE("gamma5 schedule endpoints") {
  FitConfig cfg;
  cfg.depth_supervision = true;
  cfg.iterations = 2000;
  CHECK(gamma5_schedule(cfg, 0) == doctest::Approx(1.0));
  CHECK(gamma5_schedule(cfg, 1999) == doctest::Approx(0.01));
  cfg.depth_supervision = false;
  CHECK(gamma5_schedule(cfg, 0) == 0.0);
}

TEST_CASE("ssim of constant images matches the closed form") {
  const double a = 0.4, b = 0.5;
  Image ia(16, 20, a), ib(16, 20, b);
  constexpr double C1 = 1e-4, C2 = 9e-4;
  double expect = (2 * a * b + C1) / (a * a + b * b + C1);  // sigma terms vanish
  (void)C2;
  CHECK(ssim(ia, ib) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(dssim(ia, ib) == doctest::Approx((1.0 - expect) / 2).epsilon(1e-12));
  CHECK(ssim(ia, ia) == doctest::Approx(1.0));
}

TEST_CASE("ssim gradient matches finite differences") {
  Rng rng(3);
  Image a(14, 15), b(14, 15);
  for (auto& v : a.data) v = rng.uniform(0.1, 0.9);
  for (auto& v : b.data) v = rng.uniform(0.1, 0.9);
  Image g;
  ssim(a, b, &g);
  const double h = 1e-6;
  for (size_t i = 0; i < a.data.size(); i += 17) {
    double x0 = a.data[i];
    a.data[i] = x0 + h;
    double lp = ssim(a, b);
    a.data[i] = x0 - h;
    double lm = ssim(a, b);
    a.data[i] = x0;
    double fd = (lp - lm) / (2 * h);
    CHECK(std::abs(fd - g.data[i]) < 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("fit loss of identical images is zero") {
  Rng rng(5);
  Image img(24, 24);
  for (auto& v : img.data) v = rng.uniform();
  GaussianScene s;
  s.K = 2;
  s.sampler = {0.2, -0.5, 0.9, 0.1};
  FitConfig cfg;
  FitLossResult r = compute_fit_loss(img, img, s, cfg, 0, nullptr, nullptr);
  CHECK(r.total == 0.0);
  CHECK(r.l1 == 0.0);
  CHECK(r.dssim_term == doctest::Approx(0.0));
}

TEST_CASE("fit loss on constant images matches hand computation") {
  const double a = 0.3, b = 0.4;
  Image ia(20, 20, a), ib(20, 20, b);
  GaussianScene s;
  s.K = 1;
  s.sampler = {0.0, 0.0};
  FitConfig cfg;
  FitLossResult r = compute_fit_loss(ia, ib, s, cfg, 0, nullptr, nullptr);
  constexpr double C1 = 1e-4;
  double ssim_expect = (2 * a * b + C1) / (a * a + b * b + C1);
  CHECK(r.total ==
        doctest::Approx(cfg.gamma1 * 0.1 + cfg.gamma2 * (1 - ssim_expect) / 2).epsilon(1e-9));
}

TEST_CASE("fit loss is non-negative and gradient passes finite differences") {
  Rng rng(7);
  Image ra(16, 16), rb(16, 16);
  for (auto& v : ra.data) v = rng.uniform(0.15, 0.85);
  for (auto& v : rb.data) v = rng.uniform(0.15, 0.85);
  DepthMap da(16, 16), db(16, 16);
  for (auto& v : da.data) v = rng.uniform(5.0, 30.0);
  for (auto& v : db.data) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform(5.0, 30.0);
  GaussianScene s;
  s.K = 3;
  s.sampler = {0.4, 1.6, -1.2, 0.3, 0.0, -0.2};
  FitConfig cfg;
  cfg.depth_supervision = true;
  cfg.iterations = 100;
  const int it = 25;
  FitLossResult r = compute_fit_loss(ra, rb, s, cfg, it, &da, &db);
  CHECK(r.total >= 0.0);

  auto loss = [&]() { return compute_fit_loss(ra, rb, s, cfg, it, &da, &db).total; };
  const double h = 1e-6;
  for (size_t i = 0; i < ra.data.size(); i += 13) {
    double x0 = ra.data[i];
    ra.data[i] = x0 + h;
    double lp = loss();
    ra.data[i] = x0 - h;
    double lm = loss();
    ra.data[i] = x0;
    double fd = (lp - lm) / (2 * h);
    CHECK(std::abs(fd - r.d_rendered.data[i]) < 2e-5 * std::max(1.0, std::abs(fd)));
  }
  for (size_t i = 0; i < da.data.size(); i += 29) {
    double x0 = da.data[i];
    da.data[i] = x0 + h;
    double lp = loss();
    da.data[i] = x0 - h;
    double lm = loss();
    da.data[i] = x0;
    double fd = (lp - lm) / (2 * h);
    CHECK(std::abs(fd - r.d_depth.data[i]) < 2e-5 * std::max(1.0, std::abs(fd)));
  }
  for (size_t i = 0; i < s.sampler.size(); ++i) {
    double x0 = s.sampler[i];
    s.sampler[i] = x0 + h;
    double lp = loss();
    s.sampler[i] = x0 - h;
    double lm = loss();
    s.sampler[i] = x0;
    double fd = (lp - lm) / (2 * h);
    CHECK(std::abs(fd - r.d_sampler[i]) < 1e-7 + 1e-5 * std::abs(fd));
  }
  CHECK_THROWS_AS(compute_fit_loss(ra, Image(8, 8), s, cfg, 0, nullptr, nullptr),
                  ShapeMismatch);
}

TEST_CASE("fit_scene improves a tiny scene and honors invariants") {
  ToyDatasetSpec spec;
  spec.world.gaussians = 140;
  spec.train_count = 10;
  spec.val_count = 3;
  spec.test_count = 2;
  spec.width = 64;
  spec.height = 48;
  spec.focal = 62;
  spec.seed = 9;
  ToyDataset toy = make_toy_dataset(spec);

  FitConfig cfg;
  cfg.iterations = 260;
  cfg.init_gaussians = 220;
  cfg.depth_supervision = true;
  cfg.eval_interval = 50;
  cfg.threads = 2;
  cfg.seed = 1;
  Rng rng(2);
  GaussianScene init = init_scene_from_dataset(toy.train, cfg, rng);
  // start some sampler entries out of range so the regularizer has work to do
  for (size_t i = 0; i < init.sampler.size(); i += 3)
    init.sampler[i] = rng.uniform(1.05, 1.35) * (i % 2 ? -1.0 : 1.0);
  init.snap_to_f32();
  const double init_sampler_reg = sampler_reg(init.sampler);
  REQUIRE(init_sampler_reg > 0.01);
  FitReport report;
  GaussianScene fitted = fit_scene(toy.train, &toy.val, init, cfg, &report);
  CHECK_NOTHROW(fitted.validate());
  REQUIRE(report.rows.size() == size_t(cfg.iterations));

  // windowed loss trend: last window well below the first
  auto window_mean = [&](int start) {
    double acc = 0;
    for (int i = start; i < start + 50; ++i) acc += report.rows[size_t(i)].loss;
    return acc / 50;
  };
  CHECK(window_mean(cfg.iterations - 50) < window_mean(0));

  // PSNR moves up from the random init
  CHECK(report.final_train_psnr > report.rows[0].train_psnr + 3.0);

  // gamma4 pulls out-of-range sampler entries back toward the unit box
  CHECK(sampler_reg(fitted.sampler) < init_sampler_reg);
}

TEST_CASE("fit_scene reports divergence on a poisoned scene") {
  ToyDatasetSpec spec;
  spec.world.gaussians = 80;
  spec.train_count = 3;
  spec.val_count = 1;
  spec.test_count = 1;
  spec.width = 32;
  spec.height = 24;
  spec.focal = 30;
  ToyDataset toy = make_toy_dataset(spec);
  FitConfig cfg;
  cfg.iterations = 3;
  cfg.init_gaussians = 40;
  Rng rng(3);
  GaussianScene init = init_scene_from_dataset(toy.train, cfg, rng);
  init.mu[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(fit_scene(toy.train, nullptr, init, cfg, nullptr), Diverged);
}
