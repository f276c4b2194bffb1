#include <doctest.h>

#include "rap/regressor.hpp"

using namespace rap;
using nn::Ctx;
using nn::GradBuffer;
using nn::Tape;
using nn::Tensor;

namespace {

Image random_image(int h, int w, Rng& rng) {
  Image img(h, w);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("extract_features stride arithmetic at 320x240") {
  RegressorConfig cfg;
  cfg.in_h = 240;
  cfg.in_w = 320;
  PoseRegressor<double> model;
  Rng rng(1);
  model.build(cfg, rng);
  Rng ir(2);
  Image img = random_image(240, 320, ir);
  Tape<double> t(false);
  Ctx<double> c{&t, nullptr, false, nullptr};
  int in = t.constant(image_to_net_input<double>(img));
  auto f = model.extract_features(c, in);
  CHECK(t.val(f.ft).shape == std::vector<int>({40, 30, 40}));
  CHECK(t.val(f.fr).shape == std::vector<int>({112, 15, 20}));
}

TEST_CASE("extract_features determinism and degenerate input") {
  RegressorConfig cfg;
  cfg.in_h = 48;
  cfg.in_w = 64;
  PoseRegressor<double> model;
  Rng rng(3);
  model.build(cfg, rng);
  Rng ir(4);
  Image img = random_image(48, 64, ir);
  auto run = [&](const Image& im) {
    Tape<double> t(false);
    Ctx<double> c{&t, nullptr, false, nullptr};
    auto f = model.extract_features(c, t.constant(image_to_net_input<double>(im)));
    return t.val(f.ft).data;
  };
  CHECK(run(img) == run(img));

  Image zero(48, 64, 0.0);
  auto feats = run(zero);
  for (double v : feats) CHECK(std::isfinite(v));

  Tape<double> t(false);
  Ctx<double> c{&t, nullptr, false, nullptr};
  Image tiny(16, 16, 0.1);
  CHECK_THROWS_AS(model.extract_features(c, t.constant(image_to_net_input<double>(tiny))),
                  ImageTooSmall);
}

TEST_CASE("pose transformer sequence length mirrors H*W+1") {
  RegressorConfig cfg;
  cfg.in_h = 120;   // /8 -> 15
  cfg.in_w = 216;   // /8 -> 27
  PoseRegressor<double> model;
  Rng rng(5);
  model.build(cfg, rng);
  CHECK(model.ft_h == 15);
  CHECK(model.ft_w == 27);
  CHECK(model.tower_t.seq_len == 406);
}

TEST_CASE("regression heads: zero token with zero weights, GeLU chain oracle") {
  RegressorConfig cfg;
  cfg.in_h = 32;
  cfg.in_w = 32;
  PoseRegressor<double> model;
  Rng rng(6);
  model.build(cfg, rng);

  // zero token + zero bias -> zero output
  model.params[model.head_t1.w].zero();
  model.params[model.head_t1.b].zero();
  model.params[model.head_t2.w].zero();
  model.params[model.head_t2.b].zero();
  Tape<double> t(false);
  Ctx<double> c{&t, nullptr, false, nullptr};
  Tensor<double> token({128});
  int out = model.regress_head(c, t.constant(token), false);
  for (double v : t.val(out).data) CHECK(v == 0.0);

  // hand-set scalar chain: in0 -> h0 (w=0.7, b=0.1) -> gelu -> out0 (w=1.3, b=-0.2)
  model.params[model.head_t1.w].data[0] = 0.7;
  model.params[model.head_t1.b].data[0] = 0.1;
  model.params[model.head_t2.w].data[0] = 1.3;
  model.params[model.head_t2.b].data[0] = -0.2;
  token.data[0] = 0.9;
  int out2 = model.regress_head(c, t.constant(token), false);
  double pre = 0.7 * 0.9 + 0.1;
  double gelu = pre * 0.5 * (1.0 + std::erf(pre / std::sqrt(2.0)));
  CHECK(std::abs(t.val(out2).data[0] - (1.3 * gelu - 0.2)) < 1e-10);
}

TEST_CASE("rot head output composes into valid rotations") {
  RegressorConfig cfg;
  cfg.in_h = 32;
  cfg.in_w = 32;
  PoseRegressor<double> model;
  Rng rng(7);
  model.build(cfg, rng);
  Rng tr(8);
  for (int i = 0; i < 100; ++i) {
    Tape<double> t(false);
    Ctx<double> c{&t, nullptr, false, nullptr};
    Tensor<double> token({128});
    for (auto& v : token.data) v = tr.uniform(-1.5, 1.5);
    int out = model.regress_head(c, t.constant(token), true);
    Rot6D r6;
    for (int j = 0; j < 6; ++j) r6.v[j] = t.val(out).data[size_t(j)];
    Mat3 R = rot6d_to_matrix(r6);
    CHECK((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(R.determinant() - 1.0) < 1e-6);
  }
}

TEST_CASE("forward determinism and valid rotation output") {
  RegressorConfig cfg;
  cfg.in_h = 32;
  cfg.in_w = 32;
  PoseRegressor<double> model;
  Rng rng(9);
  model.build(cfg, rng);
  Rng ir(10);
  Image img = random_image(32, 32, ir);
  Pose a = model.predict(img);
  Pose b = model.predict(img);
  CHECK((a.R - b.R).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.t - b.t).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.is_valid());
}

TEST_CASE("pose loss values and s-gradients") {
  Pose gt;
  gt.R = axis_angle_matrix(Vec3(0, 1, 0), 0.4);
  gt.t = Vec3(2, -1, 3);
  Rot6D perfect = Rot6D::from_matrix(gt.R);
  CHECK(pose_loss_value(gt.t, perfect, gt, 0.0, 0.0) == doctest::Approx(0.0));

  // L_t = 1, L_r = 1, s = 0 -> 2: build a unit-offset translation and a
  // rotation whose Frobenius distance is exactly 1.
  Vec3 t_off = gt.t + Vec3(1, 0, 0);
  // || R(theta) - I ||_F = 2 sqrt(2) sin(theta/2); solve for 1
  double theta = 2.0 * std::asin(1.0 / (2.0 * std::sqrt(2.0)));
  Pose gt2;
  gt2.R = gt.R * axis_angle_matrix(Vec3(0, 0, 1), theta);
  gt2.t = gt.t;
  CHECK(pose_loss_value(t_off, perfect, gt2, 0.0, 0.0) == doctest::Approx(2.0).epsilon(1e-9));

  // analytic d loss / d s_t = -L_t exp(-s_t) + 1, checked by finite difference
  double st = 0.3, sr = -0.2;
  double lt = (gt2.t - t_off).norm();
  double analytic = -lt * std::exp(-st) + 1.0;
  double h = 1e-6;
  double fd = (pose_loss_value(t_off, perfect, gt2, st + h, sr) -
               pose_loss_value(t_off, perfect, gt2, st - h, sr)) /
              (2 * h);
  CHECK(std::abs(fd - analytic) < 1e-8);
}

// Smallest input the feature-extractor contract admits (>= 32x32).
TEST_CASE("full regressor gradients match finite differences on a 32x32 micro config") {
  RegressorConfig cfg;
  cfg.in_h = 32;
  cfg.in_w = 32;
  PoseRegressor<double> model;
  Rng rng(11);
  model.build(cfg, rng);
  Pose gt = look_at(Vec3(3, 2, -5), Vec3::Zero());
  Rng ir(12);
  Image img = random_image(32, 32, ir);
  Tensor<double> input = image_to_net_input<double>(img);

  auto loss = [&]() {
    Tape<double> t(true);
    Ctx<double> c{&t, nullptr, false, nullptr};
    auto f = model.forward(c, t.constant(input));
    return double(t.val(model.pose_loss_node(c, f, gt)).data[0]);
  };
  GradBuffer<double> grads(model.params);
  {
    Tape<double> t(true);
    Ctx<double> c{&t, &grads, false, nullptr};
    auto f = model.forward(c, t.constant(input));
    int ln = model.pose_loss_node(c, f, gt);
    t.backward(ln);
  }
  int checked = 0, failed = 0;
  for (size_t e = 0; e < model.params.entries.size(); ++e) {
    auto& val = model.params.entries[e].value;
    size_t stride = std::max<size_t>(1, val.numel() / 4);
    for (size_t i = stride / 2; i < val.numel(); i += stride) {
      double v0 = val.data[i];
      const double h = 1e-5;
      val.data[i] = v0 + h;
      double lp = loss();
      val.data[i] = v0 - h;
      double lm = loss();
      val.data[i] = v0;
      double fd = (lp - lm) / (2 * h);
      double an = grads.grads[e].data[i];
      ++checked;
      double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      if (std::abs(fd - an) / denom > 1e-3 && std::abs(fd - an) > 1e-9) {
        ++failed;
        CAPTURE(model.params.entries[e].name);
        CAPTURE(i);
        CAPTURE(fd);
        CAPTURE(an);
        CHECK(false);
      }
    }
  }
  CHECK(checked > 200);
  CHECK(failed == 0);
}
