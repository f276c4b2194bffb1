#include <doctest.h>

#include <Eigen/QR>

#include "rap/geometry.hpp"

using namespace rap;

namespace {

Mat3 random_rotation(Rng& rng) {
  return axis_angle_matrix(rng.unit_vector(), rng.uniform(0.0, kPi));
}

// Independent oracle: QR factorization with column sign fixes. Agrees with
// two-step Gram-Schmidt for non-degenerate input.
Mat3 gram_schmidt_oracle(const Eigen::Matrix<double, 6, 1>& v) {
  Mat3 a = Mat3::Zero();
  a.col(0) = v.head<3>();
  a.col(1) = v.tail<3>();
  a.col(2) = v.head<3>().cross(v.tail<3>());
  Eigen::HouseholderQR<Mat3> qr(a);
  Mat3 q = qr.householderQ();
  Mat3 r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < 3; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  if (q.determinant() < 0) q.col(2) = -q.col(2);
  return q;
}

}  // namespace

TEST_CASE("rot6d identity cases") {
  Rot6D v;
  v.v << 1, 0, 0, 0, 1, 0;
  CHECK((rot6d_to_matrix(v) - Mat3::Identity()).norm() == doctest::Approx(0.0));
  v.v << 2, 0, 0, 0, 3, 0;  // scale invariance of Gram-Schmidt
  CHECK((rot6d_to_matrix(v) - Mat3::Identity()).norm() == doctest::Approx(0.0));
}

TEST_CASE("rot6d agrees with independent Gram-Schmidt oracle") {
  Rot6D v;
  v.v << 1, 1, 0, 0, 1, 1;
  Mat3 r = rot6d_to_matrix(v);
  Mat3 o = gram_schmidt_oracle(v.v);
  CHECK((r - o).cwiseAbs().maxCoeff() < 1e-10);

  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    for (int j = 0; j < 6; ++j) v.v[j] = rng.uniform(-2.0, 2.0);
    Mat3 m;
    try {
      m = rot6d_to_matrix(v);
    } catch (const DegenerateInput&) {
      continue;
    }
    CHECK((m - gram_schmidt_oracle(v.v)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("rot6d orthonormality, det, scale invariance") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    Rot6D v;
    for (int j = 0; j < 6; ++j) v.v[j] = rng.uniform(-1.0, 1.0);
    Mat3 m;
    try {
      m = rot6d_to_matrix(v);
    } catch (const DegenerateInput&) {
      continue;
    }
    CHECK((m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(m.determinant() - 1.0) < 1e-6);
    Rot6D vs(Eigen::Matrix<double, 6, 1>(v.v * rng.uniform(0.1, 10.0)));
    Mat3 ms = rot6d_to_matrix(vs);
    CHECK((m - ms).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rot6d degenerate input") {
  Rot6D v;
  v.v << 0, 0, 0, 0, 1, 0;
  CHECK_THROWS_AS(rot6d_to_matrix(v), DegenerateInput);
  v.v << 1, 2, 3, 2, 4, 6;  // parallel halves
  CHECK_THROWS_AS(rot6d_to_matrix(v), DegenerateInput);
}

TEST_CASE("pose_error basics") {
  Pose a;
  CHECK(pose_error(a, a).trans == 0.0);
  CHECK(pose_error(a, a).rot == 0.0);

  Pose b = a;
  b.R = axis_angle_matrix(Vec3(0, 0, 1), kPi);
  PoseError e = pose_error(a, b);
  CHECK(e.trans == doctest::Approx(0.0));
  CHECK(e.rot == doctest::Approx(180.0));
}

TEST_CASE("pose_error matches quaternion oracle") {
  Rng rng(11);
  for (int i = 0; i < 300; ++i) {
    Pose a, b;
    a.R = random_rotation(rng);
    b.R = random_rotation(rng);
    a.t = rng.in_ball(100.0);
    b.t = rng.in_ball(100.0);
    PoseError e = pose_error(a, b);
    Eigen::Quaterniond qa(a.R), qb(b.R);
    double dot = std::min(1.0, std::abs(qa.dot(qb)));
    double oracle = rad_to_deg(2.0 * std::acos(dot));
    CHECK(e.rot == doctest::Approx(oracle).epsilon(1e-9));
    CHECK(std::abs(e.rot - oracle) < 1e-6);
    CHECK(e.trans == doctest::Approx((a.t - b.t).norm()));
    // symmetry of the rotation part
    CHECK(pose_error(b, a).rot == doctest::Approx(e.rot));
  }
}

TEST_CASE("perturb_pose honors bounds and zero case") {
  Rng rng(5);
  Pose p;
  p.R = random_rotation(rng);
  p.t = Vec3(10, -4, 2);

  Pose q = perturb_pose(p, 0.0, 0.0, rng);
  CHECK((q.R - p.R).cwiseAbs().maxCoeff() == 0.0);
  CHECK((q.t - p.t).cwiseAbs().maxCoeff() == 0.0);

  for (int i = 0; i < 500; ++i) {
    Pose r = perturb_pose(p, 20.0, 10.0, rng);
    PoseError e = pose_error(p, r);
    CHECK(e.trans <= 20.0 + 1e-12);
    CHECK(e.rot <= 10.0 + 1e-9);
    CHECK(r.is_valid());
  }
}

TEST_CASE("perturb_pose ball statistics") {
  Rng rng(123);
  Pose p;
  double sum_r = 0;
  double max_t = 0, max_r = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    Pose q = perturb_pose(p, 150.0, 4.0, rng);
    PoseError e = pose_error(p, q);
    sum_r += e.trans;
    max_t = std::max(max_t, e.trans);
    max_r = std::max(max_r, e.rot);
  }
  CHECK(max_t <= 150.0);
  CHECK(max_r <= 4.0);
  // mean radius of a uniform ball = 3R/4 = 112.5
  CHECK(sum_r / n == doctest::Approx(112.5).epsilon(0.05));
}

TEST_CASE("project/backproject") {
  Camera cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 50;
  cam.width = 100;
  cam.height = 100;
  Pose id;

  Vec2 uv = project_point(cam, id, Vec3(0, 0, 7.0));
  CHECK(uv.x() == doctest::Approx(50));
  CHECK(uv.y() == doctest::Approx(50));

  uv = project_point(cam, id, Vec3(1, 0, 10));
  CHECK(uv.x() == doctest::Approx(60));
  CHECK(uv.y() == doctest::Approx(50));

  Vec3 x = backproject_pixel(cam, id, 60, 50, 10);
  CHECK((x - Vec3(1, 0, 10)).norm() < 1e-12);

  x = backproject_pixel(cam, id, 50, 50, 4.0);
  CHECK((x - Vec3(0, 0, 4)).norm() < 1e-12);

  CHECK_THROWS_AS(project_point(cam, id, Vec3(0, 0, -1)), BehindCamera);
  CHECK_THROWS_AS(backproject_pixel(cam, id, 10, 10, 0.0), InvalidDepth);

  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    Pose p;
    p.R = random_rotation(rng);
    p.t = rng.in_ball(5.0);
    double u = rng.uniform(0, cam.width), v = rng.uniform(0, cam.height);
    double d = rng.uniform(0.5, 50.0);
    Vec3 w = backproject_pixel(cam, p, u, v, d);
    Vec2 rt = project_point(cam, p, w);
    CHECK(std::abs(rt.x() - u) < 1e-9);
    CHECK(std::abs(rt.y() - v) < 1e-9);
    CHECK(p.to_camera(w).z() == doctest::Approx(d).epsilon(1e-12));
  }
}

TEST_CASE("pose text round trip") {
  Rng rng(9);
  Pose p;
  p.R = random_rotation(rng);
  p.t = Vec3(1.5, -2.25, 3.75);
  Pose q = pose_from_line(pose_to_line(p));
  CHECK((p.R - q.R).cwiseAbs().maxCoeff() == 0.0);
  CHECK((p.t - q.t).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(pose_from_line("1 2 3"), CorruptFile);
}

TEST_CASE("so3 right jacobian matches finite differences") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Vec3 w = rng.in_ball(trial < 10 ? 2.0 : 1e-4);
    Vec3 v = rng.in_ball(3.0);
    Mat3 R = so3_exp(w);
    Mat3 Jr = so3_right_jacobian(w);
    Mat3 analytic = -R * skew(v) * Jr;  // d(exp(w) v)/dw
    const double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Vec3 wp = w, wm = w;
      wp[k] += h;
      wm[k] -= h;
      Vec3 fd = (so3_exp(wp) * v - so3_exp(wm) * v) / (2 * h);
      CHECK((fd - analytic.col(k)).norm() < 1e-5 * std::max(1.0, fd.norm()));
    }
  }
}
