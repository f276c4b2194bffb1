#include "rap/geometry.hpp"

#include <cstdio>
#include <sstream>

namespace rap {

namespace {
std::vector<std::thread>* dummy = nullptr;  // silence -Wunused on some setups
int g_default_threads = 2;
}  // namespace

void parallel_for(int begin, int end, int num_threads,
                  const std::function<void(int)>& fn) {
  (void)dummy;
  const int n = end - begin;
  if (n <= 0) return;
  num_threads = std::max(1, std::min(num_threads, n));
  if (num_threads == 1) {
    for (int i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(num_threads);
  // Static block partition: chunk boundaries depend only on (n, num_threads).
  for (int w = 0; w < num_threads; ++w) {
    int lo = begin + int(int64_t(n) * w / num_threads);
    int hi = begin + int(int64_t(n) * (w + 1) / num_threads);
    workers.emplace_back([lo, hi, &fn]() {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : workers) t.join();
}

int default_threads() { return g_default_threads; }
void set_default_threads(int n) { g_default_threads = std::max(1, n); }

bool Pose::is_valid(double tol) const {
  if (!R.allFinite() || !t.allFinite()) return false;
  Mat3 err = R.transpose() * R - Mat3::Identity();
  if (err.cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(R.determinant() - 1.0) <= tol;
}

Rot6D Rot6D::from_matrix(const Mat3& R) {
  Rot6D r;
  r.v << R(0, 0), R(1, 0), R(2, 0), R(0, 1), R(1, 1), R(2, 1);
  return r;
}

void Camera::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw SpecOutOfRange("camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw SpecOutOfRange("camera dimensions must be positive");
  if (cx < 0 || cx >= width || cy < 0 || cy >= height)
    throw SpecOutOfRange("principal point outside image");
}

Mat3 rot6d_to_matrix(const Rot6D& v) {
  Vec3 a1 = v.v.head<3>();
  Vec3 a2 = v.v.tail<3>();
  double n1 = a1.norm();
  if (n1 < 1e-12) throw DegenerateInput("rot6d: first half is zero");
  Vec3 b1 = a1 / n1;
  Vec3 r2 = a2 - b1.dot(a2) * b1;
  double n2 = r2.norm();
  // Residual norm ~ |a2| * sin(angle); reject near-parallel halves.
  if (n2 < 1e-8 * std::max(1.0, a2.norm()))
    throw DegenerateInput("rot6d: halves are parallel or second half is zero");
  Vec3 b2 = r2 / n2;
  Vec3 b3 = b1.cross(b2);
  Mat3 R;
  R.col(0) = b1;
  R.col(1) = b2;
  R.col(2) = b3;
  return R;
}

PoseError pose_error(const Pose& gt, const Pose& pred) {
  PoseError e;
  e.trans = (gt.t - pred.t).norm();
  double c = ((gt.R.transpose() * pred.R).trace() - 1.0) * 0.5;
  c = std::min(1.0, std::max(-1.0, c));
  e.rot = rad_to_deg(std::acos(c));
  return e;
}

Mat3 skew(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

Mat3 so3_exp(const Vec3& w) {
  double th = w.norm();
  Mat3 K = skew(w);
  if (th < 1e-9) {
    return Mat3::Identity() + K + 0.5 * K * K;
  }
  return Mat3::Identity() + std::sin(th) / th * K +
         (1.0 - std::cos(th)) / (th * th) * K * K;
}

Mat3 so3_right_jacobian(const Vec3& w) {
  double th = w.norm();
  Mat3 K = skew(w);
  if (th < 1e-6) {
    // Jr = I - K/2 + K^2/6 + O(th^3)
    return Mat3::Identity() - 0.5 * K + (1.0 / 6.0) * K * K;
  }
  double th2 = th * th;
  return Mat3::Identity() - (1.0 - std::cos(th)) / th2 * K +
         (th - std::sin(th)) / (th2 * th) * K * K;
}

Mat3 axis_angle_matrix(const Vec3& axis, double angle_rad) {
  return so3_exp(axis.normalized() * angle_rad);
}

Pose perturb_pose(const Pose& p, double delta_t, double delta_r_deg, Rng& rng) {
  Pose out = p;
  if (delta_t > 0) out.t += rng.in_ball(delta_t);
  if (delta_r_deg > 0) {
    Vec3 axis = rng.unit_vector();
    double ang = deg_to_rad(rng.uniform(0.0, delta_r_deg));
    out.R = p.R * axis_angle_matrix(axis, ang);
  }
  return out;
}

Vec2 project_point(const Camera& cam, const Pose& pose, const Vec3& x_world) {
  Vec3 pc = pose.to_camera(x_world);
  if (pc.z() <= 1e-9) throw BehindCamera("point at or behind the camera plane");
  return Vec2(cam.fx * pc.x() / pc.z() + cam.cx, cam.fy * pc.y() / pc.z() + cam.cy);
}

Vec3 backproject_pixel(const Camera& cam, const Pose& pose, double u, double v,
                       double depth) {
  if (!(depth > 0)) throw InvalidDepth("depth must be positive");
  Vec3 pc((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
  return pose.to_world(pc);
}

Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) {
    // Up parallel to view direction; pick any perpendicular.
    Vec3 alt = std::abs(z.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 0, 1);
    x = z.cross(alt);
  }
  x.normalize();
  Vec3 y = z.cross(x);  // camera y points against `up`: image v grows downwards
  Pose p;
  p.R.col(0) = x;
  p.R.col(1) = y;
  p.R.col(2) = z;
  p.t = eye;
  return p;
}

std::string pose_to_line(const Pose& p) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g",
                p.R(0, 0), p.R(0, 1), p.R(0, 2), p.t(0), p.R(1, 0), p.R(1, 1), p.R(1, 2),
                p.t(1), p.R(2, 0), p.R(2, 1), p.R(2, 2), p.t(2));
  return std::string(buf);
}

Pose pose_from_line(const std::string& line) {
  std::istringstream ss(line);
  double m[12];
  for (double& x : m) {
    if (!(ss >> x)) throw CorruptFile("pose line needs 12 numbers");
  }
  Pose p;
  p.R << m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10];
  p.t << m[3], m[7], m[11];
  return p;
}

}  // namespace rap
