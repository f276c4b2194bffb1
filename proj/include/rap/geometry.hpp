#pragma once

#include "rap/common.hpp"

namespace rap {

// Rigid camera-to-world transform. World point = R * cam_point + t.
// Translation is in scene units (1 unit = 1 cm by default).
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 to_world(const Vec3& p_cam) const { return R * p_cam + t; }
  Vec3 to_camera(const Vec3& p_world) const { return R.transpose() * (p_world - t); }
  Vec3 center() const { return t; }
  Vec3 forward() const { return R.col(2); }  // +z looks into the scene

  Pose inverse() const { return Pose{R.transpose(), -(R.transpose() * t)}; }
  Pose compose(const Pose& rhs) const { return Pose{R * rhs.R, R * rhs.t + t}; }

  bool is_valid(double tol = 1e-6) const;
};

// Continuous 6D rotation representation: two stacked (unnormalized) 3-vectors.
struct Rot6D {
  Eigen::Matrix<double, 6, 1> v;

  Rot6D() { v << 1, 0, 0, 0, 1, 0; }
  explicit Rot6D(const Eigen::Matrix<double, 6, 1>& x) : v(x) {}
  static Rot6D from_matrix(const Mat3& R);  // first two columns
};

struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const;
};

struct PoseError {
  double trans = 0;  // scene units
  double rot = 0;    // degrees
};

// Gram-Schmidt orthonormalization of the 6D representation.
// Invariant under positive scaling of v. Throws DegenerateInput when the two
// halves are zero or (near-)parallel.
Mat3 rot6d_to_matrix(const Rot6D& v);

// trans = ||t_gt - t_pred||, rot = geodesic angle between rotations (deg).
PoseError pose_error(const Pose& gt, const Pose& pred);

// Translation offset uniform in the ball of radius delta_t; rotation offset
// about a uniform axis with angle uniform in [0, delta_r] degrees.
Pose perturb_pose(const Pose& p, double delta_t, double delta_r_deg, Rng& rng);

// Pinhole projection of a world point; throws BehindCamera when the camera-
// frame depth is <= 1e-9.
Vec2 project_point(const Camera& cam, const Pose& pose, const Vec3& x_world);

// Exact inverse of project_point at the given depth (> 0).
Vec3 backproject_pixel(const Camera& cam, const Pose& pose, double u, double v,
                       double depth);

// Rotation by `angle_rad` about (unit) `axis`, via Rodrigues.
Mat3 axis_angle_matrix(const Vec3& axis, double angle_rad);

// exp of an so(3) vector (axis * angle).
Mat3 so3_exp(const Vec3& w);

// d(exp(w) v)/dw = -exp(w) [v]x Jr(w); this returns the right Jacobian Jr.
Mat3 so3_right_jacobian(const Vec3& w);

Mat3 skew(const Vec3& w);

// Look-at pose: camera at `eye`, +z towards `target`, y roughly down-aligned
// with `up` so images come out upright.
Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3(0, 1, 0));

// Text pose IO: 12 numbers per line, row-major [R|t], camera-to-world.
std::string pose_to_line(const Pose& p);
Pose pose_from_line(const std::string& line);

}  // namespace rap
