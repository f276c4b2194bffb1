#include "rap/refiner.hpp"

#include <fstream>

#include <Eigen/SVD>

namespace rap {

void RansacConfig::validate() const {
  if (!(reproj_threshold > 0)) throw ConfigError("reproj threshold must be > 0");
  if (sample_size < 6) throw ConfigError("sample_size must be >= 6");
  if (max_iters < 1 || min_inliers < sample_size)
    throw ConfigError("ransac iteration/inlier bounds invalid");
}

void save_matchset_csv(const MatchSet& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "u,v,u2,v2\n";
  char buf[128];
  for (const auto& match : m.matches) {
    std::snprintf(buf, sizeof(buf), "%.8g,%.8g,%.8g,%.8g\n", match.query.x(), match.query.y(),
                  match.rendered.x(), match.rendered.y());
    f << buf;
  }
}

MatchSet load_matchset_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  MatchSet m;
  m.source = "file:" + path;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    MatchSet::Match match;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &match.query.x(), &match.query.y(),
                    &match.rendered.x(), &match.rendered.y()) != 4)
      throw CorruptFile("bad match row: " + line);
    m.matches.push_back(match);
  }
  return m;
}

MatchSet oracle_match(const GaussianScene& scene, const Camera& cam, const Pose& gt_pose,
                      const Pose& init_pose, double noise_px, double outlier_frac, Rng& rng,
                      int max_matches) {
  RenderOptions opts;
  opts.threads = default_threads();
  Image neutral(cam.height, cam.width, 0.5);
  RenderOutput rendered = render(scene, cam, init_pose, 0.0, neutral, opts);

  std::vector<Vec2> valid;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x)
      if (rendered.alpha[size_t(y) * cam.width + x] > 0.5 && rendered.depth.at(y, x) > 0)
        valid.push_back(Vec2(x + 0.5, y + 0.5));
  if (int(valid.size()) < 10)
    throw NoVisibleGeometry("fewer than 10 valid-depth pixels in the rendered view");

  MatchSet out;
  out.source = "oracle";
  for (int k = 0; k < max_matches; ++k) {
    const Vec2& rp = valid[size_t(rng.uniform_int(int(valid.size())))];
    double d = rendered.depth.at(int(rp.y()), int(rp.x()));
    Vec3 X = backproject_pixel(cam, init_pose, rp.x(), rp.y(), d);
    Vec2 qp;
    try {
      qp = project_point(cam, gt_pose, X);
    } catch (const BehindCamera&) {
      continue;
    }
    if (qp.x() < 0 || qp.x() >= cam.width || qp.y() < 0 || qp.y() >= cam.height) continue;
    if (rng.uniform() < outlier_frac) {
      qp = Vec2(rng.uniform(0.0, cam.width), rng.uniform(0.0, cam.height));
    } else if (noise_px > 0) {
      qp += Vec2(rng.normal(), rng.normal()) * noise_px;
    }
    out.matches.push_back({qp, rp});
  }
  return out;
}

MatchSet OracleMatcher::match(const Image& query, const RenderOutput& rendered,
                              const Camera& cam) {
  (void)query;
  (void)rendered;
  Rng rng(seed);
  return oracle_match(*scene, cam, gt_pose, init_pose, noise_px, outlier_frac, rng);
}

MatchSet FileMatcher::match(const Image&, const RenderOutput&, const Camera&) {
  return load_matchset_csv(path);
}

namespace {

// World-to-camera extrinsics estimate.
struct Extrinsics {
  Mat3 R;
  Vec3 t;
  bool ok = false;
};

Vec2 project_wc(const Camera& cam, const Extrinsics& e, const Vec3& X, bool* in_front) {
  Vec3 y = e.R * X + e.t;
  if (in_front) *in_front = y.z() > 1e-9;
  if (y.z() <= 1e-9) return Vec2(-1e9, -1e9);
  return Vec2(cam.fx * y.x() / y.z() + cam.cx, cam.fy * y.y() / y.z() + cam.cy);
}

// DLT for [R|t] from >= 6 correspondences in normalized camera coordinates.
Extrinsics dlt_solve(const std::vector<std::pair<Vec2, Vec3>>& corrs,
                     const std::vector<int>& idx, const Camera& cam) {
  Extrinsics out;
  const int n = int(idx.size());
  // Hartley normalization of the 3D points.
  Vec3 cx = Vec3::Zero();
  for (int i : idx) cx += corrs[size_t(i)].second;
  cx /= n;
  double scale3 = 0;
  for (int i : idx) scale3 += (corrs[size_t(i)].second - cx).norm();
  scale3 = scale3 > 1e-12 ? std::sqrt(3.0) * n / scale3 : 1.0;

  Eigen::MatrixXd A(2 * n, 12);
  for (int r = 0; r < n; ++r) {
    const auto& [px, X] = corrs[size_t(idx[size_t(r)])];
    // normalized image coordinates
    double u = (px.x() - cam.cx) / cam.fx;
    double v = (px.y() - cam.cy) / cam.fy;
    Vec3 Xn = (X - cx) * scale3;
    Eigen::Matrix<double, 1, 4> Xh;
    Xh << Xn.x(), Xn.y(), Xn.z(), 1.0;
    A.row(2 * r).setZero();
    A.row(2 * r + 1).setZero();
    // u * (m3 . X) - (m1 . X) = 0 ; v * (m3 . X) - (m2 . X) = 0
    A.block<1, 4>(2 * r, 0) = -Xh;
    A.block<1, 4>(2 * r, 8) = u * Xh;
    A.block<1, 4>(2 * r + 1, 4) = -Xh;
    A.block<1, 4>(2 * r + 1, 8) = v * Xh;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinV);
  Eigen::Matrix<double, 12, 1> m = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> M;
  M << m(0), m(1), m(2), m(3), m(4), m(5), m(6), m(7), m(8), m(9), m(10), m(11);
  // undo the 3D normalization: X_n = s (X - c)
  Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
  T.block<3, 3>(0, 0) *= scale3;
  T.block<3, 1>(0, 3) = -scale3 * cx;
  M = M * T;
  Mat3 Rm = M.block<3, 3>(0, 0);
  if (!Rm.allFinite()) return out;
  double det = Rm.determinant();
  double norm3 = Rm.row(2).norm();
  if (norm3 < 1e-12) return out;
  double s = (det < 0 ? -1.0 : 1.0) / norm3;
  Rm *= s;
  Vec3 t = s * M.block<3, 1>(0, 3);
  // project to SO(3)
  Eigen::JacobiSVD<Mat3> rsvd(Rm, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 R = rsvd.matrixU() * rsvd.matrixV().transpose();
  if (R.determinant() < 0) {
    Mat3 U = rsvd.matrixU();
    U.col(2) *= -1;
    R = U * rsvd.matrixV().transpose();
  }
  out.R = R;
  out.t = t;
  out.ok = true;
  return out;
}

// Gauss-Newton on the inlier set, left-multiplicative rotation increment.
Extrinsics gauss_newton(const std::vector<std::pair<Vec2, Vec3>>& corrs,
                        const std::vector<int>& idx, const Camera& cam, Extrinsics e,
                        int iters = 30) {
  auto total_err = [&](const Extrinsics& ext) {
    double acc = 0;
    for (int i : idx) {
      bool front = false;
      Vec2 p = project_wc(cam, ext, corrs[size_t(i)].second, &front);
      if (!front) return 1e30;
      acc += (p - corrs[size_t(i)].first).squaredNorm();
    }
    return acc;
  };
  double err = total_err(e);
  double lambda = 1e-6;
  for (int it = 0; it < iters; ++it) {
    Eigen::Matrix<double, 6, 6> H = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (int i : idx) {
      const auto& [px, X] = corrs[size_t(i)];
      Vec3 y = e.R * X + e.t;
      if (y.z() <= 1e-9) continue;
      double iz = 1.0 / y.z();
      Eigen::Matrix<double, 2, 3> dpi;
      dpi << cam.fx * iz, 0, -cam.fx * y.x() * iz * iz, 0, cam.fy * iz,
          -cam.fy * y.y() * iz * iz;
      Eigen::Matrix<double, 3, 6> dy;
      dy.block<3, 3>(0, 0) = -skew(y - e.t);  // rotation increment
      dy.block<3, 3>(0, 3) = Mat3::Identity();
      Eigen::Matrix<double, 2, 6> J = dpi * dy;
      Vec2 r = Vec2(cam.fx * y.x() * iz + cam.cx, cam.fy * y.y() * iz + cam.cy) - px;
      H += J.transpose() * J;
      g += J.transpose() * r;
    }
    for (int attempt = 0; attempt < 6; ++attempt) {
      Eigen::Matrix<double, 6, 6> Hl = H;
      for (int d = 0; d < 6; ++d) Hl(d, d) += lambda * H(d, d) + 1e-12;
      Eigen::Matrix<double, 6, 1> delta = Hl.ldlt().solve(-g);
      Extrinsics trial = e;
      trial.R = so3_exp(delta.head<3>()) * e.R;
      trial.t = e.t + delta.tail<3>();
      double trial_err = total_err(trial);
      if (trial_err < err) {
        e = trial;
        err = trial_err;
        lambda = std::max(1e-9, lambda * 0.3);
        break;
      }
      lambda *= 10;
    }
    if (err < 1e-24) break;
  }
  return e;
}

}  // namespace

PnPResult pnp_ransac(const std::vector<std::pair<Vec2, Vec3>>& corrs, const Camera& cam,
                     const RansacConfig& cfg) {
  cfg.validate();
  cam.validate();
  const int n = int(corrs.size());
  if (n < cfg.sample_size)
    throw InsufficientCorrespondences("need at least " + std::to_string(cfg.sample_size) +
                                      " correspondences, got " + std::to_string(n));
  Rng rng(cfg.seed ^ 0x9a75c3ULL);
  const double thr2 = cfg.reproj_threshold * cfg.reproj_threshold;

  auto count_inliers = [&](const Extrinsics& e, std::vector<char>* mask) {
    int count = 0;
    if (mask) mask->assign(size_t(n), 0);
    for (int i = 0; i < n; ++i) {
      bool front = false;
      Vec2 p = project_wc(cam, e, corrs[size_t(i)].second, &front);
      if (!front) continue;
      if ((p - corrs[size_t(i)].first).squaredNorm() <= thr2) {
        ++count;
        if (mask) (*mask)[size_t(i)] = 1;
      }
    }
    return count;
  };

  Extrinsics best;
  int best_count = 0;
  int iters_needed = cfg.max_iters;
  std::vector<int> sample(size_t(cfg.sample_size));
  std::vector<char> mask_scratch;
  for (int it = 0; it < std::min(cfg.max_iters, iters_needed); ++it) {
    // distinct random sample
    for (int k = 0; k < cfg.sample_size; ++k) {
      bool fresh;
      do {
        sample[size_t(k)] = rng.uniform_int(n);
        fresh = true;
        for (int j = 0; j < k; ++j) fresh = fresh && sample[size_t(j)] != sample[size_t(k)];
      } while (!fresh);
    }
    Extrinsics e = dlt_solve(corrs, sample, cam);
    if (!e.ok) continue;
    int count = count_inliers(e, &mask_scratch);
    // Minimal DLT amplifies noise; locally optimize promising candidates on
    // their inlier sets before scoring (LO-RANSAC).
    if (count >= cfg.sample_size && count + 2 >= best_count) {
      std::vector<int> lo_idx;
      for (int i = 0; i < n; ++i)
        if (mask_scratch[size_t(i)]) lo_idx.push_back(i);
      Extrinsics lo = gauss_newton(corrs, lo_idx, cam, e, 6);
      int lo_count = count_inliers(lo, nullptr);
      if (lo_count > count) {
        e = lo;
        count = lo_count;
      }
    }
    if (count > best_count) {
      best_count = count;
      best = e;
      double w = double(count) / n;
      double denom = std::log(std::max(1e-12, 1.0 - std::pow(w, double(cfg.sample_size))));
      if (denom < 0) {
        double need = std::log(std::max(1e-12, 1.0 - cfg.confidence)) / denom;
        iters_needed = std::min(cfg.max_iters, int(std::ceil(need)) + 1);
      }
    }
  }
  if (best_count < cfg.min_inliers)
    throw NoConsensus("best consensus " + std::to_string(best_count) + " below minimum " +
                      std::to_string(cfg.min_inliers));

  std::vector<char> mask;
  count_inliers(best, &mask);
  std::vector<int> inlier_idx;
  for (int i = 0; i < n; ++i)
    if (mask[size_t(i)]) inlier_idx.push_back(i);
  Extrinsics refined = gauss_newton(corrs, inlier_idx, cam, best);
  // monotone refit guard (gauss_newton never accepts an uphill step, so this
  // is belt and braces against pathological conditioning)
  PnPResult out;
  count_inliers(refined, &mask);
  out.inliers = mask;
  out.inlier_count = 0;
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    if (!mask[size_t(i)]) continue;
    ++out.inlier_count;
    Vec2 p = project_wc(cam, refined, corrs[size_t(i)].second, nullptr);
    acc += (p - corrs[size_t(i)].first).squaredNorm();
  }
  out.inlier_rms = out.inlier_count ? std::sqrt(acc / out.inlier_count) : 0.0;
  // camera-to-world
  out.pose.R = refined.R.transpose();
  out.pose.t = -(refined.R.transpose() * refined.t);
  return out;
}

RefineResult refine_pose(const Image& query, const Pose& init, const GaussianScene& scene,
                         const Camera& cam, Matcher& matcher, const RansacConfig& cfg) {
  if (!init.is_valid()) throw SpecOutOfRange("refine_pose: invalid init pose");
  RenderOptions opts;
  opts.threads = default_threads();
  Image neutral(cam.height, cam.width, 0.5);
  RenderOutput rendered = render(scene, cam, init, 0.0, neutral, opts);
  if (auto* om = dynamic_cast<OracleMatcher*>(&matcher)) om->init_pose = init;
  MatchSet matches = matcher.match(query, rendered, cam);

  std::vector<std::pair<Vec2, Vec3>> corrs;
  for (const auto& m : matches.matches) {
    int x = int(m.rendered.x()), y = int(m.rendered.y());
    if (x < 0 || x >= cam.width || y < 0 || y >= cam.height) continue;
    double d = rendered.depth.at(y, x);
    if (d <= 0 || rendered.alpha[size_t(y) * cam.width + x] <= 0.5) continue;
    corrs.emplace_back(m.query, backproject_pixel(cam, init, m.rendered.x(), m.rendered.y(), d));
  }
  RefineResult out;
  out.pose = init;
  if (int(corrs.size()) < cfg.sample_size) return out;  // graceful degradation
  PnPResult pnp;
  try {
    pnp = pnp_ransac(corrs, cam, cfg);
  } catch (const NoConsensus&) {
    return out;
  }
  // inlier-set error of the initialization, for the monotonicity contract
  double acc = 0;
  int cnt = 0;
  {
    Mat3 Rwc = init.R.transpose();
    Vec3 twc = -(Rwc * init.t);
    for (size_t i = 0; i < corrs.size(); ++i) {
      if (!pnp.inliers[i]) continue;
      Vec3 y = Rwc * corrs[i].second + twc;
      if (y.z() <= 1e-9) continue;
      Vec2 p(cam.fx * y.x() / y.z() + cam.cx, cam.fy * y.y() / y.z() + cam.cy);
      acc += (p - corrs[i].first).squaredNorm();
      ++cnt;
    }
  }
  out.initial_error_px = cnt ? std::sqrt(acc / cnt) : 0.0;
  out.refined_error_px = pnp.inlier_rms;
  if (cnt && pnp.inlier_rms > out.initial_error_px) {
    // refit did not beat the initialization on its own inliers; keep init
    return out;
  }
  out.pose = pnp.pose;
  out.refined = true;
  out.inliers = pnp.inlier_count;
  return out;
}

}  // namespace rap
