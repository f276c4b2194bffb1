#include "rap/renderer.hpp"

#include <algorithm>

namespace rap {

SceneGrads::SceneGrads(const GaussianScene& s)
    : mu(s.mu.size(), 0.0),
      quat(s.quat.size(), 0.0),
      scale(s.scale.size(), 0.0),
      opacity(s.opacity.size(), 0.0),
      sh(s.sh.size(), 0.0),
      sampler(s.sampler.size(), 0.0),
      appearance(s.appearance.store),
      phi_logits(size_t(s.blur_samples), 0.0) {}

void SceneGrads::zero() {
  auto z = [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); };
  z(mu);
  z(quat);
  z(scale);
  z(opacity);
  z(sh);
  z(sampler);
  appearance.zero();
  twist_start.setZero();
  twist_end.setZero();
  z(phi_logits);
}

namespace {

// Color pipeline on a tape: encoder(reference) -> sampled features -> MLP.
struct ColorTape {
  nn::Tape<double> tape;
  nn::GradBuffer<double> app_grads;
  int mu_leaf = -1, sh_leaf = -1, sampler_leaf = -1, colors_node = -1;
  std::vector<Vec3> colors;
  nn::Tensor<double> d_colors;  // accumulated across blur samples

  ColorTape(const GaussianScene& s, bool with_grad)
      : tape(with_grad), app_grads(s.appearance.store), d_colors({s.K, 3}) {}
};

std::shared_ptr<ColorTape> build_color_tape(const GaussianScene& scene, double omega,
                                            const Vec3& theta, const Image& reference,
                                            bool with_grad) {
  auto ct = std::make_shared<ColorTape>(scene, with_grad);
  nn::Tape<double>& t = ct->tape;
  const int K = scene.K;
  const int B = scene.sh_bands;
  if (K == 0) return ct;  // nothing to color; compositing yields background

  nn::Ctx<double> ctx;
  ctx.tape = &t;
  ctx.grads = with_grad ? &ct->app_grads : nullptr;
  ctx.train = false;

  // Encoder on the reference image.
  int ref = t.constant(image_to_chw(reference));
  const auto& ap = scene.appearance;
  int f1 = t.relu(ap.enc1.forward(ctx, ap.store, ref));
  int f2 = t.relu(ap.enc2.forward(ctx, ap.store, f1));
  int feat = ap.enc3.forward(ctx, ap.store, f2);

  // Per-gaussian inputs.
  nn::Tensor<double> mu_t({K, 3});
  std::copy(scene.mu.begin(), scene.mu.end(), mu_t.data.begin());
  ct->mu_leaf = t.leaf(std::move(mu_t));
  int pos_in = t.scale(ct->mu_leaf, 1.0 / kMlpPositionScale);

  nn::Tensor<double> sh_t({K, B * 3});
  std::copy(scene.sh.begin(), scene.sh.end(), sh_t.data.begin());
  ct->sh_leaf = t.leaf(std::move(sh_t));
  double basis[16];
  sh_basis(B, theta, basis);
  nn::Tensor<double> bw({B * 3, 3});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < 3; ++c) bw.data[size_t(b * 3 + c) * 3 + c] = basis[b];
  int sh_col = t.matmul(ct->sh_leaf, t.constant(std::move(bw)));

  nn::Tensor<double> coords({K, 2});
  std::copy(scene.sampler.begin(), scene.sampler.end(), coords.data.begin());
  ct->sampler_leaf = t.leaf(std::move(coords));
  int sampled = t.grid_sample_chw(feat, ct->sampler_leaf);
  int dyn = t.scale(sampled, omega);

  nn::Tensor<double> theta_rows({K, 3});
  for (int i = 0; i < K; ++i)
    for (int c = 0; c < 3; ++c) theta_rows.data[size_t(i) * 3 + c] = theta[c];
  int theta_node = t.constant(std::move(theta_rows));

  int x = t.concat_cols(t.concat_cols(pos_in, sh_col), t.concat_cols(dyn, theta_node));
  int h1 = t.relu(ap.mlp1.forward(ctx, ap.store, x));
  int h2 = t.relu(ap.mlp2.forward(ctx, ap.store, h1));
  ct->colors_node = t.sigmoid(ap.mlp3.forward(ctx, ap.store, h2));

  const auto& cv = t.val(ct->colors_node);
  ct->colors.resize(size_t(K));
  for (int i = 0; i < K; ++i)
    ct->colors[size_t(i)] = Vec3(cv.data[size_t(i) * 3], cv.data[size_t(i) * 3 + 1],
                                 cv.data[size_t(i) * 3 + 2]);
  return ct;
}

struct GaussianProj {
  int idx = 0;
  double z = 0;
  double mean_u = 0, mean_v = 0;
  double con00 = 0, con01 = 0, con11 = 0;  // inverse 2D covariance
  double radius = 0;
  double opa = 0;
  Vec3 color;
  // saved state for the backward chain
  Vec3 p_cam;
  double txz = 0, tyz = 0;  // clamped x/z, y/z used in J
  bool clamp_x = false, clamp_y = false;
  Eigen::Matrix<double, 2, 3> A;
  Mat2 cov2;
  Mat3 sigma3;
  Mat3 Rq;
  Vec3 svec;
  Eigen::Vector4d qhat;
  double qnorm = 1;
};

struct GeomCache {
  std::vector<GaussianProj> proj;          // visible, depth-sorted
  std::vector<std::vector<int>> tile_lists;  // indices into proj
  int tiles_x = 0, tiles_y = 0;
  std::vector<double> S0, S1, Tfin;  // per pixel
};

void project_gaussians(const GaussianScene& scene, const double* positions,
                       const std::vector<Vec3>& colors, const Camera& cam,
                       const Pose& pose, const RenderOptions& opts,
                       std::vector<GaussianProj>& out) {
  out.clear();
  out.reserve(size_t(scene.K));
  const Mat3 W = pose.R.transpose();
  const double lim_x = 1.3 * (cam.width / (2.0 * cam.fx));
  const double lim_y = 1.3 * (cam.height / (2.0 * cam.fy));
  for (int i = 0; i < scene.K; ++i) {
    const double opa = scene.opacity[size_t(i)];
    if (opa * 255.0 <= 1.0) continue;
    Vec3 p(positions[size_t(i) * 3], positions[size_t(i) * 3 + 1], positions[size_t(i) * 3 + 2]);
    Vec3 pc = W * (p - pose.t);
    if (pc.z() <= opts.near_z) continue;
    GaussianProj g;
    g.idx = i;
    g.p_cam = pc;
    g.z = pc.z();
    const double inv_z = 1.0 / pc.z();
    g.mean_u = cam.fx * pc.x() * inv_z + cam.cx;
    g.mean_v = cam.fy * pc.y() * inv_z + cam.cy;
    double xz = pc.x() * inv_z, yz = pc.y() * inv_z;
    g.clamp_x = xz < -lim_x || xz > lim_x;
    g.clamp_y = yz < -lim_y || yz > lim_y;
    g.txz = std::min(lim_x, std::max(-lim_x, xz));
    g.tyz = std::min(lim_y, std::max(-lim_y, yz));
    Eigen::Matrix<double, 2, 3> J;
    J << cam.fx * inv_z, 0, -cam.fx * g.txz * inv_z, 0, cam.fy * inv_z,
        -cam.fy * g.tyz * inv_z;
    g.A = J * W;
    double qn = 0;
    for (int j = 0; j < 4; ++j) {
      double q = scene.quat[size_t(i) * 4 + j];
      qn += q * q;
    }
    g.qnorm = std::sqrt(qn);
    for (int j = 0; j < 4; ++j) g.qhat[j] = scene.quat[size_t(i) * 4 + j] / g.qnorm;
    const double w = g.qhat[0], x = g.qhat[1], y = g.qhat[2], z = g.qhat[3];
    g.Rq << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    g.svec = Vec3(scene.scale[size_t(i) * 3], scene.scale[size_t(i) * 3 + 1],
                  scene.scale[size_t(i) * 3 + 2]);
    Mat3 M3 = g.Rq * g.svec.asDiagonal();
    g.sigma3 = M3 * M3.transpose();
    g.cov2 = g.A * g.sigma3 * g.A.transpose();
    g.cov2(0, 0) += opts.dilation;
    g.cov2(1, 1) += opts.dilation;
    const double det = g.cov2.determinant();
    if (det <= 1e-12) continue;
    const double inv_det = 1.0 / det;
    g.con00 = g.cov2(1, 1) * inv_det;
    g.con01 = -g.cov2(0, 1) * inv_det;
    g.con11 = g.cov2(0, 0) * inv_det;
    const double mid = 0.5 * (g.cov2(0, 0) + g.cov2(1, 1));
    const double lam_max =
        mid + std::sqrt(std::max(0.0, mid * mid - det));
    // Conservative footprint: outside this radius alpha < cutoff for sure.
    g.radius = std::sqrt(2.0 * std::log(opa * 255.0) * lam_max) + 1.0;
    if (!std::isfinite(g.mean_u) || !std::isfinite(g.mean_v) || !std::isfinite(g.radius) ||
        !std::isfinite(g.z))
      continue;
    if (g.mean_u + g.radius < 0 || g.mean_u - g.radius > cam.width ||
        g.mean_v + g.radius < 0 || g.mean_v - g.radius > cam.height)
      continue;
    g.opa = opa;
    g.color = colors[size_t(i)];
    out.push_back(g);
  }
  std::sort(out.begin(), out.end(), [](const GaussianProj& a, const GaussianProj& b) {
    return a.z < b.z || (a.z == b.z && a.idx < b.idx);
  });
}

void build_tiles(const Camera& cam, const RenderOptions& opts, GeomCache& gc) {
  gc.tiles_x = (cam.width + opts.tile - 1) / opts.tile;
  gc.tiles_y = (cam.height + opts.tile - 1) / opts.tile;
  gc.tile_lists.assign(size_t(gc.tiles_x) * gc.tiles_y, {});
  for (size_t pi = 0; pi < gc.proj.size(); ++pi) {
    const GaussianProj& g = gc.proj[pi];
    int tx0 = std::max(0, int((g.mean_u - g.radius) / opts.tile));
    int tx1 = std::min(gc.tiles_x - 1, int((g.mean_u + g.radius) / opts.tile));
    int ty0 = std::max(0, int((g.mean_v - g.radius) / opts.tile));
    int ty1 = std::min(gc.tiles_y - 1, int((g.mean_v + g.radius) / opts.tile));
    for (int ty = ty0; ty <= ty1; ++ty)
      for (int tx = tx0; tx <= tx1; ++tx)
        gc.tile_lists[size_t(ty) * gc.tiles_x + tx].push_back(int(pi));
  }
}

// Front-to-back compositing of one pixel over a depth-ordered candidate list.
inline void composite_pixel(double px, double py, const std::vector<GaussianProj>& proj,
                            const std::vector<int>& cand, const RenderOptions& opts,
                            Vec3& C, double& S0, double& S1, double& Tfin) {
  double T = 1.0;
  Vec3 acc = Vec3::Zero();
  double s0 = 0, s1 = 0;
  for (int pi : cand) {
    const GaussianProj& g = proj[size_t(pi)];
    const double dx = px - g.mean_u, dy = py - g.mean_v;
    const double q = g.con00 * dx * dx + 2.0 * g.con01 * dx * dy + g.con11 * dy * dy;
    if (q < 0) continue;
    double alpha = g.opa * std::exp(-0.5 * q);
    if (alpha < opts.alpha_cutoff) continue;
    alpha = std::min(opts.alpha_clamp, alpha);
    acc += T * alpha * g.color;
    s0 += T * alpha;
    s1 += T * alpha * g.z;
    T *= 1.0 - alpha;
    if (T < opts.transmittance_min) break;
  }
  C = acc + T * opts.background;
  S0 = s0;
  S1 = s1;
  Tfin = T;
}

void composite_forward(const Camera& cam, const RenderOptions& opts, GeomCache& gc,
                       RenderOutput& out) {
  out.color = Image(cam.height, cam.width);
  out.depth = DepthMap(cam.height, cam.width);
  out.alpha.assign(size_t(cam.height) * cam.width, 0.0);
  gc.S0.assign(size_t(cam.height) * cam.width, 0.0);
  gc.S1.assign(size_t(cam.height) * cam.width, 0.0);
  gc.Tfin.assign(size_t(cam.height) * cam.width, 1.0);
  const int n_tiles = gc.tiles_x * gc.tiles_y;
  parallel_for(0, n_tiles, opts.threads, [&](int ti) {
    const int tx = ti % gc.tiles_x, ty = ti / gc.tiles_x;
    const auto& cand = gc.tile_lists[size_t(ti)];
    const int x0 = tx * opts.tile, y0 = ty * opts.tile;
    const int x1 = std::min(cam.width, x0 + opts.tile), y1 = std::min(cam.height, y0 + opts.tile);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        Vec3 C;
        double s0, s1, tf;
        composite_pixel(x + 0.5, y + 0.5, gc.proj, cand, opts, C, s0, s1, tf);
        const size_t p = size_t(y) * cam.width + x;
        for (int c = 0; c < 3; ++c) out.color.at(y, x, c) = C[c];
        gc.S0[p] = s0;
        gc.S1[p] = s1;
        gc.Tfin[p] = tf;
        out.alpha[p] = s0;
        out.depth.at(y, x) = s0 > 1e-12 ? s1 / s0 : 0.0;
      }
  });
}

// Accumulators for the per-gaussian adjoints (full-K indexing).
struct PixelGrads {
  std::vector<double> mean;   // K x 2
  std::vector<double> conic;  // K x 3 (symmetric 2x2: m00, m01, m11)
  std::vector<double> z;      // K
  std::vector<double> color;  // K x 3
  std::vector<double> opa;    // K

  explicit PixelGrads(int K)
      : mean(size_t(K) * 2, 0.0),
        conic(size_t(K) * 3, 0.0),
        z(size_t(K), 0.0),
        color(size_t(K) * 3, 0.0),
        opa(size_t(K), 0.0) {}

  void add_from(const PixelGrads& o) {
    auto acc = [](std::vector<double>& a, const std::vector<double>& b) {
      for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    acc(mean, o.mean);
    acc(conic, o.conic);
    acc(z, o.z);
    acc(color, o.color);
    acc(opa, o.opa);
  }
};

struct Contribution {
  int pi;
  double alpha, g, dx, dy, T;
  bool clamped;
};

void composite_backward_pixel(double px, double py, const std::vector<GaussianProj>& proj,
                              const std::vector<int>& cand, const RenderOptions& opts,
                              const Vec3& dC, double dS0, double dS1, PixelGrads& pg,
                              std::vector<Contribution>& scratch) {
  scratch.clear();
  double T = 1.0;
  for (int pi : cand) {
    const GaussianProj& g = proj[size_t(pi)];
    const double dx = px - g.mean_u, dy = py - g.mean_v;
    const double q = g.con00 * dx * dx + 2.0 * g.con01 * dx * dy + g.con11 * dy * dy;
    if (q < 0) continue;
    const double gv = std::exp(-0.5 * q);
    double alpha = g.opa * gv;
    if (alpha < opts.alpha_cutoff) continue;
    const bool clamped = alpha > opts.alpha_clamp;
    if (clamped) alpha = opts.alpha_clamp;
    scratch.push_back({pi, alpha, gv, dx, dy, T, clamped});
    T *= 1.0 - alpha;
    if (T < opts.transmittance_min) break;
  }
  // Suffix accumulators walk back-to-front; the background term enters as the
  // final "contribution" carried by Tfin.
  Vec3 acc_rgb = T * opts.background;
  double acc_s0 = 0.0, acc_s1 = 0.0;
  for (int k = int(scratch.size()) - 1; k >= 0; --k) {
    const Contribution& cb = scratch[size_t(k)];
    const GaussianProj& g = proj[size_t(cb.pi)];
    const int i = g.idx;
    const double one_m = 1.0 - cb.alpha;
    // d/d color
    for (int c = 0; c < 3; ++c) pg.color[size_t(i) * 3 + c] += dC[c] * cb.T * cb.alpha;
    // d/d z (expected-depth numerator)
    pg.z[size_t(i)] += dS1 * cb.T * cb.alpha;
    // d/d alpha
    double dalpha = 0.0;
    for (int c = 0; c < 3; ++c) dalpha += dC[c] * (cb.T * g.color[c] - acc_rgb[c] / one_m);
    dalpha += dS0 * (cb.T - acc_s0 / one_m);
    dalpha += dS1 * (cb.T * g.z - acc_s1 / one_m);
    // update suffix sums to include this contribution
    acc_rgb += cb.T * cb.alpha * g.color;
    acc_s0 += cb.T * cb.alpha;
    acc_s1 += cb.T * cb.alpha * g.z;
    if (cb.clamped) continue;  // alpha saturated: no gradient into opacity/shape
    // alpha = opa * exp(-q/2)
    pg.opa[size_t(i)] += dalpha * cb.g;
    const double dq = -0.5 * g.opa * cb.g * dalpha;
    // q = d^T M d
    const double mdx = g.con00 * cb.dx + g.con01 * cb.dy;
    const double mdy = g.con01 * cb.dx + g.con11 * cb.dy;
    pg.mean[size_t(i) * 2] += -2.0 * mdx * dq;
    pg.mean[size_t(i) * 2 + 1] += -2.0 * mdy * dq;
    pg.conic[size_t(i) * 3] += dq * cb.dx * cb.dx;
    pg.conic[size_t(i) * 3 + 1] += dq * 2.0 * cb.dx * cb.dy;
    pg.conic[size_t(i) * 3 + 2] += dq * cb.dy * cb.dy;
  }
}

// Partial derivatives of the quaternion rotation matrix wrt (w,x,y,z).
void quat_rotation_partials(const Eigen::Vector4d& q, Mat3 dR[4]) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  dR[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  dR[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  dR[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  dR[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
}

// Chains the accumulated per-gaussian pixel adjoints through projection.
// d_mu_cam: gradient wrt the (possibly blur-transformed) world positions.
void backward_geometry(const Camera& cam, const Pose& pose,
                       const RenderOptions& opts, const GeomCache& gc, const PixelGrads& pg,
                       std::vector<double>& d_positions, SceneGrads& grads) {
  (void)opts;
  const Mat3 W = pose.R.transpose();
  for (const GaussianProj& g : gc.proj) {
    const int i = g.idx;
    // conic -> cov2 (M = cov2^{-1}; dL/dCov = -M dM M)
    Mat2 dM;
    dM << pg.conic[size_t(i) * 3], pg.conic[size_t(i) * 3 + 1] * 0.5,
        pg.conic[size_t(i) * 3 + 1] * 0.5, pg.conic[size_t(i) * 3 + 2];
    Mat2 M;
    M << g.con00, g.con01, g.con01, g.con11;
    Mat2 dCov = -M * dM * M;
    // cov2 = A sigma3 A^T + dilation I
    Eigen::Matrix<double, 2, 3> dA = 2.0 * dCov * g.A * g.sigma3;
    Mat3 dSigma3 = g.A.transpose() * dCov * g.A;
    // sigma3 = M3 M3^T with M3 = Rq diag(s)
    Mat3 M3 = g.Rq * g.svec.asDiagonal();
    Mat3 dM3 = 2.0 * dSigma3 * M3;
    Mat3 RtdM3 = g.Rq.transpose() * dM3;
    for (int k = 0; k < 3; ++k) grads.scale[size_t(i) * 3 + k] += RtdM3(k, k);
    Mat3 dRq = dM3 * g.svec.asDiagonal();
    Mat3 dRq_partial[4];
    quat_rotation_partials(g.qhat, dRq_partial);
    Eigen::Vector4d dqhat;
    for (int k = 0; k < 4; ++k) dqhat[k] = (dRq.cwiseProduct(dRq_partial[k])).sum();
    Eigen::Vector4d dq = (Eigen::Matrix4d::Identity() - g.qhat * g.qhat.transpose()) *
                         dqhat / g.qnorm;
    for (int k = 0; k < 4; ++k) grads.quat[size_t(i) * 4 + k] += dq[k];
    // A = J W
    Eigen::Matrix<double, 2, 3> dJ = dA * W.transpose();
    // J entries as functions of p_cam
    const double z = g.p_cam.z();
    const double inv_z = 1.0 / z;
    Vec3 dp_cam = Vec3::Zero();
    // mean = (fx x / z + cx, fy y / z + cy), unclamped x, y
    const double du = pg.mean[size_t(i) * 2], dv = pg.mean[size_t(i) * 2 + 1];
    dp_cam.x() += du * cam.fx * inv_z;
    dp_cam.y() += dv * cam.fy * inv_z;
    dp_cam.z() += -du * cam.fx * g.p_cam.x() * inv_z * inv_z -
                  dv * cam.fy * g.p_cam.y() * inv_z * inv_z;
    // J00 = fx/z, J02 = -fx txz / z, J11 = fy/z, J12 = -fy tyz / z
    dp_cam.z() += -dJ(0, 0) * cam.fx * inv_z * inv_z;
    dp_cam.z() += -dJ(1, 1) * cam.fy * inv_z * inv_z;
    double dtxz = -dJ(0, 2) * cam.fx * inv_z;
    double dtyz = -dJ(1, 2) * cam.fy * inv_z;
    dp_cam.z() += dJ(0, 2) * cam.fx * g.txz * inv_z * inv_z;
    dp_cam.z() += dJ(1, 2) * cam.fy * g.tyz * inv_z * inv_z;
    if (!g.clamp_x) {
      dp_cam.x() += dtxz * inv_z;
      dp_cam.z() += -dtxz * g.p_cam.x() * inv_z * inv_z;
    }
    if (!g.clamp_y) {
      dp_cam.y() += dtyz * inv_z;
      dp_cam.z() += -dtyz * g.p_cam.y() * inv_z * inv_z;
    }
    // expected-depth numerator uses z directly
    dp_cam.z() += pg.z[size_t(i)];
    // p_cam = W (p - t)
    Vec3 dpos = W.transpose() * dp_cam;
    d_positions[size_t(i) * 3] += dpos.x();
    d_positions[size_t(i) * 3 + 1] += dpos.y();
    d_positions[size_t(i) * 3 + 2] += dpos.z();
    grads.opacity[size_t(i)] += pg.opa[size_t(i)];
  }
}

void composite_backward(const Camera& cam, const RenderOptions& opts, const GeomCache& gc,
                        const Image* d_color, const DepthMap* d_depth, int K,
                        PixelGrads& total) {
  const int n_tiles = gc.tiles_x * gc.tiles_y;
  const int n_chunks = std::max(1, std::min(opts.threads, n_tiles));
  auto partial = std::vector<PixelGrads>(size_t(n_chunks), PixelGrads(K));
  parallel_for(0, n_chunks, n_chunks, [&](int chunk) {
    PixelGrads& pg = partial[size_t(chunk)];
    std::vector<Contribution> scratch;
    const int t0 = int(int64_t(n_tiles) * chunk / n_chunks);
    const int t1 = int(int64_t(n_tiles) * (chunk + 1) / n_chunks);
    for (int ti = t0; ti < t1; ++ti) {
      const int tx = ti % gc.tiles_x, ty = ti / gc.tiles_x;
      const auto& cand = gc.tile_lists[size_t(ti)];
      if (cand.empty()) continue;
      const int x0 = tx * opts.tile, y0 = ty * opts.tile;
      const int x1 = std::min(cam.width, x0 + opts.tile);
      const int y1 = std::min(cam.height, y0 + opts.tile);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const size_t p = size_t(y) * cam.width + x;
          Vec3 dC = Vec3::Zero();
          if (d_color)
            dC = Vec3(d_color->at(y, x, 0), d_color->at(y, x, 1), d_color->at(y, x, 2));
          double dS0 = 0, dS1 = 0;
          if (d_depth) {
            const double dd = d_depth->at(y, x);
            if (dd != 0.0 && gc.S0[p] > 1e-12) {
              dS1 = dd / gc.S0[p];
              dS0 = -dd * gc.S1[p] / (gc.S0[p] * gc.S0[p]);
            }
          }
          if (dC.isZero(0.0) && dS0 == 0.0 && dS1 == 0.0) continue;
          composite_backward_pixel(x + 0.5, y + 0.5, gc.proj, cand, opts, dC, dS0, dS1, pg,
                                   scratch);
        }
    }
  });
  for (const auto& pg : partial) total.add_from(pg);
}

}  // namespace

struct RenderCache {
  GeomCache geom;
  std::shared_ptr<ColorTape> colors;
  Camera cam;
  Pose pose;
  RenderOptions opts;
  const GaussianScene* scene = nullptr;
};

RenderPass::RenderPass() = default;
RenderPass::~RenderPass() = default;
RenderPass::RenderPass(RenderPass&&) noexcept = default;
RenderPass& RenderPass::operator=(RenderPass&&) noexcept = default;

namespace {

RenderPass render_impl(const GaussianScene& scene, const Camera& cam, const Pose& pose,
                       double omega, const Image& reference, const RenderOptions& opts,
                       bool with_grad) {
  cam.validate();
  RenderPass pass;
  pass.cache = std::make_unique<RenderCache>();
  RenderCache& rc = *pass.cache;
  rc.cam = cam;
  rc.pose = pose;
  rc.opts = opts;
  rc.scene = &scene;
  rc.colors = build_color_tape(scene, omega, pose.forward(), reference, with_grad);
  project_gaussians(scene, scene.mu.data(), rc.colors->colors, cam, pose, opts, rc.geom.proj);
  build_tiles(cam, opts, rc.geom);
  composite_forward(cam, opts, rc.geom, pass.out);
  return pass;
}

}  // namespace

std::vector<Vec3> gaussian_colors(const GaussianScene& scene, double omega,
                                  const Vec3& theta, const Image& reference) {
  if (omega < 0) throw SpecOutOfRange("omega must be >= 0");
  auto ct = build_color_tape(scene, omega, theta.normalized(), reference, false);
  return ct->colors;
}

RenderOutput render(const GaussianScene& scene, const Camera& cam, const Pose& pose,
                    double omega, const Image& reference, const RenderOptions& opts) {
  return render_impl(scene, cam, pose, omega, reference, opts, false).out;
}

RenderPass render_fwd(const GaussianScene& scene, const Camera& cam, const Pose& pose,
                      double omega, const Image& reference, const RenderOptions& opts) {
  return render_impl(scene, cam, pose, omega, reference, opts, true);
}

namespace {

// Shared by sharp and blurred backward: pixel adjoints -> geometry chain.
// The color-tape backward is the caller's job (blur accumulates first).
void backward_into(RenderCache& rc, const Image* d_color, const DepthMap* d_depth,
                   std::vector<double>& d_positions, SceneGrads& grads) {
  PixelGrads pg(rc.scene->K);
  composite_backward(rc.cam, rc.opts, rc.geom, d_color, d_depth, rc.scene->K, pg);
  backward_geometry(rc.cam, rc.pose, rc.opts, rc.geom, pg, d_positions, grads);
  // Stash color adjoints on the tape accumulator.
  auto& dcol = rc.colors->d_colors;
  for (int i = 0; i < rc.scene->K; ++i)
    for (int c = 0; c < 3; ++c) dcol.data[size_t(i) * 3 + c] += pg.color[size_t(i) * 3 + c];
}

void finish_color_backward(ColorTape& ct, const GaussianScene& scene, SceneGrads& grads) {
  bool any = false;
  for (double v : ct.d_colors.data)
    if (v != 0.0) {
      any = true;
      break;
    }
  if (!any) return;
  ct.tape.backward_from(ct.colors_node, ct.d_colors);
  const auto& gmu = ct.tape.grad_ref(ct.mu_leaf);
  for (size_t i = 0; i < grads.mu.size(); ++i) grads.mu[i] += gmu.data[i];
  const auto& gsh = ct.tape.grad_ref(ct.sh_leaf);
  for (size_t i = 0; i < grads.sh.size(); ++i) grads.sh[i] += gsh.data[i];
  const auto& gsa = ct.tape.grad_ref(ct.sampler_leaf);
  for (size_t i = 0; i < grads.sampler.size(); ++i) grads.sampler[i] += gsa.data[i];
  for (size_t e = 0; e < grads.appearance.grads.size(); ++e)
    for (size_t j = 0; j < grads.appearance.grads[e].numel(); ++j)
      grads.appearance.grads[e].data[j] += ct.app_grads.grads[e].data[j];
  (void)scene;
}

}  // namespace

void render_bwd(RenderPass& pass, const Image* d_color, const DepthMap* d_depth,
                SceneGrads& grads) {
  RenderCache& rc = *pass.cache;
  std::vector<double> d_positions(size_t(rc.scene->K) * 3, 0.0);
  backward_into(rc, d_color, d_depth, d_positions, grads);
  // Sharp render: transformed positions are the positions themselves.
  for (size_t i = 0; i < d_positions.size(); ++i) grads.mu[i] += d_positions[i];
  finish_color_backward(*rc.colors, *rc.scene, grads);
}

void blur_transform_at(const BlurParams& blur, double f, Mat3* R, Vec3* t) {
  Eigen::Matrix<double, 6, 1> xi = (1.0 - f) * blur.twist_start + f * blur.twist_end;
  *R = so3_exp(xi.head<3>());
  *t = xi.tail<3>();
}

struct BlurRenderPass::Impl {
  struct Sample {
    RenderCache rc;
    RenderOutput out;
    Mat3 R;
    Vec3 t;
    Vec3 rho;  // interpolated rotation vector
    double f = 0;
    double phi = 0;
    std::vector<double> positions;  // transformed
  };
  std::vector<Sample> samples;
  std::shared_ptr<ColorTape> colors;
  const GaussianScene* scene = nullptr;
  BlurParams blur;
};

BlurRenderPass::BlurRenderPass() = default;
BlurRenderPass::~BlurRenderPass() = default;
BlurRenderPass::BlurRenderPass(BlurRenderPass&&) noexcept = default;
BlurRenderPass& BlurRenderPass::operator=(BlurRenderPass&&) noexcept = default;

BlurRenderPass render_blurred_fwd(const GaussianScene& scene, const Camera& cam,
                                  const Pose& pose, const BlurParams& blur, double omega,
                                  const Image& reference, const RenderOptions& opts) {
  cam.validate();
  const int n = int(blur.phi_logits.size());
  if (n < 1) throw SpecOutOfRange("blur needs n >= 1 samples");
  BlurRenderPass pass;
  pass.impl = std::make_unique<BlurRenderPass::Impl>();
  auto& impl = *pass.impl;
  impl.scene = &scene;
  impl.blur = blur;
  impl.colors = build_color_tape(scene, omega, pose.forward(), reference,
                                 /*with_grad=*/true);
  const std::vector<double> phi = blur.phi();
  impl.samples.resize(size_t(n));
  for (int k = 0; k < n; ++k) {
    auto& smp = impl.samples[size_t(k)];
    smp.f = n == 1 ? 0.5 : double(k) / double(n - 1);
    smp.phi = phi[size_t(k)];
    Eigen::Matrix<double, 6, 1> xi =
        (1.0 - smp.f) * blur.twist_start + smp.f * blur.twist_end;
    smp.rho = xi.head<3>();
    smp.R = so3_exp(smp.rho);
    smp.t = xi.tail<3>();
    smp.positions.resize(size_t(scene.K) * 3);
    for (int i = 0; i < scene.K; ++i) {
      Vec3 p(scene.mu[size_t(i) * 3], scene.mu[size_t(i) * 3 + 1], scene.mu[size_t(i) * 3 + 2]);
      Vec3 q = smp.R * p + smp.t;
      smp.positions[size_t(i) * 3] = q.x();
      smp.positions[size_t(i) * 3 + 1] = q.y();
      smp.positions[size_t(i) * 3 + 2] = q.z();
    }
    smp.rc.cam = cam;
    smp.rc.pose = pose;
    smp.rc.opts = opts;
    smp.rc.scene = &scene;
    smp.rc.colors = impl.colors;
    project_gaussians(scene, smp.positions.data(), impl.colors->colors, cam, pose, opts,
                      smp.rc.geom.proj);
    build_tiles(cam, opts, smp.rc.geom);
    composite_forward(cam, opts, smp.rc.geom, smp.out);
  }
  // phi-weighted composite of the sample images and depths.
  pass.color = Image(cam.height, cam.width);
  pass.depth = DepthMap(cam.height, cam.width);
  for (int k = 0; k < n; ++k) {
    const auto& smp = impl.samples[size_t(k)];
    if (k == 0) {
      for (size_t i = 0; i < pass.color.data.size(); ++i)
        pass.color.data[i] = smp.phi * smp.out.color.data[i];
      for (size_t i = 0; i < pass.depth.data.size(); ++i)
        pass.depth.data[i] = smp.phi * smp.out.depth.data[i];
    } else {
      for (size_t i = 0; i < pass.color.data.size(); ++i)
        pass.color.data[i] += smp.phi * smp.out.color.data[i];
      for (size_t i = 0; i < pass.depth.data.size(); ++i)
        pass.depth.data[i] += smp.phi * smp.out.depth.data[i];
    }
  }
  return pass;
}

Image render_blurred(const GaussianScene& scene, const Camera& cam, const Pose& pose,
                     const BlurParams& blur, double omega, const Image& reference,
                     const RenderOptions& opts) {
  return render_blurred_fwd(scene, cam, pose, blur, omega, reference, opts).color;
}

void render_blurred_bwd(BlurRenderPass& pass, const Image* d_color,
                        const DepthMap* d_depth, SceneGrads& grads) {
  auto& impl = *pass.impl;
  const GaussianScene& scene = *impl.scene;
  const int n = int(impl.samples.size());
  std::vector<double> dphi(size_t(n), 0.0);
  for (int k = 0; k < n; ++k) {
    auto& smp = impl.samples[size_t(k)];
    // dL/d(sample image) = phi_k * dL/d(blur image); same for depth.
    Image dck;
    DepthMap ddk;
    if (d_color) {
      dck = *d_color;
      for (auto& v : dck.data) v *= smp.phi;
      for (size_t i = 0; i < dck.data.size(); ++i)
        dphi[size_t(k)] += d_color->data[i] * smp.out.color.data[i];
    }
    if (d_depth) {
      ddk = *d_depth;
      for (auto& v : ddk.data) v *= smp.phi;
      for (size_t i = 0; i < ddk.data.size(); ++i)
        dphi[size_t(k)] += d_depth->data[i] * smp.out.depth.data[i];
    }
    std::vector<double> d_positions(size_t(scene.K) * 3, 0.0);
    backward_into(smp.rc, d_color ? &dck : nullptr, d_depth ? &ddk : nullptr, d_positions,
                  grads);
    // positions' = R mu + t
    Vec3 sum_dt = Vec3::Zero();
    Vec3 sum_rot = Vec3::Zero();  // sum_i [mu_i]x (R^T dpos_i)
    for (int i = 0; i < scene.K; ++i) {
      Vec3 dp(d_positions[size_t(i) * 3], d_positions[size_t(i) * 3 + 1],
              d_positions[size_t(i) * 3 + 2]);
      if (dp.isZero(0.0)) continue;
      Vec3 mu_i(scene.mu[size_t(i) * 3], scene.mu[size_t(i) * 3 + 1],
                scene.mu[size_t(i) * 3 + 2]);
      Vec3 dmu = smp.R.transpose() * dp;
      grads.mu[size_t(i) * 3] += dmu.x();
      grads.mu[size_t(i) * 3 + 1] += dmu.y();
      grads.mu[size_t(i) * 3 + 2] += dmu.z();
      sum_dt += dp;
      sum_rot += mu_i.cross(dmu);
    }
    // rho chain through the right Jacobian of so(3) exp.
    Vec3 drho = so3_right_jacobian(smp.rho).transpose() * sum_rot;
    const double f = smp.f;
    grads.twist_start.head<3>() += (1.0 - f) * drho;
    grads.twist_end.head<3>() += f * drho;
    grads.twist_start.tail<3>() += (1.0 - f) * sum_dt;
    grads.twist_end.tail<3>() += f * sum_dt;
  }
  // softmax backward for phi logits
  const std::vector<double> phi = impl.blur.phi();
  double dot = 0;
  for (int k = 0; k < n; ++k) dot += phi[size_t(k)] * dphi[size_t(k)];
  for (int k = 0; k < n; ++k)
    grads.phi_logits[size_t(k)] += phi[size_t(k)] * (dphi[size_t(k)] - dot);
  finish_color_backward(*impl.colors, scene, grads);
}

}  // namespace rap
