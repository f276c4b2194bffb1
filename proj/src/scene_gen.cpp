#include "rap/scene_gen.hpp"

namespace rap {

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

// Push one gaussian; target_color in (0,1)^3 is encoded into the SH DC term
// so the structured appearance MLP reproduces it (gain 4, see below).
void push_gaussian(GaussianScene& s, Rng& rng, const Vec3& pos, const Vec3& scale,
                   double opacity, const Vec3& target_color) {
  s.mu.insert(s.mu.end(), {pos.x(), pos.y(), pos.z()});
  Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  s.quat.insert(s.quat.end(), {q[0], q[1], q[2], q[3]});
  s.scale.insert(s.scale.end(), {scale.x(), scale.y(), scale.z()});
  s.opacity.push_back(opacity);
  constexpr double kSH0 = 0.28209479177387814;
  for (int b = 0; b < s.sh_bands; ++b)
    for (int c = 0; c < 3; ++c) {
      if (b == 0) {
        double v = logit(std::min(0.98, std::max(0.02, target_color[c]))) / (4.0 * kSH0);
        s.sh.push_back(v);
      } else {
        s.sh.push_back(rng.uniform(-0.12, 0.12));
      }
    }
  s.sampler.insert(s.sampler.end(), {rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)});
}

const Vec3 kPalette[] = {
    {0.86, 0.29, 0.24}, {0.95, 0.67, 0.18}, {0.34, 0.68, 0.28}, {0.22, 0.48, 0.85},
    {0.63, 0.32, 0.73}, {0.90, 0.42, 0.62}, {0.25, 0.72, 0.70}, {0.78, 0.74, 0.26},
};
constexpr int kPaletteSize = int(sizeof(kPalette) / sizeof(kPalette[0]));

// Structured appearance MLP: the first hidden units pass through the SH base
// color, an appearance-feature mix, and a positional mix; the output layer
// recombines them as logits. The rest of the width stays available for
// fitting from scratch.
void build_world_appearance(GaussianScene& s, Rng& rng) {
  s.appearance.build(rng);
  auto& st = s.appearance.store;
  auto& w1 = st[s.appearance.mlp1.w];
  auto& b1 = st[s.appearance.mlp1.b];
  auto& w2 = st[s.appearance.mlp2.w];
  auto& b2 = st[s.appearance.mlp2.b];
  auto& w3 = st[s.appearance.mlp3.w];
  auto& b3 = st[s.appearance.mlp3.b];
  w1.zero();
  b1.zero();
  w2.zero();
  b2.zero();
  w3.zero();
  b3.zero();
  const int in = AppearanceModel::kMlpIn;   // 57
  const int hid = AppearanceModel::kHidden;  // 64
  // inputs: [mu(3) | sh color(3) | features(48) | theta(3)]
  // units 0..2: sh color + 2
  for (int c = 0; c < 3; ++c) {
    w1.data[size_t(3 + c) * hid + c] = 1.0;
    b1.data[size_t(c)] = 2.0;
  }
  // units 3..5: per-channel appearance mixes + 2.5
  for (int c = 0; c < 3; ++c) {
    for (int f = 0; f < kAppearanceChannels; ++f)
      w1.data[size_t(6 + f) * hid + 3 + c] = rng.uniform(-0.15, 0.15);
    b1.data[size_t(3 + c)] = 2.5;
  }
  // units 6..8: positional mixes + 2
  for (int c = 0; c < 3; ++c) {
    for (int p = 0; p < 3; ++p) w1.data[size_t(p) * hid + 6 + c] = rng.uniform(-0.5, 0.5);
    b1.data[size_t(6 + c)] = 2.0;
  }
  (void)in;
  // second layer: identity on the first 9 units
  for (int j = 0; j < 9; ++j) w2.data[size_t(j) * hid + j] = 1.0;
  // output logits per channel
  for (int c = 0; c < 3; ++c) {
    w3.data[size_t(c) * 3 + c] = 4.0;        // sh color path (bias 2 removed below)
    w3.data[size_t(3 + c) * 3 + c] = 0.9;    // appearance path
    w3.data[size_t(6 + c) * 3 + c] = 0.5;    // positional path
    b3.data[size_t(c)] = -4.0 * 2.0 - 0.9 * 2.5 - 0.5 * 2.0;
  }
}

}  // namespace

GaussianScene generate_scene(const WorldSpec& spec, Rng& rng) {
  if (spec.gaussians < 50 || spec.gaussians > 50000)
    throw SpecOutOfRange("gaussian count must be in [50, 50000]");
  if (!(spec.extent > 10.0)) throw SpecOutOfRange("extent too small");
  GaussianScene s;
  s.K = spec.gaussians;
  s.sh_bands = spec.sh_bands;
  s.blur_samples = spec.blur_samples;
  const double E = spec.extent;

  const int n_struct = int(0.35 * spec.gaussians);  // floor + walls
  const int n_land = std::min(spec.gaussians - n_struct, spec.landmarks * 14);
  const int n_cluster = spec.gaussians - n_struct - n_land;

  // floor (y up; floor below the content at y = -0.45 E) and four walls
  const int n_floor = n_struct / 2;
  for (int i = 0; i < n_floor; ++i) {
    Vec3 p(rng.uniform(-1.35 * E, 1.35 * E), -0.45 * E + rng.uniform(-2.0, 2.0),
           rng.uniform(-1.35 * E, 1.35 * E));
    int pal = (int(std::floor(p.x() / (0.4 * E))) + int(std::floor(p.z() / (0.4 * E)))) & 1;
    Vec3 col = pal ? Vec3(0.62, 0.58, 0.52) : Vec3(0.40, 0.42, 0.46);
    col += Vec3(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05));
    push_gaussian(s, rng, p, Vec3(E * 0.085, 2.5, E * 0.085), rng.uniform(0.85, 0.97), col);
  }
  for (int i = n_floor; i < n_struct; ++i) {
    int wall = i % 4;
    double a = rng.uniform(-1.35 * E, 1.35 * E);
    double h = rng.uniform(-0.45 * E, 0.75 * E);
    Vec3 p = wall == 0   ? Vec3(a, h, -1.35 * E)
             : wall == 1 ? Vec3(a, h, 1.35 * E)
             : wall == 2 ? Vec3(-1.35 * E, h, a)
                         : Vec3(1.35 * E, h, a);
    Vec3 along = (wall < 2) ? Vec3(E * 0.09, E * 0.09, 3.0) : Vec3(3.0, E * 0.09, E * 0.09);
    Vec3 base = kPalette[size_t((wall * 2 + (std::abs(a) > 0.6 * E)) % kPaletteSize)];
    Vec3 col = 0.35 * base + Vec3(0.30, 0.30, 0.33);
    col += Vec3(rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04));
    push_gaussian(s, rng, p, along, rng.uniform(0.85, 0.97), col);
  }

  // clusters
  struct Blob {
    Vec3 c;
    Vec3 col;
    double spread;
  };
  std::vector<Blob> blobs;
  for (int b = 0; b < spec.clusters; ++b) {
    Vec3 c = rng.in_ball(0.62 * E);
    c.y() = rng.uniform(-0.34 * E, 0.30 * E);
    blobs.push_back({c, kPalette[size_t(rng.uniform_int(kPaletteSize))], rng.uniform(0.06 * E, 0.16 * E)});
  }
  for (int i = 0; i < n_cluster; ++i) {
    const Blob& b = blobs[size_t(i % std::max(1, spec.clusters))];
    Vec3 p = b.c + Vec3(rng.normal(), rng.normal(), rng.normal()) * b.spread * 0.5;
    Vec3 col = b.col + Vec3(rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12));
    Vec3 sc(rng.uniform(3.0, 9.0), rng.uniform(3.0, 9.0), rng.uniform(3.0, 9.0));
    push_gaussian(s, rng, p, sc, rng.uniform(0.55, 0.92), col);
  }

  // landmarks: large saturated blobs placed asymmetrically
  for (int i = 0; i < n_land; ++i) {
    int which = i % std::max(1, spec.landmarks);
    double ang = 2.0 * kPi * (0.13 + 0.31 * which);
    Vec3 c(0.45 * E * std::cos(ang), 0.12 * E * (which - 1), 0.45 * E * std::sin(ang));
    Vec3 p = c + Vec3(rng.normal(), rng.normal(), rng.normal()) * 6.0;
    Vec3 col = kPalette[size_t((which * 3 + 1) % kPaletteSize)];
    Vec3 sc(rng.uniform(10.0, 22.0), rng.uniform(10.0, 22.0), rng.uniform(10.0, 22.0));
    push_gaussian(s, rng, p, sc, rng.uniform(0.88, 0.97), col);
  }

  build_world_appearance(s, rng);
  s.blur.clear();
  s.snap_to_f32();
  s.validate();
  return s;
}

TrajectoryPattern trajectory_pattern_from_string(const std::string& s) {
  if (s == "orbit") return TrajectoryPattern::kOrbit;
  if (s == "dolly") return TrajectoryPattern::kDolly;
  if (s == "grid") return TrajectoryPattern::kGrid;
  throw ConfigError("unknown trajectory pattern: " + s);
}

std::vector<Pose> generate_trajectory(const GaussianScene& scene, TrajectoryPattern pattern,
                                      int count, Rng& rng) {
  if (count < 1) throw SpecOutOfRange("trajectory count must be >= 1");
  const Vec3 c = scene.centroid();
  const double r = std::max(40.0, scene.bounding_radius() * 0.62);
  std::vector<Pose> poses;
  poses.reserve(size_t(count));
  auto aim = [&](const Vec3& eye) {
    Vec3 target = c + Vec3(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)) *
                          (0.002 * r);
    return look_at(eye, target);
  };
  switch (pattern) {
    case TrajectoryPattern::kOrbit: {
      // Full sweep when the step stays below 15 deg, else a partial arc.
      const double arc = std::min(360.0, (count - 1) * 14.0);
      const double a0 = rng.uniform(0.0, 2.0 * kPi);
      for (int i = 0; i < count; ++i) {
        double frac = count == 1 ? 0.0 : double(i) / (count - 1) * (arc / 360.0);
        double a = a0 + 2.0 * kPi * frac;
        Vec3 eye = c + Vec3(r * std::cos(a), 0.10 * r * std::sin(2.5 * a), r * std::sin(a));
        poses.push_back(aim(eye));
      }
      break;
    }
    case TrajectoryPattern::kDolly: {
      const double dist = 0.95 * r;
      const double half = std::min(0.5 * r, 0.055 * r * count);
      const double a0 = rng.uniform(0.0, 2.0 * kPi);
      Vec3 fwd(std::cos(a0), 0, std::sin(a0));
      Vec3 side(-std::sin(a0), 0, std::cos(a0));
      for (int i = 0; i < count; ++i) {
        double u = count == 1 ? 0.0 : -1.0 + 2.0 * double(i) / (count - 1);
        Vec3 eye = c + fwd * dist + side * (half * u) + Vec3(0, 0.05 * r, 0);
        poses.push_back(aim(eye));
      }
      break;
    }
    case TrajectoryPattern::kGrid: {
      const int cols = std::max(1, int(std::ceil(std::sqrt(double(count)))));
      const int rows = (count + cols - 1) / cols;
      const double arc_deg = std::min(120.0, (cols - 1) * 12.0);
      const double a0 = rng.uniform(0.0, 2.0 * kPi);
      int emitted = 0;
      for (int rrow = 0; rrow < rows && emitted < count; ++rrow) {
        for (int ci = 0; ci < cols && emitted < count; ++ci) {
          // serpentine order keeps neighbor steps small
          int col = (rrow % 2 == 0) ? ci : cols - 1 - ci;
          double a = a0 + deg_to_rad(arc_deg) * (cols == 1 ? 0.0 : double(col) / (cols - 1));
          double h = rows == 1 ? 0.0 : -0.12 * r + 0.24 * r * double(rrow) / (rows - 1);
          Vec3 eye = c + Vec3(r * std::cos(a), h, r * std::sin(a));
          poses.push_back(aim(eye));
          ++emitted;
        }
      }
      break;
    }
  }
  return poses;
}

void appearance_tint(uint64_t seed, Vec3* gain, Vec3* bias) {
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 17);
  for (int c = 0; c < 3; ++c) {
    (*gain)[c] = rng.uniform(0.55, 1.45);
    (*bias)[c] = rng.uniform(-0.08, 0.08);
  }
}

Pose canonical_view(const GaussianScene& scene) {
  const Vec3 c = scene.centroid();
  const double r = std::max(40.0, scene.bounding_radius() * 0.62);
  return look_at(c + Vec3(0.92 * r, 0.18 * r, 0.40 * r), c);
}

Image make_appearance_variant(const GaussianScene& scene, const Camera& cam,
                              uint64_t variant_seed) {
  // Intrinsic render (omega = 0 ignores the reference entirely).
  Image neutral(cam.height, cam.width, 0.5);
  RenderOptions opts;
  opts.threads = default_threads();
  RenderOutput out = render(scene, cam, canonical_view(scene), 0.0, neutral, opts);
  Vec3 gain, bias;
  appearance_tint(variant_seed, &gain, &bias);
  return apply_tint(out.color, gain, bias);
}

}  // namespace rap
