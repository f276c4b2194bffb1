#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>
#include <functional>

#include <Eigen/Dense>

namespace rap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

constexpr double kPi = 3.14159265358979323846;

inline double deg_to_rad(double d) { return d * kPi / 180.0; }
inline double rad_to_deg(double r) { return r * 180.0 / kPi; }

// Error hierarchy. The `kind()` string matches the error names used in the
// CLI diagnostics and tests.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(kind + ": " + msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define RAP_DEFINE_ERROR(Name)                                       \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& msg) : Error(#Name, msg) {}     \
  }

RAP_DEFINE_ERROR(DegenerateInput);
RAP_DEFINE_ERROR(BehindCamera);
RAP_DEFINE_ERROR(InvalidDepth);
RAP_DEFINE_ERROR(SpecOutOfRange);
RAP_DEFINE_ERROR(CorruptFile);
RAP_DEFINE_ERROR(ShapeMismatch);
RAP_DEFINE_ERROR(ChannelMismatch);
RAP_DEFINE_ERROR(ImageTooSmall);
RAP_DEFINE_ERROR(Diverged);
RAP_DEFINE_ERROR(ConfigError);
RAP_DEFINE_ERROR(InsufficientCorrespondences);
RAP_DEFINE_ERROR(NoConsensus);
RAP_DEFINE_ERROR(NoVisibleGeometry);
RAP_DEFINE_ERROR(IoError);

#undef RAP_DEFINE_ERROR

// Deterministic RNG. Thin wrapper over splitmix64/xoshiro-style mixing so
// sampled streams are identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { state_ = seed + 0x9e3779b97f4a7c15ULL; }

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }  // [0, n)

  double normal() {
    // Box-Muller; one value per call keeps the stream simple to reason about.
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  Vec3 unit_vector() {
    // Marsaglia rejection on the sphere.
    while (true) {
      double a = uniform(-1.0, 1.0), b = uniform(-1.0, 1.0);
      double s = a * a + b * b;
      if (s >= 1.0 || s == 0.0) continue;
      double r = 2.0 * std::sqrt(1.0 - s);
      return Vec3(a * r, b * r, 1.0 - 2.0 * s);
    }
  }

  Vec3 in_ball(double radius) {
    while (true) {
      Vec3 p(uniform(-1.0, 1.0), uniform(-1.0, 1.0), uniform(-1.0, 1.0));
      if (p.squaredNorm() <= 1.0) return p * radius;
    }
  }

  // Derive an independent stream; `salt` tags the purpose.
  Rng fork(uint64_t salt) {
    Rng r;
    r.state_ = state_ ^ (0x6a09e667f3bcc909ULL + salt * 0x3c6ef372fe94f82bULL);
    r.next_u64();
    return r;
  }

 private:
  uint64_t state_;
};

// Static-partition parallel for. Results must not depend on the partition:
// callers either write disjoint outputs or reduce per-chunk results in index
// order afterwards.
void parallel_for(int begin, int end, int num_threads,
                  const std::function<void(int)>& fn);

int default_threads();
void set_default_threads(int n);

}  // namespace rap
