#include "rap/ssim.hpp"

namespace rap {

namespace {

constexpr int kWin = 11;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_kernel() {
  static const std::vector<double> k = [] {
    std::vector<double> v(kWin);
    double sum = 0;
    for (int i = 0; i < kWin; ++i) {
      double x = i - kWin / 2;
      v[size_t(i)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
      sum += v[size_t(i)];
    }
    for (auto& x : v) x /= sum;
    return v;
  }();
  return k;
}

struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
  Plane() = default;
  Plane(int h_, int w_) : h(h_), w(w_), v(size_t(h_) * w_, 0.0) {}
  double& at(int y, int x) { return v[size_t(y) * w + x]; }
  double at(int y, int x) const { return v[size_t(y) * w + x]; }
};

// Valid separable filtering: output (h-10) x (w-10).
Plane filter_valid(const Plane& p) {
  const auto& k = gaussian_kernel();
  Plane tmp(p.h, p.w - kWin + 1);
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < tmp.w; ++x) {
      double acc = 0;
      for (int t = 0; t < kWin; ++t) acc += k[size_t(t)] * p.at(y, x + t);
      tmp.at(y, x) = acc;
    }
  Plane out(p.h - kWin + 1, tmp.w);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double acc = 0;
      for (int t = 0; t < kWin; ++t) acc += k[size_t(t)] * tmp.at(y + t, x);
      out.at(y, x) = acc;
    }
  return out;
}

// Adjoint of filter_valid: scatter window gradients back to pixels.
void filter_valid_adjoint(const Plane& dmap, Plane& dpix) {
  const auto& k = gaussian_kernel();
  Plane tmp(dmap.h, dpix.w);
  for (int y = 0; y < dmap.h; ++y)
    for (int x = 0; x < dmap.w; ++x) {
      const double g = dmap.at(y, x);
      if (g == 0.0) continue;
      for (int t = 0; t < kWin; ++t) tmp.at(y, x + t) += k[size_t(t)] * g;
    }
  for (int y = 0; y < dmap.h; ++y)
    for (int x = 0; x < dpix.w; ++x) {
      const double g = tmp.at(y, x);
      if (g == 0.0) continue;
      for (int t = 0; t < kWin; ++t) dpix.at(y + t, x) += k[size_t(t)] * g;
    }
}

}  // namespace

double ssim(const Image& a, const Image& b, Image* d_a) {
  if (!a.same_shape(b)) throw ShapeMismatch("ssim: image dimensions differ");
  if (a.height < kWin || a.width < kWin) throw ShapeMismatch("ssim: image smaller than window");
  const int oh = a.height - kWin + 1, ow = a.width - kWin + 1;
  const double n_total = double(oh) * ow * 3;
  double mean = 0;
  if (d_a) {
    *d_a = Image(a.height, a.width);
    for (auto& v : d_a->data) v = 0.0;
  }
  for (int c = 0; c < 3; ++c) {
    Plane pa(a.height, a.width), pb(a.height, a.width);
    Plane paa(a.height, a.width), pbb(a.height, a.width), pab(a.height, a.width);
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) {
        double va = a.at(y, x, c), vb = b.at(y, x, c);
        pa.at(y, x) = va;
        pb.at(y, x) = vb;
        paa.at(y, x) = va * va;
        pbb.at(y, x) = vb * vb;
        pab.at(y, x) = va * vb;
      }
    Plane mu1 = filter_valid(pa), mu2 = filter_valid(pb);
    Plane m11 = filter_valid(paa), m22 = filter_valid(pbb), m12 = filter_valid(pab);
    Plane dmu1(oh, ow), dm11(oh, ow), dm12(oh, ow);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const double u1 = mu1.at(y, x), u2 = mu2.at(y, x);
        const double s11 = m11.at(y, x) - u1 * u1;
        const double s22 = m22.at(y, x) - u2 * u2;
        const double s12 = m12.at(y, x) - u1 * u2;
        const double A1 = 2 * u1 * u2 + kC1, A2 = 2 * s12 + kC2;
        const double B1 = u1 * u1 + u2 * u2 + kC1, B2 = s11 + s22 + kC2;
        const double S = (A1 * A2) / (B1 * B2);
        mean += S;
        if (d_a) {
          // dS/dmu1 with sigma terms expanded in mu1
          const double dA1 = 2 * u2, dA2_du1 = -2 * u2;
          const double dB1 = 2 * u1, dB2_du1 = -2 * u1;
          dmu1.at(y, x) = (dA1 * A2 + A1 * dA2_du1) / (B1 * B2) -
                          S * (dB1 / B1 + dB2_du1 / B2);
          dm11.at(y, x) = -S / B2;
          dm12.at(y, x) = 2 * A1 / (B1 * B2);
        }
      }
    if (d_a) {
      Plane dpix(a.height, a.width);
      // mu1 path
      Plane scaled = dmu1;
      for (auto& v : scaled.v) v /= n_total;
      filter_valid_adjoint(scaled, dpix);
      // m11 path: d(a^2) = 2 a
      scaled = dm11;
      for (auto& v : scaled.v) v /= n_total;
      Plane tmp(a.height, a.width);
      filter_valid_adjoint(scaled, tmp);
      for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) dpix.at(y, x) += 0.0;  // merged below
      // m12 path: d(ab)/da = b
      Plane scaled12 = dm12;
      for (auto& v : scaled12.v) v /= n_total;
      Plane tmp12(a.height, a.width);
      filter_valid_adjoint(scaled12, tmp12);
      for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
          double g = dpix.at(y, x) + tmp.at(y, x) * 2.0 * pa.at(y, x) +
                     tmp12.at(y, x) * pb.at(y, x);
          d_a->at(y, x, c) += g;
        }
    }
  }
  return mean / n_total;
}

double dssim(const Image& a, const Image& b, Image* d_a) {
  double s = ssim(a, b, d_a);
  if (d_a)
    for (auto& v : d_a->data) v *= -0.5;
  return (1.0 - s) * 0.5;
}

}  // namespace rap
