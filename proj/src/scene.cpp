#include "rap/scene.hpp"

#include <cstring>
#include <fstream>

namespace rap {

void AppearanceModel::build(Rng& rng) {
  store.entries.clear();
  enc1.build(store, "enc1", 3, 16, 3, 2, 1, rng);
  enc2.build(store, "enc2", 16, 32, 3, 2, 1, rng);
  enc3.build(store, "enc3", 32, kAppearanceChannels, 3, 1, 1, rng);
  mlp1.build(store, "mlp1", kMlpIn, kHidden, rng);
  mlp2.build(store, "mlp2", kHidden, kHidden, rng);
  mlp3.build(store, "mlp3", kHidden, 3, rng);
}

std::vector<double> BlurParams::phi() const {
  std::vector<double> p(phi_logits.size());
  double mx = phi_logits[0];
  for (double v : phi_logits) mx = std::max(mx, v);
  double sum = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(phi_logits[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

void GaussianScene::validate() const {
  auto fail = [](const std::string& m) { throw SpecOutOfRange("scene invariant: " + m); };
  if (K <= 0) fail("K must be positive");
  if (sh_bands != 1 && sh_bands != 4 && sh_bands != 9 && sh_bands != 16)
    fail("sh bands must be in {1,4,9,16}");
  if (blur_samples < 1) fail("blur sample count must be >= 1");
  if (mu.size() != size_t(K) * 3 || quat.size() != size_t(K) * 4 ||
      scale.size() != size_t(K) * 3 || opacity.size() != size_t(K) ||
      sh.size() != size_t(K) * sh_bands * 3 || sampler.size() != size_t(K) * 2)
    fail("array sizes inconsistent with K");
  for (int i = 0; i < K; ++i) {
    double qn = 0;
    for (int j = 0; j < 4; ++j) qn += quat[size_t(i) * 4 + j] * quat[size_t(i) * 4 + j];
    if (std::abs(std::sqrt(qn) - 1.0) > 1e-6) fail("quaternion not unit norm");
    for (int j = 0; j < 3; ++j)
      if (!(scale[size_t(i) * 3 + j] > 0)) fail("scale not positive");
    if (!(opacity[size_t(i)] > 0.0) || !(opacity[size_t(i)] < 1.0)) fail("opacity outside (0,1)");
    for (int j = 0; j < 2; ++j)
      if (!std::isfinite(sampler[size_t(i) * 2 + j])) fail("sampler not finite");
  }
  for (double v : mu)
    if (!std::isfinite(v)) fail("position not finite");
  for (const auto& b : blur) {
    if (int(b.phi_logits.size()) != blur_samples) fail("phi length != blur sample count");
    auto p = b.phi();
    double sum = 0;
    for (double v : p) sum += v;
    if (std::abs(sum - 1.0) > 1e-9) fail("phi does not sum to 1");
  }
}

namespace {
// The volatile keeps the narrowing round-trip from being elided at -O3 with
// wide vector ISAs.
double snap1(double x) {
  volatile float f = float(x);
  return double(f);
}
void snap_vec(std::vector<double>& v) {
  for (double& x : v) x = snap1(x);
}
}  // namespace

void GaussianScene::snap_to_f32() {
  snap_vec(mu);
  snap_vec(quat);
  snap_vec(scale);
  snap_vec(opacity);
  snap_vec(sh);
  snap_vec(sampler);
  for (auto& e : appearance.store.entries)
    for (auto& x : e.value.data) x = snap1(x);
  for (auto& b : blur) {
    for (int i = 0; i < 6; ++i) {
      b.twist_start[i] = snap1(b.twist_start[i]);
      b.twist_end[i] = snap1(b.twist_end[i]);
    }
    snap_vec(b.phi_logits);
  }
}

Vec3 GaussianScene::centroid() const {
  Vec3 c = Vec3::Zero();
  for (int i = 0; i < K; ++i)
    c += Vec3(mu[size_t(i) * 3], mu[size_t(i) * 3 + 1], mu[size_t(i) * 3 + 2]);
  return c / double(K);
}

double GaussianScene::bounding_radius() const {
  Vec3 c = centroid();
  double r = 0;
  for (int i = 0; i < K; ++i) {
    Vec3 p(mu[size_t(i) * 3], mu[size_t(i) * 3 + 1], mu[size_t(i) * 3 + 2]);
    r = std::max(r, (p - c).norm());
  }
  return r;
}

namespace {

void write_u32(std::ostream& f, uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}
uint32_t read_u32(std::istream& f) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  if (!f) throw CorruptFile("scene file truncated");
  return v;
}
void write_f32_array(std::ostream& f, const std::vector<double>& v) {
  std::vector<float> tmp(v.size());
  for (size_t i = 0; i < v.size(); ++i) tmp[i] = float(v[i]);
  f.write(reinterpret_cast<const char*>(tmp.data()), std::streamsize(tmp.size() * 4));
}
void read_f32_array(std::istream& f, std::vector<double>& v, size_t n) {
  std::vector<float> tmp(n);
  f.read(reinterpret_cast<char*>(tmp.data()), std::streamsize(n * 4));
  if (!f) throw CorruptFile("scene file truncated");
  v.resize(n);
  for (size_t i = 0; i < n; ++i) v[i] = double(tmp[i]);
}

}  // namespace

void save_scene(const GaussianScene& s, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write("RSCN", 4);
  write_u32(f, 1);  // version
  write_u32(f, uint32_t(s.K));
  write_u32(f, uint32_t(s.sh_bands));
  write_u32(f, uint32_t(s.blur_samples));
  write_f32_array(f, s.mu);
  write_f32_array(f, s.quat);
  write_f32_array(f, s.scale);
  write_f32_array(f, s.opacity);
  write_f32_array(f, s.sh);
  write_f32_array(f, s.sampler);
  // Appearance network block (MLP + encoder), flat in registration order.
  size_t w = 0;
  for (const auto& e : s.appearance.store.entries) w += e.value.numel();
  write_u32(f, uint32_t(w));
  for (const auto& e : s.appearance.store.entries) {
    std::vector<double> tmp(e.value.data.begin(), e.value.data.end());
    write_f32_array(f, tmp);
  }
  write_u32(f, uint32_t(s.blur.size()));
  for (const auto& b : s.blur) {
    std::vector<double> tmp;
    for (int i = 0; i < 6; ++i) tmp.push_back(b.twist_start[i]);
    for (int i = 0; i < 6; ++i) tmp.push_back(b.twist_end[i]);
    for (double v : b.phi_logits) tmp.push_back(v);
    write_f32_array(f, tmp);
  }
  if (!f) throw IoError("write failed: " + path);
}

GaussianScene load_scene(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "RSCN", 4) != 0) throw CorruptFile("bad magic: " + path);
  uint32_t version = read_u32(f);
  if (version != 1) throw CorruptFile("unsupported scene version");
  GaussianScene s;
  s.K = int(read_u32(f));
  s.sh_bands = int(read_u32(f));
  s.blur_samples = int(read_u32(f));
  if (s.K <= 0 || s.K > 10'000'000) throw CorruptFile("implausible gaussian count");
  read_f32_array(f, s.mu, size_t(s.K) * 3);
  read_f32_array(f, s.quat, size_t(s.K) * 4);
  read_f32_array(f, s.scale, size_t(s.K) * 3);
  read_f32_array(f, s.opacity, size_t(s.K));
  read_f32_array(f, s.sh, size_t(s.K) * s.sh_bands * 3);
  read_f32_array(f, s.sampler, size_t(s.K) * 2);
  Rng dummy(0);
  s.appearance.build(dummy);
  uint32_t w = read_u32(f);
  size_t expect = 0;
  for (const auto& e : s.appearance.store.entries) expect += e.value.numel();
  if (w != expect) throw CorruptFile("appearance block length mismatch");
  for (auto& e : s.appearance.store.entries) {
    std::vector<double> tmp;
    read_f32_array(f, tmp, e.value.numel());
    std::copy(tmp.begin(), tmp.end(), e.value.data.begin());
  }
  uint32_t m = read_u32(f);
  s.blur.resize(m);
  for (auto& b : s.blur) {
    std::vector<double> tmp;
    read_f32_array(f, tmp, 12 + size_t(s.blur_samples));
    for (int i = 0; i < 6; ++i) b.twist_start[i] = tmp[size_t(i)];
    for (int i = 0; i < 6; ++i) b.twist_end[i] = tmp[size_t(6 + i)];
    b.phi_logits.assign(tmp.begin() + 12, tmp.end());
  }
  // Trailing garbage means the writer and reader disagree; treat as corrupt.
  f.peek();
  if (!f.eof()) throw CorruptFile("trailing bytes in scene file");
  return s;
}

namespace {
constexpr double kSH0 = 0.28209479177387814;
constexpr double kSH1 = 0.4886025119029199;
constexpr double kSH2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                            -1.0925484305920792, 0.5462742152960396};
constexpr double kSH3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                            0.3731763325901154, -0.4570457994644658, 1.445305721320277,
                            -0.5900435899266435};
}  // namespace

void sh_basis(int bands, const Vec3& d, double* out) {
  double x = d.x(), y = d.y(), z = d.z();
  out[0] = kSH0;
  if (bands == 1) return;
  out[1] = -kSH1 * y;
  out[2] = kSH1 * z;
  out[3] = -kSH1 * x;
  if (bands == 4) return;
  double xx = x * x, yy = y * y, zz = z * z, xy = x * y, yz = y * z, xz = x * z;
  out[4] = kSH2[0] * xy;
  out[5] = kSH2[1] * yz;
  out[6] = kSH2[2] * (2.0 * zz - xx - yy);
  out[7] = kSH2[3] * xz;
  out[8] = kSH2[4] * (xx - yy);
  if (bands == 9) return;
  out[9] = kSH3[0] * y * (3.0 * xx - yy);
  out[10] = kSH3[1] * xy * z;
  out[11] = kSH3[2] * y * (4.0 * zz - xx - yy);
  out[12] = kSH3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
  out[13] = kSH3[4] * x * (4.0 * zz - xx - yy);
  out[14] = kSH3[5] * z * (xx - yy);
  out[15] = kSH3[6] * x * (xx - 3.0 * yy);
}

Vec3 eval_sh(const GaussianScene& s, int gaussian, const Vec3& d) {
  double basis[16];
  sh_basis(s.sh_bands, d, basis);
  Vec3 c = Vec3::Zero();
  const double* coef = s.sh.data() + size_t(gaussian) * s.sh_bands * 3;
  for (int b = 0; b < s.sh_bands; ++b)
    for (int ch = 0; ch < 3; ++ch) c[ch] += basis[b] * coef[size_t(b) * 3 + ch];
  return c;
}

nn::Tensor<double> image_to_chw(const Image& img) {
  nn::Tensor<double> t({3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.data[(size_t(c) * img.height + y) * img.width + x] = img.at(y, x, c);
  return t;
}

Image chw_to_image(const nn::Tensor<double>& t) {
  Image img(t.shape[1], t.shape[2]);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        img.at(y, x, c) = t.data[(size_t(c) * img.height + y) * img.width + x];
  return img;
}

}  // namespace rap
