#include "rap/image.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace rap {

namespace {
uint8_t quantize(double v) {
  v = std::min(1.0, std::max(0.0, v));
  return uint8_t(std::lround(v * 255.0));
}
}  // namespace

void save_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(size_t(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) row[size_t(x) * 3 + c] = quantize(img.at(y, x, c));
    f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!f) throw IoError("write failed: " + path);
}

namespace {
// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_token(std::istream& s) {
  std::string tok;
  int c;
  while ((c = s.get()) != EOF) {
    if (c == '#') {
      while ((c = s.get()) != EOF && c != '\n') {}
    } else if (!std::isspace(c)) {
      tok.push_back(char(c));
      while ((c = s.peek()) != EOF && !std::isspace(c)) tok.push_back(char(s.get()));
      return tok;
    }
  }
  return tok;
}
}  // namespace

Image load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  if (next_token(f) != "P6") throw CorruptFile("not a P6 PPM: " + path);
  int w = 0, h = 0, maxv = 0;
  try {
    w = std::stoi(next_token(f));
    h = std::stoi(next_token(f));
    maxv = std::stoi(next_token(f));
  } catch (const std::exception&) {
    throw CorruptFile("bad PPM header: " + path);
  }
  if (w <= 0 || h <= 0 || maxv != 255) throw CorruptFile("unsupported PPM: " + path);
  f.get();  // single whitespace after maxval
  Image img(h, w);
  std::vector<uint8_t> row(size_t(w) * 3);
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
    if (!f) throw CorruptFile("truncated PPM: " + path);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[size_t(x) * 3 + c] / 255.0;
  }
  return img;
}

void save_pfm(const DepthMap& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "Pf\n" << d.width << " " << d.height << "\n-1.0\n";  // negative: little-endian
  auto row = std::vector<float>(size_t(d.width));
  for (int y = d.height - 1; y >= 0; --y) {  // PFM stores bottom-up
    for (int x = 0; x < d.width; ++x) row[size_t(x)] = float(d.at(y, x));
    f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * 4));
  }
  if (!f) throw IoError("write failed: " + path);
}

DepthMap load_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  if (next_token(f) != "Pf") throw CorruptFile("not a grayscale PFM: " + path);
  int w = 0, h = 0;
  double scale = 0;
  try {
    w = std::stoi(next_token(f));
    h = std::stoi(next_token(f));
    scale = std::stod(next_token(f));
  } catch (const std::exception&) {
    throw CorruptFile("bad PFM header: " + path);
  }
  if (w <= 0 || h <= 0 || scale >= 0) throw CorruptFile("unsupported PFM: " + path);
  f.get();
  DepthMap d(h, w);
  auto row = std::vector<float>(size_t(w));
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size() * 4));
    if (!f) throw CorruptFile("truncated PFM: " + path);
    for (int x = 0; x < w; ++x) d.at(y, x) = row[size_t(x)];
  }
  return d;
}

double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeMismatch("psnr: image dimensions differ");
  double mse = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= double(a.data.size());
  if (mse <= 0) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

double mean_rgb_l2(const Image& a, const Image& b) {
  Vec3 ma = Vec3::Zero(), mb = Vec3::Zero();
  size_t n = size_t(a.height) * a.width;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x)
      for (int c = 0; c < 3; ++c) ma[c] += a.at(y, x, c);
  for (int y = 0; y < b.height; ++y)
    for (int x = 0; x < b.width; ++x)
      for (int c = 0; c < 3; ++c) mb[c] += b.at(y, x, c);
  ma /= double(n);
  mb /= double(size_t(b.height) * b.width);
  return (ma - mb).norm();
}

double variance_of_laplacian(const Image& img) {
  if (img.height < 3 || img.width < 3) return 0.0;
  std::vector<double> luma(size_t(img.height) * img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      luma[size_t(y) * img.width + x] =
          0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
  double sum = 0, sum2 = 0;
  int n = 0;
  for (int y = 1; y + 1 < img.height; ++y) {
    for (int x = 1; x + 1 < img.width; ++x) {
      const double* L = luma.data();
      int w = img.width;
      double v = -4.0 * L[y * w + x] + L[(y - 1) * w + x] + L[(y + 1) * w + x] +
                 L[y * w + x - 1] + L[y * w + x + 1];
      sum += v;
      sum2 += v * v;
      ++n;
    }
  }
  double mean = sum / n;
  return sum2 / n - mean * mean;
}

Image apply_tint(const Image& img, const Vec3& gain, const Vec3& bias) {
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = gain[c] * img.at(y, x, c) + bias[c];
        out.at(y, x, c) = std::min(1.0, std::max(0.0, v));
      }
  return out;
}

}  // namespace rap
