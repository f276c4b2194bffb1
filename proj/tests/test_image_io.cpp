#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "rap/image.hpp"

using namespace rap;

namespace {
std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("ppm round trip quantized") {
  Rng rng(1);
  Image img(13, 17);
  for (auto& v : img.data) v = rng.uniform();
  std::string p = tmp_path("rap_test.ppm");
  save_ppm(img, p);
  Image back = load_ppm(p);
  REQUIRE(back.height == img.height);
  REQUIRE(back.width == img.width);
  for (size_t i = 0; i < img.data.size(); ++i)
    CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5 / 255.0 + 1e-12);
  // second trip is exact
  save_ppm(back, p);
  Image again = load_ppm(p);
  CHECK(again.data == back.data);
  std::remove(p.c_str());
}

TEST_CASE("pfm round trip") {
  Image dummy;
  (void)dummy;
  DepthMap d(9, 11);
  Rng rng(2);
  for (auto& v : d.data) v = double(float(rng.uniform(0.0, 100.0)));
  std::string p = tmp_path("rap_test.pfm");
  save_pfm(d, p);
  DepthMap back = load_pfm(p);
  REQUIRE(back.height == d.height);
  CHECK(back.data == d.data);
  std::remove(p.c_str());
}

TEST_CASE("corrupt image files") {
  std::string p = tmp_path("rap_bad.ppm");
  {
    FILE* f = fopen(p.c_str(), "wb");
    fputs("P6\n4 4\n255\n", f);
    fputs("abc", f);  // truncated payload
    fclose(f);
  }
  CHECK_THROWS_AS(load_ppm(p), CorruptFile);
  std::remove(p.c_str());
}

TEST_CASE("psnr and tint") {
  Image a(8, 8, 0.5), b(8, 8, 0.5);
  CHECK(psnr(a, b) == doctest::Approx(99.0));
  for (auto& v : b.data) v += 0.1;
  CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(1.0 / 0.01)));

  Image t = apply_tint(a, Vec3(2.0, 1.0, 0.5), Vec3(0, 0.1, 0));
  CHECK(t.at(0, 0, 0) == doctest::Approx(1.0));  // clamped
  CHECK(t.at(0, 0, 1) == doctest::Approx(0.6));
  CHECK(t.at(0, 0, 2) == doctest::Approx(0.25));
}

TEST_CASE("variance of laplacian orders blur") {
  Rng rng(3);
  Image sharp(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) sharp.at(y, x, c) = ((x / 4 + y / 4) % 2) ? 0.9 : 0.1;
  Image blurXY(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        int n = 0;
        for (int dy = -2; dy <= 2; ++dy)
          for (int dx = -2; dx <= 2; ++dx) {
            int yy = std::clamp(y + dy, 0, 31), xx = std::clamp(x + dx, 0, 31);
            acc += sharp.at(yy, xx, c);
            ++n;
          }
        blurXY.at(y, x, c) = acc / n;
      }
  CHECK(variance_of_laplacian(sharp) > 4.0 * variance_of_laplacian(blurXY));
}
