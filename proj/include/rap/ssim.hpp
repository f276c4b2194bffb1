#pragma once

#include "rap/image.hpp"

namespace rap {

// Mean SSIM over fully-interior 11x11 Gaussian windows (sigma 1.5), per
// channel. Images must be at least 11x11. When d_a is non-null it receives
// d(mean SSIM)/d(a).
double ssim(const Image& a, const Image& b, Image* d_a = nullptr);

// Structural dissimilarity loss: (1 - ssim) / 2.
double dssim(const Image& a, const Image& b, Image* d_a = nullptr);

}  // namespace rap
