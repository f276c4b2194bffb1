#pragma once

#include "rap/regressor.hpp"

namespace rap {

// LSGAN batch losses on raw discriminator scores.
struct AdvLossValues {
  double dis = 0, gen = 0;
};
inline AdvLossValues adversarial_losses(const std::vector<double>& d_real,
                                        const std::vector<double>& d_fake) {
  AdvLossValues v;
  if (!d_real.empty()) {
    double acc = 0;
    for (double s : d_real) acc += (s - 1.0) * (s - 1.0);
    v.dis += 0.5 * acc / double(d_real.size());
  }
  if (!d_fake.empty()) {
    double acc = 0, accg = 0;
    for (double s : d_fake) {
      acc += s * s;
      accg += (s - 1.0) * (s - 1.0);
    }
    v.dis += 0.5 * acc / double(d_fake.size());
    v.gen = 0.5 * accg / double(d_fake.size());
  }
  return v;
}

// Adjustment layers (independent per stream and per pyramid level) plus one
// discriminator per level. Training-time component only.
template <typename T>
struct Adversary {
  nn::ParamStore<T> params;

  struct Adj {
    nn::Conv2d<T> c1, c2;
    nn::BatchNorm2d<T> bn1, bn2;
    void build(nn::ParamStore<T>& s, const std::string& name, int cin, Rng& rng) {
      c1.build(s, name + ".c1", cin, kTransformerDim, 3, 1, 1, rng);
      bn1.build(s, name + ".bn1", kTransformerDim);
      c2.build(s, name + ".c2", kTransformerDim, kTransformerDim, 3, 1, 1, rng);
      bn2.build(s, name + ".bn2", kTransformerDim);
    }
  };
  Adj adj_real_t, adj_real_r, adj_syn_t, adj_syn_r;

  struct Disc {
    nn::Conv2d<T> c1, c2, c3, c4;
    nn::Linear<T> fc;
    int in_h = 0, in_w = 0, flat = 0;
    void build(nn::ParamStore<T>& s, const std::string& name, int h, int w, Rng& rng) {
      in_h = h;
      in_w = w;
      c1.build(s, name + ".c1", kTransformerDim, 64, 3, 2, 1, rng);
      c2.build(s, name + ".c2", 64, 32, 3, 2, 1, rng);
      c3.build(s, name + ".c3", 32, 16, 3, 2, 1, rng);
      c4.build(s, name + ".c4", 16, 16, 3, 2, 1, rng);
      int oh = conv_half(conv_half(conv_half(conv_half(h))));
      int ow = conv_half(conv_half(conv_half(conv_half(w))));
      flat = 16 * oh * ow;
      fc.build(s, name + ".fc", flat, 1, rng);
    }
  };
  Disc disc_t, disc_r;

  void build(int ft_h, int ft_w, int fr_h, int fr_w, Rng& rng) {
    params.entries.clear();
    adj_real_t.build(params, "adj_real_t", kFtChannels, rng);
    adj_real_r.build(params, "adj_real_r", kFrChannels, rng);
    adj_syn_t.build(params, "adj_syn_t", kFtChannels, rng);
    adj_syn_r.build(params, "adj_syn_r", kFrChannels, rng);
    disc_t.build(params, "disc_t", ft_h, ft_w, rng);
    disc_r.build(params, "disc_r", fr_h, fr_w, rng);
  }

  // Stream-specific Conv-ReLU-BN x2; spatial dims preserved, channels -> 128.
  int adjust(nn::Ctx<T>& c, int fmap, bool synthetic, bool level_r) {
    Adj& a = synthetic ? (level_r ? adj_syn_r : adj_syn_t)
                       : (level_r ? adj_real_r : adj_real_t);
    const int cin = c.tape->val(fmap).shape[0];
    if (cin != (level_r ? kFrChannels : kFtChannels))
      throw ChannelMismatch("adjust: unexpected channel count");
    int x = a.bn1.forward(c, params, c.tape->relu(a.c1.forward(c, params, fmap)));
    return a.bn2.forward(c, params, c.tape->relu(a.c2.forward(c, params, x)));
  }

  // Four strided convs with LeakyReLU + dropout, flatten, linear scalar.
  int discriminate(nn::Ctx<T>& c, int adj_map, bool level_r, double dropout_p = 0.3) {
    Disc& d = level_r ? disc_r : disc_t;
    nn::Tape<T>& t = *c.tape;
    const auto& shape = t.val(adj_map).shape;
    if (shape[0] != kTransformerDim) throw ChannelMismatch("discriminate: need 128 channels");
    if (shape[1] != d.in_h || shape[2] != d.in_w)
      throw ShapeMismatch("discriminate: map does not match built dims");
    int x = nn::dropout(c, t.leaky_relu(d.c1.forward(c, params, adj_map), T(0.2)), dropout_p);
    x = nn::dropout(c, t.leaky_relu(d.c2.forward(c, params, x), T(0.2)), dropout_p);
    x = nn::dropout(c, t.leaky_relu(d.c3.forward(c, params, x), T(0.2)), dropout_p);
    x = nn::dropout(c, t.leaky_relu(d.c4.forward(c, params, x), T(0.2)), dropout_p);
    int flatrow = t.reshape(x, {1, d.flat});
    return t.reshape(d.fc.forward(c, params, flatrow), {1});
  }

  bool is_discriminator_entry(size_t idx) const {
    const std::string& n = params.entries[idx].name;
    return n.rfind("disc_", 0) == 0;
  }
  bool is_syn_adjust_entry(size_t idx) const {
    const std::string& n = params.entries[idx].name;
    return n.rfind("adj_syn_", 0) == 0;
  }
};

}  // namespace rap
