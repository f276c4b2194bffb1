#pragma once

#include "rap/geometry.hpp"
#include "rap/image.hpp"
#include "rap/nn/layers.hpp"

namespace rap {

// Fixed interface widths of the feature pyramid.
constexpr int kFtChannels = 40;
constexpr int kFrChannels = 112;
constexpr int kTransformerDim = 128;
constexpr int kTransformerLayers = 6;
constexpr int kTransformerHeads = 8;
constexpr int kFfnWidth = 256;

struct RegressorConfig {
  int in_h = 120, in_w = 160;
  bool transformer_decoder = true;  // false: conv decoder fallback
  int head_hidden = 128;
};

inline int conv_half(int x) { return (x + 1) / 2; }  // stride-2, k3, pad 1

// Normalization applied to images entering the network.
template <typename T>
nn::Tensor<T> image_to_net_input(const Image& img) {
  nn::Tensor<T> t({3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.data[(size_t(c) * img.height + y) * img.width + x] =
            T((img.at(y, x, c) - 0.5) / 0.25);
  return t;
}

// Value-level pose loss (Euclidean translation + Frobenius rotation distance,
// with learned balance terms): L_t e^{-s_t} + s_t + L_r e^{-s_r} + s_r.
inline double pose_loss_value(const Vec3& t_pred, const Rot6D& r_pred, const Pose& gt,
                              double s_t, double s_r) {
  double lt = (gt.t - t_pred).norm();
  double lr = (gt.R - rot6d_to_matrix(r_pred)).norm();
  return lt * std::exp(-s_t) + s_t + lr * std::exp(-s_r) + s_r;
}

template <typename T>
struct PoseRegressor {
  nn::ParamStore<T> params;
  RegressorConfig cfg;

  // backbone: four stages (stride-2 conv + stride-1 conv, ReLU between)
  nn::Conv2d<T> s1a, s1b, s2a, s2b, s3a, s3b, s4a, s4b;

  struct TransformerLayer {
    nn::Linear<T> wq, wk, wv, wo, ffn1, ffn2;
    nn::LayerNorm<T> ln1, ln2;
  };
  struct Tower {
    nn::Conv2d<T> proj;  // 1x1 to 128
    int token = -1;      // [128]
    int pos_enc = -1;    // [S+1, 128]
    std::vector<TransformerLayer> layers;
    nn::Conv2d<T> dec1, dec2;  // conv-decoder fallback
    int seq_len = 0;           // H*W+1 at the configured resolution
  };
  Tower tower_t, tower_r;
  nn::Linear<T> head_t1, head_t2, head_r1, head_r2;
  int s_t = -1, s_r = -1;  // loss balance scalars

  int ft_h = 0, ft_w = 0, fr_h = 0, fr_w = 0;

  void build(const RegressorConfig& config, Rng& rng) {
    cfg = config;
    params.entries.clear();
    ft_h = conv_half(conv_half(conv_half(cfg.in_h)));
    ft_w = conv_half(conv_half(conv_half(cfg.in_w)));
    fr_h = conv_half(ft_h);
    fr_w = conv_half(ft_w);

    s1a.build(params, "backbone.s1a", 3, 16, 3, 2, 1, rng);
    s1b.build(params, "backbone.s1b", 16, 16, 3, 1, 1, rng);
    s2a.build(params, "backbone.s2a", 16, 24, 3, 2, 1, rng);
    s2b.build(params, "backbone.s2b", 24, 24, 3, 1, 1, rng);
    s3a.build(params, "backbone.s3a", 24, kFtChannels, 3, 2, 1, rng);
    s3b.build(params, "backbone.s3b", kFtChannels, kFtChannels, 3, 1, 1, rng);
    s4a.build(params, "backbone.s4a", kFtChannels, kFrChannels, 3, 2, 1, rng);
    s4b.build(params, "backbone.s4b", kFrChannels, kFrChannels, 3, 1, 1, rng);

    auto build_tower = [&](Tower& tw, const std::string& name, int cin, int h, int w) {
      tw.proj.build(params, name + ".proj", cin, kTransformerDim, 1, 1, 0, rng);
      tw.seq_len = h * w + 1;
      if (cfg.transformer_decoder) {
        tw.token = params.add(name + ".token",
                              nn::init_uniform<T>({kTransformerDim}, 0.02, rng));
        tw.pos_enc = params.add(
            name + ".pos_enc", nn::init_uniform<T>({tw.seq_len, kTransformerDim}, 0.02, rng));
        tw.layers.resize(kTransformerLayers);
        for (int l = 0; l < kTransformerLayers; ++l) {
          auto& L = tw.layers[size_t(l)];
          std::string ln = name + ".layer" + std::to_string(l);
          L.wq.build(params, ln + ".wq", kTransformerDim, kTransformerDim, rng);
          L.wk.build(params, ln + ".wk", kTransformerDim, kTransformerDim, rng);
          L.wv.build(params, ln + ".wv", kTransformerDim, kTransformerDim, rng);
          L.wo.build(params, ln + ".wo", kTransformerDim, kTransformerDim, rng);
          L.ln1.build(params, ln + ".ln1", kTransformerDim);
          L.ln2.build(params, ln + ".ln2", kTransformerDim);
          L.ffn1.build(params, ln + ".ffn1", kTransformerDim, kFfnWidth, rng);
          L.ffn2.build(params, ln + ".ffn2", kFfnWidth, kTransformerDim, rng);
        }
      } else {
        tw.dec1.build(params, name + ".dec1", kTransformerDim, kTransformerDim, 3, 1, 1, rng);
        tw.dec2.build(params, name + ".dec2", kTransformerDim, kTransformerDim, 3, 1, 1, rng);
      }
    };
    build_tower(tower_t, "tower_t", kFtChannels, ft_h, ft_w);
    build_tower(tower_r, "tower_r", kFrChannels, fr_h, fr_w);

    head_t1.build(params, "head_t.l1", kTransformerDim, cfg.head_hidden, rng);
    head_t2.build(params, "head_t.l2", cfg.head_hidden, 3, rng);
    head_r1.build(params, "head_r.l1", kTransformerDim, cfg.head_hidden, rng);
    head_r2.build(params, "head_r.l2", cfg.head_hidden, 6, rng);
    // identity-leaning 6D rotation output at init
    params[head_r2.b].data[0] = T(1);
    params[head_r2.b].data[4] = T(1);

    s_t = params.add("loss.s_t", nn::init_const<T>({1}, T(0)));
    s_r = params.add("loss.s_r", nn::init_const<T>({1}, T(0)));
  }

  // Centers the translation head on the training distribution.
  void set_translation_prior(const Vec3& mean_t) {
    for (int i = 0; i < 3; ++i) params[head_t2.b].data[size_t(i)] = T(mean_t[i]);
  }

  // Backbone only; accepts any input >= 32x32.
  struct Features {
    int ft = -1, fr = -1;
  };
  Features extract_features(nn::Ctx<T>& c, int image_node) const {
    const auto& shape = c.tape->val(image_node).shape;
    if (shape[1] < 32 || shape[2] < 32)
      throw ImageTooSmall("regressor input must be at least 32x32");
    nn::Tape<T>& t = *c.tape;
    int x = t.relu(s1a.forward(c, params, image_node));
    x = t.relu(s1b.forward(c, params, x));
    x = t.relu(s2a.forward(c, params, x));
    x = t.relu(s2b.forward(c, params, x));
    x = t.relu(s3a.forward(c, params, x));
    int ft = t.relu(s3b.forward(c, params, x));
    int fr = t.relu(s4a.forward(c, params, ft));
    fr = t.relu(s4b.forward(c, params, fr));
    return {ft, fr};
  }

  // Token-conditioned attention tower per Eq-5-style blocks:
  //   x' = MSA(x) + x;  x = LN(FFN(LN(x')) + x')
  int transformer_forward(nn::Ctx<T>& c, const Tower& tw, int fmap) const {
    nn::Tape<T>& t = *c.tape;
    int proj = tw.proj.forward(c, params, fmap);
    int rows = t.flatten_chw_to_rows(proj);  // [HW, 128]
    if (!cfg.transformer_decoder) {
      int d = t.relu(tw.dec1.forward(c, params, proj));
      d = t.relu(tw.dec2.forward(c, params, d));
      return t.global_mean_chw(d);
    }
    int token_row = t.reshape(c.p(params, tw.token), {1, kTransformerDim});
    int x = t.concat_rows(rows, token_row);
    if (t.val(x).shape[0] != tw.seq_len)
      throw ShapeMismatch("feature map does not match the built sequence length");
    x = t.add(x, c.p(params, tw.pos_enc));
    const int S = tw.seq_len;
    const int hd = kTransformerDim / kTransformerHeads;
    for (const auto& L : tw.layers) {
      int q = L.wq.forward(c, params, x);
      int k = L.wk.forward(c, params, x);
      int v = L.wv.forward(c, params, x);
      int heads = -1;
      for (int h = 0; h < kTransformerHeads; ++h) {
        int qh = t.slice_cols(q, h * hd, (h + 1) * hd);
        int kh = t.slice_cols(k, h * hd, (h + 1) * hd);
        int vh = t.slice_cols(v, h * hd, (h + 1) * hd);
        int scores = t.scale(t.matmul(qh, t.transpose(kh)), T(1.0 / std::sqrt(double(hd))));
        int attn = t.softmax_rows(scores);
        int oh = t.matmul(attn, vh);
        heads = h == 0 ? oh : t.concat_cols(heads, oh);
      }
      int msa = L.wo.forward(c, params, heads);
      int xp = t.add(msa, x);
      int ffn = L.ffn2.forward(c, params, t.relu(L.ffn1.forward(c, params, L.ln1.forward(c, params, xp))));
      x = L.ln2.forward(c, params, t.add(ffn, xp));
      (void)S;
    }
    return t.slice_row(x, S - 1);  // the token slot
  }

  int regress_head(nn::Ctx<T>& c, int token, bool rotation) const {
    nn::Tape<T>& t = *c.tape;
    const nn::Linear<T>& l1 = rotation ? head_r1 : head_t1;
    const nn::Linear<T>& l2 = rotation ? head_r2 : head_t2;
    return l2.forward_vec(c, params, t.gelu(l1.forward_vec(c, params, token)));
  }

  struct Forward {
    int ft = -1, fr = -1;
    int trans = -1;  // [3]
    int rot6 = -1;   // [6]
  };

  Forward forward(nn::Ctx<T>& c, int image_node) const {
    const auto& shape = c.tape->val(image_node).shape;
    if (shape[1] != cfg.in_h || shape[2] != cfg.in_w)
      throw ShapeMismatch("forward expects the configured input resolution");
    Forward f;
    Features feats = extract_features(c, image_node);
    f.ft = feats.ft;
    f.fr = feats.fr;
    int tok_t = transformer_forward(c, tower_t, f.ft);
    int tok_r = transformer_forward(c, tower_r, f.fr);
    f.trans = regress_head(c, tok_t, false);
    f.rot6 = regress_head(c, tok_r, true);
    return f;
  }

  // Tape nodes for the balanced pose loss of one prediction.
  int pose_loss_node(nn::Ctx<T>& c, const Forward& f, const Pose& gt, int* lt_out = nullptr,
                     int* lr_out = nullptr) const {
    nn::Tape<T>& t = *c.tape;
    nn::Tensor<T> gt_t({3});
    for (int i = 0; i < 3; ++i) gt_t.data[size_t(i)] = T(gt.t[i]);
    int lt = t.norm2_diff(f.trans, std::move(gt_t));
    int lr = t.rot6d_frob(f.rot6, gt.R);
    if (lt_out) *lt_out = lt;
    if (lr_out) *lr_out = lr;
    int st = c.p(params, s_t);
    int sr = c.p(params, s_r);
    int term_t = t.add(t.mul(lt, t.exp_op(t.scale(st, T(-1)))), st);
    int term_r = t.add(t.mul(lr, t.exp_op(t.scale(sr, T(-1)))), sr);
    return t.add(term_t, term_r);
  }

  // Eval-mode prediction, raw head outputs.
  std::pair<Vec3, Rot6D> predict_raw(const Image& img) const {
    nn::Tape<T> tape(false);
    nn::Ctx<T> c{&tape, nullptr, false, nullptr};
    int in = tape.constant(image_to_net_input<T>(img));
    Forward f = forward(c, in);
    const auto& tv = tape.val(f.trans);
    Vec3 t(double(tv.data[0]), double(tv.data[1]), double(tv.data[2]));
    Rot6D r6;
    const auto& rv = tape.val(f.rot6);
    for (int i = 0; i < 6; ++i) r6.v[i] = double(rv.data[size_t(i)]);
    return {t, r6};
  }

  Pose predict(const Image& img) const {
    auto [t, r6] = predict_raw(img);
    return Pose{rot6d_to_matrix(r6), t};
  }

  double s_t_value() const { return double(params[s_t].data[0]); }
  double s_r_value() const { return double(params[s_r].data[0]); }
};

}  // namespace rap
