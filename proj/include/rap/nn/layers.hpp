#pragma once

#include <string>

#include "rap/nn/tape.hpp"

namespace rap::nn {

// Named parameter registry. Models register tensors at build time and address
// them by index; checkpoints address them by name.
template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };
  std::vector<Entry> entries;

  int add(const std::string& name, Tensor<T> value, bool trainable = true) {
    entries.push_back(Entry{name, std::move(value), trainable});
    return int(entries.size()) - 1;
  }
  Tensor<T>& operator[](int id) { return entries[size_t(id)].value; }
  const Tensor<T>& operator[](int id) const { return entries[size_t(id)].value; }
  int find(const std::string& name) const {
    for (size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name == name) return int(i);
    return -1;
  }
  size_t num_scalars() const {
    size_t n = 0;
    for (const auto& e : entries) n += e.value.numel();
    return n;
  }
};

// Per-worker gradient buffer aligned with a ParamStore.
template <typename T>
struct GradBuffer {
  std::vector<Tensor<T>> grads;

  explicit GradBuffer(const ParamStore<T>& store) {
    grads.reserve(store.entries.size());
    for (const auto& e : store.entries) grads.emplace_back(e.value.shape);
  }
  void zero() {
    for (auto& g : grads) g.zero();
  }
  void add_from(const GradBuffer& o) {
    for (size_t i = 0; i < grads.size(); ++i)
      for (size_t j = 0; j < grads[i].numel(); ++j) grads[i].data[j] += o.grads[i].data[j];
  }
};

// Forward-pass context: grads points at the buffer receiving parameter
// gradients (null = frozen/eval weights), train toggles dropout/batch stats.
template <typename T>
struct Ctx {
  Tape<T>* tape = nullptr;
  GradBuffer<T>* grads = nullptr;
  bool train = false;
  Rng* rng = nullptr;  // dropout masks

  int p(const ParamStore<T>& store, int id) const {
    Tensor<T>* sink = grads ? &grads->grads[size_t(id)] : nullptr;
    return tape->param(store[id], sink);
  }
};

// ---- initializers ----

template <typename T>
Tensor<T> init_uniform(std::vector<int> shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data) x = T(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> init_kaiming(std::vector<int> shape, int fan_in, Rng& rng) {
  return init_uniform<T>(std::move(shape), std::sqrt(3.0) * std::sqrt(2.0 / fan_in), rng);
}

template <typename T>
Tensor<T> init_const(std::vector<int> shape, T v) {
  Tensor<T> t(std::move(shape));
  t.fill(v);
  return t;
}

// ---- layers ----

template <typename T>
struct Linear {
  int w = -1, b = -1;
  int in = 0, out = 0;

  void build(ParamStore<T>& s, const std::string& name, int in_, int out_, Rng& rng) {
    in = in_;
    out = out_;
    w = s.add(name + ".w", init_kaiming<T>({in_, out_}, in_, rng));
    b = s.add(name + ".b", init_const<T>({out_}, T(0)));
  }
  // x: [m, in] -> [m, out]
  int forward(const Ctx<T>& c, const ParamStore<T>& s, int x) const {
    return c.tape->add_rowvec(c.tape->matmul(x, c.p(s, w)), c.p(s, b));
  }
  // x: [in] -> [out]
  int forward_vec(const Ctx<T>& c, const ParamStore<T>& s, int x) const {
    int xm = c.tape->reshape(x, {1, in});
    return c.tape->reshape(forward(c, s, xm), {out});
  }
};

template <typename T>
struct Conv2d {
  int w = -1, b = -1;
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

  void build(ParamStore<T>& s, const std::string& name, int cin_, int cout_, int k_,
             int stride_, int pad_, Rng& rng) {
    cin = cin_;
    cout = cout_;
    k = k_;
    stride = stride_;
    pad = pad_;
    w = s.add(name + ".w", init_kaiming<T>({cout_, cin_, k_, k_}, cin_ * k_ * k_, rng));
    b = s.add(name + ".b", init_const<T>({cout_}, T(0)));
  }
  int forward(const Ctx<T>& c, const ParamStore<T>& s, int x) const {
    return c.tape->conv2d(x, c.p(s, w), c.p(s, b), stride, pad);
  }
};

template <typename T>
struct BatchNorm2d {
  int gamma = -1, beta = -1, running = -1;  // running: [C,2] mean/var, non-trainable
  int channels = 0;

  void build(ParamStore<T>& s, const std::string& name, int c) {
    channels = c;
    gamma = s.add(name + ".gamma", init_const<T>({c}, T(1)));
    beta = s.add(name + ".beta", init_const<T>({c}, T(0)));
    Tensor<T> run({c, 2});
    for (int i = 0; i < c; ++i) run.data[size_t(i) * 2 + 1] = T(1);
    running = s.add(name + ".running", std::move(run), /*trainable=*/false);
  }
  // Train mode normalizes by per-map statistics; eval mode uses the stored
  // running stats. The layers carrying this norm only ever train, so running
  // stats stay at their init (callers may overwrite them explicitly).
  int forward(const Ctx<T>& c, const ParamStore<T>& s, int x) const {
    if (c.train)
      return c.tape->batch_norm_chw(x, c.p(s, gamma), c.p(s, beta), nullptr, nullptr);
    return c.tape->batch_norm_chw(x, c.p(s, gamma), c.p(s, beta), &s[running], nullptr);
  }
};

template <typename T>
struct LayerNorm {
  int gamma = -1, beta = -1;
  void build(ParamStore<T>& s, const std::string& name, int n) {
    gamma = s.add(name + ".gamma", init_const<T>({n}, T(1)));
    beta = s.add(name + ".beta", init_const<T>({n}, T(0)));
  }
  int forward(const Ctx<T>& c, const ParamStore<T>& s, int x) const {
    return c.tape->layer_norm(x, c.p(s, gamma), c.p(s, beta));
  }
};

template <typename T>
int dropout(const Ctx<T>& c, int x, double p) {
  if (!c.train || p <= 0.0) return x;
  if (!c.rng) throw ConfigError("dropout in train mode needs an rng");
  Tensor<T> mask(c.tape->val(x).shape);
  T keep = T(1.0 / (1.0 - p));
  for (auto& m : mask.data) m = c.rng->uniform() < p ? T(0) : keep;
  return c.tape->mul_mask(x, std::move(mask));
}

// ---- optimizer ----

template <typename T>
struct Adam {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<Tensor<T>> m, v;
  std::vector<double> lr_scale;  // per-entry multiplier (1 by default)

  void init(const ParamStore<T>& store) {
    m.clear();
    v.clear();
    for (const auto& e : store.entries) {
      m.emplace_back(e.value.shape);
      v.emplace_back(e.value.shape);
    }
    lr_scale.assign(store.entries.size(), 1.0);
  }

  void step(ParamStore<T>& store, const GradBuffer<T>& g) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, double(t));
    double bc2 = 1.0 - std::pow(beta2, double(t));
    for (size_t i = 0; i < store.entries.size(); ++i) {
      auto& e = store.entries[i];
      if (!e.trainable) continue;
      double lri = lr * lr_scale[i];
      if (lri == 0.0) continue;
      for (size_t j = 0; j < e.value.numel(); ++j) {
        double gj = double(g.grads[i].data[j]);
        double mj = beta1 * double(m[i].data[j]) + (1.0 - beta1) * gj;
        double vj = beta2 * double(v[i].data[j]) + (1.0 - beta2) * gj * gj;
        m[i].data[j] = T(mj);
        v[i].data[j] = T(vj);
        double mhat = mj / bc1, vhat = vj / bc2;
        e.value.data[j] -= T(lri * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

}  // namespace rap::nn
