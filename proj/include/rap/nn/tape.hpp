#pragma once

#include <functional>
#include <memory>

#include "rap/nn/tensor.hpp"
#include "rap/geometry.hpp"

namespace rap::nn {

// Reverse-mode tape over tensors. One tape per forward pass; ops append
// nodes, backward() walks them in reverse. Gradients of `param` nodes are
// accumulated into caller-owned sink tensors so several tapes (one per worker
// thread) can share read-only parameter values.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    std::function<void(Tape&)> back;  // null for constants/leaves
    bool req = false;                 // participates in backward
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  int constant(Tensor<T> v) { return add(std::move(v), false, nullptr); }

  // Parameter node: on backward its gradient is added to *sink.
  int param(const Tensor<T>& value, Tensor<T>* sink) {
    if (!grad_enabled_ || sink == nullptr) return constant(value);
    int id = add(value, true, nullptr);
    nodes_[size_t(id)].back = [id, sink](Tape& t) {
      Tensor<T>& g = t.grad_ref(id);
      for (size_t i = 0; i < g.numel(); ++i) sink->data[i] += g.data[i];
    };
    return id;
  }

  // Input whose gradient the caller wants to read back after backward().
  int leaf(Tensor<T> v) { return add(std::move(v), grad_enabled_, nullptr); }

  Tensor<T>& val(int id) { return nodes_[size_t(id)].val; }
  const Tensor<T>& val(int id) const { return nodes_[size_t(id)].val; }
  Tensor<T>& grad_ref(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.numel() == 0) n.grad = Tensor<T>(n.val.shape);
    return n.grad;
  }

  void backward(int root) {
    Tensor<T> seed(val(root).shape);
    seed.fill(T(1));
    backward_from(root, seed);
  }

  void backward_from(int root, const Tensor<T>& seed) {
    if (!grad_enabled_) throw ConfigError("backward on a no-grad tape");
    if (!seed.same_shape(val(root))) throw ShapeMismatch("backward seed shape");
    Tensor<T>& g = grad_ref(root);
    for (size_t i = 0; i < g.numel(); ++i) g.data[i] += seed.data[i];
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.req && n.back && n.grad.numel() > 0) n.back(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  int add(int a, int b) {
    check_same(a, b);
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
    return unary_binary(std::move(out), {a, b}, [a, b](Tape& t, int id) {
      t.accumulate(a, t.grad_ref(id));
      t.accumulate(b, t.grad_ref(id));
    });
  }

  int sub(int a, int b) {
    check_same(a, b);
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] -= vb.data[i];
    return unary_binary(std::move(out), {a, b}, [a, b](Tape& t, int id) {
      t.accumulate(a, t.grad_ref(id));
      t.accumulate_scaled(b, t.grad_ref(id), T(-1));
    });
  }

  int mul(int a, int b) {
    check_same(a, b);
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
    return unary_binary(std::move(out), {a, b}, [a, b](Tape& t, int id) {
      const Tensor<T>& g = t.grad_ref(id);
      if (t.needs_grad(a)) {
        Tensor<T>& ga = t.grad_ref(a);
        const Tensor<T>& vb2 = t.val(b);
        for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * vb2.data[i];
      }
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad_ref(b);
        const Tensor<T>& va = t.val(a);
        for (size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * va.data[i];
      }
    });
  }

  int scale(int a, T c) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x *= c;
    return unary_binary(std::move(out), {a}, [a, c](Tape& t, int id) {
      t.accumulate_scaled(a, t.grad_ref(id), c);
    });
  }

  int add_const(int a, T c) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x += c;
    return unary_binary(std::move(out), {a}, [a](Tape& t, int id) {
      t.accumulate(a, t.grad_ref(id));
    });
  }

  // y = a * s, s has shape {1}
  int mul_scalar(int a, int s) {
    if (val(s).numel() != 1) throw ShapeMismatch("mul_scalar: s must be scalar");
    Tensor<T> out = val(a);
    T sv = val(s).data[0];
    for (auto& x : out.data) x *= sv;
    return unary_binary(std::move(out), {a, s}, [a, s](Tape& t, int id) {
      const Tensor<T>& g = t.grad_ref(id);
      T sv2 = t.val(s).data[0];
      if (t.needs_grad(a)) t.accumulate_scaled(a, g, sv2);
      if (t.needs_grad(s)) {
        const Tensor<T>& va = t.val(a);
        T acc = T(0);
        for (size_t i = 0; i < g.numel(); ++i) acc += g.data[i] * va.data[i];
        t.grad_ref(s).data[0] += acc;
      }
    });
  }

  int relu(int a) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x = x > T(0) ? x : T(0);
    return unary_binary(std::move(out), {a}, [a](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      const Tensor<T>& va = t.val(a);
      for (size_t i = 0; i < g.numel(); ++i)
        if (va.data[i] > T(0)) ga.data[i] += g.data[i];
    });
  }

  int leaky_relu(int a, T slope) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x = x > T(0) ? x : slope * x;
    return unary_binary(std::move(out), {a}, [a, slope](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      const Tensor<T>& va = t.val(a);
      for (size_t i = 0; i < g.numel(); ++i)
        ga.data[i] += (va.data[i] > T(0) ? T(1) : slope) * g.data[i];
    });
  }

  // Exact (erf-based) GeLU.
  int gelu(int a) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) {
      T phi = T(0.5) * (T(1) + T(std::erf(double(x) / std::sqrt(2.0))));
      x = x * phi;
    }
    return unary_binary(std::move(out), {a}, [a](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      const Tensor<T>& va = t.val(a);
      const double inv_sqrt2pi = 0.3989422804014327;
      for (size_t i = 0; i < g.numel(); ++i) {
        double x = double(va.data[i]);
        double phi = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        ga.data[i] += T(phi + x * pdf) * g.data[i];
      }
    });
  }

  int sigmoid(int a) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x = T(1) / (T(1) + T(std::exp(double(-x))));
    return unary_binary(std::move(out), {a}, [a](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      const Tensor<T>& y = t.val(id);
      for (size_t i = 0; i < g.numel(); ++i)
        ga.data[i] += y.data[i] * (T(1) - y.data[i]) * g.data[i];
    });
  }

  int exp_op(int a) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x = T(std::exp(double(x)));
    return unary_binary(std::move(out), {a}, [a](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      const Tensor<T>& y = t.val(id);
      for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += y.data[i] * g.data[i];
    });
  }

  // Elementwise product with a fixed mask (dropout etc.).
  int mul_mask(int a, Tensor<T> mask) {
    check_shape(a, mask.shape);
    Tensor<T> out = val(a);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= mask.data[i];
    auto m = std::make_shared<Tensor<T>>(std::move(mask));
    return unary_binary(std::move(out), {a}, [a, m](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * m->data[i];
    });
  }

  // ---- shape ----

  int reshape(int a, std::vector<int> shape) {
    if (Tensor<T>::numel_of(shape) != val(a).numel())
      throw ShapeMismatch("reshape: element count");
    Tensor<T> out = val(a);
    out.shape = shape;
    return unary_binary(std::move(out), {a}, [a](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    });
  }

  int transpose(int a) {
    const Tensor<T>& va = val(a);
    int m = va.shape[0], n = va.shape[1];
    Tensor<T> out({n, m});
    out.mat2d() = va.mat2d().transpose();
    return unary_binary(std::move(out), {a}, [a, m, n](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      ga.mat(m, n) += g.mat(n, m).transpose();
    });
  }

  int concat_rows(int a, int b) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.shape[1] != vb.shape[1]) throw ShapeMismatch("concat_rows: cols");
    int ma = va.shape[0], mb = vb.shape[0], n = va.shape[1];
    Tensor<T> out({ma + mb, n});
    std::copy(va.data.begin(), va.data.end(), out.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + va.numel());
    return unary_binary(std::move(out), {a, b}, [a, b, ma, mb, n](Tape& t, int id) {
      const Tensor<T>& g = t.grad_ref(id);
      if (t.needs_grad(a)) {
        Tensor<T>& ga = t.grad_ref(a);
        for (size_t i = 0; i < size_t(ma) * n; ++i) ga.data[i] += g.data[i];
      }
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad_ref(b);
        size_t off = size_t(ma) * n;
        for (size_t i = 0; i < size_t(mb) * n; ++i) gb.data[i] += g.data[off + i];
      }
    });
  }

  int slice_cols(int a, int c0, int c1) {
    const Tensor<T>& va = val(a);
    int m = va.shape[0], n = va.shape[1], w = c1 - c0;
    Tensor<T> out({m, w});
    for (int r = 0; r < m; ++r)
      std::copy(va.ptr() + size_t(r) * n + c0, va.ptr() + size_t(r) * n + c1,
                out.ptr() + size_t(r) * w);
    return unary_binary(std::move(out), {a}, [a, c0, m, n, w](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < w; ++c)
          ga.data[size_t(r) * n + c0 + c] += g.data[size_t(r) * w + c];
    });
  }

  int slice_row(int a, int r) {
    const Tensor<T>& va = val(a);
    int n = va.shape[1];
    Tensor<T> out({n});
    std::copy(va.ptr() + size_t(r) * n, va.ptr() + size_t(r + 1) * n, out.ptr());
    return unary_binary(std::move(out), {a}, [a, r, n](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      for (int c = 0; c < n; ++c) ga.data[size_t(r) * n + c] += g.data[size_t(c)];
    });
  }

  // ---- linear algebra ----

  int matmul(int a, int b) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0])
      throw ShapeMismatch("matmul");
    int m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    Tensor<T> out({m, n});
    out.mat2d().noalias() = va.mat2d() * vb.mat2d();
    return unary_binary(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, int id) {
      const Tensor<T>& g = t.grad_ref(id);
      if (t.needs_grad(a)) t.grad_ref(a).mat(m, k).noalias() += g.mat(m, n) * t.val(b).mat(k, n).transpose();
      if (t.needs_grad(b)) t.grad_ref(b).mat(k, n).noalias() += t.val(a).mat(m, k).transpose() * g.mat(m, n);
    });
  }

  // a: [m,n], bias: [n]
  int add_rowvec(int a, int bias) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(bias);
    if (va.shape[1] != vb.shape[0]) throw ShapeMismatch("add_rowvec");
    int m = va.shape[0], n = va.shape[1];
    Tensor<T> out = va;
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < n; ++c) out.data[size_t(r) * n + c] += vb.data[size_t(c)];
    return unary_binary(std::move(out), {a, bias}, [a, bias, m, n](Tape& t, int id) {
      const Tensor<T>& g = t.grad_ref(id);
      if (t.needs_grad(a)) t.accumulate(a, g);
      if (t.needs_grad(bias)) {
        Tensor<T>& gb = t.grad_ref(bias);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < n; ++c) gb.data[size_t(c)] += g.data[size_t(r) * n + c];
      }
    });
  }

  int softmax_rows(int a) {
    const Tensor<T>& va = val(a);
    int m = va.shape[0], n = va.shape[1];
    Tensor<T> out({m, n});
    for (int r = 0; r < m; ++r) {
      const T* x = va.ptr() + size_t(r) * n;
      T* y = out.ptr() + size_t(r) * n;
      T mx = x[0];
      for (int c = 1; c < n; ++c) mx = std::max(mx, x[c]);
      T sum = T(0);
      for (int c = 0; c < n; ++c) {
        y[c] = T(std::exp(double(x[c] - mx)));
        sum += y[c];
      }
      for (int c = 0; c < n; ++c) y[c] /= sum;
    }
    return unary_binary(std::move(out), {a}, [a, m, n](Tape& t, int id) {
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& g = t.grad_ref(id);
      const Tensor<T>& y = t.val(id);
      for (int r = 0; r < m; ++r) {
        const T* yr = y.ptr() + size_t(r) * n;
        const T* gr = g.ptr() + size_t(r) * n;
        T dot = T(0);
        for (int c = 0; c < n; ++c) dot += yr[c] * gr[c];
        T* gar = ga.ptr() + size_t(r) * n;
        for (int c = 0; c < n; ++c) gar[c] += yr[c] * (gr[c] - dot);
      }
    });
  }

  // Per-row layer norm with affine parameters gamma/beta of shape [n].
  int layer_norm(int a, int gamma, int beta, T eps = T(1e-5)) {
    const Tensor<T>& va = val(a);
    int m = va.shape[0], n = va.shape[1];
    Tensor<T> out({m, n});
    auto stats = std::make_shared<Tensor<T>>(std::vector<int>{m, 2});  // mean, inv_std
    const Tensor<T>& vg = val(gamma);
    const Tensor<T>& vb = val(beta);
    for (int r = 0; r < m; ++r) {
      const T* x = va.ptr() + size_t(r) * n;
      T mean = T(0);
      for (int c = 0; c < n; ++c) mean += x[c];
      mean /= T(n);
      T var = T(0);
      for (int c = 0; c < n; ++c) var += (x[c] - mean) * (x[c] - mean);
      var /= T(n);
      T inv = T(1) / T(std::sqrt(double(var + eps)));
      stats->data[size_t(r) * 2] = mean;
      stats->data[size_t(r) * 2 + 1] = inv;
      T* y = out.ptr() + size_t(r) * n;
      for (int c = 0; c < n; ++c) y[c] = vg.data[size_t(c)] * (x[c] - mean) * inv + vb.data[size_t(c)];
    }
    return unary_binary(std::move(out), {a, gamma, beta},
                        [a, gamma, beta, m, n, stats](Tape& t, int id) {
      const Tensor<T>& g = t.grad_ref(id);
      const Tensor<T>& va2 = t.val(a);
      const Tensor<T>& vg = t.val(gamma);
      for (int r = 0; r < m; ++r) {
        const T* x = va2.ptr() + size_t(r) * n;
        const T* gr = g.ptr() + size_t(r) * n;
        T mean = stats->data[size_t(r) * 2];
        T inv = stats->data[size_t(r) * 2 + 1];
        T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
        for (int c = 0; c < n; ++c) {
          T xhat = (x[c] - mean) * inv;
          T dxhat = gr[c] * vg.data[size_t(c)];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (t.needs_grad(gamma)) t.grad_ref(gamma).data[size_t(c)] += gr[c] * xhat;
          if (t.needs_grad(beta)) t.grad_ref(beta).data[size_t(c)] += gr[c];
        }
        if (t.needs_grad(a)) {
          T* ga = t.grad_ref(a).ptr() + size_t(r) * n;
          for (int c = 0; c < n; ++c) {
            T xhat = (x[c] - mean) * inv;
            T dxhat = gr[c] * vg.data[size_t(c)];
            ga[c] += inv * (dxhat - sum_dxhat / T(n) - xhat * sum_dxhat_xhat / T(n));
          }
        }
      }
    });
  }

  // ---- reductions ----

  int sum_all(int a) {
    T s = T(0);
    for (T x : val(a).data) s += x;
    Tensor<T> out({1});
    out.data[0] = s;
    return unary_binary(std::move(out), {a}, [a](Tape& t, int id) {
      T g = t.grad_ref(id).data[0];
      Tensor<T>& ga = t.grad_ref(a);
      for (auto& x : ga.data) x += g;
    });
  }

  int mean_all(int a) {
    size_t n = val(a).numel();
    int s = sum_all(a);
    return scale(s, T(1) / T(n));
  }

  // L2 norm of (a - target), a rank-1. Subgradient 0 at the origin.
  int norm2_diff(int a, Tensor<T> target) {
    check_shape(a, target.shape);
    const Tensor<T>& va = val(a);
    double acc = 0;
    for (size_t i = 0; i < va.numel(); ++i) {
      double d = double(va.data[i] - target.data[i]);
      acc += d * d;
    }
    T norm = T(std::sqrt(acc));
    Tensor<T> out({1});
    out.data[0] = norm;
    auto tgt = std::make_shared<Tensor<T>>(std::move(target));
    return unary_binary(std::move(out), {a}, [a, tgt](Tape& t, int id) {
      T L = t.val(id).data[0];
      if (L <= T(1e-20)) return;
      T g = t.grad_ref(id).data[0] / L;
      Tensor<T>& ga = t.grad_ref(a);
      const Tensor<T>& va2 = t.val(a);
      for (size_t i = 0; i < ga.numel(); ++i)
        ga.data[i] += g * (va2.data[i] - tgt->data[i]);
    });
  }

 protected:
  bool needs_grad(int id) const { return nodes_[size_t(id)].req; }

  void accumulate(int id, const Tensor<T>& g) {
    if (!needs_grad(id)) return;
    Tensor<T>& ga = grad_ref(id);
    for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
  }

  void accumulate_scaled(int id, const Tensor<T>& g, T c) {
    if (!needs_grad(id)) return;
    Tensor<T>& ga = grad_ref(id);
    for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += c * g.data[i];
  }

  int add(Tensor<T> v, bool req, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(v), Tensor<T>(), std::move(back), req});
    return int(nodes_.size()) - 1;
  }

  int unary_binary(Tensor<T> out, std::initializer_list<int> parents,
                   std::function<void(Tape&, int)> back) {
    bool req = false;
    if (grad_enabled_)
      for (int p : parents) req = req || nodes_[size_t(p)].req;
    if (!req) return add(std::move(out), false, nullptr);
    int id = add(std::move(out), true, nullptr);
    nodes_[size_t(id)].back = [back, id](Tape& t) { back(t, id); };
    return id;
  }

  void check_same(int a, int b) const {
    if (!nodes_[size_t(a)].val.same_shape(nodes_[size_t(b)].val))
      throw ShapeMismatch("elementwise op shapes differ");
  }
  void check_shape(int a, const std::vector<int>& s) const {
    if (nodes_[size_t(a)].val.shape != s) throw ShapeMismatch("op shape");
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;

 public:
  // ---- composite/structured ops ----

  // conv on CHW input, weight [Cout, Cin, kh, kw], bias [Cout].
  int conv2d(int x, int w, int b, int stride, int pad) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    int cin = vx.shape[0], h = vx.shape[1], wd = vx.shape[2];
    int cout = vw.shape[0], kh = vw.shape[2], kw = vw.shape[3];
    if (vw.shape[1] != cin) throw ChannelMismatch("conv2d: input channels");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    int ck = cin * kh * kw;
    auto col = std::make_shared<Tensor<T>>(std::vector<int>{oh * ow, ck});
    // im2col
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T* row = col->ptr() + (size_t(oy) * ow + ox) * ck;
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * stride - pad + ky;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * stride - pad + kx;
              row[(size_t(ci) * kh + ky) * kw + kx] =
                  (iy >= 0 && iy < h && ix >= 0 && ix < wd)
                      ? vx.data[(size_t(ci) * h + iy) * wd + ix]
                      : T(0);
            }
          }
      }
    Tensor<T> outmat({oh * ow, cout});
    outmat.mat2d().noalias() = col->mat2d() * vw.mat(cout, ck).transpose();
    const Tensor<T>& vb = val(b);
    Tensor<T> out({cout, oh, ow});
    for (int c = 0; c < cout; ++c)
      for (int p = 0; p < oh * ow; ++p)
        out.data[size_t(c) * oh * ow + p] = outmat.data[size_t(p) * cout + c] + vb.data[size_t(c)];
    return unary_binary(std::move(out), {x, w, b},
                        [x, w, b, stride, pad, oh, ow, cout, ck, cin, h, wd, kh, kw,
                         col](Tape& t, int id) {
      int x2 = x, w2 = w, b2 = b;
      const Tensor<T>& g = t.grad_ref(id);
      Tensor<T> gmat({oh * ow, cout});
      for (int c = 0; c < cout; ++c)
        for (int p = 0; p < oh * ow; ++p)
          gmat.data[size_t(p) * cout + c] = g.data[size_t(c) * oh * ow + p];
      if (t.needs_grad(b2)) {
        Tensor<T>& gb = t.grad_ref(b2);
        for (int c = 0; c < cout; ++c) {
          T s = T(0);
          for (int p = 0; p < oh * ow; ++p) s += gmat.data[size_t(p) * cout + c];
          gb.data[size_t(c)] += s;
        }
      }
      if (t.needs_grad(w2))
        t.grad_ref(w2).mat(cout, ck).noalias() += gmat.mat2d().transpose() * col->mat2d();
      if (t.needs_grad(x2)) {
        Tensor<T> dcol({oh * ow, ck});
        dcol.mat2d().noalias() = gmat.mat2d() * t.val(w2).mat(cout, ck);
        Tensor<T>& gx = t.grad_ref(x2);
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const T* row = dcol.ptr() + (size_t(oy) * ow + ox) * ck;
            for (int ci = 0; ci < cin; ++ci)
              for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= wd) continue;
                  gx.data[(size_t(ci) * h + iy) * wd + ix] +=
                      row[(size_t(ci) * kh + ky) * kw + kx];
                }
              }
          }
      }
    });
  }

  // Per-channel batch norm over the spatial dims of a CHW map.
  // When `running` is non-null (eval mode) those stats are used instead of
  // batch stats. Batch stats are written to *out_stats ([C,2]) if given.
  int batch_norm_chw(int x, int gamma, int beta, const Tensor<T>* running,
                     Tensor<T>* out_stats, T eps = T(1e-5)) {
    const Tensor<T>& vx = val(x);
    int c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    int hw = h * w;
    auto stats = std::make_shared<Tensor<T>>(std::vector<int>{c, 2});
    for (int ch = 0; ch < c; ++ch) {
      T mean, inv;
      if (running) {
        mean = running->data[size_t(ch) * 2];
        T var = running->data[size_t(ch) * 2 + 1];
        inv = T(1) / T(std::sqrt(double(var + eps)));
      } else {
        const T* xc = vx.ptr() + size_t(ch) * hw;
        T m = T(0);
        for (int i = 0; i < hw; ++i) m += xc[i];
        m /= T(hw);
        T v = T(0);
        for (int i = 0; i < hw; ++i) v += (xc[i] - m) * (xc[i] - m);
        v /= T(hw);
        mean = m;
        inv = T(1) / T(std::sqrt(double(v + eps)));
        if (out_stats) {
          out_stats->data[size_t(ch) * 2] = m;
          out_stats->data[size_t(ch) * 2 + 1] = v;
        }
      }
      stats->data[size_t(ch) * 2] = mean;
      stats->data[size_t(ch) * 2 + 1] = inv;
    }
    Tensor<T> out({c, h, w});
    const Tensor<T>& vg = val(gamma);
    const Tensor<T>& vb = val(beta);
    for (int ch = 0; ch < c; ++ch) {
      T mean = stats->data[size_t(ch) * 2], inv = stats->data[size_t(ch) * 2 + 1];
      const T* xc = vx.ptr() + size_t(ch) * hw;
      T* yc = out.ptr() + size_t(ch) * hw;
      for (int i = 0; i < hw; ++i) yc[i] = vg.data[size_t(ch)] * (xc[i] - mean) * inv + vb.data[size_t(ch)];
    }
    bool batch_mode = (running == nullptr);
    return unary_binary(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, c, hw, stats, batch_mode](Tape& t, int id) {
      const Tensor<T>& g = t.grad_ref(id);
      const Tensor<T>& vx2 = t.val(x);
      const Tensor<T>& vg = t.val(gamma);
      for (int ch = 0; ch < c; ++ch) {
        T mean = stats->data[size_t(ch) * 2], inv = stats->data[size_t(ch) * 2 + 1];
        const T* xc = vx2.ptr() + size_t(ch) * hw;
        const T* gc = g.ptr() + size_t(ch) * hw;
        T sum_dxhat = T(0), sum_dxhat_xhat = T(0), sum_g = T(0), sum_g_xhat = T(0);
        for (int i = 0; i < hw; ++i) {
          T xhat = (xc[i] - mean) * inv;
          T dxhat = gc[i] * vg.data[size_t(ch)];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          sum_g += gc[i];
          sum_g_xhat += gc[i] * xhat;
        }
        if (t.needs_grad(gamma)) t.grad_ref(gamma).data[size_t(ch)] += sum_g_xhat;
        if (t.needs_grad(beta)) t.grad_ref(beta).data[size_t(ch)] += sum_g;
        if (t.needs_grad(x)) {
          T* gx = t.grad_ref(x).ptr() + size_t(ch) * hw;
          if (batch_mode) {
            for (int i = 0; i < hw; ++i) {
              T xhat = (xc[i] - mean) * inv;
              T dxhat = gc[i] * vg.data[size_t(ch)];
              gx[i] += inv * (dxhat - sum_dxhat / T(hw) - xhat * sum_dxhat_xhat / T(hw));
            }
          } else {
            for (int i = 0; i < hw; ++i) gx[i] += gc[i] * vg.data[size_t(ch)] * inv;
          }
        }
      }
    });
  }

  // [C,H,W] -> [H*W, C] token rows.
  int flatten_chw_to_rows(int x) {
    const Tensor<T>& vx = val(x);
    int c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    int hw = h * w;
    Tensor<T> out({hw, c});
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p) out.data[size_t(p) * c + ch] = vx.data[size_t(ch) * hw + p];
    return unary_binary(std::move(out), {x}, [x, c, hw](Tape& t, int id) {
      Tensor<T>& gx = t.grad_ref(x);
      const Tensor<T>& g = t.grad_ref(id);
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p) gx.data[size_t(ch) * hw + p] += g.data[size_t(p) * c + ch];
    });
  }

  int global_mean_chw(int x) {
    const Tensor<T>& vx = val(x);
    int c = vx.shape[0], hw = vx.shape[1] * vx.shape[2];
    Tensor<T> out({c});
    for (int ch = 0; ch < c; ++ch) {
      T s = T(0);
      for (int i = 0; i < hw; ++i) s += vx.data[size_t(ch) * hw + i];
      out.data[size_t(ch)] = s / T(hw);
    }
    return unary_binary(std::move(out), {x}, [x, c, hw](Tape& t, int id) {
      Tensor<T>& gx = t.grad_ref(x);
      const Tensor<T>& g = t.grad_ref(id);
      for (int ch = 0; ch < c; ++ch) {
        T gc = g.data[size_t(ch)] / T(hw);
        for (int i = 0; i < hw; ++i) gx.data[size_t(ch) * hw + i] += gc;
      }
    });
  }

  int concat_cols(int a, int b) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.shape[0] != vb.shape[0]) throw ShapeMismatch("concat_cols: rows");
    int m = va.shape[0], na = va.shape[1], nb = vb.shape[1];
    Tensor<T> out({m, na + nb});
    for (int r = 0; r < m; ++r) {
      std::copy(va.ptr() + size_t(r) * na, va.ptr() + size_t(r + 1) * na,
                out.ptr() + size_t(r) * (na + nb));
      std::copy(vb.ptr() + size_t(r) * nb, vb.ptr() + size_t(r + 1) * nb,
                out.ptr() + size_t(r) * (na + nb) + na);
    }
    return unary_binary(std::move(out), {a, b}, [a, b, m, na, nb](Tape& t, int id) {
      const Tensor<T>& g = t.grad_ref(id);
      if (t.needs_grad(a)) {
        Tensor<T>& ga = t.grad_ref(a);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < na; ++c)
            ga.data[size_t(r) * na + c] += g.data[size_t(r) * (na + nb) + c];
      }
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad_ref(b);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < nb; ++c)
            gb.data[size_t(r) * nb + c] += g.data[size_t(r) * (na + nb) + na + c];
      }
    });
  }

  // Bilinear sampling of a CHW map at normalized coords in [-1,1]^2
  // (border-clamped). x: [C,H,W], coords: [K,2] -> [K,C].
  int grid_sample_chw(int x, int coords) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vc = val(coords);
    int c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    int k = vc.shape[0];
    Tensor<T> out({k, c});
    auto sample_setup = [h, w](T sx, T sy, int& x0, int& y0, T& fx, T& fy, bool& in_x,
                               bool& in_y) {
      T gx = (sx + T(1)) * T(0.5) * T(w - 1);
      T gy = (sy + T(1)) * T(0.5) * T(h - 1);
      in_x = gx > T(0) && gx < T(w - 1);
      in_y = gy > T(0) && gy < T(h - 1);
      gx = std::min(T(w - 1), std::max(T(0), gx));
      gy = std::min(T(h - 1), std::max(T(0), gy));
      x0 = std::min(w - 2, int(gx));
      y0 = std::min(h - 2, int(gy));
      if (w == 1) x0 = 0;
      if (h == 1) y0 = 0;
      fx = gx - T(x0);
      fy = gy - T(y0);
    };
    for (int i = 0; i < k; ++i) {
      int x0, y0;
      T fx, fy;
      bool in_x, in_y;
      sample_setup(vc.data[size_t(i) * 2], vc.data[size_t(i) * 2 + 1], x0, y0, fx, fy, in_x,
                   in_y);
      int x1 = std::min(w - 1, x0 + 1), y1 = std::min(h - 1, y0 + 1);
      for (int ch = 0; ch < c; ++ch) {
        const T* m = vx.ptr() + size_t(ch) * h * w;
        T v00 = m[size_t(y0) * w + x0], v01 = m[size_t(y0) * w + x1];
        T v10 = m[size_t(y1) * w + x0], v11 = m[size_t(y1) * w + x1];
        out.data[size_t(i) * c + ch] = (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) +
                                       fy * ((T(1) - fx) * v10 + fx * v11);
      }
    }
    return unary_binary(std::move(out), {x, coords},
                        [x, coords, c, h, w, k, sample_setup](Tape& t, int id) {
      const Tensor<T>& g = t.grad_ref(id);
      const Tensor<T>& vx2 = t.val(x);
      const Tensor<T>& vc2 = t.val(coords);
      for (int i = 0; i < k; ++i) {
        int x0, y0;
        T fx, fy;
        bool in_x, in_y;
        sample_setup(vc2.data[size_t(i) * 2], vc2.data[size_t(i) * 2 + 1], x0, y0, fx, fy,
                     in_x, in_y);
        int x1 = std::min(w - 1, x0 + 1), y1 = std::min(h - 1, y0 + 1);
        T dgx = T(0), dgy = T(0);
        for (int ch = 0; ch < c; ++ch) {
          T go = g.data[size_t(i) * c + ch];
          if (go == T(0)) continue;
          const T* m = vx2.ptr() + size_t(ch) * h * w;
          T v00 = m[size_t(y0) * w + x0], v01 = m[size_t(y0) * w + x1];
          T v10 = m[size_t(y1) * w + x0], v11 = m[size_t(y1) * w + x1];
          if (t.needs_grad(x)) {
            T* gm = t.grad_ref(x).ptr() + size_t(ch) * h * w;
            gm[size_t(y0) * w + x0] += go * (T(1) - fy) * (T(1) - fx);
            gm[size_t(y0) * w + x1] += go * (T(1) - fy) * fx;
            gm[size_t(y1) * w + x0] += go * fy * (T(1) - fx);
            gm[size_t(y1) * w + x1] += go * fy * fx;
          }
          dgx += go * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
          dgy += go * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        if (t.needs_grad(coords)) {
          Tensor<T>& gc = t.grad_ref(coords);
          if (in_x) gc.data[size_t(i) * 2] += dgx * T(0.5) * T(w - 1);
          if (in_y) gc.data[size_t(i) * 2 + 1] += dgy * T(0.5) * T(h - 1);
        }
      }
    });
  }

  // Frobenius distance between rot6d_to_matrix(a) and a fixed target rotation.
  int rot6d_frob(int a, const Mat3& target) {
    const Tensor<T>& va = val(a);
    if (va.numel() != 6) throw ShapeMismatch("rot6d_frob: need 6 values");
    Vec3 a1(double(va.data[0]), double(va.data[1]), double(va.data[2]));
    Vec3 a2(double(va.data[3]), double(va.data[4]), double(va.data[5]));
    double n1 = a1.norm();
    if (n1 < 1e-12) throw DegenerateInput("rot6d: first half is zero");
    Vec3 b1 = a1 / n1;
    Vec3 wv = a2 - b1.dot(a2) * b1;
    double n2 = wv.norm();
    if (n2 < 1e-8 * std::max(1.0, a2.norm()))
      throw DegenerateInput("rot6d: halves are parallel");
    Vec3 b2 = wv / n2;
    Vec3 b3 = b1.cross(b2);
    Mat3 R;
    R.col(0) = b1;
    R.col(1) = b2;
    R.col(2) = b3;
    double L = (R - target).norm();  // Frobenius
    Tensor<T> out({1});
    out.data[0] = T(L);
    auto tgt = std::make_shared<Mat3>(target);
    return unary_binary(std::move(out), {a}, [a, tgt](Tape& t, int id) {
      const Tensor<T>& va2 = t.val(a);
      Vec3 a1(double(va2.data[0]), double(va2.data[1]), double(va2.data[2]));
      Vec3 a2v(double(va2.data[3]), double(va2.data[4]), double(va2.data[5]));
      double n1 = a1.norm();
      Vec3 b1 = a1 / n1;
      double s = b1.dot(a2v);
      Vec3 wv = a2v - s * b1;
      double n2 = wv.norm();
      Vec3 b2 = wv / n2;
      Vec3 b3 = b1.cross(b2);
      Mat3 R;
      R.col(0) = b1;
      R.col(1) = b2;
      R.col(2) = b3;
      double L = (R - *tgt).norm();
      if (L <= 1e-20) return;
      double gl = double(t.grad_ref(id).data[0]) / L;
      Mat3 dR = gl * (R - *tgt);
      Vec3 G1 = dR.col(0), G2 = dR.col(1), G3 = dR.col(2);
      // through b3 = b1 x b2
      G1 += b2.cross(G3);
      G2 += G3.cross(b1);
      // through b2 = w/|w|
      Vec3 gw = (Mat3::Identity() - b2 * b2.transpose()) * G2 / n2;
      // through w = a2 - (b1.a2) b1
      Vec3 ga2 = gw - b1 * (b1.dot(gw));
      G1 += -(a2v * (b1.dot(gw)) + s * gw);
      // through b1 = a1/|a1|
      Vec3 ga1 = (Mat3::Identity() - b1 * b1.transpose()) * G1 / n1;
      Tensor<T>& ga = t.grad_ref(a);
      for (int i = 0; i < 3; ++i) {
        ga.data[size_t(i)] += T(ga1[i]);
        ga.data[size_t(i) + 3] += T(ga2[i]);
      }
    });
  }
};

}  // namespace rap::nn
