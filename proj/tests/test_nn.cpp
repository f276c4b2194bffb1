#include <doctest.h>

#include "rap/nn/layers.hpp"

using namespace rap;
using nn::Ctx;
using nn::GradBuffer;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;

namespace {

Tensor<double> rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// FD-checks d(sum(w * f(x)))/dx for a unary tape graph builder.
template <typename BuildFn>
void check_unary_grad(const Tensor<double>& x0, const BuildFn& build, double tol = 1e-6) {
  Rng rng(99);
  Tensor<double> w(std::vector<int>{});
  auto eval = [&](const Tensor<double>& x, Tensor<double>* gx) {
    Tape<double> t(true);
    int in = t.leaf(x);
    int out = build(t, in);
    Tensor<double> seed(t.val(out).shape);
    if (w.numel() != seed.numel()) {
      w = Tensor<double>(seed.shape);
      Rng wr(5);
      for (auto& v : w.data) v = wr.uniform(-1, 1);
    }
    double L = 0;
    for (size_t i = 0; i < seed.numel(); ++i) {
      seed.data[i] = w.data[i];
      L += w.data[i] * t.val(out).data[i];
    }
    if (gx) {
      t.backward_from(out, seed);
      *gx = t.grad_ref(in);
    }
    return L;
  };
  Tensor<double> g;
  eval(x0, &g);
  Tensor<double> x = x0;
  const double h = 1e-6;
  for (size_t i = 0; i < x.numel(); i += std::max<size_t>(1, x.numel() / 40)) {
    double v0 = x.data[i];
    x.data[i] = v0 + h;
    double lp = eval(x, nullptr);
    x.data[i] = v0 - h;
    double lm = eval(x, nullptr);
    x.data[i] = v0;
    double fd = (lp - lm) / (2 * h);
    CHECK(std::abs(fd - g.data[i]) < tol * std::max(1.0, std::abs(fd)));
  }
}

}  // namespace

TEST_CASE("elementwise and reduction op gradients") {
  Rng rng(1);
  Tensor<double> x = rand_tensor({4, 5}, rng);
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.relu(in); });
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.leaky_relu(in, 0.2); });
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.gelu(in); });
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.sigmoid(in); });
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.exp_op(in); });
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.softmax_rows(in); });
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.mean_all(in); });
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.mul(in, in); });
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.transpose(in); });
  check_unary_grad(x, [](Tape<double>& t, int in) { return t.slice_cols(in, 1, 4); });
}

TEST_CASE("matmul and bias gradients") {
  Rng rng(2);
  Tensor<double> x = rand_tensor({3, 4}, rng);
  Tensor<double> wmat = rand_tensor({4, 2}, rng);
  Tensor<double> bias = rand_tensor({2}, rng);
  check_unary_grad(x, [&](Tape<double>& t, int in) {
    return t.add_rowvec(t.matmul(in, t.constant(wmat)), t.constant(bias));
  });
  check_unary_grad(wmat, [&](Tape<double>& t, int in) {
    return t.matmul(t.constant(x), in);
  });
}

TEST_CASE("layer_norm gradient") {
  Rng rng(3);
  Tensor<double> x = rand_tensor({3, 6}, rng);
  Tensor<double> gamma = rand_tensor({6}, rng, 0.5, 1.5);
  Tensor<double> beta = rand_tensor({6}, rng);
  check_unary_grad(x, [&](Tape<double>& t, int in) {
    return t.layer_norm(in, t.leaf(gamma), t.leaf(beta));
  }, 1e-5);
}

TEST_CASE("conv2d gradient and shape") {
  Rng rng(4);
  Tensor<double> x = rand_tensor({2, 7, 9}, rng);
  Tensor<double> wconv = rand_tensor({3, 2, 3, 3}, rng);
  Tensor<double> bias = rand_tensor({3}, rng);
  {
    Tape<double> t(false);
    int out = t.conv2d(t.constant(x), t.constant(wconv), t.constant(bias), 2, 1);
    CHECK(t.val(out).shape == std::vector<int>({3, 4, 5}));  // ceil(7/2), ceil(9/2)
  }
  check_unary_grad(x, [&](Tape<double>& t, int in) {
    return t.conv2d(in, t.constant(wconv), t.constant(bias), 2, 1);
  }, 1e-5);
  check_unary_grad(wconv, [&](Tape<double>& t, int in) {
    return t.conv2d(t.constant(x), in, t.constant(bias), 1, 1);
  }, 1e-5);
}

TEST_CASE("batch_norm gradient (batch stats)") {
  Rng rng(5);
  Tensor<double> x = rand_tensor({3, 4, 5}, rng);
  Tensor<double> gamma = rand_tensor({3}, rng, 0.5, 1.5);
  Tensor<double> beta = rand_tensor({3}, rng);
  check_unary_grad(x, [&](Tape<double>& t, int in) {
    return t.batch_norm_chw(in, t.leaf(gamma), t.leaf(beta), nullptr, nullptr);
  }, 1e-4);
}

TEST_CASE("norm2_diff and rot6d_frob gradients") {
  Rng rng(6);
  Tensor<double> x = rand_tensor({3}, rng);
  Tensor<double> target = rand_tensor({3}, rng);
  check_unary_grad(x, [&](Tape<double>& t, int in) {
    return t.norm2_diff(in, Tensor<double>(target));
  });

  Tensor<double> r6 = rand_tensor({6}, rng);
  r6.data = {0.9, 0.2, -0.1, 0.1, 1.1, 0.4};
  Mat3 tgt = axis_angle_matrix(Vec3(0.3, -0.5, 0.8), 0.9);
  check_unary_grad(r6, [&](Tape<double>& t, int in) { return t.rot6d_frob(in, tgt); }, 1e-5);
}

TEST_CASE("single-head two-token attention matches hand computation") {
  // Hand-set 2x2 problem: x = [[1,0],[0,1]], Wq = Wk = Wv = I, no bias.
  Tape<double> t(false);
  Tensor<double> x({2, 2});
  x.data = {1, 0, 0, 1};
  Tensor<double> eye({2, 2});
  eye.data = {1, 0, 0, 1};
  int xn = t.constant(x);
  int q = t.matmul(xn, t.constant(eye));
  int k = t.matmul(xn, t.constant(eye));
  int v = t.matmul(xn, t.constant(eye));
  int scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(2.0));
  int attn = t.softmax_rows(scores);
  int out = t.matmul(attn, v);
  // scores = [[s,0],[0,s]] with s = 1/sqrt(2); softmax row = (e^s, 1)/(e^s+1)
  double s = 1.0 / std::sqrt(2.0);
  double a = std::exp(s) / (std::exp(s) + 1.0);
  const auto& attn_v = t.val(attn);
  CHECK(std::abs(attn_v.data[0] - a) < 1e-8);
  CHECK(std::abs(attn_v.data[1] - (1 - a)) < 1e-8);
  const auto& out_v = t.val(out);
  CHECK(std::abs(out_v.data[0] - a) < 1e-8);
  CHECK(std::abs(out_v.data[1] - (1 - a)) < 1e-8);
  // rows of softmax sum to 1
  CHECK(std::abs(attn_v.data[0] + attn_v.data[1] - 1.0) < 1e-6);
  CHECK(std::abs(attn_v.data[2] + attn_v.data[3] - 1.0) < 1e-6);
}

TEST_CASE("param nodes accumulate into sinks and Adam steps") {
  Rng rng(7);
  ParamStore<double> store;
  nn::Linear<double> lin;
  lin.build(store, "lin", 3, 2, rng);
  GradBuffer<double> grads(store);

  Tape<double> t(true);
  Ctx<double> ctx{&t, &grads, false, nullptr};
  Tensor<double> x = rand_tensor({1, 3}, rng);
  int out = lin.forward(ctx, store, t.constant(x));
  int loss = t.mean_all(out);
  t.backward(loss);
  double gsum = 0;
  for (const auto& g : grads.grads) for (double v : g.data) gsum += std::abs(v);
  CHECK(gsum > 0);

  nn::Adam<double> opt;
  opt.lr = 0.1;
  opt.init(store);
  auto before = store[lin.w].data;
  opt.step(store, grads);
  CHECK(store[lin.w].data != before);
}

TEST_CASE("dropout is identity in eval and seeded in train") {
  Rng rng(8);
  Tensor<double> x = rand_tensor({5, 5}, rng);
  Tape<double> t(false);
  Ctx<double> ctx{&t, nullptr, false, nullptr};
  int id = nn::dropout(ctx, t.constant(x), 0.3);
  CHECK(t.val(id).data == x.data);

  Rng d1(42), d2(42);
  Tape<double> t1(false), t2(false);
  Ctx<double> c1{&t1, nullptr, true, &d1}, c2{&t2, nullptr, true, &d2};
  int a = nn::dropout(c1, t1.constant(x), 0.3);
  int b = nn::dropout(c2, t2.constant(x), 0.3);
  CHECK(t1.val(a).data == t2.val(b).data);
}
