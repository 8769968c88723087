#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "support.hpp"
#include "xsite/errors.hpp"
#include "xsite/grad_check.hpp"
#include "xsite/kernels.hpp"
#include "xsite/ops.hpp"

using namespace xsite;

namespace {

Tensor t(Shape s, std::vector<double> v, bool g = false) { return Tensor(std::move(s), std::move(v), g); }

void expect_near_all(std::span<const double> a, std::span<const double> b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

TEST(Conv2d, IdentityKernelReturnsInput) {
  Tensor x = t({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor y = ops::conv2d(x, t({1, 1, 1, 1}, {1}), t({1}, {0}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  expect_near_all(y.values(), x.values(), 0.0);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  std::mt19937_64 rng(3);
  Tensor x = oracle::random_tensor({2, 3, 5, 4}, rng);
  Tensor y = ops::conv2d(x, Tensor::zeros({2, 3, 3, 3}), t({2}, {0.25, -1.5}), 1, 1);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.at(i), (i / 20) % 2 == 0 ? 0.25 : -1.5);
}

TEST(Conv2d, HandEvaluatedWindows) {
  Tensor x = t({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor y = ops::conv2d(x, t({1, 1, 2, 2}, {1, 0, 0, 1}), t({1}, {0}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  const std::vector<double> want{6, 8, 12, 14};
  expect_near_all(y.values(), want, 0.0);
}

TEST(Conv2d, MatchesNaiveLoops) {
  std::mt19937_64 rng(11);
  struct Case {
    std::size_t n, c, h, w, f, k, s, p;
  };
  for (const Case& cs : {Case{2, 3, 7, 6, 4, 3, 1, 1}, Case{1, 2, 8, 8, 3, 3, 2, 1}, Case{3, 1, 5, 5, 2, 1, 1, 0},
                         Case{2, 4, 9, 7, 5, 3, 2, 0}, Case{1, 2, 4, 4, 2, 4, 1, 2}}) {
    Tensor x = oracle::random_tensor({cs.n, cs.c, cs.h, cs.w}, rng);
    Tensor k = oracle::random_tensor({cs.f, cs.c, cs.k, cs.k}, rng);
    Tensor b = oracle::random_tensor({cs.f}, rng);
    std::size_t oh = 0, ow = 0;
    auto want = oracle::naive_conv(x.values(), cs.n, cs.c, cs.h, cs.w, k.values(), cs.f, cs.k, cs.k, b.values(),
                                   cs.s, cs.p, oh, ow);
    Tensor y = ops::conv2d(x, k, b, cs.s, cs.p);
    EXPECT_EQ(y.shape(), (Shape{cs.n, cs.f, oh, ow}));
    expect_near_all(y.values(), want, 1e-12);
  }
}

TEST(Conv2d, RejectsChannelMismatchAndOversizedKernel) {
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  EXPECT_THROW(ops::conv2d(x, Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1})), ShapeError);
  EXPECT_THROW(ops::conv2d(x, Tensor::zeros({1, 2, 5, 5}), Tensor::zeros({1})), ShapeError);
  EXPECT_THROW(ops::conv2d(x, Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1}), 0), ShapeError);
}

TEST(Kernels, ParallelMatchesReference) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  auto fill = [&](std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
  };
  const auto g = kernels::ConvGeometry::make(3, 4, 9, 8, 5, 3, 3, 2, 1);
  auto in = fill(g.input_size()), w = fill(g.weight_size()), b = fill(g.filters), go = fill(g.output_size());
  std::vector<double> o1(g.output_size()), o2(g.output_size());
  kernels::conv2d_forward(g, in, w, b, o1);
  kernels::reference::conv2d_forward(g, in, w, b, o2);
  expect_near_all(o1, o2, 1e-12);

  std::vector<double> gi1(in.size()), gi2(in.size()), gw1(w.size()), gw2(w.size()), gb1(b.size()), gb2(b.size());
  kernels::conv2d_backward(g, in, w, go, gi1, gw1, gb1);
  kernels::reference::conv2d_backward(g, in, w, go, gi2, gw2, gb2);
  expect_near_all(gi1, gi2, 1e-12);
  expect_near_all(gw1, gw2, 1e-12);
  expect_near_all(gb1, gb2, 1e-12);

  auto din = fill(6 * 7), dw = fill(7 * 3), db = fill(3), dgo = fill(6 * 3);
  std::vector<double> d1(18), d2(18);
  kernels::dense_forward(6, 7, 3, din, dw, db, d1);
  kernels::reference::dense_forward(6, 7, 3, din, dw, db, d2);
  expect_near_all(d1, d2, 1e-12);
  std::vector<double> a1(42), a2(42), w1(21), w2(21), c1(3), c2(3);
  kernels::dense_backward(6, 7, 3, din, dw, dgo, a1, w1, c1);
  kernels::reference::dense_backward(6, 7, 3, din, dw, dgo, a2, w2, c2);
  expect_near_all(a1, a2, 1e-12);
  expect_near_all(w1, w2, 1e-12);
  expect_near_all(c1, c2, 1e-12);

  auto mx = fill(4 * 3 * 10);
  std::vector<double> m1(3), v1(3), m2(3), v2(3);
  kernels::channel_moments(4, 3, 10, mx, m1, v1);
  kernels::reference::channel_moments(4, 3, 10, mx, m2, v2);
  expect_near_all(m1, m2, 1e-12);
  expect_near_all(v1, v2, 1e-12);
}

TEST(Dense, Examples) {
  Tensor x = t({2, 2}, {1, -2, 3, 0.5});
  expect_near_all(ops::dense(x, t({2, 2}, {1, 0, 0, 1}), t({2}, {0, 0})).values(), x.values(), 0.0);
  const std::vector<double> rows{4, -1, 4, -1};
  expect_near_all(ops::dense(x, Tensor::zeros({2, 2}), t({2}, {4, -1})).values(), rows, 0.0);
  const std::vector<double> want{4, 7};
  expect_near_all(ops::dense(t({1, 2}, {1, 2}), t({2, 2}, {3, 0, 0, 3}), t({2}, {1, 1})).values(), want, 0.0);
  EXPECT_THROW(ops::dense(x, Tensor::zeros({3, 2}), Tensor::zeros({2})), ShapeError);
}

TEST(Elementwise, ReluGapSoftmax) {
  const std::vector<double> relu_want{0, 0, 2};
  expect_near_all(ops::relu(t({3}, {-1, 0, 2})).values(), relu_want, 0.0);

  Tensor gap = ops::global_avg_pool(Tensor::full({2, 3, 4, 5}, 1.75));
  EXPECT_EQ(gap.shape(), (Shape{2, 3}));
  for (double v : gap.values()) EXPECT_DOUBLE_EQ(v, 1.75);
  EXPECT_THROW(ops::global_avg_pool(Tensor::zeros({1, 2, 0, 3})), ShapeError);

  const std::vector<double> half{0.5, 0.5};
  expect_near_all(ops::softmax(t({1, 2}, {0, 0})).values(), half, 0.0);
  Tensor big = ops::softmax(t({2, 3}, {1000, 999, -1000, 3, 3, 3}));
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_TRUE(std::isfinite(big.at(r * 3 + c)));
      s += big.at(r * 3 + c);
    }
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Elementwise, ConcatRejectsMismatchedExtents) {
  EXPECT_THROW(ops::concat_channels({Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 2, 2, 2})}), ShapeError);
  Tensor c = ops::concat_channels({Tensor::full({1, 1, 2, 2}, 1), Tensor::full({1, 2, 2, 2}, 2)});
  EXPECT_EQ(c.shape(), (Shape{1, 3, 2, 2}));
  EXPECT_EQ(c.at(3), 1);
  EXPECT_EQ(c.at(4), 2);
}

TEST(Backward, IdentityAndSquare) {
  Tensor x = t({1}, {3.0}, true);
  x.backward();
  EXPECT_EQ(x.grad()[0], 1.0);

  Tensor v = t({2}, {1, 2}, true);
  ops::sum(ops::mul(v, v)).backward();
  EXPECT_EQ(v.grad()[0], 2.0);
  EXPECT_EQ(v.grad()[1], 4.0);
}

TEST(Backward, FanOutAccumulatesAndLeafGradsAdd) {
  Tensor x = t({2}, {1.5, -2}, true);
  ops::sum(ops::add(ops::mul(x, x), x)).backward();
  EXPECT_EQ(x.grad()[0], 2 * 1.5 + 1);
  EXPECT_EQ(x.grad()[1], 2 * -2.0 + 1);
  ops::sum(x).backward();
  EXPECT_EQ(x.grad()[0], 2 * 1.5 + 2);
}

TEST(Backward, RejectsNonScalar) {
  Tensor x = t({2}, {1, 2}, true);
  EXPECT_THROW(ops::relu(x).backward(), ShapeError);
}

TEST(Backward, IsLinear) {
  std::mt19937_64 rng(8);
  Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  Tensor k = oracle::random_tensor({2, 3, 3, 3}, rng);
  auto f = [&] { return ops::sum(ops::relu(ops::conv2d(x, k, Tensor(), 1, 1))); };
  auto g = [&] { return ops::mean(ops::mul(x, x)); };
  auto grad_of = [&](const Tensor& out) {
    x.zero_grad();
    out.backward();
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto gf = grad_of(f()), gg = grad_of(g());
  const auto gc = grad_of(ops::add(ops::scale(f(), 2.5), ops::scale(g(), -0.75)));
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], 2.5 * gf[i] - 0.75 * gg[i], 1e-12);
}

TEST(Backward, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(21);
    Tensor x = oracle::random_tensor({3, 2, 5, 5}, rng);
    Tensor k = oracle::random_tensor({4, 2, 3, 3}, rng);
    Tensor w = oracle::random_tensor({4, 2}, rng);
    Tensor out = ops::sum(ops::softmax(ops::dense(ops::global_avg_pool(ops::relu(ops::conv2d(x, k, Tensor(), 2, 1))),
                                                  w, Tensor())));
    Tensor loss = ops::mean(ops::mul(out, out));
    loss.backward();
    std::vector<double> all(x.grad().begin(), x.grad().end());
    all.insert(all.end(), k.grad().begin(), k.grad().end());
    all.push_back(loss.item());
    return all;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, TopologicalOrderAndSingleVisit) {
  Tensor a = t({2}, {1, 2}, true);
  Tensor b = ops::mul(a, a);
  Tensor c = ops::add(b, a);
  Tensor d = ops::sum(ops::add(c, b));
  Tape tape = Tape::record(d);
  auto nodes = tape.nodes();
  std::set<detail::Node*> seen;
  for (detail::Node* n : nodes) {
    EXPECT_TRUE(seen.insert(n).second);
    for (const auto& p : n->parents) EXPECT_TRUE(!p->requires_grad || seen.count(p.get())) << "parent after child";
  }
  EXPECT_EQ(nodes.back(), d.node());
  EXPECT_EQ(tape.size(), 5u);  // a, b, c, c+b, sum
}

TEST(GradCheck, SumAndRelu) {
  std::mt19937_64 rng(1);
  Tensor x = oracle::random_tensor({10}, rng);
  EXPECT_LT(grad_check([](const Tensor& v) { return ops::sum(v); }, x).max_rel_error, 1e-9);
  // Keep every coordinate at least 0.1 away from the kink.
  auto vals = x.mutable_values();
  for (double& v : vals) v = v < 0 ? v - 0.1 : v + 0.1;
  EXPECT_LT(grad_check([](const Tensor& v) { return ops::sum(ops::relu(v)); }, x).max_rel_error, 1e-6);
}

TEST(GradCheck, CompositeGraph) {
  std::mt19937_64 rng(4);
  Tensor x = oracle::random_tensor({2, 2, 6, 6}, rng);
  Tensor k = oracle::random_tensor({3, 2, 3, 3}, rng);
  Tensor b = oracle::random_tensor({3}, rng);
  Tensor w = oracle::random_tensor({3, 2}, rng);
  auto loss = [&] {
    Tensor logits = ops::dense(ops::global_avg_pool(ops::relu(ops::conv2d(x, k, b, 1, 1))), w, Tensor());
    Tensor p = ops::softmax(logits);
    return ops::scale(ops::add(ops::pick(p, 0, 1), ops::pick(p, 1, 0)), -1.0);
  };
  EXPECT_LT(grad_check(loss, k).max_rel_error, 1e-4);
  EXPECT_LT(grad_check(loss, x).max_rel_error, 1e-4);
  EXPECT_LT(grad_check(loss, w).max_rel_error, 1e-4);
}
