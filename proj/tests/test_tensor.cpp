#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "sonus/tensor.hpp"

using namespace sonus;
using sonus_test::gradcheck;

namespace {

Tensor randn64(Rng& rng, Shape shape) {
  return Tensor::randn(rng, std::move(shape), 1.0, DType::f64);
}

}  // namespace

TEST_CASE("matmul basics") {
  // identity case
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor b = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor r = matmul(eye, b);
  for (std::int64_t i = 0; i < 6; ++i) CHECK(r.data()[i] == doctest::Approx(b.data()[i]));

  // hand multiplication
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor c = Tensor::from({2, 1}, {5, 6});
  Tensor p = matmul(a, c);
  CHECK(p.at({0, 0}) == doctest::Approx(17));
  CHECK(p.at({1, 0}) == doctest::Approx(39));

  // annihilator
  Tensor z = Tensor::zeros({2, 2});
  Tensor pz = matmul(z, a);
  for (double v : pz.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("conv1d examples") {
  // delta kernel is the identity
  Tensor x = Tensor::from({1, 4}, {1, 2, 3, 4});
  Tensor delta = Tensor::from({1, 1, 1}, {1});
  Tensor y = conv1d(x, delta, 1, 0);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

  // hand convolution, cross-correlation convention
  Tensor x2 = Tensor::from({1, 3}, {1, 2, 3});
  Tensor k2 = Tensor::from({1, 1, 2}, {1, 1});
  Tensor y2 = conv1d(x2, k2, 1, 0);
  REQUIRE(y2.dim(1) == 2);
  CHECK(y2.at({0, 0}) == doctest::Approx(3));
  CHECK(y2.at({0, 1}) == doctest::Approx(5));

  // length formula with stride 2
  Tensor x3 = Tensor::from({1, 4}, {1, 1, 1, 1});
  Tensor y3 = conv1d(x3, k2, 2, 0);
  CHECK(y3.dim(1) == 2);

  // output length < 1 is an error
  CHECK_THROWS_AS(conv1d(Tensor::from({1, 1}, {1.0}), k2, 1, 0), ShapeError);
}

TEST_CASE("conv1d_transposed shape laws") {
  Rng rng(7);
  // identity kernel at stride 1
  Tensor x = Tensor::from({1, 5}, {1, 2, 3, 4, 5});
  Tensor k1 = Tensor::from({1, 1, 1}, {1});
  Tensor y = conv1d_transposed(x, k1, 1, 0);
  for (std::int64_t i = 0; i < 5; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

  // stride 2 doubles length with k=2, pad 0
  Tensor k2 = Tensor::uniform(rng, {1, 1, 2}, -1, 1);
  Tensor y2 = conv1d_transposed(x, k2, 2, 0);
  CHECK(y2.dim(1) == (5 - 1) * 2 + 2);

  // composing stride-2 conv and stride-2 transposed conv restores length
  Tensor xin = Tensor::uniform(rng, {2, 8}, -1, 1);
  Tensor wk = Tensor::uniform(rng, {3, 2, 3}, -1, 1);  // conv [C_out=3, C_in=2, k=3]
  Tensor wt = Tensor::uniform(rng, {3, 2, 4}, -1, 1);  // convT [C_in=3, C_out=2, k=4]
  Tensor mid = conv1d(xin, wk, 2, 1);                  // T' = 4
  Tensor back = conv1d_transposed(mid, wt, 2, 1);      // (4-1)*2 - 2 + 4 = 8
  CHECK(back.dim(1) == 8);
}

TEST_CASE("attention basics") {
  // single key/value token: output equals that value regardless of query
  Rng rng(3);
  Tensor q = randn64(rng, {2, 3, 4});
  Tensor k = randn64(rng, {2, 1, 4});
  Tensor v = randn64(rng, {2, 1, 4});
  Tensor y = attention(q, k, v);
  for (std::int64_t h = 0; h < 2; ++h) {
    for (std::int64_t t = 0; t < 3; ++t) {
      for (std::int64_t c = 0; c < 4; ++c) {
        CHECK(y.at({h, t, c}) == doctest::Approx(v.at({h, 0, c})));
      }
    }
  }

  // identical keys: output is the mean of values
  Tensor k2 = Tensor::zeros({1, 3, 2}, DType::f64);
  Tensor v2 = Tensor::from({1, 3, 2}, {1, 2, 3, 4, 5, 6}, DType::f64);
  Tensor q2 = randn64(rng, {1, 1, 2});
  Tensor y2 = attention(q2, k2, v2);
  CHECK(y2.at({0, 0, 0}) == doctest::Approx(3.0));
  CHECK(y2.at({0, 0, 1}) == doctest::Approx(4.0));

  // 2-token case vs hand-computed softmax weights
  Tensor q3 = Tensor::from({1, 1, 1}, {1.0}, DType::f64);
  Tensor k3 = Tensor::from({1, 2, 1}, {0.5, -0.25}, DType::f64);
  Tensor v3 = Tensor::from({1, 2, 1}, {2.0, -1.0}, DType::f64);
  // logits = [0.5, -0.25] (d=1 so scale 1), p = softmax
  const double e0 = std::exp(0.5), e1 = std::exp(-0.25);
  const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
  Tensor y3 = attention(q3, k3, v3);
  CHECK(y3.item() == doctest::Approx(p0 * 2.0 + p1 * -1.0).epsilon(1e-12));

  CHECK_THROWS_AS(
      attention(Tensor::zeros({1, 2, 0}), Tensor::zeros({1, 2, 0}), Tensor::zeros({1, 2, 0})),
      ShapeError);
}

TEST_CASE("softmax rows sum to one and are nonnegative") {
  Rng rng(11);
  Tensor x = Tensor::randn(rng, {7, 9}, 3.0, DType::f64);
  Tensor p = softmax_lastdim(x);
  for (std::int64_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < 9; ++j) {
      CHECK(p.at({r, j}) >= 0.0);
      s += p.at({r, j});
    }
    CHECK(std::fabs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("backward basics") {
  // loss = sum(x) -> grad ones
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, DType::f64).set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum_all(x));
  }
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));

  // loss = x^2 at x=3 -> grad 6
  Tensor x2 = Tensor::scalar(3.0, DType::f64).set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum_all(square(x2)));
  }
  CHECK(x2.grad()[0] == doctest::Approx(6.0));

  // non-scalar loss is a contract error
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
}

TEST_CASE("3-layer MLP gradients vs central finite differences") {
  Rng rng(17);
  Tensor w1 = randn64(rng, {5, 6});
  Tensor b1 = randn64(rng, {6});
  Tensor w2 = randn64(rng, {6, 6});
  Tensor b2 = randn64(rng, {6});
  Tensor w3 = randn64(rng, {6, 2});
  Tensor b3 = randn64(rng, {2});
  Tensor x = randn64(rng, {4, 5});
  for (auto* t : {&w1, &b1, &w2, &b2, &w3, &b3, &x}) t->set_requires_grad(true);
  auto f = [&]() {
    Tensor h1 = gelu(add(matmul(x, w1), b1));
    Tensor h2 = silu(add(matmul(h1, w2), b2));
    Tensor out = add(matmul(h2, w3), b3);
    return mean_all(square(out));
  };
  auto res = gradcheck(f, {w1, b1, w2, b2, w3, b3, x});
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("per-op finite-difference battery") {
  Rng rng(23);
  auto check_unary = [&](const char* name, const std::function<Tensor(const Tensor&)>& op,
                         double lo = -2.0, double hi = 2.0) {
    Tensor x = Tensor::uniform(rng, {3, 4}, lo, hi, DType::f64).set_requires_grad(true);
    Tensor wgt = Tensor::uniform(rng, {3, 4}, 0.5, 1.5, DType::f64);
    auto f = [&]() { return mean_all(mul(op(x), wgt)); };
    auto res = gradcheck(f, {x});
    INFO(name << ": " << res.worst);
    CHECK(res.max_rel_err < 1e-4);
  };
  check_unary("exp", [](const Tensor& t) { return exp_t(t); });
  check_unary("log", [](const Tensor& t) { return log_t(t); }, 0.2, 3.0);
  check_unary("sigmoid", [](const Tensor& t) { return sigmoid(t); });
  check_unary("tanh", [](const Tensor& t) { return tanh_t(t); });
  check_unary("gelu", [](const Tensor& t) { return gelu(t); });
  check_unary("silu", [](const Tensor& t) { return silu(t); });
  check_unary("square", [](const Tensor& t) { return square(t); });
  check_unary("scale", [](const Tensor& t) { return scale(t, -1.7); });
  check_unary("add_scalar", [](const Tensor& t) { return add_scalar(t, 0.31); });
  check_unary("neg", [](const Tensor& t) { return neg(t); });
  check_unary("softmax", [](const Tensor& t) { return softmax_lastdim(t); });
  check_unary("layer_norm", [](const Tensor& t) { return layer_norm(t); });

  {
    Tensor x = randn64(rng, {3, 4}).set_requires_grad(true);
    Tensor wgt = Tensor::uniform(rng, {3}, 0.5, 1.5, DType::f64);
    auto f = [&]() { return mean_all(mul(sum_lastdim(x), wgt)); };
    auto res = gradcheck(f, {x});
    INFO("sum_lastdim: " << res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }

  // relu / leaky_relu away from the kink
  {
    Tensor xp = Tensor::uniform(rng, {4, 4}, 0.2, 2.0, DType::f64).set_requires_grad(true);
    Tensor xn = Tensor::uniform(rng, {4, 4}, -2.0, -0.2, DType::f64).set_requires_grad(true);
    Tensor wgt = Tensor::uniform(rng, {4, 4}, 0.5, 1.5, DType::f64);
    auto fpos = [&]() { return mean_all(mul(relu(xp), wgt)); };
    auto fneg = [&]() { return mean_all(mul(leaky_relu(xn, 0.2), wgt)); };
    CHECK(gradcheck(fpos, {xp}).max_rel_err < 1e-4);
    CHECK(gradcheck(fneg, {xn}).max_rel_err < 1e-4);
  }

  // binary ops incl. row broadcast
  {
    Tensor a = randn64(rng, {3, 5}).set_requires_grad(true);
    Tensor b = randn64(rng, {3, 5}).set_requires_grad(true);
    Tensor r = randn64(rng, {5}).set_requires_grad(true);
    Tensor wgt = Tensor::uniform(rng, {3, 5}, 0.5, 1.5, DType::f64);
    auto f = [&]() { return mean_all(mul(mul(add(a, r), sub(a, b)), wgt)); };
    auto res = gradcheck(f, {a, b, r});
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }

  // matmul + transpose + concat + slice + heads
  {
    Tensor a = randn64(rng, {4, 6}).set_requires_grad(true);
    Tensor b = randn64(rng, {3, 6}).set_requires_grad(true);
    Tensor w = randn64(rng, {6, 6}).set_requires_grad(true);
    auto f = [&]() {
      Tensor cat = concat({a, b}, 0);             // [7, 6]
      Tensor h = split_heads(matmul(cat, w), 2);  // [2, 7, 3]
      Tensor sl = slice(h, 1, 1, 5);              // [2, 5, 3]
      return mean_all(square(merge_heads(sl)));
    };
    auto res = gradcheck(f, {a, b, w});
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }
  {
    Tensor a = randn64(rng, {4, 3}).set_requires_grad(true);
    auto f = [&]() { return mean_all(square(transpose2d(a))); };
    CHECK(gradcheck(f, {a}).max_rel_err < 1e-4);
  }

  // attention
  {
    Tensor q = randn64(rng, {2, 3, 4}).set_requires_grad(true);
    Tensor k = randn64(rng, {2, 5, 4}).set_requires_grad(true);
    Tensor v = randn64(rng, {2, 5, 4}).set_requires_grad(true);
    Tensor wgt = Tensor::uniform(rng, {2, 3, 4}, 0.5, 1.5, DType::f64);
    auto f = [&]() { return mean_all(mul(attention(q, k, v), wgt)); };
    auto res = gradcheck(f, {q, k, v});
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }

  // conv family and pooling
  {
    Tensor x = randn64(rng, {2, 9}).set_requires_grad(true);
    Tensor w = randn64(rng, {3, 2, 3}).set_requires_grad(true);
    Tensor bias = randn64(rng, {3}).set_requires_grad(true);
    auto f = [&]() { return mean_all(square(add_channel_bias(conv1d(x, w, 2, 1), bias))); };
    auto res = gradcheck(f, {x, w, bias});
    INFO("conv1d: " << res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }
  {
    Tensor x = randn64(rng, {3, 5}).set_requires_grad(true);
    Tensor w = randn64(rng, {3, 2, 4}).set_requires_grad(true);
    auto f = [&]() { return mean_all(square(conv1d_transposed(x, w, 2, 1))); };
    auto res = gradcheck(f, {x, w});
    INFO("conv1d_transposed: " << res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }
  {
    Tensor x = randn64(rng, {4, 7}).set_requires_grad(true);
    Tensor w = randn64(rng, {4, 3}).set_requires_grad(true);
    auto f = [&]() { return mean_all(square(depthwise_conv1d_same(x, w))); };
    auto res = gradcheck(f, {x, w});
    INFO("depthwise: " << res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }
  {
    Tensor x = randn64(rng, {2, 6, 8}).set_requires_grad(true);
    Tensor w = randn64(rng, {3, 2, 3, 3}).set_requires_grad(true);
    auto f = [&]() { return mean_all(square(avg_pool_w(conv2d(x, w, 2, 1), 2))); };
    auto res = gradcheck(f, {x, w});
    INFO("conv2d+pool: " << res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }
  {
    // conv2d_vjp_input is itself differentiable (the R1 building block)
    Tensor go = randn64(rng, {3, 3, 4}).set_requires_grad(true);
    Tensor w = randn64(rng, {3, 2, 3, 3}).set_requires_grad(true);
    auto f = [&]() { return mean_all(square(conv2d_vjp_input(go, w, 2, 1, 6, 8))); };
    auto res = gradcheck(f, {go, w});
    INFO("conv2d_vjp_input: " << res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }
  {
    Tensor g = randn64(rng, {2, 3, 4}).set_requires_grad(true);
    auto f = [&]() { return mean_all(square(avg_unpool_w(g, 2, 9))); };
    CHECK(gradcheck(f, {g}).max_rel_err < 1e-4);
  }
  {
    Tensor tb = randn64(rng, {6, 3}).set_requires_grad(true);
    auto f = [&]() { return mean_all(square(embedding(tb, {1, 4, 1}))); };
    auto res = gradcheck(f, {tb});
    INFO("embedding: " << res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("conv1d stride-1 translation equivariance on interior samples") {
  Rng rng(31);
  const std::int64_t t = 16;
  Tensor w = Tensor::randn(rng, {2, 1, 3}, 1.0, DType::f64);
  std::vector<double> base(t);
  for (auto& v : base) v = rng.normal();
  std::vector<double> shifted(t, 0.0);
  for (std::int64_t i = 1; i < t; ++i) shifted[i] = base[i - 1];
  Tensor y0 = conv1d(Tensor::from({1, t}, base, DType::f64), w, 1, 1);
  Tensor y1 = conv1d(Tensor::from({1, t}, shifted, DType::f64), w, 1, 1);
  // interior: y1[i] == y0[i-1] away from both edges
  for (std::int64_t c = 0; c < 2; ++c) {
    for (std::int64_t i = 2; i < t - 1; ++i) {
      CHECK(y1.at({c, i}) == doctest::Approx(y0.at({c, i - 1})).epsilon(1e-12));
    }
  }
}

TEST_CASE("finiteness guard raises NumericError") {
  Tensor x = Tensor::from({2}, {-1.0, 0.5}, DType::f64);
  CHECK_THROWS_AS(log_t(x), NumericError);
  set_finite_checks(false);
  Tensor y = log_t(x);  // silently non-finite when disabled
  set_finite_checks(true);
  CHECK(std::isnan(y.data()[0]));
}

TEST_CASE("forward determinism: identical seeds give bit-identical outputs") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::randn(rng, {4, 8});
    Tensor w = Tensor::randn(rng, {8, 8});
    Tensor y = silu(matmul(layer_norm(x), w));
    return y.bits_hash();
  };
  CHECK(run(99) == run(99));
  CHECK(run(99) != run(100));
}

TEST_CASE("f32 mode values are exactly float-representable") {
  Rng rng(5);
  Tensor x = Tensor::randn(rng, {16}, 1.0, DType::f32);
  Tensor y = gelu(scale(x, 1.37));
  for (double v : y.data()) {
    CHECK(static_cast<double>(static_cast<float>(v)) == v);
  }
}

TEST_CASE("rng state round-trips through text") {
  Rng a(42);
  for (int i = 0; i < 17; ++i) a.normal();
  Rng b(0);
  b.set_state(a.state());
  for (int i = 0; i < 32; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("tensor invariants and errors") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  Tensor s = Tensor::scalar(2.5);
  CHECK(s.item() == doctest::Approx(2.5));
  CHECK_THROWS_AS(Tensor::zeros({2, 2}).item(), ShapeError);

  // untouched requires_grad tensors read back zero grads
  Tensor p = Tensor::zeros({3}).set_requires_grad(true);
  for (double g : p.grad()) CHECK(g == 0.0);
}
