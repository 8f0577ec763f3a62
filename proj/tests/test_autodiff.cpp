#include <doctest.h>

#include <cmath>

#include "eyedx/autodiff.hpp"

using namespace eyedx;

namespace {

Tensor<double> rand_tensor(int r, int c, Rng& rng, double scale = 1.0) {
  Tensor<double> t(r, c);
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

// loss = sum(out .* w) for fixed random weights, so every output entry
// contributes to the scalar being differentiated
Var<double> weighted_sum(Tape<double>& t, Var<double> out,
                         const Tensor<double>& w) {
  return sum_all(mul(out, t.constant(w)));
}

}  // namespace

TEST_CASE("primitive forward semantics") {
  Tape<float> t;

  SUBCASE("matmul with identity") {
    Tensor<float> eye(2, 2);
    eye.at(0, 0) = 1;
    eye.at(1, 1) = 1;
    auto x = t.leaf(Tensor<float>::from_rows(2, 3, {1, 2, 3, 4, 5, 6}));
    auto y = matmul(t.leaf(eye), x);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        CHECK(y.value().at(r, c) == x.value().at(r, c));
  }

  SUBCASE("matmul shape mismatch") {
    auto a = t.leaf(Tensor<float>(2, 3));
    auto b = t.leaf(Tensor<float>(2, 3));
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
  }

  SUBCASE("relu") {
    auto y = relu(t.leaf(Tensor<float>::column({-1, 2})));
    CHECK(y.value()[0] == 0.0f);
    CHECK(y.value()[1] == 2.0f);
  }

  SUBCASE("add rejects mismatched shapes") {
    CHECK_THROWS_AS(add(t.leaf(Tensor<float>(2, 2)), t.leaf(Tensor<float>(2, 3))),
                    ShapeError);
  }
}

TEST_CASE("dropout") {
  Rng rng(7);
  Tape<float> t;
  auto x = t.leaf(Tensor<float>::from_rows(2, 2, {1, 2, 3, 4}));

  SUBCASE("eval mode is the identity, bit for bit") {
    auto y = dropout(x, 0.1, false, rng);
    CHECK(y.id == x.id);  // literally the same node
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.value()[i] == x.value()[i]);
  }

  SUBCASE("train mode zeroes or rescales") {
    auto y = dropout(x, 0.5, true, rng);
    for (std::size_t i = 0; i < 4; ++i) {
      const float v = y.value()[i];
      CHECK((v == 0.0f || v == doctest::Approx(x.value()[i] * 2.0f)));
    }
  }

  SUBCASE("invalid rate") {
    CHECK_THROWS_AS(dropout(x, 1.0, true, rng), ConfigError);
  }
}

TEST_CASE("softmax_rows") {
  Tape<float> t;

  SUBCASE("uniform on constant rows") {
    auto y = softmax_rows(t.leaf(Tensor<float>::from_rows(1, 3, {0, 0, 0})));
    for (int c = 0; c < 3; ++c)
      CHECK(y.value().at(0, c) == doctest::Approx(1.0 / 3).epsilon(1e-6));
  }

  SUBCASE("no overflow on huge scores") {
    auto y = softmax_rows(t.leaf(Tensor<float>::from_rows(1, 2, {1000, 1000})));
    CHECK(y.value()[0] == doctest::Approx(0.5));
    CHECK(y.value()[1] == doctest::Approx(0.5));
    CHECK(y.value().all_finite());
  }

  SUBCASE("masked entries get exactly zero") {
    auto y = softmax_rows(t.leaf(Tensor<float>::from_rows(1, 2, {5, 7})),
                          Mask{1, 0});
    CHECK(y.value()[0] == 1.0f);
    CHECK(y.value()[1] == 0.0f);
  }

  SUBCASE("fully masked row") {
    CHECK_THROWS_AS(softmax_rows(t.leaf(Tensor<float>(1, 2)), Mask{0, 0}),
                    MaskError);
  }

  SUBCASE("rows sum to one on random input") {
    Rng rng(3);
    Tensor<float> s(5, 9);
    for (std::size_t i = 0; i < s.numel(); ++i)
      s[i] = static_cast<float>(10.0 * (rng.uniform() - 0.5));
    auto y = softmax_rows(t.leaf(s));
    for (int r = 0; r < 5; ++r) {
      double sum = 0;
      for (int c = 0; c < 9; ++c) {
        const float v = y.value().at(r, c);
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        sum += v;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("layer_norm_cols") {
  Tape<float> t;
  auto gain = t.leaf(Tensor<float>::column({1, 1}));
  auto bias = t.leaf(Tensor<float>::column({0, 0}));

  SUBCASE("two-point column normalizes to +-1") {
    auto y = layer_norm_cols(t.leaf(Tensor<float>::column({1, 3})), gain, bias,
                             1e-12);
    CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-5));
  }

  SUBCASE("constant column maps to about zero") {
    auto y = layer_norm_cols(t.leaf(Tensor<float>::column({5, 5})), gain, bias);
    CHECK(std::abs(y.value()[0]) < 1e-3);
    CHECK(std::abs(y.value()[1]) < 1e-3);
  }

  SUBCASE("zero gain leaves only the bias") {
    auto z = t.leaf(Tensor<float>::column({0, 0}));
    auto b = t.leaf(Tensor<float>::column({2.5f, -1.5f}));
    auto y = layer_norm_cols(t.leaf(Tensor<float>::column({1, 3})), z, b);
    CHECK(y.value()[0] == 2.5f);
    CHECK(y.value()[1] == -1.5f);
  }
}

TEST_CASE("masked_mean_pool") {
  Tape<float> t;
  auto x = t.leaf(Tensor<float>::from_rows(2, 2, {1, 3, 2, 4}));

  SUBCASE("full mean") {
    auto y = masked_mean_pool(x);
    CHECK(y.value()[0] == doctest::Approx(2.0));
    CHECK(y.value()[1] == doctest::Approx(3.0));
  }

  SUBCASE("masked to the first column") {
    auto y = masked_mean_pool(x, Mask{1, 0});
    CHECK(y.value()[0] == 1.0f);
    CHECK(y.value()[1] == 2.0f);
  }

  SUBCASE("all masked") {
    CHECK_THROWS_AS(masked_mean_pool(x, Mask{0, 0}), MaskError);
  }
}

TEST_CASE("multi_head_self_attention") {
  Rng rng(11);
  const int d = 4;

  auto make_weights = [&](Tape<float>& t, bool zero_query) {
    AttentionWeights<float> w;
    auto mk = [&](int r, int c, bool zero) {
      Tensor<float> m(r, c);
      if (!zero)
        for (std::size_t i = 0; i < m.numel(); ++i)
          m[i] = static_cast<float>(rng.uniform() - 0.5);
      return t.leaf(m);
    };
    w.wq = mk(d, d, zero_query);
    w.bq = mk(d, 1, true);
    w.wk = mk(d, d, false);
    w.bk = mk(d, 1, true);
    w.wv = mk(d, d, false);
    w.bv = mk(d, 1, false);
    w.wo = mk(d, d, false);
    w.bo = mk(d, 1, false);
    return w;
  };

  SUBCASE("single position reduces to projected value") {
    Tape<float> t;
    auto w = make_weights(t, false);
    Tensor<float> xv(d, 1);
    for (int r = 0; r < d; ++r) xv[r] = static_cast<float>(rng.uniform());
    auto x = t.leaf(xv);
    auto y = multi_head_self_attention(x, w, Mask{}, 2);
    auto expected = affine(w.wo, affine(w.wv, x, w.bv), w.bo);
    for (int r = 0; r < d; ++r)
      CHECK(y.value()[r] == doctest::Approx(expected.value()[r]).epsilon(1e-6));
  }

  SUBCASE("zero query projection gives uniform mixing") {
    Tape<float> t;
    auto w = make_weights(t, true);
    Tensor<float> xv(d, 3);
    for (std::size_t i = 0; i < xv.numel(); ++i)
      xv[i] = static_cast<float>(rng.uniform());
    auto x = t.leaf(xv);
    auto y = multi_head_self_attention(x, w, Mask{}, 2);
    auto expected = affine(w.wo, masked_mean_pool(affine(w.wv, x, w.bv)), w.bo);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < 3; ++c)
        CHECK(y.value().at(r, c) ==
              doctest::Approx(expected.value()[r]).epsilon(1e-5));
  }

  SUBCASE("head count must divide the dimension") {
    Tape<float> t;
    auto w = make_weights(t, false);
    auto x = t.leaf(Tensor<float>(d, 2));
    CHECK_THROWS_AS(multi_head_self_attention(x, w, Mask{}, 3), ConfigError);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("f(x)=x^2 at 3 has gradient 6 (fan-out accumulation)") {
    Tape<double> t;
    auto x = t.leaf(Tensor<double>::scalar(3.0));
    auto y = mul(x, x);
    t.backward(y);
    CHECK(t.grad(x.id)[0] == doctest::Approx(6.0));
  }

  SUBCASE("sigmoid'(0) = 0.25") {
    Tape<double> t;
    auto x = t.leaf(Tensor<double>::scalar(0.0));
    auto y = sigmoid(x);
    t.backward(y);
    CHECK(t.grad(x.id)[0] == doctest::Approx(0.25));
  }

  SUBCASE("parameters off the path get zero gradient") {
    Tape<double> t;
    auto x = t.leaf(Tensor<double>::scalar(2.0));
    auto unused = t.leaf(Tensor<double>::from_rows(2, 2, {1, 2, 3, 4}));
    t.backward(mul(x, x));
    const Tensor<double> g = t.grad(unused.id);
    for (std::size_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
  }

  SUBCASE("non-scalar loss is rejected") {
    Tape<double> t;
    auto x = t.leaf(Tensor<double>(2, 1));
    CHECK_THROWS_AS(t.backward(x), ShapeError);
  }

  SUBCASE("linearity of backward") {
    Rng rng(5);
    Tensor<double> xv = rand_tensor(3, 2, rng);
    const double a = 1.7, b = -0.4;

    Tape<double> t1;
    auto x1 = t1.leaf(xv);
    auto f1 = sum_all(mul(x1, x1));
    t1.backward(f1);
    Tensor<double> gf = t1.grad(x1.id);

    Tape<double> t2;
    auto x2 = t2.leaf(xv);
    auto g2 = sum_all(sigmoid(x2));
    t2.backward(g2);
    Tensor<double> gg = t2.grad(x2.id);

    Tape<double> t3;
    auto x3 = t3.leaf(xv);
    auto combined = add(scale(sum_all(mul(x3, x3)), a),
                        scale(sum_all(sigmoid(x3)), b));
    t3.backward(combined);
    const Tensor<double> gc = t3.grad(x3.id);
    for (std::size_t i = 0; i < gc.numel(); ++i)
      CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-10));
  }
}

TEST_CASE("per-primitive gradients match central differences") {
  Rng rng(101);
  const double tol = 1e-4, eps = 1e-5;

  SUBCASE("elementwise and matmul family") {
    Tensor<double> a = rand_tensor(3, 4, rng);
    Tensor<double> b = rand_tensor(3, 4, rng);
    Tensor<double> w34 = rand_tensor(3, 4, rng);
    CHECK(grad_check({&a, &b},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, mul(add(v[0], v[1]), v[1]), w34);
                     },
                     eps) < tol);

    Tensor<double> m = rand_tensor(3, 2, rng);
    Tensor<double> n = rand_tensor(2, 4, rng);
    CHECK(grad_check({&m, &n},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, matmul(v[0], v[1]), w34);
                     },
                     eps) < tol);

    Tensor<double> p = rand_tensor(5, 3, rng);
    Tensor<double> q = rand_tensor(5, 4, rng);
    CHECK(grad_check({&p, &q},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, matmul_tn(v[0], v[1], 0.5), w34);
                     },
                     eps) < tol);

    Tensor<double> r = rand_tensor(3, 5, rng);
    Tensor<double> s = rand_tensor(4, 5, rng);
    CHECK(grad_check({&r, &s},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, matmul_nt(v[0], v[1]), w34);
                     },
                     eps) < tol);

    Tensor<double> ww = rand_tensor(3, 2, rng);
    Tensor<double> xx = rand_tensor(2, 4, rng);
    Tensor<double> bb = rand_tensor(3, 1, rng);
    CHECK(grad_check({&ww, &xx, &bb},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, affine(v[0], v[1], v[2]), w34);
                     },
                     eps) < tol);
  }

  SUBCASE("activations") {
    // keep relu inputs away from the kink
    Tensor<double> x = rand_tensor(3, 4, rng);
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (std::abs(x[i]) < 0.05) x[i] = 0.1;
    Tensor<double> w = rand_tensor(3, 4, rng);
    CHECK(grad_check({&x},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, relu(v[0]), w);
                     },
                     eps) < tol);
    CHECK(grad_check({&x},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, sigmoid(v[0]), w);
                     },
                     eps) < tol);
  }

  SUBCASE("structure ops") {
    Tensor<double> table = rand_tensor(7, 3, rng);
    std::vector<int> ids{2, 5, 2, 0};
    Tensor<double> w = rand_tensor(3, 4, rng);
    CHECK(grad_check({&table},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, embedding_lookup(v[0], ids), w);
                     },
                     eps) < tol);

    Tensor<double> a = rand_tensor(3, 2, rng);
    Tensor<double> b = rand_tensor(3, 3, rng);
    Tensor<double> w35 = rand_tensor(3, 5, rng);
    CHECK(grad_check({&a, &b},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(
                           t, concat_cols<double>({v[0], v[1]}), w35);
                     },
                     eps) < tol);

    Tensor<double> c = rand_tensor(2, 4, rng);
    Tensor<double> d = rand_tensor(3, 4, rng);
    Tensor<double> w54 = rand_tensor(5, 4, rng);
    CHECK(grad_check({&c, &d},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(
                           t, concat_rows<double>({v[0], v[1]}), w54);
                     },
                     eps) < tol);

    Tensor<double> e = rand_tensor(5, 3, rng);
    Tensor<double> w23 = rand_tensor(2, 3, rng);
    CHECK(grad_check({&e},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, slice_rows(v[0], 1, 3), w23);
                     },
                     eps) < tol);

    Tensor<double> f = rand_tensor(2, 5, rng);
    Tensor<double> w52 = rand_tensor(5, 2, rng);
    CHECK(grad_check({&f},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, transpose(v[0]), w52);
                     },
                     eps) < tol);
  }

  SUBCASE("normalization and reductions") {
    Tensor<double> x = rand_tensor(4, 3, rng, 2.0);
    Tensor<double> w43 = rand_tensor(4, 3, rng);
    CHECK(grad_check({&x},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, softmax_rows(v[0]), w43);
                     },
                     eps) < tol);
    Mask mask{1, 0, 1};
    CHECK(grad_check({&x},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, softmax_rows(v[0], mask), w43);
                     },
                     eps) < tol);

    Tensor<double> g = rand_tensor(4, 1, rng);
    Tensor<double> b = rand_tensor(4, 1, rng);
    CHECK(grad_check({&x, &g, &b},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(
                           t, layer_norm_cols(v[0], v[1], v[2], 1e-5), w43);
                     },
                     eps) < tol);

    Tensor<double> w41 = rand_tensor(4, 1, rng);
    CHECK(grad_check({&x},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(t, masked_mean_pool(v[0], mask),
                                           w41);
                     },
                     eps) < tol);

    Tensor<double> vmat = rand_tensor(4, 2, rng);
    Tensor<double> hw = rand_tensor(2, 4, rng);
    Tensor<double> hb = rand_tensor(2, 1, rng);
    Tensor<double> w21 = rand_tensor(2, 1, rng);
    CHECK(grad_check({&vmat, &hw, &hb},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return weighted_sum(
                           t, per_label_affine(v[0], v[1], v[2]), w21);
                     },
                     eps) < tol);
  }

  SUBCASE("bce through sigmoid") {
    Tensor<double> z = rand_tensor(3, 1, rng, 2.0);
    std::vector<std::uint8_t> labels{1, 0, 1};
    CHECK(grad_check({&z},
                     [&](Tape<double>& t, const std::vector<Var<double>>& v) {
                       return bce_sum(sigmoid(v[0]), labels, 1e-7);
                     },
                     eps) < tol);
  }

  SUBCASE("full attention block") {
    const int d = 6, T = 4;
    Tensor<double> x = rand_tensor(d, T, rng);
    Tensor<double> wq = rand_tensor(d, d, rng, 0.5), bq = rand_tensor(d, 1, rng);
    Tensor<double> wk = rand_tensor(d, d, rng, 0.5), bk = rand_tensor(d, 1, rng);
    Tensor<double> wv = rand_tensor(d, d, rng, 0.5), bv = rand_tensor(d, 1, rng);
    Tensor<double> wo = rand_tensor(d, d, rng, 0.5), bo = rand_tensor(d, 1, rng);
    Tensor<double> wdt = rand_tensor(d, T, rng);
    auto build = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
      AttentionWeights<double> w{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
      return weighted_sum(t, multi_head_self_attention(v[0], w, Mask{}, 3),
                          wdt);
    };
    CHECK(grad_check({&x, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}, build, eps) <
          tol);
  }
}

TEST_CASE("grad_check protocol") {
  Rng rng(33);

  SUBCASE("a x2-scaled analytic gradient reports error near 0.5") {
    Tensor<double> x = rand_tensor(3, 3, rng);
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (std::abs(x[i]) < 0.1) x[i] = 0.5;
    // analytic gradient of sum(x*x), deliberately doubled
    Tape<double> t;
    auto xv = t.leaf(x);
    t.backward(sum_all(mul(xv, xv)));
    Tensor<double> analytic = t.grad(xv.id);
    double max_rel = 0;
    const double eps = 1e-6;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double planted = 2.0 * analytic[i];
      const double orig = x[i];
      auto eval = [&]() {
        Tape<double> tt;
        auto v = tt.leaf(x);
        auto loss = sum_all(mul(v, v));
        return tt.value(loss.id)[0];
      };
      x[i] = orig + eps;
      const double fp = eval();
      x[i] = orig - eps;
      const double fm = eval();
      x[i] = orig;
      const double num = (fp - fm) / (2 * eps);
      max_rel = std::max(max_rel, std::abs(planted - num) /
                                      std::max({std::abs(planted),
                                                std::abs(num), 1e-8}));
    }
    CHECK(max_rel == doctest::Approx(0.5).epsilon(0.02));
  }

  SUBCASE("eps sweep stays accurate") {
    Tensor<double> x = rand_tensor(4, 2, rng);
    Tensor<double> g = rand_tensor(4, 1, rng);
    Tensor<double> b = rand_tensor(4, 1, rng);
    Tensor<double> w = rand_tensor(4, 2, rng);
    auto build = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
      return weighted_sum(
          t, sigmoid(layer_norm_cols(v[0], v[1], v[2], 1e-5)), w);
    };
    for (double eps : {1e-4, 1e-5, 1e-6})
      CHECK(grad_check({&x, &g, &b}, build, eps) < 1e-3);
  }
}
