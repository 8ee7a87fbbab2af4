// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <random>

#include "maskref/gradcheck.hpp"
#include "maskref/io.hpp"
#include "maskref/tensor.hpp"
#include "test_support.hpp"

using namespace maskref;
using Catch::Approx;
namespace ts = testsupport;

TEST_CASE("conv2d matches hand examples") {
  Graph g;
  SECTION("all-ones 3x3 valid conv sums the window") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(g, x, w, b, 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    REQUIRE(y.item() == Approx(9.0));
  }
  SECTION("1x1 identity kernel passes values through") {
    Tensor x = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from_values({1, 1, 1, 1}, {1.0});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(g, x, w, b, 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    for (int i = 0; i < 4; ++i) REQUIRE(y.values()[i] == Approx(x.values()[i]));
  }
  SECTION("constant input with all-ones kernel gives cin*kh*kw*c + bias") {
    const double c = 0.37, bias = -0.25;
    Tensor x = Tensor::full({2, 3, 6, 5}, c);
    Tensor w = Tensor::full({2, 3, 3, 3}, 1.0);
    Tensor b = Tensor::full({2}, bias);
    Tensor y = conv2d(g, x, w, b, 1, 0);
    for (double v : y.values()) REQUIRE(v == Approx(3 * 3 * 3 * c + bias));
  }
}

TEST_CASE("conv2d agrees with the per-pixel oracle") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 24; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 2);
    const int cin = 1 + static_cast<int>(rng() % 3);
    const int cout = 1 + static_cast<int>(rng() % 3);
    const int h = 3 + static_cast<int>(rng() % 5);
    const int w = 3 + static_cast<int>(rng() % 5);
    const int k = 1 + 2 * static_cast<int>(rng() % 2);  // 1 or 3
    const int stride = 1 + static_cast<int>(rng() % 2);
    const int pad = static_cast<int>(rng() % 2);
    const bool refl = (rng() & 1) != 0;
    Tensor x = ts::random_tensor(rng, {n, cin, h, w});
    Tensor wt = ts::random_tensor(rng, {cout, cin, k, k});
    Tensor b = ts::random_tensor(rng, {cout});
    Graph g;
    Tensor y = conv2d(g, x, wt, b, stride, pad, refl ? PadMode::reflective : PadMode::zero);
    auto want = ts::oracle_conv2d(
        {x.values().begin(), x.values().end()}, n, cin, h, w,
        {wt.values().begin(), wt.values().end()}, cout, k, k,
        {b.values().begin(), b.values().end()}, stride, pad, refl);
    REQUIRE(y.size() == want.size());
    REQUIRE(ts::max_abs_diff(y.values(), want) < 1e-12);
  }
}

TEST_CASE("reflective vs zero padding differ only near the border") {
  std::mt19937_64 rng(7);
  Tensor x = ts::random_tensor(rng, {1, 2, 5, 5});
  Tensor w = ts::random_tensor(rng, {2, 2, 3, 3});
  Tensor b = Tensor::zeros({2});
  Graph g;
  Tensor zero = conv2d(g, x, w, b, 1, 1, PadMode::zero);
  Tensor refl = conv2d(g, x, w, b, 1, 1, PadMode::reflective);
  REQUIRE(zero.shape() == refl.shape());
  double border_diff = 0.0;
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 5; ++y)
      for (int xx = 0; xx < 5; ++xx) {
        const double d = std::abs(zero.values()[(c * 5 + y) * 5 + xx] -
                                  refl.values()[(c * 5 + y) * 5 + xx]);
        const bool interior = y >= 1 && y <= 3 && xx >= 1 && xx <= 3;
        if (interior) {
          REQUIRE(d < 1e-12);
        } else {
          border_diff = std::max(border_diff, d);
        }
      }
  REQUIRE(border_diff > 1e-6);
}

TEST_CASE("conv2d rejects malformed arguments") {
  Graph g;
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  Tensor w = Tensor::zeros({1, 3, 3, 3});
  Tensor b = Tensor::zeros({1});
  REQUIRE_THROWS_AS(conv2d(g, x, w, b, 1, 1), ShapeError);  // channel mismatch
  Tensor w2 = Tensor::zeros({1, 2, 3, 3});
  REQUIRE_THROWS_AS(conv2d(g, x, w2, b, 1, 4, PadMode::reflective), ShapeError);
  Tensor w3 = Tensor::zeros({1, 2, 7, 7});
  REQUIRE_THROWS_AS(conv2d(g, x, w3, b, 1, 0), ShapeError);  // kernel too large
}

TEST_CASE("maxpool2 forward and tie-breaking backward") {
  Graph g;
  SECTION("2x2 block pools to its max") {
    Tensor x = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    REQUIRE(maxpool2(g, x).item() == Approx(4.0));
  }
  SECTION("constant map stays constant at half resolution") {
    Tensor x = Tensor::full({1, 2, 4, 4}, 0.8);
    Tensor y = maxpool2(g, x);
    REQUIRE(y.shape() == Shape{1, 2, 2, 2});
    for (double v : y.values()) REQUIRE(v == Approx(0.8));
  }
  SECTION("random map matches the window-scan oracle") {
    std::mt19937_64 rng(9);
    Tensor x = ts::random_tensor(rng, {1, 1, 4, 4});
    Tensor y = maxpool2(g, x);
    auto want = ts::oracle_maxpool2({x.values().begin(), x.values().end()}, 1, 4, 4);
    REQUIRE(ts::max_abs_diff(y.values(), want) < 1e-15);
  }
  SECTION("odd extents are rejected") {
    Tensor x = Tensor::zeros({1, 1, 3, 4});
    REQUIRE_THROWS_AS(maxpool2(g, x), ShapeError);
  }
  SECTION("gradient goes to the first occurrence on ties") {
    Tensor x = Tensor::full({1, 1, 2, 2}, 1.0, true);
    Graph g2;
    Tensor loss = sum(g2, maxpool2(g2, x));
    g2.backward(loss);
    REQUIRE(x.grad()[0] == Approx(1.0));
    REQUIRE(x.grad()[1] == Approx(0.0));
    REQUIRE(x.grad()[2] == Approx(0.0));
    REQUIRE(x.grad()[3] == Approx(0.0));
  }
}

TEST_CASE("bilinear_up2 semantics") {
  Graph g;
  SECTION("constant input upsamples to the same constant") {
    Tensor x = Tensor::full({1, 3, 2, 2}, 0.4);
    Tensor y = bilinear_up2(g, x);
    REQUIRE(y.shape() == Shape{1, 3, 4, 4});
    for (double v : y.values()) REQUIRE(v == Approx(0.4));
  }
  SECTION("[1,3] maps to [1, 1.5, 2.5, 3]") {
    Tensor x = Tensor::from_values({1, 1, 1, 2}, {1.0, 3.0});
    Tensor y = bilinear_up2(g, x);
    REQUIRE(y.shape() == Shape{1, 1, 2, 4});
    // both output rows sample the single source row
    for (int row = 0; row < 2; ++row) {
      REQUIRE(y.values()[row * 4 + 0] == Approx(1.0));
      REQUIRE(y.values()[row * 4 + 1] == Approx(1.5));
      REQUIRE(y.values()[row * 4 + 2] == Approx(2.5));
      REQUIRE(y.values()[row * 4 + 3] == Approx(3.0));
    }
  }
  SECTION("2x2 input matches the scalar interpolation oracle") {
    std::mt19937_64 rng(11);
    Tensor x = ts::random_tensor(rng, {1, 1, 2, 2});
    Tensor y = bilinear_up2(g, x);
    auto want = ts::oracle_bilinear_up2({x.values().begin(), x.values().end()}, 2, 2);
    REQUIRE(ts::max_abs_diff(y.values(), want) < 1e-15);
  }
  SECTION("upsampling is linear to 1e-12") {
    std::mt19937_64 rng(13);
    const double alpha = 0.7, beta = -1.3;
    Tensor x = ts::random_tensor(rng, {1, 2, 3, 5});
    Tensor y = ts::random_tensor(rng, {1, 2, 3, 5});
    Tensor mix = Tensor::zeros({1, 2, 3, 5});
    for (std::size_t i = 0; i < mix.size(); ++i)
      mix.values_mut()[i] = alpha * x.values()[i] + beta * y.values()[i];
    Tensor up_mix = bilinear_up2(g, mix);
    Tensor up_x = bilinear_up2(g, x);
    Tensor up_y = bilinear_up2(g, y);
    for (std::size_t i = 0; i < up_mix.size(); ++i)
      REQUIRE(std::abs(up_mix.values()[i] -
                       (alpha * up_x.values()[i] + beta * up_y.values()[i])) < 1e-12);
  }
}

TEST_CASE("concat_channels ordering, empty operand, and backward split") {
  Graph g;
  std::mt19937_64 rng(17);
  Tensor a = ts::random_tensor(rng, {1, 2, 3, 3});
  Tensor b = ts::random_tensor(rng, {1, 3, 3, 3});
  Tensor y = concat_channels(g, a, b);
  REQUIRE(y.shape() == Shape{1, 5, 3, 3});
  REQUIRE(ts::max_abs_diff(y.values().subspan(0, a.size()), a.values()) == 0.0);
  REQUIRE(ts::max_abs_diff(y.values().subspan(a.size()), b.values()) == 0.0);

  Tensor empty = Tensor::zeros({1, 0, 3, 3});
  Tensor same = concat_channels(g, a, empty);
  REQUIRE(same.shape() == a.shape());
  REQUIRE(ts::max_abs_diff(same.values(), a.values()) == 0.0);

  Tensor mism = Tensor::zeros({1, 1, 4, 3});
  REQUIRE_THROWS_AS(concat_channels(g, a, mism), ShapeError);

  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Graph g2;
  g2.backward(sum(g2, concat_channels(g2, a, b)));
  for (double v : a.grad()) REQUIRE(v == Approx(1.0));
  for (double v : b.grad()) REQUIRE(v == Approx(1.0));
}

TEST_CASE("elementwise ops and linear hand examples") {
  Graph g;
  Tensor x = Tensor::from_values({3}, {-2.0, 0.0, 3.0});
  Tensor r = relu(g, x);
  REQUIRE(r.values()[0] == 0.0);
  REQUIRE(r.values()[1] == 0.0);
  REQUIRE(r.values()[2] == 3.0);
  REQUIRE(sigmoid(g, Tensor::zeros({1})).item() == Approx(0.5));

  Tensor id_w = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor zero_b = Tensor::zeros({2});
  Tensor v = Tensor::from_values({1, 2}, {0.25, -0.5});
  Tensor out = linear(g, v, id_w, zero_b);
  REQUIRE(out.values()[0] == Approx(0.25));
  REQUIRE(out.values()[1] == Approx(-0.5));

  REQUIRE_THROWS_AS(add(g, Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("bce_loss values and input validation") {
  Graph g;
  SECTION("uniform 0.5 prediction costs ln 2") {
    Tensor p = Tensor::full({4}, 0.5);
    Tensor t = Tensor::from_values({4}, {1, 0, 1, 0});
    REQUIRE(bce_loss(g, p, t).item() == Approx(std::log(2.0)).epsilon(1e-12));
  }
  SECTION("perfect prediction is (almost) free") {
    Tensor t = Tensor::from_values({4}, {1, 0, 1, 0});
    REQUIRE(bce_loss(g, t, t).item() == Approx(0.0).margin(1e-5));
  }
  SECTION("hand-evaluated two-element case") {
    Tensor p = Tensor::from_values({2}, {0.9, 0.1});
    Tensor t = Tensor::from_values({2}, {1, 0});
    REQUIRE(bce_loss(g, p, t).item() ==
            Approx(-(std::log(0.9) + std::log(0.9)) / 2.0).epsilon(1e-12));
  }
  SECTION("raw logits are rejected") {
    Tensor p = Tensor::from_values({1}, {1.7});
    Tensor t = Tensor::from_values({1}, {1.0});
    REQUIRE_THROWS_AS(bce_loss(g, p, t), NumericError);
  }
  SECTION("targets must be hard 0/1") {
    Tensor p = Tensor::full({1}, 0.5);
    Tensor t = Tensor::from_values({1}, {0.4});
    REQUIRE_THROWS_AS(bce_loss(g, p, t), ShapeError);
  }
}

TEST_CASE("backward basics") {
  SECTION("sum gives unit gradients") {
    Tensor x = Tensor::full({2, 3}, 0.5, true);
    Graph g;
    g.backward(sum(g, x));
    for (double v : x.grad()) REQUIRE(v == Approx(1.0));
  }
  SECTION("sum of squares doubles the input") {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
    Graph g;
    g.backward(sum(g, mul(g, x, x)));
    REQUIRE(x.grad()[0] == Approx(2.0));
    REQUIRE(x.grad()[1] == Approx(4.0));
  }
  SECTION("fan-out accumulates additively") {
    Tensor x = Tensor::from_values({2}, {0.3, -0.7}, true);
    Graph g;
    g.backward(sum(g, add(g, x, x)));
    for (double v : x.grad()) REQUIRE(v == Approx(2.0));
  }
  SECTION("non-scalar loss is rejected") {
    Tensor x = Tensor::zeros({2}, true);
    Graph g;
    Tensor y = relu(g, x);
    REQUIRE_THROWS_AS(g.backward(y), ShapeError);
  }
  SECTION("two identical runs produce bit-identical gradients") {
    std::mt19937_64 rng(23);
    Tensor x = ts::random_tensor(rng, {1, 2, 6, 6});
    Tensor w = ts::random_tensor(rng, {3, 2, 3, 3});
    Tensor b = ts::random_tensor(rng, {3});
    auto run = [&](std::vector<double>& gx, std::vector<double>& gw) {
      Tensor xi = Tensor::from_values(x.shape(), {x.values().begin(), x.values().end()}, true);
      Tensor wi = Tensor::from_values(w.shape(), {w.values().begin(), w.values().end()}, true);
      Graph g;
      Tensor y = sigmoid(g, conv2d(g, xi, wi, b, 1, 1, PadMode::reflective));
      g.backward(mean(g, y));
      gx.assign(xi.grad().begin(), xi.grad().end());
      gw.assign(wi.grad().begin(), wi.grad().end());
    };
    std::vector<double> gx1, gw1, gx2, gw2;
    run(gx1, gw1);
    run(gx2, gw2);
    REQUIRE(std::memcmp(gx1.data(), gx2.data(), gx1.size() * sizeof(double)) == 0);
    REQUIRE(std::memcmp(gw1.data(), gw2.data(), gw1.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("non-finite forward values are caught") {
  Graph g;
  Tensor x = Tensor::from_values({2}, {1.0, std::numeric_limits<double>::infinity()});
  REQUIRE_THROWS_AS(relu(g, x), NumericError);
}

TEST_CASE("finite differences validate every op", "[gradcheck]") {
  std::mt19937_64 rng(29);
  const double tol = 1e-4;
  auto check = [&](const std::function<Tensor(Graph&, const Tensor&)>& f, Tensor x) {
    REQUIRE(grad_check(f, std::move(x), 1e-5) <= tol);
  };

  for (int trial = 0; trial < 20; ++trial) {
    const int cin = 1 + static_cast<int>(rng() % 2);
    const int h = 4 + 2 * static_cast<int>(rng() % 2);
    const int w = 4 + 2 * static_cast<int>(rng() % 2);
    const bool refl = (rng() & 1) != 0;
    const PadMode pm = refl ? PadMode::reflective : PadMode::zero;

    // conv2d wrt input, weight, and bias
    {
      Tensor wt = ts::random_tensor(rng, {2, cin, 3, 3});
      Tensor b = ts::random_tensor(rng, {2});
      Tensor probe = ts::random_tensor(rng, {1, 2, h, w});
      check([&, wt, b, probe, pm](Graph& g, const Tensor& x) {
        Tensor y = conv2d(g, x, wt, b, 1, 1, pm);
        return sum(g, mul(g, y, probe));
      }, ts::random_tensor(rng, {1, cin, h, w}));

      Tensor x0 = ts::random_tensor(rng, {1, cin, h, w});
      check([&, x0, b, probe, pm](Graph& g, const Tensor& wv) {
        Tensor y = conv2d(g, x0, wv, b, 1, 1, pm);
        return sum(g, mul(g, y, probe));
      }, ts::random_tensor(rng, {2, cin, 3, 3}));

      check([&, x0, wt, probe, pm](Graph& g, const Tensor& bv) {
        Tensor y = conv2d(g, x0, wt, bv, 1, 1, pm);
        return sum(g, mul(g, y, probe));
      }, ts::random_tensor(rng, {2}));
    }

    // strided conv
    {
      Tensor wt = ts::random_tensor(rng, {1, cin, 3, 3});
      Tensor b = ts::random_tensor(rng, {1});
      check([&, wt, b](Graph& g, const Tensor& x) {
        return sum(g, conv2d(g, x, wt, b, 2, 1, PadMode::zero));
      }, ts::random_tensor(rng, {1, cin, h, w}));
    }

    // maxpool2: spread values far enough apart that h never flips the argmax
    {
      Tensor x = Tensor::zeros({1, 1, h, w});
      std::vector<int> perm(x.size());
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
      for (std::size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[rng() % i]);
      for (std::size_t i = 0; i < x.size(); ++i) x.values_mut()[i] = 0.01 * perm[i];
      Tensor probe = ts::random_tensor(rng, {1, 1, h / 2, w / 2});
      check([&, probe](Graph& g, const Tensor& xv) {
        return sum(g, mul(g, maxpool2(g, xv), probe));
      }, x);
    }

    // bilinear_up2
    {
      Tensor probe = ts::random_tensor(rng, {1, 1, 2 * h, 2 * w});
      check([&, probe](Graph& g, const Tensor& x) {
        return sum(g, mul(g, bilinear_up2(g, x), probe));
      }, ts::random_tensor(rng, {1, 1, h, w}));
    }

    // concat + relu + scale + add chain (relu inputs bounded away from 0)
    {
      Tensor other = ts::random_tensor_off_zero(rng, {1, 2, h, w});
      Tensor probe = ts::random_tensor(rng, {1, 3, h, w});
      check([&, other, probe](Graph& g, const Tensor& x) {
        Tensor y = relu(g, concat_channels(g, x, other));
        return sum(g, mul(g, scale(g, y, 1.7), probe));
      }, ts::random_tensor_off_zero(rng, {1, 1, h, w}));
    }

    // sigmoid -> bce against random hard targets
    {
      Tensor target = Tensor::zeros({6});
      for (auto& v : target.values_mut()) v = (rng() & 1) ? 1.0 : 0.0;
      check([&, target](Graph& g, const Tensor& x) {
        return bce_loss(g, sigmoid(g, x), target);
      }, ts::random_tensor(rng, {6}, -2.0, 2.0));
    }

    // linear wrt input and weight
    {
      Tensor wt = ts::random_tensor(rng, {3, 5});
      Tensor b = ts::random_tensor(rng, {3});
      Tensor probe = ts::random_tensor(rng, {2, 3});
      check([&, wt, b, probe](Graph& g, const Tensor& x) {
        return sum(g, mul(g, linear(g, x, wt, b), probe));
      }, ts::random_tensor(rng, {2, 5}));
      Tensor x0 = ts::random_tensor(rng, {2, 5});
      check([&, x0, b, probe](Graph& g, const Tensor& wv) {
        return sum(g, mul(g, linear(g, x0, wv, b), probe));
      }, ts::random_tensor(rng, {3, 5}));
    }

    // select_rows + reshape + mean composite
    {
      Tensor probe = ts::random_tensor(rng, {2, 4});
      check([&, probe](Graph& g, const Tensor& x) {
        Tensor y = select_rows(g, x, {2, 0});
        return mean(g, mul(g, reshape(g, y, {2, 4}), probe));
      }, ts::random_tensor(rng, {3, 2, 2}));
    }
  }

  SECTION("composite bce(sigmoid(conv2d)) on a 4x4 input") {
    std::mt19937_64 r2(31);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor wt = ts::random_tensor(r2, {1, 1, 3, 3});
      Tensor b = ts::random_tensor(r2, {1});
      Tensor target = Tensor::zeros({1, 1, 4, 4});
      for (auto& v : target.values_mut()) v = (r2() & 1) ? 1.0 : 0.0;
      const double err = grad_check(
          [&](Graph& g, const Tensor& x) {
            return bce_loss(g, sigmoid(g, conv2d(g, x, wt, b, 1, 1, PadMode::reflective)),
                            target);
          },
          ts::random_tensor(r2, {1, 1, 4, 4}), 1e-5);
      REQUIRE(err <= 1e-4);
    }
  }
}

TEST_CASE("detach cuts the gradient path") {
  Tensor x = Tensor::from_values({3}, {0.4, -0.2, 0.9}, true);
  Graph g;
  Tensor d = detach(g, x);
  REQUIRE_FALSE(d.requires_grad());
  Tensor y = sum(g, mul(g, d, d));
  g.backward(y);
  REQUIRE_FALSE(x.grad_allocated());  // nothing ever flowed back into x
}

TEST_CASE("graph op accounting") {
  Tensor x = Tensor::full({1, 1, 4, 4}, 1.0, true);
  Graph g;
  Tensor y = relu(g, x);
  Tensor z = maxpool2(g, y);
  (void)z;
  REQUIRE(g.num_ops() == 2);
  REQUIRE(g.count_ops("relu") == 1);
  REQUIRE(g.count_ops("maxpool2") == 1);
  g.reset();
  REQUIRE(g.num_ops() == 0);
}

TEST_CASE("tensor file round trip is exact") {
  namespace fs = std::filesystem;
  std::mt19937_64 rng(37);
  const fs::path dir = fs::temp_directory_path() / "maskref_tensor_io_test";
  fs::create_directories(dir);
  for (int trial = 0; trial < 8; ++trial) {
    Shape shape{1 + static_cast<int>(rng() % 3), 1 + static_cast<int>(rng() % 4),
                1 + static_cast<int>(rng() % 5)};
    Tensor t = ts::random_tensor(rng, shape, -10.0, 10.0);
    const fs::path p = dir / ("t" + std::to_string(trial) + ".tensor");
    write_tensor_file(p, "probe", t.shape(), t.values());
    NamedTensor back = read_tensor_file(p);
    REQUIRE(back.name == "probe");
    REQUIRE(back.shape == shape);
    REQUIRE(back.values.size() == t.size());
    REQUIRE(std::memcmp(back.values.data(), t.data(), t.size() * sizeof(double)) == 0);
  }
  fs::remove_all(dir);
}
