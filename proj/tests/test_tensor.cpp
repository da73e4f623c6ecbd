#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "sdrc/rng.hpp"
#include "sdrc/tensor.hpp"

using sdrc::Tensor;
using sdrc::TensorT;

namespace {

TensorT<double> random_tensor(std::vector<int> dims, sdrc::Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  TensorT<double> t(dims);
  for (std::int64_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul identity and annihilator") {
  Tensor i2 = Tensor::identity(2);
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor r = sdrc::matmul(i2, a);
  for (int i = 0; i < 4; ++i) CHECK(r.at(i) == a.at(i));

  Tensor z = Tensor::zeros({2, 3});
  Tensor b({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  Tensor zr = sdrc::matmul(z, b);
  REQUIRE(zr.dims() == std::vector<int>{2, 4});
  for (std::int64_t i = 0; i < zr.size(); ++i) CHECK(zr.at(i) == 0.0f);
}

TEST_CASE("matmul known product") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  Tensor r = sdrc::matmul(a, b);
  CHECK(r.at2(0, 0) == 19.0f);
  CHECK(r.at2(0, 1) == 22.0f);
  CHECK(r.at2(1, 0) == 43.0f);
  CHECK(r.at2(1, 1) == 50.0f);
}

TEST_CASE("matmul shape error") {
  Tensor a({2, 3});
  Tensor b({4, 2});
  CHECK_THROWS_AS(sdrc::matmul(a, b), sdrc::ShapeError);
}

TEST_CASE("matmul associativity on random triples") {
  sdrc::Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    int m = rng.range_int(1, 8), k = rng.range_int(1, 8);
    int p = rng.range_int(1, 8), q = rng.range_int(1, 8);
    Tensor a({m, k}), b({k, p}), c({p, q});
    for (std::int64_t i = 0; i < a.size(); ++i) a.at(i) = static_cast<float>(rng.uniform(-1, 1));
    for (std::int64_t i = 0; i < b.size(); ++i) b.at(i) = static_cast<float>(rng.uniform(-1, 1));
    for (std::int64_t i = 0; i < c.size(); ++i) c.at(i) = static_cast<float>(rng.uniform(-1, 1));
    Tensor left = sdrc::matmul(sdrc::matmul(a, b), c);
    Tensor right = sdrc::matmul(a, sdrc::matmul(b, c));
    CHECK(sdrc::max_abs_diff(left, right) < 1e-5);
  }
}

TEST_CASE("softmax uniform, saturated and [1,2]") {
  Tensor u({3}, {0, 0, 0});
  Tensor su = sdrc::softmax(u, 0);
  for (int i = 0; i < 3; ++i) CHECK(su.at(i) == Catch::Approx(1.0 / 3.0).margin(1e-7));

  Tensor hot({3}, {1000, 0, 0});
  Tensor sh = sdrc::softmax(hot, 0);
  CHECK(sh.at(0) == Catch::Approx(1.0).margin(1e-6));
  CHECK(sh.at(1) == Catch::Approx(0.0).margin(1e-6));

  Tensor xy({2}, {1, 2});
  Tensor s = sdrc::softmax(xy, 0);
  const double e = std::exp(1.0);
  CHECK(s.at(0) == Catch::Approx(1.0 / (1.0 + e)).margin(1e-6));
  CHECK(s.at(1) == Catch::Approx(e / (1.0 + e)).margin(1e-6));
}

TEST_CASE("softmax lanes sum to one for any finite input") {
  sdrc::Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    int m = rng.range_int(1, 6), n = rng.range_int(1, 6);
    Tensor x({m, n});
    for (std::int64_t i = 0; i < x.size(); ++i) x.at(i) = static_cast<float>(rng.uniform(-50, 50));
    int axis = static_cast<int>(rng.below(2));
    Tensor s = sdrc::softmax(x, axis);
    if (axis == 0) {
      for (int c = 0; c < n; ++c) {
        double acc = 0;
        for (int r = 0; r < m; ++r) acc += s.at2(r, c);
        CHECK(acc == Catch::Approx(1.0).margin(1e-6));
      }
    } else {
      for (int r = 0; r < m; ++r) {
        double acc = 0;
        for (int c = 0; c < n; ++c) acc += s.at2(r, c);
        CHECK(acc == Catch::Approx(1.0).margin(1e-6));
      }
    }
  }
}

TEST_CASE("softmax axis out of range") {
  Tensor x({2, 2});
  CHECK_THROWS_AS(sdrc::softmax(x, 2), sdrc::ShapeError);
}

TEST_CASE("backward of sum gives all ones") {
  sdrc::Tape tape;
  Tensor x({2, 3}, {0.5f, -1.f, 2.f, 0.f, 3.f, -0.25f});
  Tensor xt = tape.watch(x);
  Tensor y = sdrc::sum(xt);
  tape.backward(y);
  Tensor g = tape.grad(xt);
  for (std::int64_t i = 0; i < g.size(); ++i) CHECK(g.at(i) == 1.0f);
}

TEST_CASE("backward of x squared") {
  sdrc::Tape tape;
  Tensor x({1}, {3.f});
  Tensor xt = tape.watch(x);
  Tensor y = sdrc::sum(sdrc::mul(xt, xt));
  tape.backward(y);
  CHECK(tape.grad(xt).at(0) == Catch::Approx(6.0).margin(1e-6));
}

TEST_CASE("backward rejects non-scalar output") {
  sdrc::Tape tape;
  Tensor x({2}, {1.f, 2.f});
  Tensor xt = tape.watch(x);
  Tensor y = sdrc::mul(xt, xt);
  CHECK_THROWS_AS(tape.backward(y), sdrc::ContractError);
}

TEST_CASE("untouched parameters receive zero gradient") {
  sdrc::Tape tape;
  Tensor x({2}, {1.f, 2.f});
  Tensor unused({3}, {1.f, 1.f, 1.f});
  Tensor xt = tape.watch(x);
  Tensor ut = tape.watch(unused);
  Tensor y = sdrc::sum(xt);
  tape.backward(y);
  Tensor g = tape.grad(ut);
  REQUIRE(g.dims() == unused.dims());
  for (std::int64_t i = 0; i < g.size(); ++i) CHECK(g.at(i) == 0.0f);
}

TEST_CASE("grad_check on linear and quadratic functions") {
  using D = double;
  sdrc::Rng rng(3);
  auto f_sum = [](sdrc::TapeT<D>& t, const TensorT<D>& v) { return sdrc::sum(v); };

  // Dyadic inputs and a dyadic step keep every probe sum exact, so the
  // linear functional reports zero error exactly.
  TensorT<D> xd({3, 2});
  for (std::int64_t i = 0; i < xd.size(); ++i)
    xd.at(i) = static_cast<double>(rng.range_int(-1024, 1024)) * 0x1.0p-10;
  CHECK(sdrc::grad_check<D>(f_sum, xd, 0x1.0p-10) == 0.0);

  TensorT<D> x = random_tensor({3, 2}, rng);
  CHECK(sdrc::grad_check<D>(f_sum, x, 1e-3) < 1e-12);

  TensorT<D> x2({1}, {2.0});
  auto f_sq = [](sdrc::TapeT<D>& t, const TensorT<D>& v) { return sdrc::sum(sdrc::mul(v, v)); };
  CHECK(sdrc::grad_check<D>(f_sq, x2, 1e-3) < 1e-6);
}

TEST_CASE("grad_check on a random three-layer composition") {
  using D = double;
  sdrc::Rng rng(17);
  TensorT<D> w1 = random_tensor({4, 3}, rng);
  TensorT<D> w2 = random_tensor({5, 4}, rng);
  TensorT<D> w3 = random_tensor({1, 5}, rng);
  TensorT<D> x = random_tensor({3, 2}, rng);

  auto f = [&](sdrc::TapeT<D>& t, const TensorT<D>& v) {
    TensorT<D> h1 = sdrc::gelu(sdrc::matmul(w1, v));
    TensorT<D> h2 = sdrc::gelu(sdrc::matmul(w2, h1));
    return sdrc::sum(sdrc::matmul(w3, h2));
  };
  CHECK(sdrc::grad_check<D>(f, x, 1e-3) < 1e-4);

  // Same composition, differentiated with respect to a weight matrix.
  auto f_w = [&](sdrc::TapeT<D>& t, const TensorT<D>& w) {
    TensorT<D> h1 = sdrc::gelu(sdrc::matmul(w, x));
    TensorT<D> h2 = sdrc::gelu(sdrc::matmul(w2, h1));
    return sdrc::sum(sdrc::matmul(w3, h2));
  };
  CHECK(sdrc::grad_check<D>(f_w, w1, 1e-3) < 1e-4);
}

TEST_CASE("every differentiable primitive matches finite differences") {
  using D = double;
  sdrc::Rng rng(23);
  const double kTol = 1e-4;
  const D h = 1e-4;

  TensorT<D> w = random_tensor({3, 4}, rng, 0.5, 1.5);
  auto weighted = [&w](const TensorT<D>& t) { return sdrc::sum(sdrc::mul(t, w)); };

  TensorT<D> x = random_tensor({3, 4}, rng);
  TensorT<D> y = random_tensor({3, 4}, rng);
  TensorT<D> colv = random_tensor({3, 1}, rng, 0.5, 1.5);
  TensorT<D> rowv = random_tensor({1, 4}, rng, 0.5, 1.5);
  TensorT<D> pos = random_tensor({3, 4}, rng, 0.5, 2.0);

  SECTION("add / sub / mul / scale") {
    auto f = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::add(v, y));
    };
    CHECK(sdrc::grad_check<D>(f, x, h) < kTol);
    auto f2 = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::sub(y, v));
    };
    CHECK(sdrc::grad_check<D>(f2, x, h) < kTol);
    auto f3 = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::mul(v, y));
    };
    CHECK(sdrc::grad_check<D>(f3, x, h) < kTol);
    auto f4 = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::scale(v, D(1.7)));
    };
    CHECK(sdrc::grad_check<D>(f4, x, h) < kTol);
  }

  SECTION("broadcast family") {
    auto fc = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::add_colvec(x, v));
    };
    CHECK(sdrc::grad_check<D>(fc, colv, h) < kTol);
    auto fc2 = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::sub_colvec(v, colv));
    };
    CHECK(sdrc::grad_check<D>(fc2, x, h) < kTol);
    auto fc3 = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::mul_colvec(x, v));
    };
    CHECK(sdrc::grad_check<D>(fc3, colv, h) < kTol);
    auto fr = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::mul_rowvec(x, v));
    };
    CHECK(sdrc::grad_check<D>(fr, rowv, h) < kTol);
    auto fr2 = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::sub_rowvec(v, rowv));
    };
    CHECK(sdrc::grad_check<D>(fr2, x, h) < kTol);
    TensorT<D> s({1}, {0.8});
    auto fs = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::mul_scalar_t(x, v));
    };
    CHECK(sdrc::grad_check<D>(fs, s, h) < kTol);
    auto fs2 = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::mul_scalar_t(v, s));
    };
    CHECK(sdrc::grad_check<D>(fs2, x, h) < kTol);
  }

  SECTION("nonlinearities") {
    auto fg = [&](sdrc::TapeT<D>&, const TensorT<D>& v) { return weighted(sdrc::gelu(v)); };
    CHECK(sdrc::grad_check<D>(fg, x, h) < kTol);
    auto fsq = [&](sdrc::TapeT<D>&, const TensorT<D>& v) { return weighted(sdrc::sqrt_t(v)); };
    CHECK(sdrc::grad_check<D>(fsq, pos, h) < kTol);
    auto fre = [&](sdrc::TapeT<D>&, const TensorT<D>& v) { return weighted(sdrc::recip(v)); };
    CHECK(sdrc::grad_check<D>(fre, pos, h) < kTol);
    auto flo = [&](sdrc::TapeT<D>&, const TensorT<D>& v) { return weighted(sdrc::log_t(v)); };
    CHECK(sdrc::grad_check<D>(flo, pos, h) < kTol);
    auto fcl = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::clamp_min(v, D(-2)));
    };
    CHECK(sdrc::grad_check<D>(fcl, x, h) < kTol);
  }

  SECTION("matmul, transpose, slicing") {
    TensorT<D> b = random_tensor({4, 3}, rng);
    TensorT<D> wout = random_tensor({3, 3}, rng, 0.5, 1.5);
    auto fm = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return sdrc::sum(sdrc::mul(sdrc::matmul(v, b), wout));
    };
    CHECK(sdrc::grad_check<D>(fm, x, h) < kTol);
    auto fm2 = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return sdrc::sum(sdrc::mul(sdrc::matmul(x, v), wout));
    };
    CHECK(sdrc::grad_check<D>(fm2, b, h) < kTol);
    auto ft = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::transpose(sdrc::transpose(v)));
    };
    CHECK(sdrc::grad_check<D>(ft, x, h) < kTol);
    auto fsl = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      TensorT<D> top = sdrc::slice_rows(v, 0, 2);
      TensorT<D> bottom = sdrc::slice_rows(v, 2, 3);
      return sdrc::sum(sdrc::concat_rows<D>({sdrc::mul(top, top), bottom}));
    };
    CHECK(sdrc::grad_check<D>(fsl, x, h) < kTol);
  }

  SECTION("reductions and softmax") {
    auto fcs = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return sdrc::sum(sdrc::mul(sdrc::colsum(v), rowv));
    };
    CHECK(sdrc::grad_check<D>(fcs, x, h) < kTol);
    auto fsm = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
      return weighted(sdrc::softmax(v, 1));
    };
    CHECK(sdrc::grad_check<D>(fsm, x, h) < kTol);
    auto fme = [&](sdrc::TapeT<D>&, const TensorT<D>& v) { return sdrc::mean(v); };
    CHECK(sdrc::grad_check<D>(fme, x, h) < kTol);
  }
}

TEST_CASE("tensor construction rejects non-finite values") {
  std::vector<float> bad{1.f, std::numeric_limits<float>::quiet_NaN()};
  CHECK_THROWS_AS(Tensor({2}, std::move(bad)), sdrc::ContractError);
  std::vector<float> inf{std::numeric_limits<float>::infinity(), 0.f};
  CHECK_THROWS_AS(Tensor({2}, std::move(inf)), sdrc::ContractError);
}

TEST_CASE("tensor invariants: extent product must match data length") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.f, 2.f, 3.f}), sdrc::ShapeError);
  CHECK_THROWS_AS(Tensor({0, 2}), sdrc::ShapeError);
}

TEST_CASE("operands on different tapes are rejected") {
  sdrc::Tape t1, t2;
  Tensor x({2}, {1.f, 2.f});
  Tensor a = t1.watch(x);
  Tensor b = t2.watch(x);
  CHECK_THROWS_AS(sdrc::add(a, b), sdrc::ContractError);
}

TEST_CASE("reshape aliases the same autodiff node") {
  sdrc::Tape tape;
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor xt = tape.watch(x);
  Tensor r = sdrc::reshape(xt, {3, 2});
  CHECK(r.node() == xt.node());
  Tensor y = sdrc::sum(sdrc::mul(r, r));
  tape.backward(y);
  Tensor g = tape.grad(xt);
  for (std::int64_t i = 0; i < g.size(); ++i)
    CHECK(g.at(i) == Catch::Approx(2.0 * x.at(i)).margin(1e-5));
}

TEST_CASE("gradients accumulate across fan-out") {
  sdrc::Tape tape;
  Tensor x({1}, {2.f});
  Tensor xt = tape.watch(x);
  Tensor y = sdrc::sum(sdrc::add(sdrc::mul(xt, xt), xt));  // x^2 + x -> 2x + 1 = 5
  tape.backward(y);
  CHECK(tape.grad(xt).at(0) == Catch::Approx(5.0).margin(1e-6));
}
