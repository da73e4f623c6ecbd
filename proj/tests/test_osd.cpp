#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "sdrc/osd.hpp"
#include "sdrc/rng.hpp"

using sdrc::Tensor;
using sdrc::TensorT;

namespace {

std::vector<Tensor> random_components(int layers, int d, int n2, sdrc::Rng& rng) {
  std::vector<Tensor> out;
  for (int l = 0; l < layers; ++l) {
    Tensor c({d, n2});
    for (std::int64_t i = 0; i < c.size(); ++i) c.at(i) = static_cast<float>(rng.uniform(-1, 1));
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

TEST_CASE("concat_components: single component is the identity") {
  sdrc::Rng rng(1);
  auto comps = random_components(1, 3, 4, rng);
  Tensor cat = sdrc::concat_components(comps);
  CHECK(sdrc::max_abs_diff(cat, comps[0]) == 0.0);
}

TEST_CASE("split after concat is a round trip") {
  sdrc::Rng rng(2);
  auto comps = random_components(3, 4, 9, rng);
  auto back = sdrc::split_components(sdrc::concat_components(comps), 4);
  REQUIRE(back.size() == comps.size());
  for (std::size_t i = 0; i < comps.size(); ++i)
    CHECK(sdrc::max_abs_diff(back[i], comps[i]) == 0.0);
}

TEST_CASE("concat channel ordering is layer-major") {
  Tensor a({2, 1}, {10.f, 11.f});
  Tensor b({2, 1}, {20.f, 21.f});
  Tensor cat = sdrc::concat_components<float>({a, b});
  CHECK(cat.at(0) == 10.f);
  CHECK(cat.at(1) == 11.f);
  CHECK(cat.at(2) == 20.f);
  CHECK(cat.at(3) == 21.f);
}

TEST_CASE("concat rejects mismatched extents; split rejects indivisible channels") {
  Tensor a({2, 4});
  Tensor b({3, 4});
  CHECK_THROWS_AS(sdrc::concat_components<float>({a, b}), sdrc::ShapeError);
  Tensor f({5, 4});
  CHECK_THROWS_AS(sdrc::split_components(f, 2), sdrc::ShapeError);
}

TEST_CASE("osd_forward: zero weights annihilate the activations") {
  sdrc::Rng rng(3);
  sdrc::OsdParamsT<float> p = sdrc::init_osd_params<float>(2, 3, 2, rng);
  for (Tensor* t : {&p.w_in, &p.w_orth, &p.w_out})
    for (std::int64_t i = 0; i < t->size(); ++i) t->at(i) = 0.f;
  Tensor f_con({6, 4});
  for (std::int64_t i = 0; i < f_con.size(); ++i)
    f_con.at(i) = static_cast<float>(rng.uniform(-1, 1));
  auto act = sdrc::osd_forward(f_con, p);
  CHECK(sdrc::frobenius_norm(act.f_orth) == 0.0);
  CHECK(sdrc::frobenius_norm(act.f_up) == 0.0);
}

TEST_CASE("osd_forward: identity pipeline at full rank reproduces the input") {
  const int ld = 4;
  sdrc::OsdParamsT<float> p;
  p.rank = ld;
  p.w_in = Tensor::identity(ld);
  p.w_orth = Tensor::identity(ld);
  p.w_out = Tensor::identity(ld);
  sdrc::Rng rng(4);
  Tensor f_con({ld, 4});
  for (std::int64_t i = 0; i < f_con.size(); ++i)
    f_con.at(i) = static_cast<float>(rng.uniform(-1, 1));
  auto act = sdrc::osd_forward(f_con, p);
  CHECK(sdrc::max_abs_diff(act.f_up, f_con) == 0.0);
}

TEST_CASE("osd_forward matches a per-position matrix-multiply oracle") {
  sdrc::Rng rng(5);
  const int ld = 4, r = 2, n2 = 4;
  auto p = sdrc::init_osd_params<float>(2, 2, r, rng);
  // Make the bottleneck non-trivial.
  for (std::int64_t i = 0; i < p.w_orth.size(); ++i)
    p.w_orth.at(i) = static_cast<float>(rng.uniform(-1, 1));
  Tensor f_con({ld, n2});
  for (std::int64_t i = 0; i < f_con.size(); ++i)
    f_con.at(i) = static_cast<float>(rng.uniform(-1, 1));
  auto act = sdrc::osd_forward(f_con, p);

  for (int pos = 0; pos < n2; ++pos) {
    // f_down = w_in^T x, f_orth = w_orth f_down, f_up = w_out^T f_orth
    std::vector<double> down(r, 0.0), orth(r, 0.0), up(ld, 0.0);
    for (int j = 0; j < r; ++j)
      for (int i = 0; i < ld; ++i)
        down[static_cast<std::size_t>(j)] +=
            static_cast<double>(p.w_in.at2(i, j)) * f_con.at2(i, pos);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j)
        orth[static_cast<std::size_t>(i)] +=
            static_cast<double>(p.w_orth.at2(i, j)) * down[static_cast<std::size_t>(j)];
    for (int j = 0; j < ld; ++j)
      for (int i = 0; i < r; ++i)
        up[static_cast<std::size_t>(j)] +=
            static_cast<double>(p.w_out.at2(i, j)) * orth[static_cast<std::size_t>(i)];
    for (int i = 0; i < r; ++i)
      CHECK(act.f_orth.at2(i, pos) == Catch::Approx(orth[static_cast<std::size_t>(i)]).margin(1e-6));
    for (int j = 0; j < ld; ++j)
      CHECK(act.f_up.at2(j, pos) == Catch::Approx(up[static_cast<std::size_t>(j)]).margin(1e-6));
  }
}

TEST_CASE("orth_loss is zero exactly when rows are orthonormal") {
  // Orthonormal rows: [I_2 | 0].
  Tensor m({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  CHECK(sdrc::orth_loss(m).at(0) == 0.0f);

  // Scaled rows are orthogonal but not orthonormal.
  Tensor m2({2, 4}, {2, 0, 0, 0, 0, 1, 0, 0});
  CHECK(sdrc::orth_loss(m2).at(0) > 0.0f);

  // Orthonormal but rotated: rows (cos, sin), (-sin, cos).
  const float c = 0.6f, s = 0.8f;
  Tensor m3({2, 2}, {c, s, -s, c});
  CHECK(sdrc::orth_loss(m3).at(0) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("orth_loss of the all-ones 2x2 activations is exactly ten") {
  Tensor m = Tensor::full({2, 2}, 1.f);
  CHECK(sdrc::orth_loss(m).at(0) == 10.0f);
}

TEST_CASE("orth_loss is non-negative on random activations") {
  sdrc::Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor m({rng.range_int(1, 4), rng.range_int(1, 6)});
    for (std::int64_t i = 0; i < m.size(); ++i) m.at(i) = static_cast<float>(rng.uniform(-2, 2));
    CHECK(sdrc::orth_loss(m).at(0) >= 0.0f);
  }
}

TEST_CASE("orth_loss gradient matches finite differences") {
  using D = double;
  sdrc::Rng rng(7);
  TensorT<D> m({3, 5});
  for (std::int64_t i = 0; i < m.size(); ++i) m.at(i) = rng.uniform(-1, 1);
  auto f = [](sdrc::TapeT<D>&, const TensorT<D>& v) { return sdrc::orth_loss(v); };
  CHECK(sdrc::grad_check<D>(f, m, 1e-4) < 1e-4);
}

TEST_CASE("osd gradients flow through the full bottleneck") {
  using D = double;
  sdrc::Rng rng(8);
  auto p = sdrc::init_osd_params<D>(2, 3, 2, rng);
  TensorT<D> f_con({6, 4});
  for (std::int64_t i = 0; i < f_con.size(); ++i) f_con.at(i) = rng.uniform(-1, 1);

  auto loss_for = [&](sdrc::TapeT<D>& tape, const sdrc::OsdParamsT<D>& params) {
    auto act = sdrc::osd_forward(f_con, params);
    return sdrc::add(sdrc::orth_loss(act.f_orth), sdrc::sum(sdrc::mul(act.f_up, act.f_up)));
  };

  auto f_orthw = [&](sdrc::TapeT<D>& tape, const TensorT<D>& v) {
    sdrc::OsdParamsT<D> q = p;
    q.w_orth = v;
    return loss_for(tape, q);
  };
  CHECK(sdrc::grad_check<D>(f_orthw, p.w_orth, 1e-4) < 1e-4);

  auto f_in = [&](sdrc::TapeT<D>& tape, const TensorT<D>& v) {
    sdrc::OsdParamsT<D> q = p;
    q.w_in = v;
    return loss_for(tape, q);
  };
  CHECK(sdrc::grad_check<D>(f_in, p.w_in, 1e-4) < 1e-4);
}
