#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "sdrc/cpc.hpp"
#include "sdrc/fusion.hpp"
#include "sdrc/rng.hpp"

using sdrc::Metric;
using sdrc::Tensor;
using sdrc::TensorT;

namespace {

sdrc::ScoreStack random_stack(int layers, int n, sdrc::Rng& rng) {
  sdrc::ScoreStack stack;
  stack.components = layers;
  stack.grid_n = n;
  stack.metric = Metric::kCosine;
  Tensor maps({layers * layers, 2, n, n});
  for (std::int64_t i = 0; i < maps.size(); ++i)
    maps.at(i) = static_cast<float>(rng.uniform(-1, 1));
  stack.maps = maps;
  return stack;
}

}  // namespace

TEST_CASE("fuse_source: identical pair maps average to themselves") {
  sdrc::Rng rng(1);
  const int layers = 2, n = 3;
  Tensor one_map({2, n, n});
  for (std::int64_t i = 0; i < one_map.size(); ++i)
    one_map.at(i) = static_cast<float>(rng.uniform(-1, 1));
  sdrc::ScoreStack stack;
  stack.components = layers;
  stack.grid_n = n;
  Tensor maps({layers * layers, 2, n, n});
  for (int p = 0; p < layers * layers; ++p)
    for (std::int64_t i = 0; i < one_map.size(); ++i)
      maps.at(p * one_map.size() + i) = one_map.at(i);
  stack.maps = maps;
  Tensor fused = sdrc::fuse_source(stack);
  CHECK(sdrc::max_abs_diff(fused, one_map) < 1e-7);
}

TEST_CASE("fuse_source: single pair passes through") {
  sdrc::Rng rng(2);
  auto stack = random_stack(1, 2, rng);
  Tensor fused = sdrc::fuse_source(stack);
  CHECK(fused.dims() == std::vector<int>{2, 2, 2});
  for (std::int64_t i = 0; i < fused.size(); ++i)
    CHECK(fused.at(i) == Catch::Approx(stack.maps.at(i)).margin(1e-7));
}

TEST_CASE("fuse_source matches an explicit sum oracle") {
  sdrc::Rng rng(3);
  auto stack = random_stack(2, 2, rng);
  Tensor fused = sdrc::fuse_source(stack);
  const int n2 = 4, pairs = 4;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < n2; ++i) {
      double acc = 0.0;
      for (int p = 0; p < pairs; ++p) acc += stack.maps.at((p * 2 + c) * n2 + i);
      CHECK(fused.at(c * n2 + i) == Catch::Approx(acc / pairs).margin(1e-7));
    }
}

TEST_CASE("fuse_afw with all-ones weights reduces to fuse_source") {
  sdrc::Rng rng(4);
  for (int layers : {1, 2, 3}) {
    auto stack = random_stack(layers, 3, rng);
    auto weights = sdrc::make_fusion_weights<float>(layers);
    Tensor a = sdrc::fuse_afw(stack, weights);
    Tensor b = sdrc::fuse_source(stack);
    CHECK(sdrc::max_abs_diff(a, b) < 1e-7);
  }
}

TEST_CASE("fuse_afw with zero weights produces a zero map") {
  sdrc::Rng rng(5);
  auto stack = random_stack(2, 2, rng);
  auto weights = sdrc::make_fusion_weights<float>(2);
  for (std::int64_t i = 0; i < weights.w.size(); ++i) weights.w.at(i) = 0.f;
  Tensor fused = sdrc::fuse_afw(stack, weights);
  CHECK(sdrc::frobenius_norm(fused) == 0.0);
}

TEST_CASE("fuse_afw with a one-hot weight isolates one pair map") {
  sdrc::Rng rng(6);
  const int layers = 2, n = 2, n2 = n * n;
  auto stack = random_stack(layers, n, rng);
  auto weights = sdrc::make_fusion_weights<float>(layers);
  for (std::int64_t i = 0; i < weights.w.size(); ++i) weights.w.at(i) = 0.f;
  const int hot_pair = 2;          // (i=1, j=0)
  weights.w.at2(hot_pair, 1) = 1.f;  // fg channel only
  Tensor fused = sdrc::fuse_afw(stack, weights);
  const int pairs = layers * layers;
  for (int i = 0; i < n2; ++i) {
    CHECK(fused.at(i) == 0.f);  // bg channel zero
    CHECK(fused.at(n2 + i) ==
          Catch::Approx(stack.maps.at((hot_pair * 2 + 1) * n2 + i) / pairs).margin(1e-7));
  }
}

TEST_CASE("fuse_afw validates weight extents") {
  sdrc::Rng rng(7);
  auto stack = random_stack(2, 2, rng);
  auto weights = sdrc::make_fusion_weights<float>(3);
  CHECK_THROWS_AS(sdrc::fuse_afw(stack, weights), sdrc::ShapeError);
}

TEST_CASE("fusion weight count is 2 L^2, 288 at L = 12") {
  auto w4 = sdrc::make_fusion_weights<float>(4);
  CHECK(w4.w.size() == 2 * 4 * 4);
  auto w12 = sdrc::make_fusion_weights<float>(12);
  CHECK(w12.w.size() == 288);
}

TEST_CASE("bilinear matrix matches hand-computed half-pixel weights") {
  Tensor r = sdrc::bilinear_matrix<float>(4, 2);
  const float expected[4][2] = {{1.f, 0.f}, {0.75f, 0.25f}, {0.25f, 0.75f}, {0.f, 1.f}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(r.at2(i, j) == Catch::Approx(expected[i][j]).margin(1e-7));

  // Corner impulse: upsampled grid is the outer product of the first
  // column with itself.
  Tensor x({2, 2}, {1, 0, 0, 0});
  Tensor up = sdrc::matmul(sdrc::matmul(r, x), sdrc::transpose(r));
  const float col[4] = {1.f, 0.75f, 0.25f, 0.f};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(up.at2(i, j) == Catch::Approx(col[i] * col[j]).margin(1e-6));
}

TEST_CASE("predict: dominant foreground channel labels every pixel") {
  Tensor fused({2, 2, 2}, {0.1f, 0.2f, 0.0f, 0.3f, 0.9f, 0.8f, 0.7f, 0.95f});
  auto pred = sdrc::predict(fused, 4, 4, 10.f);
  REQUIRE(pred.labels.size() == 16);
  for (std::uint8_t l : pred.labels) CHECK(l == 1);
  // Probabilities are a distribution at every pixel.
  for (int i = 0; i < 16; ++i)
    CHECK(pred.probs.at(i) + pred.probs.at(16 + i) == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("predict: equal channels give half probabilities and background ties") {
  Tensor fused = Tensor::full({2, 2, 2}, 0.4f);
  auto pred = sdrc::predict(fused, 4, 4, 10.f);
  for (std::uint8_t l : pred.labels) CHECK(l == 0);
  for (std::int64_t i = 0; i < pred.probs.size(); ++i)
    CHECK(pred.probs.at(i) == Catch::Approx(0.5).margin(1e-6));
}

TEST_CASE("predict labels are invariant to the temperature") {
  sdrc::Rng rng(8);
  Tensor fused({2, 4, 4});
  for (std::int64_t i = 0; i < fused.size(); ++i)
    fused.at(i) = static_cast<float>(rng.uniform(-1, 1));
  auto a = sdrc::predict(fused, 8, 8, 1.f);
  auto b = sdrc::predict(fused, 8, 8, 50.f);
  CHECK(a.labels == b.labels);
  CHECK_THROWS_AS(sdrc::predict(fused, 8, 8, 0.f), sdrc::ContractError);
}

TEST_CASE("bce_loss: uniform predictor costs ln 2") {
  Tensor probs = Tensor::full({2, 2, 2}, 0.5f);
  std::vector<std::uint8_t> target = {0, 1, 1, 0};
  CHECK(sdrc::bce_loss(probs, target).at(0) == Catch::Approx(std::log(2.0)).margin(1e-6));
}

TEST_CASE("bce_loss: perfect one-hot predictor costs at most the clamp floor") {
  Tensor probs({2, 2, 2});
  std::vector<std::uint8_t> target = {1, 0, 0, 1};
  for (int i = 0; i < 4; ++i) {
    const bool fg = target[static_cast<std::size_t>(i)] != 0;
    probs.at(i) = fg ? 0.f : 1.f;
    probs.at(4 + i) = fg ? 1.f : 0.f;
  }
  CHECK(sdrc::bce_loss(probs, target).at(0) <= -std::log(1.0 - 1e-6));
  CHECK(sdrc::bce_loss(probs, target).at(0) >= 0.f);
}

TEST_CASE("bce_loss gradient matches finite differences") {
  using D = double;
  sdrc::Rng rng(9);
  TensorT<D> logits({2, 2, 2});
  for (std::int64_t i = 0; i < logits.size(); ++i) logits.at(i) = rng.uniform(-1, 1);
  std::vector<std::uint8_t> target = {1, 0, 1, 1};
  auto f = [&target](sdrc::TapeT<D>&, const TensorT<D>& v) {
    TensorT<D> probs = sdrc::softmax(v, 0);
    return sdrc::bce_loss(probs, target);
  };
  CHECK(sdrc::grad_check<D>(f, logits, 1e-4) < 1e-4);
}

TEST_CASE("total_loss arithmetic") {
  Tensor bce({1}, {0.5f});
  Tensor orth({1}, {2.0f});
  CHECK(sdrc::total_loss(bce, orth, 0.f).at(0) == 0.5f);
  CHECK(sdrc::total_loss(bce, orth, 0.1f).at(0) == Catch::Approx(0.7).margin(1e-7));
  // Monotone non-decreasing in the orthogonality term.
  Tensor orth2({1}, {3.0f});
  CHECK(sdrc::total_loss(bce, orth2, 0.1f).at(0) > sdrc::total_loss(bce, orth, 0.1f).at(0));
  CHECK_THROWS_AS(sdrc::total_loss(bce, orth, -0.1f), sdrc::ContractError);
}

TEST_CASE("miou: agreement, disagreement and the hand-enumerated case") {
  std::vector<std::uint8_t> a = {1, 1, 0, 0};
  CHECK(sdrc::miou(a, a).mean == 1.0);

  std::vector<std::uint8_t> b = {0, 0, 1, 1};
  CHECK(sdrc::miou(a, b).mean == 0.0);

  std::vector<std::uint8_t> gt = {1, 0, 1, 0};
  auto r = sdrc::miou(a, gt);
  CHECK(r.iou_fg == Catch::Approx(1.0 / 3.0).margin(1e-12));
  CHECK(r.iou_bg == Catch::Approx(1.0 / 3.0).margin(1e-12));
  CHECK(r.mean == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("miou: class absent from both sides counts as one") {
  std::vector<std::uint8_t> none = {0, 0, 0, 0};
  auto r = sdrc::miou(none, none);
  CHECK(r.iou_fg == 1.0);
  CHECK(r.iou_bg == 1.0);
  CHECK(r.mean == 1.0);
}

TEST_CASE("fusion gradients flow through AFW weights") {
  using D = double;
  sdrc::Rng rng(10);
  sdrc::ScoreStackT<D> stack;
  stack.components = 2;
  stack.grid_n = 2;
  TensorT<D> maps({4, 2, 2, 2});
  for (std::int64_t i = 0; i < maps.size(); ++i) maps.at(i) = rng.uniform(-1, 1);
  stack.maps = maps;
  std::vector<std::uint8_t> target = {1, 0, 0, 1};
  auto f = [&](sdrc::TapeT<D>&, const TensorT<D>& v) {
    sdrc::FusionWeightsT<D> fw;
    fw.w = v;
    TensorT<D> fused = sdrc::fuse_afw(stack, fw);
    auto pred = sdrc::predict(fused, 2, 2, D(10));
    return sdrc::bce_loss(pred.probs, target);
  };
  TensorT<D> w0 = sdrc::make_fusion_weights<D>(2).w;
  CHECK(sdrc::grad_check<D>(f, w0, 1e-4) < 1e-4);
}
