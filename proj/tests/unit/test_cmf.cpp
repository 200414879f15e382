#include "doctest.h"

#include "xt2c/cmf.hpp"
#include "xt2c/errors.hpp"
#include "xt2c/synthdata.hpp"

#include <cmath>
#include <random>

using namespace xt2c;

namespace {

Matrix<double> random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

ObjectLayout layout_of(std::vector<Eigen::Index> counts) {
  ObjectLayout l;
  Eigen::Index row = 0;
  for (auto c : counts) {
    l.begin.push_back(row);
    l.count.push_back(c);
    row += c;
  }
  return l;
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.layers = 3;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.memory_slots = 2;
  cfg.ff_width = 32;
  cfg.vocab_size = 30;
  return cfg;
}

FusionConfig mode(FusionMode m, double p = 0.2) {
  FusionConfig c;
  c.mode = m;
  c.mask_prob = p;
  return c;
}

}  // namespace

TEST_CASE("masked addition follows the indicator per scene") {
  std::mt19937_64 rng(1);
  Graph<double> g(false);
  const auto layout = layout_of({3, 2});
  const Matrix<double> s = random_matrix(rng, 5, 16);
  const Matrix<double> t = random_matrix(rng, 5, 16);
  FusionParams<double> params;
  const auto cfg = mode(FusionMode::kAddMasked);
  const std::vector<int> ind{0, 1};
  const Matrix<double> out = fuse(g, g.constant(s), g.constant(t), cfg, params, 0, layout, ind, 2).value();
  CHECK(out.topRows(3) == s.topRows(3));
  CHECK(out.bottomRows(2) == (s + t).bottomRows(2));

  const std::vector<int> one{1};
  CHECK_THROWS_AS(fuse(g, g.constant(s), g.constant(t), cfg, params, 0, layout, one, 2), DimensionError);
  CHECK_THROWS_AS(fuse(g, g.constant(s), g.constant(Matrix<double>(t.topRows(4))), cfg, params, 0, layout, ind, 2),
                  DimensionError);
}

TEST_CASE("mask frequency and expected fused value") {
  Rng rng(7);
  const auto cfg = mode(FusionMode::kAddMasked, 0.2);
  const auto draws = draw_mask_indicators(cfg, 100000, rng);
  double masked = 0;
  for (int d : draws) masked += d == 0 ? 1 : 0;
  CHECK(std::abs(masked / 1e5 - 0.2) <= 0.01);

  // E[fuse] = s + (1-p) t; the sample mean of n draws has sd |t| sqrt(p(1-p)/n)
  std::mt19937_64 mrng(3);
  const Matrix<double> s = random_matrix(mrng, 1, 8);
  const Matrix<double> t = random_matrix(mrng, 1, 8);
  const auto layout = layout_of({1});
  FusionParams<double> params;
  Graph<double> g(false);
  const int n = 20000;
  Matrix<double> acc = Matrix<double>::Zero(1, 8);
  for (int i = 0; i < n; ++i) {
    const auto ind = draw_mask_indicators(cfg, 1, rng);
    acc += fuse(g, g.constant(s), g.constant(t), cfg, params, 0, layout, ind, 2).value();
  }
  acc /= n;
  const Matrix<double> expected = s + 0.8 * t;
  for (int c = 0; c < 8; ++c) {
    const double sd = std::abs(t(0, c)) * std::sqrt(0.2 * 0.8 / n);
    CHECK(std::abs(acc(0, c) - expected(0, c)) <= 3 * sd + 1e-12);
  }
}

TEST_CASE("variant modes") {
  std::mt19937_64 rng(2);
  Graph<double> g(false);
  const auto layout = layout_of({4});
  const Matrix<double> s = random_matrix(rng, 4, 16);
  const Matrix<double> t = random_matrix(rng, 4, 16);
  Rng prng(5);
  const ModelConfig model = small_model();
  const std::vector<int> ind{1};

  FusionParams<double> none;
  const auto unmasked = fuse(g, g.constant(s), g.constant(t), mode(FusionMode::kAddUnmasked), none, 0, layout, ind, 2);
  Rng zero_p(11);
  const auto p0 = mode(FusionMode::kAddMasked, 0.0);
  const auto never = draw_mask_indicators(p0, 1, zero_p);
  CHECK(unmasked.value() == fuse(g, g.constant(s), g.constant(t), p0, none, 0, layout, never, 2).value());

  CHECK(fuse(g, g.constant(s), g.constant(t), mode(FusionMode::kOff), none, 0, layout, ind, 2).value() == t);

  auto concat_cfg = mode(FusionMode::kConcat);
  auto concat = FusionParams<double>::create(concat_cfg, model, prng);
  CHECK(concat.concat.size() == 2);
  const auto projected = fuse(g, g.constant(s), g.constant(t), concat_cfg, concat, 1, layout, ind, 2);
  CHECK(projected.cols() == 16);
  concat.visit("", [](const std::string&, Tensor<double>& w) { w.matrix().setZero(); });
  CHECK(fuse(g, g.constant(s), g.constant(t), concat_cfg, concat, 1, layout, ind, 2).value().isZero(0.0));

  auto att_cfg = mode(FusionMode::kAttention);
  auto att = FusionParams<double>::create(att_cfg, model, prng);
  CHECK(att.attention.size() == 2);
  att.attention[0].o.weight.matrix().setZero();
  att.attention[0].o.bias.matrix().setZero();
  CHECK(fuse(g, g.constant(s), g.constant(t), att_cfg, att, 0, layout, ind, 2).value() == t);
}

TEST_CASE("indicators are all ones outside masked mode and all zeros at p=1") {
  Rng rng(9);
  for (FusionMode m : {FusionMode::kAddUnmasked, FusionMode::kConcat, FusionMode::kAttention, FusionMode::kOff}) {
    CHECK(draw_mask_indicators(mode(m), 50, rng) == std::vector<int>(50, 1));
  }
  const auto all = draw_mask_indicators(mode(FusionMode::kAddMasked, 1.0), 50, rng);
  CHECK(all == std::vector<int>(50, 0));

  std::mt19937_64 mrng(4);
  Graph<double> g(false);
  const auto layout = layout_of({2, 3});
  const Matrix<double> s = random_matrix(mrng, 5, 16);
  const Matrix<double> t = random_matrix(mrng, 5, 16);
  FusionParams<double> none;
  const std::vector<int> zeros{0, 0};
  CHECK(fuse(g, g.constant(s), g.constant(t), mode(FusionMode::kAddMasked, 1.0), none, 0, layout, zeros, 2).value() == s);
}

TEST_CASE("teacher fusion never changes student features") {
  GenConfig gc;
  const Vocabulary vocab = Vocabulary::for_grammar(gc);
  Rng data_rng(3);
  std::vector<SceneSample> data;
  for (int i = 0; i < 3; ++i) data.push_back(generate_scene(data_rng, gc, vocab, "s"));
  std::vector<const SceneSample*> ptrs{&data[0], &data[1], &data[2]};

  const ModelConfig model = small_model();
  Rng r1(1), r2(2);
  auto student = CaptionNetwork<double>::create(model, Modality::k3d, r1);
  auto teacher = CaptionNetwork<double>::create(model, Modality::kMulti, r2);

  Graph<double> alone(false);
  const auto reference = encode_scenes<double>(alone, student, ptrs);

  for (FusionMode m : {FusionMode::kAddMasked, FusionMode::kAddUnmasked, FusionMode::kConcat, FusionMode::kAttention,
                       FusionMode::kOff}) {
    const auto cfg = mode(m);
    Rng frng(4), mrng(5);
    auto fparams = FusionParams<double>::create(cfg, model, frng);
    Graph<double> g(true);
    const auto s_enc = encode_scenes<double>(g, student, ptrs);
    Var<double> t_tokens = assemble_tokens<double>(g, ptrs, Modality::kMulti, teacher.input);
    auto t_layers = encode<double>(g, t_tokens, teacher.encoder, s_enc.layout, model, [&](int next, Var<double> prev) {
      const auto ind = draw_mask_indicators(cfg, ptrs.size(), mrng);
      return fuse(g, s_enc.layers.at(static_cast<std::size_t>(next - 1)), prev, cfg, fparams, next - 1, s_enc.layout,
                  ind, model.heads);
    });
    CHECK(t_layers.size() == 3);
    for (std::size_t l = 0; l < 3; ++l) CHECK(s_enc.layers[l].value() == reference.layers[l].value());
  }
}
