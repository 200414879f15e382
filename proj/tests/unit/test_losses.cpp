#include "doctest.h"

#include "xt2c/errors.hpp"
#include "xt2c/losses.hpp"
#include "xt2c/ops.hpp"
#include "xt2c/synthdata.hpp"

#include <cmath>
#include <random>

using namespace xt2c;

TEST_CASE("alignment Huber values") {
  Graph<double> g(false);
  const Matrix<double> a = Matrix<double>::Constant(3, 4, 1.5);
  CHECK(alignment_loss(g.constant(a), g.constant(a)).value()(0, 0) == 0.0);
  const Matrix<double> half = (a.array() + 0.5).matrix();
  CHECK(alignment_loss(g.constant(a), g.constant(half)).value()(0, 0) == doctest::Approx(0.125).epsilon(1e-12));
  const Matrix<double> two = (a.array() - 2.0).matrix();
  CHECK(alignment_loss(g.constant(a), g.constant(two)).value()(0, 0) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK_THROWS_AS(alignment_loss(g.constant(a), g.constant(Matrix<double>(a.leftCols(3)))), DimensionError);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  Matrix<double> x(5, 6), y(5, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = n(rng);
    y.data()[i] = n(rng);
  }
  const double xy = alignment_loss(g.constant(x), g.constant(y)).value()(0, 0);
  CHECK(xy > 0.0);
  CHECK(xy == alignment_loss(g.constant(y), g.constant(x)).value()(0, 0));
}

TEST_CASE("alignment gradient reaches the teacher only when not detached") {
  Graph<double> g;
  auto s = g.input(Matrix<double>::Zero(2, 2));
  auto t = g.input(Matrix<double>::Ones(2, 2));
  g.backward(alignment_loss(s, t));
  CHECK(g.grad(s).isApprox(Matrix<double>::Constant(2, 2, -0.25)));
  CHECK((g.grad(t).size() == 0 || g.grad(t).isZero(0.0)));

  Graph<double> g2;
  auto s2 = g2.input(Matrix<double>::Zero(2, 2));
  auto t2 = g2.input(Matrix<double>::Ones(2, 2));
  g2.backward(alignment_loss(s2, t2, false));
  CHECK(g2.grad(t2).isApprox(Matrix<double>::Constant(2, 2, 0.25)));
}

TEST_CASE("caption cross entropy") {
  Graph<double> g(false);
  const std::vector<int> targets{4, 7, 15};
  const double uniform = caption_ce(g.constant(Matrix<double>::Zero(3, 16)), targets).value()(0, 0);
  CHECK(uniform == doctest::Approx(std::log(16.0)).epsilon(1e-12));
  CHECK(uniform == doctest::Approx(2.7726).epsilon(1e-4));

  Matrix<double> sat = Matrix<double>::Zero(1, 4);
  sat(0, 2) = 20.0;
  CHECK(caption_ce(g.constant(sat), std::vector<int>{2}).value()(0, 0) < 1e-6);

  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> logits(6, 9);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
  const std::vector<int> four{3, 5, 8, 2};
  const std::vector<int> padded{3, 5, 8, 2, tokens::kPad, tokens::kPad};
  const double plain = caption_ce(g.constant(Matrix<double>(logits.topRows(4))), four).value()(0, 0);
  CHECK(caption_ce(g.constant(logits), padded).value()(0, 0) == doctest::Approx(plain).epsilon(1e-12));

  double prev = caption_ce(g.constant(logits), padded).value()(0, 0);
  for (int step = 0; step < 5; ++step) {
    logits(0, 3) += 0.5;
    const double now = caption_ce(g.constant(logits), padded).value()(0, 0);
    CHECK(now < prev);
    prev = now;
  }

  const std::vector<int> all_pad(6, tokens::kPad);
  CHECK_THROWS_AS(caption_ce(g.constant(logits), all_pad), ConfigError);
}

TEST_CASE("mean baseline advantages") {
  const std::vector<double> equal{0.7, 0.7, 2.0, 2.0, 2.0, 2.0};
  CHECK(mean_baseline_advantages(std::span(equal).first(2), 2) == std::vector<double>{0.0, 0.0});
  CHECK(mean_baseline_advantages(std::span(equal).last(4), 4) == std::vector<double>(4, 0.0));
  const std::vector<double> r{1.0, 0.0, 3.0, 1.0};
  CHECK(mean_baseline_advantages(r, 2) == std::vector<double>{0.5, -0.5, 1.0, -1.0});
  CHECK_THROWS_AS(mean_baseline_advantages(r, 1), ConfigError);
  CHECK_THROWS_AS(mean_baseline_advantages(r, 3), DimensionError);
}

TEST_CASE("two-outcome bandit: one step favors the rewarded outcome") {
  // policy p(1) = sigmoid(theta) through logits [0, theta]; samples 1 and 0
  // with rewards 1 and 0. The surrogate gradient is -(1/k) sum_i a_i dlog p(x_i),
  // which for this pair is exactly -1/4 whatever theta is.
  for (double theta : {-2.0, 0.0, 0.7}) {
    Tensor<double> param({1, 1}, std::vector<double>{theta});
    param.set_requires_grad(true);
    Graph<double> g;
    Var<double> th = g.parameter(param);
    Var<double> row = concat_cols<double>(std::vector<Var<double>>{g.constant(Matrix<double>::Zero(1, 1)), th});
    Var<double> logits = matmul(g.constant(Matrix<double>::Ones(2, 1)), row);
    const std::vector<double> rewards{1.0, 0.0};
    const auto adv = mean_baseline_advantages(rewards, 2);
    const std::vector<int> samples{1, 0};
    const std::vector<double> weights{adv[0] / 2, adv[1] / 2};
    g.backward(weighted_nll<double>(logits, samples, weights));
    CHECK(param.grad()[0] == doctest::Approx(-0.25).epsilon(1e-12));
    const double before = 1.0 / (1.0 + std::exp(-theta));
    const double after = 1.0 / (1.0 + std::exp(-(theta - 0.5 * param.grad()[0])));
    CHECK(after > before);
  }
}

TEST_CASE("equal sampled rewards give zero loss and zero gradient") {
  GenConfig gc;
  const Vocabulary vocab = Vocabulary::for_grammar(gc);
  Rng data_rng(5);
  std::vector<SceneSample> data{generate_scene(data_rng, gc, vocab, "a"), generate_scene(data_rng, gc, vocab, "b")};
  std::vector<const SceneSample*> ptrs{&data[0], &data[1]};
  std::vector<std::vector<Sentence>> docs;
  for (const auto& s : data) {
    std::vector<Sentence> refs;
    for (const auto& r : s.references) refs.push_back(caption_sentence(r));
    docs.push_back(refs);
  }
  const CiderScorer scorer(docs);

  ModelConfig cfg;
  cfg.layers = 2;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.memory_slots = 2;
  cfg.ff_width = 32;
  cfg.vocab_size = static_cast<int>(vocab.size());
  Rng init(1);
  auto net = CaptionNetwork<double>::create(cfg, Modality::k3d, init);
  net.set_requires_grad(true);
  net.decoder.output.bias.matrix()(0, tokens::kEos) = 1e4;  // every sample is BOS EOS

  Graph<double> g;
  const auto enc = encode_scenes<double>(g, net, ptrs);
  Rng srng(3);
  RewardStats stats;
  Var<double> loss = cider_reward_loss<double>(g, net, enc, ptrs, scorer, 4, srng, &stats);
  CHECK(stats.rewards.size() == 8);
  CHECK(loss.value()(0, 0) == 0.0);
  g.backward(loss);
  bool all_zero = true;
  net.visit("", [&](const std::string&, Tensor<double>& t) {
    for (double v : t.grad()) all_zero = all_zero && v == 0.0;
  });
  CHECK(all_zero);

  Rng again(3);
  CHECK_THROWS_AS(cider_reward_loss<double>(g, net, enc, ptrs, scorer, 1, again), ConfigError);
}

TEST_CASE("total loss combination") {
  Graph<double> g;
  LossTerms<double> terms;
  terms.align = g.input(Matrix<double>::Constant(1, 1, 0.2));
  terms.ce_student = g.input(Matrix<double>::Constant(1, 1, 1.0));
  terms.cider = g.input(Matrix<double>::Constant(1, 1, 5.0));
  LossWeights w;
  w.gamma = 0.0;
  LossFlags flags;
  flags.ce_teacher = false;
  flags.cider = true;
  LossBreakdown b;
  CHECK(total_loss(g, terms, w, flags, &b).value()(0, 0) == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(b.total == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(b.align == doctest::Approx(0.2));

  terms.ce_teacher = g.input(Matrix<double>::Constant(1, 1, 0.5));
  flags.ce_teacher = true;
  flags.cider = false;
  w.beta = 2.0;
  CHECK(total_loss(g, terms, w, flags).value()(0, 0) == doctest::Approx(0.2 + 2.0 * 1.5).epsilon(1e-12));

  const LossFlags off{false, false, false, false};
  Var<double> zero = total_loss(g, terms, w, off);
  CHECK(zero.value()(0, 0) == 0.0);

  // inactive terms receive no gradient
  Graph<double> g2;
  LossTerms<double> t2;
  t2.align = g2.input(Matrix<double>::Constant(1, 1, 0.2));
  t2.ce_student = g2.input(Matrix<double>::Constant(1, 1, 1.0));
  LossFlags only_ce;
  only_ce.align = false;
  g2.backward(total_loss(g2, t2, LossWeights{}, only_ce));
  CHECK(g2.grad(t2.ce_student)(0, 0) == 1.0);
  CHECK((g2.grad(t2.align).size() == 0 || g2.grad(t2.align).isZero(0.0)));
}

TEST_CASE("default loss weights") {
  const LossWeights w;
  CHECK(w.alpha == 1.0);
  CHECK(w.beta == 1.0);
  CHECK(w.gamma == 0.1);
}
