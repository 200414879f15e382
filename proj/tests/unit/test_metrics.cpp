#include "doctest.h"

#include "xt2c/errors.hpp"
#include "xt2c/metrics.hpp"
#include "naive_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

using namespace xt2c;
using namespace xt2c::oracle;

TEST_CASE("tokenize lowercases and splits on whitespace") {
  CHECK(tokenize("  A red\tChair ") == Sentence{"a", "red", "chair"});
  CHECK(tokenize("").empty());
}

TEST_CASE("cider: zero overlap gives zero") {
  Corpus c = {entry("x y z", {"a b c"}), entry("a b", {"a b"})};
  CHECK(cider_d_scores(c)[0] == 0.0);
}

TEST_CASE("cider: two-entry toy corpus, hand computed") {
  // idf = log 2 for every n-gram; vectors coincide for n = 1, 2 and are
  // empty for n = 3, 4, so each entry scores (1 + 1 + 0 + 0) / 4 * 10.
  Corpus c = {entry("a b", {"a b"}), entry("c d", {"c d"})};
  const auto s = cider_d_scores(c);
  CHECK(s[0] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(s[1] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(s[0] == s[1]);
}

TEST_CASE("cider matches the brute-force oracle on 100 random tiny corpora") {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Corpus c = random_corpus(rng);
    const auto s = cider_d_scores(c);
    for (std::size_t i = 0; i < c.size(); ++i) worst = std::max(worst, std::abs(s[i] - naive_cider(c, i)));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("cider: doubling sigma never lowers an entry score") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Corpus c = random_corpus(rng);
    const auto a = cider_d_scores(c, 6.0);
    const auto b = cider_d_scores(c, 12.0);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(b[i] >= a[i] - 1e-12);
  }
}

TEST_CASE("bleu4 closed forms") {
  Corpus same = {entry("a b c d e", {"a b c d e"}), entry("f g h i", {"f g h i"})};
  CHECK(bleu4(same) == doctest::Approx(1.0).epsilon(1e-12));
  Corpus brevity = {entry("a b c d", {"a b c d e f g h"})};
  CHECK(bleu4(brevity) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  Corpus no4 = {entry("a b c d", {"a b c x d"})};
  CHECK(bleu4(no4) == 0.0);
}

TEST_CASE("bleu4 matches the brute-force oracle on 100 random tiny corpora") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const Corpus c = random_corpus(rng);
    CHECK(std::abs(bleu4(c) - naive_bleu(c)) <= 1e-12);
  }
}

TEST_CASE("rouge-l hand LCS example") {
  Corpus c = {entry("a b c d", {"a c e"})};
  const double p = 0.5, r = 2.0 / 3.0, b2 = 1.44;
  const double expected = (1 + b2) * p * r / (r + b2 * p);
  CHECK(rouge_l(c) == expected);
  CHECK(expected == doctest::Approx(0.586538).epsilon(1e-6));
  CHECK(rouge_l(Corpus{entry("a b", {"a b"})}) == 1.0);
  CHECK(rouge_l(Corpus{entry("a b", {"c d"})}) == 0.0);
}

TEST_CASE("rouge-l matches the brute-force oracle on 100 random tiny corpora") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const Corpus c = random_corpus(rng);
    const auto s = rouge_l_scores(c);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(s[i] - naive_rouge(c[i])) <= 1e-12);
  }
}

TEST_CASE("metrics are invariant to entry order") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    Corpus c = random_corpus(rng);
    Corpus r(c.rbegin(), c.rend());
    CHECK(cider_d(c) == doctest::Approx(cider_d(r)).epsilon(1e-12));
    CHECK(bleu4(c) == doctest::Approx(bleu4(r)).epsilon(1e-12));
    CHECK(rouge_l(c) == doctest::Approx(rouge_l(r)).epsilon(1e-12));
  }
}

TEST_CASE("iou_3d analytic cases") {
  const Box3D a = box(0, 0, 0, 1, 1, 1);
  CHECK(iou_3d(a, a) == 1.0);
  CHECK(iou_3d(a, box(5, 0, 0, 1, 1, 1)) == 0.0);
  CHECK(iou_3d(a, box(0.5, 0, 0, 1, 1, 1)) == 1.0 / 3.0);
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (int i = 0; i < 50; ++i) {
    const Box3D p = box(u(rng), u(rng), u(rng), u(rng), u(rng), u(rng));
    const Box3D q = box(u(rng), u(rng), u(rng), u(rng), u(rng), u(rng));
    CHECK(iou_3d(p, q) == iou_3d(q, p));
  }
}

TEST_CASE("m@kIoU substitution example and properties") {
  const std::vector<double> m = {1, 1, 1, 1};
  const std::vector<double> ious = {0.6, 0.4, 0.6, 0.1};
  CHECK(m_at_k_iou(m, ious, 0.5) == 0.5);
  const std::vector<double> vals = {0.3, 0.7, 0.2, 0.9};
  CHECK(m_at_k_iou(vals, std::vector<double>{0.9, 0.8, 0.95, 0.7}, 0.5) == doctest::Approx(0.525));
  CHECK(m_at_k_iou(vals, std::vector<double>{0.5, 0.1, 0.2, 0.5}, 0.5) == 0.0);
  double prev = 1e9;
  for (double k = 0.0; k <= 1.0; k += 0.05) {
    const double v = m_at_k_iou(vals, ious, k);
    CHECK(v <= prev);
    prev = v;
  }
  CHECK_THROWS_AS(m_at_k_iou(vals, std::vector<double>{0.1}, 0.5), DimensionError);
}

TEST_CASE("evaluate_corpus: missing boxes count as perfect localization") {
  Corpus c = {entry("a b c", {"a b c"}), entry("d e", {"d f"})};
  const MetricReport r = evaluate_corpus(c);
  CHECK(r.n_entries == 2);
  CHECK(r.m_at_iou.at("cider").at(0.25) == doctest::Approx(r.cider).epsilon(1e-12));
  CHECK(r.m_at_iou.at("rouge_l").at(0.5) == doctest::Approx(r.rouge_l).epsilon(1e-12));
  c[0].pred_box = box(0, 0, 0, 1, 1, 1);
  CHECK_THROWS_AS(evaluate_corpus(c), ConfigError);
}

TEST_CASE("metric report json round trip") {
  Corpus c = {entry("a b c", {"a b c", "a b d"}), entry("d e", {"d f"})};
  MetricReport r = evaluate_corpus(c);
  r.color_accuracy = 0.75;
  r.metadata["mode"] = "student-3d";
  const std::string json = report_to_json(r);
  CHECK(json.find("\"meteor\": null") != std::string::npos);
  CHECK(json.find("cider@0.25IoU") != std::string::npos);
  CHECK(report_from_json(json) == r);
  CHECK(report_to_csv(r).find("cider_d,") != std::string::npos);
  CHECK(report_to_table(r).find("CIDEr") != std::string::npos);
  CHECK_THROWS_AS(report_from_json("{not json"), FormatError);
}
