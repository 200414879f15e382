#include "doctest.h"

#include "xt2c/errors.hpp"
#include "xt2c/losses.hpp"
#include "xt2c/metrics.hpp"
#include "xt2c/synthdata.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace xt2c;

namespace {

GenConfig small(int train = 40, int val = 10, int test = 10) {
  GenConfig c;
  c.train_scenes = train;
  c.val_scenes = val;
  c.test_scenes = test;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("xt2c_synth_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Least-squares linear map from f3d to one-hot color, scored by argmax on
// held-out objects.
double color_probe_accuracy(const GenConfig& cfg) {
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  const DatasetSplits d = generate_dataset(cfg, vocab);
  auto design = [&](const std::vector<SceneSample>& split, Eigen::MatrixXd& x, Eigen::MatrixXd& y) {
    std::size_t n = 0;
    for (const auto& s : split) n += s.objects.size();
    x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.f3d_dim) + 1);
    y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), cfg.colors);
    Eigen::Index r = 0;
    for (const auto& s : split) {
      for (const auto& o : s.objects) {
        for (std::size_t c = 0; c < cfg.f3d_dim; ++c) x(r, static_cast<Eigen::Index>(c)) = o.f3d[c];
        x(r, static_cast<Eigen::Index>(cfg.f3d_dim)) = 1.0;
        y(r, o.latent->color) = 1.0;
        ++r;
      }
    }
  };
  Eigen::MatrixXd xtr, ytr, xte, yte;
  design(d.train, xtr, ytr);
  design(d.test, xte, yte);
  const Eigen::MatrixXd w = xtr.colPivHouseholderQr().solve(ytr);
  const Eigen::MatrixXd pred = xte * w;
  int correct = 0;
  for (Eigen::Index r = 0; r < pred.rows(); ++r) {
    Eigen::Index p, t;
    pred.row(r).maxCoeff(&p);
    yte.row(r).maxCoeff(&t);
    correct += p == t ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(pred.rows());
}

}  // namespace

TEST_CASE("vocabulary is closed and small") {
  const GenConfig cfg;
  const Vocabulary v = Vocabulary::for_grammar(cfg);
  CHECK(v.size() <= 80);
  CHECK(v.word(tokens::kPad) == "<pad>");
  CHECK(v.word(tokens::kBos) == "<bos>");
  CHECK(v.word(tokens::kEos) == "<eos>");
  CHECK(v.id("zebra") == tokens::kUnk);
  CHECK_THROWS_AS(v.word(static_cast<int>(v.size())), VocabularyError);
  const auto ids = v.encode({"a", "red", "chair"});
  CHECK(ids.front() == tokens::kBos);
  CHECK(ids.back() == tokens::kEos);
  CHECK(v.text(ids) == "a red chair");

  GenConfig wide;
  wide.colors = 12;
  wide.shapes = 10;
  CHECK(Vocabulary::for_grammar(wide).size() <= 80);

  const auto dir = temp_dir("vocab");
  v.save(dir / "vocab.txt");
  CHECK(Vocabulary::load(dir / "vocab.txt") == v);
}

TEST_CASE("generation is deterministic per seed") {
  const GenConfig cfg = small();
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  Rng a(42), b(42), c(43);
  const SceneSample sa = generate_scene(a, cfg, vocab, "x");
  CHECK(sa == generate_scene(b, cfg, vocab, "x"));
  CHECK_FALSE(sa == generate_scene(c, cfg, vocab, "x"));

  const auto d1 = generate_dataset(cfg, vocab);
  const auto d2 = generate_dataset(cfg, vocab);
  CHECK(d1.train == d2.train);
  CHECK(d1.test == d2.test);
  CHECK(d1.train.size() == 40);
  CHECK(d1.val.size() == 10);
}

TEST_CASE("scenes respect their structural contract") {
  const GenConfig cfg = small(60, 0, 0);
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  const auto d = generate_dataset(cfg, vocab);
  for (const auto& s : d.train) {
    CHECK(s.objects.size() >= 4);
    CHECK(s.objects.size() <= 8);
    CHECK(s.references.size() == 2);
    CHECK(s.has_2d());
    for (const auto& o : s.objects) {
      CHECK(o.f3d.size() == cfg.f3d_dim);
      CHECK(o.f2d->size() == cfg.f2d_dim);
      CHECK(o.cls == o.latent->shape * cfg.sizes + o.latent->size);
      CHECK(*o.b2d == project_box(o.b3d));
      for (double e : o.b3d.size) CHECK(e > 0.0);
    }
    // pairwise disjoint boxes
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      for (std::size_t j = i + 1; j < s.objects.size(); ++j) {
        const auto& a = s.objects[i].b3d;
        const auto& b = s.objects[j].b3d;
        bool separated = false;
        for (int k = 0; k < 3; ++k) {
          separated = separated || std::abs(a.center[k] - b.center[k]) >= (a.size[k] + b.size[k]) / 2;
        }
        CHECK(separated);
      }
    }
  }
}

TEST_CASE("every reference passes the verifier and wrong facts fail it") {
  const GenConfig cfg = small(100, 20, 20);
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  const auto d = generate_dataset(cfg, vocab);
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    for (const auto& s : *split) {
      for (const auto& r : s.references) {
        const CaptionCheck check = verify_caption(s, r, vocab);
        CHECK_MESSAGE(check.valid, std::string(vocab.text(r) + ": " + check.reason));
      }
      CHECK(verify_caption(s, rule_based_caption(s, vocab), vocab).valid);
    }
  }

  const SceneSample& s = d.train[0];
  std::vector<int> wrong = rule_based_caption(s, vocab);
  const int color = s.target().latent->color;
  wrong[2] = vocab.id(color_words()[static_cast<std::size_t>((color + 1) % cfg.colors)]);
  CHECK_FALSE(verify_caption(s, wrong, vocab).valid);
  CHECK_FALSE(verify_caption(s, vocab.encode({"a", "the", "chair"}), vocab).valid);
  CHECK(caption_color(rule_based_caption(s, vocab), vocab) == color);
}

TEST_CASE("linear color probe on f3d") {
  GenConfig clean = small(300, 0, 100);
  clean.noise_sigma3d = 0.0;
  CHECK(color_probe_accuracy(clean) == 1.0);
  GenConfig noisy = clean;
  noisy.noise_sigma3d = 1.0;
  CHECK(color_probe_accuracy(noisy) < 1.0);
}

TEST_CASE("spatial relations are antisymmetric") {
  const GenConfig cfg = small(50, 0, 0);
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  for (const auto& s : generate_dataset(cfg, vocab).train) {
    for (const auto& a : s.objects) {
      for (const auto& b : s.objects) {
        if (&a == &b) continue;
        CHECK(spatial_relation(b.b3d, a.b3d) == inverse(spatial_relation(a.b3d, b.b3d)));
      }
    }
  }
  const Box3D o{{0.5, 0.5, 0.5}, {0.1, 0.1, 0.1}};
  CHECK(spatial_relation(o, Box3D{{0.9, 0.5, 0.5}, {0.1, 0.1, 0.1}}) == Relation::kLeftOf);
  CHECK(spatial_relation(o, Box3D{{0.6, 0.5, 0.5}, {0.1, 0.1, 0.1}}) == Relation::kNextTo);
  // exact ties go to the earlier axis
  CHECK(spatial_relation(o, Box3D{{0.8, 0.8, 0.5}, {0.1, 0.1, 0.1}}) == Relation::kLeftOf);
  CHECK(spatial_relation(o, Box3D{{0.5, 0.8, 0.8}, {0.1, 0.1, 0.1}}) == Relation::kInFrontOf);
}

TEST_CASE("splits are disjoint by scene id") {
  const GenConfig cfg = small();
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  const auto d = generate_dataset(cfg, vocab);
  std::set<std::string> ids;
  std::size_t total = 0;
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    for (const auto& s : *split) {
      ids.insert(s.scene_id);
      ++total;
    }
  }
  CHECK(ids.size() == total);
}

TEST_CASE("JSONL round trip and errors") {
  const GenConfig cfg = small(12, 3, 3);
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  const auto d = generate_dataset(cfg, vocab);
  const auto dir = temp_dir("jsonl");
  write_dataset(d, vocab, dir);
  CHECK(read_split(dir / "train.jsonl") == d.train);
  CHECK(read_split(dir / "test.jsonl") == d.test);
  CHECK(Vocabulary::load(dir / "vocab.txt") == vocab);

  // a split without 2D fields stays without them
  std::vector<SceneSample> stripped = d.val;
  for (auto& s : stripped) {
    for (auto& o : s.objects) {
      o.f2d.reset();
      o.b2d.reset();
    }
  }
  write_split(stripped, dir / "stripped.jsonl");
  CHECK(read_split(dir / "stripped.jsonl") == stripped);

  { std::ofstream(dir / "empty.jsonl"); }
  CHECK(read_split(dir / "empty.jsonl").empty());

  std::ifstream in(dir / "train.jsonl");
  std::string l1, l2;
  std::getline(in, l1);
  std::getline(in, l2);
  {
    std::ofstream out(dir / "truncated.jsonl");
    out << l1 << "\n" << l2.substr(0, l2.size() / 2) << "\n";
  }
  try {
    read_split(dir / "truncated.jsonl");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(read_split(dir / "missing.jsonl"), FormatError);
}

TEST_CASE("echoing the best reference reaches the corpus maximum") {
  const GenConfig cfg = small(6, 0, 0);
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  const auto scenes = generate_dataset(cfg, vocab).train;
  std::vector<std::vector<Sentence>> refs;
  for (const auto& s : scenes) {
    std::vector<Sentence> r;
    for (const auto& ids : s.references) r.push_back(caption_sentence(ids));
    refs.push_back(r);
  }
  auto corpus_with = [&](const std::vector<std::size_t>& pick) {
    Corpus c;
    for (std::size_t i = 0; i < scenes.size(); ++i) c.push_back({refs[i][pick[i]], refs[i], {}, {}});
    return c;
  };
  // the echo captioner: per scene, the reference scoring best against the set
  const CiderScorer scorer(refs);
  std::vector<std::size_t> echo(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    double best = -1;
    for (std::size_t j = 0; j < refs[i].size(); ++j) {
      const double sc = scorer.score(refs[i][j], refs[i]);
      if (sc > best) {
        best = sc;
        echo[i] = j;
      }
    }
  }
  const double echoed = cider_d(corpus_with(echo));
  double maximum = 0.0;
  const std::size_t combos = std::size_t{1} << scenes.size();
  for (std::size_t mask = 0; mask < combos; ++mask) {
    std::vector<std::size_t> pick(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) pick[i] = (mask >> i) & 1U;
    maximum = std::max(maximum, cider_d(corpus_with(pick)));
  }
  CHECK(std::abs(echoed - maximum) <= 1e-9);

  // the template captioner is factual but not a reference echo
  Corpus templ;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    templ.push_back({caption_sentence(rule_based_caption(scenes[i], vocab)), refs[i], {}, {}});
  }
  CHECK(cider_d(templ) > 0.0);
  CHECK(cider_d(templ) <= maximum + 1e-9);
}

TEST_CASE("generator config validation and keys") {
  GenConfig bad;
  bad.min_objects = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = GenConfig{};
  bad.colors = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = GenConfig{};
  bad.min_objects = 9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  GenConfig cfg;
  cfg.noise_sigma3d = 0.3;
  cfg.train_scenes = 17;
  const GenConfig back = gen_config_from(to_key_values(cfg));
  CHECK(back.noise_sigma3d == 0.3);
  CHECK(back.train_scenes == 17);
}

TEST_CASE("impossible placement raises a generation error") {
  GenConfig cfg = small();
  cfg.min_objects = 400;
  cfg.max_objects = 400;
  const Vocabulary vocab = Vocabulary::for_grammar(cfg);
  Rng rng(1);
  CHECK_THROWS_AS(generate_scene(rng, cfg, vocab, "crowded"), GenerationError);
}
