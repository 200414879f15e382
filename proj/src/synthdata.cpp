#include "xt2c/synthdata.hpp"

#include "xt2c/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <cstdio>

namespace xt2c {

namespace {

using nlohmann::json;

const std::vector<std::string> kSpecialWords = {"<pad>", "<bos>", "<eos>", "<unk>"};

// Extent multipliers (w, h, l) per shape; l is vertical.
constexpr std::array<std::array<double, 3>, 10> kShapeAspect = {{
    {1.0, 1.0, 1.3},
    {1.6, 1.0, 0.8},
    {1.0, 1.0, 1.0},
    {0.6, 0.6, 1.6},
    {2.0, 1.0, 0.9},
    {1.2, 0.5, 1.8},
    {1.8, 1.4, 0.6},
    {1.4, 0.8, 1.0},
    {1.0, 0.3, 2.0},
    {0.9, 0.7, 0.7},
}};

constexpr double kNuisanceSigma = 0.3;
constexpr double kPlacementMargin = 0.01;
constexpr int kPlacementRetries = 200;
constexpr int kSceneRetries = 20;

double size_scale(int size, int n_sizes) {
  // evenly spaced between 0.08 and 0.14
  if (n_sizes == 1) return 0.11;
  return 0.08 + 0.06 * static_cast<double>(size) / static_cast<double>(n_sizes - 1);
}

bool boxes_overlap(const Box3D& a, const Box3D& b) {
  for (int i = 0; i < 3; ++i) {
    if (std::abs(a.center[i] - b.center[i]) >= 0.5 * (a.size[i] + b.size[i]) + kPlacementMargin) return false;
  }
  return true;
}

std::vector<std::string> describe(const SceneSample& scene, bool definite, bool neighbor_color) {
  const auto& target = scene.target();
  const int n = nearest_neighbor(scene, scene.target_index);
  const auto& other = scene.objects[static_cast<std::size_t>(n)];
  std::vector<std::string> words;
  words.push_back(definite ? "the" : "a");
  words.push_back(color_words().at(static_cast<std::size_t>(target.latent->color)));
  words.push_back(shape_words().at(static_cast<std::size_t>(target.latent->shape)));
  for (auto& w : relation_words(spatial_relation(target.b3d, other.b3d))) words.push_back(w);
  words.push_back("the");
  if (neighbor_color) words.push_back(color_words().at(static_cast<std::size_t>(other.latent->color)));
  words.push_back(shape_words().at(static_cast<std::size_t>(other.latent->shape)));
  return words;
}

json object_to_json(const ObjectRecord& o) {
  json j;
  j["f3d"] = o.f3d;
  j["cls"] = o.cls;
  j["b3d"] = o.b3d.as_vector();
  if (o.f2d) j["f2d"] = *o.f2d;
  if (o.b2d) j["b2d"] = o.b2d->as_vector();
  if (o.latent) j["latent"] = {{"color", o.latent->color}, {"shape", o.latent->shape}, {"size", o.latent->size}};
  return j;
}

ObjectRecord object_from_json(const json& j) {
  ObjectRecord o;
  o.f3d = j.at("f3d").get<std::vector<float>>();
  o.cls = j.at("cls").get<int>();
  auto b = j.at("b3d").get<std::vector<double>>();
  if (b.size() != 6) throw FormatError("b3d needs 6 values");
  o.b3d.center = {b[0], b[1], b[2]};
  o.b3d.size = {b[3], b[4], b[5]};
  if (j.contains("f2d") && !j["f2d"].is_null()) o.f2d = j["f2d"].get<std::vector<float>>();
  if (j.contains("b2d") && !j["b2d"].is_null()) {
    auto v = j["b2d"].get<std::vector<double>>();
    if (v.size() != 4) throw FormatError("b2d needs 4 values");
    o.b2d = Box2D{v[0], v[1], v[2], v[3]};
  }
  if (j.contains("latent") && !j["latent"].is_null()) {
    const auto& l = j["latent"];
    o.latent = LatentAttributes{l.at("color").get<int>(), l.at("shape").get<int>(), l.at("size").get<int>()};
  }
  return o;
}

}  // namespace

void GenConfig::validate() const {
  if (train_scenes < 0 || val_scenes < 0 || test_scenes < 0) throw ConfigError("scene counts must be >= 0");
  if (min_objects < 2) throw ConfigError("at least 2 objects per scene are needed for relations");
  if (max_objects < min_objects) throw ConfigError("max_objects < min_objects");
  if (colors < 2 || shapes < 2 || sizes < 2) throw ConfigError("category counts must be >= 2");
  if (colors > static_cast<int>(color_words().size())) throw ConfigError("too many colors for the vocabulary");
  if (shapes > static_cast<int>(shape_words().size())) throw ConfigError("too many shapes for the vocabulary");
  if (!(noise_sigma3d >= 0.0)) throw ConfigError("noise_sigma3d must be >= 0");
  if (refs_per_object < 1) throw ConfigError("refs_per_object must be >= 1");
  if (f3d_dim < static_cast<std::size_t>(shapes + sizes + colors + 3))
    throw ConfigError("f3d_dim too small for shape, size, color and extent channels");
  if (f2d_dim < static_cast<std::size_t>(colors + shapes)) throw ConfigError("f2d_dim too small");
}

namespace {

void bind(FieldBinder& b, GenConfig& c) {
  b.field("data.train_scenes", c.train_scenes);
  b.field("data.val_scenes", c.val_scenes);
  b.field("data.test_scenes", c.test_scenes);
  b.field("data.min_objects", c.min_objects);
  b.field("data.max_objects", c.max_objects);
  b.field("data.colors", c.colors);
  b.field("data.shapes", c.shapes);
  b.field("data.sizes", c.sizes);
  b.field("data.noise_sigma3d", c.noise_sigma3d);
  b.field("data.refs_per_object", c.refs_per_object);
  int f3d = static_cast<int>(c.f3d_dim), f2d = static_cast<int>(c.f2d_dim);
  b.field("data.f3d_dim", f3d);
  b.field("data.f2d_dim", f2d);
  if (f3d < 1 || f2d < 1) throw ConfigError("feature widths must be positive");
  c.f3d_dim = static_cast<std::size_t>(f3d);
  c.f2d_dim = static_cast<std::size_t>(f2d);
  b.field("data.seed", c.seed);
}

}  // namespace

GenConfig gen_config_from(const KeyValues& kv, GenConfig base) {
  auto b = FieldBinder::reader(kv);
  bind(b, base);
  base.validate();
  return base;
}

KeyValues to_key_values(const GenConfig& cfg) {
  KeyValues kv;
  GenConfig copy = cfg;
  auto b = FieldBinder::writer(kv);
  bind(b, copy);
  return kv;
}

const std::vector<std::string>& color_words() {
  static const std::vector<std::string> w = {"red",  "green", "blue",  "yellow", "purple", "orange",
                                             "white", "black", "pink", "brown",  "gray",   "cyan"};
  return w;
}

const std::vector<std::string>& shape_words() {
  static const std::vector<std::string> w = {"chair", "table", "box", "lamp", "sofa",
                                             "shelf", "bed",   "desk", "door", "sink"};
  return w;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < kSpecialWords.size() || !std::equal(kSpecialWords.begin(), kSpecialWords.end(), words_.begin()))
    throw VocabularyError("vocabulary must start with <pad> <bos> <eos> <unk>");
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<int>(i)).second)
      throw VocabularyError("duplicate vocabulary word: " + words_[i]);
  }
}

Vocabulary Vocabulary::for_grammar(const GenConfig& cfg) {
  std::vector<std::string> w = kSpecialWords;
  for (const char* s : {"a", "the", "left", "right", "of", "behind", "in", "front", "above", "below", "next", "to"})
    w.emplace_back(s);
  for (int c = 0; c < cfg.colors; ++c) w.push_back(color_words().at(static_cast<std::size_t>(c)));
  for (int s = 0; s < cfg.shapes; ++s) w.push_back(shape_words().at(static_cast<std::size_t>(s)));
  return Vocabulary(std::move(w));
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? tokens::kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(words_.size()));
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<int> ids{tokens::kBos};
  for (const auto& w : words) ids.push_back(id(w));
  ids.push_back(tokens::kEos);
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  for (int t : ids) {
    if (t == tokens::kEos) break;
    if (t == tokens::kBos || t == tokens::kPad) continue;
    out.push_back(word(t));
  }
  return out;
}

std::string Vocabulary::text(std::span<const int> ids) const {
  std::string s;
  for (const auto& w : decode(ids)) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& w : words_) out << w << '\n';
  if (!out) throw FormatError("write failed: " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

std::vector<std::string> relation_words(Relation r) {
  switch (r) {
    case Relation::kLeftOf: return {"left", "of"};
    case Relation::kRightOf: return {"right", "of"};
    case Relation::kBehind: return {"behind"};
    case Relation::kInFrontOf: return {"in", "front", "of"};
    case Relation::kAbove: return {"above"};
    case Relation::kBelow: return {"below"};
    case Relation::kNextTo: return {"next", "to"};
  }
  return {};
}

Relation inverse(Relation r) {
  switch (r) {
    case Relation::kLeftOf: return Relation::kRightOf;
    case Relation::kRightOf: return Relation::kLeftOf;
    case Relation::kBehind: return Relation::kInFrontOf;
    case Relation::kInFrontOf: return Relation::kBehind;
    case Relation::kAbove: return Relation::kBelow;
    case Relation::kBelow: return Relation::kAbove;
    case Relation::kNextTo: return Relation::kNextTo;
  }
  return r;
}

Relation spatial_relation(const Box3D& subject, const Box3D& other) {
  std::array<double, 3> d{};
  for (int i = 0; i < 3; ++i) d[i] = other.center[i] - subject.center[i];
  int axis = 0;
  for (int i = 1; i < 3; ++i)
    if (std::abs(d[i]) > std::abs(d[axis])) axis = i;
  if (std::abs(d[axis]) < kNextToDistance) return Relation::kNextTo;
  switch (axis) {
    case 0: return d[0] > 0 ? Relation::kLeftOf : Relation::kRightOf;
    case 1: return d[1] > 0 ? Relation::kInFrontOf : Relation::kBehind;
    default: return d[2] > 0 ? Relation::kBelow : Relation::kAbove;
  }
}

int nearest_neighbor(const SceneSample& scene, int index) {
  const auto& a = scene.objects.at(static_cast<std::size_t>(index)).b3d;
  int best = -1;
  double best_d = 0.0;
  for (std::size_t j = 0; j < scene.objects.size(); ++j) {
    if (static_cast<int>(j) == index) continue;
    const auto& b = scene.objects[j].b3d;
    double d = 0.0;
    for (int i = 0; i < 3; ++i) d += (a.center[i] - b.center[i]) * (a.center[i] - b.center[i]);
    if (best < 0 || d < best_d) {
      best = static_cast<int>(j);
      best_d = d;
    }
  }
  if (best < 0) throw ConfigError("scene " + scene.scene_id + " has no second object");
  return best;
}

Box2D project_box(const Box3D& box) {
  // pinhole at (0.5, -1, 0.5) looking along +y, focal length 1
  const double depth = box.center[1] + 1.0;
  Box2D b;
  b.u = 0.5 + (box.center[0] - 0.5) / depth;
  b.v = 0.5 - (box.center[2] - 0.5) / depth;
  b.w = box.size[0] / depth;
  b.h = box.size[2] / depth;
  return b;
}

SceneSample generate_scene(Rng& rng, const GenConfig& cfg, const Vocabulary& vocab, const std::string& scene_id) {
  cfg.validate();
  std::uniform_int_distribution<int> count(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<int> color_d(0, cfg.colors - 1), shape_d(0, cfg.shapes - 1), size_d(0, cfg.sizes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0), jitter(0.9, 1.1);
  std::normal_distribution<double> noise(0.0, 1.0);

  SceneSample scene;
  scene.scene_id = scene_id;
  const int m = count(rng);

  std::vector<LatentAttributes> latents(static_cast<std::size_t>(m));
  std::vector<Box3D> boxes;
  for (auto& l : latents) {
    l.color = color_d(rng);
    l.shape = shape_d(rng);
    l.size = size_d(rng);
  }
  bool placed = false;
  for (int attempt = 0; attempt < kSceneRetries && !placed; ++attempt) {
    boxes.clear();
    placed = true;
    for (const auto& l : latents) {
      Box3D box;
      const double s = size_scale(l.size, cfg.sizes);
      for (int i = 0; i < 3; ++i) box.size[i] = s * kShapeAspect[static_cast<std::size_t>(l.shape)][i] * jitter(rng);
      bool ok = false;
      for (int r = 0; r < kPlacementRetries && !ok; ++r) {
        for (int i = 0; i < 3; ++i) box.center[i] = 0.5 * box.size[i] + unit(rng) * (1.0 - box.size[i]);
        ok = std::none_of(boxes.begin(), boxes.end(), [&](const Box3D& b) { return boxes_overlap(box, b); });
      }
      if (!ok) {
        placed = false;
        break;
      }
      boxes.push_back(box);
    }
  }
  if (!placed) throw GenerationError("could not place " + std::to_string(m) + " boxes in scene " + scene_id);

  const std::size_t colors = static_cast<std::size_t>(cfg.colors);
  const std::size_t shapes = static_cast<std::size_t>(cfg.shapes);
  const std::size_t sizes = static_cast<std::size_t>(cfg.sizes);
  for (int k = 0; k < m; ++k) {
    const auto& l = latents[static_cast<std::size_t>(k)];
    ObjectRecord o;
    o.latent = l;
    o.b3d = boxes[static_cast<std::size_t>(k)];
    o.cls = l.shape * cfg.sizes + l.size;

    o.f3d.assign(cfg.f3d_dim, 0.0f);
    std::size_t at = 0;
    o.f3d[at + static_cast<std::size_t>(l.shape)] = 1.0f;
    at += shapes;
    o.f3d[at + static_cast<std::size_t>(l.size)] = 1.0f;
    at += sizes;
    for (std::size_t c = 0; c < colors; ++c)
      o.f3d[at + c] = static_cast<float>((static_cast<int>(c) == l.color ? 1.0 : 0.0) + cfg.noise_sigma3d * noise(rng));
    at += colors;
    for (int i = 0; i < 3; ++i) o.f3d[at++] = static_cast<float>(o.b3d.size[i]);
    for (; at < cfg.f3d_dim; ++at) o.f3d[at] = static_cast<float>(kNuisanceSigma * noise(rng));

    std::vector<float> f2d(cfg.f2d_dim, 0.0f);
    f2d[static_cast<std::size_t>(l.color)] = 1.0f;
    f2d[colors + static_cast<std::size_t>(l.shape)] = 1.0f;
    for (std::size_t i = colors + shapes; i < cfg.f2d_dim; ++i) f2d[i] = static_cast<float>(kNuisanceSigma * noise(rng));
    o.f2d = std::move(f2d);
    o.b2d = project_box(o.b3d);
    scene.objects.push_back(std::move(o));
  }

  scene.target_index = std::uniform_int_distribution<int>(0, m - 1)(rng);
  std::bernoulli_distribution coin(0.5);
  for (int r = 0; r < cfg.refs_per_object; ++r) {
    const bool definite = coin(rng);
    const bool neighbor_color = coin(rng);
    scene.references.push_back(vocab.encode(describe(scene, definite, neighbor_color)));
  }
  return scene;
}

DatasetSplits generate_dataset(const GenConfig& cfg, const Vocabulary& vocab) {
  cfg.validate();
  DatasetSplits out;
  auto make = [&](std::vector<SceneSample>& split, int n, const char* name, std::uint64_t tag) {
    split.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      Rng rng = derive_rng(cfg.seed ^ (tag << 40), static_cast<std::uint64_t>(i));
      char id[64];
      std::snprintf(id, sizeof id, "%s_%05d", name, i);
      split.push_back(generate_scene(rng, cfg, vocab, id));
    }
  };
  make(out.train, cfg.train_scenes, "train", 1);
  make(out.val, cfg.val_scenes, "val", 2);
  make(out.test, cfg.test_scenes, "test", 3);
  return out;
}

void write_split(const std::vector<SceneSample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& s : samples) {
    json j;
    j["scene_id"] = s.scene_id;
    j["objects"] = json::array();
    for (const auto& o : s.objects) j["objects"].push_back(object_to_json(o));
    j["target_index"] = s.target_index;
    j["references"] = s.references;
    out << j.dump() << '\n';
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

std::vector<SceneSample> read_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<SceneSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    try {
      const json j = json::parse(line);
      SceneSample s;
      s.scene_id = j.at("scene_id").get<std::string>();
      for (const auto& o : j.at("objects")) s.objects.push_back(object_from_json(o));
      s.target_index = j.at("target_index").get<int>();
      s.references = j.at("references").get<std::vector<std::vector<int>>>();
      if (s.target_index < 0 || static_cast<std::size_t>(s.target_index) >= s.objects.size())
        throw FormatError("target_index out of range");
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return samples;
}

void write_dataset(const DatasetSplits& splits, const Vocabulary& vocab, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_split(splits.train, dir / "train.jsonl");
  write_split(splits.val, dir / "val.jsonl");
  write_split(splits.test, dir / "test.jsonl");
  vocab.save(dir / "vocab.txt");
}

CaptionCheck verify_caption(const SceneSample& scene, std::span<const int> caption, const Vocabulary& vocab) {
  auto fail = [](std::string why) { return CaptionCheck{false, std::move(why)}; };
  std::vector<std::string> w;
  try {
    w = vocab.decode(caption);
  } catch (const VocabularyError& e) {
    return fail(e.what());
  }
  const auto& target = scene.target();
  if (!target.latent) return fail("target has no latent attributes");
  const int n = nearest_neighbor(scene, scene.target_index);
  const auto& other = scene.objects[static_cast<std::size_t>(n)];
  if (!other.latent) return fail("neighbor has no latent attributes");

  auto index_in = [](const std::vector<std::string>& list, const std::string& s) {
    auto it = std::find(list.begin(), list.end(), s);
    return it == list.end() ? -1 : static_cast<int>(it - list.begin());
  };
  std::size_t i = 0;
  auto next = [&]() -> std::string { return i < w.size() ? w[i++] : std::string(); };

  const auto article = next();
  if (article != "a" && article != "the") return fail("expected article, got '" + article + "'");
  const int color = index_in(color_words(), next());
  if (color < 0) return fail("expected color");
  if (color != target.latent->color) return fail("wrong target color");
  const int shape = index_in(shape_words(), next());
  if (shape < 0) return fail("expected shape");
  if (shape != target.latent->shape) return fail("wrong target shape");

  const Relation truth = spatial_relation(target.b3d, other.b3d);
  bool matched = false;
  for (int r = 0; r <= static_cast<int>(Relation::kNextTo) && !matched; ++r) {
    const auto rw = relation_words(static_cast<Relation>(r));
    if (i + rw.size() <= w.size() && std::equal(rw.begin(), rw.end(), w.begin() + static_cast<std::ptrdiff_t>(i))) {
      if (static_cast<Relation>(r) != truth) return fail("wrong relation");
      i += rw.size();
      matched = true;
    }
  }
  if (!matched) return fail("expected relation");
  if (next() != "the") return fail("expected 'the' before neighbor");
  std::string word = next();
  const int ncolor = index_in(color_words(), word);
  if (ncolor >= 0) {
    if (ncolor != other.latent->color) return fail("wrong neighbor color");
    word = next();
  }
  const int nshape = index_in(shape_words(), word);
  if (nshape < 0) return fail("expected neighbor shape");
  if (nshape != other.latent->shape) return fail("wrong neighbor shape");
  if (i != w.size()) return fail("trailing words");
  return {true, ""};
}

std::optional<int> caption_color(std::span<const int> caption, const Vocabulary& vocab) {
  for (const auto& word : vocab.decode(caption)) {
    auto it = std::find(color_words().begin(), color_words().end(), word);
    if (it != color_words().end()) return static_cast<int>(it - color_words().begin());
  }
  return std::nullopt;
}

std::vector<int> rule_based_caption(const SceneSample& scene, const Vocabulary& vocab) {
  if (!scene.target().latent) throw ConfigError("scene " + scene.scene_id + " carries no latent attributes");
  return vocab.encode(describe(scene, false, true));
}

}  // namespace xt2c
