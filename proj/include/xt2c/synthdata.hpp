#pragma once

#include "xt2c/config.hpp"
#include "xt2c/objrep.hpp"
#include "xt2c/random.hpp"
#include "xt2c/tokens.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace xt2c {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GenConfig {
  int train_scenes = 2000;
  int val_scenes = 400;
  int test_scenes = 400;
  int min_objects = 4;
  int max_objects = 8;
  int colors = 8;
  int shapes = 6;
  int sizes = 3;
  double noise_sigma3d = 0.75;
  int refs_per_object = 2;
  std::size_t f3d_dim = 32;
  std::size_t f2d_dim = 32;
  std::uint64_t seed = 1;

  void validate() const;
  // Width of the one-hot semantic class (shape x size).
  std::size_t classes() const { return static_cast<std::size_t>(shapes * sizes); }
};

// "data.*" keys of a configuration file. Unlisted keys are left alone.
GenConfig gen_config_from(const KeyValues& kv, GenConfig base = {});
KeyValues to_key_values(const GenConfig& cfg);

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  // The closed caption vocabulary for the given category counts.
  static Vocabulary for_grammar(const GenConfig& cfg);

  int id(const std::string& word) const;  // kUnk when unknown
  const std::string& word(int id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(const std::vector<std::string>& words) const;  // adds BOS/EOS
  // Words between BOS and the first EOS, specials dropped.
  std::vector<std::string> decode(std::span<const int> ids) const;
  std::string text(std::span<const int> ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

const std::vector<std::string>& color_words();
const std::vector<std::string>& shape_words();

enum class Relation { kLeftOf, kRightOf, kBehind, kInFrontOf, kAbove, kBelow, kNextTo };

std::vector<std::string> relation_words(Relation r);
Relation inverse(Relation r);

inline constexpr double kNextToDistance = 0.2;

// Relation of `subject` to `other` from box centers: the axis with the
// largest |delta| decides (ties: x before y before z); close pairs are
// "next to". The camera looks along +y, so larger x is right, larger y is
// farther away and larger z is higher.
Relation spatial_relation(const Box3D& subject, const Box3D& other);

// Index of the object nearest to `index` by center distance (lowest index on
// ties).
int nearest_neighbor(const SceneSample& scene, int index);

// Projection of a 3D box onto the fixed virtual camera.
Box2D project_box(const Box3D& box);

SceneSample generate_scene(Rng& rng, const GenConfig& cfg, const Vocabulary& vocab, const std::string& scene_id);

struct DatasetSplits {
  std::vector<SceneSample> train;
  std::vector<SceneSample> val;
  std::vector<SceneSample> test;
};

// Scene i of split s is generated from its own stream derived from the seed,
// so splits are reproducible independently of each other.
DatasetSplits generate_dataset(const GenConfig& cfg, const Vocabulary& vocab);

void write_split(const std::vector<SceneSample>& samples, const std::filesystem::path& path);
std::vector<SceneSample> read_split(const std::filesystem::path& path);

// Writes train/val/test .jsonl and vocab.txt into `dir`.
void write_dataset(const DatasetSplits& splits, const Vocabulary& vocab, const std::filesystem::path& dir);

struct CaptionCheck {
  bool valid = false;
  std::string reason;
};

// Grammar and fact check of a caption against the scene's latent attributes.
CaptionCheck verify_caption(const SceneSample& scene, std::span<const int> caption, const Vocabulary& vocab);

// Color index of the first color word of a caption, if any (the target's
// color in grammar order).
std::optional<int> caption_color(std::span<const int> caption, const Vocabulary& vocab);

// Deterministic caption built from the latent attributes: "a <color> <shape>
// <relation> the <color> <shape>".
std::vector<int> rule_based_caption(const SceneSample& scene, const Vocabulary& vocab);

}  // namespace xt2c
