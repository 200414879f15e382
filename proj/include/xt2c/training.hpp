#pragma once

#include "xt2c/cmf.hpp"
#include "xt2c/config.hpp"
#include "xt2c/losses.hpp"
#include "xt2c/metrics.hpp"
#include "xt2c/synthdata.hpp"
#include "xt2c/transformer.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace xt2c {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 32;
};

struct ScheduleConfig {
  int epochs = 30;
  double lr_decay_factor = 0.1;
  int decay_every = 10;
  int ce_epochs = 20;  // CE-only warm-up before the reward term joins (variant_c)
};

struct RunConfig {
  ModelConfig model;
  FusionConfig fusion;
  LossWeights weights;
  LossFlags flags;  // flags.cider is driven by variant_c and the schedule
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  std::uint64_t seed = 1;
  bool variant_c = false;
  int reward_samples = 5;
  bool teacher_reward = false;
  bool align_bidirectional = false;  // let the alignment loss reach the teacher too
  bool offline_teacher = false;
  AttributeToggles toggles;
  int eval_batch = 64;
  int val_scenes = 0;  // 0 = whole validation split for model selection

  void validate() const;
  double lr_at(int epoch) const;
  bool uses_teacher() const;
  bool reward_active(int epoch) const { return variant_c && epoch >= schedule.ce_epochs; }

  KeyValues to_key_values() const;
  std::string to_text() const { return to_key_values().to_text(); }
  // Unknown keys raise ConfigError; "data.*" keys belong to the generator
  // and are skipped.
  static RunConfig from_key_values(const KeyValues& kv, RunConfig base);
  static RunConfig from_key_values(const KeyValues& kv);
};

// All trainable weights of a run.
struct Models {
  CaptionNetwork<float> student;
  std::optional<CaptionNetwork<float>> teacher;
  FusionParams<float> fusion;

  static Models create(const RunConfig& cfg, bool with_teacher);

  template <typename F>
  void visit(F&& f) {
    student.visit("student", f);
    if (teacher) teacher->visit("teacher", f);
    fusion.visit("fusion", f);
  }
};

struct AdamState {
  std::map<std::string, Tensor<float>> m;
  std::map<std::string, Tensor<float>> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update over every parameter that holds a gradient;
// gradients are cleared afterwards.
void adam_step(Models& models, AdamState& state, const OptimizerConfig& opt, double lr);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  RunConfig config;
  Vocabulary vocab;
  int epoch = 0;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  AdamState optimizer;
  std::string rng_state;
};

Checkpoint make_checkpoint(const RunConfig& cfg, const Vocabulary& vocab, Models& models, const AdamState& adam,
                           int epoch, const std::string& rng_state);

// Rebuilds networks from a checkpoint, checking every tensor against the
// shapes implied by `cfg`. The teacher is restored only if its tensors exist.
Models restore_models(const Checkpoint& ckpt, const RunConfig& cfg);
inline Models restore_models(const Checkpoint& ckpt) { return restore_models(ckpt, ckpt.config); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

enum class EvalMode { kStudent3d, kTeacherMulti };
std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(const std::string& text);

struct EvalOptions {
  EvalMode mode = EvalMode::kStudent3d;
  std::optional<double> iou_noise;  // sigma of the box perturbation
  std::uint64_t seed = 0;
  int batch = 64;
  std::size_t limit = 0;  // evaluate only the first `limit` scenes when > 0
};

struct EvalResult {
  MetricReport report;
  std::vector<std::vector<int>> captions;
};

EvalResult evaluate_models(Models& models, const RunConfig& cfg, const Vocabulary& vocab,
                           const std::vector<SceneSample>& split, const EvalOptions& options);
MetricReport evaluate(const Checkpoint& ckpt, const std::vector<SceneSample>& split, const EvalOptions& options);

// Center jitter N(0, sigma) per axis and log-normal size jitter exp(N(0, sigma)).
Box3D perturb_box(const Box3D& box, double sigma, Rng& rng);

// Mean teacher-forced caption CE of the student over a split.
double student_ce(Models& models, const RunConfig& cfg, const std::vector<SceneSample>& split, int batch = 64);

struct EpochLog {
  int epoch = 0;
  std::string phase = "joint";
  double lr = 0.0;
  int steps = 0;
  LossBreakdown mean;
  double val_cider = 0.0;
  double val_color_accuracy = 0.0;
  bool best = false;

  std::string to_json() const;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochLog> logs;
};

// Random stream indices derived from RunConfig::seed.
namespace streams {
inline constexpr std::uint64_t kStudentInit = 1;
inline constexpr std::uint64_t kTeacherInit = 2;
inline constexpr std::uint64_t kFusionInit = 3;
inline constexpr std::uint64_t kShuffle = 4;
inline constexpr std::uint64_t kMask = 5;
inline constexpr std::uint64_t kSampling = 6;
inline constexpr std::uint64_t kTeacherShuffle = 7;
}  // namespace streams

class Trainer {
 public:
  Trainer(RunConfig cfg, Vocabulary vocab, const std::vector<SceneSample>& train,
          const std::vector<SceneSample>* val = nullptr);

  // One optimizer step on `batch`. force_teacher runs the teacher through the
  // graph even when no active term needs it.
  LossBreakdown step(std::span<const SceneSample* const> batch, int epoch, bool force_teacher = false);
  EpochLog run_epoch(int epoch);

  // Full schedule; keeps the student with the best validation CIDEr-D.
  // `on_epoch` sees every log line as it is produced.
  TrainResult run(const std::function<void(const EpochLog&)>& on_epoch = {},
                  const std::filesystem::path& diagnostic_dir = {});

  Models& models() { return models_; }
  AdamState& optimizer() { return adam_; }
  const RunConfig& config() const { return cfg_; }
  Checkpoint checkpoint(int epoch);

 private:
  void train_teacher_offline(const std::function<void(const EpochLog&)>& on_epoch);
  std::string rng_state() const;

  RunConfig cfg_;
  Vocabulary vocab_;
  const std::vector<SceneSample>& train_;
  const std::vector<SceneSample>* val_;
  Models models_;
  AdamState adam_;
  CiderScorer scorer_;
  Rng shuffle_rng_;
  Rng mask_rng_;
  Rng sample_rng_;
  bool teacher_frozen_ = false;
};

TrainResult train(const RunConfig& cfg, const Vocabulary& vocab, const std::vector<SceneSample>& train_split,
                  const std::vector<SceneSample>& val_split, const std::function<void(const EpochLog&)>& on_epoch = {},
                  const std::filesystem::path& diagnostic_dir = {});

// Ablation variants are pure configuration deltas on top of a base config.
struct Variant {
  std::string name;
  std::function<void(RunConfig&)> apply;
};

// full, baseline, no_align, no_cmf, concat, no_mask, attention,
// offline_teacher, variant_c, and attribute toggles written as
// "attr:-f3d,-pe" (attributes switched off).
Variant parse_variant(const std::string& name);
std::vector<std::string> known_variants();

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  MetricReport report;
};

struct AblationData {
  const Vocabulary* vocab = nullptr;
  const std::vector<SceneSample>* train = nullptr;
  const std::vector<SceneSample>* val = nullptr;
  const std::vector<SceneSample>* test = nullptr;
};

// Runs every (variant, seed) pair and evaluates the student on the test
// split. Jobs may run on up to `threads` workers; rows come back in
// (variant, seed) order regardless.
std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds, const AblationData& data, int threads = 1,
                                const std::function<void(const AblationRow&)>& on_row = {});

// One row per (variant, seed), then "mean" and "sd" rows per variant.
std::string ablation_csv(const std::vector<AblationRow>& rows);

// Worker cap from XT2C_THREADS (default 1).
int thread_budget();

}  // namespace xt2c
