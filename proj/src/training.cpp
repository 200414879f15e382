#include "xt2c/training.hpp"

#include "xt2c/errors.hpp"
#include "xt2c/tensor_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace xt2c {

namespace {

std::string gate_name(GateMode m) { return m == GateMode::kFree ? "free" : "computed"; }

GateMode parse_gate(const std::string& s) {
  if (s == "computed") return GateMode::kComputed;
  if (s == "free") return GateMode::kFree;
  throw ConfigError("model.gate must be 'computed' or 'free', got '" + s + "'");
}

void bind(FieldBinder& b, RunConfig& c) {
  auto& m = c.model;
  b.field("model.layers", m.layers);
  b.field("model.width", m.width);
  b.field("model.heads", m.heads);
  b.field("model.memory_slots", m.memory_slots);
  b.field("model.ff_width", m.ff_width);
  b.field("model.vocab_size", m.vocab_size);
  b.field("model.max_len", m.max_len);
  std::string gate = gate_name(m.gate);
  b.field("model.gate", gate);
  m.gate = parse_gate(gate);
  int f3d = static_cast<int>(m.input.f3d), f2d = static_cast<int>(m.input.f2d), cls = static_cast<int>(m.input.classes);
  b.field("model.f3d_dim", f3d);
  b.field("model.f2d_dim", f2d);
  b.field("model.classes", cls);
  if (f3d < 1 || f2d < 1 || cls < 1) throw ConfigError("model input widths must be positive");
  m.input.f3d = static_cast<std::size_t>(f3d);
  m.input.f2d = static_cast<std::size_t>(f2d);
  m.input.classes = static_cast<std::size_t>(cls);
  m.input.model = static_cast<std::size_t>(std::max(1, m.width));

  std::string mode = to_string(c.fusion.mode);
  b.field("fusion.mode", mode);
  c.fusion.mode = parse_fusion_mode(mode);
  b.field("fusion.mask_prob", c.fusion.mask_prob);
  b.field("fusion.stop_student_gradient", c.fusion.stop_student_gradient);

  b.field("loss.alpha", c.weights.alpha);
  b.field("loss.beta", c.weights.beta);
  b.field("loss.gamma", c.weights.gamma);
  b.field("loss.align", c.flags.align);
  b.field("loss.ce_student", c.flags.ce_student);
  b.field("loss.ce_teacher", c.flags.ce_teacher);
  b.field("loss.reward_samples", c.reward_samples);
  b.field("loss.teacher_reward", c.teacher_reward);
  b.field("loss.align_bidirectional", c.align_bidirectional);

  b.field("optim.lr", c.optimizer.lr);
  b.field("optim.beta1", c.optimizer.beta1);
  b.field("optim.beta2", c.optimizer.beta2);
  b.field("optim.eps", c.optimizer.eps);
  b.field("optim.batch_size", c.optimizer.batch_size);

  b.field("schedule.epochs", c.schedule.epochs);
  b.field("schedule.lr_decay_factor", c.schedule.lr_decay_factor);
  b.field("schedule.decay_every", c.schedule.decay_every);
  b.field("schedule.ce_epochs", c.schedule.ce_epochs);

  b.field("seed", c.seed);
  b.field("variant_c", c.variant_c);
  b.field("offline_teacher", c.offline_teacher);
  b.field("toggle.f3d", c.toggles.f3d);
  b.field("toggle.cls", c.toggles.cls);
  b.field("toggle.b3d", c.toggles.b3d);
  b.field("toggle.pe", c.toggles.pe);
  b.field("toggle.f2d", c.toggles.f2d);
  b.field("toggle.b2d", c.toggles.b2d);
  b.field("eval.batch", c.eval_batch);
  b.field("eval.val_scenes", c.val_scenes);
}

std::vector<const SceneSample*> pointers(const std::vector<SceneSample>& v, std::size_t begin, std::size_t end) {
  std::vector<const SceneSample*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&v[i]);
  return out;
}

struct TeacherForcing {
  std::vector<std::vector<int>> prefixes;
  std::vector<int> scene;
  std::vector<int> targets;
};

TeacherForcing teacher_forcing(std::span<const SceneSample* const> batch) {
  TeacherForcing tf;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    for (const auto& ref : batch[s]->references) {
      if (ref.size() < 2) throw FormatError("scene " + batch[s]->scene_id + " has a reference shorter than 2 tokens");
      tf.prefixes.emplace_back(ref.begin(), ref.end() - 1);
      tf.scene.push_back(static_cast<int>(s));
      tf.targets.insert(tf.targets.end(), ref.begin() + 1, ref.end());
    }
  }
  return tf;
}

void check_vocabulary(const std::vector<SceneSample>& split, std::size_t n, const Vocabulary& vocab) {
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& ref : split[i].references) {
      for (int t : ref) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab.size()) {
          throw VocabularyError("scene " + split[i].scene_id + ": token id " + std::to_string(t) +
                                " outside vocabulary of " + std::to_string(vocab.size()));
        }
      }
    }
  }
}

// Teacher encoder with the student's features injected between layers.
std::vector<Var<float>> teacher_layers(Graph<float>& g, Models& models, const RunConfig& cfg,
                                       std::span<const SceneSample* const> batch, const ObjectLayout& layout,
                                       const std::vector<Var<float>>& student_layers, const FusionConfig& fusion,
                                       const std::vector<std::vector<int>>& indicators) {
  auto& teacher = *models.teacher;
  Var<float> tokens = assemble_tokens<float>(g, batch, Modality::kMulti, teacher.input, cfg.toggles);
  LayerInputHook<float> hook;
  if (fusion.mode != FusionMode::kOff) {
    hook = [&](int next, Var<float> prev) {
      return fuse<float>(g, student_layers.at(static_cast<std::size_t>(next - 1)), prev, fusion, models.fusion,
                         next - 1, layout, indicators.at(static_cast<std::size_t>(next - 1)),
                         cfg.model.heads);
    };
  }
  return encode<float>(g, tokens, teacher.encoder, layout, cfg.model, hook);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  fusion.validate();
  if (!(optimizer.lr > 0.0)) throw ConfigError("optim.lr must be > 0");
  if (optimizer.batch_size < 1) throw ConfigError("optim.batch_size must be >= 1");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
    throw ConfigError("optim betas must lie in [0, 1)");
  if (!(optimizer.eps > 0.0)) throw ConfigError("optim.eps must be > 0");
  if (schedule.epochs < 1) throw ConfigError("schedule.epochs must be >= 1");
  if (schedule.decay_every < 1) throw ConfigError("schedule.decay_every must be >= 1");
  if (!(schedule.lr_decay_factor > 0.0)) throw ConfigError("schedule.lr_decay_factor must be > 0");
  if (schedule.ce_epochs < 0) throw ConfigError("schedule.ce_epochs must be >= 0");
  if (weights.alpha < 0 || weights.beta < 0 || weights.gamma < 0) throw ConfigError("loss weights must be >= 0");
  if (variant_c && reward_samples < 2) throw ConfigError("loss.reward_samples must be >= 2");
  if (eval_batch < 1) throw ConfigError("eval.batch must be >= 1");
  if (val_scenes < 0) throw ConfigError("eval.val_scenes must be >= 0");
  if (offline_teacher && fusion.mode != FusionMode::kOff)
    throw ConfigError("offline_teacher trains without fusion; set fusion.mode = off");
}

double RunConfig::lr_at(int epoch) const {
  return optimizer.lr * std::pow(schedule.lr_decay_factor, epoch / schedule.decay_every);
}

bool RunConfig::uses_teacher() const {
  return fusion.mode != FusionMode::kOff || flags.align || flags.ce_teacher || offline_teacher || teacher_reward;
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv;
  RunConfig copy = *this;
  auto b = FieldBinder::writer(kv);
  bind(b, copy);
  return kv;
}

RunConfig RunConfig::from_key_values(const KeyValues& kv, RunConfig base) {
  const KeyValues known = base.to_key_values();
  for (const auto& [key, value] : kv.entries()) {
    if (key.rfind("data.", 0) == 0) continue;
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  auto b = FieldBinder::reader(kv);
  bind(b, base);
  return base;
}

RunConfig RunConfig::from_key_values(const KeyValues& kv) { return from_key_values(kv, RunConfig{}); }

Models Models::create(const RunConfig& cfg, bool with_teacher) {
  Models m;
  Rng student_rng = derive_rng(cfg.seed, streams::kStudentInit);
  m.student = CaptionNetwork<float>::create(cfg.model, Modality::k3d, student_rng);
  if (with_teacher) {
    Rng teacher_rng = derive_rng(cfg.seed, streams::kTeacherInit);
    m.teacher = CaptionNetwork<float>::create(cfg.model, Modality::kMulti, teacher_rng);
    Rng fusion_rng = derive_rng(cfg.seed, streams::kFusionInit);
    m.fusion = FusionParams<float>::create(cfg.fusion, cfg.model, fusion_rng);
  }
  m.visit([](const std::string&, Tensor<float>& t) {
    if (!t.empty()) t.set_requires_grad(true);
  });
  return m;
}

void adam_step(Models& models, AdamState& state, const OptimizerConfig& opt, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(opt.beta1), b2 = static_cast<float>(opt.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(opt.eps);
  models.visit([&](const std::string& name, Tensor<float>& p) {
    if (p.empty() || !p.requires_grad() || !p.has_grad()) return;
    auto [mit, m_new] = state.m.try_emplace(name, p.shape());
    auto [vit, v_new] = state.v.try_emplace(name, p.shape());
    auto m = mit->second.data();
    auto v = vit->second.data();
    auto w = p.data();
    auto gr = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * gr[i];
      v[i] = b2 * v[i] + (1.0f - b2) * gr[i] * gr[i];
      w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
    }
    p.clear_grad();
  });
}

Checkpoint make_checkpoint(const RunConfig& cfg, const Vocabulary& vocab, Models& models, const AdamState& adam,
                           int epoch, const std::string& rng_state) {
  Checkpoint c;
  c.config = cfg;
  c.vocab = vocab;
  c.epoch = epoch;
  c.optimizer = adam;
  c.rng_state = rng_state;
  models.visit([&](const std::string& name, Tensor<float>& t) {
    if (t.empty()) return;
    Tensor<float> copy(t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
    c.tensors.emplace_back(name, std::move(copy));
  });
  return c;
}

Models restore_models(const Checkpoint& ckpt, const RunConfig& cfg) {
  std::map<std::string, const Tensor<float>*> stored;
  bool has_teacher = false;
  for (const auto& [name, t] : ckpt.tensors) {
    stored[name] = &t;
    if (name.rfind("teacher.", 0) == 0) has_teacher = true;
  }
  Models m = Models::create(cfg, has_teacher);
  std::set<std::string> used;
  m.visit([&](const std::string& name, Tensor<float>& t) {
    if (t.empty()) return;
    auto it = stored.find(name);
    if (it == stored.end()) {
      // fusion weights can be dropped together with the teacher
      if (name.rfind("fusion.", 0) == 0 && !has_teacher) return;
      throw FormatError("checkpoint lacks tensor " + name);
    }
    if (it->second->shape() != t.shape()) {
      throw DimensionError("tensor " + name + ": checkpoint shape " + shape_string(it->second->shape()) +
                           " but the configuration expects " + shape_string(t.shape()));
    }
    std::copy(it->second->data().begin(), it->second->data().end(), t.data().begin());
    used.insert(name);
  });
  for (const auto& [name, t] : stored) {
    if (!used.count(name) && name.rfind("fusion.", 0) != 0) {
      throw DimensionError("tensor " + name + " in the checkpoint has no counterpart in the configuration");
    }
  }
  return m;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write("XT2C", 4);
  write_u32(out, Checkpoint::kVersion);
  write_string(out, ckpt.config.to_text());
  std::string vocab;
  for (const auto& w : ckpt.vocab.words()) vocab += w + "\n";
  write_string(out, vocab);
  write_u32(out, static_cast<std::uint32_t>(ckpt.epoch));
  write_string(out, ckpt.rng_state);
  write_u64(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) write_tensor(out, name, t);
  write_u64(out, ckpt.optimizer.step);
  write_u64(out, ckpt.optimizer.m.size());
  for (const auto& [name, m] : ckpt.optimizer.m) {
    write_tensor(out, name, m);
    write_tensor(out, name, ckpt.optimizer.v.at(name));
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  char magic[4] = {};
  if (!in.read(magic, 4) || std::string(magic, 4) != "XT2C") throw FormatError(path.string() + ": not a checkpoint");
  const std::uint32_t version = read_u32(in);
  if (version != Checkpoint::kVersion) {
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(Checkpoint::kVersion));
  }
  Checkpoint c;
  c.config = RunConfig::from_key_values(KeyValues::parse(read_string(in), path.string()));
  std::vector<std::string> words;
  std::istringstream vocab(read_string(in));
  for (std::string w; std::getline(vocab, w);) words.push_back(w);
  c.vocab = Vocabulary(std::move(words));
  c.epoch = static_cast<int>(read_u32(in));
  c.rng_state = read_string(in);
  const std::uint64_t n = read_u64(in);
  for (std::uint64_t i = 0; i < n; ++i) c.tensors.push_back(read_tensor(in));
  c.optimizer.step = read_u64(in);
  const std::uint64_t k = read_u64(in);
  for (std::uint64_t i = 0; i < k; ++i) {
    auto m = read_tensor(in);
    auto v = read_tensor(in);
    if (m.first != v.first) throw FormatError("optimizer state out of order at " + m.first);
    c.optimizer.m.emplace(m.first, std::move(m.second));
    c.optimizer.v.emplace(v.first, std::move(v.second));
  }
  return c;
}

std::string to_string(EvalMode mode) { return mode == EvalMode::kStudent3d ? "student-3d" : "teacher-multi"; }

EvalMode parse_eval_mode(const std::string& text) {
  if (text == "student-3d" || text == "student_3d") return EvalMode::kStudent3d;
  if (text == "teacher-multi" || text == "teacher_multi") return EvalMode::kTeacherMulti;
  throw ConfigError("unknown evaluation mode '" + text + "' (student-3d or teacher-multi)");
}

Box3D perturb_box(const Box3D& box, double sigma, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Box3D out = box;
  for (int i = 0; i < 3; ++i) out.center[i] += sigma * n(rng);
  for (int i = 0; i < 3; ++i) out.size[i] *= std::exp(sigma * n(rng));
  return out;
}

EvalResult evaluate_models(Models& models, const RunConfig& cfg, const Vocabulary& vocab,
                           const std::vector<SceneSample>& split, const EvalOptions& options) {
  const std::size_t n = options.limit > 0 ? std::min(options.limit, split.size()) : split.size();
  check_vocabulary(split, n, vocab);
  const bool teacher_mode = options.mode == EvalMode::kTeacherMulti;
  if (teacher_mode) {
    if (!models.teacher) throw ConfigError("teacher-multi evaluation needs teacher weights");
    for (std::size_t i = 0; i < n; ++i) {
      if (!split[i].has_2d()) throw ModalityError("scene " + split[i].scene_id + " has no 2D fields");
    }
  }
  if (options.batch < 1) throw ConfigError("evaluation batch must be >= 1");

  GenerateOptions gen;
  gen.mode = DecodeMode::kGreedy;
  gen.max_len = cfg.model.max_len;
  Rng noise = derive_rng(options.seed, 0x10e);

  EvalResult result;
  Corpus corpus;
  std::size_t colors_right = 0;
  bool have_latent = n > 0;
  const std::size_t batch = static_cast<std::size_t>(options.batch);
  for (std::size_t b = 0; b < n; b += batch) {
    const std::size_t e = std::min(n, b + batch);
    std::vector<SceneSample> stripped;
    std::vector<const SceneSample*> ptrs;
    if (teacher_mode) {
      ptrs = pointers(split, b, e);
    } else {
      // the student path must not see 2D data, so it never gets any
      for (std::size_t i = b; i < e; ++i) {
        SceneSample s = split[i];
        for (auto& o : s.objects) {
          o.f2d.reset();
          o.b2d.reset();
        }
        stripped.push_back(std::move(s));
      }
      ptrs = pointers(stripped, 0, stripped.size());
    }
    Graph<float> g(false);
    EncodedScenes<float> student = encode_scenes<float>(g, models.student, ptrs, cfg.toggles);
    std::vector<Generation> gens;
    if (teacher_mode) {
      const std::vector<std::vector<int>> keep(static_cast<std::size_t>(cfg.model.layers),
                                               std::vector<int>(ptrs.size(), 1));
      EncodedScenes<float> teacher{student.layout,
                                   teacher_layers(g, models, cfg, ptrs, student.layout, student.layers, cfg.fusion,
                                                  keep)};
      gens = generate<float>(g, *models.teacher, teacher, gen);
    } else {
      gens = generate<float>(g, models.student, student, gen);
    }
    for (std::size_t i = 0; i < gens.size(); ++i) {
      const SceneSample& scene = split[b + i];
      CorpusEntry entry;
      entry.candidate = caption_sentence(gens[i].tokens);
      for (const auto& r : scene.references) entry.references.push_back(caption_sentence(r));
      if (options.iou_noise) {
        entry.gt_box = scene.target().b3d;
        entry.pred_box = perturb_box(scene.target().b3d, *options.iou_noise, noise);
      }
      corpus.push_back(std::move(entry));
      if (scene.target().latent) {
        auto c = caption_color(gens[i].tokens, vocab);
        if (c && *c == scene.target().latent->color) ++colors_right;
      } else {
        have_latent = false;
      }
      result.captions.push_back(gens[i].tokens);
    }
  }
  result.report = evaluate_corpus(corpus);
  if (have_latent) result.report.color_accuracy = static_cast<double>(colors_right) / static_cast<double>(n);
  result.report.metadata["mode"] = to_string(options.mode);
  result.report.metadata["scenes"] = std::to_string(n);
  if (options.iou_noise) result.report.metadata["iou_noise"] = format_value(*options.iou_noise);
  return result;
}

MetricReport evaluate(const Checkpoint& ckpt, const std::vector<SceneSample>& split, const EvalOptions& options) {
  Models models = restore_models(ckpt);
  return evaluate_models(models, ckpt.config, ckpt.vocab, split, options).report;
}

double student_ce(Models& models, const RunConfig& cfg, const std::vector<SceneSample>& split, int batch) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < split.size(); b += static_cast<std::size_t>(batch)) {
    const auto ptrs = pointers(split, b, std::min(split.size(), b + static_cast<std::size_t>(batch)));
    Graph<float> g(false);
    EncodedScenes<float> enc = encode_scenes<float>(g, models.student, ptrs, cfg.toggles);
    const TeacherForcing tf = teacher_forcing(ptrs);
    auto dec = decode<float>(g, enc.layers, enc.layout, tf.prefixes, tf.scene, models.student.decoder, cfg.model);
    total += static_cast<double>(caption_ce<float>(dec.logits, tf.targets).value()(0, 0)) *
             static_cast<double>(tf.targets.size());
    count += tf.targets.size();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

std::string EpochLog::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["phase"] = phase;
  j["lr"] = lr;
  j["steps"] = steps;
  j["align"] = mean.align;
  j["ce_student"] = mean.ce_student;
  j["ce_teacher"] = mean.ce_teacher;
  j["cider_reward"] = mean.cider_reward;
  j["mean_reward"] = mean.mean_reward;
  j["total"] = mean.total;
  j["val_cider"] = val_cider;
  j["val_color_accuracy"] = val_color_accuracy;
  j["best"] = best;
  return j.dump();
}

namespace {


CiderScorer scorer_for(const std::vector<SceneSample>& split) {
  std::vector<std::vector<Sentence>> docs;
  docs.reserve(split.size());
  for (const auto& s : split) {
    std::vector<Sentence> refs;
    for (const auto& r : s.references) refs.push_back(caption_sentence(r));
    docs.push_back(std::move(refs));
  }
  return CiderScorer(docs);
}

void accumulate(LossBreakdown& sum, const LossBreakdown& x) {
  sum.align += x.align;
  sum.ce_student += x.ce_student;
  sum.ce_teacher += x.ce_teacher;
  sum.cider_reward += x.cider_reward;
  sum.mean_reward += x.mean_reward;
  sum.total += x.total;
}

LossBreakdown divided(LossBreakdown s, int n) {
  const double d = n > 0 ? static_cast<double>(n) : 1.0;
  s.align /= d;
  s.ce_student /= d;
  s.ce_teacher /= d;
  s.cider_reward /= d;
  s.mean_reward /= d;
  s.total /= d;
  return s;
}

}  // namespace

Trainer::Trainer(RunConfig cfg, Vocabulary vocab, const std::vector<SceneSample>& train,
                 const std::vector<SceneSample>* val)
    : cfg_(std::move(cfg)),
      vocab_(std::move(vocab)),
      train_(train),
      val_(val),
      scorer_(scorer_for(train)),
      shuffle_rng_(derive_rng(cfg_.seed, streams::kShuffle)),
      mask_rng_(derive_rng(cfg_.seed, streams::kMask)),
      sample_rng_(derive_rng(cfg_.seed, streams::kSampling)) {
  if (cfg_.model.vocab_size == 0) cfg_.model.vocab_size = static_cast<int>(vocab_.size());
  if (cfg_.model.vocab_size != static_cast<int>(vocab_.size())) {
    throw VocabularyError("model.vocab_size " + std::to_string(cfg_.model.vocab_size) + " but the vocabulary has " +
                          std::to_string(vocab_.size()) + " words");
  }
  cfg_.validate();
  if (train_.empty()) throw ConfigError("training split is empty");
  check_vocabulary(train_, train_.size(), vocab_);
  models_ = Models::create(cfg_, cfg_.uses_teacher());
}

LossBreakdown Trainer::step(std::span<const SceneSample* const> batch, int epoch, bool force_teacher) {
  Graph<float> g(true);
  const ObjectLayout layout = ObjectLayout::of(batch);
  const TeacherForcing tf = teacher_forcing(batch);

  Var<float> s_tokens = assemble_tokens<float>(g, batch, Modality::k3d, models_.student.input, cfg_.toggles);
  std::vector<Var<float>> s_layers = encode<float>(g, s_tokens, models_.student.encoder, layout, cfg_.model);
  auto s_dec = decode<float>(g, s_layers, layout, tf.prefixes, tf.scene, models_.student.decoder, cfg_.model);

  LossFlags flags = cfg_.flags;
  flags.cider = cfg_.reward_active(epoch);
  LossTerms<float> terms;
  if (flags.ce_student) terms.ce_student = caption_ce<float>(s_dec.logits, tf.targets);

  const bool run_teacher = models_.teacher && (force_teacher || cfg_.uses_teacher());
  if (!run_teacher) {
    flags.align = false;
    flags.ce_teacher = false;
  }
  if (teacher_frozen_) flags.ce_teacher = false;

  std::vector<Var<float>> t_layers;
  if (run_teacher) {
    FusionConfig fusion = cfg_.fusion;
    if (teacher_frozen_) fusion.mode = FusionMode::kOff;
    // one indicator per scene and fused level
    std::vector<std::vector<int>> indicators;
    for (int l = 0; l + 1 < cfg_.model.layers; ++l) {
      indicators.push_back(draw_mask_indicators(fusion, batch.size(), mask_rng_));
    }
    t_layers = teacher_layers(g, models_, cfg_, batch, layout, s_layers, fusion, indicators);
    auto t_dec = decode<float>(g, t_layers, layout, tf.prefixes, tf.scene, models_.teacher->decoder, cfg_.model);
    if (flags.ce_teacher) terms.ce_teacher = caption_ce<float>(t_dec.logits, tf.targets);
    if (flags.align) terms.align = alignment_loss<float>(s_dec.hidden, t_dec.hidden, !cfg_.align_bidirectional || teacher_frozen_);
  }

  RewardStats stats;
  if (flags.cider) {
    const EncodedScenes<float> enc{layout, s_layers};
    terms.cider = cider_reward_loss<float>(g, models_.student, enc, batch, scorer_, cfg_.reward_samples, sample_rng_,
                                           &stats);
    if (cfg_.teacher_reward && run_teacher && !teacher_frozen_) {
      const EncodedScenes<float> tenc{layout, t_layers};
      terms.cider = add(terms.cider, cider_reward_loss<float>(g, *models_.teacher, tenc, batch, scorer_,
                                                               cfg_.reward_samples, sample_rng_, nullptr));
    }
  }

  LossBreakdown breakdown;
  Var<float> total = total_loss<float>(g, terms, cfg_.weights, flags, &breakdown);
  breakdown.mean_reward = stats.mean_reward;
  if (!std::isfinite(breakdown.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at epoch " << epoch << ": align=" << breakdown.align << " ce_student=" << breakdown.ce_student
        << " ce_teacher=" << breakdown.ce_teacher << " cider=" << breakdown.cider_reward;
    throw TrainingError(msg.str());
  }
  g.backward(total);
  adam_step(models_, adam_, cfg_.optimizer, cfg_.lr_at(epoch));
  return breakdown;
}

EpochLog Trainer::run_epoch(int epoch) {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), shuffle_rng_);
  EpochLog log;
  log.epoch = epoch;
  log.lr = cfg_.lr_at(epoch);
  LossBreakdown sum;
  const std::size_t bs = static_cast<std::size_t>(cfg_.optimizer.batch_size);
  for (std::size_t b = 0; b < order.size(); b += bs) {
    std::vector<const SceneSample*> batch;
    for (std::size_t i = b; i < std::min(order.size(), b + bs); ++i) batch.push_back(&train_[order[i]]);
    accumulate(sum, step(batch, epoch));
    ++log.steps;
  }
  log.mean = divided(sum, log.steps);
  if (val_ && !val_->empty()) {
    EvalOptions opts;
    opts.batch = cfg_.eval_batch;
    opts.limit = static_cast<std::size_t>(cfg_.val_scenes);
    const EvalResult r = evaluate_models(models_, cfg_, vocab_, *val_, opts);
    log.val_cider = r.report.cider;
    log.val_color_accuracy = r.report.color_accuracy.value_or(0.0);
  }
  return log;
}

std::string Trainer::rng_state() const {
  std::ostringstream s;
  s << shuffle_rng_ << '\n' << mask_rng_ << '\n' << sample_rng_;
  return s.str();
}

Checkpoint Trainer::checkpoint(int epoch) { return make_checkpoint(cfg_, vocab_, models_, adam_, epoch, rng_state()); }

void Trainer::train_teacher_offline(const std::function<void(const EpochLog&)>& on_epoch) {
  auto& teacher = *models_.teacher;
  AdamState adam;
  Rng shuffle = derive_rng(cfg_.seed, streams::kTeacherShuffle);
  const std::size_t bs = static_cast<std::size_t>(cfg_.optimizer.batch_size);
  for (int epoch = 0; epoch < cfg_.schedule.epochs; ++epoch) {
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle);
    EpochLog log;
    log.epoch = epoch;
    log.phase = "teacher";
    log.lr = cfg_.lr_at(epoch);
    LossBreakdown sum;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      std::vector<const SceneSample*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + bs); ++i) batch.push_back(&train_[order[i]]);
      Graph<float> g(true);
      const ObjectLayout layout = ObjectLayout::of(batch);
      const TeacherForcing tf = teacher_forcing(batch);
      Var<float> tokens = assemble_tokens<float>(g, batch, Modality::kMulti, teacher.input, cfg_.toggles);
      auto layers = encode<float>(g, tokens, teacher.encoder, layout, cfg_.model);
      auto dec = decode<float>(g, layers, layout, tf.prefixes, tf.scene, teacher.decoder, cfg_.model);
      LossTerms<float> terms;
      terms.ce_teacher = caption_ce<float>(dec.logits, tf.targets);
      LossFlags flags{false, false, true, false};
      LossBreakdown br;
      Var<float> total = total_loss<float>(g, terms, cfg_.weights, flags, &br);
      if (!std::isfinite(br.total)) throw TrainingError("non-finite teacher loss at epoch " + std::to_string(epoch));
      g.backward(total);
      adam_step(models_, adam, cfg_.optimizer, cfg_.lr_at(epoch));
      accumulate(sum, br);
      ++log.steps;
    }
    log.mean = divided(sum, log.steps);
    if (on_epoch) on_epoch(log);
  }
  teacher.set_requires_grad(false);
  teacher_frozen_ = true;
}

TrainResult Trainer::run(const std::function<void(const EpochLog&)>& on_epoch,
                         const std::filesystem::path& diagnostic_dir) {
  TrainResult result;
  auto record = [&](const EpochLog& log) {
    result.logs.push_back(log);
    if (on_epoch) on_epoch(log);
  };
  int epoch = 0;
  try {
    if (cfg_.offline_teacher) train_teacher_offline(record);
    double best = -1.0;
    bool have_best = false;
    for (; epoch < cfg_.schedule.epochs; ++epoch) {
      EpochLog log = run_epoch(epoch);
      if (!have_best || log.val_cider > best) {
        have_best = true;
        best = log.val_cider;
        log.best = true;
        result.best = checkpoint(epoch + 1);
      }
      record(log);
    }
  } catch (const TrainingError&) {
    if (!diagnostic_dir.empty()) {
      std::filesystem::create_directories(diagnostic_dir);
      save_checkpoint(checkpoint(epoch), diagnostic_dir / "diverged.ckpt");
    }
    throw;
  }
  result.last = checkpoint(cfg_.schedule.epochs);
  if (!val_ || val_->empty()) result.best = result.last;
  return result;
}

TrainResult train(const RunConfig& cfg, const Vocabulary& vocab, const std::vector<SceneSample>& train_split,
                  const std::vector<SceneSample>& val_split, const std::function<void(const EpochLog&)>& on_epoch,
                  const std::filesystem::path& diagnostic_dir) {
  Trainer t(cfg, vocab, train_split, &val_split);
  return t.run(on_epoch, diagnostic_dir);
}

std::vector<std::string> known_variants() {
  return {"full",      "baseline",  "no_align",        "no_cmf",    "concat",
          "no_mask",   "attention", "offline_teacher", "variant_c", "attr:-f3d,-cls,-b3d,-pe,-f2d,-b2d"};
}

Variant parse_variant(const std::string& name) {
  std::vector<std::function<void(RunConfig&)>> deltas;
  for (const std::string& part : split_list(name, '+')) {
    if (part == "full") {
      deltas.push_back([](RunConfig&) {});
    } else if (part == "baseline") {
      deltas.push_back([](RunConfig& c) {
        c.fusion.mode = FusionMode::kOff;
        c.flags.align = false;
        c.flags.ce_teacher = false;
      });
    } else if (part == "no_align") {
      deltas.push_back([](RunConfig& c) { c.flags.align = false; });
    } else if (part == "no_cmf") {
      deltas.push_back([](RunConfig& c) { c.fusion.mode = FusionMode::kOff; });
    } else if (part == "concat") {
      deltas.push_back([](RunConfig& c) { c.fusion.mode = FusionMode::kConcat; });
    } else if (part == "no_mask") {
      deltas.push_back([](RunConfig& c) { c.fusion.mode = FusionMode::kAddUnmasked; });
    } else if (part == "attention") {
      deltas.push_back([](RunConfig& c) { c.fusion.mode = FusionMode::kAttention; });
    } else if (part == "offline_teacher") {
      deltas.push_back([](RunConfig& c) {
        c.offline_teacher = true;
        c.fusion.mode = FusionMode::kOff;
        c.flags.align = true;
      });
    } else if (part == "variant_c") {
      deltas.push_back([](RunConfig& c) { c.variant_c = true; });
    } else if (part.rfind("attr:", 0) == 0) {
      std::vector<std::pair<std::string, bool>> changes;
      for (const std::string& item : split_list(part.substr(5), ',')) {
        if (item.size() < 2 || (item[0] != '-' && item[0] != '+')) {
          throw ConfigError("attribute toggle '" + item + "' must look like -f3d or +f2d");
        }
        const std::string attr = item.substr(1);
        static const std::set<std::string> names = {"f3d", "cls", "b3d", "pe", "f2d", "b2d"};
        if (!names.count(attr)) throw ConfigError("unknown attribute '" + attr + "'");
        changes.emplace_back(attr, item[0] == '+');
      }
      deltas.push_back([changes](RunConfig& c) {
        for (const auto& [attr, on] : changes) {
          if (attr == "f3d") c.toggles.f3d = on;
          if (attr == "cls") c.toggles.cls = on;
          if (attr == "b3d") c.toggles.b3d = on;
          if (attr == "pe") c.toggles.pe = on;
          if (attr == "f2d") c.toggles.f2d = on;
          if (attr == "b2d") c.toggles.b2d = on;
        }
      });
    } else {
      throw ConfigError("unknown ablation variant '" + part + "'");
    }
  }
  if (deltas.empty()) throw ConfigError("empty ablation variant");
  return Variant{name, [deltas](RunConfig& c) {
                   for (const auto& d : deltas) d(c);
                 }};
}

int thread_budget() {
  if (const char* env = std::getenv("XT2C_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<int>(std::min<long>(v, 256));
  }
  return 1;
}

std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds, const AblationData& data, int threads,
                                const std::function<void(const AblationRow&)>& on_row) {
  if (!data.vocab || !data.train || !data.val || !data.test) throw ConfigError("ablate: missing data");
  std::vector<Variant> parsed;
  for (const auto& v : variants) parsed.push_back(parse_variant(v));
  const std::size_t jobs = parsed.size() * seeds.size();
  std::vector<AblationRow> rows(jobs);
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  std::mutex report;
  auto worker = [&]() {
    for (std::size_t j = next++; j < jobs; j = next++) {
      try {
        const Variant& v = parsed[j / seeds.size()];
        RunConfig cfg = base;
        cfg.seed = seeds[j % seeds.size()];
        v.apply(cfg);
        TrainResult r = train(cfg, *data.vocab, *data.train, *data.val);
        EvalOptions opts;
        opts.batch = cfg.eval_batch;
        rows[j] = AblationRow{v.name, cfg.seed, evaluate(r.best, *data.test, opts)};
        if (on_row) {
          std::lock_guard<std::mutex> lock(report);
          on_row(rows[j]);
        }
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(jobs)));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::vector<std::string> columns = {"cider", "bleu4", "rouge_l", "color_accuracy"};
  std::set<std::string> extra;
  for (const auto& r : rows) {
    for (const auto& [metric, by_k] : r.report.m_at_iou) {
      for (const auto& [k, v] : by_k) extra.insert(metric + "@" + format_value(k) + "IoU");
    }
  }
  columns.insert(columns.end(), extra.begin(), extra.end());
  auto value = [](const MetricReport& m, const std::string& col) -> double {
    if (col == "cider") return m.cider;
    if (col == "bleu4") return m.bleu4;
    if (col == "rouge_l") return m.rouge_l;
    if (col == "color_accuracy") return m.color_accuracy.value_or(std::nan(""));
    const auto at = col.find('@');
    const std::string metric = col.substr(0, at);
    const double k = std::stod(col.substr(at + 1, col.size() - at - 4));
    for (const auto& [kk, v] : m.m_at_iou.at(metric)) {
      if (format_value(kk) == format_value(k)) return v;
    }
    return std::nan("");
  };
  std::ostringstream out;
  out << "variant,seed";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRow*>> groups;
  for (const auto& r : rows) {
    out << r.variant << ',' << r.seed;
    for (const auto& c : columns) out << ',' << format_value(value(r.report, c));
    out << '\n';
    if (!groups.count(r.variant)) order.push_back(r.variant);
    groups[r.variant].push_back(&r);
  }
  for (const auto& name : order) {
    const auto& g = groups[name];
    std::vector<double> mean(columns.size(), 0.0), sd(columns.size(), 0.0);
    for (std::size_t c = 0; c < columns.size(); ++c) {
      for (const auto* r : g) mean[c] += value(r->report, columns[c]);
      mean[c] /= static_cast<double>(g.size());
      for (const auto* r : g) sd[c] += std::pow(value(r->report, columns[c]) - mean[c], 2);
      sd[c] = g.size() > 1 ? std::sqrt(sd[c] / static_cast<double>(g.size() - 1)) : 0.0;
    }
    out << name << ",mean";
    for (double v : mean) out << ',' << format_value(v);
    out << '\n' << name << ",sd";
    for (double v : sd) out << ',' << format_value(v);
    out << '\n';
  }
  return out.str();
}

}  // namespace xt2c
