#include "xt2c/losses.hpp"

#include <numeric>

namespace xt2c {

template <typename T>
Var<T> alignment_loss(Var<T> student, Var<T> teacher, bool detach_teacher) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw DimensionError("alignment_loss: student and teacher features differ in shape");
  }
  return huber_mean(student, detach_teacher ? detach(teacher) : teacher, static_cast<T>(kHuberDelta));
}

template <typename T>
Var<T> caption_ce(Var<T> logits, std::span<const int> targets, int pad_id) {
  std::size_t counted = 0;
  for (int t : targets) counted += t != pad_id ? 1 : 0;
  if (counted == 0) throw ConfigError("caption_ce: every target is padding, the average is undefined");
  std::vector<T> weights(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    weights[i] = targets[i] != pad_id ? T(1) / static_cast<T>(counted) : T(0);
  }
  return weighted_nll<T>(logits, targets, weights);
}

std::vector<double> mean_baseline_advantages(std::span<const double> rewards, int k) {
  if (k < 2) throw ConfigError("mean-baseline reward needs at least 2 samples per scene");
  if (rewards.size() % static_cast<std::size_t>(k) != 0) throw DimensionError("rewards are not grouped by k");
  std::vector<double> adv(rewards.size());
  for (std::size_t s = 0; s < rewards.size(); s += static_cast<std::size_t>(k)) {
    const double baseline =
        std::accumulate(rewards.begin() + static_cast<std::ptrdiff_t>(s), rewards.begin() + static_cast<std::ptrdiff_t>(s + k), 0.0) / k;
    for (int i = 0; i < k; ++i) adv[s + i] = rewards[s + i] - baseline;
  }
  return adv;
}

Sentence caption_sentence(std::span<const int> ids) {
  Sentence s;
  for (int t : ids) {
    if (t == tokens::kBos || t == tokens::kPad) continue;
    if (t == tokens::kEos) break;
    s.push_back(std::to_string(t));
  }
  return s;
}

template <typename T>
Var<T> cider_reward_loss(Graph<T>& g, CaptionNetwork<T>& net, const EncodedScenes<T>& encoded,
                         std::span<const SceneSample* const> scenes, const CiderScorer& scorer, int k, Rng& rng,
                         RewardStats* stats) {
  if (k < 2) throw ConfigError("cider_reward_loss: k must be at least 2");
  if (scenes.size() != encoded.layout.scenes()) throw DimensionError("cider_reward_loss: scene count mismatch");

  // Rollouts run on a detached copy of the encoder outputs.
  Graph<T> sampler(false);
  EncodedScenes<T> frozen{encoded.layout, {}};
  for (const Var<T>& l : encoded.layers) frozen.layers.push_back(sampler.constant(l.value()));
  GenerateOptions opts;
  opts.mode = DecodeMode::kSample;
  opts.samples = k;
  opts.max_len = net.config.max_len;
  const std::vector<Generation> rollouts = generate<T>(sampler, net, frozen, opts, &rng);

  std::vector<double> rewards;
  rewards.reserve(rollouts.size());
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const SceneSample& scene = *scenes[i / static_cast<std::size_t>(k)];
    std::vector<Sentence> refs;
    for (const auto& r : scene.references) refs.push_back(caption_sentence(r));
    rewards.push_back(scorer.score(caption_sentence(rollouts[i].tokens), refs));
  }
  const std::vector<double> adv = mean_baseline_advantages(rewards, k);
  if (stats != nullptr) {
    stats->rewards = rewards;
    stats->mean_reward = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  }

  std::vector<std::vector<int>> prefixes;
  std::vector<int> scene_of;
  std::vector<int> targets;
  std::vector<T> weights;
  const double norm = 1.0 / static_cast<double>(rollouts.size());
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const auto& toks = rollouts[i].tokens;
    prefixes.emplace_back(toks.begin(), toks.end() - 1);
    scene_of.push_back(static_cast<int>(i / static_cast<std::size_t>(k)));
    for (std::size_t t = 1; t < toks.size(); ++t) {
      targets.push_back(toks[t]);
      weights.push_back(static_cast<T>(adv[i] * norm));
    }
  }
  DecoderOutput<T> dec = decode<T>(g, encoded.layers, encoded.layout, prefixes, scene_of, net.decoder, net.config);
  return weighted_nll<T>(dec.logits, targets, weights);
}

template <typename T>
Var<T> total_loss(Graph<T>& g, const LossTerms<T>& terms, const LossWeights& w, const LossFlags& active,
                  LossBreakdown* breakdown) {
  Var<T> total;
  auto accumulate = [&](Var<T> term, bool on, double weight, double* slot) {
    if (!on || !term.valid()) return;
    if (slot != nullptr) *slot = static_cast<double>(term.value()(0, 0));
    Var<T> weighted = scale(term, static_cast<T>(weight));
    total = total.valid() ? add(total, weighted) : weighted;
  };
  LossBreakdown local;
  accumulate(terms.align, active.align, w.alpha, &local.align);
  accumulate(terms.ce_student, active.ce_student, w.beta, &local.ce_student);
  accumulate(terms.ce_teacher, active.ce_teacher, w.beta, &local.ce_teacher);
  accumulate(terms.cider, active.cider, w.gamma, &local.cider_reward);
  if (!total.valid()) total = g.constant(Matrix<T>::Zero(1, 1));
  local.total = static_cast<double>(total.value()(0, 0));
  if (breakdown != nullptr) {
    local.mean_reward = breakdown->mean_reward;
    *breakdown = local;
  }
  return total;
}

#define XT2C_INSTANTIATE_LOSSES(T)                                                                              \
  template Var<T> alignment_loss(Var<T>, Var<T>, bool);                                                         \
  template Var<T> caption_ce(Var<T>, std::span<const int>, int);                                                \
  template Var<T> cider_reward_loss(Graph<T>&, CaptionNetwork<T>&, const EncodedScenes<T>&,                     \
                                    std::span<const SceneSample* const>, const CiderScorer&, int, Rng&,         \
                                    RewardStats*);                                                              \
  template Var<T> total_loss(Graph<T>&, const LossTerms<T>&, const LossWeights&, const LossFlags&, LossBreakdown*);

XT2C_INSTANTIATE_LOSSES(float)
XT2C_INSTANTIATE_LOSSES(double)

}  // namespace xt2c
