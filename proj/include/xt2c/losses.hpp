#pragma once

#include "xt2c/metrics.hpp"
#include "xt2c/transformer.hpp"

#include <span>
#include <vector>

namespace xt2c {

struct LossWeights {
  double alpha = 1.0;  // alignment
  double beta = 1.0;   // cross entropy
  double gamma = 0.1;  // CIDEr-D reward
};

struct LossFlags {
  bool align = true;
  bool ce_student = true;
  bool ce_teacher = true;
  bool cider = false;
};

struct LossBreakdown {
  double align = 0.0;
  double ce_student = 0.0;
  double ce_teacher = 0.0;
  double cider_reward = 0.0;  // policy-gradient surrogate value
  double mean_reward = 0.0;   // mean sampled CIDEr-D, for logging
  double total = 0.0;
};

inline constexpr double kHuberDelta = 1.0;

// Mean Huber penalty between decoder features. With detach_teacher the
// teacher side is a constant target.
template <typename T>
Var<T> alignment_loss(Var<T> student, Var<T> teacher, bool detach_teacher = true);

// Mean negative log-likelihood over rows whose target is not pad_id.
template <typename T>
Var<T> caption_ce(Var<T> logits, std::span<const int> targets, int pad_id = tokens::kPad);

// Mean-baselined advantages r_i - mean(r) for each group of k consecutive
// rewards.
std::vector<double> mean_baseline_advantages(std::span<const double> rewards, int k);

// Token ids of a caption as metric tokens, without BOS/EOS/PAD.
Sentence caption_sentence(std::span<const int> ids);

struct RewardStats {
  double mean_reward = 0.0;
  std::vector<double> rewards;
};

// Self-critical CIDEr-D objective over a batch: k sampled captions per scene
// scored against the scene's references, baselined by the mean of the k
// rewards. The loss is -(1/(kB)) sum_i (r_i - b) sum_t log p(token_it); only
// the log-probabilities carry gradient.
template <typename T>
Var<T> cider_reward_loss(Graph<T>& g, CaptionNetwork<T>& net, const EncodedScenes<T>& encoded,
                         std::span<const SceneSample* const> scenes, const CiderScorer& scorer, int k, Rng& rng,
                         RewardStats* stats = nullptr);

template <typename T>
struct LossTerms {
  Var<T> align;
  Var<T> ce_student;
  Var<T> ce_teacher;
  Var<T> cider;
};

// alpha*align + beta*(ce_student + ce_teacher) + gamma*cider over the active
// terms; inactive or missing terms contribute nothing.
template <typename T>
Var<T> total_loss(Graph<T>& g, const LossTerms<T>& terms, const LossWeights& w, const LossFlags& active,
                  LossBreakdown* breakdown = nullptr);

}  // namespace xt2c
