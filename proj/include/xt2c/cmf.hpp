#pragma once

#include "xt2c/transformer.hpp"

#include <span>
#include <string>
#include <vector>

namespace xt2c {

enum class FusionMode { kAddMasked, kAddUnmasked, kConcat, kAttention, kOff };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& text);

struct FusionConfig {
  FusionMode mode = FusionMode::kAddMasked;
  double mask_prob = 0.2;  // probability that the teacher term is dropped
  // Detach the student features before injecting them into the teacher, so
  // teacher losses no longer reach the student encoder.
  bool stop_student_gradient = false;

  void validate() const;
};

// Extra weights used by the concat and attention variants, one set per fused
// encoder level (layers 1 .. L-1).
template <typename T>
struct FusionParams {
  std::vector<Linear<T>> concat;
  std::vector<MultiHeadAttentionParams<T>> attention;

  static FusionParams create(const FusionConfig& cfg, const ModelConfig& model, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < concat.size(); ++l) concat[l].visit(prefix + ".concat" + std::to_string(l), f);
    for (std::size_t l = 0; l < attention.size(); ++l) attention[l].visit(prefix + ".attention" + std::to_string(l), f);
  }
};

// One indicator per scene: 1 keeps the teacher term, 0 masks it (drawn with
// probability p). Only kAddMasked consumes randomness.
std::vector<int> draw_mask_indicators(const FusionConfig& cfg, std::size_t scenes, Rng& rng);

// Input of the teacher's next encoder layer given the student and teacher
// outputs of the same level. `level` is the 0-based index of the fused
// output (0 .. L-2). The student features are never modified.
template <typename T>
Var<T> fuse(Graph<T>& g, Var<T> student, Var<T> teacher, const FusionConfig& cfg, FusionParams<T>& params, int level,
            const ObjectLayout& layout, std::span<const int> indicators, int heads);

}  // namespace xt2c
