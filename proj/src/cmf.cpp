#include "xt2c/cmf.hpp"

namespace xt2c {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kAddMasked: return "add_masked";
    case FusionMode::kAddUnmasked: return "add_unmasked";
    case FusionMode::kConcat: return "concat";
    case FusionMode::kAttention: return "attention";
    case FusionMode::kOff: return "off";
  }
  return "off";
}

FusionMode parse_fusion_mode(const std::string& text) {
  for (FusionMode m : {FusionMode::kAddMasked, FusionMode::kAddUnmasked, FusionMode::kConcat, FusionMode::kAttention,
                       FusionMode::kOff}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown fusion mode '" + text + "'");
}

void FusionConfig::validate() const {
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ConfigError("fusion: mask probability must lie in [0, 1]");
}

template <typename T>
FusionParams<T> FusionParams<T>::create(const FusionConfig& cfg, const ModelConfig& model, Rng& rng) {
  FusionParams p;
  const auto d = static_cast<std::size_t>(model.width);
  for (int l = 0; l + 1 < model.layers; ++l) {
    if (cfg.mode == FusionMode::kConcat) p.concat.push_back(Linear<T>::create(2 * d, d, true, rng));
    if (cfg.mode == FusionMode::kAttention) {
      p.attention.push_back(MultiHeadAttentionParams<T>::create(model.width, 0, rng));
    }
  }
  return p;
}

std::vector<int> draw_mask_indicators(const FusionConfig& cfg, std::size_t scenes, Rng& rng) {
  std::vector<int> keep(scenes, 1);
  if (cfg.mode != FusionMode::kAddMasked) return keep;
  std::bernoulli_distribution masked(cfg.mask_prob);
  for (auto& k : keep) k = masked(rng) ? 0 : 1;
  return keep;
}

template <typename T>
Var<T> fuse(Graph<T>& g, Var<T> student, Var<T> teacher, const FusionConfig& cfg, FusionParams<T>& params, int level,
            const ObjectLayout& layout, std::span<const int> indicators, int heads) {
  if (cfg.mode == FusionMode::kOff) return teacher;
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw DimensionError("fuse: student and teacher features differ in shape");
  }
  if (cfg.stop_student_gradient) student = detach(student);
  switch (cfg.mode) {
    case FusionMode::kAddMasked: {
      if (indicators.size() != layout.scenes()) throw DimensionError("fuse: one indicator per scene required");
      std::vector<T> factors(static_cast<std::size_t>(teacher.rows()));
      for (std::size_t s = 0; s < layout.scenes(); ++s) {
        for (Eigen::Index r = 0; r < layout.count[s]; ++r) {
          factors[static_cast<std::size_t>(layout.begin[s] + r)] = static_cast<T>(indicators[s]);
        }
      }
      return add(student, scale_rows<T>(teacher, factors));
    }
    case FusionMode::kAddUnmasked:
      return add(student, teacher);
    case FusionMode::kConcat: {
      const Var<T> parts[] = {student, teacher};
      return params.concat.at(static_cast<std::size_t>(level)).apply(g, concat_cols<T>(parts));
    }
    case FusionMode::kAttention: {
      std::vector<AttentionSegment> segs;
      for (std::size_t s = 0; s < layout.scenes(); ++s) {
        segs.push_back({layout.begin[s], layout.count[s], layout.begin[s], layout.count[s], false});
      }
      return add(teacher, params.attention.at(static_cast<std::size_t>(level)).apply(g, teacher, student, segs, heads));
    }
    case FusionMode::kOff:
      break;
  }
  return teacher;
}

#define XT2C_INSTANTIATE_CMF(T)                                                                               \
  template struct FusionParams<T>;                                                                            \
  template Var<T> fuse(Graph<T>&, Var<T>, Var<T>, const FusionConfig&, FusionParams<T>&, int, const ObjectLayout&, \
                       std::span<const int>, int);

XT2C_INSTANTIATE_CMF(float)
XT2C_INSTANTIATE_CMF(double)

}  // namespace xt2c
