#include "xt2c/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace xt2c {

void ModelConfig::validate() const {
  if (layers <= 0 || width <= 0 || heads <= 0 || ff_width <= 0 || max_len <= 0) {
    throw ConfigError("model config: layers, width, heads, ff_width and max_len must be positive");
  }
  if (memory_slots < 0) throw ConfigError("model config: memory_slots must be non-negative");
  if (width % heads != 0) throw ConfigError("model config: heads must divide width");
  if (vocab_size <= tokens::kUnk) throw ConfigError("model config: vocab_size must cover the special tokens");
  if (input.f3d == 0 || input.f2d == 0 || input.classes == 0) {
    throw ConfigError("model config: input widths must be positive");
  }
}

ObjectLayout ObjectLayout::of(std::span<const SceneSample* const> scenes) {
  ObjectLayout layout;
  Eigen::Index row = 0;
  for (const SceneSample* s : scenes) {
    layout.begin.push_back(row);
    layout.count.push_back(static_cast<Eigen::Index>(s->objects.size()));
    row += static_cast<Eigen::Index>(s->objects.size());
  }
  return layout;
}

template <typename T>
MultiHeadAttentionParams<T> MultiHeadAttentionParams<T>::create(int width, int memory_slots, Rng& rng) {
  const auto d = static_cast<std::size_t>(width);
  MultiHeadAttentionParams p;
  p.q = Linear<T>::create(d, d, true, rng);
  p.k = Linear<T>::create(d, d, true, rng);
  p.v = Linear<T>::create(d, d, true, rng);
  p.o = Linear<T>::create(d, d, true, rng);
  if (memory_slots > 0) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(width));
    p.memory_keys = normal_init<T>(static_cast<std::size_t>(memory_slots), d, stddev, rng);
    p.memory_values = normal_init<T>(static_cast<std::size_t>(memory_slots), d, stddev, rng);
  }
  return p;
}

template <typename T>
Var<T> MultiHeadAttentionParams<T>::apply(Graph<T>& g, Var<T> queries, Var<T> context,
                                          std::span<const AttentionSegment> segments, int heads) {
  Var<T> qv = q.apply(g, queries);
  Var<T> kv = k.apply(g, context);
  Var<T> vv = v.apply(g, context);
  Var<T> mk, mv;
  if (!memory_keys.empty()) {
    mk = g.parameter(memory_keys);
    mv = g.parameter(memory_values);
  }
  return o.apply(g, segmented_attention(qv, kv, vv, mk, mv, segments, heads));
}

template <typename T>
EncoderLayerParams<T> EncoderLayerParams<T>::create(const ModelConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.width);
  EncoderLayerParams p;
  p.attention = MultiHeadAttentionParams<T>::create(cfg.width, cfg.memory_slots, rng);
  p.norm_attention = LayerNormParams<T>::create(d);
  p.ff_in = Linear<T>::create(d, static_cast<std::size_t>(cfg.ff_width), true, rng);
  p.ff_out = Linear<T>::create(static_cast<std::size_t>(cfg.ff_width), d, true, rng);
  p.norm_ff = LayerNormParams<T>::create(d);
  return p;
}

template <typename T>
DecoderParams<T> DecoderParams<T>::create(const ModelConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.width);
  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  DecoderParams p;
  p.embedding = normal_init<T>(vocab, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  p.self_attention = MultiHeadAttentionParams<T>::create(cfg.width, 0, rng);
  p.norm_self = LayerNormParams<T>::create(d);
  for (int l = 0; l < cfg.layers; ++l) {
    p.cross.push_back(MultiHeadAttentionParams<T>::create(cfg.width, 0, rng));
    if (cfg.gate == GateMode::kComputed) {
      p.gates.push_back(Linear<T>::create(2 * d, d, true, rng));
    } else {
      p.free_gates.push_back(Tensor<T>({1, d}, T(1) / static_cast<T>(cfg.layers)));
    }
  }
  p.norm_cross = LayerNormParams<T>::create(d);
  p.ff_in = Linear<T>::create(d, static_cast<std::size_t>(cfg.ff_width), true, rng);
  p.ff_out = Linear<T>::create(static_cast<std::size_t>(cfg.ff_width), d, true, rng);
  p.norm_ff = LayerNormParams<T>::create(d);
  p.output = Linear<T>::create(d, vocab, true, rng);
  return p;
}

template <typename T>
Var<T> memory_self_attention(Graph<T>& g, Var<T> x, MultiHeadAttentionParams<T>& p, const ObjectLayout& layout,
                             int heads) {
  std::vector<AttentionSegment> segs;
  segs.reserve(layout.scenes());
  for (std::size_t i = 0; i < layout.scenes(); ++i) {
    segs.push_back({layout.begin[i], layout.count[i], layout.begin[i], layout.count[i], false});
  }
  return p.apply(g, x, x, segs, heads);
}

template <typename T>
std::vector<Var<T>> encode(Graph<T>& g, Var<T> tokens, std::vector<EncoderLayerParams<T>>& layers,
                           const ObjectLayout& layout, const ModelConfig& cfg, const LayerInputHook<T>& hook) {
  std::vector<Var<T>> outputs;
  outputs.reserve(layers.size());
  Var<T> x = tokens;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (l > 0 && hook) x = hook(static_cast<int>(l), x);
    EncoderLayerParams<T>& p = layers[l];
    Var<T> attended = memory_self_attention(g, x, p.attention, layout, cfg.heads);
    Var<T> h = p.norm_attention.apply(g, add(x, attended));
    Var<T> ff = p.ff_out.apply(g, relu(p.ff_in.apply(g, h)));
    x = p.norm_ff.apply(g, add(h, ff));
    outputs.push_back(x);
  }
  return outputs;
}

template <typename T>
Matrix<T> word_position_codes(std::span<const std::vector<int>> prefixes, int width) {
  Eigen::Index rows = 0;
  for (const auto& p : prefixes) rows += static_cast<Eigen::Index>(p.size());
  Matrix<T> codes(rows, width);
  Eigen::Index r = 0;
  for (const auto& p : prefixes) {
    for (std::size_t pos = 0; pos < p.size(); ++pos, ++r) {
      for (int i = 0; i < width; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / width);
        codes(r, i) = static_cast<T>(std::sin(static_cast<double>(pos) * freq));
        if (i + 1 < width) codes(r, i + 1) = static_cast<T>(std::cos(static_cast<double>(pos) * freq));
      }
    }
  }
  return codes;
}

template <typename T>
DecoderOutput<T> decode(Graph<T>& g, std::span<const Var<T>> encoder_layers, const ObjectLayout& layout,
                        std::span<const std::vector<int>> prefixes, std::span<const int> prefix_scene,
                        DecoderParams<T>& params, const ModelConfig& cfg) {
  if (prefixes.size() != prefix_scene.size()) throw DimensionError("decode: one scene index per prefix required");
  if (encoder_layers.size() != params.cross.size()) {
    throw DimensionError("decode: expected " + std::to_string(params.cross.size()) + " encoder layers");
  }
  DecoderOutput<T> out;
  std::vector<int> ids;
  std::vector<AttentionSegment> self_segs, cross_segs;
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    const auto& p = prefixes[i];
    if (p.empty() || p.front() != tokens::kBos) throw ConfigError("decode: prefix must start with BOS");
    for (int t : p) {
      if (t < 0 || t >= cfg.vocab_size) {
        throw VocabularyError("decode: token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg.vocab_size));
      }
      ids.push_back(t);
    }
    const int s = prefix_scene[i];
    if (s < 0 || static_cast<std::size_t>(s) >= layout.scenes()) throw DimensionError("decode: scene index out of range");
    const auto n = static_cast<Eigen::Index>(p.size());
    out.row_begin.push_back(row);
    self_segs.push_back({row, n, row, n, true});
    cross_segs.push_back({row, n, layout.begin[s], layout.count[s], false});
    row += n;
  }

  Var<T> y0 = add_constant(gather_rows<T>(g.parameter(params.embedding), ids),
                           word_position_codes<T>(prefixes, cfg.width));
  Var<T> self = params.self_attention.apply(g, y0, y0, self_segs, cfg.heads);
  Var<T> y = params.norm_self.apply(g, add(y0, self));

  Var<T> meshed;
  for (std::size_t l = 0; l < encoder_layers.size(); ++l) {
    Var<T> ca = params.cross[l].apply(g, y, encoder_layers[l], cross_segs, cfg.heads);
    Var<T> gated;
    if (cfg.gate == GateMode::kComputed) {
      const Var<T> parts[] = {y, ca};
      gated = mul(sigmoid(params.gates[l].apply(g, concat_cols<T>(parts))), ca);
    } else {
      Matrix<T> ones = Matrix<T>::Ones(ca.rows(), 1);
      Var<T> alpha = matmul(g.constant(std::move(ones)), g.parameter(params.free_gates[l]));
      gated = mul(alpha, ca);
    }
    meshed = meshed.valid() ? add(meshed, gated) : gated;
  }
  Var<T> z = params.norm_cross.apply(g, add(y, meshed));
  Var<T> ff = params.ff_out.apply(g, relu(params.ff_in.apply(g, z)));
  out.hidden = params.norm_ff.apply(g, add(z, ff));
  out.logits = params.output.apply(g, out.hidden);
  return out;
}

template <typename T>
CaptionNetwork<T> CaptionNetwork<T>::create(const ModelConfig& cfg, Modality modality, Rng& rng) {
  cfg.validate();
  CaptionNetwork net;
  net.config = cfg;
  net.modality = modality;
  net.input = InputProjectionParams<T>::create(cfg.input_dims(), modality, rng);
  for (int l = 0; l < cfg.layers; ++l) net.encoder.push_back(EncoderLayerParams<T>::create(cfg, rng));
  net.decoder = DecoderParams<T>::create(cfg, rng);
  return net;
}

template <typename T>
EncodedScenes<T> encode_scenes(Graph<T>& g, CaptionNetwork<T>& net, std::span<const SceneSample* const> scenes,
                               const AttributeToggles& toggles) {
  EncodedScenes<T> enc;
  enc.layout = ObjectLayout::of(scenes);
  Var<T> tokens = assemble_tokens<T>(g, scenes, net.modality, net.input, toggles);
  enc.layers = encode(g, tokens, net.encoder, enc.layout, net.config);
  return enc;
}

template <typename T>
Matrix<T> decode_logits(CaptionNetwork<T>& net, const SceneSample& scene, const std::vector<int>& prefix,
                        const AttributeToggles& toggles) {
  Graph<T> g(false);
  const SceneSample* one[] = {&scene};
  EncodedScenes<T> enc = encode_scenes<T>(g, net, one, toggles);
  const std::vector<int> prefixes[] = {prefix};
  const int scene_index[] = {0};
  return decode<T>(g, enc.layers, enc.layout, prefixes, scene_index, net.decoder, net.config).logits.value();
}

namespace {

template <typename T>
Eigen::Matrix<double, 1, Eigen::Dynamic> log_softmax_row(const Matrix<T>& logits, Eigen::Index row,
                                                         double temperature) {
  Eigen::Matrix<double, 1, Eigen::Dynamic> z = logits.row(row).template cast<double>() / temperature;
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return z.array() - lse;
}

int argmax(const Eigen::Matrix<double, 1, Eigen::Dynamic>& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return static_cast<int>(best);
}

int draw(const Eigen::Matrix<double, 1, Eigen::Dynamic>& logp, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < logp.size(); ++i) {
    acc += std::exp(logp(i));
    if (r < acc) return static_cast<int>(i);
  }
  return static_cast<int>(logp.size() - 1);
}

template <typename T>
std::vector<Generation> generate_stepwise(Graph<T>& g, CaptionNetwork<T>& net, const EncodedScenes<T>& enc,
                                          const GenerateOptions& options, Rng* rng, int per_scene) {
  const bool sampling = options.mode == DecodeMode::kSample;
  std::vector<Generation> out;
  std::vector<int> scene_of;
  for (std::size_t s = 0; s < enc.layout.scenes(); ++s) {
    for (int k = 0; k < per_scene; ++k) {
      Generation gen;
      gen.tokens = {tokens::kBos};
      out.push_back(std::move(gen));
      scene_of.push_back(static_cast<int>(s));
    }
  }
  std::vector<std::size_t> active(out.size());
  std::iota(active.begin(), active.end(), 0);
  for (int step = 0; step < options.max_len && !active.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    std::vector<int> scenes;
    for (std::size_t i : active) {
      prefixes.push_back(out[i].tokens);
      scenes.push_back(scene_of[i]);
    }
    DecoderOutput<T> dec = decode<T>(g, enc.layers, enc.layout, prefixes, scenes, net.decoder, net.config);
    const Matrix<T>& logits = dec.logits.value();
    std::vector<std::size_t> still;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const Eigen::Index last = dec.row_begin[a] + static_cast<Eigen::Index>(prefixes[a].size()) - 1;
      const auto logp = log_softmax_row(logits, last, sampling ? options.temperature : 1.0);
      const int tok = sampling ? draw(logp, *rng) : argmax(logp);
      Generation& gen = out[active[a]];
      gen.tokens.push_back(tok);
      gen.token_log_probs.push_back(logp(tok));
      gen.log_prob += logp(tok);
      if (tok != tokens::kEos) still.push_back(active[a]);
    }
    active = std::move(still);
  }
  return out;
}

template <typename T>
Generation beam_search(Graph<T>& g, CaptionNetwork<T>& net, const EncodedScenes<T>& enc, int scene,
                       const GenerateOptions& options) {
  struct Beam {
    std::vector<int> tokens;
    std::vector<double> token_log_probs;
    double log_prob = 0.0;
  };
  auto normalized = [](const Beam& b) { return b.log_prob / static_cast<double>(b.tokens.size() - 1); };
  const int width = std::max(1, options.beam_width);
  std::vector<Beam> live{Beam{{tokens::kBos}, {}, 0.0}};
  std::vector<Beam> finished;
  for (int step = 0; step < options.max_len && !live.empty() && static_cast<int>(finished.size()) < width; ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const Beam& b : live) prefixes.push_back(b.tokens);
    std::vector<int> scenes(live.size(), scene);
    DecoderOutput<T> dec = decode<T>(g, enc.layers, enc.layout, prefixes, scenes, net.decoder, net.config);
    struct Candidate {
      double score;
      std::size_t beam;
      int token;
      double logp;
    };
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const Eigen::Index last = dec.row_begin[b] + static_cast<Eigen::Index>(prefixes[b].size()) - 1;
      const auto logp = log_softmax_row(dec.logits.value(), last, 1.0);
      for (Eigen::Index v = 0; v < logp.size(); ++v) {
        cands.push_back({live[b].log_prob + logp(v), b, static_cast<int>(v), logp(v)});
      }
    }
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(width), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<Beam> next;
    for (std::size_t c = 0; c < keep; ++c) {
      Beam nb = live[cands[c].beam];
      nb.tokens.push_back(cands[c].token);
      nb.token_log_probs.push_back(cands[c].logp);
      nb.log_prob = cands[c].score;
      if (cands[c].token == tokens::kEos) {
        finished.push_back(std::move(nb));
      } else {
        next.push_back(std::move(nb));
      }
    }
    live = std::move(next);
  }
  std::vector<Beam>& pool = finished.empty() ? live : finished;
  const auto best = std::max_element(pool.begin(), pool.end(), [&](const Beam& a, const Beam& b) {
    return normalized(a) < normalized(b);
  });
  return Generation{best->tokens, best->token_log_probs, best->log_prob};
}

}  // namespace

template <typename T>
std::vector<Generation> generate(Graph<T>& g, CaptionNetwork<T>& net, const EncodedScenes<T>& encoded,
                                 const GenerateOptions& options, Rng* rng) {
  switch (options.mode) {
    case DecodeMode::kGreedy:
      return generate_stepwise(g, net, encoded, options, rng, 1);
    case DecodeMode::kSample:
      if (rng == nullptr) throw ConfigError("generate: sampling requires an RNG");
      if (options.samples < 1) throw ConfigError("generate: samples must be positive");
      return generate_stepwise(g, net, encoded, options, rng, options.samples);
    case DecodeMode::kBeam: {
      std::vector<Generation> out;
      for (std::size_t s = 0; s < encoded.layout.scenes(); ++s) {
        out.push_back(beam_search(g, net, encoded, static_cast<int>(s), options));
      }
      return out;
    }
  }
  return {};
}

template <typename T>
std::vector<Generation> generate(CaptionNetwork<T>& net, std::span<const SceneSample* const> scenes,
                                 const GenerateOptions& options, Rng* rng, const AttributeToggles& toggles) {
  Graph<T> g(false);
  EncodedScenes<T> enc = encode_scenes<T>(g, net, scenes, toggles);
  return generate<T>(g, net, enc, options, rng);
}

#define XT2C_INSTANTIATE_TRANSFORMER(T)                                                                              \
  template struct MultiHeadAttentionParams<T>;                                                                       \
  template struct EncoderLayerParams<T>;                                                                             \
  template struct DecoderParams<T>;                                                                                  \
  template struct CaptionNetwork<T>;                                                                                 \
  template Var<T> memory_self_attention(Graph<T>&, Var<T>, MultiHeadAttentionParams<T>&, const ObjectLayout&, int); \
  template std::vector<Var<T>> encode(Graph<T>&, Var<T>, std::vector<EncoderLayerParams<T>>&, const ObjectLayout&,   \
                                      const ModelConfig&, const LayerInputHook<T>&);                                 \
  template Matrix<T> word_position_codes(std::span<const std::vector<int>>, int);                                    \
  template DecoderOutput<T> decode(Graph<T>&, std::span<const Var<T>>, const ObjectLayout&,                          \
                                   std::span<const std::vector<int>>, std::span<const int>, DecoderParams<T>&,       \
                                   const ModelConfig&);                                                              \
  template EncodedScenes<T> encode_scenes(Graph<T>&, CaptionNetwork<T>&, std::span<const SceneSample* const>,        \
                                          const AttributeToggles&);                                                  \
  template Matrix<T> decode_logits(CaptionNetwork<T>&, const SceneSample&, const std::vector<int>&,                  \
                                   const AttributeToggles&);                                                         \
  template std::vector<Generation> generate(Graph<T>&, CaptionNetwork<T>&, const EncodedScenes<T>&,                  \
                                            const GenerateOptions&, Rng*);                                           \
  template std::vector<Generation> generate(CaptionNetwork<T>&, std::span<const SceneSample* const>,                 \
                                            const GenerateOptions&, Rng*, const AttributeToggles&);

XT2C_INSTANTIATE_TRANSFORMER(float)
XT2C_INSTANTIATE_TRANSFORMER(double)

}  // namespace xt2c
