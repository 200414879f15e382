#pragma once

#include "xt2c/objrep.hpp"
#include "xt2c/tokens.hpp"

#include <functional>
#include <span>
#include <vector>

namespace xt2c {

// How the meshed decoder weighs each encoder layer's cross-attention:
// computed gates sigmoid(affine([Y; CA_l])) or a free learned vector per layer.
enum class GateMode { kComputed, kFree };

struct ModelConfig {
  int layers = 3;
  int width = 128;
  int heads = 4;
  int memory_slots = 8;
  int ff_width = 256;
  int vocab_size = 0;
  int max_len = 24;
  GateMode gate = GateMode::kComputed;
  InputDims input;

  // Validates invariants and keeps input.model in sync with width.
  void validate() const;
  InputDims input_dims() const {
    InputDims d = input;
    d.model = static_cast<std::size_t>(width);
    return d;
  }
};

// Row ranges of each scene's objects inside a stacked token matrix.
struct ObjectLayout {
  std::vector<Eigen::Index> begin;
  std::vector<Eigen::Index> count;

  static ObjectLayout of(std::span<const SceneSample* const> scenes);
  std::size_t scenes() const { return begin.size(); }
  Eigen::Index total_rows() const { return begin.empty() ? 0 : begin.back() + count.back(); }
};

template <typename T>
struct MultiHeadAttentionParams {
  Linear<T> q, k, v, o;
  Tensor<T> memory_keys;    // n_mem x d, empty when n_mem = 0
  Tensor<T> memory_values;  // n_mem x d

  static MultiHeadAttentionParams create(int width, int memory_slots, Rng& rng);

  // Queries come from `queries`, keys and values from `context`; segments
  // index rows of both.
  Var<T> apply(Graph<T>& g, Var<T> queries, Var<T> context, std::span<const AttentionSegment> segments, int heads);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    q.visit(prefix + ".q", f);
    k.visit(prefix + ".k", f);
    v.visit(prefix + ".v", f);
    o.visit(prefix + ".o", f);
    f(prefix + ".memory_keys", memory_keys);
    f(prefix + ".memory_values", memory_values);
  }
};

template <typename T>
struct EncoderLayerParams {
  MultiHeadAttentionParams<T> attention;
  LayerNormParams<T> norm_attention;
  Linear<T> ff_in;
  Linear<T> ff_out;
  LayerNormParams<T> norm_ff;

  static EncoderLayerParams create(const ModelConfig& cfg, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    attention.visit(prefix + ".attention", f);
    norm_attention.visit(prefix + ".norm_attention", f);
    ff_in.visit(prefix + ".ff_in", f);
    ff_out.visit(prefix + ".ff_out", f);
    norm_ff.visit(prefix + ".norm_ff", f);
  }
};

template <typename T>
struct DecoderParams {
  Tensor<T> embedding;  // V x d
  MultiHeadAttentionParams<T> self_attention;
  LayerNormParams<T> norm_self;
  std::vector<MultiHeadAttentionParams<T>> cross;  // one per encoder layer
  std::vector<Linear<T>> gates;                    // 2d -> d, GateMode::kComputed
  std::vector<Tensor<T>> free_gates;               // 1 x d, GateMode::kFree
  LayerNormParams<T> norm_cross;
  Linear<T> ff_in;
  Linear<T> ff_out;
  LayerNormParams<T> norm_ff;
  Linear<T> output;  // d -> V

  static DecoderParams create(const ModelConfig& cfg, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".embedding", embedding);
    self_attention.visit(prefix + ".self_attention", f);
    norm_self.visit(prefix + ".norm_self", f);
    for (std::size_t l = 0; l < cross.size(); ++l) cross[l].visit(prefix + ".cross" + std::to_string(l), f);
    for (std::size_t l = 0; l < gates.size(); ++l) gates[l].visit(prefix + ".gate" + std::to_string(l), f);
    for (std::size_t l = 0; l < free_gates.size(); ++l) f(prefix + ".free_gate" + std::to_string(l), free_gates[l]);
    norm_cross.visit(prefix + ".norm_cross", f);
    ff_in.visit(prefix + ".ff_in", f);
    ff_out.visit(prefix + ".ff_out", f);
    norm_ff.visit(prefix + ".norm_ff", f);
    output.visit(prefix + ".output", f);
  }
};

// Called between encoder layers: receives the index of the layer about to
// run and the previous layer's output, returns that layer's input.
template <typename T>
using LayerInputHook = std::function<Var<T>(int next_layer, Var<T> previous_output)>;

template <typename T>
Var<T> memory_self_attention(Graph<T>& g, Var<T> x, MultiHeadAttentionParams<T>& p, const ObjectLayout& layout,
                             int heads);

// Returns every layer's output (post-norm residual blocks).
template <typename T>
std::vector<Var<T>> encode(Graph<T>& g, Var<T> tokens, std::vector<EncoderLayerParams<T>>& layers,
                           const ObjectLayout& layout, const ModelConfig& cfg, const LayerInputHook<T>& hook = {});

template <typename T>
struct DecoderOutput {
  Var<T> hidden;  // sum(prefix lengths) x d, before the output projection
  Var<T> logits;  // sum(prefix lengths) x V
  std::vector<Eigen::Index> row_begin;
};

// Teacher-forced decoding of several prefixes at once. prefix_scene[i] names
// the scene (index into `layout`) whose encoder outputs prefix i attends to.
template <typename T>
DecoderOutput<T> decode(Graph<T>& g, std::span<const Var<T>> encoder_layers, const ObjectLayout& layout,
                        std::span<const std::vector<int>> prefixes, std::span<const int> prefix_scene,
                        DecoderParams<T>& params, const ModelConfig& cfg);

// Sinusoidal position code for decoder word positions.
template <typename T>
Matrix<T> word_position_codes(std::span<const std::vector<int>> prefixes, int width);

template <typename T>
struct CaptionNetwork {
  ModelConfig config;
  Modality modality = Modality::k3d;
  InputProjectionParams<T> input;
  std::vector<EncoderLayerParams<T>> encoder;
  DecoderParams<T> decoder;

  static CaptionNetwork create(const ModelConfig& cfg, Modality modality, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    input.visit(prefix + ".input", f);
    for (std::size_t l = 0; l < encoder.size(); ++l) encoder[l].visit(prefix + ".encoder" + std::to_string(l), f);
    decoder.visit(prefix + ".decoder", f);
  }

  void set_requires_grad(bool on) {
    visit("", [on](const std::string&, Tensor<T>& t) {
      if (!t.empty()) t.set_requires_grad(on);
    });
  }
};

template <typename T>
struct EncodedScenes {
  ObjectLayout layout;
  std::vector<Var<T>> layers;
};

template <typename T>
EncodedScenes<T> encode_scenes(Graph<T>& g, CaptionNetwork<T>& net, std::span<const SceneSample* const> scenes,
                               const AttributeToggles& toggles = {});

// Single-scene logits for one prefix (T x V).
template <typename T>
Matrix<T> decode_logits(CaptionNetwork<T>& net, const SceneSample& scene, const std::vector<int>& prefix,
                        const AttributeToggles& toggles = {});

enum class DecodeMode { kGreedy, kSample, kBeam };

struct GenerateOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  int samples = 5;
  double temperature = 1.0;
  int beam_width = 3;
  int max_len = 24;  // generated tokens after BOS, EOS included
};

struct Generation {
  std::vector<int> tokens;  // BOS ... EOS (EOS absent when truncated)
  std::vector<double> token_log_probs;
  double log_prob = 0.0;
};

// Captions for each scene: one per scene for greedy and beam, `samples` per
// scene (scene-major) for sampling. Sampling draws from `rng`.
template <typename T>
std::vector<Generation> generate(Graph<T>& g, CaptionNetwork<T>& net, const EncodedScenes<T>& encoded,
                                 const GenerateOptions& options, Rng* rng = nullptr);

template <typename T>
std::vector<Generation> generate(CaptionNetwork<T>& net, std::span<const SceneSample* const> scenes,
                                 const GenerateOptions& options, Rng* rng = nullptr,
                                 const AttributeToggles& toggles = {});

}  // namespace xt2c
