#include "xt2c/grad_suite.hpp"

#include "xt2c/losses.hpp"
#include "xt2c/ops.hpp"
#include "xt2c/synthdata.hpp"
#include "xt2c/transformer.hpp"

#include <random>

namespace xt2c {
namespace {

using Mat = Matrix<double>;
using Inputs = std::span<const Var<double>>;
using ParamList = std::vector<std::pair<std::string, Tensor<double>*>>;

Mat normal(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Values kept away from the ReLU kink.
Mat off_zero(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m = normal(rng, r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += m.data()[i] >= 0 ? 0.1 : -0.1;
  return m;
}

template <typename Net>
ParamList params_of(Net& net, const std::string& prefix) {
  ParamList out;
  net.visit(prefix, [&](const std::string& name, Tensor<double>& t) {
    if (!t.empty()) out.emplace_back(name, &t);
  });
  return out;
}

ModelConfig tiny_model(GateMode gate, int vocab) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.memory_slots = 2;
  cfg.ff_width = 12;
  cfg.vocab_size = vocab;
  cfg.max_len = 10;
  cfg.gate = gate;
  return cfg;
}

struct TinyScenes {
  Vocabulary vocab;
  std::vector<SceneSample> scenes;
  std::vector<const SceneSample*> ptrs;
};

TinyScenes tiny_scenes(Rng& rng) {
  GenConfig gc;
  gc.min_objects = 2;
  gc.max_objects = 3;
  gc.f3d_dim = 32;
  TinyScenes t;
  t.vocab = Vocabulary::for_grammar(gc);
  for (int i = 0; i < 2; ++i) t.scenes.push_back(generate_scene(rng, gc, t.vocab, "g" + std::to_string(i)));
  for (const auto& s : t.scenes) t.ptrs.push_back(&s);
  return t;
}

void op_checks(std::uint64_t seed, double tol, const std::function<void(GradReport)>& emit) {
  Rng rng(seed);
  auto check = [&](const std::string& name, const GradCheckFn& fn, const std::vector<Mat>& inputs) {
    emit(grad_check(name, fn, inputs, 1e-5, tol));
  };

  check("matmul", [](Graph<double>&, Inputs v) { return matmul(v[0], v[1]); },
        {normal(rng, 3, 4), normal(rng, 4, 2)});
  check("add_sub_mul", [](Graph<double>&, Inputs v) { return mul(sub(add(v[0], v[1]), v[1]), v[1]); },
        {normal(rng, 3, 3), normal(rng, 3, 3)});
  check("add_row", [](Graph<double>&, Inputs v) { return add_row(v[0], v[1]); }, {normal(rng, 4, 3), normal(rng, 1, 3)});
  {
    const Mat c = normal(rng, 2, 3);
    const std::vector<double> f{0.5, -2.0};
    check("add_constant_scale_rows",
          [c, f](Graph<double>&, Inputs v) { return scale(scale_rows<double>(add_constant(v[0], c), f), 1.5); },
          {normal(rng, 2, 3)});
  }
  check("relu", [](Graph<double>&, Inputs v) { return relu(v[0]); }, {off_zero(rng, 3, 4)});
  check("sigmoid", [](Graph<double>&, Inputs v) { return sigmoid(v[0]); }, {normal(rng, 3, 4, 2.0)});
  check("softmax_rows", [](Graph<double>&, Inputs v) { return softmax_rows(v[0]); }, {normal(rng, 3, 5, 2.0)});
  check("layer_norm", [](Graph<double>&, Inputs v) { return layer_norm(v[0], v[1], v[2], 1e-5); },
        {normal(rng, 3, 6), normal(rng, 1, 6), normal(rng, 1, 6)});
  check("concat_slice", [](Graph<double>&, Inputs v) {
          const Var<double> parts[] = {v[0], v[1]};
          return slice_rows(concat_cols<double>(parts), 1, 2);
        },
        {normal(rng, 3, 2), normal(rng, 3, 4)});
  {
    const std::vector<int> ids{2, 0, 2, 1};
    check("gather_rows", [ids](Graph<double>&, Inputs v) { return gather_rows<double>(v[0], ids); },
          {normal(rng, 3, 4)});
  }
  check("sum_mean", [](Graph<double>&, Inputs v) { return add(sum(v[0]), mean(mul(v[0], v[0]))); },
        {normal(rng, 3, 3)});

  const std::vector<AttentionSegment> segs{{0, 3, 0, 3, false}, {3, 2, 3, 2, false}};
  check("attention_with_memory",
        [segs](Graph<double>&, Inputs v) { return segmented_attention(v[0], v[1], v[2], v[3], v[4], segs, 2); },
        {normal(rng, 5, 4), normal(rng, 5, 4), normal(rng, 5, 4), normal(rng, 2, 4), normal(rng, 2, 4)});
  const std::vector<AttentionSegment> causal{{0, 4, 0, 4, true}};
  check("attention_causal", [causal](Graph<double>&, Inputs v) {
          return segmented_attention(v[0], v[1], v[2], Var<double>{}, Var<double>{}, causal, 2);
        },
        {normal(rng, 4, 4), normal(rng, 4, 4), normal(rng, 4, 4)});
  const std::vector<AttentionSegment> cross{{0, 2, 0, 3, false}, {2, 3, 3, 2, false}};
  check("attention_cross", [cross](Graph<double>&, Inputs v) {
          return segmented_attention(v[0], v[1], v[2], Var<double>{}, Var<double>{}, cross, 1);
        },
        {normal(rng, 5, 4), normal(rng, 5, 4), normal(rng, 5, 4)});

  {
    const std::vector<int> targets{1, 3, 0, 2};
    const std::vector<double> w{0.5, -0.25, 0.0, 1.0};
    check("weighted_nll", [targets, w](Graph<double>&, Inputs v) { return weighted_nll<double>(v[0], targets, w); },
          {normal(rng, 4, 5)});
  }
  check("huber_mean", [](Graph<double>&, Inputs v) { return huber_mean(v[0], v[1], 1.0); },
        {normal(rng, 3, 4, 1.5), normal(rng, 3, 4, 1.5)});

  {
    const Mat teacher = normal(rng, 4, 6, 1.5);
    check("alignment_loss", [teacher](Graph<double>& g, Inputs v) {
            return alignment_loss(v[0], g.constant(teacher));
          },
          {normal(rng, 4, 6, 1.5)});
    check("alignment_loss_bidirectional",
          [](Graph<double>&, Inputs v) { return alignment_loss(v[0], v[1], false); },
          {normal(rng, 4, 6, 1.5), normal(rng, 4, 6, 1.5)});
  }
  {
    const std::vector<int> targets{4, 2, tokens::kPad, 1, tokens::kPad};
    check("caption_ce", [targets](Graph<double>&, Inputs v) { return caption_ce<double>(v[0], targets); },
          {normal(rng, 5, 6, 2.0)});
  }
}

void model_checks(std::uint64_t seed, double tol, const std::function<void(GradReport)>& emit) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Rng pick(seed + 17);
  TinyScenes data = tiny_scenes(rng);
  const int vocab = static_cast<int>(data.vocab.size());

  {
    auto p = MultiHeadAttentionParams<double>::create(8, 3, rng);
    const Mat x = normal(rng, 5, 8);
    const Mat c = normal(rng, 5, 8);
    const std::vector<AttentionSegment> segs{{0, 3, 0, 3, false}, {3, 2, 3, 2, false}};
    emit(grad_check_parameters("memory_attention_block",
                               [&](Graph<double>& g) { return p.apply(g, g.constant(x), g.constant(c), segs, 2); },
                               params_of(p, "mha"), pick, 16, 1e-5, tol));
  }

  for (GateMode gate : {GateMode::kComputed, GateMode::kFree}) {
    ModelConfig cfg = tiny_model(gate, vocab);
    auto net = CaptionNetwork<double>::create(cfg, Modality::k3d, rng);
    if (gate == GateMode::kFree) {
      // away from the uniform initial value so each gate matters separately
      for (auto& fg : net.decoder.free_gates) fg.matrix() = normal(rng, 1, cfg.width);
    }
    std::vector<std::vector<int>> prefixes;
    std::vector<int> scene_of;
    for (std::size_t s = 0; s < data.scenes.size(); ++s) {
      const auto& ref = data.scenes[s].references.front();
      prefixes.emplace_back(ref.begin(), ref.end() - 1);
      scene_of.push_back(static_cast<int>(s));
    }
    const std::string name = gate == GateMode::kComputed ? "meshed_decoder_computed_gates" : "meshed_decoder_free_gates";
    emit(grad_check_parameters(
        name,
        [&](Graph<double>& g) {
          auto enc = encode_scenes<double>(g, net, data.ptrs);
          return decode<double>(g, enc.layers, enc.layout, prefixes, scene_of, net.decoder, cfg).logits;
        },
        params_of(net, "net"), pick, 6, 1e-5, tol));
  }

  {
    ModelConfig cfg = tiny_model(GateMode::kComputed, vocab);
    auto net = CaptionNetwork<double>::create(cfg, Modality::k3d, rng);
    std::vector<std::vector<Sentence>> docs;
    for (const auto& s : data.scenes) {
      std::vector<Sentence> refs;
      for (const auto& r : s.references) refs.push_back(caption_sentence(r));
      docs.push_back(refs);
    }
    const CiderScorer scorer(docs);
    const std::uint64_t sample_seed = seed * 31 + 7;
    emit(grad_check_parameters(
        "cider_reward_loss",
        [&](Graph<double>& g) {
          Rng sampler(sample_seed);
          auto enc = encode_scenes<double>(g, net, data.ptrs);
          return cider_reward_loss<double>(g, net, enc, data.ptrs, scorer, 3, sampler);
        },
        params_of(net.decoder, "net.decoder"), pick, 6, 1e-5, tol));
  }
}

}  // namespace

std::vector<GradReport> run_grad_suite(const GradSuiteOptions& options,
                                       const std::function<void(const GradReport&)>& on_report) {
  std::vector<GradReport> reports;
  for (int i = 0; i < options.seeds; ++i) {
    const std::uint64_t seed = options.first_seed + static_cast<std::uint64_t>(i);
    auto emit = [&](GradReport r) {
      r.op_name += "[seed=" + std::to_string(seed) + "]";
      if (on_report) on_report(r);
      reports.push_back(std::move(r));
    };
    op_checks(seed, options.tol, emit);
    model_checks(seed, options.tol, emit);
  }
  return reports;
}

}  // namespace xt2c
