#pragma once

#include "xt2c/layers.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace xt2c {

struct Box3D {
  std::array<double, 3> center{0.0, 0.0, 0.0};
  std::array<double, 3> size{1.0, 1.0, 1.0};  // (w, h, l), strictly positive

  // (x, y, z, w, h, l)
  std::array<double, 6> as_vector() const {
    return {center[0], center[1], center[2], size[0], size[1], size[2]};
  }
  friend bool operator==(const Box3D&, const Box3D&) = default;
};

// Normalized image box: center (u, v) and extent (w, h).
struct Box2D {
  double u = 0.5, v = 0.5, w = 0.0, h = 0.0;

  std::array<double, 4> as_vector() const { return {u, v, w, h}; }
  friend bool operator==(const Box2D&, const Box2D&) = default;
};

// Generator-side ground truth, carried along for verification only. The
// model never reads it.
struct LatentAttributes {
  int color = 0;
  int shape = 0;
  int size = 0;
  friend bool operator==(const LatentAttributes&, const LatentAttributes&) = default;
};

struct ObjectRecord {
  std::vector<float> f3d;
  int cls = 0;  // index of the one-hot semantic class vector
  Box3D b3d;
  std::optional<std::vector<float>> f2d;
  std::optional<Box2D> b2d;
  std::optional<LatentAttributes> latent;

  bool has_2d() const { return f2d.has_value() && b2d.has_value(); }
  friend bool operator==(const ObjectRecord&, const ObjectRecord&) = default;
};

struct SceneSample {
  std::string scene_id;
  std::vector<ObjectRecord> objects;
  int target_index = 0;
  std::vector<std::vector<int>> references;

  const ObjectRecord& target() const { return objects.at(static_cast<std::size_t>(target_index)); }
  bool has_2d() const;
  friend bool operator==(const SceneSample&, const SceneSample&) = default;
};

enum class Modality { k3d, kMulti };

// Which raw attributes enter the token; a disabled attribute is replaced by
// zeros of the same width so parameter shapes never change.
struct AttributeToggles {
  bool f3d = true;
  bool cls = true;
  bool b3d = true;
  bool pe = true;
  bool f2d = true;
  bool b2d = true;

  bool all_on() const { return f3d && cls && b3d && pe && f2d && b2d; }
  friend bool operator==(const AttributeToggles&, const AttributeToggles&) = default;
};

struct InputDims {
  std::size_t f3d = 32;
  std::size_t f2d = 32;
  std::size_t classes = 18;
  std::size_t model = 128;
};

// W1, W2, W3 and the two token transforms. A network only allocates the
// transform for its own modality; the other one stays empty.
template <typename T>
struct InputProjectionParams {
  InputDims dims;
  Tensor<T> w_box3d;  // 6 x d
  Tensor<T> w_pe;     // 6 x d
  Tensor<T> w_box2d;  // 4 x d (multi only)
  Linear<T> t3d;      // (D3d + C + 2d) -> d
  Linear<T> tmulti;   // (D3d + C + 2d + D2d + d) -> d

  static InputProjectionParams create(const InputDims& dims, Modality modality, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w_box3d", w_box3d);
    f(prefix + ".w_pe", w_pe);
    f(prefix + ".w_box2d", w_box2d);
    t3d.visit(prefix + ".t3d", f);
    tmulti.visit(prefix + ".tmulti", f);
  }
};

// [dx, dy, dz, w/w*, h/h*, l/l*] of `other` relative to `target`.
std::array<double, 6> positional_encoding(const Box3D& target, const Box3D& other);

template <typename T>
std::vector<T> build_3d_token(const ObjectRecord& record, const Box3D& target, InputProjectionParams<T>& params,
                              const AttributeToggles& toggles = {});

template <typename T>
std::vector<T> build_multi_token(const ObjectRecord& record, const Box3D& target, InputProjectionParams<T>& params,
                                 const AttributeToggles& toggles = {});

// Stacks the tokens of every object of every scene: rows are grouped by
// scene in order, and within a scene follow the object order.
template <typename T>
Var<T> assemble_tokens(Graph<T>& g, std::span<const SceneSample* const> scenes, Modality modality,
                       InputProjectionParams<T>& params, const AttributeToggles& toggles = {});

template <typename T>
Var<T> assemble_tokens(Graph<T>& g, const SceneSample& scene, Modality modality, InputProjectionParams<T>& params,
                       const AttributeToggles& toggles = {}) {
  const SceneSample* one[] = {&scene};
  return assemble_tokens<T>(g, one, modality, params, toggles);
}

}  // namespace xt2c
