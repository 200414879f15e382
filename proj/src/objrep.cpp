#include "xt2c/objrep.hpp"

namespace xt2c {

bool SceneSample::has_2d() const {
  for (const auto& o : objects) {
    if (!o.has_2d()) return false;
  }
  return !objects.empty();
}

std::array<double, 6> positional_encoding(const Box3D& target, const Box3D& other) {
  for (double s : target.size) {
    if (!(s > 0.0)) throw DegenerateBoxError("positional_encoding: target box has a non-positive size component");
  }
  return {other.center[0] - target.center[0], other.center[1] - target.center[1],
          other.center[2] - target.center[2], other.size[0] / target.size[0],
          other.size[1] / target.size[1],     other.size[2] / target.size[2]};
}

template <typename T>
InputProjectionParams<T> InputProjectionParams<T>::create(const InputDims& dims, Modality modality, Rng& rng) {
  InputProjectionParams p;
  p.dims = dims;
  const std::size_t d = dims.model;
  p.w_box3d = xavier_uniform<T>(6, d, rng);
  p.w_pe = xavier_uniform<T>(6, d, rng);
  const std::size_t base = dims.f3d + dims.classes + 2 * d;
  if (modality == Modality::k3d) {
    p.t3d = Linear<T>::create(base, d, true, rng);
  } else {
    p.w_box2d = xavier_uniform<T>(4, d, rng);
    p.tmulti = Linear<T>::create(base + dims.f2d + d, d, true, rng);
  }
  return p;
}

template <typename T>
Var<T> assemble_tokens(Graph<T>& g, std::span<const SceneSample* const> scenes, Modality modality,
                       InputProjectionParams<T>& params, const AttributeToggles& toggles) {
  const InputDims& dims = params.dims;
  const bool multi = modality == Modality::kMulti;
  if (multi ? params.tmulti.empty() : params.t3d.empty()) {
    throw ConfigError("assemble_tokens: projection parameters were not built for this modality");
  }
  Eigen::Index n = 0;
  for (const SceneSample* s : scenes) {
    if (s->objects.empty()) throw ConfigError("assemble_tokens: scene " + s->scene_id + " has no objects");
    if (s->target_index < 0 || s->target_index >= static_cast<int>(s->objects.size())) {
      throw ConfigError("assemble_tokens: scene " + s->scene_id + " has an invalid target index");
    }
    n += static_cast<Eigen::Index>(s->objects.size());
  }

  const Eigen::Index f3d_w = static_cast<Eigen::Index>(dims.f3d);
  const Eigen::Index cls_w = static_cast<Eigen::Index>(dims.classes);
  const Eigen::Index f2d_w = static_cast<Eigen::Index>(dims.f2d);
  Matrix<T> semantic = Matrix<T>::Zero(n, f3d_w + cls_w);
  Matrix<T> box3d = Matrix<T>::Zero(n, 6);
  Matrix<T> pe = Matrix<T>::Zero(n, 6);
  Matrix<T> feat2d = multi ? Matrix<T>::Zero(n, f2d_w) : Matrix<T>();
  Matrix<T> box2d = multi ? Matrix<T>::Zero(n, 4) : Matrix<T>();

  Eigen::Index row = 0;
  for (const SceneSample* s : scenes) {
    const Box3D& target = s->target().b3d;
    for (const ObjectRecord& o : s->objects) {
      if (o.f3d.size() != dims.f3d) {
        throw ConfigError("assemble_tokens: f3d width " + std::to_string(o.f3d.size()) + ", expected " +
                          std::to_string(dims.f3d));
      }
      if (o.cls < 0 || o.cls >= cls_w) throw ConfigError("assemble_tokens: class id out of range");
      const auto enc = positional_encoding(target, o.b3d);
      if (toggles.f3d) {
        for (Eigen::Index j = 0; j < f3d_w; ++j) semantic(row, j) = static_cast<T>(o.f3d[j]);
      }
      if (toggles.cls) semantic(row, f3d_w + o.cls) = T(1);
      if (toggles.b3d) {
        const auto b = o.b3d.as_vector();
        for (int j = 0; j < 6; ++j) box3d(row, j) = static_cast<T>(b[j]);
      }
      if (toggles.pe) {
        for (int j = 0; j < 6; ++j) pe(row, j) = static_cast<T>(enc[j]);
      }
      if (multi) {
        if (!o.has_2d()) {
          throw ModalityError("assemble_tokens: scene " + s->scene_id + " lacks 2D fields required by the multi-modal input");
        }
        if (o.f2d->size() != dims.f2d) {
          throw ConfigError("assemble_tokens: f2d width " + std::to_string(o.f2d->size()) + ", expected " +
                            std::to_string(dims.f2d));
        }
        if (toggles.f2d) {
          for (Eigen::Index j = 0; j < f2d_w; ++j) feat2d(row, j) = static_cast<T>((*o.f2d)[j]);
        }
        if (toggles.b2d) {
          const auto b = o.b2d->as_vector();
          for (int j = 0; j < 4; ++j) box2d(row, j) = static_cast<T>(b[j]);
        }
      }
      ++row;
    }
  }

  std::vector<Var<T>> parts{g.constant(std::move(semantic)), matmul(g.constant(std::move(box3d)), g.parameter(params.w_box3d)),
                            matmul(g.constant(std::move(pe)), g.parameter(params.w_pe))};
  if (!multi) return relu(params.t3d.apply(g, concat_cols<T>(parts)));
  parts.push_back(g.constant(std::move(feat2d)));
  parts.push_back(matmul(g.constant(std::move(box2d)), g.parameter(params.w_box2d)));
  return relu(params.tmulti.apply(g, concat_cols<T>(parts)));
}

namespace {

template <typename T>
std::vector<T> single_token(const ObjectRecord& record, const Box3D& target, InputProjectionParams<T>& params,
                            const AttributeToggles& toggles, Modality modality) {
  SceneSample scene;
  scene.objects = {record};
  scene.target_index = 0;
  // The token depends on the target box only through the positional
  // encoding, so a one-object scene with the target box substituted in the
  // encoding reproduces the row the object would get inside its scene.
  ObjectRecord anchor = record;
  anchor.b3d = target;
  scene.objects.insert(scene.objects.begin(), anchor);
  Graph<T> g(false);
  const Matrix<T>& v = assemble_tokens<T>(g, scene, modality, params, toggles).value();
  return std::vector<T>(v.row(1).data(), v.row(1).data() + v.cols());
}

}  // namespace

template <typename T>
std::vector<T> build_3d_token(const ObjectRecord& record, const Box3D& target, InputProjectionParams<T>& params,
                              const AttributeToggles& toggles) {
  return single_token(record, target, params, toggles, Modality::k3d);
}

template <typename T>
std::vector<T> build_multi_token(const ObjectRecord& record, const Box3D& target, InputProjectionParams<T>& params,
                                 const AttributeToggles& toggles) {
  if (!record.has_2d()) throw ModalityError("build_multi_token: record has no 2D feature/box");
  return single_token(record, target, params, toggles, Modality::kMulti);
}

#define XT2C_INSTANTIATE_OBJREP(T)                                                                                     \
  template struct InputProjectionParams<T>;                                                                            \
  template Var<T> assemble_tokens(Graph<T>&, std::span<const SceneSample* const>, Modality, InputProjectionParams<T>&, \
                                  const AttributeToggles&);                                                            \
  template std::vector<T> build_3d_token(const ObjectRecord&, const Box3D&, InputProjectionParams<T>&,                 \
                                         const AttributeToggles&);                                                     \
  template std::vector<T> build_multi_token(const ObjectRecord&, const Box3D&, InputProjectionParams<T>&,              \
                                            const AttributeToggles&);

XT2C_INSTANTIATE_OBJREP(float)
XT2C_INSTANTIATE_OBJREP(double)

}  // namespace xt2c
