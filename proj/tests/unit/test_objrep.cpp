#include "doctest.h"

#include "xt2c/errors.hpp"
#include "xt2c/objrep.hpp"

#include <algorithm>
#include <random>

using namespace xt2c;

namespace {

ObjectRecord random_record(std::mt19937_64& rng, const InputDims& dims, bool with_2d = true) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  ObjectRecord r;
  r.f3d.resize(dims.f3d);
  for (auto& v : r.f3d) v = n(rng);
  r.cls = static_cast<int>(rng() % dims.classes);
  r.b3d = Box3D{{u(rng), u(rng), u(rng)}, {u(rng), u(rng), u(rng)}};
  if (with_2d) {
    r.f2d = std::vector<float>(dims.f2d);
    for (auto& v : *r.f2d) v = n(rng);
    r.b2d = Box2D{u(rng), u(rng), u(rng), u(rng)};
  }
  return r;
}

SceneSample random_scene(std::mt19937_64& rng, const InputDims& dims, int m) {
  SceneSample s;
  s.scene_id = "s";
  for (int i = 0; i < m; ++i) s.objects.push_back(random_record(rng, dims));
  s.target_index = 0;
  return s;
}

}  // namespace

TEST_CASE("positional encoding examples") {
  const Box3D unit{{0, 0, 0}, {1, 1, 1}};
  const auto self = positional_encoding(unit, unit);
  CHECK(self == std::array<double, 6>{0, 0, 0, 1, 1, 1});
  const Box3D other{{2, -1, 0.5}, {2, 0.5, 1}};
  CHECK(positional_encoding(unit, other) == std::array<double, 6>{2, -1, 0.5, 2, 0.5, 1});
  CHECK_THROWS_AS(positional_encoding(Box3D{{0, 0, 0}, {0, 1, 1}}, unit), DegenerateBoxError);
  CHECK_THROWS_AS(positional_encoding(Box3D{{0, 0, 0}, {1, -1, 1}}, unit), DegenerateBoxError);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.05, 3.0);
  for (int i = 0; i < 100; ++i) {
    const Box3D t{{u(rng), u(rng), u(rng)}, {u(rng), u(rng), u(rng)}};
    CHECK(positional_encoding(t, t) == std::array<double, 6>{0, 0, 0, 1, 1, 1});
  }
}

TEST_CASE("3D token shape, annihilation and determinism") {
  std::mt19937_64 rng(5);
  InputDims dims;
  Rng prng(1);
  auto params = InputProjectionParams<double>::create(dims, Modality::k3d, prng);
  const ObjectRecord r = random_record(rng, dims);
  const Box3D target{{0.5, 0.5, 0.5}, {0.2, 0.3, 0.4}};
  const auto a = build_3d_token<double>(r, target, params);
  CHECK(a.size() == 128);
  CHECK(build_3d_token<double>(r, target, params) == a);

  params.visit("", [](const std::string&, Tensor<double>& t) {
    for (auto& v : t.data()) v = 0.0;
  });
  const auto z = build_3d_token<double>(r, target, params);
  CHECK(std::all_of(z.begin(), z.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("3D token ignores 2D fields and rejects width mismatch") {
  std::mt19937_64 rng(7);
  InputDims dims;
  Rng prng(2);
  auto params = InputProjectionParams<float>::create(dims, Modality::k3d, prng);
  ObjectRecord r = random_record(rng, dims);
  const Box3D target{{0.5, 0.5, 0.5}, {0.2, 0.3, 0.4}};
  const auto a = build_3d_token<float>(r, target, params);
  ObjectRecord changed = r;
  for (auto& v : *changed.f2d) v += 5.0f;
  changed.b2d->u += 0.3;
  CHECK(build_3d_token<float>(changed, target, params) == a);
  ObjectRecord stripped = r;
  stripped.f2d.reset();
  stripped.b2d.reset();
  CHECK(build_3d_token<float>(stripped, target, params) == a);

  ObjectRecord wide = r;
  wide.f3d.push_back(1.0f);
  CHECK_THROWS_AS(build_3d_token<float>(wide, target, params), ConfigError);
  ObjectRecord bad_cls = r;
  bad_cls.cls = 18;
  CHECK_THROWS_AS(build_3d_token<float>(bad_cls, target, params), ConfigError);
}

TEST_CASE("multi token guards and sensitivity to the f2d toggle") {
  std::mt19937_64 rng(9);
  InputDims dims;
  Rng prng(3);
  auto params = InputProjectionParams<double>::create(dims, Modality::kMulti, prng);
  const Box3D target{{0.5, 0.5, 0.5}, {0.2, 0.3, 0.4}};
  ObjectRecord no2d = random_record(rng, dims, false);
  CHECK_THROWS_AS(build_multi_token<double>(no2d, target, params), ModalityError);

  AttributeToggles off;
  off.f2d = false;
  int differ = 0;
  for (int i = 0; i < 20; ++i) {
    const ObjectRecord r = random_record(rng, dims);
    const auto full = build_multi_token<double>(r, target, params);
    CHECK(full.size() == 128);
    if (build_multi_token<double>(r, target, params, off) != full) ++differ;
  }
  CHECK(differ == 20);
}

TEST_CASE("assemble_tokens contracts") {
  std::mt19937_64 rng(11);
  InputDims dims;
  Rng prng(4);
  auto params = InputProjectionParams<double>::create(dims, Modality::k3d, prng);

  SceneSample one = random_scene(rng, dims, 1);
  Graph<double> g(false);
  CHECK(assemble_tokens<double>(g, one, Modality::k3d, params).rows() == 1);
  CHECK(assemble_tokens<double>(g, one, Modality::k3d, params).cols() == 128);

  SceneSample s = random_scene(rng, dims, 5);
  const Matrix<double> base = assemble_tokens<double>(g, s, Modality::k3d, params).value();
  AttributeToggles all_on;
  CHECK(assemble_tokens<double>(g, s, Modality::k3d, params, all_on).value() == base);

  // rows follow the objects when non-target objects are permuted
  SceneSample p = s;
  std::swap(p.objects[1], p.objects[4]);
  std::swap(p.objects[2], p.objects[3]);
  const Matrix<double> perm = assemble_tokens<double>(g, p, Modality::k3d, params).value();
  CHECK(perm.row(0) == base.row(0));
  CHECK(perm.row(1).isApprox(base.row(4), 1e-12));
  CHECK(perm.row(4).isApprox(base.row(1), 1e-12));
  CHECK(perm.row(2).isApprox(base.row(3), 1e-12));

  // each row of a single-scene assembly matches the per-object builder
  for (int m = 0; m < 5; ++m) {
    const auto row = build_3d_token<double>(s.objects[static_cast<std::size_t>(m)], s.target().b3d, params);
    for (int c = 0; c < 128; ++c) CHECK(base(m, c) == doctest::Approx(row[static_cast<std::size_t>(c)]).epsilon(1e-12));
  }

  SceneSample missing = s;
  missing.objects[2].f2d.reset();
  auto mparams = InputProjectionParams<double>::create(dims, Modality::kMulti, prng);
  CHECK_THROWS_AS(assemble_tokens<double>(g, missing, Modality::kMulti, mparams), ModalityError);
}

TEST_CASE("toggled-off attributes are zero substituted") {
  std::mt19937_64 rng(13);
  InputDims dims;
  Rng prng(5);
  auto params = InputProjectionParams<double>::create(dims, Modality::k3d, prng);
  ObjectRecord r = random_record(rng, dims);
  const Box3D target{{0.5, 0.5, 0.5}, {0.2, 0.3, 0.4}};
  AttributeToggles off;
  off.f3d = false;
  const auto a = build_3d_token<double>(r, target, params, off);
  ObjectRecord zeroed = r;
  std::fill(zeroed.f3d.begin(), zeroed.f3d.end(), 0.0f);
  CHECK(build_3d_token<double>(zeroed, target, params) == a);
}
