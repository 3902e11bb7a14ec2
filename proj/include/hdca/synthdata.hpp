#pragma once

// Procedural two-level scenes: sky/ground background plus objects whose body
// encloses a smaller part. Body colors are shared across object types; the
// part color is what tells the types apart.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "hdca/label_map.hpp"
#include "hdca/tensor.hpp"

namespace hdca {

struct SceneSample {
  Tensor image;  // float32 [3,H,W] in [0,1]
  LabelMap labels;
};

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  int classes = 6;  // 0 sky, 1 ground, then (body, part) per object type
  int min_objects = 1;
  int max_objects = 3;
  std::uint64_t seed = 0;

  void validate() const;
  int object_types() const { return (classes - 2) / 2; }
};

inline constexpr std::uint8_t kSkyClass = 0;
inline constexpr std::uint8_t kGroundClass = 1;
inline std::uint8_t body_class(int type) { return static_cast<std::uint8_t>(2 + 2 * type); }
inline std::uint8_t part_class(int type) { return static_cast<std::uint8_t>(3 + 2 * type); }

struct Box {
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open
  bool contains(std::size_t y, std::size_t x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

struct SceneObject {
  int type = 0;
  Box body;
  Box part;
};

/// Generates scene `index` of the corpus described by `spec`; objects are
/// reported alongside in painting order.
SceneSample generate_scene(const SceneSpec& spec, std::uint64_t index,
                           std::vector<SceneObject>* objects = nullptr);

}  // namespace hdca
