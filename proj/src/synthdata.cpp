#include "hdca/synthdata.hpp"

#include "hdca/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace hdca {

void SceneSpec::validate() const {
  if (height < 8 || width < 8) throw std::invalid_argument("scene size must be at least 8x8");
  if (classes < 2 || classes > 32 || classes % 2 != 0) {
    throw std::invalid_argument("scene classes must be an even number in [2,32], got " +
                                std::to_string(classes));
  }
  if (min_objects < 0 || max_objects < min_objects) {
    throw std::invalid_argument("scene object count range is invalid");
  }
}

namespace {

using Color = std::array<double, 3>;

Color jitter(const Color& base, double amount, Rng& rng) {
  Color c;
  for (int i = 0; i < 3; ++i) c[i] = std::clamp(base[i] + rng.uniform(-amount, amount), 0.0, 1.0);
  return c;
}

Color part_color(int type) {
  static const Color fixed[] = {{0.90, 0.12, 0.12}, {0.95, 0.85, 0.10}};
  if (type < 2) return fixed[type];
  // Remaining types walk the hue circle at full saturation.
  const double h = std::fmod(0.55 + 0.29 * type, 1.0) * 6.0;
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  const int sector = static_cast<int>(h);
  Color c{};
  switch (sector) {
    case 0: c = {1, x, 0}; break;
    case 1: c = {x, 1, 0}; break;
    case 2: c = {0, 1, x}; break;
    case 3: c = {0, x, 1}; break;
    case 4: c = {x, 0, 1}; break;
    default: c = {1, 0, x}; break;
  }
  for (auto& v : c) v = 0.1 + 0.8 * v;
  return c;
}

struct Shape2d {
  Box box;
  bool ellipse = false;

  bool covers(std::size_t y, std::size_t x) const {
    if (!box.contains(y, x)) return false;
    if (!ellipse) return true;
    const double cy = 0.5 * static_cast<double>(box.y0 + box.y1);
    const double cx = 0.5 * static_cast<double>(box.x0 + box.x1);
    const double ry = 0.5 * static_cast<double>(box.y1 - box.y0);
    const double rx = 0.5 * static_cast<double>(box.x1 - box.x0);
    const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
    const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  }
};

std::size_t scaled(double fraction, std::size_t dim, std::size_t minimum) {
  return std::max(minimum, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(dim))));
}

}  // namespace

SceneSample generate_scene(const SceneSpec& spec, std::uint64_t index,
                           std::vector<SceneObject>* objects) {
  spec.validate();
  Rng rng(spec.seed, index);
  const std::size_t h = spec.height, w = spec.width, plane = h * w;

  std::vector<Color> color(plane);
  LabelMap labels(h, w);

  // Background: wavy horizon between sky and ground.
  const double base = rng.uniform(0.3, 0.6) * static_cast<double>(h);
  const double a1 = rng.uniform(0.02, 0.08) * static_cast<double>(h);
  const double a2 = rng.uniform(0.0, 0.04) * static_cast<double>(h);
  const double f1 = rng.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / static_cast<double>(w);
  const double f2 = rng.uniform(2.0, 4.0) * 2.0 * std::numbers::pi / static_cast<double>(w);
  const double p1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double p2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const Color sky = jitter({0.45, 0.62, 0.88}, 0.08, rng);
  const Color ground = jitter({0.42, 0.36, 0.22}, 0.08, rng);
  for (std::size_t x = 0; x < w; ++x) {
    const double xf = static_cast<double>(x);
    const double horizon = base + a1 * std::sin(f1 * xf + p1) + a2 * std::sin(f2 * xf + p2);
    for (std::size_t y = 0; y < h; ++y) {
      const bool is_sky = static_cast<double>(y) + 0.5 < horizon;
      labels.at(y, x) = is_sky ? kSkyClass : kGroundClass;
      const double shade = 0.9 + 0.2 * static_cast<double>(y) / static_cast<double>(h);
      const Color& c = is_sky ? sky : ground;
      for (int i = 0; i < 3; ++i) color[y * w + x][i] = c[i] * shade;
    }
  }

  const int types = spec.object_types();
  if (objects) objects->clear();
  if (types > 0) {
    const auto count = rng.integer(static_cast<std::size_t>(spec.min_objects),
                                   static_cast<std::size_t>(spec.max_objects));
    for (std::size_t o = 0; o < count; ++o) {
      const int type = static_cast<int>(rng.integer(0, static_cast<std::size_t>(types - 1)));
      Shape2d body;
      body.ellipse = rng.uniform() < 0.5;
      const std::size_t bh = std::min(h - 2, scaled(rng.uniform(0.3, 0.6), h, 6));
      const std::size_t bw = std::min(w, scaled(rng.uniform(0.3, 0.6), w, 6));
      // The first and last rows stay background, so sky and ground always appear.
      body.box.y0 = rng.integer(1, h - 1 - bh);
      body.box.x0 = rng.integer(0, w - bw);
      body.box.y1 = body.box.y0 + bh;
      body.box.x1 = body.box.x0 + bw;

      // The part sits inside the rectangle inscribed in the body shape.
      Shape2d part;
      part.ellipse = rng.uniform() < 0.5;
      const double inner = body.ellipse ? 0.7 : 0.9;
      const std::size_t ih = std::max<std::size_t>(2, static_cast<std::size_t>(inner * static_cast<double>(bh)));
      const std::size_t iw = std::max<std::size_t>(2, static_cast<std::size_t>(inner * static_cast<double>(bw)));
      const std::size_t ph = std::min(ih, scaled(rng.uniform(0.3, 0.45), bh, 3));
      const std::size_t pw = std::min(iw, scaled(rng.uniform(0.3, 0.45), bw, 3));
      const std::size_t iy0 = body.box.y0 + (bh - ih) / 2;
      const std::size_t ix0 = body.box.x0 + (bw - iw) / 2;
      part.box.y0 = iy0 + rng.integer(0, ih - ph);
      part.box.x0 = ix0 + rng.integer(0, iw - pw);
      part.box.y1 = part.box.y0 + ph;
      part.box.x1 = part.box.x0 + pw;

      const double gray = rng.uniform(0.3, 0.8);
      const Color body_color = jitter({gray, gray, gray}, 0.08, rng);
      const Color part_tint = jitter(part_color(type), 0.06, rng);
      for (std::size_t y = body.box.y0; y < body.box.y1; ++y) {
        for (std::size_t x = body.box.x0; x < body.box.x1; ++x) {
          if (!body.covers(y, x)) continue;
          const bool in_part = part.covers(y, x);
          labels.at(y, x) = in_part ? part_class(type) : body_class(type);
          color[y * w + x] = in_part ? part_tint : body_color;
        }
      }
      if (objects) objects->push_back({type, body.box, part.box});
    }
  }

  SceneSample sample;
  sample.image = Tensor({3, h, w}, DType::Float32);
  auto d = sample.image.data<float>();
  for (std::size_t j = 0; j < plane; ++j) {
    for (std::size_t c = 0; c < 3; ++c) {
      d[c * plane + j] = static_cast<float>(std::clamp(color[j][c] + 0.04 * rng.normal(), 0.0, 1.0));
    }
  }
  sample.labels = std::move(labels);
  return sample;
}

}  // namespace hdca
