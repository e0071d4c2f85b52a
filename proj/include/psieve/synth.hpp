#pragma once

#include <cmath>
#include <cstdint>

#include "psieve/common.hpp"
#include "psieve/dataset.hpp"

namespace psieve::data {

// HSV (h in degrees) to RGB, all components in [0,1].
inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = std::fmod(h, 360.0);
  if (h < 0) h += 360.0;
  double c = v * s;
  double x = c * (1.0 - std::fabs(std::fmod(h / 60.0, 2.0) - 1.0));
  double m = v - c;
  double r = 0, g = 0, b = 0;
  if (h < 60) { r = c; g = x; }
  else if (h < 120) { r = x; g = c; }
  else if (h < 180) { g = c; b = x; }
  else if (h < 240) { g = x; b = c; }
  else if (h < 300) { r = x; b = c; }
  else { r = c; b = x; }
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

namespace detail {

enum class Shape { disk, square, triangle, ring };

inline bool inside_shape(Shape sh, double dy, double dx, double r) {
  switch (sh) {
    case Shape::disk:
      return dy * dy + dx * dx <= r * r;
    case Shape::square:
      return std::fabs(dy) <= 0.9 * r && std::fabs(dx) <= 0.9 * r;
    case Shape::triangle: {
      // Upward triangle: vertices at angles 90, 210, 330 degrees (y axis points down).
      double vy[3], vx[3];
      for (int k = 0; k < 3; ++k) {
        double a = (90.0 + 120.0 * k) * M_PI / 180.0;
        vy[k] = -r * std::sin(a);
        vx[k] = r * std::cos(a);
      }
      for (int k = 0; k < 3; ++k) {
        int j = (k + 1) % 3;
        double cross = (vx[j] - vx[k]) * (dy - vy[k]) - (vy[j] - vy[k]) * (dx - vx[k]);
        if (cross > 0) return false;
      }
      return true;
    }
    case Shape::ring: {
      double d2 = dy * dy + dx * dx;
      return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
    }
  }
  return false;
}

// Coverage fraction of the pixel (row,col) via 2x2 supersampling.
inline double coverage(Shape sh, int row, int col, double cy, double cx, double r) {
  static constexpr double off[2] = {0.25, 0.75};
  int hits = 0;
  for (double oy : off)
    for (double ox : off)
      if (inside_shape(sh, row + oy - cy, col + ox - cx, r)) ++hits;
  return hits / 4.0;
}

}  // namespace detail

// One glyph image, fully determined by (seed, cls, index). Shapes cycle with
// the class index so neighbouring classes differ in both hue and outline.
inline Image render_glyph(uint64_t seed, uint16_t num_classes, uint16_t cls, uint32_t index) {
  Rng rng(seed_mix({seed, cls, index}));
  auto shape = detail::Shape(cls % 4);
  double rgb[3];
  hsv_to_rgb(360.0 * cls / num_classes, 0.85, 0.92, rgb);

  double base = 110.0 / 255.0 + (rng.next_double() - 0.5) * (40.0 / 255.0);
  double cy = 16.0 + (rng.next_double() * 2.0 - 1.0) * 3.0;
  double cx = 16.0 + (rng.next_double() * 2.0 - 1.0) * 3.0;
  double r = 8.0 * (0.85 + rng.next_double() * 0.30);

  Image img;
  for (int row = 0; row < kImageSide; ++row) {
    for (int col = 0; col < kImageSide; ++col) {
      double a = detail::coverage(shape, row, col, cy, cx, r);
      for (int ch = 0; ch < kChannels; ++ch) {
        double v = base * (1.0 - a) + rgb[ch] * a;
        v += (rng.next_double() * 2.0 - 1.0) * (10.0 / 255.0);
        img.at(row, col, ch) = quantize_unit(v);
      }
    }
  }
  return img;
}

// Balanced synthetic dataset: per_class images for each of num_classes
// classes, split per class into test = per_class/4, val = a tenth of the
// remainder, train = the rest. Fully determined by the seed.
inline DatasetBundle generate_synthetic_dataset(uint16_t num_classes, uint32_t per_class,
                                                uint64_t seed) {
  if (num_classes < 2 || num_classes > 256)
    throw ParameterError("class count must be in [2,256], got " + std::to_string(num_classes));
  if (per_class < 20)
    throw ParameterError("need at least 20 images per class, got " + std::to_string(per_class));

  uint32_t n_test = per_class / 4;
  uint32_t n_val = (per_class - n_test) / 10;

  DatasetBundle b;
  b.num_classes = num_classes;
  for (auto* ds : {&b.train, &b.val, &b.test}) ds->num_classes = num_classes;
  b.train.split = Split::train;
  b.val.split = Split::val;
  b.test.split = Split::test;

  for (uint16_t cls = 0; cls < num_classes; ++cls) {
    for (uint32_t i = 0; i < per_class; ++i) {
      LabeledDataset* dst = &b.train;
      if (i < n_test) dst = &b.test;
      else if (i < n_test + n_val) dst = &b.val;
      dst->images.push_back(render_glyph(seed, num_classes, cls, i));
      dst->labels.push_back(cls);
      dst->poison_flags.push_back(0);
    }
  }
  for (auto* ds : {&b.train, &b.val, &b.test}) ds->check();
  return b;
}

}  // namespace psieve::data
