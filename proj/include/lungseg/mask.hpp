#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "lungseg/errors.hpp"

namespace lungseg {

/// Binary segmentation mask, row-major, values strictly 0 or 1.
struct Mask {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> v;

  Mask() = default;
  Mask(std::size_t height, std::size_t width)
      : h(height), w(width), v(height * width, 0) {}

  std::size_t size() const { return v.size(); }

  std::uint8_t& at(std::size_t y, std::size_t x) { return v[y * w + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return v[y * w + x]; }

  std::size_t foreground_count() const {
    std::size_t n = 0;
    for (auto p : v) n += p;
    return n;
  }

  void validate() const {
    if (v.size() != h * w) throw ShapeError("mask buffer does not match its dims");
    for (auto p : v) {
      if (p > 1) throw DataError("mask is not binary");
    }
  }

  bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }
};

}  // namespace lungseg
