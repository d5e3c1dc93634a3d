#pragma once

#include <algorithm>
#include <cmath>

#include "tempotrack/common.hpp"

namespace tempotrack {

// Axis-aligned box, center form, continuous pixel coordinates.
struct BBox {
  double cx = 0, cy = 0, w = 0, h = 0;

  static BBox from_corner(double x, double y, double w, double h) {
    return {x + w / 2.0, y + h / 2.0, w, h};
  }
  double x0() const { return cx - w / 2.0; }
  double y0() const { return cy - h / 2.0; }
  double x1() const { return cx + w / 2.0; }
  double y1() const { return cy + h / 2.0; }

  bool valid() const { return w > 0 && h > 0 && std::isfinite(cx) && std::isfinite(cy); }

  // Shifts the box so it lies inside [0,fw]x[0,fh]; the size is capped first.
  BBox clamped(double fw, double fh) const {
    BBox b = *this;
    b.w = std::clamp(b.w, 1.0, fw);
    b.h = std::clamp(b.h, 1.0, fh);
    b.cx = std::clamp(b.cx, b.w / 2.0, fw - b.w / 2.0);
    b.cy = std::clamp(b.cy, b.h / 2.0, fh - b.h / 2.0);
    return b;
  }
};

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Center location error in pixels.
inline double cle(const BBox& a, const BBox& b) {
  return std::hypot(a.cx - b.cx, a.cy - b.cy);
}

}  // namespace tempotrack
