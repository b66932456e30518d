#include "rsvm/plot.hpp"

#include <algorithm>
#include <cmath>

#include "rsvm/image_io.hpp"

namespace rsvm {

namespace {

struct Canvas {
  ImageU8 img;
  Canvas(int w, int h) {
    img.width = w;
    img.height = h;
    img.pixels.assign(static_cast<size_t>(w) * h * 3, 255);
  }
  void put(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    img.at(y, x, 0) = r;
    img.at(y, x, 1) = g;
    img.at(y, x, 2) = b;
  }
  void line(double x0, double y0, double x1, double y1, uint8_t r, uint8_t g, uint8_t b) {
    double dx = x1 - x0, dy = y1 - y0;
    int steps = static_cast<int>(std::max(std::abs(dx), std::abs(dy))) + 1;
    for (int i = 0; i <= steps; ++i) {
      double t = static_cast<double>(i) / steps;
      int x = static_cast<int>(std::lround(x0 + t * dx));
      int y = static_cast<int>(std::lround(y0 + t * dy));
      put(x, y, r, g, b);
      put(x + 1, y, r, g, b);  // thicken
    }
  }
};

}  // namespace

void render_curves_png(const std::filesystem::path& file, const std::vector<double>& loss,
                       const std::vector<double>& accuracy) {
  const int w = 640, h = 400, margin = 40;
  Canvas cv(w, h);
  cv.line(margin, h - margin, w - margin / 2, h - margin, 0, 0, 0);  // x axis
  cv.line(margin, h - margin, margin, margin / 2, 0, 0, 0);          // y axis
  if (loss.empty()) {
    write_png_rgb(file, cv.img);
    return;
  }
  double lmax = *std::max_element(loss.begin(), loss.end());
  double lmin = *std::min_element(loss.begin(), loss.end());
  if (lmax <= lmin) lmax = lmin + 1.0;
  const double span_x = static_cast<double>(w - 1.5 * margin);
  const double span_y = static_cast<double>(h - 1.5 * margin);
  auto px = [&](size_t i) {
    return margin + span_x * (loss.size() > 1 ? static_cast<double>(i) / (loss.size() - 1) : 0.5);
  };
  for (size_t i = 0; i + 1 < loss.size(); ++i) {
    auto ly = [&](double v) { return (h - margin) - span_y * (v - lmin) / (lmax - lmin); };
    cv.line(px(i), ly(loss[i]), px(i + 1), ly(loss[i + 1]), 200, 30, 30);
  }
  for (size_t i = 0; i + 1 < accuracy.size() && i + 1 < loss.size(); ++i) {
    auto ay = [&](double v) { return (h - margin) - span_y * std::clamp(v, 0.0, 1.0); };
    cv.line(px(i), ay(accuracy[i]), px(i + 1), ay(accuracy[i + 1]), 30, 60, 200);
  }
  write_png_rgb(file, cv.img);
}

}  // namespace rsvm
