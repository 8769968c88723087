#include "xsite/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "xsite/errors.hpp"
#include "xsite/ops.hpp"

namespace xsite {

SaliencyMap grad_cam(Model& model, const GrayImage& image, std::optional<SiteId> site, int target_class) {
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= model.config().num_classes) {
    throw ConfigError("grad_cam: target class out of range");
  }
  const ForwardResult f = model.forward(stack_images({&image}), site, NormMode::kEval);
  const Tensor target = ops::pick(f.logits, 0, static_cast<std::size_t>(target_class));
  target.backward();

  const std::size_t channels = f.features.dim(1), h = f.features.dim(2), w = f.features.dim(3);
  const std::size_t hw = h * w;
  std::vector<double> weights(channels, 0.0);
  if (f.features.has_grad()) {
    const auto g = f.features.grad();
    for (std::size_t k = 0; k < channels; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += g[k * hw + i];
      weights[k] = s / static_cast<double>(hw);
    }
  }
  for (auto& [name, t] : model.parameters()) t.zero_grad();

  SaliencyMap out;
  out.target_class = target_class;
  out.site = site;
  out.cam = {h, w, std::vector<double>(hw, 0.0)};
  const auto a = f.features.values();
  for (std::size_t i = 0; i < hw; ++i) {
    double v = 0.0;
    for (std::size_t k = 0; k < channels; ++k) v += weights[k] * a[k * hw + i];
    out.cam.pixels[i] = std::max(0.0, v);
  }
  out.degenerate = std::all_of(out.cam.pixels.begin(), out.cam.pixels.end(), [](double v) { return v == 0.0; });
  out.upsampled = resize_bilinear(out.cam, image.height, image.width);
  out.overlay = out.upsampled;
  const auto [lo, hi] = std::minmax_element(out.overlay.pixels.begin(), out.overlay.pixels.end());
  const double mn = *lo, range = *hi - *lo;
  for (double& v : out.overlay.pixels) v = range > 0.0 ? (v - mn) / range : 0.0;
  return out;
}

double lesion_ratio(const SaliencyMap& map, const GrayImage& mask) {
  if (mask.height != map.upsampled.height || mask.width != map.upsampled.width) {
    throw ShapeError("lesion_ratio: mask size differs from the map");
  }
  double in = 0.0, out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    if (mask.pixels[i] >= 0.5) {
      in += map.upsampled.pixels[i];
      ++n_in;
    } else {
      out += map.upsampled.pixels[i];
      ++n_out;
    }
  }
  if (n_in == 0 || n_out == 0) throw ShapeError("lesion_ratio: mask must have both inside and outside pixels");
  const double mean_in = in / static_cast<double>(n_in), mean_out = out / static_cast<double>(n_out);
  if (mean_out == 0.0) return mean_in > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  return mean_in / mean_out;
}

void export_overlay(const SaliencyMap& map, const GrayImage& image, const std::filesystem::path& path) {
  if (image.height != map.overlay.height || image.width != map.overlay.width) {
    throw ShapeError("export_overlay: image size differs from the map");
  }
  const auto [lo, hi] = std::minmax_element(image.pixels.begin(), image.pixels.end());
  const double mn = *lo, range = *hi - *lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(3 * image.pixels.size());
  auto byte = [](double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const double gray = range > 0.0 ? (image.pixels[i] - mn) / range : 0.0;
    bytes.push_back(byte(0.5 * gray + 0.5 * map.overlay.pixels[i]));
    bytes.push_back(byte(0.5 * gray));
    bytes.push_back(byte(0.5 * gray));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void export_map_csv(const SaliencyMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << std::setprecision(17);
  for (std::size_t y = 0; y < map.cam.height; ++y) {
    for (std::size_t x = 0; x < map.cam.width; ++x) out << (x ? "," : "") << map.cam.at(y, x);
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace xsite
