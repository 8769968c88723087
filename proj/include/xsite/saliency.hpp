#pragma once

#include <filesystem>
#include <optional>

#include "xsite/data.hpp"
#include "xsite/model.hpp"

namespace xsite {

struct SaliencyMap {
  GrayImage cam;        // relu(sum_k w_k A_k) at feature resolution, >= 0
  GrayImage upsampled;  // cam bilinearly resized to the input size, not rescaled
  GrayImage overlay;    // upsampled, min-max scaled to [0,1] (all zero when flat)
  int target_class = 1;
  std::optional<SiteId> site;
  bool degenerate = false;  // cam is identically zero
};

/// Gradient-weighted class activation over the fused feature maps that feed
/// global pooling. Runs the model in eval mode; parameter grads are cleared
/// afterwards so the call leaves no trace on the model.
SaliencyMap grad_cam(Model& model, const GrayImage& image, std::optional<SiteId> site, int target_class);

// Mean of `upsampled` inside mask (>= 0.5) over mean outside; +inf when only the inside is non-zero.
// Throws ShapeError when sizes differ or the mask is empty or full.
double lesion_ratio(const SaliencyMap& map, const GrayImage& mask);

// P6 overlay: red = 0.5*gray + 0.5*map, green = blue = 0.5*gray, gray being the min-max scaled image.
void export_overlay(const SaliencyMap& map, const GrayImage& image, const std::filesystem::path& path);

// Feature-resolution map as a CSV grid.
void export_map_csv(const SaliencyMap& map, const std::filesystem::path& path);

}  // namespace xsite
