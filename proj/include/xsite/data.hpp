#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "xsite/batch_norm.hpp"
#include "xsite/tensor.hpp"

namespace xsite {

/// Intensity and lesion statistics of one synthetic site.
struct SiteSpec {
  double contrast_scale = 1.0;
  double brightness_offset = 0.0;
  double noise_sigma = 0.05;
  double lesion_intensity = 0.35;
  std::size_t lesion_count_min = 1;
  std::size_t lesion_count_max = 3;
  double lesion_radius_min = 2.0;
  double lesion_radius_max = 4.5;
  double texture_amplitude = 0.08;
  double texture_frequency = 0.4;  // rad/pixel; components drawn in [0.6, 1.4] x this
  std::uint64_t background_texture_seed = 0;
  // Label-independent bright blobs in both classes; never part of the lesion mask.
  std::size_t distractor_count_max = 0;  // uniform in [0, max] per image
  double distractor_intensity = 0.0;
  double distractor_radius_min = 1.5;
  double distractor_radius_max = 3.0;
  std::size_t image_size = 32;

  void validate() const;  // throws ConfigError
};

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // row-major

  bool empty() const { return pixels.empty(); }
  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

struct Sample {
  GrayImage image;
  int label = 0;  // 0 non-infected, 1 infected
  SiteId site = 0;
  GrayImage lesion_mask;  // 1 inside a lesion, 0 elsewhere; empty when unknown
};

using Dataset = std::vector<Sample>;

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  int label = 0;
  SiteId site = 0;
};

struct Manifest {
  std::vector<ManifestRecord> records;
};

/// In-memory synthesis of 2*n_per_class images (class-balanced, label-0 first),
/// quantized to 8 bits exactly as the PGM route stores them. Positives include
/// their lesion mask.
Dataset synthesize_site(const SiteSpec& spec, std::size_t n_per_class, std::uint64_t seed, SiteId site);

/// Writes synthesized images (and positive-class masks as `<stem>_mask.pgm`)
/// under `dir` and returns their records. Throws IoError naming the path.
Manifest generate_site(const SiteSpec& spec, std::size_t n_per_class, std::uint64_t seed, SiteId site,
                       const std::filesystem::path& dir, const std::string& prefix = "");

void write_pgm(const std::filesystem::path& path, const GrayImage& image);  // values clipped to [0,1]
GrayImage read_pgm(const std::filesystem::path& path);                      // values k/255

// CSV `path,label,site` with header, LF line endings.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

/// Decodes every record, resizes to height x width and normalizes per image.
/// Masks found next to an image are resized and attached. Errors name the record.
Dataset load_manifest(const std::filesystem::path& path, std::size_t height, std::size_t width);

GrayImage resize_bilinear(const GrayImage& image, std::size_t height, std::size_t width);

// Zero mean / unit variance in place; images with variance below the floor become all zeros.
void normalize_image(GrayImage& image, double variance_floor = 1e-10);

struct AugmentChoice {
  std::size_t offset_y = 4;  // crop origin in the padded image; pad is the centre
  std::size_t offset_x = 4;
  bool flip_horizontal = false;
  bool flip_vertical = false;
};

inline constexpr std::size_t kAugmentPad = 4;

// Zero-pads by kAugmentPad, crops back to the original size at the chosen offset, then flips.
GrayImage augment_with(const GrayImage& image, const AugmentChoice& choice);
AugmentChoice sample_augment(std::mt19937_64& rng);
GrayImage augment(const GrayImage& image, std::mt19937_64& rng);

GrayImage flip_horizontal(const GrayImage& image);
GrayImage flip_vertical(const GrayImage& image);

struct BatchRef {
  SiteId site;
  std::size_t index;  // position within that site's dataset
};

using Batch = std::vector<BatchRef>;

/// One epoch of site-balanced batches: each holds batch_size/2 samples per site.
/// The smaller site is repeated `oversample_factor` times (shuffled per pass);
/// the epoch length is set by one pass over the larger site. A stream that runs
/// short wraps with another shuffled pass. Throws ConfigError for odd batch_size
/// or an empty site.
std::vector<Batch> make_balanced_batches(std::size_t size_a, std::size_t size_b, std::size_t batch_size,
                                         std::uint64_t seed, std::size_t oversample_factor = 4);

// One shuffled pass over a single site; the final batch may be short.
std::vector<Batch> make_single_site_batches(std::size_t size, SiteId site, std::size_t batch_size,
                                            std::uint64_t seed);

// Stacks images into an [N,1,H,W] tensor.
Tensor stack_images(const std::vector<const GrayImage*>& images);

}  // namespace xsite
