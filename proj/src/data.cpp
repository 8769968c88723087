#include "xsite/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "xsite/errors.hpp"

namespace xsite {

namespace fs = std::filesystem;

void SiteSpec::validate() const {
  if (!(contrast_scale > 0.0)) throw ConfigError("site spec: contrast_scale must be > 0");
  if (!(noise_sigma >= 0.0)) throw ConfigError("site spec: noise_sigma must be >= 0");
  if (lesion_count_min < 1 || lesion_count_max < lesion_count_min) {
    throw ConfigError("site spec: need 1 <= lesion_count_min <= lesion_count_max");
  }
  if (!(lesion_radius_min > 0.0) || lesion_radius_max < lesion_radius_min) {
    throw ConfigError("site spec: need 0 < lesion_radius_min <= lesion_radius_max");
  }
  if (image_size < 8) throw ConfigError("site spec: image_size must be >= 8");
  if (2.0 * lesion_radius_max >= static_cast<double>(image_size)) {
    throw ConfigError("site spec: lesion_radius_max too large for image_size");
  }
  if (!(texture_amplitude >= 0.0)) throw ConfigError("site spec: texture_amplitude must be >= 0");
  if (!(texture_frequency > 0.0)) throw ConfigError("site spec: texture_frequency must be > 0");
  if (!(distractor_radius_min > 0.0) || distractor_radius_max < distractor_radius_min ||
      2.0 * distractor_radius_max >= static_cast<double>(image_size)) {
    throw ConfigError("site spec: need 0 < distractor_radius_min <= distractor_radius_max < image_size / 2");
  }
}

namespace {

constexpr double kBackgroundLevel = 0.3;
constexpr std::size_t kTextureComponents = 5;
constexpr double kEdgeSoftness = 0.15;

struct TextureComponent {
  double fy, fx;
};

// Site-level texture style: fixed spatial frequencies drawn from the texture seed.
std::vector<TextureComponent> texture_style(std::uint64_t texture_seed, double frequency) {
  std::mt19937_64 rng(texture_seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> freq(0.6 * frequency, 1.4 * frequency), angle(0.0, std::numbers::pi);
  std::vector<TextureComponent> out;
  for (std::size_t k = 0; k < kTextureComponents; ++k) {
    const double f = freq(rng), a = angle(rng);
    out.push_back({f * std::sin(a), f * std::cos(a)});
  }
  return out;
}

Sample synthesize_one(const SiteSpec& spec, const std::vector<TextureComponent>& style, int label,
                      std::size_t index, std::uint64_t seed, SiteId site) {
  std::seed_seq seq{static_cast<std::uint64_t>(seed), static_cast<std::uint64_t>(site),
                    static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = spec.image_size;

  Sample s;
  s.label = label;
  s.site = site;
  s.image = {n, n, std::vector<double>(n * n, 0.0)};

  std::vector<double> phase(style.size()), amp(style.size());
  for (std::size_t k = 0; k < style.size(); ++k) {
    phase[k] = unit(rng) * 2.0 * std::numbers::pi;
    amp[k] = 0.5 + unit(rng);
  }
  const double norm = spec.texture_amplitude / std::sqrt(static_cast<double>(style.size()));
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      double t = 0.0;
      for (std::size_t k = 0; k < style.size(); ++k)
        t += amp[k] * std::sin(style[k].fy * static_cast<double>(y) + style[k].fx * static_cast<double>(x) + phase[k]);
      s.image.at(y, x) = kBackgroundLevel + norm * t;
    }

  auto draw_blobs = [&](std::size_t count, double r_min, double r_max, double intensity_mean, GrayImage* mask) {
    for (std::size_t l = 0; l < count; ++l) {
      const double rx = r_min + unit(rng) * (r_max - r_min);
      const double ry = r_min + unit(rng) * (r_max - r_min);
      const double r = std::max(rx, ry);
      const double span = static_cast<double>(n) - 2.0 * r;
      const double cy = r + unit(rng) * span, cx = r + unit(rng) * span;
      const double theta = unit(rng) * std::numbers::pi;
      const double intensity = intensity_mean * (0.75 + 0.5 * unit(rng));
      const double ct = std::cos(theta), st = std::sin(theta);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double u = (dx * ct + dy * st) / rx, v = (-dx * st + dy * ct) / ry;
          const double d = std::sqrt(u * u + v * v);
          s.image.at(y, x) += intensity / (1.0 + std::exp((d - 1.0) / kEdgeSoftness));
          if (mask && d <= 1.0) mask->at(y, x) = 1.0;
        }
    }
  };

  if (spec.distractor_count_max > 0) {
    std::uniform_int_distribution<std::size_t> count(0, spec.distractor_count_max);
    draw_blobs(count(rng), spec.distractor_radius_min, spec.distractor_radius_max, spec.distractor_intensity, nullptr);
  }
  if (label == 1) {
    s.lesion_mask = {n, n, std::vector<double>(n * n, 0.0)};
    std::uniform_int_distribution<std::size_t> count(spec.lesion_count_min, spec.lesion_count_max);
    draw_blobs(count(rng), spec.lesion_radius_min, spec.lesion_radius_max, spec.lesion_intensity, &s.lesion_mask);
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  for (double& p : s.image.pixels) {
    const double e = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise(rng) : 0.0;
    const double v = std::clamp(spec.contrast_scale * p + spec.brightness_offset + e, 0.0, 1.0);
    p = std::round(v * 255.0) / 255.0;
  }
  return s;
}

fs::path mask_path_for(const fs::path& image_path) {
  fs::path p = image_path;
  p.replace_filename(image_path.stem().string() + "_mask.pgm");
  return p;
}

}  // namespace

Dataset synthesize_site(const SiteSpec& spec, std::size_t n_per_class, std::uint64_t seed, SiteId site) {
  spec.validate();
  if (n_per_class < 1) throw ConfigError("site spec: n_per_class must be >= 1");
  const auto style = texture_style(spec.background_texture_seed, spec.texture_frequency);
  Dataset out(2 * n_per_class);
  const long total = static_cast<long>(out.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < total; ++i) {
    const int label = static_cast<std::size_t>(i) < n_per_class ? 0 : 1;
    const std::size_t index = static_cast<std::size_t>(i) % n_per_class;
    out[i] = synthesize_one(spec, style, label, index, seed, site);
  }
  return out;
}

Manifest generate_site(const SiteSpec& spec, std::size_t n_per_class, std::uint64_t seed, SiteId site,
                       const fs::path& dir, const std::string& prefix) {
  const Dataset data = synthesize_site(spec, n_per_class, seed, site);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  Manifest m;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    std::ostringstream name;
    name << prefix << "site" << site << "_c" << s.label << "_" << (i % n_per_class) << ".pgm";
    write_pgm(dir / name.str(), s.image);
    if (!s.lesion_mask.empty()) write_pgm(mask_path_for(dir / name.str()), s.lesion_mask);
    m.records.push_back({name.str(), s.label, site});
  }
  return m;
}

void write_pgm(const fs::path& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  auto next_token = [&]() {
    std::string tok;
    while (in) {
      const int c = in.get();
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(c)) {
        if (!tok.empty()) break;
      } else if (c != EOF) {
        tok.push_back(static_cast<char>(c));
      }
    }
    return tok;
  };
  if (next_token() != "P5") throw IoError("not a binary PGM (P5): " + path.string());
  GrayImage img;
  std::size_t maxval = 0;
  try {
    img.width = std::stoul(next_token());
    img.height = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    throw IoError("malformed PGM header: " + path.string());
  }
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 255) {
    throw IoError("unsupported PGM geometry or depth: " + path.string());
  }
  std::vector<unsigned char> bytes(img.width * img.height);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError("truncated PGM data: " + path.string());
  img.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<double>(bytes[i]) / static_cast<double>(maxval);
  return img;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "path,label,site\n";
  for (const auto& r : manifest.records) out << r.path << ',' << r.label << ',' << r.site << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "path,label,site") {
    throw IoError("manifest " + path.string() + ": expected header 'path,label,site'");
  }
  Manifest m;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos) {
      throw IoError("manifest " + path.string() + " row " + std::to_string(row) + ": expected 3 fields");
    }
    ManifestRecord r;
    r.path = line.substr(0, c1);
    const std::string label = line.substr(c1 + 1, c2 - c1 - 1), site = line.substr(c2 + 1);
    if (r.path.empty() || (label != "0" && label != "1") || site.empty() ||
        !std::all_of(site.begin(), site.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); })) {
      throw IoError("manifest " + path.string() + " row " + std::to_string(row) + ": malformed record '" + line + "'");
    }
    r.label = label == "1" ? 1 : 0;
    r.site = std::stoul(site);
    m.records.push_back(std::move(r));
  }
  return m;
}

Dataset load_manifest(const fs::path& path, std::size_t height, std::size_t width) {
  const Manifest m = read_manifest(path);
  const fs::path base = path.parent_path();
  Dataset out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) {
    Sample s;
    s.label = r.label;
    s.site = r.site;
    const fs::path image_path = base / r.path;
    try {
      s.image = read_pgm(image_path);
    } catch (const IoError& e) {
      throw IoError("manifest record '" + r.path + "': " + e.what());
    }
    if (s.image.height != height || s.image.width != width) s.image = resize_bilinear(s.image, height, width);
    normalize_image(s.image);
    const fs::path mp = mask_path_for(image_path);
    if (fs::exists(mp)) {
      s.lesion_mask = read_pgm(mp);
      if (s.lesion_mask.height != height || s.lesion_mask.width != width) {
        s.lesion_mask = resize_bilinear(s.lesion_mask, height, width);
      }
      for (double& v : s.lesion_mask.pixels) v = v >= 0.5 ? 1.0 : 0.0;
    }
    out.push_back(std::move(s));
  }
  return out;
}

GrayImage resize_bilinear(const GrayImage& image, std::size_t height, std::size_t width) {
  GrayImage out{height, width, std::vector<double>(height * width)};
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    // Pixel-centre alignment.
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      out.at(y, x) = (1 - wy) * ((1 - wx) * image.at(y0, x0) + wx * image.at(y0, x1)) +
                     wy * ((1 - wx) * image.at(y1, x0) + wx * image.at(y1, x1));
    }
  }
  return out;
}

void normalize_image(GrayImage& image, double variance_floor) {
  const double n = static_cast<double>(image.pixels.size());
  double mean = 0.0;
  for (double v : image.pixels) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : image.pixels) var += (v - mean) * (v - mean);
  var /= n;
  if (var < variance_floor) {
    std::fill(image.pixels.begin(), image.pixels.end(), 0.0);
    return;
  }
  const double inv = 1.0 / std::sqrt(var);
  for (double& v : image.pixels) v = (v - mean) * inv;
}

GrayImage flip_horizontal(const GrayImage& image) {
  GrayImage out = image;
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) out.at(y, x) = image.at(y, image.width - 1 - x);
  return out;
}

GrayImage flip_vertical(const GrayImage& image) {
  GrayImage out = image;
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) out.at(y, x) = image.at(image.height - 1 - y, x);
  return out;
}

GrayImage augment_with(const GrayImage& image, const AugmentChoice& choice) {
  if (choice.offset_y > 2 * kAugmentPad || choice.offset_x > 2 * kAugmentPad) {
    throw ConfigError("augment: crop offset outside the padded image");
  }
  GrayImage out{image.height, image.width, std::vector<double>(image.pixels.size(), 0.0)};
  for (std::size_t y = 0; y < image.height; ++y) {
    const long sy = static_cast<long>(y + choice.offset_y) - static_cast<long>(kAugmentPad);
    if (sy < 0 || sy >= static_cast<long>(image.height)) continue;
    for (std::size_t x = 0; x < image.width; ++x) {
      const long sx = static_cast<long>(x + choice.offset_x) - static_cast<long>(kAugmentPad);
      if (sx >= 0 && sx < static_cast<long>(image.width)) out.at(y, x) = image.at(sy, sx);
    }
  }
  if (choice.flip_horizontal) out = flip_horizontal(out);
  if (choice.flip_vertical) out = flip_vertical(out);
  return out;
}

AugmentChoice sample_augment(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> offset(0, 2 * kAugmentPad);
  std::bernoulli_distribution coin(0.5);
  AugmentChoice c;
  c.offset_y = offset(rng);
  c.offset_x = offset(rng);
  c.flip_horizontal = coin(rng);
  c.flip_vertical = coin(rng);
  return c;
}

GrayImage augment(const GrayImage& image, std::mt19937_64& rng) { return augment_with(image, sample_augment(rng)); }

namespace {

std::vector<std::size_t> shuffled_passes(std::size_t size, std::size_t min_len, std::size_t passes,
                                         std::mt19937_64& rng) {
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm(size);
  for (std::size_t p = 0; p < passes || out.size() < min_len; ++p) {
    for (std::size_t i = 0; i < size; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    out.insert(out.end(), perm.begin(), perm.end());
  }
  out.resize(min_len);
  return out;
}

}  // namespace

std::vector<Batch> make_balanced_batches(std::size_t size_a, std::size_t size_b, std::size_t batch_size,
                                         std::uint64_t seed, std::size_t oversample_factor) {
  if (batch_size == 0 || batch_size % 2 != 0) throw ConfigError("balanced sampler: batch size must be even");
  if (size_a == 0 || size_b == 0) throw ConfigError("balanced sampler: both sites need samples");
  if (oversample_factor == 0) throw ConfigError("balanced sampler: oversample factor must be >= 1");
  const std::size_t half = batch_size / 2;
  const std::size_t larger = std::max(size_a, size_b);
  const std::size_t steps = (larger + half - 1) / half;
  const std::size_t needed = steps * half;
  std::mt19937_64 rng(seed);
  const bool a_larger = size_a >= size_b;
  const auto stream_a = shuffled_passes(size_a, needed, a_larger ? 1 : oversample_factor, rng);
  const auto stream_b = shuffled_passes(size_b, needed, a_larger ? oversample_factor : 1, rng);
  std::vector<Batch> out(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    out[s].reserve(batch_size);
    for (std::size_t i = 0; i < half; ++i) out[s].push_back({0, stream_a[s * half + i]});
    for (std::size_t i = 0; i < half; ++i) out[s].push_back({1, stream_b[s * half + i]});
  }
  return out;
}

std::vector<Batch> make_single_site_batches(std::size_t size, SiteId site, std::size_t batch_size,
                                            std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("sampler: batch size must be >= 1");
  if (size == 0) throw ConfigError("sampler: site has no samples");
  std::mt19937_64 rng(seed);
  const auto order = shuffled_passes(size, size, 1, rng);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < size; start += batch_size) {
    Batch b;
    for (std::size_t i = start; i < std::min(size, start + batch_size); ++i) b.push_back({site, order[i]});
    out.push_back(std::move(b));
  }
  return out;
}

Tensor stack_images(const std::vector<const GrayImage*>& images) {
  if (images.empty()) throw ShapeError("stack_images: no images");
  const std::size_t h = images.front()->height, w = images.front()->width;
  std::vector<double> v;
  v.reserve(images.size() * h * w);
  for (const GrayImage* img : images) {
    if (img->height != h || img->width != w) throw ShapeError("stack_images: image sizes differ");
    v.insert(v.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor({images.size(), 1, h, w}, std::move(v));
}

}  // namespace xsite
