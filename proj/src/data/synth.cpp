#include "cellmamba/data/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>

#include "cellmamba/core/check.hpp"

namespace cm {
namespace {

// Cell fill colors per class bucket, chosen to be far from the background and
// from each other.
constexpr std::array<std::array<int, 3>, 8> kPalette = {{{86, 58, 125},    // violet
                                                         {183, 62, 80},    // crimson
                                                         {54, 110, 156},   // steel blue
                                                         {96, 132, 62},    // olive
                                                         {162, 96, 42},    // ochre
                                                         {52, 130, 118},   // teal
                                                         {140, 70, 140},   // magenta
                                                         {90, 90, 90}}};   // gray

constexpr std::array<int, 3> kBackground = {214, 196, 208};
constexpr double kIouCap = 0.3;
constexpr int kMaxAttempts = 200;

// Size bucket k covers radii [6 + 4k, 10 + 4k].
double radius_lo(int k) { return 6.0 + 4.0 * k; }
double radius_hi(int k) { return 10.0 + 4.0 * k; }

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v + 0.5));
}

}  // namespace

void SynthConfig::validate() const {
  CM_CHECK(n_images >= 1, "synth: need n_images >= 1, got ", n_images);
  CM_CHECK(size == 128 || size == 256, "synth: size must be 128 or 256, got ", size);
  CM_CHECK(num_classes >= 1 && num_classes <= static_cast<int>(kPalette.size()),
           "synth: num_classes must be in [1, ", kPalette.size(), "], got ", num_classes);
  CM_CHECK(density >= 0, "synth: need density >= 0, got ", density);
  CM_CHECK(radius_hi(num_classes - 1) * 2 <= size / 3.0, "synth: largest bucket diameter ",
           radius_hi(num_classes - 1) * 2, " is too big for ", size, "x", size, " images");
}

SynthImage synth_image(const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  const int n = cfg.size;

  SynthImage out;
  out.image.h = n;
  out.image.w = n;
  out.image.rgb.resize(static_cast<std::size_t>(n) * n * 3);
  out.labels.h = n;
  out.labels.w = n;
  out.labels.labels.assign(static_cast<std::size_t>(n) * n, 0);

  // Noisy background.
  for (std::size_t i = 0; i < out.image.rgb.size(); ++i) {
    out.image.rgb[i] = clamp_u8(kBackground[i % 3] + rng.uniform(-12.0, 12.0));
  }

  struct Cell {
    double cx, cy, rx, ry;
    int bucket;
  };
  std::vector<Cell> cells;
  std::vector<BBox> boxes;

  for (int c = 0; c < cfg.density; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      Cell cand;
      cand.bucket = static_cast<int>(rng.uniform_int(0, cfg.num_classes - 1));
      cand.rx = rng.uniform(radius_lo(cand.bucket), radius_hi(cand.bucket));
      cand.ry = rng.uniform(radius_lo(cand.bucket), radius_hi(cand.bucket));
      cand.cx = rng.uniform(cand.rx + 1.0, n - cand.rx - 1.0);
      cand.cy = rng.uniform(cand.ry + 1.0, n - cand.ry - 1.0);
      const BBox box{cand.cx - cand.rx, cand.cy - cand.ry, cand.cx + cand.rx,
                     cand.cy + cand.ry};
      bool ok = true;
      for (const auto& other : boxes) {
        if (iou(box, other) > kIouCap) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      cells.push_back(cand);
      boxes.push_back(box);
      placed = true;
    }
    CM_CHECK(placed, "synth: density ", cfg.density, " cannot satisfy the pairwise IoU cap ",
             kIouCap, " after ", kMaxAttempts, " attempts (cell ", c, ")");
  }

  // Painter's rendering; the label raster is last-writer-wins where ellipses
  // overlap, but the annotation boxes stay analytic.
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& cell = cells[i];
    const auto& color = kPalette[cell.bucket];
    const int y0 = std::max(0, static_cast<int>(std::floor(cell.cy - cell.ry)));
    const int y1 = std::min(n - 1, static_cast<int>(std::ceil(cell.cy + cell.ry)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cell.cx - cell.rx)));
    const int x1 = std::min(n - 1, static_cast<int>(std::ceil(cell.cx + cell.rx)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5 - cell.cx) / cell.rx;
        const double dy = (y + 0.5 - cell.cy) / cell.ry;
        if (dx * dx + dy * dy > 1.0) continue;
        std::uint8_t* px = out.image.pixel(y, x);
        for (int ch = 0; ch < 3; ++ch) {
          px[ch] = clamp_u8(color[ch] + rng.uniform(-10.0, 10.0));
        }
        out.labels.at(y, x) = static_cast<std::uint16_t>(i + 1);
      }
    }

    Annotation a;
    a.bbox = {cell.cx - cell.rx, cell.cy - cell.ry, 2 * cell.rx, 2 * cell.ry};
    a.category_id = cell.bucket + 1;
    out.annotations.push_back(a);
  }
  return out;
}

DatasetManifest synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);

  DatasetManifest m;
  for (int k = 0; k < cfg.num_classes; ++k) {
    m.categories.push_back({k + 1, str_cat("cell", k + 1)});
  }

  Rng rng(cfg.seed);
  for (int i = 0; i < cfg.n_images; ++i) {
    SynthImage si = synth_image(cfg, rng);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04d.png", i);
    write_png_rgb(out_dir + "/" + name, si.image);
    m.images.push_back({i + 1, name, cfg.size, cfg.size});
    for (Annotation a : si.annotations) {
      a.image_id = i + 1;
      m.annotations.push_back(a);
    }
  }
  save_dataset(out_dir + "/manifest.json", m);
  return m;
}

}  // namespace cm
