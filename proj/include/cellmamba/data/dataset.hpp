#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "cellmamba/data/image.hpp"
#include "cellmamba/eval/boxes.hpp"

namespace cm {

// COCO-style box dataset: a JSON manifest next to the image files.

struct ManifestImage {
  int id = 0;
  std::string file;  // path relative to the manifest's directory
  int width = 0;
  int height = 0;
};

struct Annotation {
  int image_id = 0;
  std::array<double, 4> bbox{};  // [x, y, w, h] in pixels
  int category_id = 0;
};

struct Category {
  int id = 0;
  std::string name;
};

struct DatasetManifest {
  std::vector<ManifestImage> images;
  std::vector<Annotation> annotations;
  std::vector<Category> categories;

  // Throws ValidationError listing every offender: duplicate ids, dangling
  // image/category references, and boxes with no area left after clipping to
  // the image bounds (clipping mutates the stored boxes).
  void validate();

  // category_id -> dense class index, ordered by ascending id.
  std::map<int, int> class_index() const;

  // category_id -> number of annotations.
  std::map<int, int> per_class_counts() const;
};

DatasetManifest manifest_from_json(const std::string& text);
std::string manifest_to_json(const DatasetManifest& m);

// Reads, parses, and validates. Relative image paths stay relative; callers
// resolve them against the manifest's directory (see dataset_root).
DatasetManifest load_dataset(const std::string& manifest_path);
void save_dataset(const std::string& manifest_path, const DatasetManifest& m);

// Directory containing a manifest file ("." when the path has no directory).
std::string dataset_root(const std::string& manifest_path);

// Instance-mask input: a label raster plus an optional instance-id -> category
// mapping for datasets that ship per-instance classes separately.
struct InstanceMask {
  LabelRaster raster;
  std::map<int, int> instance_category;  // empty -> every instance gets default_category
};

// Tight axis-aligned box per instance id, in [x, y, w, h] with
// x = min col, y = min row, w = max col + 1 - x, h = max row + 1 - y.
// Ids with zero pixels produce nothing.
std::vector<Annotation> mask_to_bboxes(const InstanceMask& mask, int image_id = 0,
                                       int default_category = 1);

// One tile of a grid patching pass.
struct Patch {
  ImageU8 image;
  std::vector<Annotation> annotations;  // translated to patch coordinates
  int x0 = 0;
  int y0 = 0;  // tile origin in the source image
};

// Non-overlapping by default (stride = size). A box survives into a tile only
// if at least half of its area remains after clipping to the tile.
std::vector<Patch> extract_patches(const ImageU8& image,
                                   const std::vector<Annotation>& annotations, int size,
                                   int stride = 0, double min_area_fraction = 0.5);

// Annotation [x,y,w,h] -> corner-form box.
inline BBox annotation_box(const Annotation& a) {
  return {a.bbox[0], a.bbox[1], a.bbox[0] + a.bbox[2], a.bbox[1] + a.bbox[3]};
}

}  // namespace cm
