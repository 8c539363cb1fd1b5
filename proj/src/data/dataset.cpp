#include "cellmamba/data/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cellmamba/core/check.hpp"

namespace cm {

using json = nlohmann::json;

void DatasetManifest::validate() {
  std::vector<std::string> problems;
  std::set<int> image_ids, category_ids;
  std::map<int, const ManifestImage*> by_id;

  for (const auto& im : images) {
    if (!image_ids.insert(im.id).second) {
      problems.push_back(str_cat("duplicate image id ", im.id));
    }
    if (im.width <= 0 || im.height <= 0) {
      problems.push_back(str_cat("image ", im.id, " has non-positive size ", im.width, "x",
                                 im.height));
    }
    if (im.file.empty()) problems.push_back(str_cat("image ", im.id, " has empty file path"));
    by_id[im.id] = &im;
  }
  for (const auto& c : categories) {
    if (!category_ids.insert(c.id).second) {
      problems.push_back(str_cat("duplicate category id ", c.id));
    }
  }

  for (std::size_t i = 0; i < annotations.size(); ++i) {
    auto& a = annotations[i];
    const auto it = by_id.find(a.image_id);
    if (it == by_id.end()) {
      problems.push_back(str_cat("annotation ", i, " references missing image id ", a.image_id));
      continue;
    }
    if (!category_ids.count(a.category_id)) {
      problems.push_back(
          str_cat("annotation ", i, " references missing category id ", a.category_id));
    }
    if (a.bbox[2] <= 0 || a.bbox[3] <= 0) {
      problems.push_back(str_cat("annotation ", i, " has non-positive box size ", a.bbox[2], "x",
                                 a.bbox[3]));
      continue;
    }
    // Clip to the image; a box entirely outside has no valid interpretation.
    const double w = it->second->width, h = it->second->height;
    const double x0 = std::clamp(a.bbox[0], 0.0, w);
    const double y0 = std::clamp(a.bbox[1], 0.0, h);
    const double x1 = std::clamp(a.bbox[0] + a.bbox[2], 0.0, w);
    const double y1 = std::clamp(a.bbox[1] + a.bbox[3], 0.0, h);
    if (x1 - x0 <= 0 || y1 - y0 <= 0) {
      problems.push_back(
          str_cat("annotation ", i, " lies outside image ", a.image_id, " bounds"));
      continue;
    }
    a.bbox = {x0, y0, x1 - x0, y1 - y0};
  }

  if (!problems.empty()) {
    std::ostringstream os;
    os << "manifest validation failed (" << problems.size() << " problem"
       << (problems.size() == 1 ? "" : "s") << "):";
    for (const auto& p : problems) os << "\n  - " << p;
    throw ValidationError(os.str());
  }
}

std::map<int, int> DatasetManifest::class_index() const {
  std::map<int, int> out;
  for (const auto& c : categories) out[c.id] = 0;  // std::map sorts by id
  int next = 0;
  for (auto& [id, idx] : out) idx = next++;
  return out;
}

std::map<int, int> DatasetManifest::per_class_counts() const {
  std::map<int, int> out;
  for (const auto& c : categories) out[c.id] = 0;
  for (const auto& a : annotations) ++out[a.category_id];
  return out;
}

DatasetManifest manifest_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(str_cat("manifest parse error: ", e.what()));
  }
  DatasetManifest m;
  try {
    for (const auto& ji : j.value("images", json::array())) {
      ManifestImage im;
      im.id = ji.at("id").get<int>();
      im.file = ji.at("file").get<std::string>();
      im.width = ji.at("width").get<int>();
      im.height = ji.at("height").get<int>();
      m.images.push_back(std::move(im));
    }
    for (const auto& ja : j.value("annotations", json::array())) {
      Annotation a;
      a.image_id = ja.at("image_id").get<int>();
      const auto& b = ja.at("bbox");
      CM_CHECK(b.is_array() && b.size() == 4, "manifest: bbox must be [x,y,w,h]");
      for (int k = 0; k < 4; ++k) a.bbox[k] = b[k].get<double>();
      a.category_id = ja.at("category_id").get<int>();
      m.annotations.push_back(a);
    }
    for (const auto& jc : j.value("categories", json::array())) {
      m.categories.push_back({jc.at("id").get<int>(), jc.at("name").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw ValidationError(str_cat("manifest field error: ", e.what()));
  }
  return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json j;
  j["images"] = json::array();
  for (const auto& im : m.images) {
    j["images"].push_back(
        {{"id", im.id}, {"file", im.file}, {"width", im.width}, {"height", im.height}});
  }
  j["annotations"] = json::array();
  for (const auto& a : m.annotations) {
    j["annotations"].push_back({{"image_id", a.image_id},
                                {"bbox", {a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]}},
                                {"category_id", a.category_id}});
  }
  j["categories"] = json::array();
  for (const auto& c : m.categories) {
    j["categories"].push_back({{"id", c.id}, {"name", c.name}});
  }
  return j.dump(2) + "\n";
}

DatasetManifest load_dataset(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  CM_CHECK(is.good(), "cannot open manifest '", manifest_path, "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  DatasetManifest m = manifest_from_json(buf.str());
  m.validate();
  return m;
}

void save_dataset(const std::string& manifest_path, const DatasetManifest& m) {
  std::ofstream os(manifest_path);
  CM_CHECK(os.good(), "cannot open '", manifest_path, "' for writing");
  os << manifest_to_json(m);
  CM_CHECK(os.good(), "writing manifest '", manifest_path, "' failed");
}

std::string dataset_root(const std::string& manifest_path) {
  const auto slash = manifest_path.find_last_of('/');
  return slash == std::string::npos ? std::string(".") : manifest_path.substr(0, slash);
}

std::vector<Annotation> mask_to_bboxes(const InstanceMask& mask, int image_id,
                                       int default_category) {
  const LabelRaster& r = mask.raster;
  CM_CHECK(r.h > 0 && r.w > 0, "mask_to_bboxes: empty raster");
  CM_CHECK(r.labels.size() == static_cast<std::size_t>(r.h) * r.w,
           "mask_to_bboxes: raster buffer is ", r.labels.size(), " samples for ", r.h, "x", r.w);

  struct Extent {
    int min_x, min_y, max_x, max_y;
  };
  std::map<int, Extent> extents;  // only ids that actually have pixels
  for (int y = 0; y < r.h; ++y) {
    for (int x = 0; x < r.w; ++x) {
      const int id = r.at(y, x);
      if (id == 0) continue;
      auto [it, fresh] = extents.try_emplace(id, Extent{x, y, x, y});
      if (!fresh) {
        it->second.min_x = std::min(it->second.min_x, x);
        it->second.min_y = std::min(it->second.min_y, y);
        it->second.max_x = std::max(it->second.max_x, x);
        it->second.max_y = std::max(it->second.max_y, y);
      }
    }
  }

  std::vector<Annotation> out;
  out.reserve(extents.size());
  for (const auto& [id, e] : extents) {
    Annotation a;
    a.image_id = image_id;
    a.bbox = {static_cast<double>(e.min_x), static_cast<double>(e.min_y),
              static_cast<double>(e.max_x + 1 - e.min_x), static_cast<double>(e.max_y + 1 - e.min_y)};
    const auto ci = mask.instance_category.find(id);
    a.category_id = ci == mask.instance_category.end() ? default_category : ci->second;
    out.push_back(a);
  }
  return out;
}

std::vector<Patch> extract_patches(const ImageU8& image,
                                   const std::vector<Annotation>& annotations, int size,
                                   int stride, double min_area_fraction) {
  CM_CHECK(size == 128 || size == 256, "extract_patches: size must be 128 or 256, got ", size);
  CM_CHECK(size <= image.w && size <= image.h, "extract_patches: ", size,
           " patch does not fit in ", image.w, "x", image.h, " image");
  if (stride <= 0) stride = size;

  std::vector<Patch> out;
  for (int y0 = 0; y0 + size <= image.h; y0 += stride) {
    for (int x0 = 0; x0 + size <= image.w; x0 += stride) {
      Patch p;
      p.x0 = x0;
      p.y0 = y0;
      p.image.h = size;
      p.image.w = size;
      p.image.rgb.resize(static_cast<std::size_t>(size) * size * 3);
      for (int y = 0; y < size; ++y) {
        std::copy_n(image.pixel(y0 + y, x0), static_cast<std::size_t>(size) * 3,
                    p.image.pixel(y, 0));
      }

      for (const auto& a : annotations) {
        const double full = a.bbox[2] * a.bbox[3];
        if (full <= 0) continue;
        const double cx0 = std::clamp(a.bbox[0] - x0, 0.0, static_cast<double>(size));
        const double cy0 = std::clamp(a.bbox[1] - y0, 0.0, static_cast<double>(size));
        const double cx1 = std::clamp(a.bbox[0] + a.bbox[2] - x0, 0.0, static_cast<double>(size));
        const double cy1 = std::clamp(a.bbox[1] + a.bbox[3] - y0, 0.0, static_cast<double>(size));
        const double kept = std::max(0.0, cx1 - cx0) * std::max(0.0, cy1 - cy0);
        if (kept < min_area_fraction * full) continue;
        Annotation t = a;
        t.bbox = {cx0, cy0, cx1 - cx0, cy1 - cy0};
        p.annotations.push_back(t);
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace cm
