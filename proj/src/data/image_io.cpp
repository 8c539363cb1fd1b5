#include "cellmamba/data/image.hpp"

#include <png.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "cellmamba/core/check.hpp"

namespace cm {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  CM_CHECK(f != nullptr, "cannot open '", path, "' (mode ", mode, ")");
  return f;
}

// Wraps the libpng read structs so every exit path frees them.
struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;

  PngReader() {
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    CM_CHECK(png != nullptr, "libpng: read struct allocation failed");
    info = png_create_info_struct(png);
    if (!info) {
      png_destroy_read_struct(&png, nullptr, nullptr);
      throw ValidationError("libpng: info struct allocation failed");
    }
  }
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;

  PngWriter() {
    png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    CM_CHECK(png != nullptr, "libpng: write struct allocation failed");
    info = png_create_info_struct(png);
    if (!info) {
      png_destroy_write_struct(&png, nullptr);
      throw ValidationError("libpng: info struct allocation failed");
    }
  }
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

}  // namespace

ImageU8 read_png_rgb(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  PngReader r;
  if (setjmp(png_jmpbuf(r.png))) {
    throw ValidationError(str_cat("libpng: failed to read '", path, "'"));
  }
  png_init_io(r.png, f.get());
  png_read_info(r.png, r.info);

  // Normalize every color layout to 8-bit RGB.
  png_set_palette_to_rgb(r.png);
  png_set_expand_gray_1_2_4_to_8(r.png);
  if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
  png_set_strip_16(r.png);
  png_set_strip_alpha(r.png);
  png_set_gray_to_rgb(r.png);
  png_read_update_info(r.png, r.info);

  ImageU8 img;
  img.w = static_cast<int>(png_get_image_width(r.png, r.info));
  img.h = static_cast<int>(png_get_image_height(r.png, r.info));
  CM_CHECK(png_get_channels(r.png, r.info) == 3, "read_png_rgb: '", path,
           "' did not normalize to 3 channels");
  img.rgb.resize(static_cast<std::size_t>(img.h) * img.w * 3);

  std::vector<png_bytep> rows(img.h);
  for (int y = 0; y < img.h; ++y) rows[y] = img.rgb.data() + static_cast<std::size_t>(y) * img.w * 3;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
  return img;
}

void write_png_rgb(const std::string& path, const ImageU8& img) {
  CM_CHECK(!img.empty(), "write_png_rgb: empty image");
  CM_CHECK(img.rgb.size() == static_cast<std::size_t>(img.h) * img.w * 3,
           "write_png_rgb: buffer is ", img.rgb.size(), " bytes for ", img.h, "x", img.w);
  FilePtr f = open_file(path, "wb");
  PngWriter w;
  if (setjmp(png_jmpbuf(w.png))) {
    throw ValidationError(str_cat("libpng: failed to write '", path, "'"));
  }
  png_init_io(w.png, f.get());
  png_set_IHDR(w.png, w.info, img.w, img.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  std::vector<png_bytep> rows(img.h);
  for (int y = 0; y < img.h; ++y) {
    rows[y] = const_cast<png_bytep>(img.rgb.data() + static_cast<std::size_t>(y) * img.w * 3);
  }
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
}

LabelRaster read_png_labels(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  PngReader r;
  if (setjmp(png_jmpbuf(r.png))) {
    throw ValidationError(str_cat("libpng: failed to read '", path, "'"));
  }
  png_init_io(r.png, f.get());
  png_read_info(r.png, r.info);

  const int color = png_get_color_type(r.png, r.info);
  CM_CHECK(color == PNG_COLOR_TYPE_GRAY, "read_png_labels: '", path,
           "' must be grayscale (label rasters are 16-bit gray PNG)");
  if (png_get_bit_depth(r.png, r.info) < 16) png_set_expand_gray_1_2_4_to_8(r.png);
  png_read_update_info(r.png, r.info);
  const int depth = png_get_bit_depth(r.png, r.info);

  LabelRaster mask;
  mask.w = static_cast<int>(png_get_image_width(r.png, r.info));
  mask.h = static_cast<int>(png_get_image_height(r.png, r.info));
  mask.labels.resize(static_cast<std::size_t>(mask.h) * mask.w);

  const std::size_t row_bytes = png_get_rowbytes(r.png, r.info);
  std::vector<std::uint8_t> raw(row_bytes * mask.h);
  std::vector<png_bytep> rows(mask.h);
  for (int y = 0; y < mask.h; ++y) rows[y] = raw.data() + row_bytes * y;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);

  for (int y = 0; y < mask.h; ++y) {
    const std::uint8_t* row = raw.data() + row_bytes * y;
    for (int x = 0; x < mask.w; ++x) {
      // PNG sample order is big-endian.
      mask.at(y, x) = depth == 16
                          ? static_cast<std::uint16_t>((row[2 * x] << 8) | row[2 * x + 1])
                          : row[x];
    }
  }
  return mask;
}

void write_png_labels(const std::string& path, const LabelRaster& mask) {
  CM_CHECK(mask.h > 0 && mask.w > 0, "write_png_labels: empty raster");
  FilePtr f = open_file(path, "wb");
  PngWriter w;
  if (setjmp(png_jmpbuf(w.png))) {
    throw ValidationError(str_cat("libpng: failed to write '", path, "'"));
  }
  png_init_io(w.png, f.get());
  png_set_IHDR(w.png, w.info, mask.w, mask.h, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);

  std::vector<std::uint8_t> raw(static_cast<std::size_t>(mask.h) * mask.w * 2);
  for (int y = 0; y < mask.h; ++y) {
    for (int x = 0; x < mask.w; ++x) {
      const std::uint16_t v = mask.at(y, x);
      raw[(static_cast<std::size_t>(y) * mask.w + x) * 2] = static_cast<std::uint8_t>(v >> 8);
      raw[(static_cast<std::size_t>(y) * mask.w + x) * 2 + 1] = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  std::vector<png_bytep> rows(mask.h);
  for (int y = 0; y < mask.h; ++y) rows[y] = raw.data() + static_cast<std::size_t>(y) * mask.w * 2;
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
}

namespace {

// Skips whitespace and '#' comment lines between PGM header tokens.
int next_pgm_token(std::istream& is, const std::string& path) {
  while (true) {
    int c = is.peek();
    CM_CHECK(c != EOF, "read_pgm_labels: truncated header in '", path, "'");
    if (std::isspace(c)) {
      is.get();
    } else if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else {
      break;
    }
  }
  int v = 0;
  is >> v;
  CM_CHECK(!is.fail(), "read_pgm_labels: malformed header in '", path, "'");
  return v;
}

}  // namespace

LabelRaster read_pgm_labels(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  CM_CHECK(is.good(), "cannot open '", path, "'");
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  CM_CHECK(magic == "P2" || magic == "P5", "read_pgm_labels: '", path,
           "' is not a P2/P5 graymap (magic '", magic, "')");

  LabelRaster mask;
  mask.w = next_pgm_token(is, path);
  mask.h = next_pgm_token(is, path);
  const int maxval = next_pgm_token(is, path);
  CM_CHECK(mask.w > 0 && mask.h > 0, "read_pgm_labels: bad dimensions ", mask.w, "x", mask.h);
  CM_CHECK(maxval > 0 && maxval <= 65535, "read_pgm_labels: bad maxval ", maxval);
  mask.labels.resize(static_cast<std::size_t>(mask.h) * mask.w);

  if (magic == "P2") {
    for (auto& v : mask.labels) {
      int x = 0;
      is >> x;
      CM_CHECK(!is.fail() && x >= 0 && x <= maxval, "read_pgm_labels: bad sample in '", path, "'");
      v = static_cast<std::uint16_t>(x);
    }
  } else {
    is.get();  // single whitespace after maxval
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<std::uint8_t> raw(mask.labels.size() * bytes);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    CM_CHECK(is.gcount() == static_cast<std::streamsize>(raw.size()),
             "read_pgm_labels: truncated pixel data in '", path, "'");
    for (std::size_t i = 0; i < mask.labels.size(); ++i) {
      // Binary multi-byte samples are big-endian per the netpbm spec.
      mask.labels[i] = bytes == 2 ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1])
                                  : raw[i];
    }
  }
  return mask;
}

void write_pgm_labels(const std::string& path, const LabelRaster& mask) {
  CM_CHECK(mask.h > 0 && mask.w > 0, "write_pgm_labels: empty raster");
  std::ofstream os(path, std::ios::binary);
  CM_CHECK(os.good(), "cannot open '", path, "' for writing");
  os << "P5\n" << mask.w << " " << mask.h << "\n65535\n";
  std::vector<std::uint8_t> raw(mask.labels.size() * 2);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    raw[2 * i] = static_cast<std::uint8_t>(mask.labels[i] >> 8);
    raw[2 * i + 1] = static_cast<std::uint8_t>(mask.labels[i] & 0xff);
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  CM_CHECK(os.good(), "write_pgm_labels: write to '", path, "' failed");
}

LabelRaster read_labels(const std::string& path) {
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot);
  if (ext == ".png") return read_png_labels(path);
  if (ext == ".pgm") return read_pgm_labels(path);
  throw ValidationError(str_cat("read_labels: unsupported extension '", ext,
                                "' (expected .png or .pgm): ", path));
}

}  // namespace cm
