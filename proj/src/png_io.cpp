#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>

#include "s3vos/data.hpp"

namespace s3vos {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) {
    throw std::runtime_error(std::string("cannot open ") + path.string() +
                             (mode[0] == 'w' ? " for writing" : " for reading"));
  }
  return f;
}

[[noreturn]] void png_error_fn(png_structp, png_const_charp msg) { throw std::runtime_error(msg); }
void png_warning_fn(png_structp, png_const_charp) {}

class PngWriter {
 public:
  explicit PngWriter(const std::filesystem::path& path) : file_(open_file(path, "wb")) {
    png_ = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
    if (png_ == nullptr) throw std::runtime_error("png_create_write_struct failed");
    info_ = png_create_info_struct(png_);
    if (info_ == nullptr) {
      png_destroy_write_struct(&png_, nullptr);
      throw std::runtime_error("png_create_info_struct failed");
    }
    png_init_io(png_, file_.get());
  }
  ~PngWriter() { png_destroy_write_struct(&png_, &info_); }
  PngWriter(const PngWriter&) = delete;
  PngWriter& operator=(const PngWriter&) = delete;

  png_structp png() { return png_; }
  png_infop info() { return info_; }

 private:
  FilePtr file_;
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
};

class PngReader {
 public:
  explicit PngReader(const std::filesystem::path& path) : file_(open_file(path, "rb")) {
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file_.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
      throw std::runtime_error(path.string() + " is not a PNG file");
    }
    png_ = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
    if (png_ == nullptr) throw std::runtime_error("png_create_read_struct failed");
    info_ = png_create_info_struct(png_);
    if (info_ == nullptr) {
      png_destroy_read_struct(&png_, nullptr, nullptr);
      throw std::runtime_error("png_create_info_struct failed");
    }
    png_init_io(png_, file_.get());
    png_set_sig_bytes(png_, 8);
    png_read_info(png_, info_);
  }
  ~PngReader() { png_destroy_read_struct(&png_, &info_, nullptr); }
  PngReader(const PngReader&) = delete;
  PngReader& operator=(const PngReader&) = delete;

  png_structp png() { return png_; }
  png_infop info() { return info_; }

  std::vector<std::uint8_t> read_rows(std::size_t row_bytes, int height) {
    std::vector<std::uint8_t> buf(row_bytes * static_cast<std::size_t>(height));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + row_bytes * y;
    png_read_image(png_, rows.data());
    png_read_end(png_, nullptr);
    return buf;
  }

 private:
  FilePtr file_;
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
};

void write_rows(PngWriter& w, const std::vector<std::uint8_t>& buf, std::size_t row_bytes,
                int height) {
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(buf.data() + row_bytes * y);
  }
  png_write_image(w.png(), rows.data());
  png_write_end(w.png(), nullptr);
}

}  // namespace

void write_mask(const std::filesystem::path& path, const LabelMask& mask) {
  if (mask.labels.size() != static_cast<std::size_t>(mask.height) * mask.width) {
    throw std::invalid_argument("write_mask: label buffer does not match dimensions");
  }
  std::vector<Color> pal = mask.palette.empty() ? default_palette() : mask.palette;
  pal.resize(256, Color{0, 0, 0});
  PngWriter w(path);
  png_set_IHDR(w.png(), w.info(), static_cast<png_uint_32>(mask.width),
               static_cast<png_uint_32>(mask.height), 8, PNG_COLOR_TYPE_PALETTE,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> colors(256);
  for (std::size_t i = 0; i < 256; ++i) colors[i] = {pal[i][0], pal[i][1], pal[i][2]};
  png_set_PLTE(w.png(), w.info(), colors.data(), 256);
  png_write_info(w.png(), w.info());
  write_rows(w, mask.labels, static_cast<std::size_t>(mask.width), mask.height);
}

LabelMask read_mask(const std::filesystem::path& path) {
  PngReader r(path);
  const int color = png_get_color_type(r.png(), r.info());
  const int depth = png_get_bit_depth(r.png(), r.info());
  if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) {
    throw std::runtime_error(path.string() +
                             ": mask is a truecolor image; annotations must be indexed-color "
                             "(palette) PNGs whose pixel values are object ids (0 = background)");
  }
  if (depth == 16) {
    throw std::runtime_error(path.string() + ": 16-bit masks are not supported; use 8-bit indexed");
  }
  if (depth < 8) png_set_packing(r.png());
  png_read_update_info(r.png(), r.info());
  LabelMask m(static_cast<int>(png_get_image_height(r.png(), r.info())),
              static_cast<int>(png_get_image_width(r.png(), r.info())));
  m.labels = r.read_rows(static_cast<std::size_t>(m.width), m.height);
  if (color == PNG_COLOR_TYPE_PALETTE) {
    png_colorp plte = nullptr;
    int n = 0;
    if (png_get_PLTE(r.png(), r.info(), &plte, &n) != 0) {
      m.palette.assign(256, Color{0, 0, 0});
      for (int i = 0; i < n && i < 256; ++i) m.palette[static_cast<std::size_t>(i)] = {plte[i].red, plte[i].green, plte[i].blue};
    }
  }
  return m;
}

void write_rgb(const std::filesystem::path& path, const Image& image) {
  const std::size_t npix = static_cast<std::size_t>(image.height) * image.width;
  if (image.rgb.rows() != npix || image.rgb.cols() != 3) {
    throw std::invalid_argument("write_rgb: image tensor must be (H*W,3)");
  }
  std::vector<std::uint8_t> buf(npix * 3);
  for (std::size_t i = 0; i < npix * 3; ++i) {
    const double v = std::clamp(image.rgb[i], 0.0, 1.0);
    buf[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  PngWriter w(path);
  png_set_IHDR(w.png(), w.info(), static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png(), w.info());
  write_rows(w, buf, static_cast<std::size_t>(image.width) * 3, image.height);
}

Image read_rgb(const std::filesystem::path& path) {
  PngReader r(path);
  const int color = png_get_color_type(r.png(), r.info());
  const int depth = png_get_bit_depth(r.png(), r.info());
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png());
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png());
  if (depth == 16) png_set_strip_16(r.png());
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(r.png());
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png());
  if (png_get_valid(r.png(), r.info(), PNG_INFO_tRNS)) png_set_strip_alpha(r.png());
  png_read_update_info(r.png(), r.info());
  Image img;
  img.height = static_cast<int>(png_get_image_height(r.png(), r.info()));
  img.width = static_cast<int>(png_get_image_width(r.png(), r.info()));
  const std::size_t row_bytes = png_get_rowbytes(r.png(), r.info());
  if (row_bytes != static_cast<std::size_t>(img.width) * 3) {
    throw std::runtime_error(path.string() + ": unsupported PNG layout");
  }
  const auto buf = r.read_rows(row_bytes, img.height);
  img.rgb = Tensor(static_cast<std::size_t>(img.height) * img.width, 3);
  for (std::size_t i = 0; i < buf.size(); ++i) img.rgb[i] = buf[i] / 255.0;
  return img;
}

}  // namespace s3vos
