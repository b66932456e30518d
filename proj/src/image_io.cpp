#include "rsvm/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace rsvm {

namespace {

uint32_t be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

bool png_dims(std::ifstream& in, int& w, int& h) {
  // 8-byte signature, then the IHDR chunk: length, "IHDR", width, height.
  uint8_t hdr[33];
  if (!in.read(reinterpret_cast<char*>(hdr), sizeof hdr)) return false;
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (std::memcmp(hdr, sig, 8) != 0) return false;
  if (std::memcmp(hdr + 12, "IHDR", 4) != 0) return false;
  w = static_cast<int>(be32(hdr + 16));
  h = static_cast<int>(be32(hdr + 20));
  return w > 0 && h > 0;
}

bool jpeg_dims(std::ifstream& in, int& w, int& h) {
  uint8_t b[2];
  if (!in.read(reinterpret_cast<char*>(b), 2) || b[0] != 0xFF || b[1] != 0xD8) return false;
  // walk marker segments until a start-of-frame
  for (;;) {
    if (!in.read(reinterpret_cast<char*>(b), 2)) return false;
    if (b[0] != 0xFF) return false;
    uint8_t marker = b[1];
    while (marker == 0xFF) {
      if (!in.read(reinterpret_cast<char*>(&marker), 1)) return false;
    }
    if (marker == 0xD9 || marker == 0xDA) return false;  // EOI / scan data before SOF
    uint8_t lenb[2];
    if (!in.read(reinterpret_cast<char*>(lenb), 2)) return false;
    int len = (lenb[0] << 8) | lenb[1];
    if (len < 2) return false;
    bool is_sof = (marker >= 0xC0 && marker <= 0xCF) && marker != 0xC4 && marker != 0xC8 && marker != 0xCC;
    if (is_sof) {
      uint8_t sof[5];
      if (len < 7 || !in.read(reinterpret_cast<char*>(sof), 5)) return false;
      h = (sof[1] << 8) | sof[2];
      w = (sof[3] << 8) | sof[4];
      return w > 0 && h > 0;
    }
    in.seekg(len - 2, std::ios::cur);
    if (!in) return false;
  }
}

struct PngReadCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngReadCloser() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

ImageU8 decode_png(const std::filesystem::path& file) {
  PngReadCloser raii;
  raii.fp = std::fopen(file.c_str(), "rb");
  if (!raii.fp) throw IoError("cannot open " + file.string());
  raii.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  raii.info = png_create_info_struct(raii.png);
  if (!raii.png || !raii.info) throw IoError("libpng init failed for " + file.string());
  if (setjmp(png_jmpbuf(raii.png))) throw IoError("corrupt PNG: " + file.string());

  png_init_io(raii.png, raii.fp);
  png_read_info(raii.png, raii.info);
  png_set_expand(raii.png);            // palettes, low bit depth, tRNS
  png_set_strip_16(raii.png);
  png_set_strip_alpha(raii.png);
  png_set_gray_to_rgb(raii.png);
  png_read_update_info(raii.png, raii.info);

  ImageU8 img;
  img.width = static_cast<int>(png_get_image_width(raii.png, raii.info));
  img.height = static_cast<int>(png_get_image_height(raii.png, raii.info));
  if (png_get_rowbytes(raii.png, raii.info) != static_cast<size_t>(img.width) * 3)
    throw IoError("unexpected PNG channel layout in " + file.string());
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + static_cast<size_t>(y) * img.width * 3;
  png_read_image(raii.png, rows.data());
  png_read_end(raii.png, nullptr);
  return img;
}

struct JpegErrorMgr {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(mgr->jump, 1);
}

ImageU8 decode_jpeg(const std::filesystem::path& file) {
  FILE* fp = std::fopen(file.c_str(), "rb");
  if (!fp) throw IoError("cannot open " + file.string());
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(fp);
    throw IoError("corrupt JPEG: " + file.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);

  ImageU8 img;
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + static_cast<size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(fp);
  return img;
}

bool has_ext(const std::filesystem::path& file, const char* a, const char* b = nullptr) {
  std::string e = file.extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(c));
  return e == a || (b && e == b);
}

}  // namespace

bool read_image_dims(const std::filesystem::path& file, int& width, int& height) {
  std::ifstream in(file, std::ios::binary);
  if (!in) return false;
  if (png_dims(in, width, height)) return true;
  in.clear();
  in.seekg(0);
  return jpeg_dims(in, width, height);
}

ImageU8 decode_image(const std::filesystem::path& file) {
  if (has_ext(file, ".png")) return decode_png(file);
  if (has_ext(file, ".jpg", ".jpeg")) return decode_jpeg(file);
  // fall back on content sniffing
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  uint8_t magic[2] = {0, 0};
  in.read(reinterpret_cast<char*>(magic), 2);
  if (magic[0] == 0x89) return decode_png(file);
  if (magic[0] == 0xFF && magic[1] == 0xD8) return decode_jpeg(file);
  throw IoError("unsupported image format: " + file.string());
}

void write_png_rgb(const std::filesystem::path& file, const ImageU8& img) {
  if (img.width <= 0 || img.height <= 0 ||
      img.pixels.size() != static_cast<size_t>(img.width) * img.height * 3)
    throw IoError("write_png_rgb: malformed image buffer for " + file.string());
  FILE* fp = std::fopen(file.c_str(), "wb");
  if (!fp) throw IoError("cannot write " + file.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) {
    std::fclose(fp);
    throw IoError("libpng init failed for " + file.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("PNG write failed: " + file.string());
  }
  png_init_io(png, fp);
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<size_t>(y) * img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

ImageU8 resize_bilinear(const ImageU8& src, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw IoError("resize target must be positive");
  if (src.width == out_w && src.height == out_h) return src;
  ImageU8 dst;
  dst.width = out_w;
  dst.height = out_h;
  dst.pixels.resize(static_cast<size_t>(out_w) * out_h * 3);
  const double sx = static_cast<double>(src.width) / out_w;
  const double sy = static_cast<double>(src.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, src.height - 1);
    int y1 = std::min(y0 + 1, src.height - 1);
    double wy = std::clamp(fy - y0, 0.0, 1.0);
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, src.width - 1);
      int x1 = std::min(x0 + 1, src.width - 1);
      double wx = std::clamp(fx - x0, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = static_cast<uint8_t>(std::lround(top * (1 - wy) + bot * wy));
      }
    }
  }
  return dst;
}

}  // namespace rsvm
