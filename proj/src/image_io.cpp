#include "thinseg/image_io.hpp"

#include <png.h>
#include <tiffio.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <random>
#include <vector>

namespace thinseg {

namespace {

namespace fs = std::filesystem;

// Decoded pixel buffer before normalization. Samples are 8 or 16 bits.
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  bool palette = false;
  std::vector<std::uint16_t> samples;
};

struct PngRows {
  unsigned char* data = nullptr;
  png_uint_32 width = 0;
  png_uint_32 height = 0;
  int channels = 0;
  int bit_depth = 0;
  int color_type = 0;
  std::size_t rowbytes = 0;
};

// All state that must survive a longjmp lives in `out` or in plain locals.
bool read_png_rows(std::FILE* fp, bool keep_indices, PngRows* out, char* err, std::size_t errlen) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  png_bytep* rows = nullptr;
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    std::snprintf(err, errlen, "libpng failed while decoding");
    std::free(rows);
    std::free(out->data);
    out->data = nullptr;
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  int bit_depth = png_get_bit_depth(png, info);
  int color_type = png_get_color_type(png, info);
  if (keep_indices) {
    if (color_type != PNG_COLOR_TYPE_PALETTE && !(color_type == PNG_COLOR_TYPE_GRAY && bit_depth == 8)) {
      std::snprintf(err, errlen, "expected an indexed or 8-bit gray PNG");
      png_destroy_read_struct(&png, &info, nullptr);
      return false;
    }
    if (bit_depth < 8) png_set_packing(png);
  } else {
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (bit_depth == 16) png_set_swap(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) {
    // Transparency is irrelevant for intensities and indices; drop it.
    png_free_data(png, info, PNG_FREE_TRNS, -1);
  }
  png_read_update_info(png, info);
  out->width = png_get_image_width(png, info);
  out->height = png_get_image_height(png, info);
  out->channels = png_get_channels(png, info);
  out->bit_depth = png_get_bit_depth(png, info);
  out->color_type = color_type;
  out->rowbytes = png_get_rowbytes(png, info);
  out->data = static_cast<unsigned char*>(std::malloc(out->rowbytes * out->height));
  rows = static_cast<png_bytep*>(std::malloc(sizeof(png_bytep) * out->height));
  if (out->data == nullptr || rows == nullptr) png_error(png, "out of memory");
  for (png_uint_32 y = 0; y < out->height; ++y) rows[y] = out->data + y * out->rowbytes;
  png_read_image(png, rows);
  png_read_end(png, nullptr);
  std::free(rows);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

RawImage read_png(const fs::path& path, bool keep_indices) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (fp == nullptr) throw Error("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    std::fclose(fp);
    throw Error(path.string() + " is not a PNG file");
  }
  std::rewind(fp);
  PngRows rows;
  char err[256] = {0};
  bool ok = read_png_rows(fp, keep_indices, &rows, err, sizeof err);
  std::fclose(fp);
  if (!ok) throw Error(path.string() + ": " + err);

  RawImage raw;
  raw.width = static_cast<int>(rows.width);
  raw.height = static_cast<int>(rows.height);
  raw.channels = rows.channels;
  raw.bit_depth = rows.bit_depth;
  raw.palette = rows.color_type == PNG_COLOR_TYPE_PALETTE;
  const std::size_t per_row = static_cast<std::size_t>(raw.width) * raw.channels;
  raw.samples.resize(per_row * raw.height);
  for (int y = 0; y < raw.height; ++y) {
    const unsigned char* src = rows.data + y * rows.rowbytes;
    std::uint16_t* dst = raw.samples.data() + y * per_row;
    if (raw.bit_depth == 16) {
      std::memcpy(dst, src, per_row * 2);
    } else {
      std::copy(src, src + per_row, dst);
    }
  }
  std::free(rows.data);
  return raw;
}

void silence_tiff() {
  static const bool once = [] {
    TIFFSetWarningHandler(nullptr);
    TIFFSetErrorHandler(nullptr);
    return true;
  }();
  (void)once;
}

RawImage read_tiff(const fs::path& path) {
  silence_tiff();
  TIFF* tif = TIFFOpen(path.c_str(), "r");
  if (tif == nullptr) throw Error("cannot open TIFF " + path.string());
  std::uint32_t w = 0, h = 0;
  std::uint16_t spp = 1, bps = 8, planar = PLANARCONFIG_CONTIG, format = SAMPLEFORMAT_UINT;
  TIFFGetField(tif, TIFFTAG_IMAGEWIDTH, &w);
  TIFFGetField(tif, TIFFTAG_IMAGELENGTH, &h);
  TIFFGetFieldDefaulted(tif, TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif, TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif, TIFFTAG_PLANARCONFIG, &planar);
  TIFFGetFieldDefaulted(tif, TIFFTAG_SAMPLEFORMAT, &format);
  if ((bps != 8 && bps != 16) || planar != PLANARCONFIG_CONTIG || format != SAMPLEFORMAT_UINT) {
    TIFFClose(tif);
    throw Error(path.string() + ": only contiguous unsigned 8/16-bit TIFFs are supported");
  }
  RawImage raw;
  raw.width = static_cast<int>(w);
  raw.height = static_cast<int>(h);
  raw.channels = spp;
  raw.bit_depth = bps;
  raw.samples.resize(static_cast<std::size_t>(w) * h * spp);
  std::vector<unsigned char> line(TIFFScanlineSize(tif));
  for (std::uint32_t y = 0; y < h; ++y) {
    if (TIFFReadScanline(tif, line.data(), y, 0) < 0) {
      TIFFClose(tif);
      throw Error(path.string() + ": failed reading scanline " + std::to_string(y));
    }
    std::uint16_t* dst = raw.samples.data() + static_cast<std::size_t>(y) * w * spp;
    if (bps == 16) {
      std::memcpy(dst, line.data(), static_cast<std::size_t>(w) * spp * 2);
    } else {
      std::copy(line.begin(), line.begin() + static_cast<std::ptrdiff_t>(w) * spp, dst);
    }
  }
  TIFFClose(tif);
  return raw;
}

bool is_tiff(const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".tif" || ext == ".tiff";
}

// Emits `height` rows of `rowbytes` each; color_type / bit_depth as libpng.
// With a null `fp` the encoded stream is appended to `sink`.
bool emit_png(std::FILE* fp, std::string* sink, int width, int height, int color_type, int bit_depth,
              const unsigned char* data, std::size_t rowbytes, const png_color* palette, int palette_size) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  if (fp != nullptr) {
    png_init_io(png, fp);
  } else {
    png_set_write_fn(
        png, sink,
        [](png_structp p, png_bytep bytes, png_size_t n) {
          static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(bytes), n);
        },
        nullptr);
  }
  png_set_compression_level(png, 3);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  if (palette != nullptr) png_set_PLTE(png, info, palette, palette_size);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + y * rowbytes));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

bool write_png_rows(const char* path, int width, int height, int color_type, int bit_depth,
                    const unsigned char* data, std::size_t rowbytes, const png_color* palette,
                    int palette_size) {
  std::FILE* fp = std::fopen(path, "wb");
  if (fp == nullptr) return false;
  const bool ok = emit_png(fp, nullptr, width, height, color_type, bit_depth, data, rowbytes, palette, palette_size);
  return (std::fclose(fp) == 0) && ok;
}

void write_png_checked(const fs::path& path, int width, int height, int color_type, int bit_depth,
                       const unsigned char* data, std::size_t rowbytes, const png_color* palette = nullptr,
                       int palette_size = 0) {
  write_atomic(path, [&](const fs::path& tmp) {
    if (!write_png_rows(tmp.c_str(), width, height, color_type, bit_depth, data, rowbytes, palette,
                        palette_size)) {
      throw Error("failed writing PNG " + path.string());
    }
  });
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

void write_atomic(const fs::path& path, const std::function<void(const fs::path&)>& writer) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(rng() % 1000000007ULL);
  try {
    writer(tmp);
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_atomic(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
    if (!out.good()) throw Error("failed writing " + path.string());
  });
}

Raster load_raster(const fs::path& path, PixelScale scale) {
  if (!fs::exists(path)) throw Error("no such file: " + path.string());
  RawImage raw = is_tiff(path) ? read_tiff(path) : read_png(path, false);
  int bands = raw.channels;
  if (bands == 2 || bands == 4) --bands;  // drop alpha
  if (bands != 1 && bands != 3) {
    throw Error(path.string() + ": unsupported band count " + std::to_string(raw.channels));
  }
  Raster r(raw.width, raw.height, bands, scale);
  const float denom = raw.bit_depth == 16 ? 65535.0f : 255.0f;
  for (std::size_t i = 0; i < r.pixel_count(); ++i) {
    for (int b = 0; b < bands; ++b) {
      r.data[i * bands + b] = static_cast<float>(raw.samples[i * raw.channels + b]) / denom;
    }
  }
  return r;
}

void write_png(const fs::path& path, const Raster& r) {
  if (r.bands != 1 && r.bands != 3) throw Error("write_png: raster must have 1 or 3 bands");
  std::vector<unsigned char> bytes(r.data.size());
  std::transform(r.data.begin(), r.data.end(), bytes.begin(), to_byte);
  write_png_checked(path, r.width, r.height, r.bands == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, 8,
                    bytes.data(), static_cast<std::size_t>(r.width) * r.bands);
}

std::string encode_png(const Raster& r) {
  if (r.bands != 1 && r.bands != 3) throw Error("encode_png: raster must have 1 or 3 bands");
  std::vector<unsigned char> bytes(r.data.size());
  std::transform(r.data.begin(), r.data.end(), bytes.begin(), to_byte);
  std::string out;
  if (!emit_png(nullptr, &out, r.width, r.height, r.bands == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, 8,
                bytes.data(), static_cast<std::size_t>(r.width) * r.bands, nullptr, 0)) {
    throw Error("failed encoding PNG");
  }
  return out;
}

void write_png16(const fs::path& path, int width, int height, std::span<const float> values) {
  if (values.size() != static_cast<std::size_t>(width) * height) throw Error("write_png16: size mismatch");
  std::vector<std::uint16_t> words(values.size());
  std::transform(values.begin(), values.end(), words.begin(), [](float v) {
    return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 65535.0f));
  });
  write_png_checked(path, width, height, PNG_COLOR_TYPE_GRAY, 16,
                    reinterpret_cast<const unsigned char*>(words.data()), static_cast<std::size_t>(width) * 2);
}

void write_indexed_png(const fs::path& path, const LabelMap& map, std::span<const Rgb> palette) {
  std::vector<png_color> plte(256, png_color{255, 255, 255});
  for (std::size_t i = 0; i < palette.size() && i < kSentinel; ++i) {
    plte[i] = png_color{palette[i][0], palette[i][1], palette[i][2]};
  }
  write_png_checked(path, map.width, map.height, PNG_COLOR_TYPE_PALETTE, 8, map.values.data(),
                    static_cast<std::size_t>(map.width), plte.data(), 256);
}

LabelMap read_indexed_png(const fs::path& path, PixelScale scale) {
  RawImage raw = read_png(path, true);
  if (raw.channels != 1) throw Error(path.string() + ": label maps must be single-band");
  LabelMap m(raw.width, raw.height, scale);
  std::transform(raw.samples.begin(), raw.samples.end(), m.values.begin(),
                 [](std::uint16_t v) { return static_cast<std::uint8_t>(v); });
  return m;
}

void write_soi_png(const fs::path& path, const SOIMask& soi) {
  std::vector<unsigned char> bytes(soi.mask.size());
  std::transform(soi.mask.begin(), soi.mask.end(), bytes.begin(),
                 [](std::uint8_t v) -> unsigned char { return v ? 255 : 0; });
  write_png_checked(path, soi.width, soi.height, PNG_COLOR_TYPE_GRAY, 8, bytes.data(),
                    static_cast<std::size_t>(soi.width));
}

SOIMask read_soi_png(const fs::path& path, PixelScale scale) {
  Raster r = load_raster(path, scale);
  SOIMask soi(r.width, r.height, scale);
  for (std::size_t i = 0; i < soi.mask.size(); ++i) {
    float v = r.data[i * r.bands];
    soi.mask[i] = v >= 0.5f ? 1 : 0;
  }
  return soi;
}

}  // namespace thinseg
