#include "codec.hpp"

#include "fieldnet/error.hpp"

#include <png.h>

#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>

#include <fmt/format.h>

namespace fieldnet::detail {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) {
    throw DataError(fmt::format("cannot open '{}' ({})", path.string(),
                                mode[0] == 'r' ? "read" : "write"));
  }
  return f;
}

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

namespace {

// All state mutated between setjmp and a possible longjmp lives in this
// struct, owned by the caller, so no automatic variable of the setjmp frame
// is left indeterminate.
struct PngScratch {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::string message;
  std::string unsupported;
  std::vector<unsigned char> buffer;
  std::vector<png_bytep> rows;
  int bit_depth = 0;
};

bool decode_png(std::FILE* file, PngScratch& s, RawImage& out) {
  if (setjmp(png_jmpbuf(s.png))) return false;

  png_init_io(s.png, file);
  png_set_sig_bytes(s.png, 8);
  png_read_info(s.png, s.info);

  s.bit_depth = png_get_bit_depth(s.png, s.info);
  const int color_type = png_get_color_type(s.png, s.info);
  if (s.bit_depth != 8 && s.bit_depth != 16) {
    s.unsupported = fmt::format("bit depth {}", s.bit_depth);
    return true;
  }
  if (color_type == PNG_COLOR_TYPE_GRAY) {
    out.channels = 1;
  } else if (color_type == PNG_COLOR_TYPE_RGB) {
    out.channels = 3;
  } else {
    s.unsupported = fmt::format("color type {}", color_type);
    return true;
  }
  out.width = static_cast<int>(png_get_image_width(s.png, s.info));
  out.height = static_cast<int>(png_get_image_height(s.png, s.info));
  out.maxval = s.bit_depth == 16 ? 65535u : 255u;

  const std::size_t row_bytes = png_get_rowbytes(s.png, s.info);
  s.buffer.resize(row_bytes * out.height);
  s.rows.resize(out.height);
  for (int y = 0; y < out.height; ++y) s.rows[y] = s.buffer.data() + y * row_bytes;
  png_read_image(s.png, s.rows.data());
  png_read_end(s.png, nullptr);
  return true;
}

bool encode_png(std::FILE* file, PngScratch& s, const RawImage& img) {
  if (setjmp(png_jmpbuf(s.png))) return false;
  png_init_io(s.png, file);
  png_set_IHDR(s.png, s.info, img.width, img.height, s.bit_depth,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(s.png, s.info);
  png_write_image(s.png, s.rows.data());
  png_write_end(s.png, nullptr);
  return true;
}

}  // namespace

RawImage read_png(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw DataError(fmt::format("'{}' is not a PNG file", path.string()));
  }

  PngScratch s;
  s.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &s.message, png_error_fn, png_warning_fn);
  if (!s.png) throw DataError("png_create_read_struct failed");
  s.info = png_create_info_struct(s.png);
  if (!s.info) {
    png_destroy_read_struct(&s.png, nullptr, nullptr);
    throw DataError("png_create_info_struct failed");
  }

  RawImage out;
  const bool ok = decode_png(file.get(), s, out);
  png_destroy_read_struct(&s.png, &s.info, nullptr);
  if (!ok) throw DataError(fmt::format("failed to decode '{}': {}", path.string(), s.message));
  if (!s.unsupported.empty()) {
    throw DataError(fmt::format("unsupported PNG '{}': {}", path.string(), s.unsupported));
  }

  const std::size_t n = static_cast<std::size_t>(out.width) * out.height * out.channels;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.samples[i] = s.bit_depth == 8
                         ? s.buffer[i]
                         : static_cast<std::uint16_t>((s.buffer[2 * i] << 8) | s.buffer[2 * i + 1]);
  }
  return out;
}

void write_png(const RawImage& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) {
    throw ConfigError(fmt::format("PNG writer supports 1 or 3 channels, got {}", img.channels));
  }
  PngScratch s;
  s.bit_depth = img.maxval > 255 ? 16 : 8;
  const std::size_t bytes_per_sample = s.bit_depth / 8;
  const std::size_t row_bytes =
      static_cast<std::size_t>(img.width) * img.channels * bytes_per_sample;
  s.buffer.resize(row_bytes * img.height);
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    if (bytes_per_sample == 1) {
      s.buffer[i] = static_cast<unsigned char>(img.samples[i]);
    } else {
      s.buffer[2 * i] = static_cast<unsigned char>(img.samples[i] >> 8);
      s.buffer[2 * i + 1] = static_cast<unsigned char>(img.samples[i] & 0xFF);
    }
  }
  s.rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) s.rows[y] = s.buffer.data() + y * row_bytes;

  FilePtr file = open_file(path, "wb");
  s.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &s.message, png_error_fn, png_warning_fn);
  if (!s.png) throw DataError("png_create_write_struct failed");
  s.info = png_create_info_struct(s.png);
  if (!s.info) {
    png_destroy_write_struct(&s.png, nullptr);
    throw DataError("png_create_info_struct failed");
  }
  const bool ok = encode_png(file.get(), s, img);
  png_destroy_write_struct(&s.png, &s.info);
  if (!ok) throw DataError(fmt::format("failed to encode '{}': {}", path.string(), s.message));
  if (std::fflush(file.get()) != 0) {
    throw DataError(fmt::format("failed writing '{}'", path.string()));
  }
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string token;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(static_cast<char>(ch));
  }
  return token;
}

}  // namespace

RawImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}' (read)", path.string()));

  const std::string magic = next_token(in);
  RawImage out;
  if (magic == "P5") {
    out.channels = 1;
  } else if (magic == "P6") {
    out.channels = 3;
  } else {
    throw DataError(fmt::format("unsupported PNM variant '{}' in '{}'", magic, path.string()));
  }
  try {
    out.width = std::stoi(next_token(in));
    out.height = std::stoi(next_token(in));
    out.maxval = static_cast<std::uint32_t>(std::stoul(next_token(in)));
  } catch (const std::exception&) {
    throw DataError(fmt::format("malformed PNM header in '{}'", path.string()));
  }
  if (out.width <= 0 || out.height <= 0 || out.maxval == 0 || out.maxval > 65535) {
    throw DataError(fmt::format("invalid PNM header values in '{}'", path.string()));
  }

  const std::size_t n = static_cast<std::size_t>(out.width) * out.height * out.channels;
  const std::size_t bytes_per_sample = out.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> buffer(n * bytes_per_sample);
  in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(buffer.size()));
  if (static_cast<std::size_t>(in.gcount()) != buffer.size()) {
    throw DataError(fmt::format("truncated PNM data in '{}'", path.string()));
  }
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.samples[i] = bytes_per_sample == 1
                         ? buffer[i]
                         : static_cast<std::uint16_t>((buffer[2 * i] << 8) | buffer[2 * i + 1]);
    if (out.samples[i] > out.maxval) {
      throw DataError(fmt::format("PNM sample exceeds maxval in '{}'", path.string()));
    }
  }
  return out;
}

void write_pnm(const RawImage& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) {
    throw ConfigError(fmt::format("PNM writer supports 1 or 3 channels, got {}", img.channels));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot open '{}' (write)", path.string()));
  out << (img.channels == 1 ? "P5" : "P6") << '\n'
      << img.width << ' ' << img.height << '\n'
      << img.maxval << '\n';
  const bool wide = img.maxval > 255;
  std::vector<unsigned char> buffer;
  buffer.reserve(img.samples.size() * (wide ? 2 : 1));
  for (auto s : img.samples) {
    if (wide) buffer.push_back(static_cast<unsigned char>(s >> 8));
    buffer.push_back(static_cast<unsigned char>(s & 0xFF));
  }
  out.write(reinterpret_cast<const char*>(buffer.data()), static_cast<std::streamsize>(buffer.size()));
  if (!out) throw DataError(fmt::format("failed writing '{}'", path.string()));
}

}  // namespace fieldnet::detail
