#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vce/image.hpp"
#include "vce/nn.hpp"
#include "vce/tensor.hpp"

namespace vce::io {

namespace fs = std::filesystem;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Little-endian primitives

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::string& out, double d) { put_le(out, std::bit_cast<std::uint64_t>(d)); }

class Reader {
 public:
  Reader(std::string bytes, std::string what) : b_(std::move(bytes)), what_(std::move(what)) {}
  const unsigned char* take(std::size_t n) {
    if (pos_ + n > b_.size()) throw IoError(what_ + ": truncated file");
    auto* p = reinterpret_cast<const unsigned char*>(b_.data()) + pos_;
    pos_ += n;
    return p;
  }
  template <class U>
  U le() {
    return get_le<U>(take(sizeof(U)));
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::string b_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes via a temporary file and rename so readers never see a partial file.
inline void write_file_atomic(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

// ---------------------------------------------------------------------------
// Float image cache: "VCEIMGF1", uint32 rows, uint32 cols, rows*cols float32,
// all little-endian.

inline constexpr char kImageMagic[8] = {'V', 'C', 'E', 'I', 'M', 'G', 'F', '1'};

template <class T>
std::string encode_float_image(const Image<T>& img) {
  std::string out(kImageMagic, 8);
  detail::put_le(out, static_cast<std::uint32_t>(img.rows()));
  detail::put_le(out, static_cast<std::uint32_t>(img.cols()));
  out.reserve(out.size() + 4 * img.size());
  for (std::size_t i = 0; i < img.size(); ++i) detail::put_f32(out, static_cast<float>(img[i]));
  return out;
}

inline ImageF decode_float_image(std::string bytes, const std::string& what = "float image") {
  detail::Reader r(std::move(bytes), what);
  if (std::memcmp(r.take(8), kImageMagic, 8) != 0) throw IoError(what + ": bad magic");
  const auto rows = r.le<std::uint32_t>(), cols = r.le<std::uint32_t>();
  ImageF img(static_cast<int>(rows), static_cast<int>(cols));
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = r.f32();
  if (!r.done()) throw IoError(what + ": trailing bytes");
  return img;
}

template <class T>
void write_float_image(const fs::path& p, const Image<T>& img) {
  write_file_atomic(p, encode_float_image(img));
}

inline ImageF read_float_image(const fs::path& p) { return decode_float_image(read_file(p), p.string()); }

// ---------------------------------------------------------------------------
// 16-bit grayscale PNG. Values in [0,1] map to 0..65535.

namespace detail {
inline void png_write_to_string(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), len);
}
inline void png_flush_noop(png_structp) {}
inline void png_error_throw(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }
inline void png_warning_ignore(png_structp, png_const_charp) {}

struct PngSource {
  const std::string* bytes;
  std::size_t pos;
};
inline void png_read_from_string(png_structp png, png_bytep data, png_size_t len) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->pos + len > src->bytes->size()) png_error(png, "truncated data");
  std::memcpy(data, src->bytes->data() + src->pos, len);
  src->pos += len;
}
}  // namespace detail

inline std::uint16_t to_u16(double v) {
  if (!std::isfinite(v)) v = 0;
  return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
}

template <class T>
std::string encode_png16(const Image<T>& img) {
  if (img.empty()) throw IoError("png: empty image");
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_throw,
                                            detail::png_warning_ignore);
  if (!png) throw IoError("png: cannot allocate writer");
  png_infop info = png_create_info_struct(png);
  std::vector<png_byte> row(static_cast<std::size_t>(img.cols()) * 2);
  try {
    png_set_write_fn(png, &out, detail::png_write_to_string, detail::png_flush_noop);
    png_set_IHDR(png, info, img.cols(), img.rows(), 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < img.rows(); ++r) {
      for (int c = 0; c < img.cols(); ++c) {
        const std::uint16_t v = to_u16(static_cast<double>(img(r, c)));
        row[2 * c] = static_cast<png_byte>(v >> 8);  // PNG is big-endian
        row[2 * c + 1] = static_cast<png_byte>(v & 0xFF);
      }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

/// Decodes a grayscale PNG (8 or 16 bit) to [0,1]. Colour images are converted to gray.
inline ImageD decode_png(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8)) {
    throw IoError("png: not a PNG stream");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_throw,
                                           detail::png_warning_ignore);
  if (!png) throw IoError("png: cannot allocate reader");
  png_infop info = png_create_info_struct(png);
  detail::PngSource src{&bytes, 0};
  ImageD img;
  try {
    png_set_read_fn(png, &src, detail::png_read_from_string);
    png_read_info(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int type = png_get_color_type(png, info);
    if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (type & PNG_COLOR_MASK_COLOR || type == PNG_COLOR_TYPE_PALETTE) {
      png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
    png_read_update_info(png, info);
    const int rows = static_cast<int>(png_get_image_height(png, info));
    const int cols = static_cast<int>(png_get_image_width(png, info));
    const int out_depth = png_get_bit_depth(png, info);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    img = ImageD(rows, cols);
    const double scale = out_depth == 16 ? 65535.0 : 255.0;
    for (int r = 0; r < rows; ++r) {
      png_read_row(png, row.data(), nullptr);
      for (int c = 0; c < cols; ++c) {
        const double v = out_depth == 16 ? (row[2 * c] << 8 | row[2 * c + 1]) : row[c];
        img(r, c) = v / scale;
      }
    }
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

template <class T>
void write_png16(const fs::path& p, const Image<T>& img) {
  write_file_atomic(p, encode_png16(img));
}

inline ImageD read_png(const fs::path& p) {
  try {
    return decode_png(read_file(p));
  } catch (const IoError& e) {
    throw IoError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Tensor checkpoint: "VCECKPT1", uint32 count, then per tensor
// uint32 name length, name bytes, 4 x uint32 shape (n,c,h,w), uint8 width
// (4 or 8), little-endian values.

inline constexpr char kCheckpointMagic[8] = {'V', 'C', 'E', 'C', 'K', 'P', 'T', '1'};

template <class T>
using TensorMap = std::map<std::string, Tensor<T>>;

template <class T>
std::string encode_tensors(const TensorMap<T>& tensors) {
  std::string out(kCheckpointMagic, 8);
  detail::put_le(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_le(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const Shape s = t.shape();
    for (int d : {s.n, s.c, s.h, s.w}) detail::put_le(out, static_cast<std::uint32_t>(d));
    out.push_back(static_cast<char>(sizeof(T)));
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if constexpr (sizeof(T) == 4) {
        detail::put_f32(out, static_cast<float>(t[i]));
      } else {
        detail::put_f64(out, static_cast<double>(t[i]));
      }
    }
  }
  return out;
}

template <class T>
TensorMap<T> decode_tensors(std::string bytes, const std::string& what = "checkpoint") {
  detail::Reader r(std::move(bytes), what);
  if (std::memcmp(r.take(8), kCheckpointMagic, 8) != 0) throw IoError(what + ": bad magic");
  TensorMap<T> out;
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.le<std::uint32_t>();
    const auto* np = r.take(len);
    std::string name(reinterpret_cast<const char*>(np), len);
    Shape s;
    s.n = static_cast<int>(r.le<std::uint32_t>());
    s.c = static_cast<int>(r.le<std::uint32_t>());
    s.h = static_cast<int>(r.le<std::uint32_t>());
    s.w = static_cast<int>(r.le<std::uint32_t>());
    const unsigned width = *r.take(1);
    if (width != 4 && width != 8) throw IoError(what + ": bad value width for " + name);
    Tensor<T> t(s);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(width == 4 ? r.f32() : r.f64());
    out.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw IoError(what + ": trailing bytes");
  return out;
}

/// Parameters and persistent buffers under their dotted names, prefixed.
template <class T>
void collect_state(nn::Module<T>& m, const std::string& prefix, TensorMap<T>& out) {
  for (auto& p : m.named_parameters(prefix)) out[p.name] = p.var.value();
  for (auto& b : m.named_buffers(prefix)) out[b.name] = *b.tensor;
}

/// Copies matching entries into the module. Every parameter and buffer must be present
/// with the same shape.
template <class T>
void restore_state(nn::Module<T>& m, const std::string& prefix, const TensorMap<T>& in) {
  auto fetch = [&](const std::string& name, const Shape& want) -> const Tensor<T>& {
    auto it = in.find(name);
    if (it == in.end()) throw IoError("checkpoint is missing '" + name + "'");
    if (it->second.shape() != want) {
      throw IoError("checkpoint shape mismatch for '" + name + "': " + to_string(it->second.shape()) +
                    " vs " + to_string(want));
    }
    return it->second;
  };
  for (auto& p : m.named_parameters(prefix)) {
    auto v = p.var;
    v.mutable_value() = fetch(p.name, v.shape());
  }
  for (auto& b : m.named_buffers(prefix)) *b.tensor = fetch(b.name, b.tensor->shape());
}

template <class T>
void save_tensors(const fs::path& p, const TensorMap<T>& t) {
  write_file_atomic(p, encode_tensors(t));
}

template <class T>
TensorMap<T> load_tensors(const fs::path& p) {
  return decode_tensors<T>(read_file(p), p.string());
}

}  // namespace vce::io
