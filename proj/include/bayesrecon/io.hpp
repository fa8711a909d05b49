#pragma once

// Binary array files, 16-bit PGM export and little-endian helpers.
//
// Array file layout (all integers little-endian):
//   8 bytes  magic "BRARRAY1"
//   u32      dtype (0 = f64, 1 = c128 interleaved re/im, 2 = u8)
//   u32      rank
//   u64 x rank  shape
//   payload  little-endian elements in row-major order

#include "bayesrecon/domain.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bayesrecon::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) throw FormatError("unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  return is;
}

enum class DType : std::uint32_t { F64 = 0, C128 = 1, U8 = 2 };

inline constexpr std::array<char, 8> kArrayMagic = {'B', 'R', 'A', 'R', 'R', 'A', 'Y', '1'};

struct ArrayHeader {
  DType dtype;
  std::vector<std::uint64_t> shape;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

inline void write_header(std::ostream& os, const ArrayHeader& h) {
  os.write(kArrayMagic.data(), kArrayMagic.size());
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(h.dtype));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(h.shape.size()));
  for (auto s : h.shape) write_le<std::uint64_t>(os, s);
}

inline ArrayHeader read_header(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kArrayMagic) throw FormatError("not an array file");
  ArrayHeader h;
  const auto dtype = read_le<std::uint32_t>(is);
  if (dtype > 2) throw FormatError("unknown dtype " + std::to_string(dtype));
  h.dtype = static_cast<DType>(dtype);
  const auto rank = read_le<std::uint32_t>(is);
  if (rank > 8) throw FormatError("rank too large");
  for (std::uint32_t k = 0; k < rank; ++k) h.shape.push_back(read_le<std::uint64_t>(is));
  return h;
}

/// Rejects headers whose payload would run past the end of the stream.
inline void check_payload(std::istream& is, const ArrayHeader& h) {
  const std::uint64_t elem = h.dtype == DType::F64 ? 8 : h.dtype == DType::C128 ? 16 : 1;
  std::uint64_t n = 1;
  for (auto s : h.shape) {
    if (s != 0 && n > std::numeric_limits<std::uint64_t>::max() / 16 / s) throw FormatError("shape overflows");
    n *= s;
  }
  const auto here = is.tellg();
  is.seekg(0, std::ios::end);
  const auto end = is.tellg();
  is.seekg(here);
  if (here < 0 || end < 0 || static_cast<std::uint64_t>(end - here) < n * elem) throw FormatError("truncated payload");
}

/// Complex images are stored as c128 arrays of shape [H, W]; a stack of
/// images as [count, H, W].
inline void write_complex_images(const std::string& path, const std::vector<ComplexImage>& images) {
  if (images.empty()) throw InvalidArgument("write_complex_images: nothing to write");
  auto os = open_out(path);
  ArrayHeader h{DType::C128, {}};
  if (images.size() > 1) h.shape.push_back(images.size());
  h.shape.push_back(images.front().height());
  h.shape.push_back(images.front().width());
  write_header(os, h);
  for (const auto& img : images) {
    images.front().require_same_shape(img);
    for (Eigen::Index k = 0; k < img.data().size(); ++k) {
      write_le(os, img.data()(k).real());
      write_le(os, img.data()(k).imag());
    }
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline void write_complex_image(const std::string& path, const ComplexImage& image) {
  write_complex_images(path, {image});
}

inline std::vector<ComplexImage> read_complex_images(const std::string& path) {
  auto is = open_in(path);
  const ArrayHeader h = read_header(is);
  if (h.dtype != DType::C128) throw FormatError("'" + path + "' is not a complex array");
  check_payload(is, h);
  if (h.shape.size() != 2 && h.shape.size() != 3) throw FormatError("'" + path + "' must have rank 2 or 3");
  const std::size_t count = h.shape.size() == 3 ? h.shape[0] : 1;
  const std::size_t height = h.shape[h.shape.size() - 2];
  const std::size_t width = h.shape.back();
  if (height == 0 || width == 0 || count == 0) throw FormatError("'" + path + "' has an empty shape");
  std::vector<ComplexImage> out;
  for (std::size_t n = 0; n < count; ++n) {
    ComplexImage img(height, width);
    for (Eigen::Index k = 0; k < img.data().size(); ++k) {
      const double re = read_le<double>(is);
      const double im = read_le<double>(is);
      img.data()(k) = {re, im};
    }
    out.push_back(std::move(img));
  }
  return out;
}

inline ComplexImage read_complex_image(const std::string& path) {
  auto images = read_complex_images(path);
  if (images.size() != 1) throw FormatError("'" + path + "' holds a stack, expected one image");
  return std::move(images.front());
}

inline void write_real_array(const std::string& path, const RealVector& values, std::vector<std::uint64_t> shape) {
  ArrayHeader h{DType::F64, std::move(shape)};
  if (h.element_count() != static_cast<std::uint64_t>(values.size())) throw ShapeMismatch("write_real_array: shape");
  auto os = open_out(path);
  write_header(os, h);
  for (Eigen::Index k = 0; k < values.size(); ++k) write_le(os, values(k));
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline std::pair<RealVector, std::vector<std::uint64_t>> read_real_array(const std::string& path) {
  auto is = open_in(path);
  const ArrayHeader h = read_header(is);
  if (h.dtype != DType::F64) throw FormatError("'" + path + "' is not a real array");
  check_payload(is, h);
  RealVector v(static_cast<Eigen::Index>(h.element_count()));
  for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = read_le<double>(is);
  return {std::move(v), h.shape};
}

inline void write_u8_array(const std::string& path, const std::vector<std::uint8_t>& values,
                           std::vector<std::uint64_t> shape) {
  ArrayHeader h{DType::U8, std::move(shape)};
  if (h.element_count() != values.size()) throw ShapeMismatch("write_u8_array: shape");
  auto os = open_out(path);
  write_header(os, h);
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()));
  if (!os) throw IoError("write failed for '" + path + "'");
}

/// Binary 16-bit PGM; values are scaled so that `max_value` maps to 65535
/// (the array maximum when max_value <= 0) and clipped to [0, 65535].
inline void write_pgm16(const std::string& path, const RealVector& values, std::size_t height, std::size_t width,
                        double max_value = 0.0) {
  if (static_cast<std::size_t>(values.size()) != height * width) throw ShapeMismatch("write_pgm16: shape");
  const double top = max_value > 0.0 ? max_value : (values.size() ? values.maxCoeff() : 0.0);
  auto os = open_out(path);
  os << "P5\n" << width << ' ' << height << "\n65535\n";
  for (Eigen::Index k = 0; k < values.size(); ++k) {
    const double scaled = top > 0.0 ? values(k) / top * 65535.0 : 0.0;
    const auto v = static_cast<std::uint16_t>(std::clamp(std::lround(scaled), 0L, 65535L));
    const unsigned char be[2] = {static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v & 0xff)};
    os.write(reinterpret_cast<const char*>(be), 2);
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline void write_pgm8(const std::string& path, const std::vector<std::uint8_t>& values, std::size_t height,
                       std::size_t width) {
  if (values.size() != height * width) throw ShapeMismatch("write_pgm8: shape");
  auto os = open_out(path);
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()));
  if (!os) throw IoError("write failed for '" + path + "'");
}

}  // namespace bayesrecon::io
