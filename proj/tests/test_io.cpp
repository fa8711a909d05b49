#include "bayesrecon/io.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <unistd.h>

using namespace bayesrecon;
using testing_support::random_image;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("bayesrecon_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void dump(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary);
  os << bytes;
}

}  // namespace

TEST(LittleEndian, ByteOrder) {
  std::ostringstream os;
  io::write_le<std::uint32_t>(os, 0x01020304u);
  EXPECT_EQ(os.str(), std::string("\x04\x03\x02\x01", 4));
  std::istringstream is(os.str());
  EXPECT_EQ(io::read_le<std::uint32_t>(is), 0x01020304u);
  std::istringstream short_in(std::string("\x01\x02", 2));
  EXPECT_THROW(io::read_le<std::uint32_t>(short_in), io::FormatError);
}

TEST(ArrayFiles, ComplexImageRoundTripIsBitExact) {
  TempDir dir;
  std::mt19937_64 g(1);
  const ComplexImage a = random_image(5, 3, g);
  io::write_complex_image(dir.file("a.bin"), a);
  EXPECT_TRUE(io::read_complex_image(dir.file("a.bin")) == a);
  EXPECT_EQ(fs::file_size(dir.file("a.bin")), 8u + 4 + 4 + 2 * 8 + 15 * 16);
}

TEST(ArrayFiles, StackRoundTrip) {
  TempDir dir;
  std::mt19937_64 g(2);
  std::vector<ComplexImage> s;
  for (int k = 0; k < 4; ++k) s.push_back(random_image(2, 6, g));
  io::write_complex_images(dir.file("s.bin"), s);
  const auto back = io::read_complex_images(dir.file("s.bin"));
  ASSERT_EQ(back.size(), 4u);
  for (int k = 0; k < 4; ++k) EXPECT_TRUE(back[k] == s[k]);
  EXPECT_THROW(io::read_complex_image(dir.file("s.bin")), io::FormatError);
  EXPECT_THROW(io::write_complex_images(dir.file("e.bin"), {}), InvalidArgument);
  EXPECT_THROW(io::write_complex_images(dir.file("m.bin"), {ComplexImage(2, 2), ComplexImage(2, 3)}), ShapeMismatch);
}

TEST(ArrayFiles, RealRoundTripAndShapeCheck) {
  TempDir dir;
  RealVector v(6);
  v << 1.0, -2.5, 3.25, 0.0, 1e-300, -7.0;
  io::write_real_array(dir.file("r.bin"), v, {2, 3});
  const auto [back, shape] = io::read_real_array(dir.file("r.bin"));
  EXPECT_EQ(shape, (std::vector<std::uint64_t>{2, 3}));
  EXPECT_EQ(back, v);
  EXPECT_THROW(io::write_real_array(dir.file("x.bin"), v, {4, 2}), ShapeMismatch);
  // dtype mismatch in both directions
  EXPECT_THROW(io::read_complex_images(dir.file("r.bin")), io::FormatError);
  io::write_complex_image(dir.file("c.bin"), ComplexImage(2, 2));
  EXPECT_THROW(io::read_real_array(dir.file("c.bin")), io::FormatError);
}

TEST(ArrayFiles, U8Layout) {
  TempDir dir;
  io::write_u8_array(dir.file("u.bin"), {0, 255, 7}, {3});
  const std::string bytes = slurp(dir.file("u.bin"));
  ASSERT_EQ(bytes.size(), 8u + 4 + 4 + 8 + 3);
  EXPECT_EQ(bytes.substr(0, 8), "BRARRAY1");
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes.substr(24), std::string("\x00\xff\x07", 3));
  EXPECT_THROW(io::write_u8_array(dir.file("v.bin"), {1, 2}, {3}), ShapeMismatch);
}

TEST(ArrayFiles, CorruptFilesGiveFormatErrors) {
  TempDir dir;
  std::mt19937_64 g(3);
  io::write_complex_image(dir.file("a.bin"), random_image(4, 4, g));
  const std::string good = slurp(dir.file("a.bin"));

  dump(dir.file("trunc.bin"), good.substr(0, good.size() - 5));
  EXPECT_THROW(io::read_complex_image(dir.file("trunc.bin")), io::FormatError);

  std::string magic = good;
  magic[0] = 'X';
  dump(dir.file("magic.bin"), magic);
  EXPECT_THROW(io::read_complex_image(dir.file("magic.bin")), io::FormatError);

  std::string dtype = good;
  dtype[8] = 9;
  dump(dir.file("dtype.bin"), dtype);
  EXPECT_THROW(io::read_complex_image(dir.file("dtype.bin")), io::FormatError);

  // enormous shape must not allocate
  std::string huge = good;
  for (int k = 0; k < 8; ++k) huge[16 + k] = '\x7f';
  dump(dir.file("huge.bin"), huge);
  EXPECT_THROW(io::read_complex_image(dir.file("huge.bin")), io::FormatError);

  dump(dir.file("empty.bin"), "");
  EXPECT_THROW(io::read_complex_image(dir.file("empty.bin")), io::FormatError);
}

TEST(ArrayFiles, MissingFileIsIoError) {
  EXPECT_THROW(io::read_complex_image("/nonexistent/dir/a.bin"), io::IoError);
  EXPECT_THROW(io::write_complex_image("/nonexistent/dir/a.bin", ComplexImage(1, 1)), io::IoError);
}

TEST(Pgm, SixteenBitHeaderAndScaling) {
  TempDir dir;
  RealVector v(6);
  v << 0.0, 0.5, 1.0, 2.0, -1.0, 0.25;
  io::write_pgm16(dir.file("p.pgm"), v, 2, 3, 1.0);
  const std::string bytes = slurp(dir.file("p.pgm"));
  const std::string header = "P5\n3 2\n65535\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  ASSERT_EQ(bytes.size(), header.size() + 12);
  auto px = [&](int k) {
    return (static_cast<unsigned>(static_cast<unsigned char>(bytes[header.size() + 2 * k])) << 8) |
           static_cast<unsigned char>(bytes[header.size() + 2 * k + 1]);
  };
  EXPECT_EQ(px(0), 0u);
  EXPECT_EQ(px(1), 32768u);  // round(32767.5)
  EXPECT_EQ(px(2), 65535u);
  EXPECT_EQ(px(3), 65535u);  // clipped
  EXPECT_EQ(px(4), 0u);      // clipped
  EXPECT_EQ(px(5), 16384u);
  // default range: array maximum
  io::write_pgm16(dir.file("q.pgm"), v, 2, 3);
  const std::string q = slurp(dir.file("q.pgm"));
  EXPECT_EQ(static_cast<unsigned char>(q[header.size() + 4]), 0x80);  // 1.0 of max 2.0
  EXPECT_EQ(static_cast<unsigned char>(q[header.size() + 6]), 0xff);
  EXPECT_THROW(io::write_pgm16(dir.file("r.pgm"), v, 3, 3), ShapeMismatch);
}

TEST(Pgm, EightBit) {
  TempDir dir;
  io::write_pgm8(dir.file("m.pgm"), {0, 255, 255, 0}, 2, 2);
  EXPECT_EQ(slurp(dir.file("m.pgm")), std::string("P5\n2 2\n255\n\x00\xff\xff\x00", 15));
  EXPECT_THROW(io::write_pgm8(dir.file("n.pgm"), {0}, 2, 2), ShapeMismatch);
}
