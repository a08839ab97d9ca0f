#include "dpimg/imageio.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <string>

#include "test_util.hpp"

namespace dpimg {
namespace {

using testing::RandomImage;
using testing::TempDir;

std::vector<std::uint8_t> BigEndianHeader(std::initializer_list<std::uint32_t> words) {
  std::vector<std::uint8_t> out;
  for (std::uint32_t w : words)
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(w >> shift));
  return out;
}

void WriteIdxPair(const TempDir& dir, std::uint32_t image_magic, std::uint32_t n_images,
                  std::uint32_t label_magic, std::uint32_t n_labels, std::size_t rows = 28,
                  std::size_t cols = 28) {
  auto images = BigEndianHeader({image_magic, n_images, static_cast<std::uint32_t>(rows),
                                 static_cast<std::uint32_t>(cols)});
  for (std::size_t i = 0; i < n_images * rows * cols; ++i)
    images.push_back(static_cast<std::uint8_t>(i * 31));
  auto labels = BigEndianHeader({label_magic, n_labels});
  for (std::uint32_t i = 0; i < n_labels; ++i) labels.push_back(static_cast<std::uint8_t>(i % 10));
  WriteFileBytes(dir / "images", images);
  WriteFileBytes(dir / "labels", labels);
}

ErrorCode CodeOf(const std::function<void()>& fn, std::string* message = nullptr) {
  try {
    fn();
  } catch (const Error& e) {
    if (message) *message = e.what();
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kInvalidArgument;
}

TEST(LoadIdxTest, TenThousandImagesOfTwentyEightSquared) {
  TempDir dir;
  WriteIdxPair(dir, 0x00000803, 10000, 0x00000801, 10000);
  const ImageDatabase db = LoadIdx(dir / "images", dir / "labels");
  ASSERT_EQ(db.size(), 10000u);
  EXPECT_EQ(db.shape(), (Shape{28, 28, 1}));
  EXPECT_EQ(db.images[0].pixels[1], 31);
  EXPECT_EQ(db.labels[9999], 9);
  EXPECT_EQ(db.class_names.size(), 10u);
}

TEST(LoadIdxTest, WrongLabelMagicIsFormatError) {
  TempDir dir;
  WriteIdxPair(dir, 0x00000803, 5, 0x00000803, 5);
  std::string message;
  EXPECT_EQ(CodeOf([&] { LoadIdx(dir / "images", dir / "labels"); }, &message),
            ErrorCode::kFormat);
  EXPECT_NE(message.find("magic"), std::string::npos);
  EXPECT_NE(message.find("byte offset 0"), std::string::npos);
}

TEST(LoadIdxTest, CountMismatchNamesBothCounts) {
  TempDir dir;
  WriteIdxPair(dir, 0x00000803, 100, 0x00000801, 99);
  std::string message;
  EXPECT_EQ(CodeOf([&] { LoadIdx(dir / "images", dir / "labels"); }, &message),
            ErrorCode::kFormat);
  EXPECT_NE(message.find("count mismatch"), std::string::npos);
  EXPECT_NE(message.find("100"), std::string::npos);
  EXPECT_NE(message.find("99"), std::string::npos);
}

TEST(LoadIdxTest, TruncatedAndOversizedPayloadsAreRejected) {
  TempDir dir;
  WriteIdxPair(dir, 0x00000803, 4, 0x00000801, 4, 3, 3);
  auto bytes = ReadFileBytes(dir / "images");
  bytes.pop_back();
  WriteFileBytes(dir / "images", bytes);
  std::string message;
  EXPECT_EQ(CodeOf([&] { LoadIdx(dir / "images", dir / "labels"); }, &message),
            ErrorCode::kFormat);
  EXPECT_NE(message.find("truncated at byte offset 51"), std::string::npos) << message;

  bytes.push_back(0);
  bytes.push_back(0);
  WriteFileBytes(dir / "images", bytes);
  EXPECT_EQ(CodeOf([&] { LoadIdx(dir / "images", dir / "labels"); }), ErrorCode::kFormat);

  auto header_only = BigEndianHeader({0x00000803, 4});
  WriteFileBytes(dir / "images", header_only);
  EXPECT_EQ(CodeOf([&] { LoadIdx(dir / "images", dir / "labels"); }, &message),
            ErrorCode::kFormat);
  EXPECT_NE(message.find("'rows'"), std::string::npos) << message;
}

TEST(LoadIdxTest, LabelOutsideDigitsIsRejected) {
  TempDir dir;
  WriteIdxPair(dir, 0x00000803, 3, 0x00000801, 3, 2, 2);
  auto labels = ReadFileBytes(dir / "labels");
  labels[9] = 12;
  WriteFileBytes(dir / "labels", labels);
  std::string message;
  EXPECT_EQ(CodeOf([&] { LoadIdx(dir / "images", dir / "labels"); }, &message),
            ErrorCode::kFormat);
  EXPECT_NE(message.find("byte offset 9"), std::string::npos);
}

TEST(LoadIdxTest, MissingFileIsIoError) {
  TempDir dir;
  EXPECT_EQ(CodeOf([&] { LoadIdx(dir / "nope", dir / "nope"); }), ErrorCode::kIo);
}

TEST(LoadIdxTest, SaveIdxRoundTrip) {
  TempDir dir;
  std::mt19937_64 gen(4);
  const ImageDatabase db = testing::RandomDatabase(7, 5, 3, 1, 10, gen);
  SaveIdx(db, dir / "i", dir / "l");
  const ImageDatabase back = LoadIdx(dir / "i", dir / "l");
  EXPECT_EQ(back.images, db.images);
  EXPECT_EQ(back.labels, db.labels);
}

TEST(PnmTest, MinimalGrayImageBytes) {
  TempDir dir;
  Image img(1, 1, 1);
  SavePgm(img, dir / "a.pgm");
  const std::string expected = std::string("P5\n1 1\n255\n") + '\0';
  const auto bytes = ReadFileBytes(dir / "a.pgm");
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), expected);
}

TEST(PnmTest, ColorImageIsInterleavedOnDisk) {
  Image img(2, 1, 3);
  // planes: R = {1, 2}, G = {3, 4}, B = {5, 6}
  img.pixels = {1, 2, 3, 4, 5, 6};
  const auto bytes = EncodePnm(img);
  const std::string header = "P6\n2 1\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(std::vector<std::uint8_t>(bytes.begin() + header.size(), bytes.end()),
            (std::vector<std::uint8_t>{1, 3, 5, 2, 4, 6}));
}

TEST(PnmTest, RandomRoundTripsAreBitExact) {
  TempDir dir;
  std::mt19937_64 gen(8);
  for (std::size_t channels : {1u, 3u}) {
    for (int i = 0; i < 10; ++i) {
      const Image img = RandomImage(8, 8, channels, gen);
      const auto path = dir / ("x" + std::string(PnmExtension(channels)));
      SavePnm(img, path);
      EXPECT_EQ(LoadPnm(path), img);
    }
  }
}

TEST(PnmTest, ChannelFormatContract) {
  TempDir dir;
  EXPECT_EQ(CodeOf([&] { SavePpm(Image(2, 2, 1), dir / "x.ppm"); }), ErrorCode::kFormat);
  EXPECT_EQ(CodeOf([&] { SavePgm(Image(2, 2, 3), dir / "x.pgm"); }), ErrorCode::kFormat);
}

TEST(PnmTest, HeaderCommentsAreSkipped) {
  const std::string text = std::string("P5\n# made by hand\n2 1\n# max\n255\n") + "\x07\x09";
  const Image img = DecodePnm(std::vector<std::uint8_t>(text.begin(), text.end()));
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{7, 9}));
}

TEST(PnmTest, MalformedInputsAreRejected) {
  auto decode = [](const std::string& text) {
    DecodePnm(std::vector<std::uint8_t>(text.begin(), text.end()), "t");
  };
  EXPECT_EQ(CodeOf([&] { decode("P2\n1 1\n255\n0"); }), ErrorCode::kFormat);
  EXPECT_EQ(CodeOf([&] { decode("P5\n1 1\n65535\n00"); }), ErrorCode::kFormat);
  EXPECT_EQ(CodeOf([&] { decode("P5\n2 2\n255\n\x01"); }), ErrorCode::kFormat);
  EXPECT_EQ(CodeOf([&] { decode("P5\n1 1\n255\n\x01\x02"); }), ErrorCode::kFormat);
  EXPECT_EQ(CodeOf([&] { decode("P5\nx 1\n255\n\x01"); }), ErrorCode::kFormat);
}

TEST(FlattenTest, RowMajorGray) {
  Image img(2, 2, 1);
  img.pixels = {1, 2, 3, 4};
  EXPECT_EQ(Flatten(img), (std::vector<double>{1, 2, 3, 4}));
  img.at(1, 0) = 9;  // x=1, y=0 is the second sample
  EXPECT_EQ(Flatten(img)[1], 9.0);
}

TEST(FlattenTest, LengthIsWidthTimesHeightTimesChannels) {
  EXPECT_EQ(Flatten(Image(28, 28, 1)).size(), 784u);
  EXPECT_EQ(Flatten(Image(80, 80, 3)).size(), 19200u);
}

TEST(FlattenTest, ColorIsChannelPlanar) {
  Image img(2, 1, 3);
  img.at(0, 0, 0) = 10;
  img.at(1, 0, 0) = 11;
  img.at(0, 0, 1) = 20;
  img.at(1, 0, 2) = 31;
  EXPECT_EQ(Flatten(img), (std::vector<double>{10, 11, 20, 0, 0, 31}));
}

TEST(UnflattenTest, ClampAndRoundHalfUp) {
  const std::vector<double> v = {255.7, -3.2, 127.5, 127.49, 0.5};
  const Image img = Unflatten(v, {5, 1, 1});
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{255, 0, 128, 127, 1}));
}

TEST(UnflattenTest, LengthMismatchIsRejected) {
  EXPECT_EQ(CodeOf([] { Unflatten(std::vector<double>(5), {2, 2, 1}); }),
            ErrorCode::kInvalidArgument);
}

TEST(UnflattenTest, RoundTripProperty) {
  std::mt19937_64 gen(12);
  std::uniform_int_distribution<int> side(1, 12);
  for (int trial = 0; trial < 200; ++trial) {
    const Image img = RandomImage(side(gen), side(gen), trial % 2 ? 3 : 1, gen);
    EXPECT_EQ(Unflatten(Flatten(img), img.shape()), img);
  }
}

TEST(ResizeTest, NearestNeighbourDownsample) {
  Image img(4, 2, 1);
  img.pixels = {0, 1, 2, 3, 4, 5, 6, 7};
  const Image half = ResizeNearest(img, 2, 1);
  // Centres of the 2 target columns sample source x = 1 and 3, row y = 1.
  EXPECT_EQ(half.pixels, (std::vector<std::uint8_t>{5, 7}));
  EXPECT_EQ(ResizeNearest(img, 4, 2), img);
}

class ImageDirTest : public ::testing::Test {
 protected:
  void WriteManifest(const std::string& text) {
    std::ofstream(dir_ / "labels.csv") << text;
  }
  TempDir dir_;
  std::mt19937_64 gen_{21};
};

TEST_F(ImageDirTest, LoadsInLexicographicOrderWithSortedClassIds) {
  const Image b = RandomImage(3, 2, 3, gen_), a = RandomImage(3, 2, 3, gen_),
              c = RandomImage(3, 2, 3, gen_);
  SavePpm(b, dir_ / "b.ppm");
  SavePpm(a, dir_ / "a.ppm");
  SavePpm(c, dir_ / "B.ppm");
  WriteManifest("# name,label\nb.ppm,male\na.ppm,female\n\nB.ppm, male \n");
  const ImageDatabase db = LoadImageDir(dir_.path(), dir_ / "labels.csv");
  ASSERT_EQ(db.size(), 3u);
  EXPECT_EQ(db.images[0], c);  // "B.ppm" < "a.ppm" < "b.ppm" in byte order
  EXPECT_EQ(db.images[1], a);
  EXPECT_EQ(db.images[2], b);
  EXPECT_EQ(db.class_names, (std::vector<std::string>{"female", "male"}));
  EXPECT_EQ(db.labels, (std::vector<int>{1, 0, 1}));
}

TEST_F(ImageDirTest, MixedDimensionsListOffenders) {
  SavePgm(RandomImage(4, 4, 1, gen_), dir_ / "a.pgm");
  SavePgm(RandomImage(4, 4, 1, gen_), dir_ / "b.pgm");
  SavePgm(RandomImage(5, 4, 1, gen_), dir_ / "odd.pgm");
  WriteManifest("a.pgm,x\nb.pgm,y\nodd.pgm,x\n");
  std::string message;
  EXPECT_EQ(CodeOf([&] { LoadImageDir(dir_.path(), dir_ / "labels.csv"); }, &message),
            ErrorCode::kFormat);
  EXPECT_NE(message.find("odd.pgm"), std::string::npos);
  EXPECT_EQ(message.find("b.pgm"), std::string::npos);

  ImageDirOptions options;
  options.resize = {{4, 4}};
  EXPECT_EQ(LoadImageDir(dir_.path(), dir_ / "labels.csv", options).shape(), (Shape{4, 4, 1}));
}

TEST_F(ImageDirTest, UndecodableFileIsNamed) {
  SavePgm(RandomImage(4, 4, 1, gen_), dir_ / "a.pgm");
  std::ofstream(dir_ / "bad.pgm") << "not an image";
  WriteManifest("a.pgm,x\nbad.pgm,y\n");
  std::string message;
  EXPECT_EQ(CodeOf([&] { LoadImageDir(dir_.path(), dir_ / "labels.csv"); }, &message),
            ErrorCode::kFormat);
  EXPECT_NE(message.find("bad.pgm"), std::string::npos);
}

TEST_F(ImageDirTest, MalformedManifestIsRejected) {
  WriteManifest("a.pgm\n");
  EXPECT_EQ(CodeOf([&] { LoadImageDir(dir_.path(), dir_ / "labels.csv"); }), ErrorCode::kFormat);
}

}  // namespace
}  // namespace dpimg
