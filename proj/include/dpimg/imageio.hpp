#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dpimg/error.hpp"
#include "dpimg/matrix.hpp"

namespace dpimg {

struct Shape {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;

  std::size_t size() const { return width * height * channels; }
  bool operator==(const Shape&) const = default;
};

inline std::string ToString(const Shape& shape) {
  return std::to_string(shape.width) + "x" + std::to_string(shape.height) + "x" +
         std::to_string(shape.channels);
}

// 8-bit image, channel-planar: all of channel 0 row-major, then channel 1, ...
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c)
      : width(w), height(h), channels(c), pixels(w * h * c, 0) {}

  Shape shape() const { return {width, height, channels}; }

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) {
    return pixels[(c * height + y) * width + x];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(c * height + y) * width + x];
  }

  bool operator==(const Image&) const = default;
};

struct ImageDatabase {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }
  Shape shape() const { return images.empty() ? Shape{} : images.front().shape(); }

  void Validate() const {
    Require(labels.size() == images.size(),
            "image database: " + std::to_string(images.size()) + " images but " +
                std::to_string(labels.size()) + " labels");
    for (std::size_t i = 0; i < images.size(); ++i) {
      Require(images[i].shape() == shape(),
              "image database: image " + std::to_string(i) + " has shape " +
                  ToString(images[i].shape()) + ", expected " + ToString(shape()));
      Require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < class_names.size(),
              "image database: label " + std::to_string(labels[i]) + " of image " +
                  std::to_string(i) + " has no class name");
    }
  }
};

// ---------------------------------------------------------------------------
// Attribute vectors.

inline std::vector<double> Flatten(const Image& img) {
  return std::vector<double>(img.pixels.begin(), img.pixels.end());
}

// Clamp to [0, 255], then round half up.
inline std::uint8_t Quantize(double v) {
  if (!(v > 0.0)) return 0;  // also maps NaN to 0
  if (v >= 255.0) return 255;
  return static_cast<std::uint8_t>(std::floor(v + 0.5));
}

inline Image Unflatten(std::span<const double> v, const Shape& shape) {
  Require(v.size() == shape.size(),
          "unflatten: vector length " + std::to_string(v.size()) +
              " does not match shape " + ToString(shape));
  Image img(shape.width, shape.height, shape.channels);
  std::transform(v.begin(), v.end(), img.pixels.begin(), Quantize);
  return img;
}

// Rows [begin, end) of the database as an (end - begin) x s matrix.
inline Matrix FlattenRange(const ImageDatabase& db, std::size_t begin, std::size_t end) {
  Require(begin <= end && end <= db.size(), "flatten: range out of bounds");
  const std::size_t s = db.shape().size();
  Matrix out(end - begin, s);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& px = db.images[i].pixels;
    std::copy(px.begin(), px.end(), out.row(i - begin).begin());
  }
  return out;
}

inline Image ResizeNearest(const Image& src, std::size_t width, std::size_t height) {
  Require(width > 0 && height > 0, "resize: target size must be positive");
  Image out(width, height, src.channels);
  for (std::size_t c = 0; c < src.channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      const std::size_t sy = std::min(src.height - 1, ((2 * y + 1) * src.height) / (2 * height));
      for (std::size_t x = 0; x < width; ++x) {
        const std::size_t sx = std::min(src.width - 1, ((2 * x + 1) * src.width) / (2 * width));
        out.at(x, y, c) = src.at(sx, sy, c);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// File helpers.

inline std::vector<std::uint8_t> ReadFileBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) Fail(ErrorCode::kIo, "read failed: " + path.string());
  return bytes;
}

inline void WriteFileBytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) Fail(ErrorCode::kIo, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) Fail(ErrorCode::kIo, "write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Netpbm P5 / P6, maxval 255.

inline std::vector<std::uint8_t> EncodePnm(const Image& img) {
  Require(img.channels == 1 || img.channels == 3, "pnm: channels must be 1 or 3");
  Require(img.pixels.size() == img.shape().size(), "pnm: pixel buffer size mismatch");
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  if (img.channels == 1) {
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  } else {
    const std::size_t plane = img.width * img.height;
    out.reserve(out.size() + img.pixels.size());
    for (std::size_t i = 0; i < plane; ++i)
      for (std::size_t c = 0; c < 3; ++c) out.push_back(img.pixels[c * plane + i]);
  }
  return out;
}

namespace detail {

class PnmHeaderReader {
 public:
  PnmHeaderReader(std::span<const std::uint8_t> bytes, const std::string& name)
      : bytes_(bytes), name_(name) {}

  std::size_t ReadNumber(const char* field) {
    SkipWhitespaceAndComments();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1u << 24) Bad(std::string(field) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) Bad(std::string("expected ") + field, start);
    return value;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  void ReadRasterSeparator() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_]))
      Bad("expected whitespace before raster", pos_);
    ++pos_;
  }

  std::size_t pos() const { return pos_; }
  void set_pos(std::size_t pos) { pos_ = pos; }

  [[noreturn]] void Bad(const std::string& what, std::size_t offset) const {
    Fail(ErrorCode::kFormat,
         name_ + ": " + what + " at byte offset " + std::to_string(offset));
  }

 private:
  void SkipWhitespaceAndComments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Image DecodePnm(std::span<const std::uint8_t> bytes, const std::string& name = "pnm") {
  detail::PnmHeaderReader reader(bytes, name);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    reader.Bad("not a binary PGM/PPM (expected P5 or P6 magic)", 0);
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  reader.set_pos(2);
  const std::size_t width = reader.ReadNumber("width");
  const std::size_t height = reader.ReadNumber("height");
  const std::size_t maxval_at = reader.pos();
  const std::size_t maxval = reader.ReadNumber("maxval");
  if (maxval != 255) reader.Bad("unsupported maxval " + std::to_string(maxval), maxval_at);
  if (width == 0 || height == 0) reader.Bad("empty image", 2);
  reader.ReadRasterSeparator();

  const std::size_t raster = reader.pos();
  const std::size_t expected = width * height * channels;
  if (bytes.size() - raster != expected) {
    reader.Bad("raster holds " + std::to_string(bytes.size() - raster) +
                   " bytes, expected " + std::to_string(expected),
               raster);
  }
  Image img(width, height, channels);
  if (channels == 1) {
    std::copy(bytes.begin() + raster, bytes.end(), img.pixels.begin());
  } else {
    const std::size_t plane = width * height;
    for (std::size_t i = 0; i < plane; ++i)
      for (std::size_t c = 0; c < 3; ++c) img.pixels[c * plane + i] = bytes[raster + 3 * i + c];
  }
  return img;
}

inline void SavePgm(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1)
    Fail(ErrorCode::kFormat, "save_pgm: image has " + std::to_string(img.channels) +
                                 " channels, P5 requires 1");
  WriteFileBytes(path, EncodePnm(img));
}

inline void SavePpm(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 3)
    Fail(ErrorCode::kFormat, "save_ppm: image has " + std::to_string(img.channels) +
                                 " channels, P6 requires 3");
  WriteFileBytes(path, EncodePnm(img));
}

// Picks P5 or P6 from the channel count.
inline void SavePnm(const Image& img, const std::filesystem::path& path) {
  if (img.channels == 1) SavePgm(img, path);
  else SavePpm(img, path);
}

inline Image LoadPnm(const std::filesystem::path& path) {
  return DecodePnm(ReadFileBytes(path), path.string());
}

inline const char* PnmExtension(std::size_t channels) {
  return channels == 1 ? ".pgm" : ".ppm";
}

// ---------------------------------------------------------------------------
// IDX (big-endian) image and label files.

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::uint32_t ReadBigEndian32(std::span<const std::uint8_t> bytes, std::size_t offset,
                                     const std::string& name, const char* field) {
  if (offset + 4 > bytes.size()) {
    Fail(ErrorCode::kFormat, name + ": truncated header, field '" + field +
                                 "' at byte offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void AppendBigEndian32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::string Hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

inline void CheckPayload(std::size_t actual, std::size_t header, std::size_t expected,
                         const std::string& name) {
  if (actual < header + expected) {
    Fail(ErrorCode::kFormat, name + ": payload truncated at byte offset " +
                                 std::to_string(actual) + ", expected " +
                                 std::to_string(header + expected) + " bytes");
  }
  if (actual > header + expected) {
    Fail(ErrorCode::kFormat, name + ": " + std::to_string(actual - header - expected) +
                                 " trailing bytes after payload at byte offset " +
                                 std::to_string(header + expected));
  }
}

}  // namespace detail

inline ImageDatabase LoadIdx(const std::filesystem::path& images_path,
                             const std::filesystem::path& labels_path) {
  const std::string iname = images_path.string();
  const std::string lname = labels_path.string();
  const auto ibytes = ReadFileBytes(images_path);
  const auto lbytes = ReadFileBytes(labels_path);

  const std::uint32_t imagic = detail::ReadBigEndian32(ibytes, 0, iname, "magic");
  if (imagic != kIdxImageMagic) {
    Fail(ErrorCode::kFormat, iname + ": bad image magic " + detail::Hex32(imagic) +
                                 " at byte offset 0, expected " +
                                 detail::Hex32(kIdxImageMagic));
  }
  const std::uint32_t lmagic = detail::ReadBigEndian32(lbytes, 0, lname, "magic");
  if (lmagic != kIdxLabelMagic) {
    Fail(ErrorCode::kFormat, lname + ": bad label magic " + detail::Hex32(lmagic) +
                                 " at byte offset 0, expected " +
                                 detail::Hex32(kIdxLabelMagic));
  }
  const std::size_t count = detail::ReadBigEndian32(ibytes, 4, iname, "count");
  const std::size_t rows = detail::ReadBigEndian32(ibytes, 8, iname, "rows");
  const std::size_t cols = detail::ReadBigEndian32(ibytes, 12, iname, "cols");
  const std::size_t label_count = detail::ReadBigEndian32(lbytes, 4, lname, "count");
  if (count != label_count) {
    Fail(ErrorCode::kFormat, "count mismatch: " + iname + " declares " +
                                 std::to_string(count) + " images (byte offset 4), " +
                                 lname + " declares " + std::to_string(label_count) +
                                 " labels (byte offset 4)");
  }
  if (rows == 0 || cols == 0)
    Fail(ErrorCode::kFormat, iname + ": zero image dimension at byte offset 8");
  detail::CheckPayload(ibytes.size(), 16, count * rows * cols, iname);
  detail::CheckPayload(lbytes.size(), 8, count, lname);

  ImageDatabase db;
  db.images.reserve(count);
  db.labels.reserve(count);
  const std::size_t s = rows * cols;
  for (std::size_t i = 0; i < count; ++i) {
    Image img(cols, rows, 1);
    std::copy_n(ibytes.begin() + 16 + i * s, s, img.pixels.begin());
    db.images.push_back(std::move(img));
    const std::uint8_t label = lbytes[8 + i];
    if (label > 9) {
      Fail(ErrorCode::kFormat, lname + ": label " + std::to_string(label) +
                                   " outside 0-9 at byte offset " + std::to_string(8 + i));
    }
    db.labels.push_back(label);
  }
  for (int c = 0; c < 10; ++c) db.class_names.push_back(std::to_string(c));
  return db;
}

// Writes grayscale databases whose labels are 0-9.
inline void SaveIdx(const ImageDatabase& db, const std::filesystem::path& images_path,
                    const std::filesystem::path& labels_path) {
  db.Validate();
  const Shape shape = db.shape();
  Require(shape.channels == 1, "save_idx: IDX images must be grayscale");
  std::vector<std::uint8_t> ibytes, lbytes;
  detail::AppendBigEndian32(ibytes, kIdxImageMagic);
  detail::AppendBigEndian32(ibytes, static_cast<std::uint32_t>(db.size()));
  detail::AppendBigEndian32(ibytes, static_cast<std::uint32_t>(shape.height));
  detail::AppendBigEndian32(ibytes, static_cast<std::uint32_t>(shape.width));
  detail::AppendBigEndian32(lbytes, kIdxLabelMagic);
  detail::AppendBigEndian32(lbytes, static_cast<std::uint32_t>(db.size()));
  for (std::size_t i = 0; i < db.size(); ++i) {
    Require(db.labels[i] >= 0 && db.labels[i] <= 9, "save_idx: label outside 0-9");
    ibytes.insert(ibytes.end(), db.images[i].pixels.begin(), db.images[i].pixels.end());
    lbytes.push_back(static_cast<std::uint8_t>(db.labels[i]));
  }
  WriteFileBytes(images_path, ibytes);
  WriteFileBytes(labels_path, lbytes);
}

// ---------------------------------------------------------------------------
// Directory of P5/P6 files with a "filename,label" manifest.

struct ImageDirOptions {
  // Nearest-neighbour resize applied to every image right after decoding.
  std::optional<std::pair<std::size_t, std::size_t>> resize;
};

inline std::string Trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::map<std::string, std::string> ParseLabelManifest(const std::filesystem::path& path) {
  const auto bytes = ReadFileBytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::map<std::string, std::string> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = Trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (comma == std::string::npos)
      Fail(ErrorCode::kFormat, where + ": expected 'filename,label'");
    const std::string file = Trim(line.substr(0, comma));
    const std::string label = Trim(line.substr(comma + 1));
    if (file.empty() || label.empty())
      Fail(ErrorCode::kFormat, where + ": empty filename or label");
    if (!entries.emplace(file, label).second)
      Fail(ErrorCode::kFormat, where + ": duplicate entry for " + file);
  }
  if (entries.empty()) Fail(ErrorCode::kFormat, path.string() + ": manifest lists no files");
  return entries;
}

// Loads the files named in the manifest, ordered by filename (byte order).
// Class ids index the sorted set of distinct label strings.
inline ImageDatabase LoadImageDir(const std::filesystem::path& dir,
                                  const std::filesystem::path& manifest,
                                  const ImageDirOptions& options = {}) {
  const auto entries = ParseLabelManifest(manifest);  // std::map: sorted by name
  std::set<std::string> distinct;
  for (const auto& [file, label] : entries) distinct.insert(label);

  ImageDatabase db;
  db.class_names.assign(distinct.begin(), distinct.end());
  for (const auto& [file, label] : entries) {
    Image img;
    try {
      img = LoadPnm(dir / file);
    } catch (const Error& e) {
      Fail(e.code(), "cannot decode " + file + ": " + e.what());
    }
    if (options.resize) img = ResizeNearest(img, options.resize->first, options.resize->second);
    db.images.push_back(std::move(img));
    const auto it = std::lower_bound(db.class_names.begin(), db.class_names.end(), label);
    db.labels.push_back(static_cast<int>(it - db.class_names.begin()));
  }

  std::map<std::string, std::size_t> shape_counts;
  for (const auto& img : db.images) ++shape_counts[ToString(img.shape())];
  if (shape_counts.size() > 1) {
    const Shape expected = db.shape();
    std::string offenders;
    std::size_t i = 0;
    for (const auto& [file, label] : entries) {
      if (db.images[i].shape() != expected)
        offenders += " " + file + "(" + ToString(db.images[i].shape()) + ")";
      ++i;
    }
    Fail(ErrorCode::kFormat, "mixed image dimensions in " + dir.string() + ": expected " +
                                 ToString(expected) + ", offenders:" + offenders);
  }
  return db;
}

}  // namespace dpimg
